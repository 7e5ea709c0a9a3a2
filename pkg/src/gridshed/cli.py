"""Command-line harness: training, evaluation, comparison, simulation,
and scenario generation.

Every command is reproducible: (config, seed) determines every output
byte except the timestamp recorded in the run manifest. CSV files are
comma-separated with a header row, LF line endings, and floats printed
with 9 significant digits.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from .baselines import (DqnController, DqnHyperparameters, DqnTrainer,
                        NoControl, RuleController)
from .env import ShedEnv
from .grid import ConfigError, load_system, trajectory_rows
from .madrl import GreedyController, Hyperparameters, SacTrainer
from .scenarios import ScenarioStream, generate_scenarios
from .tvrc import envelope_threshold, evaluate_suite

CONTROLLER_KINDS = ("proposed", "masac", "madqn", "rule", "none")


class CliError(Exception):
    """Invalid arguments or configuration; exits with status 2."""


def fmt(x) -> str:
    if isinstance(x, float) or isinstance(x, np.floating):
        return format(float(x), ".9g")
    return str(x)


def write_csv(path, header, rows):
    with open(path, "w", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(fmt(x) for x in row) + "\n")


def write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def write_manifest(out_dir, command, args_dict, timings, extra=None):
    manifest = {
        "command": command,
        "args": args_dict,
        "timings_s": timings,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        manifest.update(extra)
    write_json(Path(out_dir) / "manifest.json", manifest)


def parse_hp_overrides(pairs, hp_cls):
    """Apply KEY=VALUE overrides onto a hyperparameter dataclass."""
    fields = {f.name: f for f in dataclasses.fields(hp_cls)}
    kwargs = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise CliError(f"bad hyperparameter override {pair!r}; use KEY=VALUE")
        key, val = pair.split("=", 1)
        if key not in fields:
            raise CliError(f"unknown hyperparameter {key!r}")
        ftype = fields[key].type
        try:
            if ftype in ("bool", bool):
                kwargs[key] = val.lower() in ("1", "true", "yes")
            elif ftype in ("int", int):
                kwargs[key] = int(val)
            else:
                kwargs[key] = float(val)
        except ValueError as e:
            raise CliError(f"bad value for {key}: {e}")
    try:
        return hp_cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise CliError(str(e))


def make_trainer(kind, system, seed, hp_pairs):
    if kind == "proposed":
        return SacTrainer(system, parse_hp_overrides(hp_pairs, Hyperparameters),
                          seed=seed)
    if kind == "masac":
        hp = parse_hp_overrides(hp_pairs, Hyperparameters)
        hp = dataclasses.replace(hp, use_attention=False)
        return SacTrainer(system, hp, seed=seed)
    if kind == "madqn":
        return DqnTrainer(system,
                          parse_hp_overrides(hp_pairs, DqnHyperparameters),
                          seed=seed)
    raise CliError(f"controller {kind!r} is not trainable")


def load_controller(kind, system, checkpoint):
    if kind == "none":
        return NoControl()
    if kind == "rule":
        return RuleController()
    if checkpoint is None:
        raise CliError(f"controller {kind!r} needs a checkpoint")
    try:
        if kind in ("proposed", "masac"):
            return GreedyController(SacTrainer.load(system, checkpoint))
        if kind == "madqn":
            return DqnController(DqnTrainer.load(system, checkpoint))
    except (OSError, ValueError, KeyError) as e:
        raise CliError(f"cannot load checkpoint {checkpoint}: {e}")
    raise CliError(f"unknown controller kind {kind!r}")


def _outdir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _system(args):
    try:
        return load_system(args.config)
    except (ConfigError, OSError) as e:
        raise CliError(str(e))


def cmd_train(args):
    system = _system(args)
    out = _outdir(args)
    if args.controller not in ("proposed", "masac", "madqn"):
        raise CliError(f"cannot train controller {args.controller!r}")
    if args.episodes < 0:
        raise CliError("episodes must be >= 0")
    trainer = make_trainer(args.controller, system, args.seed, args.hp)
    t0 = time.perf_counter()
    history = trainer.train(args.episodes)
    train_s = time.perf_counter() - t0
    trainer.save(out / "checkpoint.json")
    rows = [(i, r, m) for i, (r, m) in
            enumerate(zip(history["returns"], history["moving_avg"]))]
    write_csv(out / "curve.csv", ("episode", "reward", "moving_avg"), rows)
    write_manifest(out, "train",
                   {"config": args.config, "controller": args.controller,
                    "seed": args.seed, "episodes": args.episodes,
                    "hp": args.hp or []},
                   {"train": train_s},
                   {"hyperparameters": dataclasses.asdict(trainer.hp)})
    print(f"trained {args.controller} for {args.episodes} episodes "
          f"-> {out / 'checkpoint.json'}")
    return 0


def _run_suite(controller, system, scenarios):
    t0 = time.perf_counter()
    report = evaluate_suite(controller, system, scenarios)
    return report, time.perf_counter() - t0


def cmd_eval(args):
    system = _system(args)
    out = _outdir(args)
    if args.ntest < 1:
        raise CliError("ntest must be >= 1")
    controller = load_controller(args.controller, system, args.checkpoint)
    scenarios = generate_scenarios(
        ScenarioStream.from_system(system, args.seed), args.ntest)
    report, eval_s = _run_suite(controller, system, scenarios)
    header, rows = report.case_rows()
    write_csv(out / "cases.csv", header, rows)
    write_json(out / "aggregate.json", report.aggregate_dict())
    write_manifest(out, "eval",
                   {"config": args.config, "controller": args.controller,
                    "checkpoint": args.checkpoint, "seed": args.seed,
                    "ntest": args.ntest},
                   {"eval": eval_s},
                   {"latency_ms_per_agent_step": report.latency_ms})
    agg = report.aggregate_dict()
    print(f"{args.controller}: R_TVRC={agg['R_TVRC_pct']:.2f}% "
          f"R_fal={agg['R_fal_pct']:.2f}% P_dev={agg['P_dev_pct']:.2f}% "
          f"V_dev={agg['V_dev_pu']:.4f}")
    return 0


def parse_controller_spec(spec):
    """'rule' or 'proposed=checkpoint.json' -> (kind, checkpoint, label)."""
    if "=" in spec:
        kind, ckpt = spec.split("=", 1)
    else:
        kind, ckpt = spec, None
    if kind not in CONTROLLER_KINDS:
        raise CliError(f"unknown controller kind {kind!r}")
    return kind, ckpt


def cmd_compare(args):
    system = _system(args)
    out = _outdir(args)
    specs = [parse_controller_spec(s) for s in args.controllers]
    if len(specs) < 2:
        raise CliError("compare needs at least two controllers")
    if args.ntest < 1:
        raise CliError("ntest must be >= 1")
    scenarios = generate_scenarios(
        ScenarioStream.from_system(system, args.seed), args.ntest)
    results = []
    timings = {}
    for idx, (kind, ckpt) in enumerate(specs):
        label = f"{idx}_{kind}"
        controller = load_controller(kind, system, ckpt)
        report, secs = _run_suite(controller, system, scenarios)
        timings[label] = secs
        results.append((label, kind, report))
        header, rows = report.case_rows()
        write_csv(out / f"cases_{label}.csv", header, rows)
    agg_header = ("controller", "n_test", "R_fal_pct", "P_dev_pct",
                  "V_dev_pu", "R_TVRC_pct", "latency_ms_per_agent_step")
    agg_rows = []
    for label, kind, report in results:
        a = report.aggregate_dict()
        agg_rows.append((label, a["n_test"], a["R_fal_pct"], a["P_dev_pct"],
                         a["V_dev_pu"], a["R_TVRC_pct"],
                         a["latency_ms_per_agent_step"]))
    write_csv(out / "compare.csv", agg_header, agg_rows)
    write_json(out / "compare.json",
               {label: report.aggregate_dict()
                for label, _, report in results})
    # per-case deltas of each controller against the first one
    base = results[0][2].cases
    delta_header = ["case_id"]
    for label, _, _ in results[1:]:
        delta_header += [f"d_success_{label}", f"d_shed_pct_{label}"]
    delta_rows = []
    for i, base_case in enumerate(base):
        row = [base_case.case_id]
        for _, _, report in results[1:]:
            c = report.cases[i]
            row += [int(c.success) - int(base_case.success),
                    c.shed_pct - base_case.shed_pct]
        delta_rows.append(tuple(row))
    write_csv(out / "deltas.csv", tuple(delta_header), delta_rows)
    write_manifest(out, "compare",
                   {"config": args.config, "controllers": args.controllers,
                    "seed": args.seed, "ntest": args.ntest},
                   timings)
    for label, _, report in results:
        a = report.aggregate_dict()
        print(f"{label}: R_TVRC={a['R_TVRC_pct']:.2f}% "
              f"R_fal={a['R_fal_pct']:.2f}% P_dev={a['P_dev_pct']:.2f}% "
              f"V_dev={a['V_dev_pu']:.4f}")
    return 0


def parse_schedule(text, n_area, n_steps):
    """Comma-separated control steps, each a string of N binary digits."""
    tokens = text.split(",")
    if len(tokens) != n_steps:
        raise CliError(
            f"schedule has {len(tokens)} steps; this scenario needs {n_steps}")
    schedule = []
    for tok in tokens:
        if len(tok) != n_area or any(c not in "01" for c in tok):
            raise CliError(
                f"schedule step {tok!r} must be {n_area} binary digits")
        schedule.append([int(c) for c in tok])
    return schedule


def cmd_simulate(args):
    system = _system(args)
    out = _outdir(args)
    if args.scenario_index is not None:
        stream = ScenarioStream.from_system(system, args.seed)
        scenario = stream.scenario(args.scenario_index)
    else:
        scenario = system.default_scenario()
    env = ShedEnv(system, cache_resets=False)
    n_steps = env.n_control_steps(scenario)
    schedule = (parse_schedule(args.schedule, system.n_area, n_steps)
                if args.schedule else [[0] * system.n_area] * n_steps)
    env.reset(scenario)
    done = False
    for actions in schedule:
        if done:
            break
        _, _, done, _ = env.step(actions)
    rows = trajectory_rows(env.sim)
    write_csv(out / "trajectory.csv", ("t", "bus", "voltage_pu", "ucum"), rows)
    t_clear = scenario.t_clear
    dt = system.clock.dt_obs
    n = int(round((system.clock.horizon - t_clear) / dt))
    env_rows = [(t_clear + k * dt,
                 envelope_threshold(t_clear + k * dt, t_clear))
                for k in range(n + 1)]
    write_csv(out / "envelope.csv", ("t", "threshold"), env_rows)
    write_manifest(out, "simulate",
                   {"config": args.config, "seed": args.seed,
                    "scenario_index": args.scenario_index,
                    "schedule": args.schedule,
                    "scenario": dataclasses.asdict(scenario)},
                   {})
    print(f"simulated scenario (failed={env.sim.failed}) -> "
          f"{out / 'trajectory.csv'}")
    return 0


def cmd_gen_scenarios(args):
    system = _system(args)
    out = _outdir(args)
    if args.count < 1:
        raise CliError("count must be >= 1")
    stream = ScenarioStream.from_system(system, args.seed)
    scenarios = generate_scenarios(stream, args.count)
    rows = [(k, s.load_scale, s.line, s.t_start, s.duration, s.conductance,
             s.seed) for k, s in enumerate(scenarios)]
    write_csv(out / "scenarios.csv",
              ("index", "load_scale", "line", "t_start", "duration",
               "conductance", "seed"), rows)
    write_manifest(out, "gen-scenarios",
                   {"config": args.config, "seed": args.seed,
                    "count": args.count}, {})
    print(f"wrote {args.count} scenarios -> {out / 'scenarios.csv'}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="gridshed",
        description="Desk-scale decentralized under-voltage load shedding lab")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default="default4",
                        help="grid config name or path (default: default4)")
        sp.add_argument("--seed", type=int, default=0, help="master seed")
        sp.add_argument("--out", default="out", help="output directory")

    sp = sub.add_parser("train", help="train a controller")
    common(sp)
    sp.add_argument("--controller", default="proposed",
                    choices=("proposed", "masac", "madqn"))
    sp.add_argument("--episodes", type=int, default=2000)
    sp.add_argument("--hp", action="append", metavar="KEY=VALUE",
                    help="hyperparameter override (repeatable)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a controller on a test suite")
    common(sp)
    sp.add_argument("--controller", default="proposed",
                    choices=CONTROLLER_KINDS)
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--ntest", type=int, default=200)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("compare",
                        help="run several controllers on one seeded suite")
    common(sp)
    sp.add_argument("--controller", dest="controllers", action="append",
                    required=True, metavar="KIND[=CHECKPOINT]",
                    help="controller spec (repeat for each controller)")
    sp.add_argument("--ntest", type=int, default=200)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("simulate", help="export one trajectory as CSV")
    common(sp)
    sp.add_argument("--scenario-index", type=int, default=None,
                    help="index into the seeded scenario stream "
                         "(default: the config's default scenario)")
    sp.add_argument("--schedule", default=None,
                    help="fixed actions, e.g. '10,01,00,...' (one token per "
                         "control step, one binary digit per area)")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("gen-scenarios", help="write a scenario table")
    common(sp)
    sp.add_argument("--count", type=int, default=200)
    sp.set_defaults(func=cmd_gen_scenarios)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
