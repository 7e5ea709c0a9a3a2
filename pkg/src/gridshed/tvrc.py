"""Transient voltage recovery criteria: envelope deviations, rewards,
shedding cost, and the evaluation metrics."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

# (offset from clearance time, minimum voltage) -- closed on the left
ENVELOPE = ((0.0, 0.70), (0.33, 0.80), (0.5, 0.90), (1.5, 0.95))


def envelope_threshold(t: float, t_clear: float) -> float:
    """Minimum acceptable voltage at time t (>= t_clear)."""
    dt = t - t_clear
    if dt < -1e-9:
        raise ValueError(f"envelope undefined before clearance (t={t}, t_clear={t_clear})")
    level = ENVELOPE[0][1]
    for offset, lvl in ENVELOPE:
        if dt >= offset - 1e-9:
            level = lvl
    return level


def deviation(v, t: float, t_clear: float):
    """Voltage margin above the recovery envelope; negative means violated."""
    return np.asarray(v, dtype=np.float64) - envelope_threshold(t, t_clear)


def build_state(history, n_recent: int):
    """Fixed-length observation: the latest n_recent deviations per bus,
    zero-padded at the front, newest last, one block per bus."""
    hist = np.asarray(history, dtype=np.float64)
    if hist.ndim == 1:
        hist = hist.reshape(-1, 1)
    n_bus = hist.shape[1]
    out = np.zeros(n_recent * n_bus)
    take = min(n_recent, hist.shape[0])
    for b in range(n_bus):
        block = out[b * n_recent:(b + 1) * n_recent]
        if take:
            block[n_recent - take:] = hist[-take:, b]
    return out


def reward(interval_deviations, u_cum: float, p_load_pct: float, penalty: float) -> float:
    """Per-agent reward over one elapsed control interval: the penalty if
    any in-area sample violated the envelope, else the remaining load."""
    devs = np.asarray(interval_deviations, dtype=np.float64)
    if devs.size and np.min(devs) < 0.0:
        return -float(penalty)
    return float(p_load_pct) * (1.0 - float(u_cum))


def shed_cost(u, p_initial) -> float:
    """Total shedding cost: sum of initial loads times shed fractions."""
    u = np.asarray(u, dtype=np.float64)
    p = np.asarray(p_initial, dtype=np.float64)
    if np.any(u < -1e-12) or np.any(u > 1.0 + 1e-12):
        raise ValueError("shed fractions must lie in [0, 1]")
    return float(np.sum(p * u))


def mean_voltage_deviation(final_deviations) -> float:
    devs = np.asarray(final_deviations, dtype=np.float64)
    if devs.size == 0:
        raise ValueError("mean deviation needs at least one bus")
    return float(np.mean(devs))


FAILURE_VOLTAGE = 0.5  # terminal voltage below this counts as instability


@dataclass
class CaseRecord:
    case_id: int
    seed: int
    success: bool
    failure: bool
    shed_pct: float
    vdev_pu: float


@dataclass
class MetricsReport:
    r_fal: float
    p_dev: float
    v_dev: float
    r_tvrc: float
    n_test: int
    cases: list = field(default_factory=list)
    latency_ms: float = 0.0

    def aggregate_dict(self):
        return {
            "n_test": self.n_test,
            "R_fal_pct": self.r_fal,
            "P_dev_pct": self.p_dev,
            "V_dev_pu": self.v_dev,
            "R_TVRC_pct": self.r_tvrc,
            "latency_ms_per_agent_step": self.latency_ms,
        }

    def case_rows(self):
        header = ("case_id", "seed", "success", "failure", "shed_pct", "vdev_pu")
        rows = [(c.case_id, c.seed, int(c.success), int(c.failure),
                 c.shed_pct, c.vdev_pu) for c in self.cases]
        return header, rows


def _case_stats(env) -> tuple:
    """(success, failure, shed_pct, vdev) from a finished episode."""
    sim = env.sim
    system = env.system
    t_clear = sim.scenario.t_clear
    times, volts, _ = sim.samples()
    post = times >= t_clear - 1e-9
    success = not sim.failed
    if success and post.any():
        for t, v in zip(times[post], volts[post]):
            if np.min(deviation(v, t, t_clear)) < 0.0:
                success = False
                break
    failure = sim.failed or bool(np.min(volts[-1]) < FAILURE_VOLTAGE)
    ctrl = system.controllable
    shed_pct = 100.0 * shed_cost(sim.ucum[ctrl], system.p0[ctrl]) / np.sum(system.p0[ctrl])
    vdev = mean_voltage_deviation(
        deviation(volts[-1], max(times[-1], t_clear), t_clear))
    return success, failure, shed_pct, vdev


def aggregate_cases(cases, latency_ms: float = 0.0) -> MetricsReport:
    """Fold per-case records into the four suite metrics."""
    n = len(cases)
    if n < 1:
        raise ValueError("need at least one case")
    vdevs = [c.vdev_pu for c in cases if np.isfinite(c.vdev_pu)]
    return MetricsReport(
        r_fal=100.0 * sum(c.failure for c in cases) / n,
        p_dev=float(np.mean([c.shed_pct for c in cases])),
        v_dev=float(np.mean(vdevs)) if vdevs else float("nan"),
        r_tvrc=100.0 * sum(c.success for c in cases) / n,
        n_test=n,
        cases=cases,
        latency_ms=latency_ms,
    )


def evaluate_suite(controller, system, scenarios) -> MetricsReport:
    """Run every scenario under the controller (greedy/deterministic) and
    aggregate the four metrics. Controller exceptions fail the case."""
    from .env import ShedEnv  # lazy: env builds on this module

    if len(scenarios) < 1:
        raise ValueError("need at least one scenario")
    env = ShedEnv(system)
    cases = []
    act_time = 0.0
    agent_steps = 0
    for cid, sc in enumerate(scenarios):
        try:
            controller.reset(system)
            obs = env.reset(sc)
            done = False
            info = env.info()
            while not done:
                t0 = time.perf_counter()
                actions = controller.act(obs, info)
                act_time += time.perf_counter() - t0
                agent_steps += system.n_area
                obs, _, done, info = env.step(actions)
            success, failed, shed_pct, vdev = _case_stats(env)
        except Exception:
            log.exception("controller failed on case %d", cid)
            success, failed, shed_pct, vdev = False, True, 0.0, float("nan")
        cases.append(CaseRecord(cid, sc.seed, success, failed, shed_pct, vdev))

    return aggregate_cases(cases,
                           latency_ms=1000.0 * act_time / max(agent_steps, 1))
