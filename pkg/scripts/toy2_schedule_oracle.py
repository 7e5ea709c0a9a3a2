"""Exhaustive fixed-schedule search on the frozen toy2 training set.

Enumerates every joint binary shed schedule (per agent, one hold/shed bit
per control step) over the 20 frozen training scenarios and reports:

  * the best fixed schedule's mean episode return (the oracle bound used
    by the learning acceptance check), and
  * the uniform-random policy's exact mean return, which equals the
    uniform average over all joint schedules because a uniform random
    policy makes every joint action sequence equally likely.

Episode return matches the trainer's bookkeeping: the sum over control
steps of the agent-mean reward. Run from the repository root:

    python3 scripts/toy2_schedule_oracle.py

The resulting numbers are frozen into the acceptance test.
"""
import itertools
import json

import numpy as np

from gridshed.env import ShedEnv
from gridshed.grid import load_system
from gridshed.scenarios import ScenarioStream, generate_scenarios

MASTER_SEED = 424242  # must match the acceptance test's training stream
N_SCENARIOS = 20


def main():
    system = load_system("toy2")
    env = ShedEnv(system)
    scenarios = generate_scenarios(
        ScenarioStream.from_system(system, MASTER_SEED), N_SCENARIOS)
    n_steps = env.n_control_steps(scenarios[0])
    n_area = system.n_area
    joint = list(itertools.product([0, 1], repeat=n_steps * n_area))
    returns = np.zeros((len(joint), len(scenarios)))
    for s, sc in enumerate(scenarios):
        assert env.n_control_steps(sc) == n_steps
        for k, flat in enumerate(joint):
            obs = env.reset(sc)
            total = 0.0
            for step in range(n_steps):
                actions = list(flat[step * n_area:(step + 1) * n_area])
                obs, rewards, done, _ = env.step(actions)
                total += float(np.mean(rewards))
                if done:
                    break
            returns[k, s] = total
        print(f"scenario {s}: best-so-far "
              f"{returns[:, :s + 1].mean(axis=1).max():.3f}")
    means = returns.mean(axis=1)
    best_k = int(np.argmax(means))
    result = {
        "master_seed": MASTER_SEED,
        "n_scenarios": len(scenarios),
        "n_steps": n_steps,
        "oracle_best_mean_return": float(means[best_k]),
        "oracle_best_schedule": list(joint[best_k]),
        "random_policy_mean_return": float(means.mean()),
    }
    print(json.dumps(result, indent=2))


if __name__ == "__main__":
    main()
