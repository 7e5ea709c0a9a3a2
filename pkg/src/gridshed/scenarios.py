"""Reproducible random contingency generation.

Scenario k is a pure function of (master_seed, k): each index gets its own
PCG64 stream seeded by the pair, so lists regenerate identically regardless
of how many scenarios were drawn before.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import ConfigError, GridSystem, Scenario


@dataclass(frozen=True)
class ScenarioStream:
    master_seed: int
    load_scale_range: tuple
    duration_range: tuple
    conductance_range: tuple
    lines: tuple
    start_time: float

    @classmethod
    def from_system(cls, system: GridSystem, master_seed: int):
        f = system.fault
        lines = f.candidate_lines or tuple(range(len(system.lines)))
        return cls(master_seed=int(master_seed),
                   load_scale_range=f.load_scale_range,
                   duration_range=f.duration_range,
                   conductance_range=f.conductance_range,
                   lines=lines,
                   start_time=f.start_time)

    def scenario(self, k: int) -> Scenario:
        if not self.lines:
            raise ConfigError("scenario stream has an empty faultable line set")
        rng = np.random.default_rng([self.master_seed, int(k)])
        return Scenario(
            load_scale=float(rng.uniform(*self.load_scale_range)),
            line=int(self.lines[rng.integers(len(self.lines))]),
            t_start=self.start_time,
            duration=float(rng.uniform(*self.duration_range)),
            conductance=float(rng.uniform(*self.conductance_range)),
            seed=int(rng.integers(2 ** 31)),
        )


def generate_scenarios(stream: ScenarioStream, count: int):
    if count < 1:
        raise ConfigError("scenario count must be >= 1")
    return [stream.scenario(k) for k in range(count)]
