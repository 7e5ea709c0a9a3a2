"""Episode-level RL interface over the grid simulator.

One agent per area. An episode starts at the first control instant at or
after fault clearance; each step applies per-area shed/hold decisions,
advances one control interval, and returns per-agent observations built
from the rolling window of envelope deviations.
"""
from __future__ import annotations

import copy
import math

import numpy as np

from .grid import GridSystem, Scenario, Simulator
from .tvrc import build_state, deviation, reward

HOLD, SHED = 0, 1
P_LOAD_PCT = 100.0  # per-agent remaining-load reward is in percent units


class ShedEnv:
    """Multi-agent shedding environment; one instance per worker."""

    def __init__(self, system: GridSystem, cache_resets: bool = True):
        self.system = system
        self.n_area = system.n_area
        self.areas = system.areas
        self.area_bus_lists = [system.area_buses(a) for a in self.areas]
        self.ctrl_bus = [system.controllable_bus(a) for a in self.areas]
        self.cache_resets = cache_resets
        self._reset_cache = {}
        self.sim = None

    @property
    def obs_dims(self):
        n_r = self.system.n_recent
        return [n_r * len(bl) for bl in self.area_bus_lists]

    @property
    def n_actions(self):
        return 2

    def first_control_time(self, scenario: Scenario) -> float:
        tc = self.system.clock.t_control
        return math.ceil(scenario.t_clear / tc - 1e-9) * tc

    def reset(self, scenario: Scenario):
        key = scenario.key()
        cached = self._reset_cache.get(key) if self.cache_resets else None
        if cached is None:
            sim = Simulator(self.system, scenario)
            sim.advance_to(self.first_control_time(scenario))
            if self.cache_resets:
                self._reset_cache[key] = copy.deepcopy(sim)
                cached = self._reset_cache[key]
            else:
                cached = sim
        self.sim = copy.deepcopy(cached)
        self.t_now = self.first_control_time(scenario)
        self._rebuild_history()
        self._last_interval_min = [float("nan")] * self.n_area
        return self._observations()

    def _rebuild_history(self):
        """Per-area post-clearance deviation history from recorded samples."""
        t_clear = self.sim.scenario.t_clear
        times, volts, _ = self.sim.samples()
        self.history = [[] for _ in range(self.n_area)]
        for t, v in zip(times, volts):
            if t >= t_clear - 1e-9:
                devs = deviation(v, t, t_clear)
                for j, buses in enumerate(self.area_bus_lists):
                    self.history[j].append(devs[buses])

    def _observations(self):
        n_r = self.system.n_recent
        return [build_state(np.array(h) if h else np.zeros((0, len(bl))), n_r)
                for h, bl in zip(self.history, self.area_bus_lists)]

    def info(self):
        return {
            "t": self.t_now,
            "ucum": [self.sim.ucum[b] for b in self.ctrl_bus],
            "last_interval_min_dev": list(self._last_interval_min),
            "failed": self.sim.failed,
        }

    def step(self, actions):
        if len(actions) != self.n_area:
            raise ValueError(f"expected {self.n_area} actions, got {len(actions)}")
        sim = self.sim
        system = self.system
        t_clear = sim.scenario.t_clear
        n_before = len(sim.sample_times)
        for j, act in enumerate(actions):
            if act == SHED:
                sim.shed_area(self.areas[j])
        t_end = self.t_now + system.clock.t_control
        sim.advance_to(t_end)

        times, volts, _ = sim.samples()
        new_times = times[n_before:]
        new_volts = volts[n_before:]
        rewards = []
        for j, buses in enumerate(self.area_bus_lists):
            devs = []
            for t, v in zip(new_times, new_volts):
                if t >= t_clear - 1e-9:
                    d = deviation(v, t, t_clear)[buses]
                    devs.append(d)
                    self.history[j].append(d)
            devs = np.array(devs) if devs else np.zeros((0, len(buses)))
            if sim.failed:
                r = -system.penalty
            else:
                r = reward(devs, sim.ucum[self.ctrl_bus[j]], P_LOAD_PCT,
                           system.penalty)
            self._last_interval_min[j] = float(np.min(devs)) if devs.size else float("nan")
            rewards.append(r)

        self.t_now = t_end
        done = sim.failed or self.t_now >= system.clock.horizon - 1e-9
        return self._observations(), rewards, done, self.info()

    def n_control_steps(self, scenario: Scenario) -> int:
        tc = self.system.clock.t_control
        return max(0, int(round((self.system.clock.horizon
                                 - self.first_control_time(scenario)) / tc)))
