"""Reduced-order dynamic grid environment.

A Thevenin source (EMF node, fixed voltage) feeds a small reactive network
with exponential-recovery dynamic loads at the buses. The algebraic network
is solved by Newton-Raphson at every integration step; the per-bus recovery
state makes post-fault demand overshoot its static characteristic, which is
what produces fault-induced delayed voltage recovery. Faults are shunt
conductances at a line midpoint, active on [t_start, t_clear).

Node 0 is always the source EMF node (slack at voltage E); config buses get
indices 1..n. Line endpoints may name "source" to attach to node 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml


class ConfigError(ValueError):
    """Raised for invalid grid or scenario configuration."""


class CollapseError(RuntimeError):
    """Network solver failed to converge: treated as voltage collapse."""


@dataclass(frozen=True)
class LoadModel:
    """Exponential-recovery load constants (per-bus defaults)."""

    alpha_t: float = 2.0   # transient (static) voltage exponent
    alpha_s: float = 0.0   # steady-state voltage exponent
    t_p: float = 3.0       # recovery time constant, s
    power_factor: float = 0.95

    @property
    def tan_phi(self) -> float:
        pf = self.power_factor
        return math.sqrt(1.0 - pf * pf) / pf


@dataclass(frozen=True)
class ClockConfig:
    t_control: float = 1.0   # control interval T_c, s
    dt_obs: float = 0.1      # voltage sampling interval, s
    dt_int: float = 0.01     # internal RK4 step, s
    horizon: float = 10.0    # episode horizon T, s

    def validate(self):
        for small, big, names in (
            (self.dt_int, self.dt_obs, "dt_int/dt_obs"),
            (self.dt_obs, self.t_control, "dt_obs/t_control"),
        ):
            ratio = big / small
            if abs(ratio - round(ratio)) > 1e-9:
                raise ConfigError(f"{names}: {small} must divide {big}")


@dataclass(frozen=True)
class SheddingConfig:
    step: float = 0.1
    max_rounds: int = 5

    @property
    def cap(self) -> float:
        return self.step * self.max_rounds


@dataclass(frozen=True)
class FaultConfig:
    start_time: float = 1.0
    default_line: int = 0
    default_conductance: float = 8.0
    default_duration: float = 0.08
    default_load_scale: float = 1.0
    conductance_range: tuple = (5.0, 10.0)
    duration_range: tuple = (0.06, 0.1)
    load_scale_range: tuple = (0.9, 1.2)
    candidate_lines: tuple = ()


@dataclass(frozen=True)
class Scenario:
    """One randomized contingency."""

    load_scale: float
    line: int
    t_start: float
    duration: float
    conductance: float
    seed: int = 0

    @property
    def t_clear(self) -> float:
        return self.t_start + self.duration

    def key(self):
        return (self.load_scale, self.line, self.t_start, self.duration,
                self.conductance, self.seed)


@dataclass
class GridSystem:
    """Algebraic network plus load/clock/fault configuration.

    Arrays are indexed by bus (0..n_bus-1), which maps to network node
    index bus+1; node 0 is the source EMF.
    """

    source_voltage: float
    bus_names: list
    bus_area: np.ndarray          # int area id per bus
    p0: np.ndarray                # initial active load, pu
    controllable: np.ndarray      # bool per bus
    lines: list                   # (from_node, to_node, x) with node indices
    load_model: LoadModel
    clock: ClockConfig
    shedding: SheddingConfig
    fault: FaultConfig
    penalty: float = 1000.0
    n_recent: int = 10
    name: str = "grid"
    steady_voltages: np.ndarray = field(default=None, repr=False)

    @property
    def n_bus(self):
        return len(self.bus_names)

    @property
    def areas(self):
        return sorted(set(int(a) for a in self.bus_area))

    @property
    def n_area(self):
        return len(self.areas)

    def area_buses(self, area):
        return [i for i in range(self.n_bus) if self.bus_area[i] == area]

    def controllable_bus(self, area):
        hits = [i for i in self.area_buses(area) if self.controllable[i]]
        if len(hits) != 1:
            raise ConfigError(f"area {area} has {len(hits)} controllable buses")
        return hits[0]

    def controllable_buses(self):
        return [self.controllable_bus(a) for a in self.areas]

    def default_scenario(self):
        f = self.fault
        return Scenario(load_scale=f.default_load_scale, line=f.default_line,
                        t_start=f.start_time, duration=f.default_duration,
                        conductance=f.default_conductance, seed=0)


# ---------------------------------------------------------------------------
# Ybus assembly

def build_ybus(n_nodes, lines, faulted_line=None, fault_conductance=0.0):
    """Bus admittance matrix; the faulted line gets a midpoint shunt that is
    Kron-eliminated so the returned matrix keeps the original node set."""
    m = n_nodes + (1 if faulted_line is not None else 0)
    Y = np.zeros((m, m), dtype=complex)

    def stamp(i, j, x):
        y = 1.0 / (1j * x)
        Y[i, i] += y
        Y[j, j] += y
        Y[i, j] -= y
        Y[j, i] -= y

    for idx, (f, t, x) in enumerate(lines):
        if faulted_line is not None and idx == faulted_line:
            mid = m - 1
            stamp(f, mid, x / 2.0)
            stamp(mid, t, x / 2.0)
            Y[mid, mid] += fault_conductance
        else:
            stamp(f, t, x)
    if faulted_line is not None:
        mid = m - 1
        Y = Y[:-1, :-1] - np.outer(Y[:-1, mid], Y[mid, :-1]) / Y[mid, mid]
    return Y


# ---------------------------------------------------------------------------
# Newton-Raphson network solution

MAX_NEWTON_ITER = 50

# The recovery-driven constant-power load portion converts to impedance
# below this voltage, which keeps the network equations solvable while a
# fault shunt is applied.
LOW_VOLTAGE_BREAK = 0.6


def _lv_scale(V):
    return np.where(V >= LOW_VOLTAGE_BREAK, 1.0, (V / LOW_VOLTAGE_BREAK) ** 2)


def _lv_scale_grad(V):
    return np.where(V >= LOW_VOLTAGE_BREAK, 0.0, 2.0 * V / LOW_VOLTAGE_BREAK ** 2)


def _newton(Y, E, a_p, b_p, alpha_t, tan_phi, v0=None, th0=None, tol=1e-10,
            lv_convert=False):
    """Solve the power balance with per-bus demand a_p + b_p * V**alpha_t
    (reactive demand at constant power factor). Node 0 is slack at E."""
    n = len(a_p)
    V = np.ones(n) if v0 is None else v0.copy()
    th = np.zeros(n) if th0 is None else th0.copy()

    def mismatch(V, th):
        Vc = np.concatenate(([E + 0j], V * np.exp(1j * th)))
        Ibus = Y @ Vc
        S = Vc * np.conj(Ibus)
        s = _lv_scale(V) if lv_convert else 1.0
        pd = a_p * s + b_p * V ** alpha_t
        F = np.concatenate((S[1:].real + pd, S[1:].imag + tan_phi * pd))
        return F, Vc, Ibus

    F, Vc, Ibus = mismatch(V, th)
    resid = float(np.max(np.abs(F))) if n else 0.0
    for _ in range(MAX_NEWTON_ITER):
        if resid < tol:
            return V, th, True, resid
        diagV = np.diag(Vc)
        diagI = np.diag(Ibus)
        diagVn = np.diag(Vc / np.abs(Vc))
        dS_dth = 1j * diagV @ np.conj(diagI - Y @ diagV)
        dS_dVm = diagV @ np.conj(Y @ diagVn) + np.conj(diagI) @ diagVn
        dpd_dV = b_p * alpha_t * V ** (alpha_t - 1.0)
        if lv_convert:
            dpd_dV = dpd_dV + a_p * _lv_scale_grad(V)
        J = np.empty((2 * n, 2 * n))
        J[:n, :n] = dS_dth[1:, 1:].real
        J[:n, n:] = dS_dVm[1:, 1:].real + np.diag(dpd_dV)
        J[n:, :n] = dS_dth[1:, 1:].imag
        J[n:, n:] = dS_dVm[1:, 1:].imag + np.diag(tan_phi * dpd_dV)
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            return V, th, False, resid
        # backtracking keeps stressed (near-fault) solves from oscillating
        step = 1.0
        for _bt in range(6):
            th_new = th + step * dx[:n]
            V_new = np.maximum(V + step * dx[n:], 1e-6)
            F_new, Vc_new, Ibus_new = mismatch(V_new, th_new)
            resid_new = float(np.max(np.abs(F_new))) if n else 0.0
            if resid_new < resid or resid_new < tol:
                break
            step *= 0.5
        V, th, F, Vc, Ibus, resid = V_new, th_new, F_new, Vc_new, Ibus_new, resid_new
    return V, th, False, resid


def _solve_or_retry(Y, E, a_p, b_p, alpha_t, tan_phi, v0, th0, tol=1e-10,
                    lv_convert=False):
    V, th, ok, resid = _newton(Y, E, a_p, b_p, alpha_t, tan_phi, v0, th0, tol,
                               lv_convert)
    if not ok and v0 is not None:
        V, th, ok, resid = _newton(Y, E, a_p, b_p, alpha_t, tan_phi, None, None,
                                   tol, lv_convert)
    return V, th, ok, resid


def solve_network(system: GridSystem, p_demand, q_demand=None):
    """Solve the network for constant-power demands (pu, per bus).

    Returns (voltage magnitudes per bus, converged flag). A False flag is
    the voltage-collapse signal.
    """
    p = np.asarray(p_demand, dtype=np.float64)
    if p.shape != (system.n_bus,):
        raise ConfigError(f"expected {system.n_bus} demands, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ConfigError("demands must be finite and non-negative")
    tan_phi = system.load_model.tan_phi
    if q_demand is not None:
        q = np.asarray(q_demand, dtype=np.float64)
        # constant-pf solver interface: fold explicit Q into an effective angle
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(p > 0, q / np.where(p > 0, p, 1.0), 0.0)
        if not np.allclose(ratio, ratio[0] if len(ratio) else 0.0):
            raise ConfigError("per-bus Q must share a single power factor")
        tan_phi = float(ratio[0]) if len(ratio) else tan_phi
    Y = build_ybus(system.n_bus + 1, system.lines)
    V, _, ok, _ = _newton(Y, system.source_voltage, p, np.zeros_like(p),
                          system.load_model.alpha_t, tan_phi, tol=1e-12)
    return V, ok


# ---------------------------------------------------------------------------
# System construction

def build_system(config: dict) -> GridSystem:
    """Validate a config dict and return a steady-state-initialized system."""
    try:
        buses = config["buses"]
        raw_lines = config["lines"]
        E = float(config["source_voltage"])
    except KeyError as e:
        raise ConfigError(f"missing config key {e}")
    names = [b["name"] for b in buses]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate bus names")
    index = {"source": 0}
    for i, nm in enumerate(names):
        index[nm] = i + 1
    lines = []
    for ln in raw_lines:
        x = float(ln["x"])
        if x <= 0:
            raise ConfigError(f"line {ln} has non-positive reactance")
        try:
            lines.append((index[ln["from"]], index[ln["to"]], x))
        except KeyError as e:
            raise ConfigError(f"line references unknown bus {e}")

    # connectivity pre-fault (BFS from the source node)
    adj = {i: set() for i in range(len(names) + 1)}
    for f, t, _ in lines:
        adj[f].add(t)
        adj[t].add(f)
    seen = {0}
    frontier = [0]
    while frontier:
        nxt = []
        for node in frontier:
            for other in adj[node]:
                if other not in seen:
                    seen.add(other)
                    nxt.append(other)
        frontier = nxt
    if len(seen) != len(names) + 1:
        raise ConfigError("network graph is not connected")

    p0 = np.array([float(b.get("p_load", 0.0)) for b in buses])
    if np.any(p0 < 0):
        raise ConfigError("negative initial load")
    area = np.array([int(b["area"]) for b in buses])
    ctrl = np.array([bool(b.get("controllable", False)) for b in buses])

    lm = LoadModel(**config.get("load_model", {}))
    if lm.t_p <= 0:
        raise ConfigError("t_p must be positive")
    clock = ClockConfig(**config.get("clock", {}))
    clock.validate()
    shed = SheddingConfig(**config.get("shedding", {}))
    fcfg = dict(config.get("fault", {}))
    for k in ("conductance_range", "duration_range", "load_scale_range"):
        if k in fcfg:
            fcfg[k] = tuple(fcfg[k])
    if "candidate_lines" in fcfg:
        fcfg["candidate_lines"] = tuple(fcfg["candidate_lines"])
    fault = FaultConfig(**fcfg)
    if not (0 <= fault.default_line < len(lines)):
        raise ConfigError("fault default_line out of range")
    for c in fault.candidate_lines:
        if not (0 <= c < len(lines)):
            raise ConfigError(f"fault candidate line {c} out of range")

    system = GridSystem(
        source_voltage=E, bus_names=names, bus_area=area, p0=p0,
        controllable=ctrl, lines=lines, load_model=lm, clock=clock,
        shedding=shed, fault=fault,
        penalty=float(config.get("penalty", 1000.0)),
        n_recent=int(config.get("n_recent", 10)),
        name=str(config.get("name", "grid")),
    )
    for a in system.areas:
        system.controllable_bus(a)  # raises unless exactly one per area

    V0, ok = solve_network(system, system.p0)
    if not ok:
        raise ConfigError("no steady-state solution for the configured loading")
    system.steady_voltages = V0
    return system


_CONFIG_DIR = Path(__file__).parent / "configs"


def load_config(name_or_path) -> dict:
    """Load a YAML grid config; bare names resolve to shipped configs."""
    p = Path(name_or_path)
    if not p.exists():
        builtin = _CONFIG_DIR / f"{name_or_path}.yaml"
        if builtin.exists():
            p = builtin
        else:
            raise ConfigError(f"config not found: {name_or_path}")
    with open(p) as f:
        return yaml.safe_load(f)


def load_system(name_or_path) -> GridSystem:
    return build_system(load_config(name_or_path))


# ---------------------------------------------------------------------------
# Dynamic simulation

class Simulator:
    """Owns the dynamic state of one episode: recovery states, shed
    fractions, the clock, and the sampled voltage record."""

    def __init__(self, system: GridSystem, scenario: Scenario):
        if not (0 <= scenario.line < len(system.lines)):
            raise ConfigError(f"scenario faults unknown line {scenario.line}")
        lo, hi = system.fault.duration_range
        if not (lo - 1e-12 <= scenario.duration <= hi + 1e-12):
            raise ConfigError(f"fault duration {scenario.duration} outside [{lo}, {hi}]")
        lo, hi = system.fault.load_scale_range
        if not (lo - 1e-12 <= scenario.load_scale <= hi + 1e-12):
            raise ConfigError(f"load scale {scenario.load_scale} outside [{lo}, {hi}]")
        self.system = system
        self.scenario = scenario
        self.Y_normal = build_ybus(system.n_bus + 1, system.lines)
        self.Y_fault = build_ybus(system.n_bus + 1, system.lines,
                                  faulted_line=scenario.line,
                                  fault_conductance=scenario.conductance)
        self.reset()

    def reset(self):
        sys_ = self.system
        scale = self.scenario.load_scale
        self.p_base = sys_.p0 * scale
        V0, ok = solve_network(sys_, self.p_base)
        if not ok:
            raise ConfigError("scenario loading has no pre-fault equilibrium")
        lm = sys_.load_model
        self.xhat = V0 ** lm.alpha_s - V0 ** lm.alpha_t
        self.ucum = np.zeros(sys_.n_bus)
        self.t = 0.0
        self.failed = False
        self.failure_time = None
        self.over_cap_requests = 0
        self._v_warm = V0.copy()
        self._th_warm = np.zeros(sys_.n_bus)
        self.sample_times = [0.0]
        self.sample_volts = [V0.copy()]
        self.sample_ucum = [self.ucum.copy()]

    # -- load shedding ---------------------------------------------------

    def shed_area(self, area) -> bool:
        """Shed one 10% round at the area's controllable bus. Over-cap
        requests are treated as hold (counted, not an error)."""
        bus = self.system.controllable_bus(area)
        step = self.system.shedding.step
        cap = self.system.shedding.cap
        if self.ucum[bus] + step > cap + 1e-12:
            self.over_cap_requests += 1
            return False
        self.ucum[bus] = round(self.ucum[bus] + step, 10)
        return True

    def set_shed_fraction(self, fraction):
        """Force a cumulative shed fraction at every controllable bus."""
        self.ucum[self.system.controllable] = fraction

    # -- network interface ----------------------------------------------

    def _fault_active(self, t):
        return self.scenario.t_start <= t < self.scenario.t_clear

    def _solve(self, xhat, t):
        sys_ = self.system
        lm = sys_.load_model
        p_eff = self.p_base * (1.0 - self.ucum)
        Y = self.Y_fault if self._fault_active(t) else self.Y_normal
        V, th, ok, _ = _solve_or_retry(
            Y, sys_.source_voltage, p_eff * xhat, p_eff,
            lm.alpha_t, lm.tan_phi, self._v_warm, self._th_warm,
            lv_convert=True)
        if not ok:
            raise CollapseError(f"network solve failed at t={t:.3f}")
        self._v_warm = V
        self._th_warm = th
        return V

    def _deriv(self, xhat, t):
        lm = self.system.load_model
        V = self._solve(xhat, t)
        return (V ** lm.alpha_s - V ** lm.alpha_t - xhat) / lm.t_p

    # -- time integration ------------------------------------------------

    def advance_to(self, t_target):
        """Integrate to t_target with RK4, recording voltage samples on the
        dt_obs grid. On collapse the trajectory is truncated and the
        simulator is marked failed."""
        sc = self.scenario
        dt_obs = self.system.clock.dt_obs
        dt_int = self.system.clock.dt_int
        while self.t < t_target - 1e-9 and not self.failed:
            k_next = math.floor(self.t / dt_obs + 1e-9) + 1
            events = [t_target, k_next * dt_obs]
            if self.t < sc.t_start - 1e-12:
                events.append(sc.t_start)
            if self.t < sc.t_clear - 1e-12:
                events.append(sc.t_clear)
            te = min(e for e in events if e > self.t + 1e-12)
            span = te - self.t
            n_sub = max(1, math.ceil(span / dt_int - 1e-9))
            h = span / n_sub
            try:
                for i in range(n_sub):
                    t0 = self.t + i * h
                    tm = t0 + h / 2.0  # regime is constant inside (t, te)
                    x = self.xhat
                    k1 = self._deriv(x, tm)
                    k2 = self._deriv(x + 0.5 * h * k1, tm)
                    k3 = self._deriv(x + 0.5 * h * k2, tm)
                    k4 = self._deriv(x + h * k3, tm)
                    self.xhat = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
                self.t = te
                if abs(te - round(te / dt_obs) * dt_obs) < 1e-9:
                    V = self._solve(self.xhat, self.t)
                    self.sample_times.append(round(te / dt_obs) * dt_obs)
                    self.sample_volts.append(V.copy())
                    self.sample_ucum.append(self.ucum.copy())
            except CollapseError:
                self.failed = True
                self.failure_time = self.t
        return not self.failed

    # -- exports ---------------------------------------------------------

    def samples(self):
        """(times, voltages[step, bus], ucum[step, bus]) arrays."""
        return (np.array(self.sample_times),
                np.array(self.sample_volts),
                np.array(self.sample_ucum))


def run_uncontrolled(system: GridSystem, scenario: Scenario):
    """Full-horizon all-hold run; returns the finished Simulator."""
    sim = Simulator(system, scenario)
    sim.advance_to(system.clock.horizon)
    return sim


def trajectory_rows(sim: Simulator):
    """CSV rows `t,bus,voltage_pu,ucum` for a finished simulation."""
    times, volts, ucum = sim.samples()
    rows = []
    for k, t in enumerate(times):
        for b, name in enumerate(sim.system.bus_names):
            rows.append((t, name, volts[k, b], ucum[k, b]))
    return rows
