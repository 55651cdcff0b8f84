"""Fixed-step integration of the controlled swing equation under bus faults."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import control
from .control import ControlAssignment, Mode, TimeFeature
from .errors import (
    DimensionMismatch,
    FaultOnGeneratorInternalNode,
    NonFiniteState,
    SimulationError,
)
from .grid import FullNetwork, GeneratorParams, ReducedNetwork, kron_reduce


@dataclass(frozen=True)
class SystemState:
    t: float
    delta: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.delta, dtype=float)
        w = np.asarray(self.omega, dtype=float)
        if d.shape != w.shape:
            raise DimensionMismatch(f"delta {d.shape} and omega {w.shape} differ")
        object.__setattr__(self, "delta", d)
        object.__setattr__(self, "omega", w)


@dataclass(frozen=True)
class FaultScenario:
    """Bolted fault on ``faulted_bus`` cleared by opening ``tripped_line`` (0-based buses)."""

    id: str
    faulted_bus: int
    tripped_line: tuple
    t_fault: float = 0.5
    t_clear: float = 0.75

    def __post_init__(self):
        if not (0 <= self.t_fault < self.t_clear):
            raise ValueError(f"fault {self.id}: need 0 <= t_fault < t_clear")
        object.__setattr__(self, "tripped_line", tuple(int(b) for b in self.tripped_line))

    def validate(self, full: FullNetwork):
        if self.faulted_bus in full.gen_buses:
            raise FaultOnGeneratorInternalNode(
                f"fault {self.id}: bus {self.faulted_bus} is a generator internal node"
            )
        if not 0 <= self.faulted_bus < full.n_bus:
            raise ValueError(f"fault {self.id}: bus {self.faulted_bus} out of range")
        try:
            full.find_line(*self.tripped_line)
        except KeyError:
            raise ValueError(f"fault {self.id}: line {self.tripped_line} not in network") from None


class PhaseNetworks:
    """Pre-fault, fault-on and post-fault reductions of one scenario, computed once."""

    def __init__(self, full, scenario: FaultScenario | None = None):
        if scenario is None:
            net = full if isinstance(full, ReducedNetwork) else kron_reduce(full)
            self.pre = self.during = self.post = net
            self.t_fault = self.t_clear = np.inf
            return
        if not isinstance(full, FullNetwork):
            raise SimulationError("fault scenarios need the full bus network")
        scenario.validate(full)
        self.pre = kron_reduce(full)
        self.during = kron_reduce(full.without_bus(scenario.faulted_bus))
        self.post = kron_reduce(full.without_line(*scenario.tripped_line))
        self.t_fault = scenario.t_fault
        self.t_clear = scenario.t_clear

    def at(self, t: float) -> ReducedNetwork:
        if t < self.t_fault:
            return self.pre
        if t < self.t_clear:
            return self.during
        return self.post


def network_for_phase(scenario: FaultScenario, t: float, full: FullNetwork) -> ReducedNetwork:
    return PhaseNetworks(full, scenario).at(t)


def rk4_step(state: SystemState, dt: float, derivs: Callable) -> SystemState:
    """Classical fourth-order Runge-Kutta step; ``derivs(t, delta, omega)`` returns the two rates."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    t, d, w = state.t, state.delta, state.omega
    h = 0.5 * dt
    k1d, k1w = derivs(t, d, w)
    k2d, k2w = derivs(t + h, d + h * k1d, w + h * k1w)
    k3d, k3w = derivs(t + h, d + h * k2d, w + h * k2w)
    k4d, k4w = derivs(t + dt, d + dt * k3d, w + dt * k3w)
    d_new = d + (dt / 6.0) * (k1d + 2.0 * k2d + 2.0 * k3d + k4d)
    w_new = w + (dt / 6.0) * (k1w + 2.0 * k2w + 2.0 * k3w + k4w)
    if not (np.all(np.isfinite(d_new)) and np.all(np.isfinite(w_new))):
        raise NonFiniteState("integration produced a non-finite state")
    return SystemState(t + dt, d_new, w_new)


@dataclass
class Trajectory:
    """Uniformly sampled record of a run; row ``k`` is the state at ``t[k]``.

    ``pu`` is the control applied over ``[t[k], t[k+1])`` and ``pa`` the true
    accelerating power at the start of that interval.
    """

    dt: float
    t: np.ndarray
    delta: np.ndarray
    omega: np.ndarray
    pu: np.ndarray
    pa: np.ndarray
    t_fault: float = 0.0

    @property
    def n(self) -> int:
        return self.delta.shape[1]

    def __len__(self):
        return self.t.shape[0]

    def write_csv(self, path):
        n = self.n
        header = ["t"]
        for name in ("delta", "omega", "pu", "pa"):
            header += [f"{name}_{i + 1}" for i in range(n)]
        block = np.hstack([self.t[:, None], self.delta, self.omega, self.pu, self.pa])
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in block.tolist():
                writer.writerow([repr(v) for v in row])

    @classmethod
    def read_csv(cls, path, t_fault=0.0):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array([[float(v) for v in r] for r in rows[1:]])
        n = (len(header) - 1) // 4
        t = body[:, 0]
        dt = float(t[1] - t[0]) if len(t) > 1 else 0.0
        cols = [body[:, 1 + k * n : 1 + (k + 1) * n] for k in range(4)]
        return cls(dt, t, *cols, t_fault=t_fault)


def _steps(x, dt, what):
    k = round(x / dt)
    if abs(k * dt - x) > 1e-9 * max(1.0, abs(x)):
        raise ValueError(f"dt={dt} does not divide {what}={x}")
    return int(k)


def _flc_groups(assignment, policies):
    """Group FLC generators by model so each model is evaluated once per step."""
    flc = [i for i, m in enumerate(assignment.modes) if m is Mode.FLC]
    if not flc:
        return []
    if policies is None:
        raise SimulationError("FLC generators assigned but no model supplied")
    if not isinstance(policies, Mapping):
        policies = {i: policies for i in flc}
    groups = {}
    for i in flc:
        if i not in policies:
            raise SimulationError(f"no model for FLC generator {i + 1}")
        model = policies[i]
        groups.setdefault(id(model), (model, []))[1].append(i)
    return [(model, np.array(idx)) for model, idx in groups.values()]


def simulate(
    network,
    params: GeneratorParams,
    scenario: FaultScenario | None,
    assignment: ControlAssignment,
    policies=None,
    dt: float = 1e-3,
    t_max: float = 10.0,
    *,
    initial_state: SystemState | None = None,
    delta0=None,
    time_feature: TimeFeature | None = None,
    saturation: float | None = None,
    switchover_time: float | None = None,
) -> Trajectory:
    """Integrate the controlled swing dynamics from the pre-fault equilibrium.

    ``network`` is a :class:`FullNetwork` (required when ``scenario`` is given)
    or a :class:`ReducedNetwork`.  Controls are computed once per step from the
    step-start state and held over all four RK4 stages.  FLC generators run
    CPFL before ``switchover_time`` when one is given.
    """
    n = params.n
    if len(assignment.modes) != n:
        raise DimensionMismatch(f"assignment covers {len(assignment.modes)} of {n} generators")
    phases = PhaseNetworks(network, scenario)
    if phases.pre.n != n:
        raise DimensionMismatch(f"{n} generators but network has {phases.pre.n}")
    n_steps = _steps(t_max, dt, "t_max")
    if scenario is not None:
        k_fault = _steps(scenario.t_fault, dt, "t_fault")
        k_clear = _steps(scenario.t_clear, dt, "t_clear")
        t_fault = scenario.t_fault
    else:
        k_fault = k_clear = n_steps + 1
        t_fault = 0.0
    if time_feature is None:
        time_feature = TimeFeature(t_fault=t_fault)
    k_switch = -1 if switchover_time is None else _steps(switchover_time, dt, "switchover_time")

    if initial_state is None:
        start = params.delta_star if delta0 is None else np.asarray(delta0, dtype=float)
        initial_state = SystemState(0.0, start.copy(), np.zeros(n))

    modes = assignment.modes
    cpfl = np.array([m is Mode.CPFL for m in modes])
    dpfl = np.array([m is Mode.DPFL for m in modes])
    flc_groups = _flc_groups(assignment, policies)
    flc = np.zeros(n, dtype=bool)
    for _, idx in flc_groups:
        flc[idx] = True

    M, D, Pm, E = params.M, params.D, params.Pm, params.E
    alpha, beta, dstar = params.alpha, params.beta, params.delta_star
    EE = E[:, None] * E[None, :]
    weighted = {}
    for name in ("pre", "during", "post"):
        net = getattr(phases, name)
        weighted[id(net)] = (EE * net.G, EE * net.B)

    t_grid = dt * np.arange(n_steps + 1)
    out_d = np.empty((n_steps + 1, n))
    out_w = np.empty((n_steps + 1, n))
    out_pu = np.empty((n_steps + 1, n))
    out_pa = np.empty((n_steps + 1, n))

    def pa_of(delta, GE, BE):
        diff = delta[:, None] - delta[None, :]
        return Pm - np.sum(GE * np.cos(diff) + BE * np.sin(diff), axis=1)

    d = initial_state.delta.copy()
    w = initial_state.omega.copy()
    for k in range(n_steps + 1):
        if k < k_fault:
            net = phases.pre
        elif k < k_clear:
            net = phases.during
        else:
            net = phases.post
        GE, BE = weighted[id(net)]
        t = t_grid[k]
        pa = pa_of(d, GE, BE)
        pd = control.dpfl_action(w, d, dstar, alpha, beta)
        pu = np.zeros(n)
        pu[dpfl] = pd[dpfl]
        if k < k_switch:
            pu[flc] = control.cpfl_action(pa[flc], pd[flc])
        else:
            tf = time_feature(t)
            for model, idx in flc_groups:
                pu[idx], _ = control.flc_action(model, w[idx], d[idx] - dstar[idx], tf, alpha[idx], beta[idx])
        pu[cpfl] = control.cpfl_action(pa[cpfl], pd[cpfl])
        if saturation is not None:
            pu = np.clip(pu, -saturation, saturation)
        out_d[k], out_w[k], out_pu[k], out_pa[k] = d, w, pu, pa
        if k == n_steps:
            break

        def derivs(_t, dd, ww, GE=GE, BE=BE, pu=pu):
            return ww, (-D * ww + pa_of(dd, GE, BE) + pu) / M

        try:
            nxt = rk4_step(SystemState(t, d, w), dt, derivs)
        except NonFiniteState as exc:
            raise NonFiniteState(f"non-finite state at step {k + 1} (t={t + dt:.6g} s)", step=k + 1) from exc
        d, w = nxt.delta, nxt.omega

    return Trajectory(dt, t_grid, out_d, out_w, out_pu, out_pa, t_fault=t_fault)
