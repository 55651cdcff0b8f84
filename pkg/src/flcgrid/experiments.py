"""Dataset generation, stability/energy metrics and penetration sweeps."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .control import ControlAssignment, Mode, TimeFeature, assign_controllers
from .dynamics import FaultScenario, Trajectory, simulate
from .errors import EmptyGroup, EmptyTrajectory, FlcGridError
from .grid import GeneratorParams
from .kan import Dataset

logger = logging.getLogger(__name__)

DEFAULT_BASE_POWER_KW = 100_000.0  # 100 MVA system base
RESULT_HEADER = ["fault", "mode", "level_pct", "group", "stab_time_s", "unstable", "p_inj", "p_stor"]


@dataclass(frozen=True)
class StabilityCriterion:
    epsilon: float = 0.01
    cap: float | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


class StabilityTime(NamedTuple):
    seconds: float
    unstable: bool


@dataclass(frozen=True)
class EnergyReport:
    """Integrated storage energy, in kW*s on the given base."""

    p_inj: float
    p_stor: float
    base_power_kw: float = DEFAULT_BASE_POWER_KW


def generate_dataset(network, params: GeneratorParams, scenario: FaultScenario | None, dt=1e-3, t_max=100.0,
                     horizon=None, trajectory_out: list | None = None) -> list:
    """One shard per generator from a 100 % CPFL run.

    Sample ``k`` of shard ``i`` maps ``(omega_i, delta_i - delta_i*, t_feature)``
    to the accelerating power logged at that step.
    """
    n = params.n
    traj = simulate(network, params, scenario, ControlAssignment.uniform(n, Mode.CPFL), None, dt, t_max)
    if trajectory_out is not None:
        trajectory_out.append(traj)
    tf = TimeFeature(traj.t_fault, t_max if horizon is None else horizon)(traj.t)
    shards = []
    for i in range(n):
        inputs = np.column_stack([traj.omega[:, i], traj.delta[:, i] - params.delta_star[i], tf])
        shards.append(Dataset(inputs, traj.pa[:, i].copy()))
    return shards


def stability_time(traj: Trajectory, i: int, criterion: StabilityCriterion = StabilityCriterion()) -> StabilityTime:
    """Time from fault onset until ``|omega_i|`` enters the band for good.

    Returns ``(0, False)`` if the band is never left after onset and
    ``(cap, True)`` if the frequency is still outside at the last sample; the
    cap defaults to the simulated span after onset.
    """
    if len(traj) == 0:
        raise EmptyTrajectory("empty trajectory")
    after = traj.t >= traj.t_fault - 1e-12
    t = traj.t[after]
    outside = np.abs(traj.omega[after, i]) > criterion.epsilon
    cap = criterion.cap if criterion.cap is not None else float(traj.t[-1] - traj.t_fault)
    if t.size == 0 or not outside.any():
        return StabilityTime(0.0, False)
    last = int(np.flatnonzero(outside)[-1])
    if last == t.size - 1:
        return StabilityTime(cap, True)
    return StabilityTime(float(t[last + 1] - traj.t_fault), False)


def group_stability_time(traj: Trajectory, assignment: ControlAssignment, mode,
                         criterion: StabilityCriterion = StabilityCriterion()) -> StabilityTime:
    members = assignment.members(mode)
    if not members:
        raise EmptyGroup(f"no generator runs {Mode.parse(mode).value}")
    times = [stability_time(traj, i, criterion) for i in members]
    return StabilityTime(float(np.mean([s.seconds for s in times])), any(s.unstable for s in times))


def energy_metrics(traj: Trajectory, generators, base_power_kw: float = DEFAULT_BASE_POWER_KW) -> EnergyReport:
    gens = list(generators)
    if not gens:
        raise EmptyGroup("energy of an empty generator set")
    pu = traj.pu[:, gens]
    inj = float(np.sum(np.maximum(pu, 0.0)) * traj.dt)
    stor = float(np.sum(np.maximum(-pu, 0.0)) * traj.dt)
    return EnergyReport(inj * base_power_kw, stor * base_power_kw, base_power_kw)


@dataclass
class SweepRow:
    fault: str
    mode: str
    level_pct: float
    group: str
    stab_time_s: float | None
    unstable: bool | None
    p_inj: float | None
    p_stor: float | None
    error: str | None = None

    def as_csv(self) -> list:
        fmt = lambda v: "" if v is None else repr(float(v))
        if self.error is not None:
            unstable = "error"
        else:
            unstable = "true" if self.unstable else "false"
        level = int(self.level_pct) if float(self.level_pct).is_integer() else self.level_pct
        return [self.fault, self.mode, str(level), self.group, fmt(self.stab_time_s), unstable,
                fmt(self.p_inj), fmt(self.p_stor)]

    def metrics(self) -> tuple:
        return (self.group, self.stab_time_s, self.unstable, self.p_inj, self.p_stor, self.error)


def _group_row(fault, mode, level, group_mode, traj, assignment, criterion, base_power_kw):
    members = assignment.members(group_mode)
    st = group_stability_time(traj, assignment, group_mode, criterion)
    energy = energy_metrics(traj, members, base_power_kw)
    return SweepRow(fault, mode.value, level, group_mode.value, st.seconds, st.unstable, energy.p_inj, energy.p_stor)


def _sweep_cell(network, params, fault, mode, level, model, dt, t_max, criterion, base_power_kw, horizon,
                switchover_time, saturation):
    n = params.n
    try:
        assignment = assign_controllers(n, mode, level)
        traj = simulate(
            network, params, fault, assignment, model if mode is Mode.FLC else None, dt, t_max,
            time_feature=TimeFeature(fault.t_fault if fault else 0.0, horizon),
            switchover_time=switchover_time, saturation=saturation,
        )
    except FlcGridError as exc:
        name = fault.id if fault else "none"
        err = SweepRow(name, mode.value, level, mode.value, None, None, None, None, f"{type(exc).__name__}: {exc}")
        return err, None
    name = fault.id if fault else "none"
    has_dist = bool(assignment.members(mode))
    has_cpfl = bool(assignment.members(Mode.CPFL))
    primary = _group_row(name, mode, level, mode if has_dist else Mode.CPFL, traj, assignment, criterion, base_power_kw)
    complement = None
    if has_dist and has_cpfl:
        complement = _group_row(name, mode, level, Mode.CPFL, traj, assignment, criterion, base_power_kw)
    return primary, complement


def penetration_sweep(network, params: GeneratorParams, faults, modes, levels, model=None, dt=1e-3, t_max=60.0,
                      criterion: StabilityCriterion = StabilityCriterion(), base_power_kw=DEFAULT_BASE_POWER_KW,
                      horizon=100.0, jobs=1, switchover_time=None, saturation=None):
    """Simulate every (fault, mode, level) cell.

    Returns ``(rows, cpfl_rows)``: ``rows`` holds one row per cell for the
    distributed group (or the CPFL group at 0 %), in (fault, mode, level)
    order; ``cpfl_rows`` holds the complementary CPFL-group rows of cells that
    have both groups.  A failing cell yields an error row and the sweep goes on.
    """
    modes = [Mode.parse(m) for m in modes]
    cells = [(f, m, float(l)) for f in faults for m in modes for l in levels]
    # at 0 % every mode is the same all-CPFL run, so simulate it once per fault
    unique = [c for c in cells if c[2] != 0.0 or c[1] is modes[0]]
    run = lambda c: _sweep_cell(network, params, c[0], c[1], c[2], model, dt, t_max, criterion, base_power_kw,
                                horizon, switchover_time, saturation)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(run, unique))
    else:
        done = [run(c) for c in unique]
    by_cell = {(id(c[0]), c[1], c[2]): r for c, r in zip(unique, done)}
    results = []
    for f, m, l in cells:
        if (id(f), m, l) in by_cell:
            results.append(by_cell[(id(f), m, l)])
        else:
            p, c = by_cell[(id(f), modes[0], l)]
            p = replace(p, mode=m.value, group=m.value if p.error else p.group)
            results.append((p, None if c is None else replace(c, mode=m.value)))
    rows = [p for p, _ in results]
    cpfl_rows = [c for _, c in results if c is not None]
    return rows, cpfl_rows


def write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_HEADER)
        for row in rows:
            writer.writerow(row.as_csv())
