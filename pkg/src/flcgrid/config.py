"""Run configuration schema and construction of the simulation objects.

Bus numbers in a config file are the user's labels (any distinct integers);
they are mapped to 0-based matrix indices in ascending order, and generator
internal nodes are appended after the network buses.
"""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .dynamics import FaultScenario
from .errors import ConfigError
from .grid import (
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    FullNetwork,
    GeneratorParams,
    Line,
    ReducedNetwork,
    kron_reduce,
    manufacture_equilibrium,
    solve_equilibrium,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

BUNDLED = ("desk3", "ieee39")


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class BusSpec(_Block):
    id: int
    shunt: tuple[float, float] = Field((0.0, 0.0), description="shunt admittance [g, b] in per-unit")


class LineSpec(_Block):
    from_bus: int = Field(alias="from")
    to: int
    y: Optional[tuple[float, float]] = Field(None, description="series admittance [g, b]")
    z: Optional[tuple[float, float]] = Field(None, description="series impedance [r, x]")

    @model_validator(mode="after")
    def _one_of(self):
        if (self.y is None) == (self.z is None):
            raise ValueError(f"line {self.from_bus}-{self.to}: give exactly one of y or z")
        if self.z is not None and self.z == (0.0, 0.0):
            raise ValueError(f"line {self.from_bus}-{self.to}: zero impedance")
        return self

    def admittance(self) -> tuple:
        if self.y is not None:
            return self.y
        y = 1.0 / complex(*self.z)
        return y.real, y.imag


class GeneratorSpec(_Block):
    bus: Optional[int] = Field(None, description="terminal bus (full-network systems)")
    xd: float = Field(0.0, ge=0, description="transient reactance to an added internal node; 0 attaches at the bus")
    M: float = Field(gt=0)
    D: float = Field(ge=0)
    E: float = Field(gt=0)
    delta0: Optional[float] = Field(None, description="equilibrium angle; Pm is then manufactured")
    pm: Optional[float] = Field(None, description="mechanical power; the equilibrium is then solved")
    delta_star: Optional[float] = Field(None, description="target angle, defaults to the equilibrium")
    alpha: Optional[float] = Field(None, ge=0)
    beta: Optional[float] = Field(None, ge=0)


class ReducedSpec(_Block):
    G: list[list[float]]
    B: list[list[float]]


class SystemBlock(_Block):
    name: str = ""
    buses: list[BusSpec] = []
    lines: list[LineSpec] = []
    reduced: Optional[ReducedSpec] = None
    generators: list[GeneratorSpec]

    @model_validator(mode="after")
    def _one_network(self):
        if bool(self.lines) == (self.reduced is not None):
            raise ValueError("system needs exactly one of: lines (full network) or reduced matrices")
        if len(self.generators) < 2:
            raise ValueError("at least two generators are required")
        if self.lines and any(g.bus is None for g in self.generators):
            raise ValueError("every generator needs a bus in a full-network system")
        given = {(g.delta0 is not None, g.pm is not None) for g in self.generators}
        if given not in ({(True, False)}, {(False, True)}):
            raise ValueError("give delta0 for every generator or pm for every generator, not both")
        return self


class FaultSpec(_Block):
    id: str
    bus: int
    line: tuple[int, int]
    t_fault: Optional[float] = None
    t_clear: Optional[float] = None


class ControlBlock(_Block):
    mode: Literal["NONE", "DPFL", "CPFL", "FLC"] = "CPFL"
    level: float = Field(100.0, ge=0, le=100, description="distributed share for DPFL/FLC, percent")
    alpha: float = Field(DEFAULT_ALPHA, ge=0)
    beta: float = Field(DEFAULT_BETA, ge=0)
    saturation: Optional[float] = Field(None, gt=0, description="symmetric |Pu| limit, unbounded if absent")
    switchover_time: Optional[float] = Field(None, ge=0, description="FLC generators run CPFL before this time")
    checkpoint: Optional[str] = None


class TrainingBlock(_Block):
    fault: Optional[str] = Field(None, description="fault whose CPFL run generates the training data")
    dims: list[int] = [3, 32, 1]
    degree: int = Field(5, ge=0)
    optimizer: Literal["adam", "sgd"] = "adam"
    lr: float = Field(1e-3, ge=0)
    batch_size: int = Field(1024, ge=1)
    local_epochs: int = Field(1, ge=1)
    rounds: int = Field(20, ge=1)
    master_seed: int = Field(0, ge=0)
    t_max: float = Field(100.0, gt=0, description="data length and time-feature horizon, seconds")
    probe_stride: int = Field(10, ge=2, description="every n-th sample is held out for the probe set")
    transport: Literal["inproc", "loopback"] = "inproc"


class SimulationBlock(_Block):
    dt: float = Field(1e-3, gt=0)
    t_max: float = Field(10.0, gt=0)
    t_fault: float = Field(0.5, ge=0)
    t_clear: float = Field(0.75, gt=0)


class EvaluationBlock(_Block):
    faults: list[str] = []
    modes: list[Literal["FLC", "DPFL"]] = ["FLC", "DPFL"]
    levels: list[float] = [0.0, 100.0]
    t_max: Optional[float] = Field(None, gt=0)
    epsilon: float = Field(0.01, gt=0)


class OutputBlock(_Block):
    dir: str = "runs"
    base_power_kw: float = Field(100_000.0, gt=0)


class RunConfig(_Block):
    system: SystemBlock
    faults: list[FaultSpec] = []
    control: ControlBlock = ControlBlock()
    training: TrainingBlock = TrainingBlock()
    simulation: SimulationBlock = SimulationBlock()
    evaluation: EvaluationBlock = EvaluationBlock()
    output: OutputBlock = OutputBlock()

    @model_validator(mode="after")
    def _references(self):
        ids = [f.id for f in self.faults]
        if len(set(ids)) != len(ids):
            raise ValueError("fault ids must be unique")
        for name in [self.training.fault, *self.evaluation.faults]:
            if name is not None and name not in ids:
                raise ValueError(f"fault {name!r} is not defined")
        if self.faults and not self.system.lines:
            raise ValueError("faults need a full-network system")
        return self

    def hash(self) -> str:
        doc = self.model_dump(mode="json", by_alias=True)
        return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def schema() -> dict:
    return RunConfig.model_json_schema(by_alias=True)


def _read_text(source) -> tuple:
    path = Path(source)
    if path.exists():
        return path.read_text(), path.suffix.lower()
    if str(source) in BUNDLED:
        text = resources.files("flcgrid.assets").joinpath(f"{source}.toml").read_text()
        return text, ".toml"
    raise ConfigError(f"config {source!r} not found (bundled: {', '.join(BUNDLED)})")


def parse_config(text: str, suffix: str = ".toml") -> RunConfig:
    try:
        doc = json.loads(text) if suffix == ".json" else tomllib.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as exc:
        lines = [f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}"
                 + (f" (got {e['input']!r})" if isinstance(e.get("input"), str) else "")
                 for e in exc.errors()]
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines)) from None


def load_config(source) -> RunConfig:
    return parse_config(*_read_text(source))


@dataclass
class System:
    """Objects built from a config: the network, generator constants and faults."""

    network: object  # FullNetwork or ReducedNetwork
    params: GeneratorParams
    faults: dict
    bus_index: dict
    delta0: np.ndarray

    @property
    def n(self) -> int:
        return self.params.n

    @property
    def reduced(self) -> ReducedNetwork:
        return self.network if isinstance(self.network, ReducedNetwork) else kron_reduce(self.network)


def _full_network(block: SystemBlock):
    labels = {b.id for b in block.buses} | {l.from_bus for l in block.lines} | {l.to for l in block.lines}
    labels |= {g.bus for g in block.generators}
    order = sorted(labels)
    index = {b: k for k, b in enumerate(order)}
    lines, gen_nodes = [], []
    n_bus = len(order)
    for spec in block.lines:
        if spec.from_bus == spec.to:
            raise ConfigError(f"line {spec.from_bus}-{spec.to} is a self-loop")
        lines.append(Line(index[spec.from_bus], index[spec.to], *spec.admittance()))
    for g in block.generators:
        if g.xd > 0:
            lines.append(Line(n_bus, index[g.bus], 0.0, -1.0 / g.xd))
            gen_nodes.append(n_bus)
            n_bus += 1
        else:
            gen_nodes.append(index[g.bus])
    if len(set(gen_nodes)) != len(gen_nodes):
        raise ConfigError("two generators attach directly to the same bus")
    shunts = {index[b.id]: b.shunt for b in block.buses if b.shunt != (0.0, 0.0)}
    return FullNetwork.from_lines(n_bus, lines, gen_nodes, shunts), index


def build_system(cfg: RunConfig) -> System:
    block = cfg.system
    if block.reduced is not None:
        try:
            network = ReducedNetwork(block.reduced.G, block.reduced.B)
        except ValueError as exc:
            raise ConfigError(f"reduced matrices: {exc}") from None
        if network.n != len(block.generators):
            raise ConfigError(f"reduced matrices are {network.n}x{network.n} for {len(block.generators)} generators")
        reduced, index = network, {}
    else:
        network, index = _full_network(block)
        reduced = kron_reduce(network)
    gens = block.generators
    E = np.array([g.E for g in gens])
    pick = lambda attr, default: np.array([default if getattr(g, attr) is None else getattr(g, attr) for g in gens])
    base = GeneratorParams.build(
        M=[g.M for g in gens], D=[g.D for g in gens], Pm=np.zeros(len(gens)), E=E,
        alpha=pick("alpha", cfg.control.alpha), beta=pick("beta", cfg.control.beta),
    )
    if gens[0].delta0 is not None:
        delta0 = np.array([g.delta0 for g in gens])
        Pm = manufacture_equilibrium(delta0, E, reduced)
    else:
        Pm = np.array([g.pm for g in gens])
        delta0 = solve_equilibrium(base.replace(Pm=Pm), reduced)
    star = np.array([d0 if g.delta_star is None else g.delta_star for g, d0 in zip(gens, delta0)])
    params = base.replace(Pm=Pm, delta_star=star)

    faults = {}
    for f in cfg.faults:
        try:
            scenario = FaultScenario(
                f.id,
                index[f.bus],
                (index[f.line[0]], index[f.line[1]]),
                cfg.simulation.t_fault if f.t_fault is None else f.t_fault,
                cfg.simulation.t_clear if f.t_clear is None else f.t_clear,
            )
            scenario.validate(network)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"fault {f.id}: {exc}") from None
        faults[f.id] = scenario
    return System(network, params, faults, index, delta0)

