"""Static electrical model of a multi-machine grid.

Generators are represented by their internal EMF nodes.  A full bus
admittance matrix is Kron-reduced to an equivalent network over those nodes,
and all power quantities are evaluated on the reduced network.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, EmptyGeneratorSet, NoConvergence, SingularInterior

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.5
DEFAULT_BETA = 0.005
COND_LIMIT = 1e12


def _vector(x, n=None, name="vector"):
    arr = np.array(x, dtype=float).reshape(-1)
    if n is not None and arr.shape[0] != n:
        raise DimensionMismatch(f"{name} has length {arr.shape[0]}, expected {n}")
    return arr


@dataclass(frozen=True)
class GeneratorParams:
    """Per-generator machine and controller constants, one array entry per machine.

    ``delta_star`` is the phase the controllers regulate towards; callers
    normally set it to the pre-fault equilibrium.
    """

    M: np.ndarray
    D: np.ndarray
    Pm: np.ndarray
    E: np.ndarray
    delta_star: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.M).reshape(-1).shape[0]
        for name in ("M", "D", "Pm", "E", "delta_star", "alpha", "beta"):
            arr = _vector(getattr(self, name), n, name)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.M <= 0):
            raise ValueError("inertia M must be positive")
        if np.any(self.E <= 0):
            raise ValueError("internal voltage E must be positive")
        if np.any(self.D < 0) or np.any(self.alpha < 0) or np.any(self.beta < 0):
            raise ValueError("D, alpha and beta must be non-negative")

    @property
    def n(self) -> int:
        return self.M.shape[0]

    @classmethod
    def build(cls, M, D, Pm, E, delta_star=None, alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA):
        """Scalars broadcast to the generator count, taken from the longest argument."""
        n = max(np.size(v) for v in (M, D, Pm, E, delta_star if delta_star is not None else 0.0, alpha, beta))
        full = lambda v: np.broadcast_to(np.asarray(v, dtype=float), (n,)).copy()
        if delta_star is None:
            delta_star = np.zeros(n)
        return cls(full(M), full(D), full(Pm), full(E), full(delta_star), full(alpha), full(beta))

    def replace(self, **changes) -> "GeneratorParams":
        values = {k: getattr(self, k) for k in ("M", "D", "Pm", "E", "delta_star", "alpha", "beta")}
        values.update(changes)
        return GeneratorParams(**values)


@dataclass(frozen=True)
class ReducedNetwork:
    """Kron-reduced generator-only network ``Y_red = G + jB``."""

    G: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        G = np.array(self.G, dtype=float)
        B = np.array(self.B, dtype=float)
        if G.ndim != 2 or G.shape[0] != G.shape[1] or G.shape != B.shape:
            raise DimensionMismatch(f"G {G.shape} and B {B.shape} must be equal square matrices")
        if G.shape[0] < 1:
            raise EmptyGeneratorSet("reduced network has no generators")
        if not (np.array_equal(G, G.T) and np.array_equal(B, B.T)):
            raise ValueError("G and B must be exactly symmetric")
        G.setflags(write=False)
        B.setflags(write=False)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "B", B)
        off = ~np.eye(G.shape[0], dtype=bool)
        if np.any(G[off] < 0) or np.any(B[off] < 0):
            logger.warning("reduced network has negative off-diagonal conductance or susceptance")

    @property
    def n(self) -> int:
        return self.G.shape[0]


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    g: float
    b: float

    @property
    def y(self) -> complex:
        return complex(self.g, self.b)

    def connects(self, a: int, b: int) -> bool:
        return {self.from_bus, self.to_bus} == {a, b}


@dataclass(frozen=True)
class FullNetwork:
    """Bus admittance matrix (0-based buses) with the generator internal nodes marked.

    ``lines`` records the series branches that make up ``Y`` so a branch can be
    removed again for post-fault topologies.
    """

    y_real: np.ndarray
    y_imag: np.ndarray
    gen_buses: tuple
    lines: tuple = field(default=())

    def __post_init__(self):
        yr = np.array(self.y_real, dtype=float)
        yi = np.array(self.y_imag, dtype=float)
        if yr.ndim != 2 or yr.shape[0] != yr.shape[1] or yr.shape != yi.shape:
            raise DimensionMismatch("admittance matrix must be square")
        if not (np.allclose(yr, yr.T, atol=1e-12) and np.allclose(yi, yi.T, atol=1e-12)):
            raise ValueError("admittance matrix must be symmetric")
        gens = tuple(int(g) for g in self.gen_buses)
        if len(gens) == 0:
            raise EmptyGeneratorSet("no generator buses given")
        if len(set(gens)) != len(gens) or min(gens) < 0 or max(gens) >= yr.shape[0]:
            raise ValueError(f"generator buses {gens} must be distinct and in range")
        yr.setflags(write=False)
        yi.setflags(write=False)
        object.__setattr__(self, "y_real", yr)
        object.__setattr__(self, "y_imag", yi)
        object.__setattr__(self, "gen_buses", gens)
        object.__setattr__(self, "lines", tuple(self.lines))

    @property
    def n_bus(self) -> int:
        return self.y_real.shape[0]

    @property
    def Y(self) -> np.ndarray:
        return self.y_real + 1j * self.y_imag

    @classmethod
    def from_lines(cls, n_bus, lines, gen_buses, shunts=None):
        """Assemble ``Y`` from series branches and optional per-bus shunt admittances."""
        Y = np.zeros((n_bus, n_bus), dtype=complex)
        lines = tuple(lines)
        for ln in lines:
            f, t, y = ln.from_bus, ln.to_bus, ln.y
            Y[f, f] += y
            Y[t, t] += y
            Y[f, t] -= y
            Y[t, f] -= y
        for bus, y in (shunts or {}).items():
            Y[bus, bus] += complex(*y) if isinstance(y, (tuple, list)) else y
        return cls(Y.real, Y.imag, tuple(gen_buses), lines)

    def find_line(self, a: int, b: int) -> Line:
        for ln in self.lines:
            if ln.connects(a, b):
                return ln
        raise KeyError(f"no line between buses {a} and {b}")

    def without_line(self, a: int, b: int) -> "FullNetwork":
        """Copy of the network with the first branch between ``a`` and ``b`` removed."""
        ln = self.find_line(a, b)
        Y = self.Y.copy()
        f, t, y = ln.from_bus, ln.to_bus, ln.y
        Y[f, f] -= y
        Y[t, t] -= y
        Y[f, t] += y
        Y[t, f] += y
        rest = list(self.lines)
        rest.remove(ln)
        return FullNetwork(Y.real, Y.imag, self.gen_buses, tuple(rest))

    def without_bus(self, bus: int) -> "FullNetwork":
        """Delete a bus (its voltage pinned to zero, as under a bolted fault)."""
        if bus in self.gen_buses:
            raise ValueError(f"bus {bus} is a generator node")
        keep = [k for k in range(self.n_bus) if k != bus]
        remap = {old: new for new, old in enumerate(keep)}
        Y = self.Y[np.ix_(keep, keep)]
        lines = tuple(
            Line(remap[l.from_bus], remap[l.to_bus], l.g, l.b)
            for l in self.lines
            if bus not in (l.from_bus, l.to_bus)
        )
        return FullNetwork(Y.real, Y.imag, tuple(remap[g] for g in self.gen_buses), lines)


def kron_reduce(full: FullNetwork, cond_limit: float = COND_LIMIT) -> ReducedNetwork:
    """Eliminate every non-generator bus: ``Y_gg - Y_gl Y_ll^-1 Y_lg``."""
    gens = list(full.gen_buses)
    if not gens:
        raise EmptyGeneratorSet("no generator buses to retain")
    Y = full.Y
    others = [k for k in range(full.n_bus) if k not in set(gens)]
    Ygg = Y[np.ix_(gens, gens)]
    if others:
        Yll = Y[np.ix_(others, others)]
        cond = np.linalg.cond(Yll)
        if not np.isfinite(cond) or cond > cond_limit:
            raise SingularInterior(f"interior admittance block is singular (cond={cond:.3g})")
        Ygl = Y[np.ix_(gens, others)]
        Ylg = Y[np.ix_(others, gens)]
        Yred = Ygg - Ygl @ np.linalg.solve(Yll, Ylg)
    else:
        Yred = Ygg.copy()
    asym = np.max(np.abs(Yred - Yred.T)) if Yred.size else 0.0
    if asym > 1e-12 * max(1.0, np.max(np.abs(Yred))):
        logger.warning("reduced admittance asymmetric by %.3g before symmetrization", asym)
    Yred = 0.5 * (Yred + Yred.T)
    return ReducedNetwork(Yred.real, Yred.imag)


def electrical_power(delta, net: ReducedNetwork, E) -> np.ndarray:
    """Electrical output of every generator at rotor angles ``delta``."""
    n = net.n
    delta = _vector(delta, n, "delta")
    E = _vector(E, n, "E")
    diff = delta[:, None] - delta[None, :]
    EE = E[:, None] * E[None, :]
    return np.sum(EE * (net.G * np.cos(diff) + net.B * np.sin(diff)), axis=1)


def accelerating_power(delta, params: GeneratorParams, net: ReducedNetwork) -> np.ndarray:
    if params.n != net.n:
        raise DimensionMismatch(f"{params.n} generators but network has {net.n}")
    return params.Pm - electrical_power(delta, net, params.E)


def _power_jacobian(delta, net, E):
    # dPe_i/d delta_k
    diff = delta[:, None] - delta[None, :]
    EE = E[:, None] * E[None, :]
    off = EE * (net.G * np.sin(diff) - net.B * np.cos(diff))
    np.fill_diagonal(off, 0.0)
    J = off.copy()
    np.fill_diagonal(J, -off.sum(axis=1))
    return J


def solve_equilibrium(params: GeneratorParams, net: ReducedNetwork, tol=1e-10, max_iter=50) -> np.ndarray:
    """Damped Newton solve of ``Pa(delta) = 0`` from the flat start with ``delta[-1] = 0``.

    The last angle is the reference, so the system has N equations in N-1
    unknowns; steps are taken in the least-squares sense, which is exact
    whenever a consistent equilibrium exists.
    """
    n = net.n
    if params.n != n:
        raise DimensionMismatch(f"{params.n} generators but network has {n}")
    delta = np.zeros(n)
    resid = accelerating_power(delta, params, net)
    norm = np.max(np.abs(resid))
    for _ in range(max_iter):
        if norm <= tol:
            return delta
        J = -_power_jacobian(delta, net, params.E)[:, : n - 1]
        step = np.linalg.lstsq(J, -resid, rcond=None)[0]
        scale = 1.0
        for _ in range(30):
            trial = delta.copy()
            trial[: n - 1] += scale * step
            trial_resid = accelerating_power(trial, params, net)
            trial_norm = np.max(np.abs(trial_resid))
            if trial_norm < norm:
                break
            scale *= 0.5
        else:
            break
        delta, resid, norm = trial, trial_resid, trial_norm
    if norm <= tol:
        return delta
    raise NoConvergence(f"equilibrium solve stalled with residual {norm:.3e}", norm)


def manufacture_equilibrium(delta0, E, net: ReducedNetwork) -> np.ndarray:
    """Mechanical power that makes ``delta0`` an exact equilibrium."""
    return electrical_power(delta0, net, E)
