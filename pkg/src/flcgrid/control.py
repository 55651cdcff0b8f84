"""Control laws (CPFL, DPFL, FLC) and penetration-level assignment.

Sign convention for the storage command ``Pu``: negative charges the ESS
(absorbs power from the bus), positive discharges it (injects power).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ModelArityMismatch, NonIntegralAssignment


class Mode(enum.Enum):
    NONE = "NONE"
    DPFL = "DPFL"
    CPFL = "CPFL"
    FLC = "FLC"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown controller mode {value!r}") from None


@dataclass(frozen=True)
class ControlAssignment:
    modes: tuple
    level: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(Mode.parse(m) for m in self.modes))

    def members(self, mode) -> list:
        mode = Mode.parse(mode)
        return [i for i, m in enumerate(self.modes) if m is mode]

    @classmethod
    def uniform(cls, n, mode) -> "ControlAssignment":
        mode = Mode.parse(mode)
        return cls((mode,) * n, 100.0 if mode in (Mode.DPFL, Mode.FLC) else 0.0)


@dataclass(frozen=True)
class TimeFeature:
    """Map absolute time to the model's time input, ``clip((t - t_fault) / horizon, 0, 1)``."""

    t_fault: float = 0.0
    horizon: float = 100.0

    def __call__(self, t):
        return np.clip((np.asarray(t, dtype=float) - self.t_fault) / self.horizon, 0.0, 1.0)


def dpfl_action(omega, delta, delta_star, alpha, beta):
    return -(alpha * omega + beta * (delta - delta_star))


def cpfl_action(pa, pd):
    return -(pa - pd)


def flc_action(model, omega, delta_err, t_feature, alpha, beta):
    """Learned controller: the model's estimate of ``Pa`` replaces the true one in CPFL.

    Works on scalars or on equal-length arrays (one entry per generator).
    Returns ``(Pu_hat, Pa_hat)``.
    """
    if model.in_dim != 3:
        raise ModelArityMismatch(f"FLC model must take 3 inputs, got {model.in_dim}")
    omega = np.asarray(omega, dtype=float)
    delta_err = np.asarray(delta_err, dtype=float)
    scalar = omega.ndim == 0
    omega, delta_err = np.atleast_1d(omega), np.atleast_1d(delta_err)
    tf = np.broadcast_to(np.asarray(t_feature, dtype=float), omega.shape)
    pa_hat = model.forward(np.stack([omega, delta_err, tf], axis=1))[:, 0]
    pd = dpfl_action(omega, delta_err, 0.0, alpha, beta)
    pu = cpfl_action(pa_hat, pd)
    if scalar:
        return float(pu[0]), float(pa_hat[0])
    return pu, pa_hat


def distributed_count(n: int, level_percent: float) -> int:
    """Number of distributed generators for a penetration level.

    Levels are percentages that may be rounded to the nearest integer, so 33 and
    67 are accepted for three generators; anything further than 0.05 of a
    generator from a whole count is rejected.
    """
    exact = level_percent * n / 100.0
    k = round(exact)
    if abs(exact - k) > 0.05 or not 0 <= k <= n:
        raise NonIntegralAssignment(f"level {level_percent}% of {n} generators is not a whole count")
    return int(k)


def assign_controllers(n: int, distributed_mode, level_percent: float) -> ControlAssignment:
    mode = Mode.parse(distributed_mode)
    if mode not in (Mode.FLC, Mode.DPFL):
        raise ValueError(f"distributed mode must be FLC or DPFL, got {mode.value}")
    k = distributed_count(n, level_percent)
    return ControlAssignment((mode,) * k + (Mode.CPFL,) * (n - k), float(level_percent))
