"""Blur and noise level sequences.

A schedule holds ``alpha[0..T]`` (Gaussian blur std, pixels), ``beta[0..T]``
(noise std, data units) and ``sigma[0..T]`` (per reverse step stochasticity),
with ``alpha[0] = beta[0] = 0`` so the last reverse step lands on clean data.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

__all__ = [
    "DiffusionSchedule",
    "bnr_of",
    "load_preset_table",
    "make_blurring_diffusion_schedule",
    "make_bnr_schedule",
    "noise_levels",
    "step_sigmas",
]


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    alpha: np.ndarray
    beta: np.ndarray
    sigma: np.ndarray
    bnr: float | None = None  # None for schedules whose BNR varies with t
    name: str = "bnr"

    def __post_init__(self):
        for key in ("alpha", "beta", "sigma"):
            arr = np.array(getattr(self, key), dtype=np.float64)
            if arr.shape != (self.T + 1,):
                raise ValueError(f"{key} must have length T+1={self.T + 1}, got {arr.shape}")
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise ValueError(f"{key} must be finite and nonnegative")
            arr.setflags(write=False)
            object.__setattr__(self, key, arr)
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.alpha[0] != 0 or self.beta[0] != 0:
            raise ValueError("alpha[0] and beta[0] must be 0")
        if np.any(np.diff(self.alpha) < 0) or np.any(np.diff(self.beta) < 0):
            raise ValueError("alpha and beta must be non-decreasing")
        if np.any(self.sigma[1:] > self.beta[:-1]):
            raise ValueError("sigma[t] must not exceed beta[t-1]")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", "alpha", "beta", "sigma"])
        for t in range(self.T + 1):
            writer.writerow([t, repr(float(self.alpha[t])), repr(float(self.beta[t])),
                             repr(float(self.sigma[t]))])
        return buf.getvalue()


def noise_levels(T: int, beta_min: float, beta_max: float, rho: float) -> np.ndarray:
    """Increasing rho-power interpolation between beta_min and beta_max, length T+1 with a leading 0."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_min < beta_max:
        raise ValueError(f"need 0 < beta_min < beta_max, got {beta_min}, {beta_max}")
    if rho < 1:
        raise ValueError(f"rho must be >= 1, got {rho}")
    if T == 1:
        frac = np.array([1.0])
    else:
        frac = np.arange(T) / (T - 1)
    lo, hi = beta_min ** (1 / rho), beta_max ** (1 / rho)
    beta = (lo + frac * (hi - lo)) ** rho
    return np.concatenate([[0.0], beta])


def step_sigmas(beta: np.ndarray, eta: float) -> np.ndarray:
    """sigma[t] = eta * beta[t-1] * sqrt(1 - (beta[t-1]/beta[t])**2), clamped to [0, beta[t-1]]."""
    if not 0 <= eta <= 1:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    sigma = np.zeros_like(beta)
    prev, cur = beta[:-1], beta[1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(cur > 0, prev / cur, 1.0)
    s = eta * prev * np.sqrt(np.clip(1 - ratio**2, 0, None))
    sigma[1:] = np.clip(s, 0, prev)
    return sigma


def make_bnr_schedule(T: int, beta_min: float, beta_max: float, rho: float, bnr: float,
                      eta: float = 0.0) -> DiffusionSchedule:
    """Constant blur-to-noise ratio schedule: ``alpha[t] = bnr * beta[t]``."""
    if not (bnr >= 0 and math.isfinite(bnr)):
        raise ValueError(f"bnr must be finite and nonnegative, got {bnr}")
    beta = noise_levels(T, beta_min, beta_max, rho)
    return DiffusionSchedule(T, bnr * beta, beta, step_sigmas(beta, eta), bnr=float(bnr), name="bnr")


def load_preset_table(name: str = "blurring_diffusion") -> tuple[np.ndarray, np.ndarray]:
    text = resources.files("blurnoise.presets").joinpath(f"{name}.csv").read_text()
    rows = [line for line in text.splitlines() if line and not line.startswith("#")]
    reader = csv.DictReader(rows)
    u, b = zip(*((float(r["u"]), float(r["bnr"])) for r in reader))
    return np.array(u), np.array(b)


def make_blurring_diffusion_schedule(T: int, beta_min: float = 0.002, beta_max: float = 80.0,
                                     rho: float = 7.0, eta: float = 0.0) -> DiffusionSchedule:
    """High, increasing BNR preset; BNR(t) comes from the committed knot table."""
    beta = noise_levels(T, beta_min, beta_max, rho)
    u_knots, bnr_knots = load_preset_table()
    u = np.array([1.0]) if T == 1 else np.arange(T) / (T - 1)
    ratio = np.exp(np.interp(u, u_knots, np.log(bnr_knots)))
    alpha = np.concatenate([[0.0], ratio * beta[1:]])
    return DiffusionSchedule(T, alpha, beta, step_sigmas(beta, eta), bnr=None,
                             name="blurring_diffusion")


def bnr_of(s: DiffusionSchedule, t: int) -> float:
    if not 1 <= t <= s.T:
        raise IndexError(f"t must lie in [1, {s.T}], got {t}")
    a, b = float(s.alpha[t]), float(s.beta[t])
    if s.bnr is not None and b > 0:
        return s.bnr
    if b == 0:
        return math.inf if a > 0 else 0.0
    return a / b
