"""Reverse process: from a noise draw at t=T down to a clean sample at t=0.

Every step has the form

    x_{t-1} = x_t + V (M_{t-1} - M_t) V^T x0_hat            (add missing detail)
                  + (beta_t - c_t) (blurry - x_t) / beta_t   (move towards the blurry estimate)
                  + sigma_t eps

with ``c_t = sqrt(beta_{t-1}^2 - sigma_t^2)``. The four parameterizations
differ only in how the two network heads are turned into ``(x0_hat, blurry)``:

    a  R -> x0                      blurry = blur(R)
    b  D -> blurry                  x0_hat = V pinv(M) V^T D
    c  R -> x0, D -> blurry
    d  R -> x0 - blur(x0)           x0_hat = V pinv(I - M) V^T R, blurry = D

For ``d`` the detail term only ever sees ``(M_{t-1} - M_t) pinv(I - M_t)``, whose
entries are bounded by 1, so errors in R are never amplified.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .forward import NoiseSource
from .oracle import GaussianMixture, PredictionPair, manifold_distance
from .schedule import DiffusionSchedule
from .spectral import as_grid, blur, dct_forward, dct_inverse, mask_entries

__all__ = [
    "VARIANTS",
    "Predictor",
    "SamplerConfig",
    "Trajectory",
    "nfe_for",
    "prior_energy_ratio",
    "reverse_step",
    "sample",
    "variant_predictions",
]

VARIANTS = ("a", "b", "c", "d")
STEP_MODES = ("euler", "heun")


class Predictor(Protocol):
    def predict(self, x_t, alpha_t: float, beta_t: float) -> PredictionPair: ...


@dataclass
class SamplerConfig:
    schedule: DiffusionSchedule
    predictor: Predictor
    shape: tuple[int, int]
    variant: str = "d"
    step_mode: str = "heun"
    dc_guard: float = 1e-6
    prior_mean: np.ndarray | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.step_mode not in STEP_MODES:
            raise ValueError(f"step_mode must be one of {STEP_MODES}, got {self.step_mode!r}")
        if not 0 < self.dc_guard < 1:
            raise ValueError(f"dc_guard must lie in (0, 1), got {self.dc_guard}")
        target = getattr(self.predictor, "residual_target", None)
        wanted = "clean" if self.variant in ("a", "c") else "residual"
        if target is not None and self.variant != "b" and target != wanted:
            raise ValueError(f"variant {self.variant} needs a predictor whose R head targets "
                             f"{wanted!r}, got {target!r}")


@dataclass
class Trajectory:
    """States from t=T down to t=0; each state is a batch (n, H, W)."""

    steps: list[tuple[int, np.ndarray]] = field(default_factory=list)
    manifold: list[np.ndarray] | None = None

    def __len__(self):
        return len(self.steps)


def nfe_for(T: int, step_mode: str) -> int:
    """Predictor evaluations used by :func:`sample` for T steps."""
    return 2 * T - 1 if step_mode == "heun" else T


def _pinv(entries: np.ndarray, guard: float) -> np.ndarray:
    out = np.zeros_like(entries)
    keep = entries > guard
    out[keep] = 1.0 / entries[keep]
    return out


def variant_predictions(pred: PredictionPair, variant: str, s: DiffusionSchedule, t: int,
                        dc_guard: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Map raw head outputs to ``(x0_hat, blurry)`` for one parameterization."""
    alpha = s.alpha[t]
    if variant == "a":
        return pred.residual, blur(pred.residual, alpha)
    if variant == "c":
        return pred.residual, pred.denoised
    h, w = pred.denoised.shape[-2:]
    m = mask_entries(h, w, alpha)
    if variant == "b":
        return dct_inverse(_pinv(m, dc_guard) * dct_forward(pred.denoised)), pred.denoised
    if variant == "d":
        return dct_inverse(_pinv(1 - m, dc_guard) * dct_forward(pred.residual)), pred.denoised
    raise ValueError(f"unknown variant {variant!r}")


def _noise_coef(s: DiffusionSchedule, t: int) -> float:
    return float(np.sqrt(max(s.beta[t - 1] ** 2 - s.sigma[t] ** 2, 0.0)))


def _drift(x, x0_hat, blurry, s: DiffusionSchedule, t: int, beta_here: float) -> np.ndarray:
    """Deterministic increment over [t, t-1], with the direction evaluated where the noise is ``beta_here``."""
    h, w = x.shape[-2:]
    dm = mask_entries(h, w, s.alpha[t - 1]) - mask_entries(h, w, s.alpha[t])
    out = dct_inverse(dm * dct_forward(x0_hat)) if np.any(dm != 0) else np.zeros_like(x)
    if beta_here > 0:
        out = out + (s.beta[t] - _noise_coef(s, t)) * (blurry - x) / beta_here
    return out


def reverse_step(x_t, pred: PredictionPair, s: DiffusionSchedule, t: int, cfg: SamplerConfig | str,
                 rng: NoiseSource | None = None) -> np.ndarray:
    """One Euler (first-order) move from t to t-1 given the predictions at x_t.

    ``cfg`` may be a :class:`SamplerConfig` or just a variant letter.
    """
    if not 1 <= t <= s.T:
        raise IndexError(f"step t={t} outside [1, {s.T}]")
    variant, guard = (cfg, 1e-6) if isinstance(cfg, str) else (cfg.variant, cfg.dc_guard)
    x_t = as_grid(x_t, "x_t")
    x0_hat, blurry = variant_predictions(pred, variant, s, t, guard)
    out = x_t + _drift(x_t, x0_hat, blurry, s, t, s.beta[t])
    if s.sigma[t] > 0:
        if rng is None:
            raise ValueError("a stochastic step (sigma > 0) needs a noise source")
        out = out + s.sigma[t] * rng.normal(out.shape)
    return out


def prior_energy_ratio(x0, s: DiffusionSchedule, prior_mean=None) -> float:
    """Mean squared distance of blur(x0, alpha_T) from the prior mean, relative to beta_T^2."""
    x0 = as_grid(x0, "x0")
    centre = 0.0 if prior_mean is None else prior_mean
    resid = blur(x0, s.alpha[s.T]) - centre
    return float(np.mean(resid**2) / s.beta[s.T] ** 2)


def _evaluate(cfg: SamplerConfig, x, t):
    s = cfg.schedule
    pred = cfg.predictor.predict(x, float(s.alpha[t]), float(s.beta[t]))
    if not (np.all(np.isfinite(pred.denoised)) and np.all(np.isfinite(pred.residual))):
        raise FloatingPointError(f"non-finite predictions at t={t}")
    return variant_predictions(pred, cfg.variant, s, t, cfg.dc_guard)


def sample(cfg: SamplerConfig, rng: NoiseSource, n: int, trajectory: bool = False,
           mixture: GaussianMixture | None = None):
    """Draw n samples, shape (n, H, W).

    With ``trajectory=True`` also returns a :class:`Trajectory`; passing
    ``mixture`` records the Mahalanobis manifold distance of every state.
    """
    s = cfg.schedule
    h, w = cfg.shape
    x = s.beta[s.T] * rng.normal((n, h, w))
    if cfg.prior_mean is not None:
        x = x + cfg.prior_mean
    traj = Trajectory(manifold=[] if mixture is not None else None) if trajectory else None

    def record(t, state):
        if traj is None:
            return
        traj.steps.append((t, state.copy()))
        if mixture is not None:
            traj.manifold.append(np.atleast_1d(manifold_distance(mixture, state)))

    record(s.T, x)
    for t in range(s.T, 0, -1):
        x0_hat, blurry = _evaluate(cfg, x, t)
        k1 = _drift(x, x0_hat, blurry, s, t, s.beta[t])
        if cfg.step_mode == "heun" and s.beta[t - 1] > 0:
            x_euler = x + k1
            x0_b, blurry_b = _evaluate(cfg, x_euler, t - 1)
            k2 = _drift(x_euler, x0_b, blurry_b, s, t, s.beta[t - 1])
            x = x + 0.5 * (k1 + k2)
        else:
            x = x + k1
        if s.sigma[t] > 0:
            x = x + s.sigma[t] * rng.normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite sample state at t={t - 1}")
        record(t - 1, x)
    if trajectory:
        return x, traj
    return x
