"""Forward corruption x_t = blur(x0, alpha_t) + beta_t * eps and its reverse-time posterior.

All functions accept a single grid (H, W) or a batch (..., H, W).
"""

from __future__ import annotations

import numpy as np

from .schedule import DiffusionSchedule
from .spectral import as_grid, blur, mask_entries, dct_forward, dct_inverse

__all__ = [
    "NoiseSource",
    "decomposed_transition_mean",
    "forward_sample",
    "transition_mean",
    "transition_sample",
]


class NoiseSource:
    """Seeded standard-normal stream.

    ``draws`` counts how many variates have been handed out so far.
    """

    def __init__(self, seed: int | np.random.SeedSequence):
        if isinstance(seed, np.random.SeedSequence):
            self.seed = seed.entropy
            self._gen = np.random.Generator(np.random.PCG64(seed))
        else:
            self.seed = int(seed)
            self._gen = np.random.Generator(np.random.PCG64(self.seed))
        self.draws = 0

    def normal(self, shape) -> np.ndarray:
        out = self._gen.standard_normal(shape)
        self.draws += out.size
        return out

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def spawn(self, n: int) -> list["NoiseSource"]:
        """Independent child streams, e.g. one per worker."""
        return [NoiseSource(ss) for ss in self._gen.bit_generator.seed_seq.spawn(n)]


def _check_t(s: DiffusionSchedule, t: int, lo: int = 0):
    if not lo <= t <= s.T:
        raise IndexError(f"step t={t} outside [{lo}, {s.T}]")


def forward_sample(x0, s: DiffusionSchedule, t: int, rng: NoiseSource) -> np.ndarray:
    x0 = as_grid(x0, "x0")
    _check_t(s, t)
    if t == 0:
        return x0.copy()
    mean = blur(x0, s.alpha[t])
    if s.beta[t] == 0:
        return mean
    return mean + s.beta[t] * rng.normal(x0.shape)


def _noise_coef(s: DiffusionSchedule, t: int) -> float:
    # sqrt(beta[t-1]^2 - sigma[t]^2); sigma <= beta[t-1] is a schedule invariant
    return float(np.sqrt(max(s.beta[t - 1] ** 2 - s.sigma[t] ** 2, 0.0)))


def _check_pair(x0, x_t):
    x0, x_t = as_grid(x0, "x0"), as_grid(x_t, "x_t")
    if x0.shape[-2:] != x_t.shape[-2:]:
        raise ValueError(f"x0 grid {x0.shape[-2:]} and x_t grid {x_t.shape[-2:]} differ")
    return x0, x_t


def _noise_direction(x0_blur, x_t, s: DiffusionSchedule, t: int) -> np.ndarray:
    """(x_t - blur(x0, alpha_t)) / beta_t, with the cold-step convention 0 when beta_t = 0."""
    diff = x_t - x0_blur
    if s.beta[t] == 0:
        if not np.allclose(diff, 0, atol=1e-12):
            raise ValueError(f"beta[{t}] = 0 but x_t is not the blurred x0")
        return np.zeros_like(diff)
    return diff / s.beta[t]


def transition_mean(x0, x_t, s: DiffusionSchedule, t: int) -> np.ndarray:
    """Mean of q(x_{t-1} | x_t, x0)."""
    x0, x_t = _check_pair(x0, x_t)
    _check_t(s, t, 1)
    eps_dir = _noise_direction(blur(x0, s.alpha[t]), x_t, s, t)
    return blur(x0, s.alpha[t - 1]) + _noise_coef(s, t) * eps_dir


def decomposed_transition_mean(x0, x_t, s: DiffusionSchedule, t: int) -> np.ndarray:
    """Same mean written as x_t + (missing detail) + (step towards the blurry x0)."""
    x0, x_t = _check_pair(x0, x_t)
    _check_t(s, t, 1)
    h, w = x0.shape[-2:]
    m_prev = mask_entries(h, w, s.alpha[t - 1])
    m_cur = mask_entries(h, w, s.alpha[t])
    detail = dct_inverse((m_prev - m_cur) * dct_forward(x0))
    blurry = blur(x0, s.alpha[t])
    towards_blurry = -_noise_direction(blurry, x_t, s, t)
    return x_t + detail + (s.beta[t] - _noise_coef(s, t)) * towards_blurry


def transition_sample(x0, x_t, s: DiffusionSchedule, t: int, rng: NoiseSource) -> np.ndarray:
    mean = transition_mean(x0, x_t, s, t)
    if s.sigma[t] == 0:
        return mean
    return mean + s.sigma[t] * rng.normal(mean.shape)
