"""Closed-form optimal predictions for Gaussian-mixture data.

Under x_t = B x0 + beta * eps with B the (symmetric) blur matrix and
x0 ~ sum_k w_k N(mu_k, Sigma_k), the posterior of x0 is again a mixture:

    E_k[x0 | x_t] = mu_k + Sigma_k B^T S_k^{-1} (x_t - B mu_k),  S_k = B Sigma_k B^T + beta^2 I
    resp_k(x_t)  ∝ w_k N(x_t; B mu_k, S_k)

and E[x0 | x_t] = sum_k resp_k E_k[x0 | x_t].  This is what a perfectly trained
network would output, so it serves as ground truth for the sampler.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import logsumexp

from .schedule import DiffusionSchedule
from .spectral import as_grid, blur, blur_matrix

__all__ = [
    "GaussianMixture",
    "OraclePredictor",
    "PredictionPair",
    "manifold_distance",
    "oracle_predictions",
    "posterior_mean",
    "posterior_mean_x0",
]


@dataclass(frozen=True)
class PredictionPair:
    """Outputs of the two heads: ``denoised`` (D) and ``residual`` (R).

    For the default parameterization R estimates x0 - blur(x0); for
    parameterizations that train R on x0 itself it holds an x0 estimate.
    """

    denoised: np.ndarray
    residual: np.ndarray


class GaussianMixture:
    """Mixture of Gaussians over flattened (height, width) grids."""

    def __init__(self, weights, means, covariances, shape: tuple[int, int]):
        self.height, self.width = (int(shape[0]), int(shape[1]))
        d = self.height * self.width
        w = np.asarray(weights, dtype=np.float64).ravel()
        mu = np.asarray(means, dtype=np.float64).reshape(len(w), d)
        cov = np.asarray(covariances, dtype=np.float64)
        if cov.ndim == 2 and cov.shape == (len(w), d):
            cov = np.stack([np.diag(c) for c in cov])
        cov = cov.reshape(len(w), d, d)
        if np.any(w <= 0) or abs(w.sum() - 1) > 1e-12:
            raise ValueError(f"weights must be positive and sum to 1, got {w}")
        if not np.allclose(cov, np.swapaxes(cov, 1, 2), atol=1e-12):
            raise ValueError("covariances must be symmetric")
        try:
            self._chol = np.stack([np.linalg.cholesky(c) for c in cov])
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariances must be positive definite") from exc
        self.weights, self.means, self.covariances = w, mu, cov

    @property
    def K(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.height * self.width

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @classmethod
    def isotropic(cls, weights, means, variances, shape) -> "GaussianMixture":
        d = shape[0] * shape[1]
        variances = np.broadcast_to(np.asarray(variances, dtype=np.float64), (len(weights),))
        covs = np.stack([v * np.eye(d) for v in variances])
        return cls(weights, means, covs, shape)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw n grids, shape (n, H, W)."""
        comp = rng.choice(self.K, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        x = self.means[comp] + np.einsum("nij,nj->ni", self._chol[comp], z)
        return x.reshape(n, self.height, self.width)

    def mean(self) -> np.ndarray:
        return (self.weights @ self.means).reshape(self.height, self.width)


def posterior_mean(gm: GaussianMixture, y, B: np.ndarray, beta: float) -> np.ndarray:
    """E[x0 | y] for y = B x0 + beta * eps, on flattened vectors of shape (..., d)."""
    if not beta > 0:
        raise ValueError("posterior mean requires beta > 0")
    y = np.asarray(y, dtype=np.float64)
    d = gm.dim
    flat = y.reshape(-1, d)
    log_r = np.empty((flat.shape[0], gm.K))
    cond = np.empty((gm.K,) + flat.shape)
    for k in range(gm.K):
        cov = gm.covariances[k]
        S = B @ cov @ B.T + beta**2 * np.eye(d)
        cf = scipy.linalg.cho_factor(S, lower=True)
        resid = flat - B @ gm.means[k]
        z = scipy.linalg.cho_solve(cf, resid.T).T
        cond[k] = gm.means[k] + z @ (cov @ B.T).T
        logdet = 2 * np.sum(np.log(np.diag(cf[0])))
        log_r[:, k] = (np.log(gm.weights[k]) - 0.5 * np.sum(resid * z, axis=1)
                       - 0.5 * logdet - 0.5 * d * np.log(2 * np.pi))
    resp = np.exp(log_r - logsumexp(log_r, axis=1, keepdims=True))
    out = np.einsum("nk,knd->nd", resp, cond)
    return out.reshape(y.shape)


def posterior_mean_x0(gm: GaussianMixture, x_t, s: DiffusionSchedule, t: int) -> np.ndarray:
    x_t = as_grid(x_t, "x_t")
    if x_t.shape[-2:] != gm.shape:
        raise ValueError(f"x_t grid {x_t.shape[-2:]} does not match mixture grid {gm.shape}")
    B = blur_matrix(gm.height, gm.width, s.alpha[t])
    flat = x_t.reshape(x_t.shape[:-2] + (gm.dim,))
    return posterior_mean(gm, flat, B, float(s.beta[t])).reshape(x_t.shape)


def oracle_predictions(gm: GaussianMixture, x_t, s: DiffusionSchedule, t: int) -> PredictionPair:
    x0_hat = posterior_mean_x0(gm, x_t, s, t)
    denoised = blur(x0_hat, s.alpha[t])
    return PredictionPair(denoised, x0_hat - denoised)


def manifold_distance(gm: GaussianMixture, x) -> np.ndarray | float:
    """Smallest Mahalanobis distance from x to any mixture component."""
    x = as_grid(x)
    flat = x.reshape(-1, gm.dim)
    best = np.full(flat.shape[0], np.inf)
    for k in range(gm.K):
        diff = flat - gm.means[k]
        z = scipy.linalg.solve_triangular(gm._chol[k], diff.T, lower=True)
        best = np.minimum(best, np.sqrt(np.sum(z**2, axis=0)))
    if x.ndim == 2:
        return float(best[0])
    return best.reshape(x.shape[:-2])


class OraclePredictor:
    """Predictor interface backed by the exact posterior.

    ``residual_target`` selects what the R head returns: ``"residual"``
    (x0 - blur(x0), the default parameterization) or ``"clean"`` (x0 itself).
    """

    def __init__(self, gm: GaussianMixture, residual_target: str = "residual"):
        if residual_target not in ("residual", "clean"):
            raise ValueError(f"unknown residual target {residual_target!r}")
        self.gm = gm
        self.residual_target = residual_target
        self.calls = 0

    def predict(self, x_t, alpha_t: float, beta_t: float) -> PredictionPair:
        self.calls += 1
        x_t = as_grid(x_t, "x_t")
        B = blur_matrix(self.gm.height, self.gm.width, alpha_t)
        flat = x_t.reshape(x_t.shape[:-2] + (self.gm.dim,))
        x0_hat = posterior_mean(self.gm, flat, B, float(beta_t)).reshape(x_t.shape)
        denoised = blur(x0_hat, alpha_t)
        if self.residual_target == "clean":
            return PredictionPair(denoised, x0_hat)
        return PredictionPair(denoised, x0_hat - denoised)
