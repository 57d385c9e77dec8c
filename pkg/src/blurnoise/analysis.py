"""Spectral statistics, BNR selection and two-sample quality metrics."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import wasserstein_distance

from .spectral import as_grid, dct_forward, dct_inverse

__all__ = [
    "QualityReport",
    "Reference",
    "RadialPSD",
    "energy_distance",
    "fit_power_law",
    "pink_fields",
    "quality_report",
    "radial_frequency",
    "radial_psd",
    "select_bnr",
    "wasserstein_per_coordinate",
]

log = logging.getLogger(__name__)


def radial_frequency(height: int, width: int) -> np.ndarray:
    """sqrt((k1/H)^2 + (k2/W)^2) for every DCT coefficient, in cycles per two pixels."""
    k1 = np.arange(height)[:, None] / height
    k2 = np.arange(width)[None, :] / width
    return np.sqrt(k1**2 + k2**2)


@dataclass(frozen=True)
class RadialPSD:
    centers: np.ndarray
    power: np.ndarray
    counts: np.ndarray
    shape: tuple[int, int]
    # summed power over all non-DC coefficients, per image
    total_ac: float = 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frequency", "power", "count"])
        for f, p, c in zip(self.centers, self.power, self.counts):
            w.writerow([f"{f:.10g}", f"{p:.10g}", int(c)])
        return buf.getvalue()


def radial_psd(images, n_bins: int | None = None) -> RadialPSD:
    """Mean squared DCT coefficient, binned by radial frequency.

    Bins are equal-width on (0, f_max] where f_max is the largest radial
    frequency on the grid; the DC coefficient is excluded. Empty bins are
    dropped.
    """
    g = as_grid(images, "images")
    if g.ndim == 2:
        g = g[None]
    g = g.reshape((-1,) + g.shape[-2:])
    if g.shape[0] == 0:
        raise ValueError("need at least one image")
    h, w = g.shape[-2:]
    power2d = np.mean(dct_forward(g) ** 2, axis=0)
    freq = radial_frequency(h, w)
    ac = freq > 0
    if not np.any(ac):
        raise ValueError("a 1x1 grid has no non-DC frequencies")
    if n_bins is None:
        n_bins = max(h, w)
    edges = np.linspace(0.0, freq.max(), n_bins + 1)
    idx = np.clip(np.searchsorted(edges, freq[ac], side="left") - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    sums = np.bincount(idx, weights=power2d[ac], minlength=n_bins)
    fsum = np.bincount(idx, weights=freq[ac], minlength=n_bins)
    keep = counts > 0
    return RadialPSD(
        centers=fsum[keep] / counts[keep],
        power=sums[keep] / counts[keep],
        counts=counts[keep],
        shape=(h, w),
        total_ac=float(power2d[ac].sum()),
    )


def fit_power_law(psd: RadialPSD, trim: float = 0.1) -> tuple[float, float]:
    """Least-squares fit log(power) = intercept - exponent * log(f) on mid-band bins.

    Returns ``(exponent, intercept)``; the lowest and highest ``trim`` fraction
    of bins are left out.
    """
    ok = psd.power > 0
    f, p = psd.centers[ok], psd.power[ok]
    if len(f) < 5:
        raise ValueError(f"need at least 5 nonzero bins, got {len(f)}")
    n = len(f)
    lo, hi = int(np.floor(trim * n)), n - int(np.floor(trim * n))
    x, y = np.log(f[lo:hi]), np.log(p[lo:hi])
    slope, intercept = np.polyfit(x, y, 1)
    return float(-slope), float(intercept)


def pink_fields(n: int, height: int, width: int, exponent: float, rng: np.random.Generator,
                total_power: float | None = None) -> np.ndarray:
    """Gaussian fields whose DCT power falls as f**-exponent (DC set to 0)."""
    freq = radial_frequency(height, width)
    amp = np.zeros_like(freq)
    ac = freq > 0
    amp[ac] = freq[ac] ** (-exponent / 2)
    if total_power is not None:
        amp *= np.sqrt(total_power / np.sum(amp**2))
    coeffs = rng.standard_normal((n, height, width)) * amp
    return dct_inverse(coeffs)


def select_bnr(psd: RadialPSD, beta_min: float, beta_max: float, delta: float = 0.1,
               grid: np.ndarray | None = None, n_beta: int = 256) -> float:
    """Largest BNR for which blur only attenuates frequency bands noise already dominates.

    For every noise level beta in [beta_min, beta_max] (log-spaced) and every
    bin f: if ``psd(f) * m(f)**2 >= beta**2`` then ``m(f) >= 1 - delta``, where
    ``m`` is the blur mask at alpha = bnr * beta.
    """
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if grid is None:
        grid = 0.05 * np.arange(0, 401)
    h, w = psd.shape
    betas = np.geomspace(beta_min, beta_max, n_beta)
    # mask value at radial frequency f: exp(-(pi^2/2) alpha^2 f^2)
    f2 = psd.centers**2
    best = 0.0
    for b in np.sort(grid):
        alpha = b * betas[:, None]
        m = np.exp(-0.5 * np.pi**2 * alpha**2 * f2[None, :])
        signal_dominated = psd.power[None, :] * m**2 >= betas[:, None] ** 2
        if np.all(m[signal_dominated] >= 1 - delta):
            best = float(b)
    if best == 0.0:
        log.info("select_bnr: no positive BNR on the grid satisfies delta=%g", delta)
    return best


def _mean_pairwise(x: np.ndarray, y: np.ndarray, chunk: int = 2048) -> float:
    total = 0.0
    for i in range(0, len(x), chunk):
        total += cdist(x[i:i + chunk], y).sum()
    return total / (len(x) * len(y))


def _flat(samples) -> np.ndarray:
    a = np.asarray(samples, dtype=np.float64)
    if a.ndim == 1:
        return a[:, None]
    return a.reshape(a.shape[0], -1)


def energy_distance(x, y) -> float:
    """V-statistic energy distance 2E|X-Y| - E|X-X'| - E|Y-Y'|; exactly 0 for identical sets."""
    x, y = _flat(x), _flat(y)
    val = 2 * _mean_pairwise(x, y) - _mean_pairwise(x, x) - _mean_pairwise(y, y)
    return max(val, 0.0)


def wasserstein_per_coordinate(x, y) -> np.ndarray:
    x, y = _flat(x), _flat(y)
    return np.array([wasserstein_distance(x[:, j], y[:, j]) for j in range(x.shape[1])])


@dataclass(frozen=True)
class QualityReport:
    energy: float
    wasserstein: np.ndarray
    n_samples: int
    noise_floor: float

    @property
    def ratio(self) -> float:
        """Energy distance in units of the resampling noise floor."""
        return self.energy / self.noise_floor if self.noise_floor > 0 else np.inf


class Reference:
    """Ground-truth draws with the pieces of the energy distance that do not depend on the samples.

    The noise floor is the split-half energy distance of the reference set,
    averaged over ``n_splits`` random halvings (the first is the plain
    first-half/second-half split). A single split is dominated by how many
    draws land in each mixture mode, so one halving alone is a poor yardstick.
    Building one of these once and reusing it across a sweep also avoids
    recomputing the O(n^2) self term.
    """

    def __init__(self, draws, n_splits: int = 8, split_seed: int = 0):
        self.draws = _flat(draws)
        if len(self.draws) == 0:
            raise ValueError("reference set must be nonempty")
        if n_splits < 1:
            raise ValueError("n_splits must be >= 1")
        self.n_splits = n_splits
        self.split_seed = split_seed
        self._self_term = None
        self._floor = None

    @property
    def self_term(self) -> float:
        if self._self_term is None:
            self._self_term = _mean_pairwise(self.draws, self.draws)
        return self._self_term

    @property
    def noise_floor(self) -> float:
        if self._floor is None:
            n = len(self.draws)
            half = n // 2
            if half == 0:
                self._floor = 0.0
                return self._floor
            rng = np.random.default_rng(self.split_seed)
            vals = []
            for i in range(self.n_splits):
                order = np.arange(n) if i == 0 else rng.permutation(n)
                d = self.draws[order]
                vals.append(energy_distance(d[:half], d[half:2 * half]))
            self._floor = float(np.mean(vals))
        return self._floor

    def energy(self, samples) -> float:
        x = _flat(samples)
        val = 2 * _mean_pairwise(x, self.draws) - _mean_pairwise(x, x) - self.self_term
        return max(val, 0.0)


def quality_report(samples, reference) -> QualityReport:
    """Energy distance and per-coordinate W1 of ``samples`` against ``reference``.

    ``reference`` is an array of draws or a prepared :class:`Reference`.
    """
    x = _flat(samples)
    ref = reference if isinstance(reference, Reference) else Reference(reference)
    if len(x) == 0:
        raise ValueError("samples must be nonempty")
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("samples contain non-finite values")
    return QualityReport(ref.energy(x), wasserstein_per_coordinate(x, ref.draws), len(x),
                         ref.noise_floor)
