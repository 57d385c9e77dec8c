"""Orthonormal 2D DCT and DCT-domain Gaussian blur.

Grids are numpy arrays whose last two axes are (height, width). Any leading
axes are treated as a batch, so a stack of samples can be transformed in one
call.

The blur operator is diagonal in the DCT-II basis. For a blur of Gaussian
standard deviation ``alpha`` (in pixels) the multiplier for frequency
``(k1, k2)`` is the heat-kernel eigenvalue

    exp(-(pi**2 / 2) * alpha**2 * (k1**2 / H**2 + k2**2 / W**2))

i.e. the heat equation run for time ``alpha**2 / 2`` with Neumann (reflecting)
boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft

__all__ = [
    "BlurMask",
    "apply_blur",
    "apply_mask",
    "as_grid",
    "blur",
    "blur_each",
    "blur_matrix",
    "dct_direct",
    "dct_forward",
    "dct_inverse",
    "idct_direct",
    "make_blur_mask",
    "mask_entries",
]


def as_grid(values, name: str = "grid") -> np.ndarray:
    """Validate and return ``values`` as a float64 array of shape (..., H, W)."""
    g = np.asarray(values, dtype=np.float64)
    if g.ndim < 2:
        raise ValueError(f"{name} must have at least 2 dimensions, got shape {g.shape}")
    if g.shape[-1] < 1 or g.shape[-2] < 1:
        raise ValueError(f"{name} must have positive height and width, got {g.shape}")
    if not np.all(np.isfinite(g)):
        raise ValueError(f"{name} contains non-finite values")
    return g


def dct_forward(g) -> np.ndarray:
    """Orthonormal 2D DCT-II over the last two axes."""
    g = as_grid(g)
    return scipy.fft.dctn(g, type=2, norm="ortho", axes=(-2, -1))


def dct_inverse(s) -> np.ndarray:
    """Orthonormal 2D DCT-III over the last two axes; exact inverse of :func:`dct_forward`."""
    s = as_grid(s, "spectrum")
    return scipy.fft.idctn(s, type=2, norm="ortho", axes=(-2, -1))


def _dct_basis(n: int) -> np.ndarray:
    # C[k, x] = c_k cos(pi (2x + 1) k / 2n)
    k = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    c = np.full((n, 1), np.sqrt(2.0 / n))
    c[0] = np.sqrt(1.0 / n)
    return c * np.cos(np.pi * (2 * x + 1) * k / (2 * n))


def dct_direct(g) -> np.ndarray:
    """Reference DCT-II by explicit summation over every pixel, for testing."""
    g = as_grid(g)
    h, w = g.shape[-2:]
    ch, cw = _dct_basis(h), _dct_basis(w)
    out = np.zeros_like(g)
    for k1 in range(h):
        for k2 in range(w):
            acc = np.zeros(g.shape[:-2])
            for x1 in range(h):
                for x2 in range(w):
                    acc = acc + ch[k1, x1] * cw[k2, x2] * g[..., x1, x2]
            out[..., k1, k2] = acc
    return out


def idct_direct(s) -> np.ndarray:
    """Reference inverse (DCT-III) by explicit summation, for testing."""
    s = as_grid(s, "spectrum")
    h, w = s.shape[-2:]
    ch, cw = _dct_basis(h), _dct_basis(w)
    out = np.zeros_like(s)
    for x1 in range(h):
        for x2 in range(w):
            acc = np.zeros(s.shape[:-2])
            for k1 in range(h):
                for k2 in range(w):
                    acc = acc + ch[k1, x1] * cw[k2, x2] * s[..., k1, k2]
            out[..., x1, x2] = acc
    return out


@dataclass(frozen=True)
class BlurMask:
    """Diagonal DCT-domain attenuation for one blur level."""

    height: int
    width: int
    alpha: float
    entries: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


def mask_entries(height: int, width: int, alpha: float) -> np.ndarray:
    if height < 1 or width < 1:
        raise ValueError(f"mask shape must be positive, got {height}x{width}")
    if not np.isfinite(alpha) or alpha < 0:
        raise ValueError(f"blur level alpha must be a finite nonnegative number, got {alpha}")
    k1 = np.arange(height)[:, None] / height
    k2 = np.arange(width)[None, :] / width
    return np.exp(-0.5 * np.pi**2 * alpha**2 * (k1**2 + k2**2))


def make_blur_mask(height: int, width: int, alpha: float) -> BlurMask:
    entries = mask_entries(height, width, alpha)
    entries.setflags(write=False)
    return BlurMask(height, width, float(alpha), entries)


def apply_mask(g, entries: np.ndarray) -> np.ndarray:
    """Multiply the DCT coefficients of ``g`` by ``entries`` and transform back."""
    g = as_grid(g)
    if g.shape[-2:] != entries.shape:
        raise ValueError(f"grid shape {g.shape[-2:]} does not match mask shape {entries.shape}")
    return dct_inverse(entries * dct_forward(g))


def apply_blur(g, m: BlurMask) -> np.ndarray:
    return apply_mask(g, m.entries)


def blur(g, alpha: float) -> np.ndarray:
    """Gaussian blur of std ``alpha`` pixels, shorthand for ``apply_blur(g, make_blur_mask(...))``."""
    g = as_grid(g)
    if alpha == 0:
        return g.copy()
    return apply_mask(g, mask_entries(g.shape[-2], g.shape[-1], alpha))


def blur_each(g, alphas) -> np.ndarray:
    """Blur each grid of a batch (n, H, W) with its own level ``alphas[i]``."""
    g = as_grid(g)
    alphas = np.asarray(alphas, dtype=np.float64)
    if g.ndim != 3 or alphas.shape != (g.shape[0],):
        raise ValueError(f"need a batch (n, H, W) and n blur levels, got {g.shape} and {alphas.shape}")
    if np.any(alphas < 0) or not np.all(np.isfinite(alphas)):
        raise ValueError("blur levels must be finite and nonnegative")
    h, w = g.shape[-2:]
    f2 = (np.arange(h)[:, None] / h) ** 2 + (np.arange(w)[None, :] / w) ** 2
    entries = np.exp(-0.5 * np.pi**2 * alphas[:, None, None] ** 2 * f2)
    return dct_inverse(entries * dct_forward(g))


def blur_matrix(height: int, width: int, alpha: float) -> np.ndarray:
    """Dense (H*W, H*W) matrix of the blur operator acting on row-major flattened grids."""
    d = height * width
    basis = np.eye(d).reshape(d, height, width)
    # Symmetric, so rows and columns coincide.
    return blur(basis, alpha).reshape(d, d)
