"""Independent reference implementations shared by the unit and acceptance tests."""

import math

import numpy as np

from blurnoise.predictor import gradients


def cosine_eval(coeffs, x, y):
    """Evaluate the continuous cosine series with orthonormal DCT-II weights at points (x, y).

    Pixel centres sit at integer coordinates 0..N-1; written with math.cos only.
    """
    h, w = coeffs.shape
    out = np.zeros((len(x), len(y)))
    for k1 in range(h):
        a1 = math.sqrt((1 if k1 == 0 else 2) / h)
        cx = np.array([a1 * math.cos(math.pi * k1 * (xi + 0.5) / h) for xi in x])
        for k2 in range(w):
            if coeffs[k1, k2] == 0:
                continue
            a2 = math.sqrt((1 if k2 == 0 else 2) / w)
            cy = np.array([a2 * math.cos(math.pi * k2 * (yi + 0.5) / w) for yi in y])
            out += coeffs[k1, k2] * np.outer(cx, cy)
    return out


def heat_fd(u, time, h):
    """Explicit 5-point heat equation u_t = lap(u) on cell centres with reflecting walls."""
    dt = 0.2 * h * h
    steps = int(math.ceil(time / dt))
    dt = time / steps
    for _ in range(steps):
        p = np.pad(u, 1, mode="edge")
        lap = p[2:, 1:-1] + p[:-2, 1:-1] + p[1:-1, 2:] + p[1:-1, :-2] - 4 * u
        u = u + dt / (h * h) * lap
    return u


def heat_oracle(coeffs, alpha, refine=15):
    """Blur by running the heat equation for time alpha^2 / 2 on a refined grid."""
    h, w = coeffs.shape
    fx = -0.5 + (np.arange(refine * h) + 0.5) / refine
    fy = -0.5 + (np.arange(refine * w) + 0.5) / refine
    fine = heat_fd(cosine_eval(coeffs, fx, fy), alpha**2 / 2, 1.0 / refine)
    mid = (refine - 1) // 2
    return fine[mid::refine, mid::refine]


def numeric_grad(p, batch, name, wd, wr, nw, eps=1e-6):
    g = np.zeros_like(p.params[name])
    it = np.nditer(g, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = p.params[name][idx]
        p.params[name][idx] = old + eps
        up, _ = gradients(p, batch, wd, wr, nw)
        p.params[name][idx] = old - eps
        down, _ = gradients(p, batch, wd, wr, nw)
        p.params[name][idx] = old
        g[idx] = (up - down) / (2 * eps)
    return g
