"""Two-headed MLP predicting the blurry signal (D) and the missing detail (R).

Layout::

    u  = [c_in(beta) * x_t,  log(beta) / 4,  log1p(alpha)]
    h1 = tanh(W1 u + b1)
    h2 = tanh(W2 h1 + b2)
    D  = c_skip(beta) x_t + c_out(beta) (WD h2 + bD)
    R  = c_skip(beta) x_t + c_out(beta) (WR h2 + bR)    if R is trained on x0
    R  = sigma_data V (I - M_alpha) V^T (WR h2 + bR)     if R is trained on x0 - blur(x0)

with the usual c_in/c_skip/c_out noise-level preconditioning. Filtering the
residual head through (I - M_alpha) gives it the same spectral support as its
target: zero DC, and vanishing as alpha -> 0. Without it, a constant-size
output error at small alpha is blown up by the pseudo-inverse of (I - M) when
the sampler reconstructs the detail term. The backward pass is written out by
hand; :func:`gradients` is checked against central differences in the test
suite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .forward import NoiseSource
from .oracle import PredictionPair
from .schedule import DiffusionSchedule
from .spectral import as_grid, blur_each, dct_forward, dct_inverse

__all__ = [
    "Adam",
    "PARAM_NAMES",
    "TrainBatch",
    "TwoHeadPredictor",
    "gradients",
    "head_weights",
    "load_checkpoint",
    "loss",
    "make_batch",
    "predict",
    "save_checkpoint",
    "train",
    "train_step",
]

PARAM_NAMES = ("W1", "b1", "W2", "b2", "WD", "bD", "WR", "bR")

# (weight on D loss, weight on R loss, what R is trained on)
_VARIANT_HEADS = {
    "a": (0.0, 1.0, "clean"),
    "b": (1.0, 0.0, "residual"),
    "c": (1.0, 1.0, "clean"),
    "d": (1.0, 1.0, "residual"),
}


def head_weights(variant: str) -> tuple[float, float, str]:
    try:
        return _VARIANT_HEADS[variant]
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}") from None


class TwoHeadPredictor:
    def __init__(self, shape: tuple[int, int], hidden: int = 64, sigma_data: float = 1.0,
                 skip: bool = True, residual_target: str = "residual",
                 rng: np.random.Generator | None = None, zero_heads: bool = True):
        if residual_target not in ("residual", "clean"):
            raise ValueError(f"unknown residual target {residual_target!r}")
        self.shape = (int(shape[0]), int(shape[1]))
        self.hidden = int(hidden)
        self.sigma_data = float(sigma_data)
        self.skip = bool(skip)
        self.residual_target = residual_target
        d = self.dim
        rng = rng if rng is not None else np.random.default_rng(0)
        n_in = d + 2
        self.params = {
            "W1": rng.standard_normal((hidden, n_in)) / math.sqrt(n_in),
            "b1": np.zeros(hidden),
            "W2": rng.standard_normal((hidden, hidden)) / math.sqrt(hidden),
            "b2": np.zeros(hidden),
            "WD": np.zeros((d, hidden)),
            "bD": np.zeros(d),
            "WR": np.zeros((d, hidden)),
            "bR": np.zeros(d),
        }
        if not zero_heads:
            for k in ("WD", "WR"):
                self.params[k] = rng.standard_normal((d, hidden)) / math.sqrt(hidden)

    @property
    def dim(self) -> int:
        return self.shape[0] * self.shape[1]

    def copy(self) -> "TwoHeadPredictor":
        other = object.__new__(TwoHeadPredictor)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def scalings(self, beta):
        """(c_in, c_skip, c_out) for noise level(s) beta."""
        sd2 = self.sigma_data**2
        beta = np.asarray(beta, dtype=np.float64)
        c_in = 1.0 / np.sqrt(beta**2 + sd2)
        if not self.skip:
            return c_in, np.zeros_like(beta), np.ones_like(beta) * self.sigma_data
        c_skip = sd2 / (beta**2 + sd2)
        c_out = beta * self.sigma_data / np.sqrt(beta**2 + sd2)
        return c_in, c_skip, c_out

    def _residual_filter(self, alpha) -> np.ndarray:
        """Per-sample DCT-domain entries of (I - M_alpha), shape (n, H, W)."""
        h, w = self.shape
        f2 = (np.arange(h)[:, None] / h) ** 2 + (np.arange(w)[None, :] / w) ** 2
        return -np.expm1(-0.5 * np.pi**2 * alpha[:, None, None] ** 2 * f2)

    def _filter(self, v, keep):
        n = v.shape[0]
        return dct_inverse(keep * dct_forward(v.reshape((n,) + self.shape))).reshape(n, -1)

    def _forward(self, x, alpha, beta):
        """x: (n, d); alpha, beta: (n,). Returns outputs and the cache for backprop."""
        p = self.params
        c_in, c_skip, c_out = self.scalings(beta)
        u = np.concatenate([c_in[:, None] * x, (np.log(beta) / 4)[:, None],
                            np.log1p(alpha)[:, None]], axis=1)
        h1 = np.tanh(u @ p["W1"].T + p["b1"])
        h2 = np.tanh(h1 @ p["W2"].T + p["b2"])
        fd = h2 @ p["WD"].T + p["bD"]
        fr = h2 @ p["WR"].T + p["bR"]
        if not (np.all(np.isfinite(fd)) and np.all(np.isfinite(fr))):
            raise FloatingPointError("predictor produced non-finite outputs")
        d_out = c_skip[:, None] * x + c_out[:, None] * fd
        if self.residual_target == "clean":
            keep = None
            r_scale = c_out
            r_out = c_skip[:, None] * x + c_out[:, None] * fr
        else:
            keep = self._residual_filter(alpha)
            # largest entry of (I - M): the residual's overall size relative to x0
            r_scale = self.sigma_data * keep.reshape(len(alpha), -1).max(axis=1)
            r_out = self.sigma_data * self._filter(fr, keep)
        return d_out, r_out, (u, h1, h2, c_out, r_scale, keep)

    def predict(self, x_t, alpha_t, beta_t) -> PredictionPair:
        x_t = as_grid(x_t, "x_t")
        if x_t.shape[-2:] != self.shape:
            raise ValueError(f"x_t grid {x_t.shape[-2:]} does not match predictor grid {self.shape}")
        lead = x_t.shape[:-2]
        flat = x_t.reshape(-1, self.dim)
        n = flat.shape[0]
        alpha = np.broadcast_to(np.asarray(alpha_t, dtype=np.float64), lead).reshape(n)
        beta = np.broadcast_to(np.asarray(beta_t, dtype=np.float64), lead).reshape(n)
        if np.any(beta <= 0):
            raise ValueError("predictor needs beta > 0")
        d_out, r_out, _ = self._forward(flat, alpha, beta)
        return PredictionPair(d_out.reshape(x_t.shape), r_out.reshape(x_t.shape))


def predict(p: TwoHeadPredictor, x_t, alpha_t, beta_t) -> PredictionPair:
    return p.predict(x_t, alpha_t, beta_t)


@dataclass
class TrainBatch:
    """Clean grids with their corruption levels, noisy inputs and both head targets."""

    x0: np.ndarray          # (n, H, W)
    t: np.ndarray           # (n,) step indices into the training schedule
    alpha: np.ndarray       # (n,)
    beta: np.ndarray        # (n,)
    x_t: np.ndarray = field(repr=False, default=None)
    target_d: np.ndarray = field(repr=False, default=None)
    target_r: np.ndarray = field(repr=False, default=None)

    def __len__(self):
        return len(self.t)


def make_batch(x0, s: DiffusionSchedule, rng: NoiseSource, t=None) -> TrainBatch:
    """Corrupt clean grids x0 (n, H, W) at random (or given) steps t in [1, T].

    The R target stored here is the residual x0 - blur(x0); for predictors
    whose R head is trained on x0, :func:`loss` uses ``x0`` instead.
    """
    x0 = as_grid(x0, "x0")
    if x0.ndim == 2:
        x0 = x0[None]
    n = x0.shape[0]
    if n == 0:
        raise ValueError("batch must be nonempty")
    if t is None:
        t = rng.generator.integers(1, s.T + 1, size=n)
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 1) or np.any(t > s.T):
        raise IndexError("training steps must lie in [1, T]")
    alpha, beta = s.alpha[t], s.beta[t]
    blurry = blur_each(x0, alpha)
    x_t = blurry + beta[:, None, None] * rng.normal(x0.shape)
    return TrainBatch(x0, t, alpha, beta, x_t, blurry, x0 - blurry)


def _targets(p: TwoHeadPredictor, batch: TrainBatch):
    n = len(batch)
    td = batch.target_d.reshape(n, -1)
    tr = (batch.x0 if p.residual_target == "clean" else batch.target_r).reshape(n, -1)
    return td, tr


def loss(p: TwoHeadPredictor, batch: TrainBatch) -> tuple[float, float]:
    """Mean squared error of each head against its target."""
    n = len(batch)
    d_out, r_out, _ = p._forward(batch.x_t.reshape(n, -1), batch.alpha, batch.beta)
    td, tr = _targets(p, batch)
    return float(np.mean((d_out - td) ** 2)), float(np.mean((r_out - tr) ** 2))


def gradients(p: TwoHeadPredictor, batch: TrainBatch, weight_d: float = 1.0,
              weight_r: float = 1.0, noise_weighting: bool = False
              ) -> tuple[float, dict[str, np.ndarray]]:
    """Value and gradient of ``weight_d * loss_D + weight_r * loss_R`` for every parameter.

    With ``noise_weighting`` each sample's squared error is divided by the
    square of its head's output scale, which puts every noise level on an equal
    footing (the raw MSE of the D head shrinks like beta**2 as beta -> 0).
    """
    prm = p.params
    n = len(batch)
    d_out, r_out, (u, h1, h2, c_out, r_scale, keep) = p._forward(
        batch.x_t.reshape(n, -1), batch.alpha, batch.beta)
    td, tr = _targets(p, batch)
    ed, er = d_out - td, r_out - tr
    if noise_weighting:
        lam_d = 1.0 / c_out[:, None] ** 2
        # at alpha = 0 the filtered residual head is identically zero, so it gets no weight
        lam_r = np.zeros((n, 1))
        live = r_scale > 1e-12
        lam_r[live, 0] = 1.0 / r_scale[live] ** 2
    else:
        lam_d = lam_r = np.ones((n, 1))
    total = weight_d * np.mean(lam_d * ed**2) + weight_r * np.mean(lam_r * er**2)
    scale = 2.0 / ed.size
    g_fd = weight_d * scale * lam_d * ed * c_out[:, None]
    if keep is None:
        g_fr = weight_r * scale * lam_r * er * r_scale[:, None]
    else:
        g_fr = p.sigma_data * p._filter(weight_r * scale * lam_r * er, keep)
    grads = {
        "WD": g_fd.T @ h2, "bD": g_fd.sum(0),
        "WR": g_fr.T @ h2, "bR": g_fr.sum(0),
    }
    g_h2 = g_fd @ prm["WD"] + g_fr @ prm["WR"]
    g_z2 = g_h2 * (1 - h2**2)
    grads["W2"], grads["b2"] = g_z2.T @ h1, g_z2.sum(0)
    g_z1 = (g_z2 @ prm["W2"]) * (1 - h1**2)
    grads["W1"], grads["b1"] = g_z1.T @ u, g_z1.sum(0)
    return float(total), grads


def train_step(p: TwoHeadPredictor, batch: TrainBatch, lr: float, variant: str = "d",
               noise_weighting: bool = False) -> float:
    """One plain SGD step in place; returns the weighted loss before the update."""
    wd, wr, target = head_weights(variant)
    if variant != "b" and target != p.residual_target:
        raise ValueError(f"variant {variant} trains R on {target!r} but predictor has {p.residual_target!r}")
    value, grads = gradients(p, batch, wd, wr, noise_weighting)
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite training loss {value}")
    if lr != 0:
        for k in PARAM_NAMES:
            p.params[k] -= lr * grads[k]
    return value


class Adam:
    """Adam moments for a :class:`TwoHeadPredictor`'s parameters."""

    def __init__(self, p: TwoHeadPredictor, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in p.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in p.params.items()}
        self.t = 0

    def step(self, p: TwoHeadPredictor, grads: dict, lr: float):
        self.t += 1
        c1, c2 = 1 - self.beta1**self.t, 1 - self.beta2**self.t
        for k in PARAM_NAMES:
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * grads[k]
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * grads[k] ** 2
            p.params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def train(p: TwoHeadPredictor, sample_data, s: DiffusionSchedule, rng: NoiseSource, steps: int,
          lr: float, batch_size: int = 256, variant: str = "d", noise_weighting: bool = False,
          optimizer: str = "sgd", cosine: bool = False, log_every: int = 0) -> list[float]:
    """Train in place for ``steps`` steps; ``sample_data(n, generator)`` draws clean grids.

    ``optimizer`` is ``"sgd"`` or ``"adam"``; ``cosine`` anneals the learning
    rate from ``lr`` to 0 over the run. Returns the per-step losses.
    """
    if optimizer not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    wd, wr, target = head_weights(variant)
    if variant != "b" and target != p.residual_target:
        raise ValueError(f"variant {variant} trains R on {target!r} but predictor has {p.residual_target!r}")
    adam = Adam(p) if optimizer == "adam" else None
    history = []
    for i in range(steps):
        batch = make_batch(sample_data(batch_size, rng.generator), s, rng)
        value, grads = gradients(p, batch, wd, wr, noise_weighting)
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite training loss {value} at step {i}")
        rate = lr * 0.5 * (1 + math.cos(math.pi * i / steps)) if cosine else lr
        if adam is not None:
            adam.step(p, grads, rate)
        else:
            for k in PARAM_NAMES:
                p.params[k] -= rate * grads[k]
        history.append(value)
        if log_every and (i + 1) % log_every == 0:
            print(f"step {i + 1:6d}  loss {np.mean(history[-log_every:]):.6f}")
    return history


def save_checkpoint(p: TwoHeadPredictor, path) -> tuple[Path, Path]:
    """Write ``path`` (little-endian float64 parameters, concatenated) and ``path.json``."""
    path = Path(path)
    layout = [{"name": k, "shape": list(p.params[k].shape)} for k in PARAM_NAMES]
    flat = np.concatenate([p.params[k].ravel() for k in PARAM_NAMES]).astype("<f8")
    path.write_bytes(flat.tobytes())
    meta = {
        "format": "float64-le",
        "shape": list(p.shape),
        "hidden": p.hidden,
        "sigma_data": p.sigma_data,
        "skip": p.skip,
        "residual_target": p.residual_target,
        "params": layout,
    }
    side = path.with_name(path.name + ".json")
    side.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path, side


def load_checkpoint(path) -> TwoHeadPredictor:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    p = TwoHeadPredictor(tuple(meta["shape"]), meta["hidden"], meta["sigma_data"], meta["skip"],
                         meta["residual_target"])
    flat = np.frombuffer(path.read_bytes(), dtype="<f8")
    offset = 0
    for entry in meta["params"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        p.params[entry["name"]] = flat[offset:offset + size].reshape(entry["shape"]).astype(np.float64)
        offset += size
    if offset != flat.size:
        raise ValueError(f"checkpoint holds {flat.size} values, sidecar describes {offset}")
    return p
