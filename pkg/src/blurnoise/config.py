"""Flat key = value experiment configuration.

Grammar, one entry per line::

    # comment (also allowed after a value)
    key = value
    list_key = 0, 0.5, 2, 10
    matrix_key = 1, -1; -1, 1        # rows separated by ';'

Keys are case-sensitive; blank lines are ignored; a key may appear once.
Unknown keys are rejected so typos do not silently fall back to defaults.
``seed`` is mandatory.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "parse_config"]


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration."""


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _strs(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _matrix(text: str) -> tuple[tuple[float, ...], ...]:
    return tuple(_floats(row) for row in text.split(";") if row.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_float(text: str):
    return None if text.strip().lower() in ("", "none") else float(text)


_EXECUTION_ONLY = ("workers", "plots")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    # schedule
    T: int = 18
    beta_min: float = 0.002
    beta_max: float = 80.0
    rho: float = 7.0
    bnr: float | None = 0.5
    preset: str | None = None
    eta: float = 0.0
    # data: either a Gaussian mixture or a folder of images (PSD commands only)
    # default toy: four modes on a 2x2 grid, low/high frequency signs agreeing 80% of the time
    height: int = 2
    width: int = 2
    mixture_weights: tuple[float, ...] = (0.4, 0.1, 0.1, 0.4)
    mixture_means: tuple[tuple[float, ...], ...] = (
        (1.2, 0.08, 0.08, 0.56), (0.4, 0.88, 0.88, -0.24),
        (-0.4, -0.88, -0.88, 0.24), (-1.2, -0.08, -0.08, -0.56))
    mixture_var: tuple[float, ...] = (0.02,)
    image_dir: str | None = None
    # predictor
    predictor: str = "oracle"
    checkpoint: str | None = None
    hidden: int = 64
    train_steps: int = 4000
    train_lr: float = 0.002
    train_batch: int = 256
    optimizer: str = "adam"
    noise_weighting: bool = True
    train_T: int = 256
    # sampler
    variant: str = "d"
    step_mode: str = "heun"
    n_samples: int = 4000
    n_reference: int = 4000
    # independent train-and-sample repeats per sweep cell, averaged
    replicates: int = 1
    # sweeps
    bnr_list: tuple[float, ...] = (0.0, 0.5, 2.0, 10.0)
    variant_list: tuple[str, ...] = ("a", "b", "c", "d")
    nfe_list: tuple[int, ...] = (8, 16, 32, 64)
    # analysis
    psd_bins: int | None = None
    delta: float = 0.1
    # outputs
    plots: bool = False
    workers: int = 1

    def __post_init__(self):
        from .sampler import STEP_MODES, VARIANTS

        def need(ok, msg):
            if not ok:
                raise ConfigError(msg)

        need(self.T >= 1, f"T must be >= 1, got {self.T}")
        need(0 < self.beta_min < self.beta_max, "need 0 < beta_min < beta_max")
        need(self.rho >= 1, "rho must be >= 1")
        need(self.eta >= 0 and self.eta <= 1, "eta must lie in [0, 1]")
        need(self.bnr is None or self.bnr >= 0, "bnr must be nonnegative")
        need(self.preset in (None, "blurring_diffusion"), f"unknown preset {self.preset!r}")
        need(self.height >= 1 and self.width >= 1, "grid height and width must be positive")
        d = self.height * self.width
        k = len(self.mixture_weights)
        need(k >= 1, "mixture needs at least one component")
        need(len(self.mixture_means) == k, f"{k} mixture weights but {len(self.mixture_means)} means")
        need(all(len(m) == d for m in self.mixture_means),
             f"every mixture mean needs height*width = {d} entries")
        need(len(self.mixture_var) in (1, k), "mixture_var takes one value or one per component")
        need(all(v > 0 for v in self.mixture_var), "mixture variances must be positive")
        need(abs(sum(self.mixture_weights) - 1) < 1e-9 and min(self.mixture_weights) > 0,
             "mixture weights must be positive and sum to 1")
        need(self.predictor in ("oracle", "trained"), f"predictor must be oracle or trained, got {self.predictor!r}")
        need(self.optimizer in ("adam", "sgd"), f"optimizer must be adam or sgd, got {self.optimizer!r}")
        need(self.hidden >= 1 and self.train_steps >= 0 and self.train_batch >= 1 and self.train_T >= 1,
             "training sizes must be positive")
        need(self.variant in VARIANTS, f"variant must be one of {VARIANTS}")
        need(self.step_mode in STEP_MODES, f"step_mode must be one of {STEP_MODES}")
        need(self.replicates >= 1, "replicates must be >= 1")
        need(self.n_samples >= 2 and self.n_reference >= 2, "need at least 2 samples and 2 reference draws")
        need(all(b >= 0 for b in self.bnr_list), "bnr_list entries must be nonnegative")
        need(all(v in VARIANTS for v in self.variant_list), f"variant_list entries must be in {VARIANTS}")
        need(all(n >= 1 for n in self.nfe_list), "nfe_list entries must be positive")
        need(0 < self.delta < 1, "delta must lie in (0, 1)")
        need(self.workers >= 1, "workers must be >= 1")
        for name in ("checkpoint", "image_dir"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise ConfigError(f"{name} {path!r} does not exist")

    def replace(self, **changes) -> "ExperimentConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return ExperimentConfig(**values)

    def canonical(self) -> str:
        """Stable text form; configs that produce the same numbers give equal strings.

        Fields that only change how a run executes (worker count, plotting) are left out.
        """
        return "\n".join(f"{f.name}={getattr(self, f.name)!r}" for f in fields(self)
                         if f.name not in _EXECUTION_ONLY)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def mixture(self):
        from .oracle import GaussianMixture

        var = np.broadcast_to(np.asarray(self.mixture_var, dtype=np.float64), (len(self.mixture_weights),))
        return GaussianMixture.isotropic(self.mixture_weights, self.mixture_means, var,
                                         (self.height, self.width))


_PARSERS = {
    "seed": int, "T": int, "beta_min": float, "beta_max": float, "rho": float,
    "bnr": _optional_float, "preset": str, "eta": float,
    "height": int, "width": int, "mixture_weights": _floats, "mixture_means": _matrix,
    "mixture_var": _floats, "image_dir": str,
    "predictor": str, "checkpoint": str, "hidden": int, "train_steps": int, "train_lr": float,
    "train_batch": int, "optimizer": str, "noise_weighting": _bool, "train_T": int,
    "variant": str, "step_mode": str, "n_samples": int, "n_reference": int, "replicates": int,
    "bnr_list": _floats, "variant_list": _strs, "nfe_list": _ints,
    "psd_bins": int, "delta": float, "plots": _bool, "workers": int,
}
assert set(_PARSERS) == {f.name for f in fields(ExperimentConfig)}


def parse_config(text: str, base_dir: Path | str | None = None, **overrides) -> ExperimentConfig:
    """Parse config text; ``overrides`` (e.g. a seed from the command line) win over the file.

    Relative paths are resolved against ``base_dir``.
    """
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    if "seed" not in values:
        raise ConfigError("seed is mandatory")
    if "preset" in values:
        values.setdefault("bnr", None)
    for key in ("checkpoint", "image_dir"):
        if key in values and base_dir is not None:
            values[key] = str(Path(base_dir) / values[key])
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, **overrides) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {str(path)!r} not found")
    return parse_config(path.read_text(), base_dir=path.parent, **overrides)
