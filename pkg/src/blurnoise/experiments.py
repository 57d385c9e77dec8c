"""Sweeps and single runs driven by an :class:`ExperimentConfig`.

Every sweep is a list of independent cells. Replicate ``j`` of cell ``i``
draws all of its randomness from ``SeedSequence([seed, i, j, stream])``, so
a cell's result does not depend on which worker ran it or in what order;
results are merged in cell order. Quality columns are means over the
``cfg.replicates`` replicates. The reference draws used to score samples come
from a separate stream shared by all cells.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import Reference, fit_power_law, quality_report, radial_psd, select_bnr
from .config import ConfigError, ExperimentConfig
from .forward import NoiseSource
from .oracle import OraclePredictor
from .predictor import TwoHeadPredictor, head_weights, load_checkpoint, train
from .sampler import SamplerConfig, nfe_for, sample
from .schedule import DiffusionSchedule, make_blurring_diffusion_schedule, make_bnr_schedule
from .spectral import blur_matrix

__all__ = [
    "Report",
    "build_predictor",
    "build_schedule",
    "cell_source",
    "check_prior",
    "load_images",
    "mixture_prior_ratio",
    "run_bnr_sweep",
    "run_nfe_sweep",
    "run_psd",
    "run_sample",
    "run_select_bnr",
    "run_train",
    "run_variant_sweep",
    "steps_for_nfe",
]

TRAIN_STREAM, SAMPLE_STREAM = 0, 1
REFERENCE_CELL = 2**31 - 1
# states with noise level at or below this count towards the manifold excursion
EXCURSION_BETA = 1.0


@dataclass
class Report:
    """Rows destined for one CSV file."""

    columns: list[str]
    rows: list[list]
    digest: str
    command: str

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# config {self.digest} command {self.command}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_fmt(v) for v in row])
        return buf.getvalue()

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12g}"
    return str(v)


def cell_source(cfg: ExperimentConfig, cell: int, stream: int, replicate: int = 0) -> NoiseSource:
    return NoiseSource(np.random.SeedSequence([cfg.seed, cell, replicate, stream]))


def build_schedule(cfg: ExperimentConfig, T: int | None = None, bnr: float | None = None) -> DiffusionSchedule:
    """Constant-BNR schedule, or the preset when ``cfg.preset`` is set and no ``bnr`` override is given."""
    T = cfg.T if T is None else T
    if bnr is None and cfg.preset is not None:
        return make_blurring_diffusion_schedule(T, cfg.beta_min, cfg.beta_max, cfg.rho, cfg.eta)
    bnr = cfg.bnr if bnr is None else bnr
    if bnr is None:
        raise ConfigError("set either bnr or preset")
    return make_bnr_schedule(T, cfg.beta_min, cfg.beta_max, cfg.rho, bnr, cfg.eta)


def mixture_prior_ratio(cfg: ExperimentConfig, s: DiffusionSchedule) -> float:
    """E|blur(x0, alpha_T)|^2 / (d beta_T^2) for the configured mixture, in closed form.

    This is how much signal the N(0, beta_T^2 I) prior draw ignores.
    """
    gm = cfg.mixture()
    B = blur_matrix(gm.height, gm.width, s.alpha[s.T])
    energy = sum(w * (np.sum((B @ mu) ** 2) + np.trace(B @ cov @ B))
                 for w, mu, cov in zip(gm.weights, gm.means, gm.covariances))
    return float(energy / (gm.dim * s.beta[s.T] ** 2))


def check_prior(cfg: ExperimentConfig, s: DiffusionSchedule, limit: float = 0.01):
    ratio = mixture_prior_ratio(cfg, s)
    if ratio >= limit:
        raise ConfigError(f"blurred data keeps {ratio:.3g} of beta_T^2 at t=T (limit {limit}); "
                          f"raise beta_max")
    return ratio


def build_predictor(cfg: ExperimentConfig, variant: str, bnr: float | None, cell: int,
                    replicate: int = 0, log_every: int = 0):
    """Oracle, loaded checkpoint, or a freshly trained network for ``variant`` at ``bnr``."""
    target = head_weights(variant)[2]
    gm = cfg.mixture()
    if cfg.predictor == "oracle":
        return OraclePredictor(gm, residual_target=target)
    if cfg.checkpoint is not None:
        return load_checkpoint(cfg.checkpoint)
    src = cell_source(cfg, cell, TRAIN_STREAM, replicate)
    p = TwoHeadPredictor(gm.shape, hidden=cfg.hidden, residual_target=target, rng=src.generator)
    train(p, gm.sample, build_schedule(cfg, cfg.train_T, bnr), src, cfg.train_steps, cfg.train_lr,
          batch_size=cfg.train_batch, variant=variant, noise_weighting=cfg.noise_weighting,
          optimizer=cfg.optimizer, cosine=cfg.optimizer == "adam", log_every=log_every)
    return p


def _reference(cfg: ExperimentConfig) -> Reference:
    src = cell_source(cfg, REFERENCE_CELL, SAMPLE_STREAM)
    return Reference(cfg.mixture().sample(cfg.n_reference, src.generator))


def _excursion(traj, s: DiffusionSchedule) -> float:
    """Mean over samples of the largest Mahalanobis distance once beta_t <= EXCURSION_BETA."""
    late = [d for (t, _), d in zip(traj.steps, traj.manifold) if s.beta[t] <= EXCURSION_BETA]
    return float(np.mean(np.max(np.stack(late), axis=0)))


def _score(cfg, s, predictor, variant, cell, ref, with_traj=False, replicate=0):
    check_prior(cfg, s)
    sc = SamplerConfig(s, predictor, (cfg.height, cfg.width), variant=variant, step_mode=cfg.step_mode)
    src = cell_source(cfg, cell, SAMPLE_STREAM, replicate)
    if with_traj:
        x, traj = sample(sc, src, cfg.n_samples, trajectory=True, mixture=cfg.mixture())
    else:
        x, traj = sample(sc, src, cfg.n_samples), None
    q = quality_report(x, ref)
    return q, traj


def _map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


# sweep cells are module-level so they can be pickled for worker processes

def _replicated(cfg, cell, variant, bnr, schedules, with_traj=False):
    """Mean quality per schedule over replicates: rows of (energy, ratio, floor, w1[, excursion])."""
    for s in schedules:
        check_prior(cfg, s)
    ref = _reference(cfg)
    acc = np.zeros((len(schedules), 5 if with_traj else 4))
    for j in range(cfg.replicates):
        p = build_predictor(cfg, variant, bnr, cell, j)
        for k, s in enumerate(schedules):
            q, traj = _score(cfg, s, p, variant, cell, ref, with_traj, j)
            vals = [q.energy, q.ratio, q.noise_floor, float(np.mean(q.wasserstein))]
            if with_traj:
                vals.append(_excursion(traj, s))
            acc[k] += vals
    return (acc / cfg.replicates).tolist()


def _bnr_cell(job):
    cfg, cell, bnr = job
    s = build_schedule(cfg, bnr=bnr)
    (row,) = _replicated(cfg, cell, cfg.variant, bnr, [s], with_traj=True)
    return [bnr, s.T, nfe_for(s.T, cfg.step_mode)] + row


def run_bnr_sweep(cfg: ExperimentConfig) -> Report:
    """Quality at a fixed step count for every BNR in ``cfg.bnr_list``."""
    if not cfg.bnr_list:
        raise ConfigError("bnr_list is empty")
    jobs = [(cfg, i, float(b)) for i, b in enumerate(cfg.bnr_list)]
    rows = _map(_bnr_cell, jobs, cfg.workers)
    cols = ["bnr", "T", "nfe", "energy", "energy_ratio", "noise_floor", "wasserstein_mean",
            "manifold_excursion_max"]
    return Report(cols, rows, cfg.digest(), "sweep-bnr")


def _variant_cell(job):
    cfg, cell, variant = job
    (row,) = _replicated(cfg, cell, variant, cfg.bnr, [build_schedule(cfg)])
    return [variant] + row


def run_variant_sweep(cfg: ExperimentConfig) -> Report:
    """Quality of each parameterization in ``cfg.variant_list``, each with its own predictor."""
    if not cfg.variant_list:
        raise ConfigError("variant_list is empty; give e.g. 'variant_list = a, b, c, d'")
    jobs = [(cfg, i, v) for i, v in enumerate(cfg.variant_list)]
    rows = _map(_variant_cell, jobs, cfg.workers)
    return Report(["variant", "energy", "energy_ratio", "noise_floor", "wasserstein_mean"], rows,
                  cfg.digest(), "sweep-variant")


def steps_for_nfe(nfe: int, step_mode: str) -> int:
    """Largest T whose evaluation count does not exceed ``nfe``."""
    return max(1, (nfe + 1) // 2) if step_mode == "heun" else nfe


def _nfe_cell(job):
    cfg, cell, bnr, nfes = job
    schedules = [build_schedule(cfg, T=steps_for_nfe(nfe, cfg.step_mode), bnr=bnr) for nfe in nfes]
    rows = _replicated(cfg, cell, cfg.variant, bnr, schedules)
    return [[bnr, nfe, s.T, nfe_for(s.T, cfg.step_mode)] + r[:3] for nfe, s, r in zip(nfes, schedules, rows)]


def run_nfe_sweep(cfg: ExperimentConfig) -> Report:
    """Quality against evaluation budget for each BNR; one predictor per BNR is shared across budgets."""
    if not cfg.bnr_list or not cfg.nfe_list:
        raise ConfigError("bnr_list and nfe_list must be nonempty")
    jobs = [(cfg, i, float(b), cfg.nfe_list) for i, b in enumerate(cfg.bnr_list)]
    rows = [r for block in _map(_nfe_cell, jobs, cfg.workers) for r in block]
    return Report(["bnr", "nfe_budget", "T", "nfe", "energy", "energy_ratio", "noise_floor"], rows,
                  cfg.digest(), "sweep-nfe")


def run_train(cfg: ExperimentConfig, log_every: int = 0):
    """Train one predictor for ``cfg.variant`` at the configured schedule; returns (predictor, loss report)."""
    if cfg.predictor != "trained":
        raise ConfigError("train needs 'predictor = trained'")
    if cfg.checkpoint is not None:
        raise ConfigError("train writes a checkpoint; do not also set 'checkpoint'")
    gm = cfg.mixture()
    src = cell_source(cfg, 0, TRAIN_STREAM)
    p = TwoHeadPredictor(gm.shape, hidden=cfg.hidden, residual_target=head_weights(cfg.variant)[2],
                         rng=src.generator)
    hist = train(p, gm.sample, build_schedule(cfg, cfg.train_T), src, cfg.train_steps, cfg.train_lr,
                 batch_size=cfg.train_batch, variant=cfg.variant, noise_weighting=cfg.noise_weighting,
                 optimizer=cfg.optimizer, cosine=cfg.optimizer == "adam", log_every=log_every)
    return p, Report(["step", "loss"], [[i + 1, v] for i, v in enumerate(hist)], cfg.digest(), "train")


def run_sample(cfg: ExperimentConfig):
    """Sample once. Returns (samples, trajectory, quality report, prior energy ratio)."""
    s = build_schedule(cfg)
    p = build_predictor(cfg, cfg.variant, cfg.bnr, 0)
    gm = cfg.mixture()
    ratio = check_prior(cfg, s)
    ref = _reference(cfg)
    sc = SamplerConfig(s, p, gm.shape, variant=cfg.variant, step_mode=cfg.step_mode)
    x, traj = sample(sc, cell_source(cfg, 0, SAMPLE_STREAM), cfg.n_samples, trajectory=True, mixture=gm)
    q = quality_report(x, ref)
    quality = Report(["energy", "energy_ratio", "noise_floor", "wasserstein_mean", "prior_energy_ratio",
                      "nfe", "manifold_excursion_max"],
                     [[q.energy, q.ratio, q.noise_floor, float(np.mean(q.wasserstein)), ratio,
                       nfe_for(s.T, cfg.step_mode), _excursion(traj, s)]], cfg.digest(), "sample")
    return x, traj, quality, ratio


def samples_report(x, cfg: ExperimentConfig, command: str = "sample") -> Report:
    flat = x.reshape(len(x), -1)
    cols = ["index"] + [f"x{i}_{j}" for i in range(cfg.height) for j in range(cfg.width)]
    return Report(cols, [[i] + [float(v) for v in row] for i, row in enumerate(flat)], cfg.digest(), command)


def trajectory_report(traj, cfg: ExperimentConfig, max_chains: int = 16) -> Report:
    """Long format: one row per (step, chain) for the first ``max_chains`` chains."""
    cols = ["t", "chain"] + [f"x{i}_{j}" for i in range(cfg.height) for j in range(cfg.width)]
    if traj.manifold is not None:
        cols.append("manifold_distance")
    rows = []
    for k, (t, state) in enumerate(traj.steps):
        flat = state.reshape(len(state), -1)
        for c in range(min(max_chains, len(flat))):
            row = [t, c] + [float(v) for v in flat[c]]
            if traj.manifold is not None:
                row.append(float(traj.manifold[k][c]))
            rows.append(row)
    return Report(cols, rows, cfg.digest(), "sample")


def load_images(directory) -> np.ndarray:
    """All 8-bit grayscale .pgm/.png files in ``directory`` as a stack in [-1, 1], sorted by name."""
    from PIL import Image

    paths = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in (".pgm", ".png"))
    if not paths:
        raise ConfigError(f"no .pgm or .png files in {str(directory)!r}")
    out = []
    for path in paths:
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "1", "RGB", "RGBA", "LA"):
                raise ConfigError(f"{path.name}: expected an 8-bit image, got mode {im.mode}")
            out.append(np.asarray(im.convert("L"), dtype=np.float64) / 127.5 - 1.0)
    shapes = {a.shape for a in out}
    if len(shapes) != 1:
        raise ConfigError(f"images have different sizes: {sorted(shapes)}")
    return np.stack(out)


def save_image(grid, path, lo: float = -1.0, hi: float = 1.0):
    """Write one grid as an 8-bit grayscale image (format from the suffix), clipping to [lo, hi]."""
    from PIL import Image

    g = np.clip((np.asarray(grid, dtype=np.float64) - lo) / (hi - lo), 0, 1)
    Image.fromarray(np.round(255 * g).astype(np.uint8), mode="L").save(path)


def _psd_data(cfg: ExperimentConfig) -> np.ndarray:
    if cfg.image_dir is not None:
        return load_images(cfg.image_dir)
    return cfg.mixture().sample(cfg.n_reference, cell_source(cfg, REFERENCE_CELL, TRAIN_STREAM).generator)


def run_psd(cfg: ExperimentConfig):
    """Radial PSD of the configured images (or mixture draws). Returns (psd, report, fit or None)."""
    psd = radial_psd(_psd_data(cfg), cfg.psd_bins)
    try:
        fit = fit_power_law(psd)
    except ValueError:
        fit = None
    rows = [[f, pw, int(c)] for f, pw, c in zip(psd.centers, psd.power, psd.counts)]
    return psd, Report(["frequency", "power", "count"], rows, cfg.digest(), "psd"), fit


def run_select_bnr(cfg: ExperimentConfig) -> Report:
    psd = radial_psd(_psd_data(cfg), cfg.psd_bins)
    try:
        exponent = fit_power_law(psd)[0]
    except ValueError:
        exponent = math.nan
    bnr = select_bnr(psd, cfg.beta_min, cfg.beta_max, cfg.delta)
    return Report(["bnr", "delta", "power_law_exponent"], [[bnr, cfg.delta, exponent]], cfg.digest(),
                  "select-bnr")
