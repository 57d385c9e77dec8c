"""Command-line driver.

    blurnoise sweep-bnr     --config exp.cfg [--seed N] [--out DIR]
    blurnoise sweep-variant --config exp.cfg
    blurnoise sweep-nfe     --config exp.cfg
    blurnoise train         --config exp.cfg
    blurnoise sample        --config exp.cfg
    blurnoise psd           --config exp.cfg
    blurnoise select-bnr    --config exp.cfg

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .config import ConfigError, load_config
from .predictor import save_checkpoint

log = logging.getLogger("blurnoise")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
COMMANDS = ("sweep-bnr", "sweep-variant", "sweep-nfe", "train", "sample", "psd", "select-bnr")


def _write(out: Path, name: str, report: ex.Report) -> Path:
    path = out / name
    path.write_text(report.to_csv())
    log.info("wrote %s", path)
    return path


def _plot(out: Path, name: str, draw):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    draw(ax)
    fig.tight_layout()
    fig.savefig(out / name, dpi=120)
    plt.close(fig)


def _sweep_bnr(cfg, out):
    rep = ex.run_bnr_sweep(cfg)
    _write(out, "sweep_bnr.csv", rep)
    if cfg.plots:
        def draw(ax):
            ax.plot(rep.column("bnr"), rep.column("energy_ratio"), "o-")
            ax.set(xlabel="BNR", ylabel="energy distance / noise floor", yscale="log")
        _plot(out, "quality_vs_bnr.png", draw)


def _sweep_variant(cfg, out):
    _write(out, "sweep_variant.csv", ex.run_variant_sweep(cfg))


def _sweep_nfe(cfg, out):
    rep = ex.run_nfe_sweep(cfg)
    _write(out, "sweep_nfe.csv", rep)
    if cfg.plots:
        def draw(ax):
            bnr, nfe, q = (np.array(rep.column(c)) for c in ("bnr", "nfe", "energy_ratio"))
            for b in dict.fromkeys(bnr):
                ax.plot(nfe[bnr == b], q[bnr == b], "o-", label=f"BNR {b:g}")
            ax.axhline(1.5, color="grey", ls=":")
            ax.set(xlabel="NFE", ylabel="energy distance / noise floor", xscale="log", yscale="log")
            ax.legend()
        _plot(out, "quality_vs_nfe.png", draw)


def _train(cfg, out):
    p, rep = ex.run_train(cfg, log_every=max(cfg.train_steps // 10, 1))
    _write(out, "train_loss.csv", rep)
    for path in save_checkpoint(p, out / "predictor.bin"):
        log.info("wrote %s", path)


def _sample(cfg, out):
    x, traj, quality, prior_ratio = ex.run_sample(cfg)
    log.info("prior energy ratio %.3g", prior_ratio)
    _write(out, "quality.csv", quality)
    _write(out, "samples.csv", ex.samples_report(x, cfg))
    _write(out, "trajectory.csv", ex.trajectory_report(traj, cfg))
    if cfg.plots:
        for i in range(min(8, len(x))):
            ex.save_image(x[i], out / f"sample_{i}.png")


def _psd(cfg, out):
    psd, rep, fit = ex.run_psd(cfg)
    _write(out, "psd.csv", rep)
    if fit is not None:
        print(f"power-law exponent {fit[0]:.4f}")
    if cfg.plots:
        def draw(ax):
            ax.loglog(psd.centers, psd.power, "o-")
            ax.set(xlabel="radial frequency", ylabel="power")
        _plot(out, "psd.png", draw)


def _select_bnr(cfg, out):
    rep = ex.run_select_bnr(cfg)
    _write(out, "select_bnr.csv", rep)
    print(f"selected BNR {rep.rows[0][0]:g}")


_HANDLERS = {
    "sweep-bnr": _sweep_bnr, "sweep-variant": _sweep_variant, "sweep-nfe": _sweep_nfe,
    "train": _train, "sample": _sample, "psd": _psd, "select-bnr": _select_bnr,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blurnoise", description="Blur-noise mixture diffusion experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, type=Path, help="flat key = value config file")
        cmd.add_argument("--seed", type=int, default=None, help="overrides the config's seed")
        cmd.add_argument("--out", type=Path, default=Path("."), help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed)
        args.out.mkdir(parents=True, exist_ok=True)
        _HANDLERS[args.command](cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
