"""The twelve acceptance criteria, each at its stated tolerance and runtime budget.

Every test prints one ``[Cn] PASS|FAIL`` line (visible even without ``-s``)
before asserting, so a full run doubles as a scorecard.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from oracles import heat_oracle, numeric_grad

from blurnoise import experiments as ex
from blurnoise.analysis import Reference, fit_power_law, pink_fields, quality_report, radial_psd, select_bnr
from blurnoise.cli import main
from blurnoise.config import ExperimentConfig, load_config
from blurnoise.forward import (
    NoiseSource,
    decomposed_transition_mean,
    forward_sample,
    transition_mean,
    transition_sample,
)
from blurnoise.oracle import GaussianMixture, OraclePredictor, oracle_predictions, posterior_mean_x0
from blurnoise.predictor import PARAM_NAMES, TwoHeadPredictor, gradients, make_batch
from blurnoise.sampler import SamplerConfig, sample
from blurnoise.schedule import make_bnr_schedule
from blurnoise.spectral import (
    blur,
    dct_direct,
    dct_forward,
    dct_inverse,
    make_blur_mask,
    mask_entries,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def scorecard(capsys):
    start = time.perf_counter()

    def report(tag, ok, detail, limit):
        elapsed = time.perf_counter() - start
        passed = bool(ok) and elapsed < limit
        with capsys.disabled():
            print(f"\n[{tag}] {'PASS' if passed else 'FAIL'}  {detail}  ({elapsed:.1f} s, limit {limit:g} s)")
        assert ok, detail
        assert elapsed < limit, f"{tag} took {elapsed:.1f} s, limit {limit} s"

    return report


def test_c1_transform(scorecard):
    rng = np.random.default_rng(0)
    worst_rt = worst_pv = 0.0
    for h, w in [(1, 1), (2, 3), (4, 4), (7, 5), (8, 8), (16, 9), (31, 32), (64, 64)]:
        g = rng.standard_normal((h, w)) * 10 ** rng.uniform(-3, 3)
        s = dct_forward(g)
        worst_rt = max(worst_rt, np.max(np.abs(dct_inverse(s) - g)) / np.max(np.abs(g)))
        worst_pv = max(worst_pv, abs(np.sum(g**2) - np.sum(s**2)) / np.sum(g**2))
    worst_direct = 0.0
    for shape in [(4, 4), (8, 8)]:
        g = rng.standard_normal(shape)
        worst_direct = max(worst_direct, np.max(np.abs(dct_forward(g) - dct_direct(g))))
    ok = worst_rt < 1e-10 and worst_pv < 1e-10 and worst_direct < 1e-10
    scorecard("C1", ok, f"roundtrip {worst_rt:.1e}, Parseval {worst_pv:.1e}, direct sum {worst_direct:.1e}", 10)


def test_c2_mask_laws(scorecard):
    identity = np.all(mask_entries(8, 8, 0.0) == 1.0)
    dc = all(make_blur_mask(h, w, a).entries[0, 0] == 1.0 for h, w in [(3, 5), (8, 8)] for a in (0.5, 4, 40))
    rng = np.random.default_rng(1)
    semi = 0.0
    for _ in range(200):
        a1, a2 = rng.uniform(0, 6, 2)
        lhs = mask_entries(8, 8, a1) * mask_entries(8, 8, a2)
        semi = max(semi, np.max(np.abs(lhs - mask_entries(8, 8, float(np.hypot(a1, a2))))))
    g = rng.standard_normal((8, 8))
    heat = max(np.max(np.abs(blur(g, a) - heat_oracle(dct_direct(g), a))) for a in (1.0, 4.0))
    ok = identity and dc and semi < 1e-10 and heat < 1e-3
    scorecard("C2", ok, f"identity {identity}, DC {dc}, semigroup {semi:.1e}, heat-equation L_inf {heat:.1e}", 30)


def test_c3_decomposed_mean(scorecard):
    rng = np.random.default_rng(2)
    worst = 0.0
    for i in range(1000):
        T = int(rng.integers(1, 40))
        s = make_bnr_schedule(T, 10 ** rng.uniform(-3, -1), 10 ** rng.uniform(0, 2), rng.uniform(1, 10),
                              rng.uniform(0, 10), rng.uniform(0, 1))
        t = int(rng.integers(1, T + 1))
        h, w = rng.integers(1, 9, 2)
        x0 = rng.standard_normal((h, w))
        x_t = forward_sample(x0, s, t, NoiseSource(i))
        a, b = transition_mean(x0, x_t, s, t), decomposed_transition_mean(x0, x_t, s, t)
        worst = max(worst, np.max(np.abs(a - b)) / np.max(np.abs(a)))
    scorecard("C3", worst < 1e-12, f"max relative gap over 1000 instances {worst:.1e}", 5)


def test_c4_marginal_consistency(scorecard):
    gm = ExperimentConfig(seed=0).mixture()
    s = make_bnr_schedule(8, 0.05, 5.0, 7.0, 1.0, eta=1.0)
    n = 10_000
    rng, src = np.random.default_rng(4), NoiseSource(104)
    x0 = gm.sample(n, rng)
    chain = forward_sample(x0, s, s.T, src)
    frozen = chain.copy()
    ratios = {}
    for t in range(s.T, 1, -1):
        chain = transition_sample(x0, chain, s, t, src)
        if t > 3:
            frozen = transition_mean(x0, frozen, s, t)
        if t - 1 in (3, 1):
            ref = Reference(forward_sample(gm.sample(n, rng), s, t - 1, src))
            ratios[t - 1] = quality_report(chain, ref).ratio
            if t - 1 == 3:
                # power check: the same chain without its transition noise must be caught
                control = quality_report(frozen, ref).ratio
    ok = max(ratios.values()) <= 1.0 and control > 1.0
    scorecard("C4", ok, f"chain from T vs direct q(x_t|x0): ED/floor {ratios[3]:.2f} at t=3, "
                        f"{ratios[1]:.2f} at t=1 (<= 1); noise-free control {control:.1f} (> 1)", 60)


def quadrature_mean(gm, B, beta, y, lim=5.0, n=1201):
    g = np.linspace(-lim, lim, n)
    X1, X2 = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([X1.ravel(), X2.ravel()], axis=1)
    prior = np.zeros(len(pts))
    for w, m, c in zip(gm.weights, gm.means, gm.covariances):
        d = pts - m
        prior += w * np.exp(-0.5 * np.einsum("ni,ij,nj->n", d, np.linalg.inv(c), d)) / np.sqrt(np.linalg.det(c))
    wts = prior * np.exp(-0.5 * np.sum((y - pts @ B.T) ** 2, axis=1) / beta**2)
    return wts @ pts / wts.sum()


def test_c5_oracle(scorecard):
    from blurnoise.spectral import blur_matrix

    mixtures = [
        GaussianMixture([1.0], [[0.3, -0.4]], [[[0.2, 0.05], [0.05, 0.1]]], (1, 2)),
        GaussianMixture([0.3, 0.7], [[-1.0, 0.5], [1.0, -0.2]],
                        [[[0.2, 0.05], [0.05, 0.1]], [[0.15, 0.0], [0.0, 0.3]]], (1, 2)),
    ]
    rng = np.random.default_rng(5)
    s = make_bnr_schedule(6, 0.1, 3.0, 7.0, 1.5)
    quad = 0.0
    for gm in mixtures:
        for t in (2, 4, 6):
            for y in rng.normal(0, 1, (2, 2)):
                got = posterior_mean_x0(gm, y.reshape(1, 2), s, t).ravel()
                exp = quadrature_mean(gm, blur_matrix(1, 2, s.alpha[t]), s.beta[t], y)
                quad = max(quad, np.max(np.abs(got - exp)) / np.max(np.abs(exp)))
    gm = ExperimentConfig(seed=0).mixture()
    x_t = rng.standard_normal((500, 2, 2)) * 2
    sum_gap = dc = 0.0
    for t in (1, 3, 6):
        pair = oracle_predictions(gm, x_t, s, t)
        sum_gap = max(sum_gap, np.max(np.abs(pair.denoised + pair.residual - posterior_mean_x0(gm, x_t, s, t))))
        dc = max(dc, np.max(np.abs(dct_forward(pair.residual)[:, 0, 0])))
    ok = quad < 1e-4 and sum_gap < 1e-12 and dc < 1e-10
    scorecard("C5", ok, f"quadrature rel err {quad:.1e}, D+R gap {sum_gap:.1e}, residual DC {dc:.1e}", 60)


def test_c6_sampler_fidelity(scorecard):
    gm = GaussianMixture.isotropic([0.35, 0.65], [[-1.0, 0.6], [0.8, -0.5]], [0.05], (1, 2))
    s = make_bnr_schedule(32, 0.002, 80.0, 7.0, 0.5)
    n = 10_000
    x = sample(SamplerConfig(s, OraclePredictor(gm), (1, 2)), NoiseSource(6), n)
    ratio = quality_report(x, Reference(gm.sample(n, np.random.default_rng(60)))).ratio
    scorecard("C6", ratio <= 1.5, f"oracle sampler, K=2 2D, BNR 0.5, T=32: ED/floor {ratio:.2f} (<= 1.5)", 120)


def test_c7_gradient_check(scorecard):
    worst = 0.0
    for target in ("residual", "clean"):
        for weighting in (False, True):
            rng = np.random.default_rng(7)
            p = TwoHeadPredictor((2, 2), hidden=6, sigma_data=0.8, residual_target=target, rng=rng,
                                 zero_heads=False)
            for k in ("b1", "b2", "bD", "bR"):
                p.params[k] = 0.1 * rng.standard_normal(p.params[k].shape)
            s = make_bnr_schedule(10, 0.02, 5.0, 7.0, 1.0)
            batch = make_batch(rng.standard_normal((8, 2, 2)), s, NoiseSource(7))
            _, grads = gradients(p, batch, 1.0, 1.0, weighting)
            for name in PARAM_NAMES:
                num = numeric_grad(p, batch, name, 1.0, 1.0, weighting)
                worst = max(worst, np.max(np.abs(grads[name] - num)) / max(np.max(np.abs(num)), 1e-8))
    scorecard("C7", worst < 1e-4, f"worst relative gradient error over all parameters {worst:.1e}", 30)


def test_c8_bnr_trend(scorecard):
    rep = ex.run_bnr_sweep(load_config(CONFIGS / "bnr_sweep.cfg"))
    q = dict(zip(rep.column("bnr"), rep.column("energy_ratio")))
    ok = q[0.5] <= q[0.0] and all(q[10.0] > v for b, v in q.items() if b != 10.0)
    detail = "ED/floor " + ", ".join(f"BNR {b:g}: {v:.2f}" for b, v in q.items())
    scorecard("C8", ok, detail + "; need q(0.5) <= q(0) and q(10) worst", 300)


def test_c9_variant_trend(scorecard):
    rep = ex.run_variant_sweep(load_config(CONFIGS / "variant_sweep.cfg"))
    q = dict(zip(rep.column("variant"), rep.column("energy_ratio")))
    ok = q["d"] <= q["c"] < q["b"] < q["a"]
    detail = "ED/floor " + ", ".join(f"{v}: {r:.2f}" for v, r in q.items())
    scorecard("C9", ok, detail + "; need d <= c < b < a", 600)


def test_c10_nfe_trend(scorecard):
    rep = ex.run_nfe_sweep(load_config(CONFIGS / "nfe_sweep.cfg"))
    first = {}
    for bnr, nfe, ratio in zip(rep.column("bnr"), rep.column("nfe"), rep.column("energy_ratio")):
        if ratio <= 1.5 and bnr not in first:
            first[bnr] = nfe
    need = {b: first.get(b, float("inf")) for b in (0.5, 2.0)}
    ok = need[2.0] > need[0.5]
    scorecard("C10", ok, f"first NFE within 1.5x floor: BNR 0.5 -> {need[0.5]}, BNR 2 -> {need[2.0]}; "
                         f"need BNR 2 strictly later", 300)


def test_c11_power_law(scorecard):
    x = pink_fields(400, 64, 64, 2.0, np.random.default_rng(11), total_power=64 * 64)
    psd = radial_psd(x)
    exponent = fit_power_law(psd)[0]
    cfg = load_config(CONFIGS / "psd.cfg")
    bnr = select_bnr(psd, cfg.beta_min, cfg.beta_max, cfg.delta)
    ok = abs(exponent - 2.0) <= 0.1 and 0.25 <= bnr <= 1.0
    scorecard("C11", ok, f"fitted exponent {exponent:.3f} (2 +/- 0.1); select_bnr {bnr:g} (in [0.25, 1])", 60)


def test_c12_determinism(scorecard, tmp_path):
    body = ("seed = 12\nT = 8\nn_samples = 500\nn_reference = 500\nbnr_list = 0, 0.5, 2\n"
            "predictor = trained\ntrain_steps = 50\ntrain_batch = 64\nhidden = 16\nreplicates = 2\n")
    outputs = []
    for k, workers in enumerate((1, 1, 2)):
        cfg = tmp_path / f"run{k}.cfg"
        cfg.write_text(body + f"workers = {workers}\n")
        for command in ("sweep-bnr", "sweep-nfe"):
            assert main([command, "--config", str(cfg), "--out", str(tmp_path / f"out{k}")]) == 0
        outputs.append([(tmp_path / f"out{k}" / name).read_bytes() for name in ("sweep_bnr.csv", "sweep_nfe.csv")])
    ok = outputs[0] == outputs[1] == outputs[2]
    scorecard("C12", ok, "sweep-bnr and sweep-nfe CSVs byte-identical across reruns and worker counts", 120)
