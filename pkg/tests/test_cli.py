import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from blurnoise.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main

SMALL = """
seed = 3
T = 6
n_samples = 200
n_reference = 200
"""


def run(tmp_path, body, command, *extra, name="run.cfg", out="out"):
    cfg = tmp_path / name
    cfg.write_text(body)
    code = main([command, "--config", str(cfg), "--out", str(tmp_path / out), *extra])
    return code, tmp_path / out


def read_rows(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config ")
    return lines[1].split(","), [line.split(",") for line in lines[2:]]


def test_sweep_bnr_writes_csv(tmp_path):
    code, out = run(tmp_path, SMALL + "bnr_list = 0, 1\n", "sweep-bnr")
    assert code == EXIT_OK
    header, rows = read_rows(out / "sweep_bnr.csv")
    assert header == ["bnr", "T", "nfe", "energy", "energy_ratio", "noise_floor", "wasserstein_mean",
                      "manifold_excursion_max"]
    assert [r[0] for r in rows] == ["0", "1"]
    assert all(r[2] == "11" for r in rows)


def test_results_do_not_depend_on_worker_count(tmp_path):
    body = SMALL + "bnr_list = 0, 0.5, 2\n"
    _, one = run(tmp_path, body + "workers = 1\n", "sweep-bnr", name="a.cfg", out="one")
    _, two = run(tmp_path, body + "workers = 2\n", "sweep-bnr", name="b.cfg", out="two")
    assert (one / "sweep_bnr.csv").read_bytes() == (two / "sweep_bnr.csv").read_bytes()


def test_seed_flag_overrides_config(tmp_path):
    _, a = run(tmp_path, SMALL, "sample", out="a")
    _, b = run(tmp_path, SMALL, "sample", "--seed", "3", out="b")
    _, c = run(tmp_path, SMALL, "sample", "--seed", "4", out="c")
    assert (a / "samples.csv").read_bytes() == (b / "samples.csv").read_bytes()
    assert (a / "samples.csv").read_bytes() != (c / "samples.csv").read_bytes()


def test_sample_outputs(tmp_path):
    code, out = run(tmp_path, SMALL + "plots = true\n", "sample")
    assert code == EXIT_OK
    header, rows = read_rows(out / "quality.csv")
    assert "prior_energy_ratio" in header and len(rows) == 1
    _, samples = read_rows(out / "samples.csv")
    assert len(samples) == 200
    header, traj = read_rows(out / "trajectory.csv")
    assert header[-1] == "manifold_distance"
    assert len(traj) == 7 * 16
    assert (out / "sample_0.png").exists()


def test_sweeps_variant_and_nfe(tmp_path):
    code, out = run(tmp_path, SMALL + "variant_list = c, d\n", "sweep-variant")
    assert code == EXIT_OK
    _, rows = read_rows(out / "sweep_variant.csv")
    assert [r[0] for r in rows] == ["c", "d"]
    code, out = run(tmp_path, SMALL + "bnr_list = 0.5\nnfe_list = 3, 8\nplots = true\n", "sweep-nfe")
    assert code == EXIT_OK
    header, rows = read_rows(out / "sweep_nfe.csv")
    assert [(r[1], r[2], r[3]) for r in rows] == [("3", "2", "3"), ("8", "4", "7")]
    assert (out / "quality_vs_nfe.png").exists()


def test_train_then_sample_from_checkpoint(tmp_path):
    body = SMALL + "predictor = trained\ntrain_steps = 30\ntrain_batch = 32\nhidden = 8\n"
    code, out = run(tmp_path, body, "train")
    assert code == EXIT_OK
    header, rows = read_rows(out / "train_loss.csv")
    assert header == ["step", "loss"] and len(rows) == 30
    assert (out / "predictor.bin").exists() and (out / "predictor.bin.json").exists()
    code, out2 = run(tmp_path, body + "checkpoint = out/predictor.bin\n", "sample", name="s.cfg", out="s")
    assert code == EXIT_OK
    assert (out2 / "quality.csv").exists()


def write_images(folder, sizes, suffixes):
    folder.mkdir()
    rng = np.random.default_rng(0)
    for i, (size, suffix) in enumerate(zip(sizes, suffixes)):
        Image.fromarray(rng.integers(0, 256, size, dtype=np.uint8), mode="L").save(folder / f"im{i}{suffix}")


def test_psd_and_select_bnr_from_images(tmp_path, capsys):
    write_images(tmp_path / "imgs", [(16, 16)] * 3, [".pgm", ".png", ".pgm"])
    body = "seed = 0\nimage_dir = imgs\nbeta_min = 0.02\nbeta_max = 8\nplots = true\n"
    code, out = run(tmp_path, body, "psd")
    assert code == EXIT_OK
    header, rows = read_rows(out / "psd.csv")
    assert header == ["frequency", "power", "count"] and len(rows) > 5
    assert (out / "psd.png").exists()
    code, out = run(tmp_path, body, "select-bnr")
    assert code == EXIT_OK
    assert "selected BNR" in capsys.readouterr().out
    _, rows = read_rows(out / "select_bnr.csv")
    assert float(rows[0][1]) == 0.1


def test_mismatched_image_sizes(tmp_path):
    write_images(tmp_path / "imgs", [(16, 16), (8, 8)], [".png", ".png"])
    code, _ = run(tmp_path, "seed = 0\nimage_dir = imgs\n", "psd")
    assert code == EXIT_CONFIG


@pytest.mark.parametrize("body, command", [
    ("T = 4\n", "sample"),
    ("seed = 1\nbogus = 2\n", "sample"),
    (SMALL + "variant_list =\n", "sweep-variant"),
    (SMALL + "beta_max = 0.5\n", "sample"),
    (SMALL + "predictor = oracle\n", "train"),
])
def test_configuration_errors_exit_2(tmp_path, body, command, capsys):
    code, _ = run(tmp_path, body, command)
    assert code == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path):
    assert main(["sample", "--config", str(tmp_path / "nope.cfg")]) == EXIT_CONFIG


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exits_3(tmp_path, capsys):
    body = SMALL + "predictor = trained\noptimizer = sgd\ntrain_lr = 1e12\ntrain_steps = 20\n"
    code, _ = run(tmp_path, body, "sample")
    assert code == EXIT_NUMERIC
    assert "numerical failure" in capsys.readouterr().err


def test_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "blurnoise.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for name in ("sweep-bnr", "sweep-variant", "sweep-nfe", "train", "sample", "psd", "select-bnr"):
        assert name in res.stdout
