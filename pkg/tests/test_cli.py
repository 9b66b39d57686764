import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from maelab import __version__
from maelab.cli import main
from maelab.explain import read_grid

TINY = ["--set", "data.n_train=16", "--set", "data.n_eval=16", "--set", "schedule.total_epochs=2",
        "--set", "schedule.warmup_epochs=1", "--set", "batch_size=8"]


def _run(argv, capsys=None):
    code = main([str(a) for a in argv])
    out = capsys.readouterr() if capsys else None
    return code, out


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    assert main(["pretrain", "--out", str(root / "pre"), "--seed", "1", *TINY]) == 0
    assert main(["finetune", "--init", str(root / "pre" / "checkpoint.bin"), "--out", str(root / "ft"), *TINY]) == 0
    return root


def test_synth_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--n", "12", "--classes", "4", "--seed", "7", "--out", str(tmp_path / name)]) == 0
    for rel in ["manifest.csv", "boxes.json"] + [f"images/{i:05d}.png" for i in range(12)]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
    rows = list(csv.reader(open(tmp_path / "a" / "manifest.csv")))
    assert rows[0] == ["path", "label_0", "label_1", "label_2", "label_3"] and len(rows) == 13
    assert (tmp_path / "a" / "config.json").exists() and (tmp_path / "a" / "VERSION").exists()


def test_localize_stub_gt_gives_perfect_ap(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["synth", "--n", "40", "--out", str(data)]) == 0
    code, out = _run(["localize", "--stub-gt", "--out", tmp_path / "loc",
                      "--set", "data.source=manifest", "--set", f"data.manifest={data / 'manifest.csv'}",
                      "--set", f"data.boxes={data / 'boxes.json'}", "--set", f"data.root={data}"], capsys)
    assert code == 0
    assert "AP25" in out.out and "AP50" in out.out
    rows = list(csv.DictReader(open(tmp_path / "loc" / "ap_table.csv")))
    assert rows[-1]["class"] == "All" and int(rows[-1]["n_cases"]) > 0
    for row in rows:
        assert float(row["AP25"]) == 100.0 and float(row["AP50"]) == 100.0


def test_run_directory_contents(runs):
    for stage in ("pre", "ft"):
        d = runs / stage
        assert (d / "VERSION").read_text().startswith(__version__)
        cfg = json.loads((d / "config.json").read_text())
        assert cfg["seed"] == (1 if stage == "pre" else 0)
        assert cfg["data"]["n_train"] == 16
        assert (d / "log.csv").exists() and (d / "checkpoint.bin").exists()
    assert (runs / "pre" / "loss.png").exists()
    assert (runs / "ft" / "curves.png").exists() and (runs / "ft" / "eval.csv").exists()


def test_seeded_rerun_reproduces(runs, tmp_path):
    assert main(["pretrain", "--out", str(tmp_path / "again"), "--seed", "1", *TINY]) == 0
    assert (tmp_path / "again" / "log.csv").read_text() == (runs / "pre" / "log.csv").read_text()


def test_eval_prints_report(runs, tmp_path, capsys):
    code, out = _run(["eval", "--checkpoint", runs / "ft" / "checkpoint.bin", "--out", tmp_path], capsys)
    assert code == 0 and "mAUC=" in out.out
    assert json.loads((tmp_path / "eval.json").read_text())["mean_auc"] is not None


def test_localize_with_gradcam(runs, tmp_path):
    code, _ = _run(["localize", "--checkpoint", runs / "ft" / "checkpoint.bin", "--out", tmp_path,
                    "--save-heatmaps", 2])
    assert code == 0
    assert (tmp_path / "ap_table.txt").read_text().splitlines()[0].split() == ["Class", "#", "cases", "AP25", "AP50"]
    assert len(list(tmp_path.glob("heatmap_*.png"))) == 2


def test_reconstruct_emits_four_grids(runs, tmp_path):
    code, _ = _run(["reconstruct", "--checkpoint", runs / "pre" / "checkpoint.bin", "--ratios", "75,80,85,90",
                    "--n", 3, "--out", tmp_path])
    assert code == 0
    assert sorted(p.name for p in tmp_path.glob("recon_*.png")) == [f"recon_{r}.png" for r in (75, 80, 85, 90)]
    rows = list(csv.DictReader(open(tmp_path / "reconstruct.csv")))
    assert [int(r["mask_ratio_pct"]) for r in rows] == [75, 80, 85, 90]


def test_anomaly_outputs(runs, tmp_path, capsys):
    code, out = _run(["anomaly", "--checkpoint", runs / "pre" / "checkpoint.bin", "--n", 3, "--k", 4,
                      "--out", tmp_path], capsys)
    assert code == 0 and "ratio" in out.out
    assert len(list(csv.DictReader(open(tmp_path / "anomaly.csv")))) == 3
    grids = sorted(tmp_path.glob("*.hmap"))
    assert len(grids) == 3 and read_grid(grids[0]).shape == (32, 32)


def test_anomaly_rejects_classifier_checkpoint(runs, capsys):
    code, out = _run(["anomaly", "--checkpoint", runs / "ft" / "checkpoint.bin"], capsys)
    assert code == 1 and "pre-training" in out.err


def test_config_file_then_overrides(tmp_path):
    (tmp_path / "c.toml").write_text("[optim]\nbase_lr = 0.002\n\n[schedule]\ntotal_epochs = 2\nwarmup_epochs = 1\n"
                                     "[data]\nn_train = 8\n")
    code, _ = _run(["pretrain", "--config", tmp_path / "c.toml", "--set", "optim.base_lr=0.003",
                    "--set", "batch_size=8", "--out", tmp_path / "run"])
    assert code == 0
    cfg = json.loads((tmp_path / "run" / "config.json").read_text())
    assert cfg["optim"]["base_lr"] == 0.003 and cfg["schedule"]["total_epochs"] == 2 and cfg["data"]["n_train"] == 8


@pytest.mark.parametrize("argv, code, needle", [
    (["transmogrify"], 2, "invalid choice"),
    (["pretrain", "--config", "/nonexistent/cfg.toml"], 1, "cfg.toml"),
    (["pretrain", "--set", "optim.nonsense=1"], 1, "optim.nonsense"),
    (["pretrain", "--set", "novalue"], 1, "key=value"),
    (["eval"], 1, "--checkpoint"),
    (["eval", "--checkpoint", "/nonexistent.bin"], 1, "cannot read"),
])
def test_error_paths(argv, code, needle, capsys, tmp_path):
    got, out = _run(argv + (["--out", tmp_path] if argv[0] != "transmogrify" else []), capsys)
    assert got == code
    assert needle in out.err


def test_module_entry_point_and_threads(tmp_path):
    env = {**os.environ, "MAE_LAB_THREADS": "1"}
    ok = subprocess.run([sys.executable, "-m", "maelab", "synth", "--n", "2", "--out", str(tmp_path)],
                        env=env, capture_output=True, text=True)
    assert ok.returncode == 0, ok.stderr
    bad = subprocess.run([sys.executable, "-m", "maelab", "nope"], env=env, capture_output=True, text=True)
    assert bad.returncode != 0 and bad.stderr
    version = subprocess.run([sys.executable, "-m", "maelab", "--version"], capture_output=True, text=True)
    assert version.returncode == 0 and __version__ in version.stdout


def test_images_load_back_in_range(tmp_path):
    from maelab.data import load_png

    assert main(["synth", "--n", "3", "--out", str(tmp_path)]) == 0
    img = load_png(tmp_path / "images" / "00000.png")
    assert img.shape == (1, 32, 32) and 0 <= img.min() and img.max() <= 1 and np.ptp(img) > 0
