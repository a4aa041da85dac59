import csv
import time

import pytest

from kdlvision.cli import COMPARE_HEADER, SUMMARY_HEADER, run

SMALL_CFG = "image_size = 32\nepochs = 2\nbatch_size = 8\nstem_channels = 8\ngrowth = 6\ndense_layers = 2\n"


def metrics_without_wall(path):
    with open(path, newline="") as fh:
        return [row[:-1] for row in csv.reader(fh)]


def test_missing_flags_is_usage_error(capsys):
    assert run(["eval"]) == 1
    err = capsys.readouterr().err
    assert "usage:" in err and err.strip().splitlines()[-1].startswith("error:")


@pytest.mark.parametrize("argv", [["frobnicate"], ["synth", "--out", "x", "--bogus"], ["compare", "--seeds", "a,b"]])
def test_unknown_commands_and_flags(argv, capsys):
    assert run(argv) == 1


def test_missing_manifest_is_data_error(tmp_path, capsys):
    code = run(["train", "--manifest", str(tmp_path / "absent.csv"), "--out-dir", str(tmp_path / "o"),
                "--arch", "baseline"])
    assert code == 2
    assert capsys.readouterr().err.startswith("error:")


@pytest.fixture(scope="module")
def small_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["synth", "--classes", "2", "--per-class", "10", "--size", "32", "--seed", "3",
                "--out", str(root / "data")]) == 0
    (root / "small.cfg").write_text(SMALL_CFG)
    return root


def test_unknown_config_key_is_usage_error(small_set, tmp_path):
    (tmp_path / "bad.cfg").write_text("learning_rate = 1\n")
    code = run(["train", "--manifest", str(small_set / "data/manifest.csv"), "--config", str(tmp_path / "bad.cfg"),
                "--out-dir", str(tmp_path / "o"), "--arch", "baseline"])
    assert code == 1


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning", "ignore:invalid value:RuntimeWarning")
def test_divergence_exit_code(small_set, tmp_path):
    code = run(["train", "--manifest", str(small_set / "data/manifest.csv"), "--config", str(small_set / "small.cfg"),
                "--arch", "baseline", "--lr", "1e30", "--out-dir", str(tmp_path / "div")])
    assert code == 3


def test_full_pipeline_under_a_minute(small_set, tmp_path, capsys):
    root, cfg = small_set, str(small_set / "small.cfg")
    manifest = str(root / "data/manifest.csv")
    start = time.perf_counter()
    assert run(["synth", "--classes", "3", "--per-class", "8", "--size", "32", "--seed", "11",
                "--out", str(tmp_path / "pretext")]) == 0
    experts = []
    for variant in "ABC":
        path = tmp_path / f"expert_{variant}.kdlw"
        assert run(["pretrain", "--variant", variant, "--pretext-manifest", str(tmp_path / "pretext/manifest.csv"),
                    "--epochs", "1", "--config", cfg, "--out", str(path)]) == 0
        experts.append(str(path))
    assert run(["preprocess", "--manifest", manifest, "--out-cache", str(tmp_path / "cache"), "--size", "32"]) == 0
    assert run(["train", "--manifest", manifest, "--experts", ",".join(experts), "--config", cfg,
                "--cache-dir", str(tmp_path / "cache"), "--out-dir", str(tmp_path / "run")]) == 0
    ckpt = str(tmp_path / "run/final.kdlw")
    assert run(["eval", "--checkpoint", ckpt, "--manifest", manifest, "--split", "test",
                "--out-dir", str(tmp_path / "eval")]) == 0
    for name in ("confusion.csv", "confusion.ppm", "report.csv"):
        assert (tmp_path / "eval" / name).exists()
    assert run(["gradcam", "--checkpoint", ckpt, "--manifest", manifest, "--index", "0", "--class", "true",
                "--out-prefix", str(tmp_path / "cam/sample0")]) == 0
    assert run(["gradcam", "--checkpoint", ckpt, "--image", str(root / "data/images/c000s00000_v0.pgm"),
                "--out-prefix", str(tmp_path / "cam/img")]) == 0
    assert (tmp_path / "cam/sample0_gray.pgm").exists() and (tmp_path / "cam/img_color.ppm").exists()
    assert run(["gradcam", "--checkpoint", ckpt, "--image", str(root / "data/images/c000s00000_v0.pgm"),
                "--class", "7", "--out-prefix", str(tmp_path / "cam/bad")]) == 1
    assert time.perf_counter() - start < 60


def test_compare_schema(small_set, tmp_path):
    root = small_set
    experts = []
    for variant in "ABC":
        path = tmp_path / f"e{variant}.kdlw"
        assert run(["pretrain", "--variant", variant, "--pretext-manifest", str(root / "data/manifest.csv"),
                    "--epochs", "1", "--config", str(root / "small.cfg"), "--out", str(path)]) == 0
        experts.append(str(path))
    assert run(["compare", "--manifest", str(root / "data/manifest.csv"), "--config", str(root / "small.cfg"),
                "--experts", ",".join(experts), "--seeds", "0,1", "--out-dir", str(tmp_path / "cmp")]) == 0
    with open(tmp_path / "cmp/compare.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == COMPARE_HEADER
    keys = [(r["seed"], r["arch"], r["epoch"]) for r in rows]
    assert sorted(keys) == sorted((s, a, e) for s in "01" for a in ("kdl", "baseline") for e in "12")
    with open(tmp_path / "cmp/summary.csv", newline="") as fh:
        summary = list(csv.DictReader(fh))
    assert list(summary[0]) == SUMMARY_HEADER and len(summary) == 4


def test_train_rerun_is_bit_identical(small_set, tmp_path):
    argv = ["train", "--manifest", str(small_set / "data/manifest.csv"), "--config", str(small_set / "small.cfg"),
            "--arch", "baseline", "--seed", "5", "--out-dir", str(tmp_path / "run")]
    assert run(argv) == 0
    first = {p.name: p.read_bytes() for p in (tmp_path / "run").iterdir() if p.name != "metrics.csv"}
    metrics = metrics_without_wall(tmp_path / "run/metrics.csv")
    assert run(argv) == 0
    assert first == {p.name: p.read_bytes() for p in (tmp_path / "run").iterdir() if p.name != "metrics.csv"}
    assert metrics == metrics_without_wall(tmp_path / "run/metrics.csv")


def test_synth_rerun_is_bit_identical(tmp_path):
    argv = ["synth", "--classes", "2", "--per-class", "3", "--size", "16", "--out", str(tmp_path / "s")]
    assert run(argv) == 0
    first = {p: p.read_bytes() for p in (tmp_path / "s").rglob("*") if p.is_file()}
    assert run(argv) == 0
    assert first == {p: p.read_bytes() for p in (tmp_path / "s").rglob("*") if p.is_file()}
