import os
import re
import subprocess
import sys
from decimal import Decimal
from pathlib import Path

import numpy as np
import pytest

from dgsyolo.data import load_dataset, load_image
from dgsyolo.model import ModelConfig, build_model, count_params
from dgsyolo.postprocess import iou

GOLDEN = Path(__file__).parent / "golden"


def run(*args, env=None, check=None):
    full_env = {k: v for k, v in os.environ.items() if k != "DGS_SEED"}
    full_env.update(env or {})
    proc = subprocess.run([sys.executable, "-m", "dgsyolo", *map(str, args)], capture_output=True, text=True,
                          env=full_env, timeout=900)
    if check is not None:
        assert proc.returncode == check, proc.stderr
    return proc


def parse_detections(stdout):
    rows = []
    for line in stdout.splitlines():
        cls, score, *box = line.split()
        rows.append((int(cls), float(score), tuple(float(v) for v in box)))
    return rows


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    run("synth", "--out", root / "data", "--count", 8, "--size", 64, "--seed", 7, check=0)
    run("init", "--out", root / "zero.dgsd", "--zero", check=0)
    return root


# ---------------------------------------------------------------------------
# exit codes


def test_help_and_usage_errors():
    assert run("--help").returncode == 0
    assert run().returncode == 1
    assert run("summary", "--preset", "nope").returncode == 1
    assert run("summary", "--size", "100").returncode == 1


def test_missing_checkpoint_is_validation_error(workdir):
    proc = run("infer", "--ckpt", workdir / "absent.dgsd", "--image", workdir / "data/images/synthetic_000.ppm")
    assert proc.returncode == 1 and proc.stdout == "" and "error" in proc.stderr


def test_config_mismatch_names_tensor(workdir):
    cfg = workdir / "three.cfg"
    cfg.write_text("num_classes = 3\n")
    proc = run("infer", "--ckpt", workdir / "zero.dgsd", "--config", cfg,
               "--image", workdir / "data/images/synthetic_000.ppm")
    assert proc.returncode == 1 and "head16.conv" in proc.stderr


def test_bad_seed_env_is_validation_error(workdir):
    assert run("synth", "--out", workdir / "x", env={"DGS_SEED": "seven"}).returncode == 1


def test_divergence_exits_with_numeric_code(workdir):
    proc = run("train-tiny", "--data", workdir / "data", "--steps", 40, "--lr", "1e4", "--size", 32,
               "--out", workdir / "diverged")
    assert proc.returncode == 2 and "step" in proc.stderr


# ---------------------------------------------------------------------------
# summary


def test_summary_matches_golden():
    proc = run("summary", check=0)
    assert proc.stdout == (GOLDEN / "summary_default.txt").read_text(encoding="utf-8")


def test_summary_total_line_is_param_count():
    proc = run("summary", "--preset", "baseline", "--size", 320, check=0)
    total = count_params(build_model(ModelConfig.preset("baseline"))).total
    assert re.search(rf"^total\s+{total:,}\s", proc.stdout, re.M)
    assert proc.stdout.rstrip().endswith("at 320x320")


# ---------------------------------------------------------------------------
# infer


def test_zero_weight_infer(workdir):
    image = workdir / "data/images/synthetic_000.ppm"
    dets = parse_detections(run("infer", "--ckpt", workdir / "zero.dgsd", "--image", image, check=0).stdout)
    assert dets and all(cls == 0 and score == 0.25 for cls, score, _ in dets)
    boxes = [b for _, _, b in dets]
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            assert iou(boxes[i], boxes[j]) < 0.45


def test_infer_threshold_above_one_is_empty(workdir):
    proc = run("infer", "--ckpt", workdir / "zero.dgsd", "--conf", "1.01",
               "--image", workdir / "data/images/synthetic_000.ppm", check=0)
    assert proc.stdout == ""


def test_infer_annotate_writes_ppm(workdir):
    src = workdir / "data/images/synthetic_001.ppm"
    out = workdir / "annotated.ppm"
    run("infer", "--ckpt", workdir / "zero.dgsd", "--image", src, "--annotate", out, check=0)
    before, after = load_image(src).data, load_image(out).data
    assert after.shape == before.shape and not np.array_equal(after, before)


# ---------------------------------------------------------------------------
# eval and bench


def test_eval_row_format_and_determinism(workdir):
    first = run("eval", "--ckpt", workdir / "zero.dgsd", "--data", workdir / "data", check=0).stdout
    again = run("eval", "--ckpt", workdir / "zero.dgsd", "--data", workdir / "data", env={"DGS_SEED": "0"}, check=0)
    assert first == again.stdout
    fields = first.split()
    assert len(fields) == 5
    for v in fields:
        significant = v.split("e")[0].replace(".", "").lstrip("0")
        assert 0 <= float(v) <= 1 and len(significant) in (0, 4), v


@pytest.mark.parametrize("preset", ["dgst-dgsm", "baseline"])
def test_bench_report(preset):
    proc = run("bench", "--preset", preset, "--runs", 2, "--warmup", 1, "--size", 64, check=0)
    header, row = proc.stdout.splitlines()
    assert header.split() == ["params_m", "interface_ms", "nms_ms", "total_ms"]
    params_m, interface, nms, total = (Decimal(v) for v in row.split())
    assert abs(interface + nms - total) <= Decimal("0.1")
    count = count_params(build_model(ModelConfig.preset(preset))).total
    assert params_m == Decimal(f"{count / 1e6:.3f}")


def test_gradcheck_command_passes():
    proc = run("gradcheck", "--seed", 3, check=0)
    assert proc.stdout.splitlines()[-1] == "42/42 passed"
    assert "FAIL" not in proc.stdout


# ---------------------------------------------------------------------------
# training round trip


@pytest.fixture(scope="module")
def trained(workdir):
    out = workdir / "run"
    proc = run("train-tiny", "--data", workdir / "data", "--steps", 300, "--lr", "0.01", "--seed", 7,
               "--out", out, check=0)
    return out, proc.stdout


def test_train_tiny_writes_curve_and_checkpoint(trained):
    out, stdout = trained
    lines = (out / "loss_curve.txt").read_text().splitlines()
    assert lines[0] == "step box obj cls total" and len(lines) == 301
    first, last = float(lines[1].split()[-1]), float(lines[-1].split()[-1])
    assert first / last >= 10
    assert (out / "model.dgsd").is_file() and stdout.startswith("steps 300")


def test_trained_model_recovers_training_class(trained, workdir):
    out, _ = trained
    samples = load_dataset(workdir / "data")
    hits = 0
    for s in samples:
        dets = parse_detections(run("infer", "--ckpt", out / "model.dgsd", "--image", s.path, "--conf", "0.5",
                                    check=0).stdout)
        if dets:
            top = max(dets, key=lambda d: d[1])
            hits += top[0] in {lb.class_id for lb in s.labels}
    assert hits >= 6, hits


def test_seed_env_fallback(workdir):
    a = run("synth", "--out", workdir / "env", "--count", 3, "--size", 32, env={"DGS_SEED": "5"}, check=0)
    b = run("synth", "--out", workdir / "flag", "--count", 3, "--size", 32, "--seed", 5, check=0)
    assert a.returncode == b.returncode == 0
    for name in ("synthetic_000", "synthetic_002"):
        assert (workdir / "env/labels" / f"{name}.txt").read_text() == (workdir / "flag/labels" / f"{name}.txt").read_text()
