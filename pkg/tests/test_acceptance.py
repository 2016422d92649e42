"""One test per acceptance criterion; each prints a PASS/FAIL line (run with -s to see them).

Criterion 9 (absolute precision/recall/mAP of a fully trained detector) is
excluded: it needs private data and full-scale training. Metric correctness
is covered by criteria 1 and 5.
"""

from fractions import Fraction

import numpy as np

from dgsyolo import ops
from dgsyolo.bench import run_bench
from dgsyolo.blocks import AttentionPath
from dgsyolo.data import synthetic_dataset
from dgsyolo.gradcheck import BLOCK_CASES, BLOCK_TOLERANCE, OP_CASES, OP_TOLERANCE, run_block_check, run_op_check
from dgsyolo.loss import assign_targets, printed_sum_matches, train_tiny
from dgsyolo.model import ModelConfig, build_model, count_params, load_checkpoint, save_checkpoint
from dgsyolo.postprocess import average_precision, evaluate, f1, nms
from dgsyolo.tensor import Tensor
from oracles import exhaustive_assignment, naive_conv, nms_oracle, random_dets, three_prediction_instance

REFERENCE_PARAMS = 2_020_000
SEEDS = range(20)


def report(criterion, ok, detail):
    print(f"\n[criterion {criterion}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def test_criterion_1_f1_identity():
    rows = [(0.885, 0.805, 0.8431), (0.895, 0.794, 0.8415), (0.887, 0.806, 0.8446), (0.908, 0.796, 0.8483)]
    errors = [abs(f1(p, r) - want) for p, r, want in rows]
    report(1, max(errors) <= 5e-5, f"worst |f1 - printed| = {max(errors):.2e} (tol 5e-5)")


def test_criterion_2_loss_sum_identity():
    rows = [(("0.02671", "0.03225", "0.00129"), "0.06025"), (("0.02589", "0.02889", "0.001067"), "0.05585"),
            (("0.02423", "0.02788", "0.0006791"), "0.05278"), (("0.02381", "0.01283", "0.0008498"), "0.0375")]
    results = [printed_sum_matches(parts, total) for parts, total in rows]
    detail = ", ".join(f"{s} vs {t}" for (s, _), (_, t) in zip(results, rows))
    report(2, all(ok for _, ok in results), detail)


def test_criterion_3_parameter_accounting():
    model = build_model()
    rep = count_params(model)
    mismatched = [name for name, analytic, enumerated in rep.layers if analytic != enumerated]
    delta = rep.total / REFERENCE_PARAMS - 1
    ok = not mismatched and rep.total == model.enumerated_params() and abs(delta) <= 0.20
    report(3, ok, f"{len(rep.layers)} layers exact, total {rep.total:,} vs 2.02M reference: {delta:+.2%} (tol 20%)")


def test_criterion_4_gradient_correctness():
    worst_op = max((run_op_check(name, s).max_rel_error, name) for name in OP_CASES for s in SEEDS)
    worst_block = max((run_block_check(name, s).max_rel_error, name) for name in BLOCK_CASES for s in SEEDS)
    ok = worst_op[0] <= OP_TOLERANCE and worst_block[0] <= BLOCK_TOLERANCE
    report(4, ok, f"{len(OP_CASES)} ops x 20 seeds worst {worst_op[0]:.2e} ({worst_op[1]}); "
                  f"{len(BLOCK_CASES)} blocks x 20 seeds worst {worst_block[0]:.2e} ({worst_block[1]})")


def test_criterion_5_oracle_equivalence():
    rng = np.random.default_rng(5)
    conv_err = 0.0
    for stride, groups in [(1, 1), (2, 1), (1, 4), (2, 2)]:
        x = rng.standard_normal((2, 8, 7, 9)).astype(np.float32)
        w = rng.standard_normal((8, 8 // groups, 3, 3)).astype(np.float32)
        b = rng.standard_normal(8).astype(np.float32)
        got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, groups=groups).data
        conv_err = max(conv_err, float(np.abs(got - naive_conv(x, w, b, stride, groups)).max()))

    nms_ok = True
    for case in range(1000):
        dets = random_dets(rng, int(rng.integers(0, 65)), grid=case % 2 == 0)
        thr = float(rng.choice([0.3, 0.45, 0.6]))
        nms_ok &= [id(d) for d in nms(dets, thr)] == [id(dets[i]) for i in nms_oracle(dets, thr)]

    anchors, strides = ModelConfig().anchors, ModelConfig().strides
    gts = [[(int(rng.integers(2)), *rng.uniform(0, 640, 2), *rng.uniform(4, 400, 2)) for _ in range(20)]
           for _ in range(10)]
    t = assign_targets(gts, anchors, strides, [(640 // s, 640 // s) for s in strides])
    assign_ok = list(zip(t.image, t.head, t.anchor, t.gy, t.gx)) == exhaustive_assignment(gts, anchors, strides)

    preds, truth = three_prediction_instance()
    ap_ok = average_precision([True, False, True], 2) == Fraction(5, 6)
    ap_ok &= evaluate(preds, truth, iou_thresholds=[0.5]).map50 == 5 / 6

    ok = conv_err <= 1e-5 and nms_ok and assign_ok and ap_ok
    report(5, ok, f"conv max abs {conv_err:.1e} (tol 1e-5), NMS 1000/1000 exact {nms_ok}, "
                  f"assignment exact {assign_ok}, AP = 5/6 {ap_ok}")


def _permute_positions(a, perm):
    n, c, h, w = a.shape
    return a.reshape(n, c, h * w)[:, :, perm].reshape(n, c, h, w)


def test_criterion_6_invariants(tmp_path):
    rng = np.random.default_rng(6)
    x = Tensor(rng.standard_normal((2, 24, 3, 3)).astype(np.float32))
    shuffle_ok = all(np.array_equal(ops.channel_shuffle(ops.channel_shuffle(x, g), 24 // g).data, x.data)
                     for g in (1, 2, 3, 4, 6, 8))
    split_ok = np.array_equal(ops.concat(ops.channel_split(x, [18, 6])).data, x.data)

    a = rng.standard_normal((1, 8, 3, 4)).astype(np.float32)
    perm = rng.permutation(12)
    plain = AttentionPath(8, 1, 2, pos_encoding=False, rng=np.random.default_rng(0))
    encoded = AttentionPath(8, 1, 2, pos_encoding=True, rng=np.random.default_rng(0))
    equivariant = np.allclose(plain(Tensor(_permute_positions(a, perm))).data,
                              _permute_positions(plain(Tensor(a)).data, perm), atol=1e-5)
    broken = not np.allclose(encoded(Tensor(_permute_positions(a, perm))).data,
                             _permute_positions(encoded(Tensor(a)).data, perm), atol=1e-3)

    model = build_model(ModelConfig(input_size=(64, 64)), seed=3)
    for _, t in model.named_tensors():
        t.data = t.data + rng.standard_normal(t.shape).astype(np.float32) * 0.01
    save_checkpoint(model, tmp_path / "m.dgsd")
    loaded = load_checkpoint(tmp_path / "m.dgsd")
    img = Tensor(rng.uniform(0, 1, (1, 3, 64, 64)).astype(np.float32))
    ckpt_ok = all(np.array_equal(p.data, q.data) for (_, p), (_, q) in zip(model.named_tensors(),
                                                                           loaded.named_tensors()))
    ckpt_ok &= all(np.array_equal(p.data, q.data) for p, q in zip(model(img), loaded(img)))

    ok = shuffle_ok and split_ok and equivariant and broken and ckpt_ok
    report(6, ok, f"shuffle inverse {shuffle_ok}, split/concat {split_ok}, equivariant without PE {equivariant}, "
                  f"not equivariant with PE {broken}, checkpoint bitwise {ckpt_ok}")


def test_criterion_7_learning_sanity():
    samples = synthetic_dataset(8, size=64, seed=7)
    cfg = ModelConfig(input_size=(64, 64))
    curves = [[lb.total for lb in train_tiny(build_model(cfg, seed=7), samples, steps=300, lr=0.01, seed=7)]
              for _ in range(2)]
    ratio = curves[0][0] / curves[0][-1]
    deterministic = curves[0] == curves[1]
    report(7, ratio >= 10 and deterministic,
           f"loss {curves[0][0]:.4g} -> {curves[0][-1]:.4g} ({ratio:.1f}x, need 10x), "
           f"repeat run bitwise identical {deterministic}")


def test_criterion_8_efficiency_ordering():
    presets = ["dgst-dgsm", "dgsm", "baseline"]
    models = {p: build_model(ModelConfig.preset(p)) for p in presets}
    totals = {p: [] for p in presets}
    params = {}
    # interleave presets so drifting machine load hits all of them alike; the median round discards stalls
    for _ in range(5):
        for p in presets:
            rep = run_bench(models[p], runs=10, warmup=2, size=640)
            totals[p].append(rep.total_ms)
            params[p] = rep.params_m
    median = {p: float(np.median(totals[p])) for p in presets}
    ok = median["dgst-dgsm"] < median["dgsm"] < median["baseline"]
    ok &= params["dgst-dgsm"] < params["dgsm"] < params["baseline"]
    detail = "; ".join(f"{p} {median[p]:.1f} ms {params[p]:.3f}M" for p in presets)
    report(8, ok, f"total_ms and params strictly ordered: {detail}")
