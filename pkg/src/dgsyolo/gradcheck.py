"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tape, Tensor

# gradients smaller than this are compared in absolute terms
REL_FLOOR = 1e-3
KINK_TOLERANCE = 1e-3


@dataclass
class GradcheckResult:
    max_rel_error: float
    worst_input: int
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    checked: int
    kink_skipped: int = 0

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-4,
    seed: int = 0,
    rel_floor: float = REL_FLOOR,
    max_elements: int | None = None,
    kink_guard: bool = False,
) -> GradcheckResult:
    """Compare tape gradients of ``fn`` against central differences.

    ``fn`` is reduced to a scalar through a fixed random projection of its
    output (a plain sum is degenerate for normalizing ops). Inputs are
    promoted to float64 and the difference quotient is accumulated in
    float64. With ``max_elements`` set, only that many randomly chosen
    entries of each input are perturbed.

    With ``kink_guard`` each quotient is recomputed with step ``h / 10``.
    When the two quotients disagree by more than ``KINK_TOLERANCE``
    (relative), a non-differentiable point lies within ``h`` of the input
    and the element is counted in ``kink_skipped`` instead of compared. A
    wrong analytic gradient still fails: both quotients then agree with
    each other but not with it.
    """
    rng = np.random.default_rng(seed)
    base = [np.array(a, dtype=np.float64) for a in inputs]
    xs = [Tensor(a, requires_grad=True, dtype=np.float64) for a in base]
    with Tape() as tape:
        out = fn(*xs)
        weights = np.ones(out.shape) if out.size == 1 else rng.standard_normal(out.shape)
        scalar = ops.sum_all(ops.mul(out, Tensor(weights, dtype=np.float64)))
    grads = tape.backward(scalar)

    def evaluate() -> float:
        y = fn(*[Tensor(b, dtype=np.float64) for b in base]).data
        return float(np.sum(y * weights))

    def quotient(a, idx, step) -> float:
        orig = a[idx]
        a[idx] = orig + step
        fp = evaluate()
        a[idx] = orig - step
        fm = evaluate()
        a[idx] = orig
        return (fp - fm) / (2 * step)

    worst = GradcheckResult(0.0, -1, (), 0.0, 0.0, 0)
    checked = skipped = 0
    for k, a in enumerate(base):
        g = grads.get(xs[k], np.zeros(a.shape))
        flat = range(a.size)
        if max_elements is not None and a.size > max_elements:
            flat = sorted(rng.choice(a.size, size=max_elements, replace=False).tolist())
        for f in flat:
            idx = np.unravel_index(f, a.shape)
            num = quotient(a, idx, h)
            if kink_guard:
                fine = quotient(a, idx, h / 10)
                if abs(num - fine) > KINK_TOLERANCE * max(abs(num), abs(fine), rel_floor):
                    skipped += 1
                    continue
            ana = float(g[idx])
            err = abs(ana - num) / max(abs(ana), abs(num), rel_floor)
            checked += 1
            if err > worst.max_rel_error or worst.worst_input < 0:
                worst = GradcheckResult(err, k, tuple(int(i) for i in idx), ana, num, 0)
    worst.checked = checked
    worst.kink_skipped = skipped
    return worst


def gradcheck_module(module, x: np.ndarray, h: float = 1e-4, seed: int = 0,
                     max_elements: int | None = None, kink_guard: bool = False) -> GradcheckResult:
    """Gradcheck a module's output w.r.t. its input and every parameter.

    The module is moved to float64 in place and left there.
    """
    module.astype(np.float64)
    names = [name for name, _ in module.named_parameters()]
    arrays = [x] + [t.data.copy() for _, t in module.named_parameters()]

    def fn(inp, *params):
        for name, p in zip(names, params):
            module.replace_tensor(name, p)
        return module(inp)

    return gradcheck(fn, arrays, h=h, seed=seed, max_elements=max_elements, kink_guard=kink_guard)


# ---------------------------------------------------------------------------
# suites shared by the command line and the test-suite

OP_TOLERANCE = 1e-4
BLOCK_TOLERANCE = 1e-3


def _away_from_zero(rng, shape, margin=0.05):
    """Normal samples pushed at least ``margin`` away from the relu-family kink."""
    a = rng.standard_normal(shape)
    return np.where(a >= 0, a + margin, a - margin)


def _distinct(rng, shape, gap=0.01):
    """Values pairwise at least ``gap`` apart so max/min selections are stable."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap + rng.uniform(0, gap / 4, n)).reshape(shape) - n * gap / 2


def _op_cases():
    def conv(shape, oc, k, stride, groups, bias):
        def build(rng):
            n, c, hh, ww = shape
            spec = ops.ConvSpec(c, oc, k, stride, groups, bias)
            args = [rng.standard_normal(shape), rng.standard_normal(spec.weight_shape)]
            if bias:
                args.append(rng.standard_normal(oc))
                return (lambda x, w, b: ops.conv2d(x, w, b, stride, groups)), args
            return (lambda x, w: ops.conv2d(x, w, None, stride, groups)), args
        return build

    def unary(op, gen=None):
        return lambda rng: (op, [(gen or (lambda r, s: r.standard_normal(s)))(rng, (2, 3, 4, 5))])

    def binary(op, second=None):
        def build(rng):
            a = rng.standard_normal((2, 3, 4, 5))
            b = second(rng, a) if second else rng.standard_normal(a.shape)
            return op, [a, b]
        return build

    def spread(rng, a):
        d = _away_from_zero(rng, a.shape)
        return a + d

    def bn(training):
        def build(rng):
            mean, var = rng.standard_normal(3), rng.uniform(0.5, 2, 3)
            return (lambda x, g, b: ops.batchnorm(x, g, b, mean, var, training=training)[0]), [
                rng.standard_normal((2, 3, 4, 4)), rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)]
        return build

    def matmul(ta, tb):
        def build(rng):
            a = rng.standard_normal((1, 2, 5, 3) if ta else (1, 2, 3, 5))
            b = rng.standard_normal((1, 2, 4, 5) if tb else (1, 2, 5, 4))
            return (lambda x, y: ops.matmul(x, y, ta, tb)), [a, b]
        return build

    idx = np.array([0, 7, 7, 31, 119, 64])
    return {
        "conv2d": conv((1, 4, 6, 6), 4, 3, 1, 1, False),
        "conv2d_groups2": conv((1, 4, 6, 6), 6, 3, 1, 2, True),
        "conv2d_stride2": conv((2, 3, 7, 7), 4, 3, 2, 1, True),
        "conv2d_pointwise": conv((1, 6, 5, 5), 4, 1, 1, 2, False),
        "depthwise_conv": lambda rng: (
            (lambda x, w, b: ops.depthwise_conv(x, w, b, 2)),
            [rng.standard_normal((1, 4, 7, 7)), rng.standard_normal((4, 1, 3, 3)), rng.standard_normal(4)]),
        "channel_shuffle": lambda rng: ((lambda x: ops.channel_shuffle(x, 3)), [rng.standard_normal((2, 6, 3, 3))]),
        "channel_slice": lambda rng: ((lambda x: ops.channel_slice(x, 1, 4)), [rng.standard_normal((2, 6, 3, 3))]),
        "channel_split": lambda rng: ((lambda x: ops.concat(ops.channel_split(x, [4, 2])[::-1])),
                                      [rng.standard_normal((2, 6, 3, 3))]),
        "concat": lambda rng: ((lambda a, b: ops.concat([a, b])),
                               [rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 3, 3, 3))]),
        "reshape": lambda rng: ((lambda x: ops.reshape(x, (2, 3, 20))), [rng.standard_normal((2, 3, 4, 5))]),
        "add": binary(ops.add),
        "sub": binary(ops.sub),
        "mul": binary(ops.mul),
        "div": binary(ops.div, lambda r, a: _away_from_zero(r, a.shape, 0.5)),
        "scale": unary(lambda x: ops.scale(x, -1.7)),
        "add_scalar": unary(lambda x: ops.add_scalar(x, 0.3)),
        "square": unary(ops.square),
        "minimum": binary(ops.minimum, spread),
        "maximum": binary(ops.maximum, spread),
        "clamp_min": unary(lambda x: ops.clamp_min(x, 0.0), _away_from_zero),
        "atan": unary(ops.atan),
        "sigmoid": unary(ops.sigmoid),
        "silu": unary(ops.silu),
        "leaky_relu": unary(ops.leaky_relu, _away_from_zero),
        "bce_with_logits": lambda rng: (
            (lambda x, t=rng.uniform(0, 1, (2, 3, 4, 5)): ops.bce_with_logits(x, t)),
            [rng.standard_normal((2, 3, 4, 5)) * 3]),
        "sum_all": unary(ops.sum_all),
        "mean_all": unary(ops.mean_all),
        "take": lambda rng: ((lambda x: ops.take(x, idx)), [rng.standard_normal((2, 3, 4, 5))]),
        "batchnorm_eval": bn(False),
        "batchnorm_train": bn(True),
        "layernorm_channels": lambda rng: (ops.layernorm_channels, [
            rng.standard_normal((2, 4, 3, 3)), rng.uniform(0.5, 1.5, 4), rng.standard_normal(4)]),
        "maxpool": unary(lambda x: ops.maxpool(x, 5, 1), _distinct),
        "maxpool_stride2": unary(lambda x: ops.maxpool(x, 2, 2), _distinct),
        "upsample_nearest": unary(lambda x: ops.upsample_nearest(x, 2)),
        "softmax_lastdim": unary(ops.softmax_lastdim),
        "matmul": matmul(False, False),
        "matmul_trans_a": matmul(True, False),
        "matmul_trans_b": matmul(False, True),
    }


OP_CASES = _op_cases()


def _block_cases():
    from . import blocks

    def jitter(module, rng):
        # move every parameter off its init so BN/LN affine terms are exercised;
        # scales are centred on one so zero-initialized branches are live
        for name, t in module.named_parameters():
            base = np.ones_like(t.data) if name.endswith("gamma") else t.data
            t.data = base + 0.1 * rng.standard_normal(t.shape).astype(t.data.dtype)
        return module

    def dgsm(stride):
        def build(rng):
            cfg = blocks.DgsmConfig(8, 1, downsample=stride == 2)
            cin = 8 if stride == 1 else 4
            return jitter(blocks.DgsmBlock(cin, cfg, stride, rng), rng), rng.standard_normal((1, cin, 6, 6))
        return build

    def dgst(pos):
        def build(rng):
            cfg = blocks.DgstConfig(16, pos_encoding=pos)
            return jitter(blocks.DgstBlock(cfg, rng), rng), rng.standard_normal((1, 16, 4, 4))
        return build

    return {
        "dgsm_block": dgsm(1),
        "dgsm_block_stride2": dgsm(2),
        "dgst_block": dgst(True),
        "dgst_block_no_pe": dgst(False),
    }


def run_op_check(name: str, seed: int, h: float = 1e-4) -> GradcheckResult:
    fn, inputs = OP_CASES[name](np.random.default_rng(seed))
    return gradcheck(fn, inputs, h=h, seed=seed)


def run_block_check(name: str, seed: int, h: float = 1e-4, max_elements: int | None = None) -> GradcheckResult:
    module, x = _block_cases()[name](np.random.default_rng(seed))
    return gradcheck_module(module, x, h=h, seed=seed, max_elements=max_elements)


BLOCK_CASES = tuple(_block_cases())
