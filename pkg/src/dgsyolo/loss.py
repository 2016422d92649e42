"""Target assignment, the box/objectness/classification loss, and a tiny trainer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Sequence

import numpy as np

from . import ops
from .data import Sample, letterbox
from .tensor import NumericError, Tape, Tensor

DEFAULT_WEIGHTS = (0.05, 1.0, 0.5)
DIVERGENCE_LIMIT = 1e3


@dataclass
class LossBreakdown:
    box_loss: float
    obj_loss: float
    cls_loss: float
    total: float
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    @classmethod
    def from_components(cls, box: float, obj: float, cls_: float, weights=(1.0, 1.0, 1.0)) -> "LossBreakdown":
        wb, wo, wc = weights
        return cls(box, obj, cls_, wb * box + wo * obj + wc * cls_)

    def line(self, step: int) -> str:
        return f"{step} {self.box_loss:.6g} {self.obj_loss:.6g} {self.cls_loss:.6g} {self.total:.6g}"


def printed_sum_matches(parts: Sequence[str], printed_total: str) -> tuple[Decimal, bool]:
    """Exact sum of printed components vs a printed total, allowing one unit in its last digit."""
    total = sum((Decimal(p) for p in parts), Decimal(0))
    unit = Decimal(1).scaleb(Decimal(printed_total).as_tuple().exponent)
    return total, abs(total - Decimal(printed_total)) <= unit


@dataclass
class Targets:
    """One row per ground-truth box (pixels of the network input)."""

    image: np.ndarray
    head: np.ndarray
    anchor: np.ndarray
    gy: np.ndarray
    gx: np.ndarray
    class_id: np.ndarray
    box: np.ndarray  # (k, 4) cx, cy, w, h

    def __len__(self) -> int:
        return len(self.image)


def wh_iou(w: float, h: float, aw: float, ah: float) -> float:
    """IoU of two boxes sharing a center."""
    inter = min(w, aw) * min(h, ah)
    return inter / (w * h + aw * ah - inter)


def assign_targets(
    gts: Sequence[Sequence[tuple[int, float, float, float, float]]],
    anchors: Sequence[Sequence[tuple[float, float]]],
    strides: Sequence[int],
    grid_sizes: Sequence[tuple[int, int]],
) -> Targets:
    """Assign each GT ``(class, cx, cy, w, h)`` to one (head, cell, anchor).

    The head/anchor pair is the prior with the highest IoU against the GT
    when both are centered at the GT center (first pair wins ties); the
    cell is ``floor(center / stride)``.
    """
    priors = [(h, a, aw, ah) for h, level in enumerate(anchors) for a, (aw, ah) in enumerate(level)]
    rows = []
    for b, image_gts in enumerate(gts):
        for cls, cx, cy, w, h in image_gts:
            if w <= 0 or h <= 0:
                raise ValueError(f"ground-truth box with non-positive size ({w}, {h})")
            scores = [wh_iou(w, h, aw, ah) for _, _, aw, ah in priors]
            head, anchor, _, _ = priors[int(np.argmax(scores))]
            s = strides[head]
            gh, gw = grid_sizes[head]
            gy = min(max(int(math.floor(cy / s)), 0), gh - 1)
            gx = min(max(int(math.floor(cx / s)), 0), gw - 1)
            rows.append((b, head, anchor, gy, gx, cls, cx, cy, w, h))
    arr = np.array(rows, dtype=np.float64).reshape(-1, 10)
    ints = arr[:, :6].astype(np.int64)
    return Targets(*(ints[:, i] for i in range(6)), box=arr[:, 6:])


def _const(a: np.ndarray, like: Tensor) -> Tensor:
    return Tensor(np.asarray(a), dtype=like.dtype)


def ciou_tensor(px: Tensor, py: Tensor, pw: Tensor, ph: Tensor, gt: np.ndarray, eps: float = 1e-7) -> Tensor:
    """Differentiable CIoU between predicted (cx, cy, w, h) and constant GT boxes."""
    C = lambda a: _const(a, px)  # noqa: E731
    gx, gy, gw, gh = (gt[:, i] for i in range(4))
    p_x1, p_x2 = ops.sub(px, ops.scale(pw, 0.5)), ops.add(px, ops.scale(pw, 0.5))
    p_y1, p_y2 = ops.sub(py, ops.scale(ph, 0.5)), ops.add(py, ops.scale(ph, 0.5))
    g_x1, g_x2, g_y1, g_y2 = C(gx - gw / 2), C(gx + gw / 2), C(gy - gh / 2), C(gy + gh / 2)

    iw = ops.clamp_min(ops.sub(ops.minimum(p_x2, g_x2), ops.maximum(p_x1, g_x1)), 0.0)
    ih = ops.clamp_min(ops.sub(ops.minimum(p_y2, g_y2), ops.maximum(p_y1, g_y1)), 0.0)
    inter = ops.mul(iw, ih)
    union = ops.add_scalar(ops.sub(ops.add(ops.mul(pw, ph), C(gw * gh)), inter), eps)
    iou = ops.div(inter, union)

    cw = ops.sub(ops.maximum(p_x2, g_x2), ops.minimum(p_x1, g_x1))
    ch = ops.sub(ops.maximum(p_y2, g_y2), ops.minimum(p_y1, g_y1))
    c2 = ops.add_scalar(ops.add(ops.square(cw), ops.square(ch)), eps)
    rho2 = ops.add(ops.square(ops.sub(px, C(gx))), ops.square(ops.sub(py, C(gy))))
    v = ops.scale(ops.square(ops.sub(C(np.arctan(gw / gh)), ops.atan(ops.div(pw, ph)))), 4 / math.pi**2)
    alpha = ops.div(v, ops.add_scalar(ops.sub(v, iou), 1.0 + eps))
    return ops.sub(ops.sub(iou, ops.div(rho2, c2)), ops.mul(alpha, v))


def compute_loss(
    outputs: Sequence[Tensor],
    targets: Targets,
    anchors: Sequence[Sequence[tuple[float, float]]],
    strides: Sequence[int],
    num_classes: int,
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS,
) -> LossBreakdown:
    """Box (1 - CIoU), objectness BCE over all cells, class BCE on assigned cells."""
    na, no = len(anchors[0]), 5 + num_classes
    like = outputs[0]
    n_assigned = len(targets)
    obj_sum = box_sum = cls_sum = None
    total_cells = 0

    def acc(a, b):
        return b if a is None else ops.add(a, b)

    for h, raw in enumerate(outputs):
        n, ch, gh, gw = raw.shape
        if ch != na * no:
            raise ValueError(f"head {h}: {ch} channels, expected {na}*(5+{num_classes})")
        hw = gh * gw
        plane = (np.arange(n)[:, None] * na + np.arange(na)[None, :]) * no  # (n, na) offsets in channel units
        obj_idx = ((plane + 4)[:, :, None] * hw + np.arange(hw)).reshape(-1)
        obj_target = np.zeros((n, na, hw))
        sel = targets.head == h
        b, a = targets.image[sel], targets.anchor[sel]
        cell = targets.gy[sel] * gw + targets.gx[sel]
        obj_target[b, a, cell] = 1.0
        try:
            obj_sum = acc(obj_sum, ops.sum_all(ops.bce_with_logits(ops.take(raw, obj_idx), obj_target.reshape(-1))))
        except NumericError as exc:
            raise NumericError(f"obj_loss: {exc}") from None
        total_cells += n * na * hw
        if not sel.any():
            continue

        base = plane[b, a]

        def comp(k: int) -> Tensor:
            return ops.take(raw, (base + k) * hw + cell)

        s = strides[h]
        aw = np.array([anchors[h][i][0] for i in a], dtype=np.float64)
        ah = np.array([anchors[h][i][1] for i in a], dtype=np.float64)
        try:
            px = ops.scale(ops.add(ops.add_scalar(ops.scale(ops.sigmoid(comp(0)), 2.0), -0.5),
                                   _const(targets.gx[sel], like)), s)
            py = ops.scale(ops.add(ops.add_scalar(ops.scale(ops.sigmoid(comp(1)), 2.0), -0.5),
                                   _const(targets.gy[sel], like)), s)
            pw = ops.mul(ops.square(ops.scale(ops.sigmoid(comp(2)), 2.0)), _const(aw, like))
            ph = ops.mul(ops.square(ops.scale(ops.sigmoid(comp(3)), 2.0)), _const(ah, like))
            c = ciou_tensor(px, py, pw, ph, targets.box[sel])
            box_sum = acc(box_sum, ops.add_scalar(ops.scale(ops.sum_all(c), -1.0), float(sel.sum())))
        except NumericError as exc:
            raise NumericError(f"box_loss: {exc}") from None

        cls_idx = ((base[:, None] + 5 + np.arange(num_classes)[None, :]) * hw + cell[:, None]).reshape(-1)
        onehot = np.zeros((int(sel.sum()), num_classes))
        onehot[np.arange(len(b)), targets.class_id[sel]] = 1.0
        try:
            cls_sum = acc(cls_sum, ops.sum_all(ops.bce_with_logits(ops.take(raw, cls_idx), onehot.reshape(-1))))
        except NumericError as exc:
            raise NumericError(f"cls_loss: {exc}") from None

    wb, wo, wc = weights
    obj = ops.scale(obj_sum, 1.0 / total_cells)
    if n_assigned:
        box = ops.scale(box_sum, 1.0 / n_assigned)
        cls = ops.scale(cls_sum, 1.0 / (n_assigned * num_classes))
        total = ops.add(ops.add(ops.scale(box, wb), ops.scale(obj, wo)), ops.scale(cls, wc))
        box_v, cls_v = box.item(), cls.item()
    else:
        total = ops.scale(obj, wo)
        box_v = cls_v = 0.0
    return LossBreakdown(box_v, obj.item(), cls_v, total.item(), total)


# ---------------------------------------------------------------------------
# training


def prepare_batch(samples: Sequence[Sample], size: int) -> tuple[Tensor, list[list[tuple]]]:
    """Letterbox samples to ``size`` and convert labels to input-pixel GTs."""
    images, gts = [], []
    for s in samples:
        img, tf = letterbox(s.image, size)
        images.append(img.data)
        _, _, h, w = s.image.shape
        rows = []
        for lb in s.labels:
            cx = lb.cx * w * tf.scale + tf.pad_x
            cy = lb.cy * h * tf.scale + tf.pad_y
            rows.append((lb.class_id, cx, cy, lb.w * w * tf.scale, lb.h * h * tf.scale))
        gts.append(rows)
    return Tensor(np.concatenate(images, axis=0)), gts


def sgd_step(params: Sequence[Tensor], grads: dict, velocity: list[np.ndarray], lr: float, momentum: float) -> None:
    for i, p in enumerate(params):
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        velocity[i] = momentum * velocity[i] + g
        p.data = (p.data - lr * velocity[i]).astype(p.data.dtype)


def train_tiny(
    model,
    samples: Sequence[Sample],
    steps: int = 300,
    lr: float = 0.01,
    seed: int = 7,
    momentum: float = 0.9,
    batch_size: int | None = None,
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS,
    callback=None,
) -> list[LossBreakdown]:
    """Plain momentum SGD on a small in-memory dataset; returns per-step losses.

    The seed drives minibatch sampling when ``batch_size`` is smaller than
    the dataset, so identical seeds give bitwise-identical curves.
    """
    cfg = model.cfg
    size = cfg.input_size[0]
    x_all, gts_all = prepare_batch(samples, size)
    rng = np.random.default_rng(seed)
    n = len(samples)
    bs = n if batch_size is None else min(batch_size, n)
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    grid = [(size // s, size // s) for s in cfg.strides]
    history = []
    model.train()
    try:
        for step in range(steps):
            idx = np.arange(n) if bs == n else np.sort(rng.choice(n, size=bs, replace=False))
            x = Tensor(x_all.data[idx])
            targets = assign_targets([gts_all[i] for i in idx], cfg.anchors, cfg.strides, grid)
            with Tape() as tape:
                outs = model(x)
                lb = compute_loss(outs, targets, cfg.anchors, cfg.strides, cfg.num_classes, weights)
            if not lb.total <= DIVERGENCE_LIMIT:
                raise NumericError(f"training diverged at step {step}: total loss {lb.total}")
            grads = tape.backward(lb.tensor)
            sgd_step(params, grads, velocity, lr, momentum)
            lb.tensor = None
            history.append(lb)
            if callback is not None:
                callback(step, lb)
    except NumericError as exc:
        if "step" in str(exc):
            raise
        raise NumericError(f"step {len(history)}: {exc}") from None
    finally:
        model.eval()
    return history


def format_curve(history: Sequence[LossBreakdown]) -> str:
    return "step box obj cls total\n" + "".join(lb.line(i) + "\n" for i, lb in enumerate(history))
