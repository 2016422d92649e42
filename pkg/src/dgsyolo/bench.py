"""Single-threaded wall-clock benchmark split into network and post-processing time."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .blocks import fold_batchnorm
from .data import letterbox
from .model import Model, build_model, count_params
from .postprocess import decode_arrays, nms_arrays
from .tensor import Tensor


@dataclass(frozen=True)
class BenchReport:
    params_m: float
    interface_ms: float  # letterbox + forward
    nms_ms: float  # decode + NMS
    total_ms: float

    HEADER = "params_m interface_ms nms_ms total_ms"

    def row(self) -> str:
        return f"{self.params_m:.3f} {self.interface_ms:.1f} {self.nms_ms:.1f} {self.total_ms:.1f}"


def detect(model: Model, image: Tensor, conf: float = 0.25, iou: float = 0.45):
    """Letterbox, forward and post-process one image.

    Returns ``(boxes, class_ids, scores, transform)`` with boxes in
    letterboxed input pixels, plus the split timings in seconds.
    """
    size = model.cfg.input_size[0]
    t0 = time.perf_counter()
    x, tf = letterbox(image, size)
    outs = model(x)
    t1 = time.perf_counter()
    boxes, ids, scores = [], [], []
    for raw, anchors, stride in zip(outs, model.cfg.anchors, model.cfg.strides):
        b, c, s = decode_arrays(raw.data, anchors, stride, conf, (size, size))[0]
        boxes.append(b)
        ids.append(c)
        scores.append(s)
    boxes, ids, scores = np.concatenate(boxes), np.concatenate(ids), np.concatenate(scores)
    keep = nms_arrays(boxes, ids, scores, iou)
    t2 = time.perf_counter()
    return (boxes[keep], ids[keep], scores[keep], tf), (t1 - t0, t2 - t1)


def run_bench(model: Model, runs: int = 50, warmup: int = 5, size: int | None = None, seed: int = 0) -> BenchReport:
    if runs < 1 or warmup < 0:
        raise ValueError("runs must be >= 1 and warmup >= 0")
    size = size or model.cfg.input_size[0]
    if size != model.cfg.input_size[0]:
        rebuilt = build_model(replace(model.cfg, input_size=(size, size)))
        for (_, dst), (_, src) in zip(rebuilt.named_tensors(), model.named_tensors()):
            dst.data = src.data
        model = rebuilt
    params_m = count_params(model).total / 1e6
    model = fold_batchnorm(model)
    image = Tensor(np.random.default_rng(seed).uniform(0, 1, (1, 3, size, size)))
    fwd, post = [], []
    with threadpool_limits(limits=1):
        for i in range(warmup + runs):
            _, (a, b) = detect(model, image)
            if i >= warmup:
                fwd.append(a)
                post.append(b)
    interface_ms = 1e3 * float(np.mean(fwd))
    nms_ms = 1e3 * float(np.mean(post))
    return BenchReport(params_m, interface_ms, nms_ms, interface_ms + nms_ms)
