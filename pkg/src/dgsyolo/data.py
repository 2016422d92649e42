"""YOLO-format dataset ingestion, image codecs, letterboxing and splitting.

Dataset layout::

    <root>/images/<name>.ppm | <name>.dgsi
    <root>/labels/<name>.txt     # optional; missing means a negative image

Images are binary PPM (P6, maxval 255) or the raw tensor format: magic
``DGSI0001``, four little-endian uint32 dims (n, c, h, w), then
little-endian float32 values.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .tensor import Tensor

RAW_MAGIC = b"DGSI0001"
IMAGE_SUFFIXES = (".ppm", ".dgsi")
PAD_VALUE = 114 / 255


class DataError(ValueError):
    """Malformed label file, image, or dataset directory."""


class Label(NamedTuple):
    class_id: int
    cx: float
    cy: float
    w: float
    h: float


@dataclass
class Sample:
    image: Tensor
    labels: list[Label]
    path: Path | None = None


# ---------------------------------------------------------------------------
# labels


def parse_label_file(text: str, num_classes: int = 2) -> list[Label]:
    labels = []
    for lineno, line in enumerate(text.splitlines(), 1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 5:
            raise DataError(f"line {lineno}: expected 5 fields 'class cx cy w h', got {len(tokens)}")
        try:
            cls = int(tokens[0])
            cx, cy, w, h = (float(t) for t in tokens[1:])
        except ValueError:
            raise DataError(f"line {lineno}: non-numeric token in {line.strip()!r}") from None
        if not 0 <= cls < num_classes:
            raise DataError(f"line {lineno}: class id {cls} outside [0, {num_classes})")
        for name, v in (("cx", cx), ("cy", cy), ("w", w), ("h", h)):
            if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise DataError(f"line {lineno}: {name}={v} outside [0, 1]")
        if w <= 0 or h <= 0:
            raise DataError(f"line {lineno}: box width and height must be positive")
        labels.append(Label(cls, cx, cy, w, h))
    return labels


def format_labels(labels: Sequence[Label]) -> str:
    return "".join(f"{lb.class_id} {lb.cx!r} {lb.cy!r} {lb.w!r} {lb.h!r}\n" for lb in labels)


def labels_to_boxes(labels: Sequence[Label], height: int, width: int) -> list[tuple[tuple[float, ...], int]]:
    """Normalized (cx, cy, w, h) labels to pixel xyxy boxes."""
    out = []
    for lb in labels:
        cx, cy, w, h = lb.cx * width, lb.cy * height, lb.w * width, lb.h * height
        out.append(((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), lb.class_id))
    return out


# ---------------------------------------------------------------------------
# images


def _ppm_header(raw: bytes) -> tuple[int, int, int, int]:
    fields_, pos = [], 2
    while len(fields_) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise DataError("malformed PPM header")
        fields_.append(int(raw[start:pos]))
    return fields_[0], fields_[1], fields_[2], pos + 1


def decode_image(raw: bytes) -> Tensor:
    if raw[:2] == b"P6":
        w, h, maxval, start = _ppm_header(raw)
        if maxval != 255:
            raise DataError(f"unsupported PPM maxval {maxval}; only 8-bit (255) images are accepted")
        payload = raw[start : start + w * h * 3]
        if len(payload) != w * h * 3:
            raise DataError(f"truncated PPM payload: {len(payload)} of {w * h * 3} bytes")
        arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
        return Tensor(arr.transpose(2, 0, 1)[None].astype(np.float32) / 255.0)
    if raw[:8] == RAW_MAGIC:
        if len(raw) < 24:
            raise DataError("truncated raw tensor header")
        n, c, h, w = struct.unpack("<4I", raw[8:24])
        if (n, c) != (1, 3):
            raise DataError(f"raw image must be (1, 3, H, W), got {(n, c, h, w)}")
        count = n * c * h * w
        payload = raw[24 : 24 + 4 * count]
        if len(payload) != 4 * count:
            raise DataError(f"truncated raw tensor payload: {len(payload)} of {4 * count} bytes")
        return Tensor(np.frombuffer(payload, dtype="<f4").reshape(n, c, h, w))
    raise DataError(f"unsupported image format (magic {raw[:8]!r})")


def load_image(path: str | Path) -> Tensor:
    return decode_image(Path(path).read_bytes())


def encode_raw(img: Tensor) -> bytes:
    arr = np.ascontiguousarray(img.data, dtype="<f4")
    return RAW_MAGIC + struct.pack("<4I", *arr.shape) + arr.tobytes()


def encode_ppm(img: Tensor) -> bytes:
    arr = np.clip(np.rint(img.data[0].transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    return f"P6\n{w} {h}\n255\n".encode() + arr.tobytes()


def save_image(img: Tensor, path: str | Path) -> None:
    path = Path(path)
    data = encode_raw(img) if path.suffix == ".dgsi" else encode_ppm(img)
    path.write_bytes(data)


def draw_boxes(img: Tensor, boxes: Sequence[Sequence[float]], thickness: int = 2) -> Tensor:
    """Copy of ``img`` with box outlines; colour cycles red, green, blue."""
    arr = img.data.copy()
    _, _, h, w = arr.shape
    palette = np.eye(3, dtype=arr.dtype)
    for k, (x1, y1, x2, y2) in enumerate(boxes):
        colour = palette[k % 3].reshape(3, 1, 1)
        x1, y1 = max(0, int(round(x1))), max(0, int(round(y1)))
        x2, y2 = min(w, int(round(x2))), min(h, int(round(y2)))
        if x2 <= x1 or y2 <= y1:
            continue
        t = thickness
        arr[0, :, y1 : min(y1 + t, y2), x1:x2] = colour
        arr[0, :, max(y2 - t, y1) : y2, x1:x2] = colour
        arr[0, :, y1:y2, x1 : min(x1 + t, x2)] = colour
        arr[0, :, y1:y2, max(x2 - t, x1) : x2] = colour
    return Tensor(arr)


# ---------------------------------------------------------------------------
# letterbox


@dataclass(frozen=True)
class LetterboxTransform:
    scale: float
    pad_x: int
    pad_y: int
    orig_h: int
    orig_w: int
    target: int

    def to_letterbox(self, box: Sequence[float]) -> tuple[float, float, float, float]:
        x1, y1, x2, y2 = box
        s = self.scale
        return (x1 * s + self.pad_x, y1 * s + self.pad_y, x2 * s + self.pad_x, y2 * s + self.pad_y)

    def to_original(self, box: Sequence[float]) -> tuple[float, float, float, float]:
        x1, y1, x2, y2 = box
        s = self.scale
        return (
            min(max((x1 - self.pad_x) / s, 0.0), self.orig_w),
            min(max((y1 - self.pad_y) / s, 0.0), self.orig_h),
            min(max((x2 - self.pad_x) / s, 0.0), self.orig_w),
            min(max((y2 - self.pad_y) / s, 0.0), self.orig_h),
        )


def letterbox(img: Tensor, target: int = 640) -> tuple[Tensor, LetterboxTransform]:
    """Aspect-preserving nearest-neighbour resize into a gray-padded square."""
    n, c, h, w = img.shape
    s = min(target / h, target / w)
    nh, nw = min(target, round(h * s)), min(target, round(w * s))
    ys = np.minimum(np.floor((np.arange(nh) + 0.5) / s).astype(np.int64), h - 1)
    xs = np.minimum(np.floor((np.arange(nw) + 0.5) / s).astype(np.int64), w - 1)
    top, left = (target - nh) // 2, (target - nw) // 2
    out = np.full((n, c, target, target), PAD_VALUE, dtype=img.data.dtype)
    out[:, :, top : top + nh, left : left + nw] = img.data[:, :, ys][:, :, :, xs]
    return Tensor(out), LetterboxTransform(s, left, top, h, w, target)


# ---------------------------------------------------------------------------
# datasets


def split_dataset(paths: Sequence, seed: int) -> tuple[list, list, list]:
    """Seeded 70/15/15 partition: train = floor(.7 N), val = floor(.15 N), test = rest."""
    n = len(paths)
    if n < 3:
        raise DataError(f"need at least 3 items to split, got {n}")
    items = sorted(paths, key=str)
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [items[i] for i in perm]
    n_train, n_val = 7 * n // 10, 15 * n // 100
    return shuffled[:n_train], shuffled[n_train : n_train + n_val], shuffled[n_train + n_val :]


def image_paths(root: str | Path) -> list[Path]:
    img_dir = Path(root) / "images"
    if not img_dir.is_dir():
        raise DataError(f"{root}: missing images/ directory")
    return sorted(p for p in img_dir.iterdir() if p.suffix in IMAGE_SUFFIXES)


def load_sample(path: Path, num_classes: int = 2) -> Sample:
    label_path = path.parent.parent / "labels" / (path.stem + ".txt")
    labels = []
    if label_path.exists():
        try:
            labels = parse_label_file(label_path.read_text(encoding="utf-8"), num_classes)
        except DataError as exc:
            raise DataError(f"{label_path}: {exc}") from None
    return Sample(load_image(path), labels, path)


def load_dataset(root: str | Path, num_classes: int = 2) -> list[Sample]:
    return [load_sample(p, num_classes) for p in image_paths(root)]


def synthetic_dataset(n: int, size: int = 64, seed: int = 0, num_classes: int = 2) -> list[Sample]:
    """Solid rectangles on uniform noise; the class selects the fill colour."""
    rng = np.random.default_rng(seed)
    colours = np.array([[0.9, 0.1, 0.1], [0.1, 0.9, 0.1], [0.1, 0.1, 0.9]], dtype=np.float32)
    samples = []
    for i in range(n):
        img = rng.uniform(0.3, 0.7, size=(1, 3, size, size)).astype(np.float32)
        labels = []
        for _ in range(int(rng.integers(1, 3))):
            cls = int(rng.integers(num_classes))
            bw, bh = (int(v) for v in rng.integers(size // 5, size // 2, size=2))
            x0 = int(rng.integers(0, size - bw))
            y0 = int(rng.integers(0, size - bh))
            img[0, :, y0 : y0 + bh, x0 : x0 + bw] = colours[cls % 3].reshape(3, 1, 1)
            labels.append(Label(cls, (x0 + bw / 2) / size, (y0 + bh / 2) / size, bw / size, bh / size))
        samples.append(Sample(Tensor(img), labels, Path(f"synthetic_{i:03d}.ppm")))
    return samples


def write_dataset(samples: Sequence[Sample], root: str | Path) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for k, s in enumerate(samples):
        stem = s.path.stem if s.path is not None else f"img_{k:04d}"
        save_image(s.image, root / "images" / f"{stem}.ppm")
        (root / "labels" / f"{stem}.txt").write_text(format_labels(s.labels), encoding="utf-8")


__all__ = [
    "DataError",
    "Label",
    "LetterboxTransform",
    "Sample",
    "draw_boxes",
    "format_labels",
    "labels_to_boxes",
    "letterbox",
    "load_dataset",
    "load_image",
    "parse_label_file",
    "save_image",
    "split_dataset",
    "synthetic_dataset",
    "write_dataset",
]
