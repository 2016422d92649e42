"""Detector assembly: stem, backbone stages, PAN-style neck and detect heads.

Also parameter/MAC accounting, the key-value model config file and the
binary checkpoint format::

    b"DGSD0001"                 8-byte magic
    uint64 little-endian        manifest length in bytes
    manifest                    UTF-8 text, one record per line
    blob                        raw little-endian float32 values

Manifest lines are space-separated ``key=value`` fields. The first field
names the record kind::

    kind=header endian=little dtype=f32 count=<elements>
    kind=config key=<field> value=<text>
    kind=tensor name=<dotted.name> shape=<d0>x<d1>... offset=<byte offset>
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import ops
from .blocks import (
    SPP,
    ConvBNAct,
    DetectHead,
    DgsmConfig,
    DgsmStage,
    DgstBlock,
    DgstConfig,
    ElanBlock,
    ElanStage,
    Module,
    tracing,
)
from .tensor import ShapeError, Tensor, count_macs_scope

MAGIC = b"DGSD0001"

DEFAULT_ANCHORS = {
    8: ((10, 13), (16, 30), (33, 23)),
    16: ((30, 61), (62, 45), (59, 119)),
    32: ((116, 90), (156, 198), (373, 326)),
}
STAGE_STRIDES = (4, 8, 16, 32)


class ConfigError(ValueError):
    """Invalid model configuration or config file."""


class CheckpointError(ValueError):
    """Malformed checkpoint or checkpoint/graph mismatch."""


@dataclass(frozen=True)
class ModelConfig:
    stages: tuple[tuple[int, int], ...] = ((2, 64), (3, 128), (4, 256), (2, 512))
    num_classes: int = 2
    strides: tuple[int, ...] = (16, 32)
    anchors: tuple[tuple[tuple[float, float], ...], ...] = (DEFAULT_ANCHORS[16], DEFAULT_ANCHORS[32])
    input_size: tuple[int, int] = (640, 640)
    backbone: str = "dgsm"
    neck: str = "dgst"
    pw_groups: int = 2
    neck_groups: int = 2
    mlp_ratio: int = 2
    pos_encoding: bool = True
    stem_channels: tuple[int, int] = (32, 64)

    def __post_init__(self):
        if len(self.stages) != 4:
            raise ConfigError(f"expected 4 backbone stages, got {len(self.stages)}")
        for n, c in self.stages:
            if n < 1 or c % 4:
                raise ConfigError(f"stage (N={n}, C={c}) needs N >= 1 and C divisible by 4")
        if self.stages[0][1] != self.stem_channels[1]:
            raise ConfigError("stage 1 runs at stride 4 without downsampling; its width must equal the stem output")
        if len(self.anchors) != len(self.strides) or len(self.strides) not in (2, 3):
            raise ConfigError("need 2 or 3 strides with one anchor set each")
        if tuple(self.strides) != STAGE_STRIDES[4 - len(self.strides) :]:
            raise ConfigError(f"strides must be the deepest levels {STAGE_STRIDES[1:]}, got {self.strides}")
        for a in self.anchors:
            if len(a) != 3 or any(w <= 0 or h <= 0 for w, h in a):
                raise ConfigError("each head takes 3 positive (w, h) anchors")
        if self.backbone not in ("dgsm", "elan") or self.neck not in ("dgst", "elan"):
            raise ConfigError(f"unknown backbone/neck {self.backbone}/{self.neck}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if any(s % 32 for s in self.input_size):
            raise ConfigError(f"input size {self.input_size} must be divisible by 32")

    @property
    def num_anchors(self) -> int:
        return 3

    @property
    def head_channels(self) -> int:
        return self.num_anchors * (5 + self.num_classes)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        """Named variants of the efficiency comparison."""
        three = dict(strides=(8, 16, 32), anchors=tuple(DEFAULT_ANCHORS[s] for s in (8, 16, 32)))
        table = {
            "dgst-dgsm": {},
            "dgsm": dict(neck="elan", neck_groups=1, **three),
            "dgst": dict(backbone="elan"),
            "baseline": dict(backbone="elan", neck="elan", neck_groups=1, **three),
            "dgst-dgsm-3head": three,
        }
        if name not in table:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(table)}")
        return cls(**{**table[name], **overrides})


# ---------------------------------------------------------------------------
# config file


def _fmt(name: str, value) -> str:
    if name == "stages":
        return " ".join(f"{n}x{c}" for n, c in value)
    if name == "anchors":
        return " | ".join(" ".join(f"{_num(w)},{_num(h)}" for w, h in level) for level in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return " ".join(str(v) for v in value)
    return str(value)


def _num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def _parse(name: str, text: str):
    text = text.strip()
    try:
        if name == "stages":
            return tuple(tuple(int(p) for p in tok.split("x")) for tok in text.split())
        if name == "anchors":
            return tuple(
                tuple(tuple(float(v) for v in pair.split(",")) for pair in level.split())
                for level in text.split("|")
            )
        if name in ("strides", "input_size", "stem_channels"):
            return tuple(int(v) for v in text.replace(",", " ").split())
        if name == "pos_encoding":
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if name in ("backbone", "neck"):
            return text
        return int(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r}") from exc


def dump_config(cfg: ModelConfig) -> str:
    return "".join(f"{f.name} = {_fmt(f.name, getattr(cfg, f.name))}\n" for f in fields(cfg))


def parse_config(text: str) -> ModelConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. ``preset`` selects a base."""
    names = {f.name for f in fields(ModelConfig)}
    values, preset = {}, "dgst-dgsm"
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key == "preset":
            preset = val.strip()
        elif key in names:
            values[key] = _parse(key, val)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    return ModelConfig.preset(preset, **values)


def load_config(path: str | Path) -> ModelConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# graph


class Model(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        s0, s1 = cfg.stem_channels
        self._layer("stem0", ConvBNAct(3, s0, 3, 2, rng=rng))
        self._layer("stem1", ConvBNAct(s0, s1, 3, 2, rng=rng))

        widths, cin = [], s1
        for i, (n, c) in enumerate(cfg.stages):
            if cfg.backbone == "dgsm":
                stage = DgsmStage(cin, DgsmConfig(c, n, downsample=i > 0, pw_groups=cfg.pw_groups), rng)
            else:
                stage = ElanStage(cin, c, downsample=i > 0, rng=rng)
            self._layer(f"stage{i + 1}", stage)
            widths.append(c)
            cin = c
        self.stage_widths = widths

        levels = [STAGE_STRIDES.index(s) for s in cfg.strides]
        self.levels = levels
        g = cfg.neck_groups
        top = levels[-1]
        self._layer("spp", SPP(widths[top], groups=g, rng=rng))
        self._layer(f"td{top}", self._neck_block(widths[top], rng))
        for lvl in reversed(levels[:-1]):
            c = widths[lvl]
            self._layer(f"td{lvl}_fuse", ConvBNAct(widths[lvl + 1] + c, c, 1, groups=g, shuffle=True, rng=rng))
            self._layer(f"td{lvl}", self._neck_block(c, rng))
        for lvl in levels[1:]:
            c, below = widths[lvl], widths[lvl - 1]
            self._layer(f"bu{lvl}_down", ConvBNAct(below, below, 3, 2, groups=g, shuffle=True, rng=rng))
            self._layer(f"bu{lvl}_fuse", ConvBNAct(below + c, c, 1, groups=g, shuffle=True, rng=rng))
            self._layer(f"bu{lvl}", self._neck_block(c, rng))
        for lvl, s in zip(levels, cfg.strides):
            self._layer(f"head{s}", DetectHead(widths[lvl], cfg.num_anchors, cfg.num_classes, rng, stride=s))

    def _layer(self, name: str, module: Module) -> None:
        module.trace_name = name
        self.add_child(name, module)

    def _neck_block(self, c: int, rng) -> Module:
        cfg = self.cfg
        if cfg.neck == "dgst":
            return DgstBlock(DgstConfig(c, mlp_ratio=cfg.mlp_ratio, pw_groups=cfg.pw_groups,
                                        pos_encoding=cfg.pos_encoding), rng)
        return ElanBlock(c, c // 4, c, rng)

    def weight_dtype(self) -> np.dtype:
        return self.stem0.conv.weight.dtype

    @property
    def heads(self) -> list[DetectHead]:
        return [getattr(self, f"head{s}") for s in self.cfg.strides]

    def forward(self, x: Tensor) -> list[Tensor]:
        if x.data.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"model expects (n, 3, h, w) input, got {x.shape}")
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise ShapeError(f"input spatial size {x.shape[2:]} must be divisible by 32")
        x = self.stem1(self.stem0(x))
        feats = []
        for i in range(4):
            x = getattr(self, f"stage{i + 1}")(x)
            feats.append(x)

        levels = self.levels
        top = levels[-1]
        td = {top: getattr(self, f"td{top}")(self.spp(feats[top]))}
        for lvl in reversed(levels[:-1]):
            up = ops.upsample_nearest(td[lvl + 1], 2)
            fused = getattr(self, f"td{lvl}_fuse")(ops.concat([up, feats[lvl]]))
            td[lvl] = getattr(self, f"td{lvl}")(fused)
        out = {levels[0]: td[levels[0]]}
        for lvl in levels[1:]:
            down = getattr(self, f"bu{lvl}_down")(out[lvl - 1])
            fused = getattr(self, f"bu{lvl}_fuse")(ops.concat([down, td[lvl]]))
            out[lvl] = getattr(self, f"bu{lvl}")(fused)
        return [getattr(self, f"head{s}")(out[lvl]) for lvl, s in zip(levels, self.cfg.strides)]


def build_model(cfg: ModelConfig | None = None, seed: int = 0) -> Model:
    return Model(cfg or ModelConfig(), seed)


# ---------------------------------------------------------------------------
# accounting


@dataclass
class LayerRow:
    name: str
    out_shape: tuple[int, ...]
    params: int
    macs: int


@dataclass
class ParamReport:
    total: int
    layers: list[tuple[str, int, int]] = field(default_factory=list)  # (name, analytic, enumerated)


def count_params(model: Module) -> ParamReport:
    layers = [(name, m.analytic_params(), m.enumerated_params()) for name, m in model.children()]
    return ParamReport(sum(a for _, a, _ in layers), layers)


def summarize(model: Model, input_size: tuple[int, int] | None = None) -> list[LayerRow]:
    """Run a traced forward pass on zeros and return one row per top-level layer."""
    h, w = input_size or model.cfg.input_size
    x = Tensor(np.zeros((1, 3, h, w), dtype=model.weight_dtype()))
    with count_macs_scope(), tracing() as rows:
        model(x)
    return [LayerRow(*r) for r in rows]


def count_macs(model: Model, input_size: tuple[int, int] | None = None) -> int:
    h, w = input_size or model.cfg.input_size
    x = Tensor(np.zeros((1, 3, h, w), dtype=model.weight_dtype()))
    with count_macs_scope() as counter:
        model(x)
    return counter[0]


# ---------------------------------------------------------------------------
# checkpoint


def save_checkpoint(model: Model, path: str | Path) -> None:
    lines = [f"kind=header endian=little dtype=f32 count={model.enumerated_params()}"]
    for f in fields(model.cfg):
        value = _fmt(f.name, getattr(model.cfg, f.name)).replace(" ", "_")
        lines.append(f"kind=config key={f.name} value={value}")
    chunks, offset = [], 0
    for name, t in model.named_tensors():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        shape = "x".join(str(d) for d in arr.shape)
        lines.append(f"kind=tensor name={name} shape={shape} offset={offset}")
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for c in chunks:
            fh.write(c)


def _read_manifest(raw: bytes) -> tuple[dict, dict, list, int]:
    if raw[:8] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:8]!r}, expected {MAGIC!r}")
    if len(raw) < 16:
        raise CheckpointError("truncated checkpoint header")
    (mlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + mlen > len(raw):
        raise CheckpointError("truncated checkpoint manifest")
    header, config, tensors = {}, {}, []
    for lineno, line in enumerate(raw[16 : 16 + mlen].decode("utf-8").splitlines(), 1):
        if not line.strip():
            continue
        rec = dict(tok.split("=", 1) for tok in line.split())
        kind = rec.pop("kind", None)
        if kind == "header":
            header = rec
        elif kind == "config":
            config[rec["key"]] = rec["value"].replace("_", " ")
        elif kind == "tensor":
            tensors.append(rec)
        else:
            raise CheckpointError(f"manifest line {lineno}: unknown record kind {kind!r}")
    return header, config, tensors, 16 + mlen


def load_checkpoint(path: str | Path, cfg: ModelConfig | None = None) -> Model:
    """Load weights, validating names and shapes against the built graph.

    The graph is built from ``cfg`` when given, else from the config
    embedded in the checkpoint.
    """
    raw = Path(path).read_bytes()
    header, config, records, blob_start = _read_manifest(raw)
    if header.get("endian") != "little":
        raise CheckpointError(f"endian marker {header.get('endian')!r} is not 'little'")
    if header.get("dtype") != "f32":
        raise CheckpointError(f"unsupported dtype {header.get('dtype')!r}")
    if cfg is None:
        try:
            cfg = ModelConfig(**{k: _parse(k, v) for k, v in config.items()})
        except (ConfigError, TypeError) as exc:
            raise CheckpointError(f"embedded config invalid: {exc}") from exc
    model = build_model(cfg)
    by_name = {r["name"]: r for r in records}
    blob = memoryview(raw)[blob_start:]
    expected = dict(model.named_tensors())
    for name in by_name:
        if name not in expected:
            raise CheckpointError(f"unexpected tensor {name!r} in checkpoint")
    for name, t in expected.items():
        rec = by_name.get(name)
        if rec is None:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        shape = tuple(int(d) for d in rec["shape"].split("x")) if rec["shape"] else ()
        if shape != t.shape:
            raise CheckpointError(f"tensor {name!r}: checkpoint shape {shape} != graph shape {t.shape}")
        start = int(rec["offset"])
        nbytes = 4 * int(np.prod(shape))
        if start + nbytes > len(blob):
            raise CheckpointError(f"truncated blob while reading tensor {name!r}")
        t.data = np.frombuffer(blob[start : start + nbytes], dtype="<f4").astype(np.float32).reshape(shape)
    return model


def zero_model(model: Model) -> Model:
    for _, t in model.named_tensors():
        t.data = np.zeros_like(t.data)
    return model


__all__ = [
    "CheckpointError",
    "ConfigError",
    "Model",
    "ModelConfig",
    "build_model",
    "count_macs",
    "count_params",
    "dump_config",
    "load_checkpoint",
    "load_config",
    "parse_config",
    "save_checkpoint",
    "summarize",
    "zero_model",
]
