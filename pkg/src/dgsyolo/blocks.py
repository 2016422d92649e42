"""Network building blocks: CBL, DGSM, DGST, SPP, detect head, ELAN baseline."""

from __future__ import annotations

import contextvars
import copy
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import ops
from .ops import ConvSpec
from .tensor import DTYPE, ShapeError, Tensor, _mac_counter

_trace: contextvars.ContextVar["list | None"] = contextvars.ContextVar("dgs_trace", default=None)


class Module:
    """Container of named tensors and child modules, in registration order.

    Registered entries are reachable as attributes (``self.weight``,
    ``self.bn``). Trainable tensors are parameters; running statistics are
    buffers. Both are part of checkpoints and parameter counts.
    """

    def __init__(self):
        self._slots = {}
        self.training = False
        self.trace_name = None

    def __getattr__(self, name):
        slots = self.__dict__.get("_slots")
        if slots is not None and name in slots:
            return slots[name][1]
        raise AttributeError(f"{type(self).__name__} has no attribute {name!r}")

    def add_param(self, name: str, array: np.ndarray) -> Tensor:
        t = Tensor(array, requires_grad=True, name=name)
        self._slots[name] = ("param", t)
        return t

    def add_buffer(self, name: str, array: np.ndarray) -> Tensor:
        t = Tensor(array, name=name)
        self._slots[name] = ("buffer", t)
        return t

    def add_child(self, name: str, module: "Module") -> "Module":
        self._slots[name] = ("child", module)
        return module

    def replace_child(self, name: str, module: "Module") -> None:
        kind, old = self._slots[name]
        if kind != "child":
            raise KeyError(f"{name!r} is not a child module")
        module.trace_name = old.trace_name
        self._slots[name] = ("child", module)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, (kind, obj) in self._slots.items():
            if kind == "child":
                yield name, obj

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, (kind, obj) in self._slots.items():
            full = f"{prefix}{name}"
            if kind == "child":
                yield from obj.named_tensors(full + ".")
            else:
                yield full, obj

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, (kind, obj) in self._slots.items():
            full = f"{prefix}{name}"
            if kind == "child":
                yield from obj.named_parameters(full + ".")
            elif kind == "param":
                yield full, obj

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def replace_tensor(self, path: str, tensor: Tensor) -> None:
        head, _, rest = path.partition(".")
        kind, obj = self._slots[head]
        if rest:
            obj.replace_tensor(rest, tensor)
        else:
            tensor.requires_grad = kind == "param"
            tensor.name = head
            self._slots[head] = (kind, tensor)

    def enumerated_params(self) -> int:
        return sum(t.size for _, t in self.named_tensors())

    def analytic_params(self) -> int:
        """Closed-form parameter count; leaves override, composites sum children."""
        return sum(m.analytic_params() for _, m in self.children())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, m in self.children():
            m.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        for _, t in self.named_tensors():
            t.data = t.data.astype(dtype)
        return self

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        trace = _trace.get()
        if trace is None or self.trace_name is None:
            return self.forward(*args, **kwargs)
        counter = _mac_counter.get()
        before = counter[0] if counter is not None else 0
        out = self.forward(*args, **kwargs)
        after = counter[0] if counter is not None else 0
        trace.append((self.trace_name, out.shape, self.analytic_params(), after - before))
        return out


class tracing:
    """Collect ``(layer, output shape, params, MACs)`` rows for named layers."""

    def __enter__(self) -> list:
        self.rows: list = []
        self._token = _trace.set(self.rows)
        return self.rows

    def __exit__(self, *exc) -> None:
        _trace.reset(self._token)


def _he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(DTYPE)


# ---------------------------------------------------------------------------
# leaves


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        fan_in = (spec.in_channels // spec.groups) * spec.kernel**2
        self.add_param("weight", _he_normal(rng, spec.weight_shape, fan_in))
        if spec.has_bias:
            self.add_param("bias", np.zeros(spec.out_channels, dtype=DTYPE))

    def analytic_params(self) -> int:
        return self.spec.param_count

    @classmethod
    def from_arrays(cls, spec: ConvSpec, weight: np.ndarray, bias: np.ndarray | None) -> "Conv2d":
        conv = cls.__new__(cls)
        Module.__init__(conv)
        conv.spec = spec
        conv.add_param("weight", weight).data = weight  # keep the caller's dtype
        if spec.has_bias:
            conv.add_param("bias", bias).data = bias
        return conv

    def forward(self, x):
        b = self.bias if self.spec.has_bias else None
        return ops.conv2d(x, self.weight, b, self.spec.stride, self.spec.groups)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = ops.BN_MOMENTUM, eps: float = ops.BN_EPS):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.add_param("gamma", np.ones(channels, dtype=DTYPE))
        self.add_param("beta", np.zeros(channels, dtype=DTYPE))
        self.add_buffer("running_mean", np.zeros(channels, dtype=DTYPE))
        self.add_buffer("running_var", np.ones(channels, dtype=DTYPE))

    def analytic_params(self) -> int:
        return 4 * self.channels

    def forward(self, x):
        rm, rv = self.running_mean, self.running_var
        y, mu, var = ops.batchnorm(x, self.gamma, self.beta, rm.data, rv.data, self.eps, self.training)
        if self.training:
            m = self.momentum
            rm.data = ((1 - m) * rm.data + m * mu).astype(rm.data.dtype)
            rv.data = ((1 - m) * rv.data + m * var).astype(rv.data.dtype)
        return y


class LayerNorm2d(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.add_param("gamma", np.ones(channels, dtype=DTYPE))
        self.add_param("beta", np.zeros(channels, dtype=DTYPE))

    def analytic_params(self) -> int:
        return 2 * self.channels

    def forward(self, x):
        return ops.layernorm_channels(x, self.gamma, self.beta)


class ConvBNAct(Module):
    """Bias-free conv, batchnorm, then leaky ReLU (optional).

    With ``shuffle`` set, a channel shuffle over the conv groups follows, so
    grouped convs in the neck still exchange information across groups.
    """

    def __init__(
        self,
        cin: int,
        cout: int,
        k: int = 1,
        stride: int = 1,
        groups: int = 1,
        act: bool = True,
        shuffle: bool = False,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        spec = ConvSpec(cin, cout, k, stride, groups, has_bias=False)
        self.spec = spec
        self.act = act
        self.shuffle = shuffle and groups > 1
        self.add_child("conv", Conv2d(spec, rng))
        self.add_child("bn", BatchNorm2d(cout))

    def forward(self, x):
        y = self.bn(self.conv(x))
        if self.act:
            y = ops.leaky_relu(y)
        if self.shuffle:
            y = ops.channel_shuffle(y, self.spec.groups)
        return y


# ---------------------------------------------------------------------------
# DGSM


@dataclass(frozen=True)
class DgsmConfig:
    channels: int
    n_blocks: int = 1
    downsample: bool = True
    pw_groups: int = 2

    def __post_init__(self):
        if self.channels % 4:
            raise ShapeError(f"DGSM channels must be a multiple of 4, got {self.channels}")
        if self.n_blocks < 1:
            raise ShapeError(f"DGSM needs at least one block, got {self.n_blocks}")
        if (self.channels // 2) % self.pw_groups:
            raise ShapeError(f"DGSM branch width {self.channels // 2} not divisible by pw_groups={self.pw_groups}")


class DgsmBlock(Module):
    """Split/transform/merge unit with grouped pointwise convs and channel shuffle.

    stride 1: half the channels pass through untouched, the other half go
    through pw-group -> depthwise -> pw-group; concat then shuffle(2).
    stride 2: both halves are computed from the full input and downsampled.
    """

    def __init__(self, cin: int, cfg: DgsmConfig, stride: int, rng: np.random.Generator):
        super().__init__()
        c, g = cfg.channels, cfg.pw_groups
        b = c // 2
        self.stride = stride
        self.cin = cin
        self.cfg = cfg
        if stride == 1:
            if cin != c:
                raise ShapeError(f"stride-1 DGSM block needs {c} input channels, got {cin}")
            self.add_child("pw1", ConvBNAct(b, b, 1, groups=g, rng=rng))
            self.add_child("dw", ConvBNAct(b, b, 3, groups=b, act=False, rng=rng))
            self.add_child("pw2", ConvBNAct(b, b, 1, groups=g, rng=rng))
        elif stride == 2:
            if cin % g:
                raise ShapeError(f"DGSM input channels {cin} not divisible by pw_groups={g}")
            self.add_child("a_dw", ConvBNAct(cin, cin, 3, 2, groups=cin, act=False, rng=rng))
            self.add_child("a_pw", ConvBNAct(cin, b, 1, rng=rng))
            self.add_child("pw1", ConvBNAct(cin, b, 1, groups=g, rng=rng))
            self.add_child("dw", ConvBNAct(b, b, 3, 2, groups=b, act=False, rng=rng))
            self.add_child("pw2", ConvBNAct(b, b, 1, groups=g, rng=rng))
        else:
            raise ShapeError(f"DGSM stride must be 1 or 2, got {stride}")

    def forward(self, x):
        if x.shape[1] != self.cin:
            raise ShapeError(f"DGSM block expects {self.cin} channels, got {x.shape[1]}")
        if self.stride == 1:
            half = self.cfg.channels // 2
            a, b = ops.channel_split(x, [half, half])
        else:
            a = self.a_pw(self.a_dw(x))
            b = x
        b = self.pw2(self.dw(self.pw1(b)))
        return ops.channel_shuffle(ops.concat([a, b]), 2)


class DgsmStage(Module):
    """Entry block (stride 2 when downsampling) followed by N-1 stride-1 blocks."""

    def __init__(self, cin: int, cfg: DgsmConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        blocks = [DgsmBlock(cin, cfg, 2 if cfg.downsample else 1, rng)]
        blocks += [DgsmBlock(cfg.channels, cfg, 1, rng) for _ in range(cfg.n_blocks - 1)]
        for i, blk in enumerate(blocks):
            self.add_child(f"block{i}", blk)
        self.blocks = blocks

    def forward(self, x):
        for blk in self.blocks:
            x = blk(x)
        return x


# ---------------------------------------------------------------------------
# DGST


def auto_heads(dim: int, max_head_dim: int = 32) -> int:
    heads = max(1, -(-dim // max_head_dim))
    while dim % heads:
        heads += 1
    return heads


@dataclass(frozen=True)
class DgstConfig:
    channels: int
    heads: int | None = None
    mlp_ratio: int = 2
    pw_groups: int = 2
    pos_encoding: bool = True

    @property
    def attn_channels(self) -> int:
        return self.channels // 4

    @property
    def conv_channels(self) -> int:
        return self.channels - self.attn_channels

    @property
    def n_heads(self) -> int:
        return self.heads if self.heads is not None else auto_heads(self.attn_channels)

    def __post_init__(self):
        if self.channels % 4 or self.channels <= 0:
            raise ShapeError(f"DGST channels must be a positive multiple of 4, got {self.channels}")
        if self.attn_channels % self.n_heads:
            raise ShapeError(f"{self.n_heads} heads do not divide attention width {self.attn_channels}")
        if self.conv_channels % self.pw_groups or self.conv_channels % 2:
            raise ShapeError(
                f"DGST conv width {self.conv_channels} not divisible by pw_groups={self.pw_groups} and 2"
            )


def sincos_2d(channels: int, h: int, w: int) -> np.ndarray:
    """Fixed 2-D sinusoidal encoding, shape (channels, h, w).

    The first half of the channels encodes the row index, the rest the
    column index, as interleaved sin/cos pairs of geometric frequencies.
    """
    out = np.zeros((channels, h, w), dtype=np.float64)
    rows = channels // 2
    for part, (n, pos) in enumerate(((rows, np.arange(h)), (channels - rows, np.arange(w)))):
        base = 0 if part == 0 else rows
        for k in range(n):
            freq = 1.0 / 10000 ** (2 * (k // 2) / max(n, 1))
            wave = np.sin(pos * freq) if k % 2 == 0 else np.cos(pos * freq)
            if part == 0:
                out[base + k] = wave[:, None]
            else:
                out[base + k] = wave[None, :]
    return out


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over the h*w positions of NCHW maps.

    Returns the attended map (same shape as ``v``) and the softmax weights
    of shape (n, heads, queries, keys).
    """
    n, c, h, w = q.shape
    if c % heads:
        raise ShapeError(f"{heads} heads do not divide {c} channels")
    hd, L = c // heads, h * w
    # scaling q is cheaper than scaling the L x L score matrix
    q4 = ops.reshape(ops.scale(q, 1.0 / math.sqrt(hd)), (n, heads, hd, L))
    k4 = ops.reshape(k, (n, heads, hd, L))
    v4 = ops.reshape(v, (n, heads, hd, L))
    weights = ops.softmax_lastdim(ops.matmul(q4, k4, trans_a=True))
    out = ops.matmul(v4, weights, trans_b=True)
    return ops.reshape(out, (n, c, h, w)), weights


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.heads = heads
        for name in ("q", "k", "v", "proj"):
            self.add_child(name, Conv2d(ConvSpec(dim, dim, 1, has_bias=True), rng))

    def forward(self, x, return_weights: bool = False):
        out, weights = attend(self.q(x), self.k(x), self.v(x), self.heads)
        out = self.proj(out)
        return (out, weights) if return_weights else out


class AttentionPath(Module):
    """Pre-norm transformer layer whose projections are 1x1 convolutions."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, pos_encoding: bool, rng: np.random.Generator):
        super().__init__()
        self.pos_encoding = pos_encoding
        self.add_child("ln1", LayerNorm2d(dim))
        self.add_child("attn", MultiHeadSelfAttention(dim, heads, rng))
        self.add_child("ln2", LayerNorm2d(dim))
        self.add_child("fc1", Conv2d(ConvSpec(dim, dim * mlp_ratio, 1, has_bias=True), rng))
        self.add_child("fc2", Conv2d(ConvSpec(dim * mlp_ratio, dim, 1, has_bias=True), rng))

    def forward(self, x):
        if self.pos_encoding:
            n, c, h, w = x.shape
            pe = np.broadcast_to(sincos_2d(c, h, w).astype(x.dtype), x.shape)
            x = ops.add(x, Tensor(pe, dtype=x.dtype))
        x = ops.add(x, self.attn(self.ln1(x)))
        return ops.add(x, self.fc2(ops.silu(self.fc1(self.ln2(x)))))


class DgstBlock(Module):
    """3:1 channel split between a grouped-conv path and an attention path.

    The paths are concatenated, shuffled with 4 groups (so every run of 4
    output channels holds exactly one attention channel) and added to the
    block input.
    """

    def __init__(self, cfg: DgstConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        cc, g = cfg.conv_channels, cfg.pw_groups
        self.add_child("pw1", ConvBNAct(cc, cc, 1, groups=g, rng=rng))
        self.add_child("dw", ConvBNAct(cc, cc, 3, groups=cc, act=False, rng=rng))
        self.add_child("pw2", ConvBNAct(cc, cc, 1, groups=g, rng=rng))
        attn = self.add_child(
            "attn_path", AttentionPath(cfg.attn_channels, cfg.n_heads, cfg.mlp_ratio, cfg.pos_encoding, rng)
        )
        # residual branches start at zero so a fresh block is close to identity
        self.pw2.bn.gamma.data[:] = 0
        attn.attn.proj.weight.data[:] = 0
        attn.fc2.weight.data[:] = 0

    def forward(self, x):
        if x.shape[1] != self.cfg.channels:
            raise ShapeError(f"DGST block expects {self.cfg.channels} channels, got {x.shape[1]}")
        xc, xa = ops.channel_split(x, [self.cfg.conv_channels, self.cfg.attn_channels])
        yc = ops.channel_shuffle(self.pw2(self.dw(self.pw1(xc))), 2)
        ya = self.attn_path(xa)
        return ops.add(ops.channel_shuffle(ops.concat([yc, ya]), 4), x)


# ---------------------------------------------------------------------------
# SPP, head, ELAN


class SPP(Module):
    """concat(x, maxpool 5/9/13) projected back to the input width."""

    POOLS = (5, 9, 13)

    def __init__(self, channels: int, groups: int = 1, rng: np.random.Generator | None = None):
        super().__init__()
        self.add_child("proj", ConvBNAct(4 * channels, channels, 1, groups=groups, shuffle=True, rng=rng))

    def forward(self, x):
        return self.proj(ops.concat([x] + [ops.maxpool(x, k, 1) for k in self.POOLS]))


class DetectHead(Module):
    """1x1 prediction conv emitting ``num_anchors * (5 + num_classes)`` channels.

    With ``stride`` given, the conv starts from zero weights and prior
    biases: objectness log(8 / cells) for a 640 px image and class
    log(0.6 / (nc - 0.99)). An untrained head then scores every cell
    near 0.007 and proposes nothing at the usual thresholds.
    """

    def __init__(self, cin: int, num_anchors: int, num_classes: int, rng: np.random.Generator,
                 stride: int | None = None):
        super().__init__()
        self.num_anchors = num_anchors
        self.num_classes = num_classes
        out = num_anchors * (5 + num_classes)
        conv = self.add_child("conv", Conv2d(ConvSpec(cin, out, 1, has_bias=True), rng))
        if stride is not None:
            conv.weight.data[:] = 0
            bias = np.zeros((num_anchors, 5 + num_classes))
            bias[:, 4] = math.log(8 / (640 / stride) ** 2)
            bias[:, 5:] = math.log(0.6 / (num_classes - 0.99))
            conv.bias.data = bias.reshape(-1).astype(DTYPE)

    def forward(self, x):
        return self.conv(x)


class ElanBlock(Module):
    """YOLOv7-tiny style aggregation block used by the baseline variants."""

    def __init__(self, cin: int, mid: int, cout: int, rng: np.random.Generator):
        super().__init__()
        self.add_child("cv1", ConvBNAct(cin, mid, 1, rng=rng))
        self.add_child("cv2", ConvBNAct(cin, mid, 1, rng=rng))
        self.add_child("cv3", ConvBNAct(mid, mid, 3, rng=rng))
        self.add_child("cv4", ConvBNAct(mid, mid, 3, rng=rng))
        self.add_child("out", ConvBNAct(4 * mid, cout, 1, rng=rng))

    def forward(self, x):
        x1 = self.cv1(x)
        x2 = self.cv2(x)
        x3 = self.cv3(x2)
        x4 = self.cv4(x3)
        return self.out(ops.concat([x4, x3, x2, x1]))


class ElanStage(Module):
    def __init__(self, cin: int, cout: int, downsample: bool, rng: np.random.Generator):
        super().__init__()
        self.downsample = downsample
        self.add_child("elan", ElanBlock(cin, cout // 2, cout, rng))

    def forward(self, x):
        if self.downsample:
            x = ops.maxpool(x, 2, 2)
        return self.elan(x)


def _walk(module: Module) -> Iterator[Module]:
    yield module
    for _, child in module.children():
        yield from _walk(child)


def fold_batchnorm(module: Module) -> Module:
    """Eval-only copy with each conv + batchnorm pair merged into one biased conv.

    Outputs match the original in eval mode up to float32 rounding. The copy
    is for inference and timing; its tensor layout no longer matches checkpoints.
    """
    folded = copy.deepcopy(module).eval()
    for m in _walk(folded):
        if not (isinstance(m, ConvBNAct) and isinstance(m.bn, BatchNorm2d)):
            continue
        bn, spec = m.bn, m.conv.spec
        scale = bn.gamma.data.astype(np.float64) / np.sqrt(bn.running_var.data.astype(np.float64) + bn.eps)
        weight = m.conv.weight.data * scale.reshape(-1, 1, 1, 1)
        bias = bn.beta.data - bn.running_mean.data * scale
        dtype = m.conv.weight.data.dtype
        fused_spec = ConvSpec(spec.in_channels, spec.out_channels, spec.kernel, spec.stride, spec.groups, True)
        m.replace_child("conv", Conv2d.from_arrays(fused_spec, weight.astype(dtype), bias.astype(dtype)))
        m.replace_child("bn", Identity())
    return folded


class Identity(Module):
    def analytic_params(self) -> int:
        return 0

    def forward(self, x):
        return x
