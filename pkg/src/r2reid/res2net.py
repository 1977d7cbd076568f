"""Res2Net bottleneck block, the plain bottleneck it reduces to, and the
toy backbone that ends in the pooled descriptor."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import ConfigError, DivisibilityError, ShapeError
from .tensor import (
    BatchNormParams,
    ConvParams,
    LinearParams,
    avg_pool2d,
    avg_pool2d_backward,
    batchnorm,
    batchnorm_backward,
    channel_concat,
    channel_split,
    conv2d,
    conv2d_backward,
    global_avg_pool,
    global_avg_pool_backward,
    relu,
    relu_backward,
)


def _conv(rng: np.random.Generator, cin: int, cout: int, k: int, stride: int = 1, dtype=np.float32) -> ConvParams:
    std = np.sqrt(2.0 / (cin * k * k))
    weight = (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)
    return ConvParams(weight, np.zeros(cout, dtype=dtype), stride=stride, padding=k // 2)


def _prefixed(prefix: str, mapping: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in mapping.items()}


# --------------------------------------------------------------------------
# block


def num_group_convs(scale: int, first_split_conv: bool = False) -> int:
    if scale == 1 or first_split_conv:
        return scale
    return scale - 1


@dataclass
class Res2NetBlockParams:
    reduce: ConvParams
    reduce_bn: BatchNormParams
    group_convs: list[ConvParams]
    group_bns: list[BatchNormParams]
    expand: ConvParams
    expand_bn: BatchNormParams
    scale: int
    stride: int = 1
    shortcut: ConvParams | None = None
    shortcut_bn: BatchNormParams | None = None
    first_split_conv: bool = False

    def __post_init__(self):
        n = self.reduce.out_channels
        if self.scale < 1 or n % self.scale:
            raise DivisibilityError(f"scale {self.scale} does not divide bottleneck width {n}")
        w = n // self.scale
        expected = num_group_convs(self.scale, self.first_split_conv)
        if len(self.group_convs) != expected or len(self.group_bns) != expected:
            raise ConfigError(f"scale {self.scale} needs {expected} group convs, got {len(self.group_convs)}")
        for conv in self.group_convs:
            if conv.weight.shape != (w, w, 3, 3) or conv.stride != self.stride:
                raise ShapeError(f"group conv {conv.weight.shape}/stride {conv.stride} != ({w}, {w}, 3, 3)/{self.stride}")
        if self.expand.in_channels != n:
            raise ShapeError(f"expand takes {self.expand.in_channels} channels, bottleneck has {n}")
        needs_proj = self.in_channels != self.out_channels or self.stride > 1
        if needs_proj and self.shortcut is None:
            raise ConfigError("projection shortcut required when channels or resolution change")

    @property
    def in_channels(self) -> int:
        return self.reduce.in_channels

    @property
    def out_channels(self) -> int:
        return self.expand.out_channels

    @property
    def width(self) -> int:
        return self.reduce.out_channels // self.scale

    def _passthrough(self, i: int) -> bool:
        return i == 0 and self.scale > 1 and not self.first_split_conv

    def arrays(self) -> dict[str, np.ndarray]:
        out = _prefixed("reduce", self.reduce.arrays()) | _prefixed("reduce_bn", self.reduce_bn.arrays())
        for k, (conv, bn) in enumerate(zip(self.group_convs, self.group_bns)):
            out |= _prefixed(f"group_convs.{k}", conv.arrays()) | _prefixed(f"group_bns.{k}", bn.arrays())
        out |= _prefixed("expand", self.expand.arrays()) | _prefixed("expand_bn", self.expand_bn.arrays())
        if self.shortcut is not None:
            out |= _prefixed("shortcut", self.shortcut.arrays()) | _prefixed("shortcut_bn", self.shortcut_bn.arrays())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        bns = {"reduce_bn": self.reduce_bn, "expand_bn": self.expand_bn}
        bns |= {f"group_bns.{k}": bn for k, bn in enumerate(self.group_bns)}
        if self.shortcut_bn is not None:
            bns["shortcut_bn"] = self.shortcut_bn
        out = {}
        for name, bn in bns.items():
            out |= _prefixed(name, bn.buffers())
        return out


def init_block(
    rng: np.random.Generator,
    in_channels: int,
    out_channels: int,
    bottleneck: int,
    scale: int,
    stride: int = 1,
    first_split_conv: bool = False,
    dtype=np.float32,
) -> Res2NetBlockParams:
    if scale < 1 or bottleneck % scale:
        raise DivisibilityError(f"scale {scale} does not divide bottleneck width {bottleneck}")
    w = bottleneck // scale
    k = num_group_convs(scale, first_split_conv)
    shortcut = shortcut_bn = None
    reduce = _conv(rng, in_channels, bottleneck, 1, dtype=dtype)
    group_convs = [_conv(rng, w, w, 3, stride, dtype=dtype) for _ in range(k)]
    expand = _conv(rng, bottleneck, out_channels, 1, dtype=dtype)
    if in_channels != out_channels or stride > 1:
        shortcut = _conv(rng, in_channels, out_channels, 1, stride, dtype=dtype)
        shortcut_bn = BatchNormParams.fresh(out_channels, dtype)
    return Res2NetBlockParams(
        reduce=reduce,
        reduce_bn=BatchNormParams.fresh(bottleneck, dtype),
        group_convs=group_convs,
        group_bns=[BatchNormParams.fresh(w, dtype) for _ in range(k)],
        expand=expand,
        expand_bn=BatchNormParams.fresh(out_channels, dtype),
        scale=scale,
        stride=stride,
        shortcut=shortcut,
        shortcut_bn=shortcut_bn,
        first_split_conv=first_split_conv,
    )


def _shortcut_forward(x, p: Res2NetBlockParams, train: bool):
    if p.shortcut is None:
        return x, None
    s = conv2d(x, p.shortcut)
    sb, cache = batchnorm(s, p.shortcut_bn, train)
    return sb, cache


def res2net_block(x: np.ndarray, p: Res2NetBlockParams, train: bool = False):
    """Forward pass of one block. Returns ``(out, cache)``.

    reduce 1x1 -> split into ``scale`` groups -> hierarchical 3x3 convs
    (each group sees its own input plus the previous group's output) ->
    concat -> expand 1x1 -> add shortcut -> ReLU.
    """
    if x.ndim != 4 or x.shape[1] != p.in_channels:
        raise ShapeError(f"block expects {p.in_channels} input channels, got input {x.shape}")
    z_pre = conv2d(x, p.reduce)
    z_bn, c_reduce = batchnorm(z_pre, p.reduce_bn, train)
    z = relu(z_bn)
    splits = channel_split(z, p.scale)

    ys, groups = [], []
    k = 0
    for i, xi in enumerate(splits):
        if p._passthrough(i):
            ys.append(xi if p.stride == 1 else avg_pool2d(xi))
            groups.append(None)
            continue
        inp = xi + ys[-1] if (ys and p.stride == 1) else xi
        h = conv2d(inp, p.group_convs[k])
        hb, c_bn = batchnorm(h, p.group_bns[k], train)
        ys.append(relu(hb))
        groups.append((k, inp, hb, c_bn))
        k += 1

    u = channel_concat(ys)
    e = conv2d(u, p.expand)
    eb, c_expand = batchnorm(e, p.expand_bn, train)
    sb, c_short = _shortcut_forward(x, p, train)
    pre = eb + sb
    out = relu(pre)
    cache = (x, z_bn, c_reduce, splits, groups, u, c_expand, c_short, pre)
    return out, cache


def res2net_block_backward(p: Res2NetBlockParams, cache, grad_out: np.ndarray):
    """Return ``(grad_x, grads)`` with ``grads`` keyed like :meth:`Res2NetBlockParams.arrays`.

    Only valid for caches produced in train mode.
    """
    x, z_bn, c_reduce, splits, groups, u, c_expand, c_short, pre = cache
    grads: dict[str, np.ndarray] = {}
    g_pre = relu_backward(pre, grad_out)

    if p.shortcut is None:
        g_x_short = g_pre
    else:
        g_s, gb = batchnorm_backward(p.shortcut_bn, c_short, g_pre)
        grads |= _prefixed("shortcut_bn", gb)
        g_x_short, gc = conv2d_backward(x, p.shortcut, g_s)
        grads |= _prefixed("shortcut", gc)

    g_e, gb = batchnorm_backward(p.expand_bn, c_expand, g_pre)
    grads |= _prefixed("expand_bn", gb)
    g_u, gc = conv2d_backward(u, p.expand, g_e)
    grads |= _prefixed("expand", gc)

    g_ys = channel_split(g_u, p.scale)
    g_splits: list[np.ndarray] = [None] * p.scale
    carry = None  # gradient reaching y_i through group i+1's input sum
    for i in reversed(range(p.scale)):
        g_y = g_ys[i] if carry is None else g_ys[i] + carry
        carry = None
        if groups[i] is None:
            g_splits[i] = g_y if p.stride == 1 else avg_pool2d_backward(splits[i].shape, g_y)
            continue
        k, inp, hb, c_bn = groups[i]
        g_h, gb = batchnorm_backward(p.group_bns[k], c_bn, relu_backward(hb, g_y))
        grads |= _prefixed(f"group_bns.{k}", gb)
        g_inp, gc = conv2d_backward(inp, p.group_convs[k], g_h)
        grads |= _prefixed(f"group_convs.{k}", gc)
        g_splits[i] = g_inp
        if i > 0 and p.stride == 1:
            carry = g_inp

    g_z = channel_concat(g_splits)
    g_zpre, gb = batchnorm_backward(p.reduce_bn, c_reduce, relu_backward(z_bn, g_z))
    grads |= _prefixed("reduce_bn", gb)
    g_x, gc = conv2d_backward(x, p.reduce, g_zpre)
    grads |= _prefixed("reduce", gc)
    return g_x + g_x_short, grads


def bottleneck_block(x: np.ndarray, p: Res2NetBlockParams, train: bool = False) -> np.ndarray:
    """Plain ResNet bottleneck (reduce 1x1 -> one 3x3 -> expand 1x1) using the
    weights of a scale-1 block. Reference for the ``scale == 1`` case."""
    if p.scale != 1 or len(p.group_convs) != 1:
        raise ConfigError("bottleneck_block needs a scale-1 parameter set")
    h, _ = batchnorm(conv2d(x, p.reduce), p.reduce_bn, train)
    h = relu(h)
    h, _ = batchnorm(conv2d(h, p.group_convs[0]), p.group_bns[0], train)
    h = relu(h)
    h, _ = batchnorm(conv2d(h, p.expand), p.expand_bn, train)
    sb, _ = _shortcut_forward(x, p, train)
    return relu(h + sb)


# --------------------------------------------------------------------------
# backbone


@dataclass
class BackboneConfig:
    in_channels: int = 3
    stem_channels: int = 8
    stages: list[tuple[int, int, int]] = field(default_factory=lambda: [(1, 8, 1), (1, 16, 2)])
    scale: int = 4
    descriptor_dim: int = 16
    num_identities: int = 8
    bottleneck_ratio: float = 1.0
    first_split_conv: bool = False
    # optional per-channel input standardization, applied inside the forward pass
    input_mean: tuple[float, ...] | None = None
    input_std: tuple[float, ...] | None = None

    def __post_init__(self):
        for name in ("input_mean", "input_std"):
            v = getattr(self, name)
            if v is not None:
                v = tuple(float(x) for x in v)
                if len(v) != self.in_channels:
                    raise ConfigError(f"{name} needs {self.in_channels} entries")
                setattr(self, name, v)
        if self.input_std is not None and min(self.input_std) <= 0:
            raise ConfigError("input_std entries must be positive")
        self.stages = [tuple(int(v) for v in st) for st in self.stages]
        if not self.stages:
            raise ConfigError("backbone needs at least one stage")
        for blocks, out_ch, stride in self.stages:
            if blocks < 1 or out_ch < 1 or stride not in (1, 2):
                raise ConfigError(f"invalid stage (blocks={blocks}, out={out_ch}, stride={stride})")
            n = self.bottleneck_width(out_ch)
            if n < self.scale or n % self.scale:
                raise ConfigError(f"scale {self.scale} does not divide bottleneck width {n} of stage out={out_ch}")
        if self.descriptor_dim != self.stages[-1][1]:
            raise ConfigError(
                f"descriptor_dim {self.descriptor_dim} must equal final stage channels {self.stages[-1][1]}"
            )
        if self.num_identities < 2:
            raise ConfigError("num_identities must be >= 2")
        if self.in_channels < 1 or self.stem_channels < 1:
            raise ConfigError("channel counts must be positive")

    def bottleneck_width(self, out_channels: int) -> int:
        return int(round(out_channels * self.bottleneck_ratio))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        for name in ("input_mean", "input_std"):
            if d[name] is not None:
                d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown backbone keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Model:
    """Backbone plus both heads. One parameter set serves both siamese branches."""

    config: BackboneConfig
    stem: ConvParams
    stem_bn: BatchNormParams
    blocks: list[Res2NetBlockParams]
    id_head: LinearParams
    verif_head: LinearParams

    @property
    def dtype(self):
        return self.stem.weight.dtype

    def parameters(self) -> dict[str, np.ndarray]:
        out = _prefixed("stem", self.stem.arrays()) | _prefixed("stem_bn", self.stem_bn.arrays())
        for b, block in enumerate(self.blocks):
            out |= _prefixed(f"blocks.{b}", block.arrays())
        out |= _prefixed("id_head", self.id_head.arrays()) | _prefixed("verif_head", self.verif_head.arrays())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = _prefixed("stem_bn", self.stem_bn.buffers())
        for b, block in enumerate(self.blocks):
            out |= _prefixed(f"blocks.{b}", block.buffers())
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return self.parameters() | self.buffers()

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Model":
        clone = self.copy()
        for arr_name, arr in self.state_arrays().items():
            _assign(clone, arr_name, arr.astype(dtype))
        return clone


def _assign(model: Model, name: str, value: np.ndarray) -> None:
    """Replace the array stored under a dotted parameter name."""
    parts = name.split(".")
    obj = model
    for part in parts[:-1]:
        obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
    setattr(obj, parts[-1], value)


def load_state_arrays(model: Model, arrays: dict[str, np.ndarray]) -> None:
    expected = model.state_arrays()
    missing = set(expected) - set(arrays)
    extra = set(arrays) - set(expected)
    if missing or extra:
        raise ConfigError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
    for name, value in arrays.items():
        if value.shape != expected[name].shape:
            raise ShapeError(f"{name}: stored {value.shape}, model expects {expected[name].shape}")
        _assign(model, name, np.array(value))


def build_backbone(cfg: BackboneConfig, rng: np.random.Generator | int | None = 0, dtype=np.float32) -> Model:
    """Assemble and initialise a model; identical seeds give identical parameters."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    stem = _conv(rng, cfg.in_channels, cfg.stem_channels, 3, dtype=dtype)
    blocks = []
    cin = cfg.stem_channels
    for n_blocks, out_ch, stride in cfg.stages:
        for b in range(n_blocks):
            blocks.append(
                init_block(
                    rng,
                    cin,
                    out_ch,
                    cfg.bottleneck_width(out_ch),
                    cfg.scale,
                    stride if b == 0 else 1,
                    cfg.first_split_conv,
                    dtype,
                )
            )
            cin = out_ch
    d, k = cfg.descriptor_dim, cfg.num_identities
    id_head = LinearParams((rng.standard_normal((k, d)) * 0.001).astype(dtype), np.zeros(k, dtype=dtype))
    verif_head = LinearParams((rng.standard_normal((2, d)) * 0.001).astype(dtype), np.zeros(2, dtype=dtype))
    return Model(cfg, stem, BatchNormParams.fresh(cfg.stem_channels, dtype), blocks, id_head, verif_head)


def backbone_forward(model: Model, images: np.ndarray, train: bool = False):
    """Images (N, C, H, W) -> descriptors (N, d), plus a cache for backward."""
    if images.ndim != 4 or images.shape[1] != model.config.in_channels:
        raise ShapeError(f"expected images (N, {model.config.in_channels}, H, W), got {images.shape}")
    images = images.astype(model.dtype, copy=False)
    cfg = model.config
    if cfg.input_mean is not None:
        images = images - np.asarray(cfg.input_mean, dtype=model.dtype)[:, None, None]
    if cfg.input_std is not None:
        images = images / np.asarray(cfg.input_std, dtype=model.dtype)[:, None, None]
    s = conv2d(images, model.stem)
    sb, c_stem = batchnorm(s, model.stem_bn, train)
    h = relu(sb)
    block_caches = []
    for block in model.blocks:
        h, c = res2net_block(h, block, train)
        block_caches.append(c)
    f = global_avg_pool(h)
    return f, (images, sb, c_stem, block_caches, h.shape)


def backbone_backward(model: Model, cache, grad_f: np.ndarray) -> dict[str, np.ndarray]:
    images, sb, c_stem, block_caches, h_shape = cache
    grads: dict[str, np.ndarray] = {}
    g = global_avg_pool_backward(h_shape, grad_f)
    for b in reversed(range(len(model.blocks))):
        g, gb = res2net_block_backward(model.blocks[b], block_caches[b], g)
        grads |= _prefixed(f"blocks.{b}", gb)
    g, gb = batchnorm_backward(model.stem_bn, c_stem, relu_backward(sb, g))
    grads |= _prefixed("stem_bn", gb)
    _, gc = conv2d_backward(images, model.stem, g)
    grads |= _prefixed("stem", gc)
    return grads


def extract_descriptors(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Infer-mode descriptors for a stack of images (N, C, H, W)."""
    out = []
    for start in range(0, len(images), batch_size):
        f, _ = backbone_forward(model, images[start : start + batch_size], train=False)
        out.append(f)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.config.descriptor_dim), model.dtype)


def extract_descriptor(model: Model, image: np.ndarray) -> np.ndarray:
    """Single (C, H, W) image -> descriptor (d,)."""
    if image.ndim != 3:
        raise ShapeError(f"expected a single (C, H, W) image, got {image.shape}")
    return extract_descriptors(model, image[None])[0]
