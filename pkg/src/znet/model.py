"""Z-net: Z-blocks, decoder Z-blocks, the assembled network and a U-net baseline.

A Z-block runs three conv-BN-ReLU stages. The pre-pool features (``Z2``)
are brought to half resolution and concatenated with the post-pool
convolution output (``Z4``), so fusion rather than a widening convolution
doubles the channel count. The decoder block mirrors it with one 2x
nearest upsample and one skip concatenation.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import (
    BatchNormParams,
    ContractError,
    ConvParams,
    ShapeError,
    batchnorm_backward,
    batchnorm_forward,
    center_crop,
    center_crop_backward,
    check_tensor4,
    concat_channels,
    conv2d_backward,
    conv2d_forward,
    maxpool2x2_backward,
    maxpool2x2_forward,
    relu,
    relu_backward,
    sigmoid,
    split_channels,
    upsample2x_nearest,
    upsample2x_nearest_backward,
)


@dataclass
class ZNetConfig:
    depth: int = 5
    base_channels: int = 32
    input_size: tuple = (256, 256)
    in_channels: int = 1
    skip_align: str = "pool"  # pool | crop
    precision: int = 32
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5
    arch: str = "znet"  # znet | unet

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_channels < 2 or self.base_channels % 2:
            raise ValueError("base_channels must be even and >= 2")
        step = 2 ** self.depth
        if len(self.input_size) != 2 or any(v % step or v < step for v in self.input_size):
            raise ValueError(f"input_size {self.input_size} must be divisible by 2**depth = {step}")
        if self.skip_align not in ("pool", "crop"):
            raise ValueError(f"skip_align must be 'pool' or 'crop', got {self.skip_align!r}")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        if self.arch not in ("znet", "unet"):
            raise ValueError(f"unknown arch {self.arch!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def encoder_channels(self) -> list[int]:
        return [self.base_channels * 2 ** k for k in range(self.depth)]


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray
    trainable: bool = True


class ParamStore:
    """Ordered registry of named arrays.

    Trainable entries carry gradient and Adam moment buffers; non-trainable
    entries (batch-norm running statistics) are stored alongside so that a
    checkpoint captures the full model state.
    """

    def __init__(self):
        self._items: "OrderedDict[str, Param]" = OrderedDict()

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Param:
        if name in self._items:
            raise KeyError(f"duplicate parameter name {name}")
        p = Param(value, np.zeros_like(value), np.zeros_like(value), np.zeros_like(value), trainable)
        self._items[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def items(self):
        return self._items.items()

    def trainable(self):
        return [(k, p) for k, p in self._items.items() if p.trainable]

    def names(self) -> list[str]:
        return list(self._items)

    def num_parameters(self) -> int:
        return sum(p.value.size for _, p in self.trainable())

    def zero_grad(self) -> None:
        for _, p in self.trainable():
            p.grad[...] = 0

    def conv(self, prefix: str) -> ConvParams:
        w, b = self[f"{prefix}/weight"], self[f"{prefix}/bias"]
        return ConvParams(w.value, b.value, w.grad, b.grad)

    def bn(self, prefix: str, momentum: float = 0.99, eps: float = 1e-5) -> BatchNormParams:
        return BatchNormParams(
            self[f"{prefix}/gamma"].value,
            self[f"{prefix}/beta"].value,
            self[f"{prefix}/running_mean"].value,
            self[f"{prefix}/running_var"].value,
            eps=eps,
            momentum=momentum,
            dgamma=self[f"{prefix}/gamma"].grad,
            dbeta=self[f"{prefix}/beta"].grad,
        )


# --------------------------------------------------------------------------
# layer plan


@dataclass
class ConvSpec:
    name: str
    cin: int
    cout: int
    k: int = 3


@dataclass
class BlockPlan:
    name: str
    kind: str  # enc | dec
    cin: int
    cout: int  # channels of the block's main output
    convs: list = field(default_factory=list)


def _block_plans(cfg: ZNetConfig) -> list[BlockPlan]:
    plans = []
    cin = cfg.in_channels
    widen = cfg.arch == "unet"
    for k, c in enumerate(cfg.encoder_channels(), start=1):
        h = c // 2
        third = c if widen else h
        plans.append(BlockPlan(f"enc{k}", "enc", cin, c, [
            ConvSpec(f"enc{k}/conv1", cin, h),
            ConvSpec(f"enc{k}/conv2", h, h),
            ConvSpec(f"enc{k}/conv3", h, third),
        ]))
        cin = c
    for k in range(cfg.depth, 0, -1):
        c = cfg.base_channels * 2 ** (k - 1)
        h = c // 2
        plans.append(BlockPlan(f"dec{k}", "dec", c, h, [
            ConvSpec(f"dec{k}/conv1", c, h),
            ConvSpec(f"dec{k}/conv2", c, h),
            ConvSpec(f"dec{k}/conv3", h, h),
        ]))
    return plans


def conv_specs(cfg: ZNetConfig) -> list[ConvSpec]:
    specs = [c for plan in _block_plans(cfg) for c in plan.convs]
    specs.append(ConvSpec("head", cfg.base_channels // 2, 1, k=1))
    return specs


def param_init(cfg: ZNetConfig, seed: int = 0) -> ParamStore:
    """He-normal conv weights (std = sqrt(2 / fan_in)), zero biases, unit BN."""
    rng = np.random.default_rng(seed)
    dt = cfg.dtype
    store = ParamStore()
    for spec in conv_specs(cfg):
        fan_in = spec.cin * spec.k * spec.k
        w = rng.standard_normal((spec.cout, spec.cin, spec.k, spec.k)) * np.sqrt(2.0 / fan_in)
        store.add(f"{spec.name}/weight", w.astype(dt))
        store.add(f"{spec.name}/bias", np.zeros(spec.cout, dt))
        if spec.name == "head":
            continue
        bn = spec.name.replace("conv", "bn")
        store.add(f"{bn}/gamma", np.ones(spec.cout, dt))
        store.add(f"{bn}/beta", np.zeros(spec.cout, dt))
        store.add(f"{bn}/running_mean", np.zeros(spec.cout, dt), trainable=False)
        store.add(f"{bn}/running_var", np.ones(spec.cout, dt), trainable=False)
    return store


# --------------------------------------------------------------------------
# conv -> BN -> ReLU


def _cbr_forward(x, store, conv_name, cfg, mode):
    bn_name = conv_name.replace("conv", "bn")
    cp = store.conv(conv_name)
    y = conv2d_forward(x, cp)
    bp = store.bn(bn_name, cfg.bn_momentum, cfg.bn_eps)
    z, bn_cache = batchnorm_forward(y, bp, mode)
    out = relu(z)
    cache = (x, conv_name, bn_cache, z) if mode == "train" else None
    return out, cache


def _cbr_backward(g, cache, store, cfg):
    x, conv_name, bn_cache, z = cache
    g = relu_backward(z, g)
    g = batchnorm_backward(bn_cache, store.bn(conv_name.replace("conv", "bn"), cfg.bn_momentum, cfg.bn_eps), g)
    return conv2d_backward(x, store.conv(conv_name), g)


# --------------------------------------------------------------------------
# blocks


@dataclass
class ZBlockOutput:
    down: np.ndarray
    skip: np.ndarray


def zblock_forward(x, store: ParamStore, name: str, cfg: ZNetConfig, mode: str = "train"):
    """Encoder block. Returns ``(ZBlockOutput, cache)``.

    a = CBR(x); Z2 = CBR(a); Z4 = CBR(pool(Z2));
    down = concat(align(Z2), Z4) where align is a 2x2 max pool or a centre crop.
    For ``cfg.arch == 'unet'`` the third conv widens to the full channel
    count and ``down`` is its output alone.
    """
    check_tensor4(x)
    expected = store[f"{name}/conv1/weight"].value.shape[1]
    if x.shape[1] != expected:
        raise ShapeError(f"{name}: input has {x.shape[1]} channels, block expects {expected}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"{name}: spatial dims {x.shape[2:]} must be even")
    a, c1 = _cbr_forward(x, store, f"{name}/conv1", cfg, mode)
    z2, c2 = _cbr_forward(a, store, f"{name}/conv2", cfg, mode)
    z3, pool_cache = maxpool2x2_forward(z2)
    z4, c3 = _cbr_forward(z3, store, f"{name}/conv3", cfg, mode)
    if cfg.arch == "unet":
        down = z4
    elif cfg.skip_align == "pool":
        down = concat_channels(z3, z4)
    else:
        down = concat_channels(center_crop(z2, z2.shape[2] // 2, z2.shape[3] // 2), z4)
    cache = (c1, c2, pool_cache, c3, z2.shape, z3.shape[1]) if mode == "train" else None
    return ZBlockOutput(down, z2), cache


def zblock_backward(g_down, g_skip, cache, store: ParamStore, cfg: ZNetConfig):
    c1, c2, pool_cache, c3, z2_shape, ch = cache
    if cfg.arch == "unet":
        g_aligned, g_z4 = None, g_down
    else:
        g_aligned, g_z4 = split_channels(g_down, ch)
    g_z3 = _cbr_backward(g_z4, c3, store, cfg)
    if g_aligned is not None and cfg.skip_align == "pool":
        g_z3 = g_z3 + g_aligned
    g_z2 = maxpool2x2_backward(pool_cache, g_z3)
    if g_aligned is not None and cfg.skip_align == "crop":
        g_z2 = g_z2 + center_crop_backward(g_aligned, z2_shape)
    if g_skip is not None:
        g_z2 = g_z2 + g_skip
    g_a = _cbr_backward(g_z2, c2, store, cfg)
    return _cbr_backward(g_a, c1, store, cfg)


def decoder_zblock_forward(x, skip, store: ParamStore, name: str, cfg: ZNetConfig, mode: str = "train"):
    """Decoder block: CBR -> upsample -> concat(skip) -> CBR -> CBR.

    ``x`` is (C @ H/2) and ``skip`` is (C/2 @ H); output is (C/2 @ H).
    """
    check_tensor4(x)
    check_tensor4(skip, "skip")
    c = store[f"{name}/conv1/weight"].value.shape[1]
    if x.shape[1] != c:
        raise ShapeError(f"{name}: input has {x.shape[1]} channels, block expects {c}")
    if skip.shape[1] != c // 2:
        raise ShapeError(f"{name}: skip has {skip.shape[1]} channels, must have {c // 2}")
    if skip.shape[2] != 2 * x.shape[2] or skip.shape[3] != 2 * x.shape[3] or skip.shape[0] != x.shape[0]:
        raise ShapeError(f"{name}: skip shape {skip.shape} incompatible with input {x.shape}")
    a, c1 = _cbr_forward(x, store, f"{name}/conv1", cfg, mode)
    u = upsample2x_nearest(a)
    f = concat_channels(u, skip)
    b, c2 = _cbr_forward(f, store, f"{name}/conv2", cfg, mode)
    out, c3 = _cbr_forward(b, store, f"{name}/conv3", cfg, mode)
    cache = (c1, c2, c3, u.shape[1]) if mode == "train" else None
    return out, cache


def decoder_zblock_backward(g, cache, store: ParamStore, cfg: ZNetConfig):
    """Returns ``(grad_x, grad_skip)``."""
    c1, c2, c3, cu = cache
    g = _cbr_backward(g, c3, store, cfg)
    g = _cbr_backward(g, c2, store, cfg)
    g_u, g_skip = split_channels(g, cu)
    g_a = upsample2x_nearest_backward(g_u)
    return _cbr_backward(g_a, c1, store, cfg), g_skip


# --------------------------------------------------------------------------
# full network


@dataclass
class Tape:
    enc: list
    dec: list
    head_in: np.ndarray
    prob: np.ndarray


def _head(x, store):
    p = store.conv("head")
    return conv2d_forward(x, p)


def znet_forward(x, store: ParamStore, cfg: ZNetConfig, mode: str = "train"):
    """Run the network. Returns ``(probabilities, tape)``; ``tape`` is None in eval mode."""
    check_tensor4(x)
    if x.shape[1] != cfg.in_channels or tuple(x.shape[2:]) != cfg.input_size:
        raise ShapeError(
            f"input shape {x.shape} does not match config (n, {cfg.in_channels}, {cfg.input_size})"
        )
    x = x.astype(cfg.dtype, copy=False)
    enc_caches, skips = [], []
    h = x
    for k in range(1, cfg.depth + 1):
        out, cache = zblock_forward(h, store, f"enc{k}", cfg, mode)
        enc_caches.append(cache)
        skips.append(out.skip)
        h = out.down
    dec_caches = []
    for k in range(cfg.depth, 0, -1):
        h, cache = decoder_zblock_forward(h, skips[k - 1], store, f"dec{k}", cfg, mode)
        dec_caches.append(cache)
    prob = sigmoid(_head(h, store))
    if mode != "train":
        return prob, None
    return prob, Tape(enc_caches, dec_caches, h, prob)


def unet_baseline_forward(x, store: ParamStore, cfg: ZNetConfig, mode: str = "train"):
    """Same contract as :func:`znet_forward`, with widening convs instead of fusion."""
    if cfg.arch != "unet":
        raise ValueError("unet_baseline_forward needs a config with arch='unet'")
    return znet_forward(x, store, cfg, mode)


def znet_backward(grad_prob, tape: Tape, store: ParamStore, cfg: ZNetConfig) -> np.ndarray:
    """Accumulate parameter gradients from dL/d(probabilities); returns dL/dx."""
    if tape is None:
        raise ContractError("znet_backward needs the tape of a train-mode forward pass")
    if grad_prob.shape != tape.prob.shape:
        raise ShapeError(f"loss gradient shape {grad_prob.shape} != output shape {tape.prob.shape}")
    g = grad_prob * tape.prob * (1 - tape.prob)
    g = conv2d_backward(tape.head_in, store.conv("head"), g)
    skip_grads = [None] * cfg.depth
    for k, cache in zip(range(1, cfg.depth + 1), reversed(tape.dec)):
        g, skip_grads[k - 1] = decoder_zblock_backward(g, cache, store, cfg)
    for k in range(cfg.depth, 0, -1):
        g = zblock_backward(g, skip_grads[k - 1], tape.enc[k - 1], store, cfg)
    return g


class ZNet:
    """Convenience wrapper pairing a config with its parameter store."""

    def __init__(self, cfg: ZNetConfig, store: ParamStore | None = None, seed: int = 0):
        self.cfg = cfg
        self.store = store if store is not None else param_init(cfg, seed)
        self._tape = None

    def forward(self, x, mode: str = "train"):
        prob, self._tape = znet_forward(x, self.store, self.cfg, mode)
        return prob

    def backward(self, grad_prob):
        tape, self._tape = self._tape, None
        return znet_backward(grad_prob, tape, self.store, self.cfg)

    def predict_proba(self, x, batch_size: int = 8):
        out = [znet_forward(x[i:i + batch_size], self.store, self.cfg, "eval")[0]
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)


def count_convs(cfg: ZNetConfig) -> int:
    return len(conv_specs(cfg))


def level_param_table(cfg: ZNetConfig) -> list[tuple[str, int]]:
    """Per-block trainable parameter counts (conv weights + biases + BN affine)."""
    rows = []
    for plan in _block_plans(cfg):
        n = sum(9 * c.cin * c.cout + c.cout + 2 * c.cout for c in plan.convs)
        rows.append((plan.name, n))
    c = cfg.base_channels // 2
    rows.append(("head", c + 1))
    return rows


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"ZNETCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sIIIIIIBBddBQQ")
_ALIGN = {"pool": 0, "crop": 1}
_ARCH = {"znet": 0, "unet": 1}


def save_checkpoint(path, store: ParamStore, cfg: ZNetConfig, adam_t: int = 0, step: int = 0) -> None:
    """Write the store (values, running stats and Adam moments) atomically."""
    path = Path(path)
    entries = []
    for name, p in store.items():
        entries.append((name, p.value))
        if p.trainable:
            entries.append((name + ":m", p.m))
            entries.append((name + ":v", p.v))
    h, w = cfg.input_size
    chunks = [_HEADER.pack(MAGIC, VERSION, cfg.depth, cfg.base_channels, h, w, cfg.in_channels,
                           _ALIGN[cfg.skip_align], cfg.precision, cfg.bn_momentum, cfg.bn_eps,
                           _ARCH[cfg.arch], adam_t, step),
              struct.pack("<I", len(entries))]
    for name, arr in entries:
        nb = name.encode()
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def read_checkpoint_config(path) -> ZNetConfig:
    raw = Path(path).read_bytes()
    return _parse_header(raw, path)[0]


def _parse_header(raw: bytes, path):
    if len(raw) < _HEADER.size or raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a Z-net checkpoint")
    (_, version, depth, base, h, w, cin, align, prec, mom, eps, arch, adam_t, step) = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    cfg = ZNetConfig(depth=depth, base_channels=base, input_size=(h, w), in_channels=cin,
                     skip_align={v: k for k, v in _ALIGN.items()}[align], precision=prec,
                     bn_momentum=mom, bn_eps=eps, arch={v: k for k, v in _ARCH.items()}[arch])
    return cfg, adam_t, step


def load_checkpoint(path, cfg: ZNetConfig | None = None):
    """Returns ``(store, cfg, adam_t, step)``. Rejects a mismatching ``cfg``."""
    raw = Path(path).read_bytes()
    saved, adam_t, step = _parse_header(raw, path)
    if cfg is not None and asdict(cfg) != asdict(saved):
        raise ValueError(f"{path}: checkpoint config {asdict(saved)} does not match {asdict(cfg)}")
    store = param_init(saved, seed=0)
    off = _HEADER.size
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    seen = set()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        base_name, _, slot = name.partition(":")
        if base_name not in store:
            raise ValueError(f"{path}: unknown entry {name}")
        p = store[base_name]
        target = {"": p.value, "m": p.m, "v": p.v}[slot]
        if target.shape != arr.shape:
            raise ValueError(f"{path}: entry {name} has shape {arr.shape}, expected {target.shape}")
        target[...] = arr
        seen.add(name)
    missing = [n for n in store.names() if n not in seen]
    if missing:
        raise ValueError(f"{path}: checkpoint is missing {missing[:3]}")
    return store, saved, adam_t, step
