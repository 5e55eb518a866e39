"""Layers and networks: normalization, residual conv encoder, projection head.

Normalization comes in three kinds.  Batch norm and instance norm produce
*unscaled* normalized signals; the mixed normalizer blends them with a
fixed balance factor and applies one shared affine on the blend:

    y = scale * (gamma * BN(x) + (1 - gamma) * IN(x)) + shift

With gamma=1 or gamma=0 the blend short-circuits to the single constituent
so the endpoints are bitwise identical to the plain BN/IN paths.

All forwards are compositions of tensor primitives, so gradients come from
the autodiff engine rather than hand-derived formulas.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from soi.errors import ShapeError
from soi.tensor import Tensor, _make, conv2d, l2_normalize, matmul


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


class NormKind(enum.Enum):
    BN = "BN"
    IN = "IN"
    BIN = "BIN"


@dataclass
class NormState:
    """Per-channel normalization state (affine + running statistics)."""

    channels: int
    balance_gamma: float = 0.5
    eps: float = 1e-5
    running_momentum: float = 0.1
    affine_scale: Tensor = None
    affine_shift: Tensor = None
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    dtype: np.dtype = np.float32

    def __post_init__(self):
        if not 0.0 <= self.balance_gamma <= 1.0:
            raise ValueError(f"balance_gamma must be in [0,1], got {self.balance_gamma}")
        c, dt = self.channels, self.dtype
        if self.affine_scale is None:
            self.affine_scale = Tensor(np.ones(c, dtype=dt), requires_grad=True)
        if self.affine_shift is None:
            self.affine_shift = Tensor(np.zeros(c, dtype=dt), requires_grad=True)
        if self.running_mean is None:
            self.running_mean = np.zeros(c, dtype=dt)
        if self.running_var is None:
            self.running_var = np.ones(c, dtype=dt)


def _check_input(x: Tensor, state: NormState) -> None:
    if x.data.ndim != 4:
        raise ShapeError("normalization expects (B,C,H,W)")
    if x.data.shape[1] != state.channels:
        raise ShapeError(
            f"channel mismatch: input has {x.data.shape[1]}, state has {state.channels}"
        )


def _update_running(state: NormState, mu: np.ndarray, var: np.ndarray) -> None:
    m = state.running_momentum
    state.running_mean[:] = (1 - m) * state.running_mean + m * mu.reshape(-1)
    state.running_var[:] = (1 - m) * state.running_var + m * var.reshape(-1)


def batch_norm(x: Tensor, state: NormState, mode: Mode) -> Tensor:
    """Per-channel normalization over (B,H,W); affine NOT applied here.

    Train mode uses batch statistics and updates the running ones;
    Eval uses the running statistics and never mutates state.

    This is the composed (autodiff) form; the layers use the fused primitive
    below, which mirrors this computation operation for operation.
    """
    _check_input(x, state)
    b, _, h, w = x.data.shape
    if mode is Mode.TRAIN:
        if b * h * w < 2:
            raise ShapeError("batch_norm in Train mode needs at least 2 values per channel")
        mu = x.mean(axis=(0, 2, 3), keepdims=True)
        xm = x - mu
        var = (xm * xm).mean(axis=(0, 2, 3), keepdims=True)
        _update_running(state, mu.data, var.data)
        return xm * ((var + state.eps) ** -0.5)
    rm = state.running_mean.reshape(1, -1, 1, 1)
    istd = (state.running_var.reshape(1, -1, 1, 1) + state.eps) ** -0.5
    return (x - rm) * istd


def instance_norm(x: Tensor, eps: float) -> Tensor:
    """Per-(instance, channel) normalization over (H,W); no affine, no state."""
    if x.data.ndim != 4:
        raise ShapeError("normalization expects (B,C,H,W)")
    if x.data.shape[2] * x.data.shape[3] < 2:
        raise ShapeError("instance_norm needs at least 2 spatial values")
    mu = x.mean(axis=(2, 3), keepdims=True)
    xm = x - mu
    var = (xm * xm).mean(axis=(2, 3), keepdims=True)
    return xm * ((var + eps) ** -0.5)


def _affine(y: Tensor, state: NormState) -> Tensor:
    c = state.channels
    return y * state.affine_scale.reshape(c, 1, 1) + state.affine_shift.reshape(c, 1, 1)


def _fused_norm_affine(x: Tensor, state: NormState, mode: Mode,
                       wb: float, wi: float) -> Tensor:
    """scale * (wb*BN(x) + wi*IN(x)) + shift as a single graph node.

    Bitwise-identical to the composed ``batch_norm``/``instance_norm`` +
    ``_affine`` path (same numpy ops in the same order); the backward is the
    standard normalization gradient, fed the blend weights.  A weight of
    exactly 0 skips that constituent entirely, so wb=1/wi=0 IS the BN path
    and wb=0/wi=1 IS the IN path, bit for bit.
    """
    _check_input(x, state)
    xd = x.data
    b, _, h, w = xd.shape
    eps = state.eps
    bn_hat = in_hat = None
    bn_istd = in_istd = None
    bn_train = mode is Mode.TRAIN

    if wb:
        if bn_train:
            if b * h * w < 2:
                raise ShapeError("batch_norm in Train mode needs at least 2 values per channel")
            mu = xd.mean(axis=(0, 2, 3), keepdims=True)
            xm = xd - mu
            var = (xm * xm).mean(axis=(0, 2, 3), keepdims=True)
            _update_running(state, mu, var)
            bn_istd = (var + eps) ** -0.5
            bn_hat = xm * bn_istd
        else:
            rm = state.running_mean.reshape(1, -1, 1, 1)
            bn_istd = (state.running_var.reshape(1, -1, 1, 1) + eps) ** -0.5
            bn_hat = (xd - rm) * bn_istd
    if wi:
        if h * w < 2:
            raise ShapeError("instance_norm needs at least 2 spatial values")
        mu_i = xd.mean(axis=(2, 3), keepdims=True)
        xm_i = xd - mu_i
        var_i = (xm_i * xm_i).mean(axis=(2, 3), keepdims=True)
        in_istd = (var_i + eps) ** -0.5
        in_hat = xm_i * in_istd

    if not wi:
        mixed = bn_hat
    elif not wb:
        mixed = in_hat
    else:
        mixed = bn_hat * wb + in_hat * wi

    c = state.channels
    scale3 = state.affine_scale.data.reshape(c, 1, 1)
    shift3 = state.affine_shift.data.reshape(c, 1, 1)
    out = _make(mixed * scale3 + shift3, (x, state.affine_scale, state.affine_shift))
    if out.requires_grad:
        def bw():
            g = out.grad
            if state.affine_shift.requires_grad:
                state.affine_shift._accum(g.sum(axis=(0, 2, 3)))
            if state.affine_scale.requires_grad:
                state.affine_scale._accum((g * mixed).sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gm = g * scale3
                total = None
                if wb:
                    gb = gm if wb == 1.0 else gm * wb
                    if bn_train:
                        total = bn_istd * (
                            gb
                            - gb.mean(axis=(0, 2, 3), keepdims=True)
                            - bn_hat * (gb * bn_hat).mean(axis=(0, 2, 3), keepdims=True)
                        )
                    else:
                        total = gb * bn_istd
                if wi:
                    gi = gm if wi == 1.0 else gm * wi
                    dxi = in_istd * (
                        gi
                        - gi.mean(axis=(2, 3), keepdims=True)
                        - in_hat * (gi * in_hat).mean(axis=(2, 3), keepdims=True)
                    )
                    total = dxi if total is None else total + dxi
                x._accum(total)
        out._backward = bw
    return out


def batch_instance_norm(x: Tensor, state: NormState, mode: Mode) -> Tensor:
    """Blend of batch and instance normalization, then one shared affine."""
    g = state.balance_gamma
    return _fused_norm_affine(x, state, mode, g, 1.0 - g)


class NormLayer:
    """One normalization layer of the configured kind, with shared affine."""

    def __init__(self, channels: int, kind: NormKind, balance_gamma: float = 0.5,
                 eps: float = 1e-5, running_momentum: float = 0.1, dtype=np.float32):
        self.kind = kind
        self.state = NormState(
            channels,
            balance_gamma=balance_gamma,
            eps=eps,
            running_momentum=running_momentum,
            dtype=dtype,
        )

    def __call__(self, x: Tensor, mode: Mode) -> Tensor:
        if self.kind is NormKind.BN:
            return _fused_norm_affine(x, self.state, mode, 1.0, 0.0)
        if self.kind is NormKind.IN:
            return _fused_norm_affine(x, self.state, mode, 0.0, 1.0)
        return batch_instance_norm(x, self.state, mode)

    def named_parameters(self, prefix: str):
        yield prefix + ".scale", self.state.affine_scale
        yield prefix + ".shift", self.state.affine_shift

    def named_buffers(self, prefix: str):
        yield prefix + ".running_mean", self.state.running_mean
        yield prefix + ".running_var", self.state.running_var


class Conv2d:
    """Convolution layer without bias (a norm layer always follows)."""

    def __init__(self, in_ch: int, out_ch: int, ksize: int, stride: int, padding: int, rng,
                 dtype=np.float32):
        fan_in = in_ch * ksize * ksize
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(out_ch, in_ch, ksize, ksize))
        self.w = Tensor(w.astype(dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, stride=self.stride, padding=self.padding)

    def named_parameters(self, prefix: str):
        yield prefix + ".w", self.w

    def named_buffers(self, prefix: str):
        return ()


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng, dtype=np.float32):
        bound = 1.0 / np.sqrt(in_dim)
        self.w = Tensor(rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(dtype),
                        requires_grad=True)
        self.b = Tensor(rng.uniform(-bound, bound, size=(out_dim,)).astype(dtype),
                        requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.w.T) + self.b

    def named_parameters(self, prefix: str):
        yield prefix + ".w", self.w
        yield prefix + ".b", self.b

    def named_buffers(self, prefix: str):
        return ()


@dataclass(frozen=True)
class EncoderConfig:
    """Shape of the conv encoder; the default is the desk-scale "MicroRes"."""

    stages: tuple = ((16, 1), (32, 1), (64, 1), (128, 1))
    input_size: tuple = (3, 32, 32)
    embed_dim: int = 128
    norm_kind: str = "BIN"
    balance_gamma: float = 0.5

    def __post_init__(self):
        if self.embed_dim <= 0:
            raise ValueError("embed_dim must be positive")
        if not self.stages:
            raise ValueError("stages must be non-empty")
        NormKind(self.norm_kind)  # validates


@dataclass(frozen=True)
class HeadConfig:
    hidden_dim: int = 128
    out_dim: int = 64

    def __post_init__(self):
        if self.hidden_dim <= 0 or self.out_dim <= 0:
            raise ValueError("head dims must be positive")


class ResidualBlock:
    """conv-norm-relu-conv-norm plus a (possibly projected) skip, then relu.

    All convs are stride 1; spatial downsampling happens between stages
    (average pooling in the encoder) so every conv output extent is exact.
    """

    def __init__(self, in_ch: int, out_ch: int, kind: NormKind, gamma: float, rng):
        self.conv1 = Conv2d(in_ch, out_ch, 3, 1, 1, rng)
        self.norm1 = NormLayer(out_ch, kind, gamma)
        self.conv2 = Conv2d(out_ch, out_ch, 3, 1, 1, rng)
        self.norm2 = NormLayer(out_ch, kind, gamma)
        if in_ch != out_ch:
            self.proj = Conv2d(in_ch, out_ch, 1, 1, 0, rng)
            self.proj_norm = NormLayer(out_ch, kind, gamma)
        else:
            self.proj = None
            self.proj_norm = None

    def __call__(self, x: Tensor, mode: Mode) -> Tensor:
        y = self.norm1(self.conv1(x), mode).relu()
        y = self.norm2(self.conv2(y), mode)
        skip = x if self.proj is None else self.proj_norm(self.proj(x), mode)
        return (y + skip).relu()

    def _children(self):
        pairs = [("conv1", self.conv1), ("norm1", self.norm1),
                 ("conv2", self.conv2), ("norm2", self.norm2)]
        if self.proj is not None:
            pairs += [("proj", self.proj), ("proj_norm", self.proj_norm)]
        return pairs

    def named_parameters(self, prefix: str):
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}.{name}")

    def named_buffers(self, prefix: str):
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}.{name}")


class Encoder:
    """Residual conv encoder: stem, stages, global average pool, linear map."""

    def __init__(self, config: EncoderConfig, seed: int):
        rng = np.random.default_rng(seed)
        self.config = config
        self.frozen = False
        kind = NormKind(config.norm_kind)
        gamma = config.balance_gamma
        in_c = config.input_size[0]

        first = config.stages[0][0]
        self.stem = Conv2d(in_c, first, 3, 1, 1, rng)
        self.stem_norm = NormLayer(first, kind, gamma)

        self.blocks: list[tuple[str, ResidualBlock]] = []
        self._pool_before: set[str] = set()
        prev = first
        for si, (channels, nblocks) in enumerate(config.stages):
            for bi in range(nblocks):
                name = f"stage{si}.block{bi}"
                if si > 0 and bi == 0:
                    self._pool_before.add(name)
                self.blocks.append((name, ResidualBlock(prev, channels, kind, gamma, rng)))
                prev = channels
        self.fc = Linear(prev, config.embed_dim, rng)

    def __call__(self, images: Tensor, mode: Mode) -> Tensor:
        expect = self.config.input_size
        if images.data.ndim != 4 or tuple(images.data.shape[1:]) != tuple(expect):
            raise ShapeError(f"expected (B,{expect[0]},{expect[1]},{expect[2]}) input, "
                             f"got {images.data.shape}")
        if self.frozen:
            mode = Mode.EVAL
        y = self.stem_norm(self.stem(images), mode).relu()
        for name, block in self.blocks:
            if name in self._pool_before:
                y = y.avg_pool2d(2)
            y = block(y, mode)
        pooled = y.mean(axis=(2, 3))
        return self.fc(pooled)

    def freeze(self) -> "Encoder":
        self.frozen = True
        for _, p in self.named_parameters():
            p.requires_grad = False
        return self

    def _children(self):
        yield "stem", self.stem
        yield "stem_norm", self.stem_norm
        yield from self.blocks
        yield "fc", self.fc

    def named_parameters(self, prefix: str = "enc"):
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}.{name}")

    def named_buffers(self, prefix: str = "enc"):
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}.{name}")


class ProjectionHead:
    """linear -> relu -> linear -> unit-norm rows."""

    def __init__(self, embed_dim: int, config: HeadConfig, seed: int, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.config = config
        self.fc1 = Linear(embed_dim, config.hidden_dim, rng, dtype=dtype)
        self.fc2 = Linear(config.hidden_dim, config.out_dim, rng, dtype=dtype)

    def __call__(self, v: Tensor) -> Tensor:
        return l2_normalize(self.fc2(self.fc1(v).relu()), axis=-1)

    def named_parameters(self, prefix: str = "head"):
        yield from self.fc1.named_parameters(prefix + ".fc1")
        yield from self.fc2.named_parameters(prefix + ".fc2")

    def named_buffers(self, prefix: str = "head"):
        return ()


def parameters_dict(module, prefix=None) -> dict[str, Tensor]:
    if prefix is None:
        return dict(module.named_parameters())
    return dict(module.named_parameters(prefix))


def state_dict(module, prefix=None) -> dict[str, np.ndarray]:
    """All persistable arrays: learnable parameters plus running statistics."""
    args = () if prefix is None else (prefix,)
    out = {name: t.data for name, t in module.named_parameters(*args)}
    out.update({name: arr for name, arr in module.named_buffers(*args)})
    return out


def load_state_dict(module, arrays: dict[str, np.ndarray], prefix=None) -> None:
    """Copy arrays into the module in place; names must match exactly."""
    args = () if prefix is None else (prefix,)
    own = state_dict(module, prefix)
    missing = set(own) - set(arrays)
    if missing:
        raise KeyError(f"state dict missing entries: {sorted(missing)[:3]}...")
    for name, t in module.named_parameters(*args):
        t.data = arrays[name].astype(t.data.dtype).reshape(t.data.shape).copy()
    for name, buf in module.named_buffers(*args):
        buf[...] = arrays[name].astype(buf.dtype).reshape(buf.shape)
