"""The three network families and their paper/desk presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from ..errors import ShapeError, ValidationError
from . import ops
from .layers import (
    Activation,
    BatchNorm,
    Conv,
    Dense,
    GlobalAvgPool,
    Module,
    Pool,
    ResidualBlock,
    Sequential,
    Upsample,
)

KINDS = ("shallow_cnn", "resnet3d", "unet3d")


@dataclass(frozen=True)
class ArchSpec:
    kind: str
    channels: tuple[int, ...]
    input_shape: tuple[int, ...]
    in_channels: int = 1
    kernel: int = 3
    pool: int = 2
    stem_kernel: int = 7
    stem_stride: int = 2
    blocks_per_stage: int = 2
    head_width: int = 0
    global_pool: bool = False
    preset: str = "custom"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown architecture kind {self.kind!r}")
        if not self.channels or any(c < 1 for c in self.channels):
            raise ValidationError(f"channel widths must be positive, got {self.channels}")
        want_nd = 2 if self.kind == "shallow_cnn" else 3
        if len(self.input_shape) != want_nd or any(n < 1 for n in self.input_shape):
            raise ValidationError(f"{self.kind} needs a {want_nd}D positive input shape, got {self.input_shape}")
        if self.in_channels < 1 or self.kernel < 1 or self.pool < 1 or self.stem_kernel < 1:
            raise ValidationError("kernel, pool and channel counts must be >= 1")
        if self.kind == "resnet3d" and (self.blocks_per_stage < 1 or self.stem_stride < 1):
            raise ValidationError("resnet3d needs >= 1 block per stage and stem stride >= 1")
        if self.head_width < 0:
            raise ValidationError("head width must be >= 0")

    @property
    def ndim(self) -> int:
        return len(self.input_shape)

    def to_dict(self) -> dict:
        return asdict(self)


PAPER_PRESETS = {
    "shallow_cnn": ArchSpec("shallow_cnn", (32, 64, 128), (256, 256), in_channels=3, preset="paper"),
    "resnet3d": ArchSpec(
        "resnet3d", (32, 64, 128, 256), (256, 256, 35), stem_kernel=7, stem_stride=2,
        blocks_per_stage=2, head_width=1000, preset="paper",
    ),
    "unet3d": ArchSpec("unet3d", (8, 16, 32, 64, 128), (256, 256, 32), preset="paper"),
}

DESK_PRESETS = {
    # averaging the last feature map makes the head position-agnostic; the flattened head
    # tends to fit anatomy before it finds scanner texture on a 140-study training set
    "shallow_cnn": ArchSpec("shallow_cnn", (4, 8, 16), (64, 64), in_channels=3, global_pool=True, preset="desk"),
    # three single-block stages behind an unstrided 3^3 stem: on a 32x32x8 grid a
    # small sphere spans two to three voxels and does not survive an early stride
    "resnet3d": ArchSpec(
        "resnet3d", (4, 8, 16), (32, 32, 8), stem_kernel=3, stem_stride=1,
        blocks_per_stage=1, head_width=32, preset="desk",
    ),
    "unet3d": ArchSpec("unet3d", (2, 4, 8, 16, 32), (64, 64, 16), preset="desk"),
}


def preset(kind: str, scale: str = "desk", input_shape: Optional[tuple[int, ...]] = None, **overrides) -> ArchSpec:
    table = {"paper": PAPER_PRESETS, "desk": DESK_PRESETS}.get(scale)
    if table is None:
        raise ValidationError(f"unknown scale preset {scale!r}")
    if kind not in table:
        raise ValidationError(f"unknown architecture kind {kind!r}")
    spec = table[kind]
    if input_shape is not None:
        overrides["input_shape"] = tuple(int(n) for n in input_shape)
    return replace(spec, **overrides) if overrides else spec


def _capped(size, factor):
    """Per-axis factor that never shrinks an exhausted (size-1) axis."""
    return tuple(factor if n > 1 else 1 for n in size)


def _shrink(size, factor):
    return tuple(-(-n // f) for n, f in zip(size, factor))


class DoubleConv(Sequential):
    def __init__(self, in_ch, out_ch, ndim, rng, kernel=3):
        super().__init__(
            Conv(in_ch, out_ch, kernel, ndim, rng), BatchNorm(out_ch), Activation("relu"),
            Conv(out_ch, out_ch, kernel, ndim, rng), BatchNorm(out_ch), Activation("relu"),
        )


class UNet(Module):
    """Encoder/decoder with channel-concatenated skips at every scale."""

    def __init__(self, spec: ArchSpec, rng):
        super().__init__()
        nd = spec.ndim
        size = spec.input_shape
        self.enc, self.pools, self.factors = [], [], []
        in_ch = spec.in_channels
        for i, c in enumerate(spec.channels):
            self.enc.append(DoubleConv(in_ch, c, nd, rng, spec.kernel))
            in_ch = c
            if i < len(spec.channels) - 1:
                f = _capped(size, spec.pool)
                self.factors.append(f)
                self.pools.append(Pool("max", f))
                size = _shrink(size, f)
        self.ups, self.dec = [], []
        for i in reversed(range(len(spec.channels) - 1)):
            self.ups.append(Upsample(self.factors[i]))
            self.dec.append(DoubleConv(spec.channels[i + 1] + spec.channels[i], spec.channels[i], nd, rng, spec.kernel))
        self.out = Conv(spec.channels[0], 1, 1, nd, rng)

    def children(self):
        kids = [(f"enc{i}", m) for i, m in enumerate(self.enc)]
        kids += [(f"dec{i}", m) for i, m in enumerate(self.dec)]
        kids.append(("out", self.out))
        return kids

    def forward(self, x, train=False):
        skips = []
        h = x
        for i, block in enumerate(self.enc):
            h = block.forward(h, train)
            if i < len(self.pools):
                skips.append(h)
                h = self.pools[i].forward(h)
        shapes = []
        for up, dec, skip in zip(self.ups, self.dec, reversed(skips)):
            u = up.forward(h)
            shapes.append((u.shape[2:], h.shape[1]))
            u = ops.crop_to(u, skip.shape[2:])
            h = dec.forward(np.concatenate([u, skip], axis=1), train)
        self._cache = shapes
        return self.out.forward(h)

    def backward(self, dout):
        shapes = self._take_cache()
        d = self.out.backward(dout)
        dskips = []
        for up, dec, (u_spatial, up_ch) in zip(reversed(self.ups), reversed(self.dec), reversed(shapes)):
            dcat = dec.backward(d)
            du, dskip = dcat[:, :up_ch], dcat[:, up_ch:]
            dskips.append(dskip)
            d = up.backward(ops.pad_to(du, u_spatial))
        # dskips[i] is the gradient flowing into encoder stage i via its skip
        for i in reversed(range(len(self.enc))):
            if i < len(self.pools):
                d = self.pools[i].backward(d) + dskips[i]
            d = self.enc[i].backward(d)
        return d


class Network:
    """A built model: the layer graph plus the ArchSpec it came from.

    ``forward`` returns logits; probabilities are ``sigmoid(logits)``.
    """

    def __init__(self, spec: ArchSpec, body: Module, seed: int):
        self.spec = spec
        self.body = body
        self.seed = int(seed)
        self.optimizer = None  # set by train(); checkpointed with the weights

    @property
    def task(self) -> str:
        return "segmentation" if self.spec.kind == "unet3d" else "classification"

    def check_input(self, x):
        want = (self.spec.in_channels,) + tuple(self.spec.input_shape)
        if x.ndim != len(want) + 1 or tuple(x.shape[1:]) != want:
            raise ShapeError(f"{self.spec.kind} expects input (N, {', '.join(map(str, want))}), got {x.shape}")

    def forward(self, x, train=False):
        x = ops.as_tensor(x)
        self.check_input(x)
        return self.body.forward(x, train)

    def backward(self, dlogits):
        return self.body.backward(dlogits)

    def parameters(self) -> dict[str, np.ndarray]:
        return dict(self.body.named_params())

    def gradients(self) -> dict[str, np.ndarray]:
        return dict(self.body.named_grads())

    def buffers(self) -> dict[str, np.ndarray]:
        return dict(self.body.named_buffers())

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param:{k}": v for k, v in self.parameters().items()}
        out.update({f"buffer:{k}": v for k, v in self.buffers().items()})
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}

    def restore(self, snap: dict[str, np.ndarray]):
        for k, v in self.state_arrays().items():
            v[...] = snap[k]

    def head(self) -> Dense | Conv:
        """The final affine layer producing the logit."""
        body = self.body
        if isinstance(body, UNet):
            return body.out
        return body.layers[-1]

    def n_params(self) -> int:
        return sum(v.size for v in self.parameters().values())


def _shallow_cnn(spec: ArchSpec, rng) -> Sequential:
    layers = []
    in_ch = spec.in_channels
    size = spec.input_shape
    for c in spec.channels:
        f = _capped(size, spec.pool)
        layers += [Conv(in_ch, c, spec.kernel, 2, rng), BatchNorm(c), Activation("relu"), Pool("max", f)]
        size = _shrink(size, f)
        in_ch = c
    if spec.global_pool:
        layers.append(Pool("avg", size))
        size = (1, 1)
    flat = in_ch * int(np.prod(size))
    layers.append(Dense(flat, 1, rng))
    return Sequential(*layers)


def _resnet3d(spec: ArchSpec, rng) -> Sequential:
    size = spec.input_shape
    c0 = spec.channels[0]
    s = _capped(size, spec.stem_stride)
    layers = [Conv(spec.in_channels, c0, spec.stem_kernel, 3, rng, stride=s), BatchNorm(c0), Activation("relu")]
    size = _shrink(size, s)
    f = _capped(size, 2)
    layers.append(Pool("max", f))
    size = _shrink(size, f)
    in_ch = c0
    for i, c in enumerate(spec.channels):
        for b in range(spec.blocks_per_stage):
            # the first stage keeps the pooled resolution, later stages halve it
            stride = _capped(size, 2) if b == 0 and i > 0 else (1, 1, 1)
            layers.append(ResidualBlock(in_ch, c, 3, rng, stride=stride, kernel=spec.kernel))
            size = _shrink(size, stride)
            in_ch = c
    layers += [BatchNorm(in_ch), Activation("relu"), GlobalAvgPool()]
    if spec.head_width:
        layers += [Dense(in_ch, spec.head_width, rng), Activation("relu")]
        in_ch = spec.head_width
    layers.append(Dense(in_ch, 1, rng))
    return Sequential(*layers)


_BUILDERS = {"shallow_cnn": _shallow_cnn, "resnet3d": _resnet3d, "unet3d": UNet}


def build_model(spec: ArchSpec, seed: int) -> Network:
    """He-initialized network for ``spec``; identical seeds give identical weights."""
    rng = np.random.default_rng(int(seed))
    return Network(spec, _BUILDERS[spec.kind](spec, rng), seed)


def conv_param_count(in_ch: int, out_ch: int, kernel: int, ndim: int) -> int:
    return kernel**ndim * in_ch * out_ch + out_ch


def param_count(spec: ArchSpec) -> int:
    """Closed-form parameter count (weights, biases, BN scale/shift)."""
    nd, k = spec.ndim, spec.kernel
    bn = lambda c: 2 * c  # noqa: E731
    total = 0
    if spec.kind == "shallow_cnn":
        size, in_ch = spec.input_shape, spec.in_channels
        for c in spec.channels:
            total += conv_param_count(in_ch, c, k, nd) + bn(c)
            size = _shrink(size, _capped(size, spec.pool))
            in_ch = c
        if spec.global_pool:
            size = (1, 1)
        return total + in_ch * int(np.prod(size)) + 1
    if spec.kind == "resnet3d":
        c0 = spec.channels[0]
        total += conv_param_count(spec.in_channels, c0, spec.stem_kernel, 3) + bn(c0)
        size = _shrink(spec.input_shape, _capped(spec.input_shape, spec.stem_stride))
        size = _shrink(size, _capped(size, 2))
        in_ch = c0
        for i, c in enumerate(spec.channels):
            for b in range(spec.blocks_per_stage):
                stride = _capped(size, 2) if b == 0 and i > 0 else (1, 1, 1)
                total += bn(in_ch) + conv_param_count(in_ch, c, k, 3) + bn(c) + conv_param_count(c, c, k, 3)
                if in_ch != c or any(s != 1 for s in stride):
                    total += conv_param_count(in_ch, c, 1, 3)
                size = _shrink(size, stride)
                in_ch = c
        total += bn(in_ch)
        if spec.head_width:
            total += in_ch * spec.head_width + spec.head_width
            in_ch = spec.head_width
        return total + in_ch + 1
    chans = spec.channels
    in_ch = spec.in_channels
    for c in chans:
        total += conv_param_count(in_ch, c, k, nd) + conv_param_count(c, c, k, nd) + 2 * bn(c)
        in_ch = c
    for i in range(len(chans) - 1):
        c = chans[i]
        total += conv_param_count(chans[i + 1] + c, c, k, nd) + conv_param_count(c, c, k, nd) + 2 * bn(c)
    return total + conv_param_count(chans[0], 1, 1, nd)
