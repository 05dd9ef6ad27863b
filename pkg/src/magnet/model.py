"""MAG-Net: multi-kernel separable encoder, attention-gated decoder and a
classification head sharing the encoder trunk.
"""

from __future__ import annotations

import dataclasses
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, ShapeError
from .tensor import Tensor

BRANCH_KERNELS = (1, 3, 5)
LAYER_NORM_EPS = 1e-5
CLASS_NAMES = ("meningioma", "glioma", "pituitary")


@dataclass
class ModelConfig:
    input_height: int = 64
    input_width: int = 64
    input_channels: int = 1
    encoder_channels: List[int] = field(default_factory=lambda: [64, 128, 256, 512])
    bottleneck_channels: int = 1024
    num_classes: int = 3
    # widened from [256, 64] so the default totals ~5.4M parameters
    head_hidden: List[int] = field(default_factory=lambda: [1024, 96])
    attention_reduction: int = 2
    seg_threshold: float = 0.5

    def __post_init__(self):
        self.encoder_channels = [int(c) for c in self.encoder_channels]
        self.head_hidden = [int(c) for c in self.head_hidden]
        self.validate()

    def validate(self) -> None:
        if not self.encoder_channels:
            raise ConfigError("encoder_channels must list at least one level")
        factor = 2 ** len(self.encoder_channels)
        for key in ("input_height", "input_width"):
            value = getattr(self, key)
            if value < 1 or value % factor:
                raise ConfigError(f"{key}={value} must be a positive multiple of {factor}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        counts = [self.input_channels, self.bottleneck_channels, self.attention_reduction,
                  *self.encoder_channels, *self.head_hidden]
        if min(counts) < 1:
            raise ConfigError("all channel counts and attention_reduction must be >= 1")
        if not 0.0 < self.seg_threshold < 1.0:
            raise ConfigError(f"seg_threshold must lie in (0, 1), got {self.seg_threshold}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown model config key: {key!r}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


class _Init:
    """Seeded parameter factory; He-uniform kernels, unit gamma, zero beta."""

    def __init__(self, seed: int, dtype):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype

    def he_uniform(self, shape, fan_in: int) -> Tensor:
        bound = np.sqrt(6.0 / fan_in)
        return Tensor(self.rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=self.dtype)

    def constant(self, shape, value: float) -> Tensor:
        return Tensor(np.full(shape, value), requires_grad=True, dtype=self.dtype)


class Module:
    """Container of named parameters and child modules, in registration order."""

    def __init__(self):
        self._params: Dict[str, Tensor] = OrderedDict()
        self._children: Dict[str, Module] = OrderedDict()

    def add_param(self, name: str, t: Tensor) -> Tensor:
        self._params[name] = t
        return t

    def add_child(self, name: str, m: "Module") -> "Module":
        self._children[name] = m
        return m

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, t in self._params.items():
            yield prefix + name, t
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.named_parameters())


class LayerNorm(Module):
    def __init__(self, channels: int, init: _Init):
        super().__init__()
        self.gamma = self.add_param("gamma", init.constant((channels,), 1.0))
        self.beta = self.add_param("beta", init.constant((channels,), 0.0))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, LAYER_NORM_EPS)


class SeparableConv(Module):
    """Depthwise f x f per-channel filter followed by a bias-free 1x1 projection.

    For f=1 the depthwise stage degenerates to a per-channel scale; it is
    kept so the parameter count is always f*f*cin + cin*cout.
    """

    def __init__(self, cin: int, cout: int, kernel_size: int, init: _Init):
        super().__init__()
        if kernel_size not in BRANCH_KERNELS:
            raise ConfigError(f"separable_conv supports kernel sizes {BRANCH_KERNELS}, got {kernel_size}")
        self.kernel_size, self.cin, self.cout = kernel_size, cin, cout
        f = kernel_size
        self.depthwise = self.add_param("depthwise", init.he_uniform((f, f, cin), f * f))
        self.pointwise = self.add_param("pointwise", init.he_uniform((1, 1, cin, cout), cin))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(T.depthwise_conv2d(x, self.depthwise), self.pointwise)


def separable_conv(x: Tensor, kernel_size: int, cout: int, seed: int = 0) -> Tensor:
    """One-off separable convolution with freshly initialized weights."""
    layer = SeparableConv(x.shape[-1], cout, kernel_size, _Init(seed, x.dtype))
    return layer(x)


class MultiKernelBlock(Module):
    """Parallel 1x1 / 3x3 / 5x5 separable branches, each normalized and
    rectified, fused by addition."""

    def __init__(self, cin: int, cout: int, init: _Init):
        super().__init__()
        self.branches = []
        for f in BRANCH_KERNELS:
            conv = self.add_child(f"conv{f}", SeparableConv(cin, cout, f, init))
            norm = self.add_child(f"norm{f}", LayerNorm(cout, init))
            self.branches.append((conv, norm))

    def __call__(self, x: Tensor) -> Tensor:
        out = None
        for conv, norm in self.branches:
            y = T.relu(norm(conv(x)))
            out = y if out is None else T.add(out, y)
        return out


class EncoderBlock(MultiKernelBlock):
    def __call__(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
            raise ShapeError(f"encoder_block needs even spatial dims, got {x.shape}")
        features = super().__call__(x)
        return features, T.max_pool2d(features)


class Bottleneck(MultiKernelBlock):
    pass


class AttentionGate(Module):
    """Additive attention: skip * sigmoid(psi(relu(Wg gate + Wx skip)))."""

    def __init__(self, channels: int, reduction: int, init: _Init):
        super().__init__()
        inter = max(1, channels // reduction)
        self.w_gate = self.add_param("w_gate", init.he_uniform((1, 1, channels, inter), channels))
        self.w_skip = self.add_param("w_skip", init.he_uniform((1, 1, channels, inter), channels))
        self.psi = self.add_param("psi", init.he_uniform((1, 1, inter, 1), inter))
        self.psi_bias = self.add_param("psi_bias", init.constant((1,), 0.0))

    def coefficients(self, skip: Tensor, gate: Tensor) -> Tensor:
        if skip.shape != gate.shape:
            raise ShapeError(f"attention_gate: skip {skip.shape} and gate {gate.shape} differ")
        hidden = T.relu(T.add(T.conv2d(gate, self.w_gate), T.conv2d(skip, self.w_skip)))
        return T.sigmoid(T.conv2d(hidden, self.psi, self.psi_bias))

    def __call__(self, skip: Tensor, gate: Tensor) -> Tensor:
        return T.mul(skip, self.coefficients(skip, gate))


class DecoderBlock(Module):
    def __init__(self, cin: int, cskip: int, cout: int, reduction: int, init: _Init):
        super().__init__()
        self.gate_proj = self.add_param("gate_proj", init.he_uniform((1, 1, cin, cskip), cin))
        self.attention = self.add_child("attention", AttentionGate(cskip, reduction, init))
        self.conv = self.add_child("conv3", SeparableConv(cin + cskip, cout, 3, init))
        self.norm = self.add_child("norm", LayerNorm(cout, init))

    def __call__(self, x: Tensor, skip: Tensor) -> Tensor:
        if (x.ndim != 4 or skip.ndim != 4 or x.shape[0] != skip.shape[0]
                or skip.shape[1] != 2 * x.shape[1] or skip.shape[2] != 2 * x.shape[2]):
            raise ShapeError(f"decoder_block: skip {skip.shape} must be twice the spatial size of {x.shape}")
        up = T.upsample_nearest2d(x)
        gated = self.attention(skip, T.conv2d(up, self.gate_proj))
        return T.relu(self.norm(self.conv(T.concat(up, gated))))


class ClassificationHead(Module):
    def __init__(self, cin: int, hidden: List[int], num_classes: int, init: _Init):
        super().__init__()
        self.layers = []
        widths = [cin, *hidden, num_classes]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            w = self.add_param(f"dense{i}.weight", init.he_uniform((a, b), a))
            bias = self.add_param(f"dense{i}.bias", init.constant((b,), 0.0))
            self.layers.append((w, bias))

    def logits(self, features: Tensor) -> Tensor:
        h = T.global_avg_pool(features)
        for i, (w, b) in enumerate(self.layers):
            h = T.dense(h, w, b)
            if i < len(self.layers) - 1:
                h = T.relu(h)
        return h

    def __call__(self, features: Tensor) -> Tensor:
        return T.softmax(self.logits(features), axis=-1)


class MAGNet(Module):
    """The full multi-task network.  ``forward`` returns (mask_prob, class_prob)."""

    def __init__(self, config: Optional[ModelConfig] = None, seed: int = 0, dtype=None):
        super().__init__()
        self.config = config = config or ModelConfig()
        self.dtype = np.dtype(dtype or T.get_precision())
        init = _Init(seed, self.dtype)

        self.encoders = []
        cin = config.input_channels
        for level, cout in enumerate(config.encoder_channels, start=1):
            self.encoders.append(self.add_child(f"encoder{level}", EncoderBlock(cin, cout, init)))
            cin = cout
        self.bottleneck = self.add_child("bottleneck", Bottleneck(cin, config.bottleneck_channels, init))

        self.decoders = []
        cin = config.bottleneck_channels
        for level in range(len(config.encoder_channels), 0, -1):
            cskip = config.encoder_channels[level - 1]
            block = DecoderBlock(cin, cskip, cskip, config.attention_reduction, init)
            self.decoders.append(self.add_child(f"decoder{level}", block))
            cin = cskip

        seg = self.add_child("seg_head", Module())
        self.seg_weight = seg.add_param("weight", init.he_uniform((1, 1, cin, 1), cin))
        self.seg_bias = seg.add_param("bias", init.constant((1,), 0.0))
        self.classifier = self.add_child(
            "cls_head", ClassificationHead(config.bottleneck_channels, config.head_hidden,
                                           config.num_classes, init))

    def expected_input_shape(self) -> Tuple[int, int, int]:
        c = self.config
        return c.input_height, c.input_width, c.input_channels

    def forward(self, batch) -> Tuple[Tensor, Tensor]:
        x = batch if isinstance(batch, Tensor) else Tensor(batch, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1:] != self.expected_input_shape():
            raise ShapeError(f"forward: expected input (b, {', '.join(map(str, self.expected_input_shape()))}), "
                             f"got {x.shape}")
        skips = []
        for block in self.encoders:
            features, x = block(x)
            skips.append(features)
        deep = self.bottleneck(x)
        x = deep
        for block, skip in zip(self.decoders, reversed(skips)):
            x = block(x, skip)
        mask_prob = T.sigmoid(T.conv2d(x, self.seg_weight, self.seg_bias))
        return mask_prob, self.classifier(deep)

    __call__ = forward

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(self.named_parameters())

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.data.copy()) for name, t in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        for name, t in params.items():
            if name not in state:
                raise CheckpointError(f"checkpoint is missing tensor {name!r}")
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, model expects {t.shape}")
        for name in state:
            if name not in params:
                raise CheckpointError(f"checkpoint has unexpected tensor {name!r}")
        for name, t in params.items():
            t.data = np.array(state[name], dtype=self.dtype)

    def separable_layers(self) -> Iterator[Tuple[str, SeparableConv]]:
        def walk(module, prefix):
            for name, child in module._children.items():
                if isinstance(child, SeparableConv):
                    yield prefix + name, child
                else:
                    yield from walk(child, prefix + name + ".")
        yield from walk(self, "")


@dataclass
class ParameterCount:
    total: int
    blocks: "OrderedDict[str, int]"


def count_parameters(model: Module) -> ParameterCount:
    """Total trainable parameters plus a breakdown keyed by top-level block."""
    blocks: "OrderedDict[str, int]" = OrderedDict()
    for name, t in model.named_parameters():
        block = name.split(".", 1)[0] if "." in name else name
        blocks[block] = blocks.get(block, 0) + t.size
    return ParameterCount(sum(blocks.values()), blocks)


def standard_conv_parameters(kernel_size: int, cin: int, cout: int) -> int:
    return kernel_size * kernel_size * cin * cout


def separable_conv_parameters(kernel_size: int, cin: int, cout: int) -> int:
    return kernel_size * kernel_size * cin + cin * cout


def reduction_ratio(f: int, cin: int, cout: int) -> float:
    """Separable / standard parameter ratio, (f^2 cin + cin cout) / (f^2 cin cout).

    Algebraically this is 1/cout + 1/f^2.
    """
    if f <= 1:
        raise ConfigError("reduction_ratio is undefined for f <= 1 (pointwise only)")
    if cin < 1 or cout < 1:
        raise ConfigError("cin and cout must be >= 1")
    return separable_conv_parameters(f, cin, cout) / standard_conv_parameters(f, cin, cout)
