"""Siamese U-Net change detector: shared encoder, feature-mixing attention masks,
mask-gated upsampling decoder, and a per-pixel classifier head.

The encoder is applied to both input images with a single parameter set, so
branch weight sharing is structural rather than copied.  Mixing strategies and
classifier variants are selected by ``ModelConfig`` flags.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Iterator, Optional

import numpy as np

from . import ops
from .errors import ConfigurationError, ShapeError, ValidationError
from .tensor import Parameter, Tensor

MIXING_STRATEGIES = ("interleave_grouped", "subtraction", "concat_conv")
CLASSIFIERS = ("pw_mlp", "direct_sigmoid")

PRELU_INIT = 0.25


# ---------------------------------------------------------------------------
# minimal module system
# ---------------------------------------------------------------------------


class Module:
    """Parameter container with hierarchical naming, just enough for this model."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, p in self._params.items():
            yield (f"{prefix}{key}", p)
        for key, mod in self._modules.items():
            yield from mod.named_parameters(prefix=f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self._items = list(modules)
        for i, mod in enumerate(self._items):
            self._modules[str(i)] = mod

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, idx):
        return self._items[idx]


def _conv_weight(rng: np.random.Generator, c_out: int, c_in_per_group: int, k: int, dtype) -> Parameter:
    fan_in = c_in_per_group * k * k
    limit = 1.0 / np.sqrt(fan_in)
    return Parameter(rng.uniform(-limit, limit, (c_out, c_in_per_group, k, k)), dtype=dtype)


def _zeros(shape, dtype) -> Parameter:
    return Parameter(np.zeros(shape), dtype=dtype)


def _prelu_slopes(c: int, dtype) -> Parameter:
    return Parameter(np.full((c,), PRELU_INIT), dtype=dtype)


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


class ConvBlock(Module):
    """Encoder stage: 3x3 conv (configurable stride) -> instance norm -> PReLU."""

    def __init__(self, c_in: int, c_out: int, stride: int, rng, dtype):
        super().__init__()
        self.stride = stride
        self.weight = _conv_weight(rng, c_out, c_in, 3, dtype)
        self.bias = _zeros((c_out,), dtype)
        self.slope = _prelu_slopes(c_out, dtype)

    def forward(self, x: Tensor) -> Tensor:
        y = ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=1)
        return ops.prelu(ops.instance_norm(y), self.slope)


class MixBlock(Module):
    """Fuse two same-shape feature stacks into one.

    interleave_grouped: channel-interleave then a grouped 3x3 conv whose 2-deep
    kernels each correlate one semantically matched channel pair.
    subtraction: plain elementwise difference.
    concat_conv: channel stack followed by a full 3x3 conv.
    All variants finish with instance norm and PReLU.
    """

    def __init__(self, channels: int, strategy: str, rng, dtype):
        super().__init__()
        if strategy not in MIXING_STRATEGIES:
            raise ConfigurationError(f"unknown mixing strategy {strategy!r}; expected one of {MIXING_STRATEGIES}")
        self.channels = channels
        self.strategy = strategy
        if strategy == "interleave_grouped":
            self.weight = _conv_weight(rng, channels, 2, 3, dtype)
            self.bias = _zeros((channels,), dtype)
        elif strategy == "concat_conv":
            self.weight = _conv_weight(rng, channels, 2 * channels, 3, dtype)
            self.bias = _zeros((channels,), dtype)
        self.slope = _prelu_slopes(channels, dtype)

    def pre_activation(self, x: Tensor, y: Tensor) -> Tensor:
        """Mixing output before normalization and activation (test tap)."""
        if self.strategy == "interleave_grouped":
            z = ops.interleave_concat(x, y)
            return ops.conv2d(z, self.weight, self.bias, padding=1, groups=self.channels)
        if self.strategy == "concat_conv":
            z = ops.channel_concat(x, y)
            return ops.conv2d(z, self.weight, self.bias, padding=1)
        return x - y

    def forward(self, x: Tensor, y: Tensor) -> Tensor:
        return ops.prelu(ops.instance_norm(self.pre_activation(x, y)), self.slope)

    def set_subtraction_init(self) -> None:
        """Initialize the grouped kernels so the pre-activation equals x - y exactly."""
        if self.strategy != "interleave_grouped":
            raise ConfigurationError("subtraction init only applies to the interleave_grouped strategy")
        w = np.zeros_like(self.weight.data)
        w[:, 0, 1, 1] = 1.0
        w[:, 1, 1, 1] = -1.0
        self.weight.data = w
        self.bias.data = np.zeros_like(self.bias.data)

    @property
    def conv_weight_count(self) -> int:
        """Mixing kernel weights excluding biases (0 for subtraction)."""
        return self.weight.size if self.strategy != "subtraction" else 0


class PixelMLP(Module):
    """MLP over each pixel's channel vector, realized as 1x1 convolutions."""

    def __init__(self, c_in: int, c_out: int, hidden_layers: int, final_activation: str, rng, dtype):
        super().__init__()
        if hidden_layers < 1:
            raise ConfigurationError(f"pixel MLP needs at least 1 hidden layer, got {hidden_layers}")
        if final_activation not in ("prelu", "sigmoid"):
            raise ConfigurationError(f"unknown final activation {final_activation!r}")
        self.final_activation = final_activation
        self.hidden = ModuleList(
            [_PointwiseLayer(c_in, c_in, rng, dtype) for _ in range(hidden_layers)]
        )
        self.final_weight = _conv_weight(rng, c_out, c_in, 1, dtype)
        self.final_bias = _zeros((c_out,), dtype)
        if final_activation == "prelu":
            self.final_slope = _prelu_slopes(c_out, dtype)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.hidden:
            x = layer.forward(x)
        x = ops.conv2d(x, self.final_weight, self.final_bias)
        if self.final_activation == "prelu":
            return ops.prelu(x, self.final_slope)
        return ops.sigmoid(x)


class _PointwiseLayer(Module):
    def __init__(self, c_in: int, c_out: int, rng, dtype):
        super().__init__()
        self.weight = _conv_weight(rng, c_out, c_in, 1, dtype)
        self.bias = _zeros((c_out,), dtype)
        self.slope = _prelu_slopes(c_out, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.prelu(ops.conv2d(x, self.weight, self.bias), self.slope)


class MaskBlock(Module):
    """Mixing block + pixel MLP producing a single-channel spatial attention mask."""

    def __init__(self, channels: int, strategy: str, hidden_layers: int, rng, dtype):
        super().__init__()
        self.mix = MixBlock(channels, strategy, rng, dtype)
        self.mlp = PixelMLP(channels, 1, hidden_layers, "prelu", rng, dtype)

    def forward(self, x: Tensor, y: Tensor) -> Tensor:
        return self.mlp.forward(self.mix.forward(x, y))


class UpBlock(Module):
    """Double the resolution, optionally gate by a mask, then refine.

    Refinement is a depthwise separable 3x3 convolution followed by instance
    norm and PReLU; channel width moves from c_in to c_out.
    """

    def __init__(self, c_in: int, c_out: int, rng, dtype):
        super().__init__()
        self.depthwise = _conv_weight(rng, c_in, 1, 3, dtype)
        self.pointwise = _conv_weight(rng, c_out, c_in, 1, dtype)
        self.bias = _zeros((c_out,), dtype)
        self.slope = _prelu_slopes(c_out, dtype)

    def forward(self, u: Tensor, mask: Optional[Tensor]) -> Tensor:
        n, c, h, w = u.shape
        up = ops.bilinear_upsample(u, 2 * h, 2 * w)
        if mask is not None:
            if mask.shape[2:] != up.shape[2:]:
                raise ShapeError(
                    f"mask resolution {mask.shape[2:]} does not match upsampled features {up.shape[2:]}"
                )
            up = ops.hadamard_mask(up, mask)
        y = ops.depthwise_separable_conv(up, self.depthwise, self.pointwise, self.bias)
        return ops.prelu(ops.instance_norm(y), self.slope)


class DirectHead(Module):
    """Classifier without the MLP: a single 1x1 conv squeezing to one channel + sigmoid."""

    def __init__(self, c_in: int, rng, dtype):
        super().__init__()
        self.weight = _conv_weight(rng, 1, c_in, 1, dtype)
        self.bias = _zeros((1,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.sigmoid(ops.conv2d(x, self.weight, self.bias))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    backbone_widths: tuple[int, ...] = (16, 24, 32)
    backbone_strides: tuple[int, ...] = (2, 2, 2)
    mamb_hidden_layers: int = 2
    mixing_strategy_bottleneck: str = "interleave_grouped"
    mixing_strategy_skip: str = "interleave_grouped"
    classifier: str = "pw_mlp"
    use_skip_connections: bool = True
    input_channels: int = 3

    def __post_init__(self):
        self.backbone_widths = tuple(int(w) for w in self.backbone_widths)
        self.backbone_strides = tuple(int(s) for s in self.backbone_strides)
        self.validate()

    def validate(self) -> None:
        if len(self.backbone_widths) != len(self.backbone_strides) or not self.backbone_widths:
            raise ConfigurationError(
                f"backbone_widths ({len(self.backbone_widths)}) and backbone_strides "
                f"({len(self.backbone_strides)}) must be equal-length and non-empty"
            )
        if any(w < 1 for w in self.backbone_widths):
            raise ConfigurationError(f"backbone widths must be positive, got {self.backbone_widths}")
        if any(s not in (1, 2) for s in self.backbone_strides):
            raise ConfigurationError(f"backbone strides must be 1 or 2, got {self.backbone_strides}")
        if self.mamb_hidden_layers < 1:
            raise ConfigurationError(f"mamb_hidden_layers must be >= 1, got {self.mamb_hidden_layers}")
        for name in ("mixing_strategy_bottleneck", "mixing_strategy_skip"):
            if getattr(self, name) not in MIXING_STRATEGIES:
                raise ConfigurationError(f"{name} must be one of {MIXING_STRATEGIES}, got {getattr(self, name)!r}")
        if self.classifier not in CLASSIFIERS:
            raise ConfigurationError(f"classifier must be one of {CLASSIFIERS}, got {self.classifier!r}")
        if self.input_channels < 1:
            raise ConfigurationError(f"input_channels must be >= 1, got {self.input_channels}")

    @property
    def cumulative_stride(self) -> int:
        out = 1
        for s in self.backbone_strides:
            out *= s
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_widths"] = list(self.backbone_widths)
        d["backbone_strides"] = list(self.backbone_strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class _SkipSource:
    level: int  # 0 = raw input images, 1..K = encoder stages
    channels: int
    stride: int  # cumulative downsampling factor of this source


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------


class TinyCDModel(Module):
    """Change-probability map from a registered image pair.

    The last encoder stage feeds the bottleneck mix; every coarser-to-finer
    decoder stage doubles resolution and is gated by an attention mask computed
    from the deepest feature source available at that resolution (the raw
    images serve as the full-resolution source).
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)

        widths = config.backbone_widths
        strides = config.backbone_strides
        c_in = config.input_channels

        blocks = []
        prev = c_in
        for w, s in zip(widths, strides):
            blocks.append(ConvBlock(prev, w, s, rng, dtype))
            prev = w
        self.encoder = ModuleList(blocks)

        self.bottleneck = MixBlock(widths[-1], config.mixing_strategy_bottleneck, rng, dtype)

        self._skip_plan = self._build_skip_plan()
        if config.use_skip_connections:
            self.masks = ModuleList(
                [
                    MaskBlock(src.channels, config.mixing_strategy_skip, config.mamb_hidden_layers, rng, dtype)
                    for src in self._skip_plan
                ]
            )

        ups = []
        current = widths[-1]
        for src in self._skip_plan:
            out_ch = src.channels if src.level >= 1 else widths[0]
            ups.append(UpBlock(current, out_ch, rng, dtype))
            current = out_ch
        self.decoder = ModuleList(ups)

        if config.classifier == "pw_mlp":
            self.head = PixelMLP(current, 1, config.mamb_hidden_layers, "sigmoid", rng, dtype)
        else:
            self.head = DirectHead(current, rng, dtype)

        for name, p in self.named_parameters():
            p.name = name

    # -- construction helpers ----------------------------------------------

    def _build_skip_plan(self) -> list[_SkipSource]:
        """One decoder stage per factor-2 of total downsampling, finest last.

        For each decoder output resolution, the skip source is the deepest
        level (raw images count as level 0) matching that resolution; the last
        encoder level is reserved for the bottleneck.
        """
        cfg = self.config
        sources = [_SkipSource(0, cfg.input_channels, 1)]
        cum = 1
        for k, (w, s) in enumerate(zip(cfg.backbone_widths, cfg.backbone_strides), start=1):
            cum *= s
            if k < len(cfg.backbone_widths):
                sources.append(_SkipSource(k, w, cum))
        plan = []
        target = cum // 2
        while target >= 1:
            best = max((s for s in sources if s.stride == target), key=lambda s: s.level)
            plan.append(best)
            target //= 2
        return plan

    @property
    def skip_plan(self) -> list[_SkipSource]:
        return list(self._skip_plan)

    # -- forward -------------------------------------------------------------

    def backbone_forward(self, image: Tensor) -> tuple[list[Tensor], Tensor]:
        """Feature stack per encoder stage and the final embedding (shared weights)."""
        self._check_input(image)
        features = []
        x = image
        for block in self.encoder:
            x = block.forward(x)
            features.append(x)
        return features, features[-1]

    def forward(self, i1: Tensor, i2: Tensor) -> Tensor:
        return self._run(i1, i2)[0]

    def forward_with_masks(self, i1: Tensor, i2: Tensor) -> tuple[Tensor, list[tuple[int, Tensor]]]:
        """Prediction plus the per-stage attention masks as (stride, mask) pairs."""
        return self._run(i1, i2)

    def _run(self, i1: Tensor, i2: Tensor):
        if i1.shape != i2.shape:
            raise ValidationError(f"image pair shapes differ: {i1.shape} vs {i2.shape}")
        feats1, emb1 = self.backbone_forward(i1)
        feats2, emb2 = self.backbone_forward(i2)
        by_level1 = {0: i1, **{k + 1: f for k, f in enumerate(feats1)}}
        by_level2 = {0: i2, **{k + 1: f for k, f in enumerate(feats2)}}

        u = self.bottleneck.forward(emb1, emb2)
        masks: list[tuple[int, Tensor]] = []
        for stage, src in enumerate(self._skip_plan):
            mask = None
            if self.config.use_skip_connections:
                mask = self.masks[stage].forward(by_level1[src.level], by_level2[src.level])
                masks.append((src.stride, mask))
            u = self.decoder[stage].forward(u, mask)
        return self.head.forward(u), masks

    def _check_input(self, image: Tensor) -> None:
        if image.data.ndim != 4:
            raise ValidationError(f"expected N x C x H x W input, got shape {image.shape}")
        n, c, h, w = image.shape
        if c != self.config.input_channels:
            raise ValidationError(f"expected {self.config.input_channels} input channels, got {c}")
        cum = self.config.cumulative_stride
        if h % cum or w % cum:
            raise ConfigurationError(
                f"input spatial size {h}x{w} must be divisible by the cumulative stride {cum}"
            )

    # -- bookkeeping -----------------------------------------------------------

    def mixing_weight_counts(self) -> dict[str, int]:
        """Kernel-weight-only counts of every mixing block (biases excluded)."""
        counts = {"bottleneck": self.bottleneck.conv_weight_count}
        if self.config.use_skip_connections:
            for stage, src in enumerate(self._skip_plan):
                counts[f"skip_stride{src.stride}"] = self.masks[stage].mix.conv_weight_count
        return counts

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        """Replace parameter values; any name/shape discrepancy is a compatibility error."""
        from .errors import CheckpointCompatibilityError

        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise CheckpointCompatibilityError(
                f"parameter sets differ: missing {missing[:3]}, unexpected {unexpected[:3]}"
            )
        for name in sorted(own):
            if own[name].shape != state[name].shape:
                raise CheckpointCompatibilityError(
                    f"tensor {name!r} has shape {state[name].shape} in checkpoint, expected {own[name].shape}"
                )
        for name, p in own.items():
            p.data = np.ascontiguousarray(state[name])
            p.grad = np.zeros_like(p.data)


def param_count(module: Module) -> int:
    """Exact number of scalar parameters including biases and PReLU slopes."""
    return module.param_count()
