"""Seven-block conditional U-Net.

Layout (widths w0..w6, spatial size H at the top)::

    enc0  H     conv(in->w0)      conv(w0->w0)
    enc1  H/2   conv(w0->w1, s2)  conv(w1->w1)
    enc2  H/4   conv(w1->w2, s2)  conv(w2->w2)
    center H/8  conv(w2->w3, s2)  conv(w3->w3)
    dec0  H/4   up(w3->w4) ++ enc2  conv(w4+w2->w4)  conv(w4->w4)
    dec1  H/2   up(w4->w5) ++ enc1  conv(w5+w1->w5)  conv(w5->w5)
    dec2  H     up(w5->w6) ++ enc0  conv(w6+w0->w6)  conv(w6->w6)
    head  1x1 conv(w6->1), logits

Every conv is followed by a conditional instance norm and a leaky ReLU,
giving 14 normalization layers. Dropout runs once per block, after the
second activation. ``up`` is a 2x2 stride-2 transposed convolution and
``++`` is channel concatenation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import functional as F
from .conditioning import IMAGE, ConditionBank, ConditioningMode, FilmGenerator, film_condition
from .rng import Rng
from .tensor import DimensionError, Tensor, concat

NUM_BLOCKS = 7
NUM_NORM_LAYERS = 2 * NUM_BLOCKS
DEFAULT_WIDTHS = (8, 16, 32, 64, 32, 16, 8)
BLOCK_NAMES = ("enc0", "enc1", "enc2", "center", "dec0", "dec1", "dec2")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    in_channels: int = 2
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    dropout_p: float = 0.1
    leaky_slope: float = F.LEAKY_SLOPE
    conditioning: ConditioningMode = field(default_factory=ConditioningMode.naive)
    seed: int = 0
    film_widths: tuple[int, ...] = (8, 16, 32)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.film_widths = tuple(int(w) for w in self.film_widths)
        if len(self.widths) != NUM_BLOCKS:
            raise ConfigError(f"widths needs {NUM_BLOCKS} entries, got {len(self.widths)}")
        if any(self.widths[i] != self.widths[NUM_BLOCKS - 1 - i] for i in range(NUM_BLOCKS)):
            raise ConfigError(f"widths must be symmetric about the center block, got {list(self.widths)}")
        if any(w < 1 for w in self.widths) or self.in_channels < 1:
            raise ConfigError("channel counts must be positive")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if not 0 < self.leaky_slope < 1:
            raise ConfigError(f"leaky_slope must be in (0, 1), got {self.leaky_slope}")
        if isinstance(self.conditioning, dict):
            self.conditioning = ConditioningMode.from_dict(self.conditioning)

    @property
    def norm_widths(self) -> list[int]:
        return [w for w in self.widths for _ in range(2)]

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "widths": list(self.widths),
            "dropout_p": self.dropout_p,
            "leaky_slope": self.leaky_slope,
            "conditioning": self.conditioning.to_dict(),
            "seed": self.seed,
            "film_widths": list(self.film_widths),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {"in_channels", "widths", "dropout_p", "leaky_slope", "conditioning", "seed", "film_widths"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _he_normal(gen: np.random.Generator, shape, fan_in: int, slope: float) -> np.ndarray:
    return gen.normal(0.0, np.sqrt(2.0 / ((1 + slope**2) * fan_in)), size=shape)


class SegmentationNet:
    """The conditional U-Net. Build with :func:`build`."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.training = False
        gen = Rng(config.seed).stream("init", "backbone")
        slope = config.leaky_slope
        w = config.widths
        self.convs: dict[str, tuple[Tensor, Tensor]] = {}
        self.ups: dict[str, tuple[Tensor, Tensor]] = {}

        def conv(name, cin, cout, k=3):
            weight = Tensor(_he_normal(gen, (cout, cin, k, k), cin * k * k, slope), True, f"{name}.weight")
            bias = Tensor(np.zeros(cout), True, f"{name}.bias")
            self.convs[name] = (weight, bias)

        cin = config.in_channels
        for b in range(4):
            conv(f"{BLOCK_NAMES[b]}.conv0", cin, w[b])
            conv(f"{BLOCK_NAMES[b]}.conv1", w[b], w[b])
            cin = w[b]
        for b in range(4, NUM_BLOCKS):
            name = BLOCK_NAMES[b]
            skip = w[NUM_BLOCKS - 1 - b]
            self.ups[name] = (
                Tensor(_he_normal(gen, (cin, w[b], 2, 2), cin, slope), True, f"{name}.up.weight"),
                Tensor(np.zeros(w[b]), True, f"{name}.up.bias"),
            )
            conv(f"{name}.conv0", w[b] + skip, w[b])
            conv(f"{name}.conv1", w[b], w[b])
            cin = w[b]
        self.head = (
            Tensor(gen.normal(0.0, np.sqrt(1.0 / w[-1]), size=(1, w[-1], 1, 1)), True, "head.weight"),
            Tensor(np.zeros(1), True, "head.bias"),
        )

        if config.conditioning.kind == IMAGE:
            self.bank = None
            self.film = FilmGenerator(config.in_channels, config.norm_widths, config.film_widths,
                                      seed=config.seed, slope=slope)
        else:
            self.bank = ConditionBank(config.norm_widths, config.conditioning)
            self.film = None

    # -- parameter access -------------------------------------------------
    def backbone_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name in BLOCK_NAMES:
            if name in self.ups:
                for t in self.ups[name]:
                    out[t.name] = t
            for k in ("conv0", "conv1"):
                for t in self.convs[f"{name}.{k}"]:
                    out[t.name] = t
        for t in self.head:
            out[t.name] = t
        return out

    def conditioning_parameters(self) -> dict[str, Tensor]:
        return self.film.parameters() if self.film is not None else self.bank.parameters()

    def parameters(self) -> dict[str, Tensor]:
        return {**self.backbone_parameters(), **self.conditioning_parameters()}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def train(self) -> "SegmentationNet":
        self.training = True
        return self

    def eval(self) -> "SegmentationNet":
        self.training = False
        return self

    def add_source(self, source: str, copy_from: str | None = None) -> int:
        """Add a parameter set for a new source; returns its set index."""
        if self.bank is None:
            raise ValueError("image-conditioned models have no per-source parameter sets")
        index = self.bank.add_source(source, copy_from)
        self.config = replace(self.config, conditioning=self.bank.mode)
        return index

    @property
    def mode(self) -> ConditioningMode:
        return self.bank.mode if self.bank is not None else self.config.conditioning

    # -- forward ----------------------------------------------------------
    def forward(self, images, sources: Sequence | None = None, rng: np.random.Generator | None = None,
                skip_scale: Sequence[float] | None = None) -> Tensor:
        """Logits of shape N, 1, H, W.

        ``sources`` gives each item's source id (ignored by image
        conditioning; optional for naive). ``rng`` drives dropout in train
        mode. ``skip_scale`` multiplies the three skip tensors (deepest
        last) and exists for wiring diagnostics.
        """
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise DimensionError(
                f"expected images of shape N,{self.config.in_channels},H,W, got {x.shape}")
        n, _, h, w = x.shape
        if h % 8 or w % 8:
            raise DimensionError(
                f"spatial size {h}x{w} is not divisible by 8; pad the input to a multiple of 8")

        if self.film is not None:
            affines = film_condition(x, self.film)
        else:
            if sources is None:
                if self.mode.kind != "naive":
                    raise ValueError(f"{self.mode.kind} conditioning needs per-item source ids")
                sources = ["*"] * n
            if len(sources) != n:
                raise DimensionError(f"got {len(sources)} source ids for a batch of {n}")
            index = self.bank.resolve(sources)
            affines = [self.bank.affine(l, index) for l in range(NUM_NORM_LAYERS)]

        slope = self.config.leaky_slope
        p = self.config.dropout_p

        def unit(h, conv_name, layer, stride=1):
            wgt, bias = self.convs[conv_name]
            z = F.conv2d(h, wgt, bias, stride=stride)
            gamma, beta = affines[layer]
            return F.leaky_relu(F.modulate(F.instance_norm(z), gamma, beta), slope)

        def block(h, b, stride):
            name = BLOCK_NAMES[b]
            h = unit(h, f"{name}.conv0", 2 * b, stride)
            h = unit(h, f"{name}.conv1", 2 * b + 1)
            return F.dropout(h, p, rng, self.training)

        skips = []
        h = x
        for b in range(3):
            h = block(h, b, 1 if b == 0 else 2)
            skips.append(h)
        h = block(h, 3, 2)
        for b in range(4, NUM_BLOCKS):
            up_w, up_b = self.ups[BLOCK_NAMES[b]]
            h = F.conv_transpose2x(h, up_w, up_b)
            skip = skips[NUM_BLOCKS - 1 - b]
            if skip_scale is not None:
                skip = skip * skip_scale[NUM_BLOCKS - 1 - b]
            h = block(concat([h, skip], axis=1), b, 1)
        return F.conv2d(h, *self.head)

    __call__ = forward


def build(config: ModelConfig) -> SegmentationNet:
    return SegmentationNet(config)


def count_norm_layers(model: SegmentationNet) -> int:
    return len(model.config.norm_widths)


def clone(model: SegmentationNet, **config_changes) -> SegmentationNet:
    """Deep copy of ``model``; parameters shared by name are copied over."""
    cfg = replace(model.config, **config_changes) if config_changes else model.config
    twin = SegmentationNet(cfg)
    load_state(twin, state_dict(model))
    return twin


def state_dict(model: SegmentationNet) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in model.parameters().items()}


def load_state(model: SegmentationNet, state: dict[str, np.ndarray], strict: bool = True) -> None:
    params = model.parameters()
    if strict:
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
    for name, arr in state.items():
        if name not in params:
            continue
        if params[name].shape != arr.shape:
            raise DimensionError(f"{name}: expected shape {params[name].shape}, got {arr.shape}")
        params[name].data[...] = arr
