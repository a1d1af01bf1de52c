"""Source-conditioned instance normalization and its parameter sources.

Two ways of supplying the per-channel scale (gamma) and shift (beta) that
follow each instance normalization:

* :class:`ConditionBank` - a lookup table of parameter sets, one set per
  source, per group of sources, or a single shared set. Each item in a
  batch picks its own set through its source id.
* :class:`FilmGenerator` - a small image encoder plus one linear head per
  normalization layer, producing gamma and beta from the image itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import functional as F
from .rng import Rng
from .tensor import DimensionError, Tensor, stack, take_rows

NAIVE, PER_SOURCE, GROUPED, IMAGE = "naive", "per_source", "grouped", "image"
POOLED_SET = "pooled"


class UnknownSource(KeyError):
    """A source id that the conditioning cannot map to a parameter set."""

    def __init__(self, source):
        super().__init__(source)
        self.source = source

    def __str__(self) -> str:
        return f"unknown source {self.source!r}"


@dataclass(frozen=True)
class ConditioningMode:
    """How source ids map to normalization parameters.

    ``groups`` holds one tuple of source ids per parameter set. It is empty
    for naive and image modes and holds singletons for per-source mode.
    """

    kind: str
    groups: tuple[tuple[str, ...], ...] = ()

    def __post_init__(self):
        if self.kind not in (NAIVE, PER_SOURCE, GROUPED, IMAGE):
            raise ValueError(f"unknown conditioning kind {self.kind!r}")
        groups = tuple(tuple(str(s) for s in g) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        seen: set[str] = set()
        for g in groups:
            if not g:
                raise ValueError("conditioning groups must be non-empty")
            for s in g:
                if s in seen:
                    raise ValueError(f"source {s!r} appears in more than one group")
                seen.add(s)
        if self.kind == PER_SOURCE and any(len(g) != 1 for g in groups):
            raise ValueError("per-source conditioning needs one source per parameter set")
        if self.kind in (PER_SOURCE, GROUPED) and not groups:
            raise ValueError(f"{self.kind} conditioning needs at least one source")
        if self.kind in (NAIVE, IMAGE) and groups:
            raise ValueError(f"{self.kind} conditioning takes no source groups")

    @classmethod
    def naive(cls) -> "ConditioningMode":
        return cls(NAIVE)

    @classmethod
    def per_source(cls, sources: Sequence[str]) -> "ConditioningMode":
        return cls(PER_SOURCE, tuple((s,) for s in sources))

    @classmethod
    def grouped(cls, groups: Sequence[Sequence[str]]) -> "ConditioningMode":
        return cls(GROUPED, tuple(tuple(g) for g in groups))

    @classmethod
    def image(cls) -> "ConditioningMode":
        return cls(IMAGE)

    @property
    def sources(self) -> tuple[str, ...]:
        return tuple(s for g in self.groups for s in g)

    @property
    def set_names(self) -> list[str]:
        if self.kind == NAIVE:
            return [POOLED_SET]
        return ["+".join(g) for g in self.groups]

    def source_map(self) -> dict[str, int]:
        return {s: i for i, g in enumerate(self.groups) for s in g}

    def with_new_source(self, source: str) -> "ConditioningMode":
        if source in self.sources:
            raise ValueError(f"source {source!r} already has a parameter set")
        return ConditioningMode(self.kind, self.groups + ((source,),))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "groups": [list(g) for g in self.groups]}

    @classmethod
    def from_dict(cls, d: dict) -> "ConditioningMode":
        return cls(d["kind"], tuple(tuple(g) for g in d.get("groups", ())))

    def __str__(self) -> str:
        if self.kind in (NAIVE, IMAGE):
            return self.kind
        return f"{self.kind}({' | '.join(','.join(g) for g in self.groups)})"


def resolve_parameter_set(source, mode: ConditioningMode, bank: "ConditionBank | None" = None) -> int:
    """Index of the parameter set that ``source`` uses under ``mode``."""
    if mode.kind == IMAGE:
        raise ValueError("image conditioning has no parameter sets to resolve")
    if mode.kind == NAIVE:
        return 0
    table = bank.source_map if bank is not None else mode.source_map()
    try:
        return table[str(source)]
    except KeyError:
        raise UnknownSource(source) from None


class ConditionBank:
    """Per-layer, per-set (gamma, beta) vectors, initialized to (1, 0).

    ``layers[l][k]`` is the (gamma, beta) pair of parameter set ``k`` at
    normalization layer ``l``.
    """

    def __init__(self, widths: Sequence[int], mode: ConditioningMode):
        if mode.kind == IMAGE:
            raise ValueError("image conditioning does not use a parameter bank")
        self.widths = [int(w) for w in widths]
        self.mode = mode
        self.set_names: list[str] = []
        self.layers: list[list[tuple[Tensor, Tensor]]] = [[] for _ in self.widths]
        for name in mode.set_names:
            self._append_set(name)

    @property
    def source_map(self) -> dict[str, int]:
        return self.mode.source_map()

    @property
    def num_sets(self) -> int:
        return len(self.set_names)

    def _append_set(self, name: str, copy_from: int | None = None) -> int:
        k = len(self.set_names)
        self.set_names.append(name)
        for l, width in enumerate(self.widths):
            if copy_from is None:
                g, b = np.ones(width), np.zeros(width)
            else:
                g0, b0 = self.layers[l][copy_from]
                g, b = g0.data.copy(), b0.data.copy()
            self.layers[l].append((
                Tensor(g, requires_grad=True, name=self.param_name(l, name, "gamma")),
                Tensor(b, requires_grad=True, name=self.param_name(l, name, "beta")),
            ))
        return k

    def add_source(self, source: str, copy_from: str | None = None) -> int:
        """Give a new source its own parameter set (fresh or copied)."""
        if self.mode.kind == NAIVE:
            raise ValueError("a naive (single-set) bank cannot take per-source parameter sets")
        src_index = None if copy_from is None else resolve_parameter_set(copy_from, self.mode, self)
        self.mode = self.mode.with_new_source(source)
        return self._append_set(source, src_index)

    @staticmethod
    def param_name(layer: int, set_name: str, which: str) -> str:
        return f"scin{layer:02d}.{set_name}.{which}"

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for pairs in self.layers:
            for g, b in pairs:
                out[g.name] = g
                out[b.name] = b
        return out

    def resolve(self, sources: Sequence) -> np.ndarray:
        return np.array([resolve_parameter_set(s, self.mode, self) for s in sources], dtype=np.intp)

    def affine(self, layer: int, set_index: np.ndarray) -> tuple[Tensor, Tensor]:
        """Gather per-item gamma and beta (each N, C) for one layer.

        Only the sets present in the batch enter the graph, so unused sets
        receive no gradient at all.
        """
        used, inverse = np.unique(set_index, return_inverse=True)
        pairs = self.layers[layer]
        gammas = stack([pairs[k][0] for k in used])
        betas = stack([pairs[k][1] for k in used])
        return take_rows(gammas, inverse), take_rows(betas, inverse)

    def arrays(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """gamma and beta per layer as (num_sets, width) arrays."""
        gam = [np.stack([g.data for g, _ in pairs]) for pairs in self.layers]
        bet = [np.stack([b.data for _, b in pairs]) for pairs in self.layers]
        return gam, bet


def scin_forward(z: Tensor, source_ids: Sequence, bank: ConditionBank, layer_index: int,
                 eps: float = F.INSTANCE_NORM_EPS) -> Tensor:
    """Instance-normalize ``z`` and apply each item's own (gamma, beta)."""
    if not 0 <= layer_index < len(bank.widths):
        raise IndexError(f"layer_index {layer_index} out of range for {len(bank.widths)} layers")
    if z.ndim != 4 or z.shape[1] != bank.widths[layer_index]:
        raise DimensionError(
            f"scin layer {layer_index}: expected {bank.widths[layer_index]} channels, got shape {z.shape}")
    if len(source_ids) != z.shape[0]:
        raise DimensionError(f"got {len(source_ids)} source ids for a batch of {z.shape[0]}")
    gamma, beta = bank.affine(layer_index, bank.resolve(source_ids))
    return F.modulate(F.instance_norm(z, eps), gamma, beta)


class FilmGenerator:
    """Image encoder + one linear head per normalization layer.

    The encoder is a stack of stride-2 3x3 convolutions with leaky ReLU,
    followed by global average pooling. Each head maps the latent vector to
    ``2 * C_layer`` numbers: gamma first, then beta. Heads start with zero
    weights and a (1..1, 0..0) bias, so a fresh generator is the identity
    modulation for every image.
    """

    def __init__(self, in_channels: int, layer_widths: Sequence[int], encoder_widths=(8, 16, 32),
                 seed: int = 0, slope: float = F.LEAKY_SLOPE):
        self.layer_widths = [int(w) for w in layer_widths]
        self.encoder_widths = [int(w) for w in encoder_widths]
        self.slope = slope
        gen = Rng(seed).stream("init", "film")
        self.encoder: list[tuple[Tensor, Tensor]] = []
        cin = in_channels
        for i, cout in enumerate(self.encoder_widths):
            std = np.sqrt(2.0 / (1 + slope**2) / (cin * 9))
            w = Tensor(gen.normal(0.0, std, size=(cout, cin, 3, 3)), True, f"film.enc{i}.weight")
            b = Tensor(np.zeros(cout), True, f"film.enc{i}.bias")
            self.encoder.append((w, b))
            cin = cout
        self.latent = cin
        self.heads: list[tuple[Tensor, Tensor]] = []
        for l, width in enumerate(self.layer_widths):
            w = Tensor(np.zeros((2 * width, self.latent)), True, f"film.head{l:02d}.weight")
            b = Tensor(np.concatenate([np.ones(width), np.zeros(width)]), True, f"film.head{l:02d}.bias")
            self.heads.append((w, b))

    def encoder_parameters(self) -> dict[str, Tensor]:
        return {t.name: t for pair in self.encoder for t in pair}

    def head_parameters(self) -> dict[str, Tensor]:
        return {t.name: t for pair in self.heads for t in pair}

    def parameters(self) -> dict[str, Tensor]:
        return {**self.encoder_parameters(), **self.head_parameters()}

    def encode(self, image: Tensor) -> Tensor:
        h = image
        for w, b in self.encoder:
            h = F.leaky_relu(F.conv2d(h, w, b, stride=2), self.slope)
        return F.global_avg_pool(h)


def film_condition(image: Tensor, gen: FilmGenerator) -> list[tuple[Tensor, Tensor]]:
    """Per-item (gamma, beta), each of shape (N, C_l), for every layer."""
    latent = gen.encode(image)
    out = []
    for (w, b), width in zip(gen.heads, gen.layer_widths):
        params = F.linear(latent, w, b)
        out.append((params[:, :width], params[:, width:]))
    return out


FULL, NORM_AFFINE_ONLY = "full", "norm_affine_only"


def trainable_mask(mode: str, model) -> dict[str, Tensor]:
    """Parameters that an optimizer may touch.

    ``norm_affine_only`` keeps just the normalization affine parameters:
    the bank's sets, or the FiLM heads for an image-conditioned model.
    """
    if mode == FULL:
        return model.parameters()
    if mode == NORM_AFFINE_ONLY:
        if model.film is not None:
            return model.film.head_parameters()
        return model.bank.parameters()
    raise ValueError(f"unknown trainable mask {mode!r}")
