"""Synthetic multi-cohort lesion phantoms with cohort-specific label styles.

Every cohort draws images from the same recipe; cohorts differ only in the
deterministic *style* applied to the clean lesion mask, which stands in for
an annotation protocol.

Recipe per sample (channel 0 = "anatomy", channel 1 = "marker"):

* a smooth background made of three broad, low-amplitude Gaussian blobs;
* 2-8 elliptical Gaussian lesions of unit peak, sized so the half-max
  contour has radius 1-6 px; the clean lesion field is their sum and the
  base truth is ``field >= 0.5``;
* with probability ``marker_prob`` a bright blob of peak 1 in channel 1;
* additive Gaussian pixel noise (sigma 0.05) on both image channels.

Images are rounded to float32 at generation so that the on-disk container
round-trips bit-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .metrics import connected_components
from .rng import Rng

SCHEMA_VERSION = 1
MARKER_THRESHOLD = 0.5
IN_CHANNELS = 2
# exp(-d^2 / (2 s^2)) = 1/2 at d = s * sqrt(2 ln 2)
_HALF_MAX = math.sqrt(2.0 * math.log(2.0))


class DataError(ValueError):
    pass


# -- morphology -------------------------------------------------------------

def disc_offsets(radius: int) -> list[tuple[int, int]]:
    """Integer offsets (dy, dx) with dy^2 + dx^2 <= radius^2.

    Radius 1 gives the 5-pixel plus, radius 2 a 13-pixel diamond-ish disc.
    """
    r = int(radius)
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy * dy + dx * dx <= r * r]


def _shifted(mask: np.ndarray, dy: int, dx: int, fill: bool) -> np.ndarray:
    h, w = mask.shape
    out = np.full((h, w), fill, dtype=bool)
    if abs(dy) >= h or abs(dx) >= w:
        return out
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = mask[ys, xs]
    return out


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros_like(mask)
    for dy, dx in disc_offsets(radius):
        out |= _shifted(mask, dy, dx, False)
    return out


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary erosion; pixels outside the image count as background."""
    mask = np.asarray(mask, dtype=bool)
    out = np.ones_like(mask)
    for dy, dx in disc_offsets(radius):
        out &= _shifted(mask, dy, dx, False)
    return out


def remove_small(mask: np.ndarray, max_size: int, connectivity: int = 8) -> np.ndarray:
    labels, sizes = connected_components(mask, connectivity)
    keep = np.zeros(len(sizes) + 1, dtype=bool)
    keep[1:] = np.asarray(sizes) > max_size
    return keep[labels]


# -- styles -----------------------------------------------------------------

IDENTITY, REMOVE_SMALL, GROW, SHRINK, DILATE_IF_MARKER = (
    "identity", "remove_small", "grow", "shrink", "dilate_if_marker")
_STYLE_KINDS = (IDENTITY, REMOVE_SMALL, GROW, SHRINK, DILATE_IF_MARKER)


@dataclass(frozen=True)
class StyleTransform:
    """A deterministic label-space transform (one annotation protocol).

    ``size`` is the pixel threshold for ``remove_small`` and the disc
    radius for the morphological kinds.
    """

    kind: str = IDENTITY
    size: int = 0

    def __post_init__(self):
        if self.kind not in _STYLE_KINDS:
            raise DataError(f"unknown style kind {self.kind!r}; expected one of {_STYLE_KINDS}")
        if self.kind != IDENTITY and self.size < 1:
            raise DataError(f"style {self.kind} needs a positive size, got {self.size}")

    @classmethod
    def parse(cls, text: str) -> "StyleTransform":
        """``"identity"``, ``"grow:1"``, ``"remove_small:10"`` ..."""
        kind, _, size = str(text).partition(":")
        return cls(kind.strip(), int(size) if size else 0)

    def __str__(self) -> str:
        return self.kind if self.kind == IDENTITY else f"{self.kind}:{self.size}"

    def apply(self, base: np.ndarray, image: np.ndarray | None = None) -> np.ndarray:
        return apply_style(base, image, self)


Identity = StyleTransform()


def RemoveSmall(max_size: int) -> StyleTransform:
    return StyleTransform(REMOVE_SMALL, max_size)


def BoundaryGrow(radius: int) -> StyleTransform:
    return StyleTransform(GROW, radius)


def BoundaryShrink(radius: int) -> StyleTransform:
    return StyleTransform(SHRINK, radius)


def DilateIfMarker(radius: int) -> StyleTransform:
    return StyleTransform(DILATE_IF_MARKER, radius)


def has_marker(image: np.ndarray) -> bool:
    return bool(np.asarray(image)[1].max() > MARKER_THRESHOLD)


def apply_style(base: np.ndarray, image: np.ndarray | None, style: StyleTransform) -> np.ndarray:
    base = np.asarray(base)
    if base.dtype != bool:
        if not np.isin(base, (0, 1)).all():
            raise DataError("style input must be a binary mask")
        base = base.astype(bool)
    if style.kind == IDENTITY:
        return base.copy()
    if style.kind == REMOVE_SMALL:
        return remove_small(base, style.size)
    if style.kind == GROW:
        return dilate(base, style.size)
    if style.kind == SHRINK:
        return erode(base, style.size)
    if image is None:
        raise DataError("dilate_if_marker needs the image to look for the marker")
    return dilate(base, style.size) if has_marker(image) else base.copy()


# -- cohorts ----------------------------------------------------------------

@dataclass
class CohortSpec:
    source: str
    n_samples: int = 60
    style: StyleTransform = Identity
    lesion_count: tuple[int, int] = (2, 8)
    lesion_radius: tuple[float, float] = (1.0, 6.0)
    marker_prob: float = 0.0
    noise: float = 0.05
    seed: int = 0
    image_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        if isinstance(self.style, str):
            self.style = StyleTransform.parse(self.style)
        elif isinstance(self.style, dict):
            self.style = StyleTransform(**self.style)
        self.lesion_count = tuple(int(v) for v in self.lesion_count)
        self.lesion_radius = tuple(float(v) for v in self.lesion_radius)
        self.image_size = tuple(int(v) for v in self.image_size)

    def validate(self) -> None:
        h, w = self.image_size
        if h % 8 or w % 8:
            raise DataError(f"image size {h}x{w} must be divisible by 8")
        lo, hi = self.lesion_count
        if not 0 <= lo <= hi:
            raise DataError(f"bad lesion count range {self.lesion_count}")
        rlo, rhi = self.lesion_radius
        if not 0 < rlo <= rhi:
            raise DataError(f"bad lesion radius range {self.lesion_radius}")
        if 2 * rhi >= min(h, w):
            raise DataError(f"lesion radius {rhi} does not fit in a {h}x{w} image")
        if not 0 <= self.marker_prob <= 1:
            raise DataError(f"marker_prob must be in [0, 1], got {self.marker_prob}")
        if self.n_samples < 1:
            raise DataError("n_samples must be positive")
        if self.noise < 0:
            raise DataError("noise must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["style"] = str(self.style)
        d["lesion_count"] = list(self.lesion_count)
        d["lesion_radius"] = list(self.lesion_radius)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CohortSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown cohort keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Sample:
    image: np.ndarray          # (C, H, W) float64, float32-representable
    label: np.ndarray          # (H, W) bool, styled
    base_truth: np.ndarray     # (H, W) bool, before styling
    source: str
    has_marker: bool
    index: int = 0
    split_key: int = 0         # samples with equal keys share split membership


def _gaussian(yy, xx, cy, cx, sy, sx, theta):
    c, s = math.cos(theta), math.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))


def _render(spec: CohortSpec, gen: np.random.Generator) -> tuple[np.ndarray, np.ndarray, bool]:
    h, w = spec.image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    background = np.zeros((h, w))
    for _ in range(3):
        cy, cx = gen.uniform(0, h), gen.uniform(0, w)
        s = gen.uniform(0.25, 0.5) * min(h, w)
        background += gen.uniform(0.05, 0.15) * _gaussian(yy, xx, cy, cx, s, s, 0.0)

    field_ = np.zeros((h, w))
    count = int(gen.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    for _ in range(count):
        r = gen.uniform(*spec.lesion_radius)
        aspect = gen.uniform(0.75, 1.33)
        sigma = r / _HALF_MAX
        cy = gen.uniform(r, h - 1 - r)
        cx = gen.uniform(r, w - 1 - r)
        field_ += _gaussian(yy, xx, cy, cx, sigma * aspect, sigma / aspect, gen.uniform(0, math.pi))
    base = field_ >= 0.5

    marker = np.zeros((h, w))
    flag = bool(gen.random() < spec.marker_prob)
    if flag:
        cy, cx = gen.uniform(4, h - 5), gen.uniform(4, w - 5)
        marker = _gaussian(yy, xx, cy, cx, 1.5, 1.5, 0.0)

    image = np.stack([background + np.minimum(field_, 1.0), marker])
    image = image + gen.normal(0.0, spec.noise, size=image.shape)
    image = image.astype(np.float32).astype(np.float64)
    return image, base, flag


def generate_cohort(spec: CohortSpec) -> list[Sample]:
    """All samples of one cohort; sample ``i`` uses its own seeded stream."""
    spec.validate()
    root = Rng(spec.seed)
    samples = []
    for i in range(spec.n_samples):
        image, base, flag = _render(spec, root.stream("data", "sample", i))
        if spec.marker_prob > 0 and has_marker(image) != flag:
            raise DataError(f"sample {i}: marker visibility disagrees with the marker flag")
        label = apply_style(base, image, spec.style)
        samples.append(Sample(image, label, base, spec.source, flag, i, spec.seed))
    return samples


def generate(specs: Iterable[CohortSpec]) -> list[Sample]:
    out: list[Sample] = []
    for spec in specs:
        out.extend(generate_cohort(spec))
    return out


# -- splitting --------------------------------------------------------------

def split_counts(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise DataError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise DataError(f"{n} samples cannot give every split at least one sample")
    return n_train, n_val, n_test


def split(dataset: Sequence[Sample], fractions=(0.6, 0.2, 0.2), seed: int = 0
          ) -> tuple[list[Sample], list[Sample], list[Sample]]:
    """Per-cohort stratified train/val/test split.

    Membership within a cohort is a seeded permutation keyed on the cohort's
    generation seed, so cohorts rendered from the same seed (and hence the
    same images) split identically.
    """
    by_source: dict[str, list[Sample]] = {}
    for s in dataset:
        by_source.setdefault(s.source, []).append(s)
    train, val, test = [], [], []
    for source in by_source:
        items = sorted(by_source[source], key=lambda s: s.index)
        n_train, n_val, _ = split_counts(len(items), fractions)
        perm = Rng(seed).stream("split", items[0].split_key, len(items)).permutation(len(items))
        chosen = [items[i] for i in perm]
        train.extend(sorted(chosen[:n_train], key=lambda s: s.index))
        val.extend(sorted(chosen[n_train:n_train + n_val], key=lambda s: s.index))
        test.extend(sorted(chosen[n_train + n_val:], key=lambda s: s.index))
    return train, val, test


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray, list[str]]:
    images = np.stack([s.image for s in samples])
    labels = np.stack([s.label for s in samples]).astype(np.float64)[:, None]
    return images, labels, [s.source for s in samples]


# -- on-disk container ------------------------------------------------------

def save_cohort(spec: CohortSpec, samples: Sequence[Sample], directory) -> Path:
    """Write one cohort: manifest.json, images.f32 (LE), labels.bits, base.bits."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    images = np.stack([s.image for s in samples]).astype("<f4")
    (d / "images.f32").write_bytes(images.tobytes())
    (d / "labels.bits").write_bytes(np.packbits(np.stack([s.label for s in samples])).tobytes())
    (d / "base.bits").write_bytes(np.packbits(np.stack([s.base_truth for s in samples])).tobytes())
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": "styleseg-cohort",
        "spec": spec.to_dict(),
        "image_shape": list(samples[0].image.shape),
        "samples": [{"index": s.index, "has_marker": s.has_marker} for s in samples],
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_cohort(directory) -> tuple[CohortSpec, list[Sample]]:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError:
        raise DataError(f"{d}: no manifest.json") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{d}/manifest.json: {exc}") from None
    if manifest.get("kind") != "styleseg-cohort" or manifest.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"{d}: not a version-{SCHEMA_VERSION} cohort container")
    spec = CohortSpec.from_dict(manifest["spec"])
    c, h, w = manifest["image_shape"]
    k = len(manifest["samples"])
    try:
        images = np.frombuffer((d / "images.f32").read_bytes(), dtype="<f4").reshape(k, c, h, w)
        bits = lambda name: np.unpackbits(np.frombuffer((d / name).read_bytes(), dtype=np.uint8),
                                          count=k * h * w).reshape(k, h, w).astype(bool)
        labels, base = bits("labels.bits"), bits("base.bits")
    except (OSError, ValueError) as exc:
        raise DataError(f"{d}: unreadable blob ({exc})") from None
    samples = [
        Sample(images[i].astype(np.float64), labels[i], base[i], spec.source, bool(m["has_marker"]),
               int(m["index"]), spec.seed)
        for i, m in enumerate(manifest["samples"])
    ]
    return spec, samples
