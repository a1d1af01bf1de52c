"""Similarity analysis of learned normalization affines across sources.

Scale vectors are compared after subtracting 1, so a parameter set still
at its initialization sits at the origin; shift vectors are compared raw.
A cosine involving a (shifted) vector of norm below ``ZERO_NORM`` is
undefined and reported as ``None`` (NaN inside matrices).
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .conditioning import ConditionBank

ZERO_NORM = 1e-12
DEFAULT_THRESHOLD = 0.5


class AnalysisError(ValueError):
    pass


class UndefinedSimilarityWarning(UserWarning):
    pass


def _cosine(a, b) -> float | None:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < ZERO_NORM or nb < ZERO_NORM:
        return None
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def scale_cosine(gamma_a, gamma_b) -> float | None:
    """Cosine of (gamma_a - 1) and (gamma_b - 1)."""
    return _cosine(np.asarray(gamma_a, dtype=np.float64) - 1.0, np.asarray(gamma_b, dtype=np.float64) - 1.0)


def shift_cosine(beta_a, beta_b) -> float | None:
    return _cosine(beta_a, beta_b)


def _nanmean(values) -> float | None:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.mean(vals)) if vals else None


@dataclass
class SimilarityReport:
    """Per-layer pairwise similarities; ``scale[l][i, j]`` is NaN when undefined."""

    sources: list[str]
    scale: list[np.ndarray]
    shift: list[np.ndarray]

    @property
    def num_layers(self) -> int:
        return len(self.scale)

    def pairs(self) -> list[tuple[int, int]]:
        return list(itertools.combinations(range(len(self.sources)), 2))

    def _index(self, a: str, b: str) -> tuple[int, int]:
        try:
            return self.sources.index(a), self.sources.index(b)
        except ValueError:
            raise KeyError(f"unknown source pair ({a!r}, {b!r})") from None

    def scale_summary(self, a: str, b: str) -> float | None:
        i, j = self._index(a, b)
        return _nanmean(m[i, j] for m in self.scale)

    def shift_summary(self, a: str, b: str) -> float | None:
        i, j = self._index(a, b)
        return _nanmean(m[i, j] for m in self.shift)

    def summary(self, a: str, b: str) -> float | None:
        """Mean of the scale and shift summaries (whichever are defined)."""
        return _nanmean([self.scale_summary(a, b), self.shift_summary(a, b)])

    def summary_matrix(self) -> np.ndarray:
        n = len(self.sources)
        out = np.full((n, n), np.nan)
        for i, j in itertools.product(range(n), repeat=2):
            v = self.summary(self.sources[i], self.sources[j])
            out[i, j] = np.nan if v is None else v
        return out

    def all_undefined(self) -> bool:
        return all(self.summary(self.sources[i], self.sources[j]) is None for i, j in self.pairs())


@dataclass
class NormRow:
    layer: int
    source: str
    scale_norm: float   # ||gamma - 1||
    shift_norm: float   # ||beta||
    gamma_norm: float   # ||gamma||, auxiliary


@dataclass
class GroupPartition:
    groups: list[list[str]]
    trace: list[tuple[list[str], list[str], float]] = field(default_factory=list)

    def as_sets(self) -> set[frozenset[str]]:
        return {frozenset(g) for g in self.groups}

    def to_dict(self) -> dict:
        return {
            "groups": self.groups,
            "linkage": [{"left": a, "right": b, "distance": d} for a, b, d in self.trace],
        }


def similarity_from_arrays(sources: Sequence[str], gammas: Sequence[np.ndarray], betas: Sequence[np.ndarray]
                           ) -> SimilarityReport:
    """Build a report from per-layer arrays shaped (num_sources, channels)."""
    n = len(sources)
    scale, shift = [], []
    for g, b in zip(gammas, betas):
        sm = np.full((n, n), np.nan)
        hm = np.full((n, n), np.nan)
        for i, j in itertools.product(range(n), repeat=2):
            if j < i:
                sm[i, j], hm[i, j] = sm[j, i], hm[j, i]
                continue
            s, h = scale_cosine(g[i], g[j]), shift_cosine(b[i], b[j])
            sm[i, j] = np.nan if s is None else s
            hm[i, j] = np.nan if h is None else h
        scale.append(sm)
        shift.append(hm)
    return SimilarityReport(list(sources), scale, shift)


def build_report(bank: ConditionBank) -> tuple[SimilarityReport, list[NormRow]]:
    """Similarities and norms for every parameter set of ``bank``."""
    gammas, betas = bank.arrays()
    names = list(bank.set_names)
    report = similarity_from_arrays(names, gammas, betas)
    norms = [
        NormRow(l, name, float(np.linalg.norm(g[k] - 1.0)), float(np.linalg.norm(b[k])), float(np.linalg.norm(g[k])))
        for l, (g, b) in enumerate(zip(gammas, betas))
        for k, name in enumerate(names)
    ]
    return report, norms


def discover_groups(report: SimilarityReport, threshold: float = DEFAULT_THRESHOLD) -> GroupPartition:
    """Average-linkage clustering on ``d = 1 - summary similarity``.

    Merging stops once the closest pair of clusters is farther apart than
    ``1 - threshold``. Pairs whose summary is undefined count as distance 1.
    Equal distances are resolved by the lexicographically smallest pair of
    cluster member lists, so the result does not depend on source order.
    """
    if len(report.sources) < 2:
        raise AnalysisError("group discovery needs at least two sources")
    if report.all_undefined():
        raise AnalysisError("every similarity is undefined; train the model before analysing its bank")
    names = sorted(report.sources)
    dist = {}
    for a, b in itertools.combinations(names, 2):
        s = report.summary(a, b)
        dist[(a, b)] = dist[(b, a)] = 1.0 if s is None else 1.0 - s
    clusters = [[n] for n in names]
    trace = []
    limit = 1.0 - threshold
    while len(clusters) > 1:
        best = None
        for x, y in itertools.combinations(range(len(clusters)), 2):
            d = float(np.mean([dist[(a, b)] for a in clusters[x] for b in clusters[y]]))
            key = (d, clusters[x], clusters[y])
            if best is None or key < best[0]:
                best = (key, x, y)
        (d, left, right), x, y = best
        if d > limit:
            break
        trace.append((left, right, d))
        merged = sorted(left + right)
        clusters = [c for k, c in enumerate(clusters) if k not in (x, y)] + [merged]
        clusters.sort()
    return GroupPartition(sorted(clusters), trace)


# -- export -----------------------------------------------------------------

def _num(v) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def _csv(rows: list[list], header: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def similarity_csv(report: SimilarityReport) -> str:
    rows = []
    for l in range(report.num_layers):
        for i, j in report.pairs():
            rows.append([l, report.sources[i], report.sources[j],
                         _num(report.scale[l][i, j]), _num(report.shift[l][i, j])])
    return _csv(rows, ["layer", "source_a", "source_b", "scale_sim", "shift_sim"])


def norms_csv(norms: Sequence[NormRow]) -> str:
    rows = [[r.layer, r.source, _num(r.scale_norm), _num(r.shift_norm), _num(r.gamma_norm)] for r in norms]
    return _csv(rows, ["layer", "source", "scale_norm", "shift_norm", "gamma_norm"])


def parse_similarity_csv(text: str) -> SimilarityReport:
    """Rebuild a report from :func:`similarity_csv` output (diagonals set to 1 where defined)."""
    rows = list(csv.DictReader(io.StringIO(text)))
    sources = []
    for r in rows:
        for s in (r["source_a"], r["source_b"]):
            if s not in sources:
                sources.append(s)
    n = len(sources)
    layers = 1 + max((int(r["layer"]) for r in rows), default=-1)
    scale = [np.full((n, n), np.nan) for _ in range(layers)]
    shift = [np.full((n, n), np.nan) for _ in range(layers)]
    for r in rows:
        l, i, j = int(r["layer"]), sources.index(r["source_a"]), sources.index(r["source_b"])
        for mats, key in ((scale, "scale_sim"), (shift, "shift_sim")):
            v = float(r[key]) if r[key] else np.nan
            mats[l][i, j] = mats[l][j, i] = v
    for mats in (scale, shift):
        for m in mats:
            for i in range(n):
                if np.any(~np.isnan(np.delete(m[i], i))):
                    m[i, i] = 1.0
    return SimilarityReport(sources, scale, shift)


def _plot_layer(path: Path, layer: int, report: SimilarityReport, norms: Sequence[NormRow]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [r for r in norms if r.layer == layer]
    with matplotlib.rc_context({"svg.hashsalt": "styleseg", "svg.fonttype": "none"}):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8, 3.5))
        for r in rows:
            ax0.scatter([r.scale_norm], [r.shift_norm], label=r.source)
            ax0.annotate(r.source, (r.scale_norm, r.shift_norm), fontsize=8)
        ax0.set_xlabel("||gamma - 1||")
        ax0.set_ylabel("||beta||")
        ax0.set_title(f"layer {layer} norms")
        labels = [f"{report.sources[i]}-{report.sources[j]}" for i, j in report.pairs()]
        xs = np.arange(len(labels))
        sc = [report.scale[layer][i, j] for i, j in report.pairs()]
        sh = [report.shift[layer][i, j] for i, j in report.pairs()]
        ax1.scatter(xs, sc, marker="o", label="scale")
        ax1.scatter(xs, sh, marker="x", label="shift")
        ax1.set_xticks(xs, labels, rotation=45, fontsize=7)
        ax1.set_ylim(-1.05, 1.05)
        ax1.set_title(f"layer {layer} pairwise cosine")
        ax1.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def export(report: SimilarityReport, norms: Sequence[NormRow], partition: GroupPartition | None, out_dir,
           plots: bool = True) -> list[Path]:
    """Write similarity.csv, norms.csv, groups.json and one SVG per layer."""
    d = Path(out_dir)
    written = []
    try:
        d.mkdir(parents=True, exist_ok=True)
        for name, text in (("similarity.csv", similarity_csv(report)), ("norms.csv", norms_csv(norms))):
            (d / name).write_text(text)
            written.append(d / name)
        payload = {"sources": report.sources,
                   "summary": {f"{report.sources[i]}|{report.sources[j]}":
                               report.summary(report.sources[i], report.sources[j]) for i, j in report.pairs()}}
        payload.update(partition.to_dict() if partition else {"groups": None, "linkage": []})
        (d / "groups.json").write_text(json.dumps(payload, indent=2) + "\n")
        written.append(d / "groups.json")
        if plots:
            for l in range(report.num_layers):
                path = d / f"layer_{l:02d}.svg"
                _plot_layer(path, l, report, norms)
                written.append(path)
    except OSError as exc:
        raise OSError(f"cannot write analysis output under {d}: {exc}") from exc
    return written


def analyze_bank(bank: ConditionBank, out_dir=None, threshold: float = DEFAULT_THRESHOLD, plots: bool = True):
    """Report, norms and (when defined) groups for ``bank``; optionally exported."""
    report, norms = build_report(bank)
    partition = None
    if len(report.sources) >= 2 and not report.all_undefined():
        partition = discover_groups(report, threshold)
    elif len(report.sources) >= 2:
        warnings.warn("all similarities are undefined (bank at initialization?)", UndefinedSimilarityWarning,
                      stacklevel=2)
    if out_dir is not None:
        export(report, norms, partition, out_dir, plots)
    return report, norms, partition
