"""Experiment recipes: cohorts, models to train, and the rows to evaluate.

A recipe is plain JSON (``schema_version`` 1)::

    {"schema_version": 1, "name": ..., "seed": ...,
     "cohorts": [CohortSpec fields, ...],
     "model": ModelConfig fields (conditioning is set per arm),
     "train": TrainConfig fields, "finetune_train": TrainConfig fields,
     "arms": [{"name", "kind": "train"|"finetune", "conditioning", "train_on", "groups",
               "base", "new_source", "k", "copy_from"}, ...],
     "evaluate": [{"row", "arm", "query", "cohort", "subset"}, ...],
     "analyze": [arm names]}

``groups`` is either an explicit partition or ``"discover:<arm>"``, which
clusters the trained bank of another arm. ``subset`` slices a test set by
marker presence (``all``, ``marker``, ``no_marker``); thresholds are always
tuned on the full validation set of the cohort.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .analysis import analyze_bank, discover_groups, build_report
from .checkpoint import load_checkpoint, save_checkpoint
from .conditioning import GROUPED, IMAGE, NAIVE, PER_SOURCE, ConditioningMode
from .data import CohortSpec, DataError, Sample, generate, split
from .metrics import evaluate_masks
from .model import ModelConfig, build
from .rng import ALGORITHM
from .training import TrainConfig, finetune, predict, select_threshold, train, write_table

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SUBSETS = ("all", "marker", "no_marker")
RESULT_FIELDS = ("row", "arm", "trained_on", "query", "cohort", "subset", "n_test", "dice", "pr_auc",
                 "detection_f1", "small_lesion_f1", "threshold_used", "component_count_pred",
                 "component_count_gt")


class RecipeError(ValueError):
    pass


@dataclass
class Arm:
    name: str
    kind: str = "train"
    conditioning: str = NAIVE
    train_on: list[str] = field(default_factory=list)
    groups: Any = None
    base: str | None = None
    new_source: str | None = None
    k: int = 10
    copy_from: str | None = None


@dataclass
class EvalRow:
    row: str
    arm: str
    cohort: str
    query: str | None = None
    subset: str = "all"


@dataclass
class ExperimentRecipe:
    name: str
    cohorts: list[CohortSpec]
    arms: list[Arm]
    evaluate: list[EvalRow]
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune_train: TrainConfig | None = None
    analyze: list[str] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        sources = [c.source for c in self.cohorts]
        if len(set(sources)) != len(sources):
            raise RecipeError(f"duplicate cohort sources in {sources}")
        known = set(sources)
        arms: dict[str, Arm] = {}
        for arm in self.arms:
            if arm.name in arms:
                raise RecipeError(f"duplicate arm {arm.name!r}")
            if arm.kind == "train":
                if not arm.train_on:
                    raise RecipeError(f"arm {arm.name!r} trains on nothing")
                missing = set(arm.train_on) - known
                if missing:
                    raise RecipeError(f"arm {arm.name!r} references unknown cohorts {sorted(missing)}")
                if arm.conditioning not in (NAIVE, PER_SOURCE, GROUPED, IMAGE):
                    raise RecipeError(f"arm {arm.name!r}: unknown conditioning {arm.conditioning!r}")
                if arm.conditioning == GROUPED:
                    if isinstance(arm.groups, str):
                        ref = arm.groups.removeprefix("discover:")
                        if not arm.groups.startswith("discover:") or ref not in arms:
                            raise RecipeError(f"arm {arm.name!r}: groups must be a partition or discover:<arm>")
                    elif not arm.groups or sorted(s for g in arm.groups for s in g) != sorted(arm.train_on):
                        raise RecipeError(f"arm {arm.name!r}: groups must partition its training cohorts")
            elif arm.kind == "finetune":
                if arm.base not in arms:
                    raise RecipeError(f"finetune arm {arm.name!r} needs an earlier base arm")
                if arms[arm.base].conditioning == NAIVE:
                    raise RecipeError(f"finetune arm {arm.name!r}: base {arm.base!r} has no conditioning to adapt")
                if arm.new_source not in known:
                    raise RecipeError(f"finetune arm {arm.name!r}: unknown cohort {arm.new_source!r}")
                if arm.k < 1:
                    raise RecipeError(f"finetune arm {arm.name!r}: k must be at least 1")
            else:
                raise RecipeError(f"arm {arm.name!r}: unknown kind {arm.kind!r}")
            arms[arm.name] = arm
        for row in self.evaluate:
            if row.arm not in arms:
                raise RecipeError(f"row {row.row!r} references unknown arm {row.arm!r}")
            if row.cohort not in known:
                raise RecipeError(f"row {row.row!r} references unknown cohort {row.cohort!r}")
            if row.query is not None and row.query not in known:
                raise RecipeError(f"row {row.row!r} queries unknown source {row.query!r}")
            if row.subset not in SUBSETS:
                raise RecipeError(f"row {row.row!r}: subset must be one of {SUBSETS}")
        for name in self.analyze:
            if name not in arms:
                raise RecipeError(f"cannot analyse unknown arm {name!r}")

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "seed": self.seed,
            "cohorts": [c.to_dict() for c in self.cohorts],
            "model": dict(self.model),
            "train": self.train.to_dict(),
            "finetune_train": self.finetune_train.to_dict() if self.finetune_train else None,
            "arms": [asdict(a) for a in self.arms],
            "evaluate": [asdict(r) for r in self.evaluate],
            "analyze": list(self.analyze),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentRecipe":
        d = dict(d)
        version = d.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise RecipeError(f"unsupported recipe schema_version {version!r} (expected {SCHEMA_VERSION})")
        allowed = {"name", "seed", "cohorts", "model", "train", "finetune_train", "arms", "evaluate", "analyze"}
        unknown = set(d) - allowed
        if unknown:
            raise RecipeError(f"unknown recipe keys: {sorted(unknown)}")
        try:
            model = dict(d.get("model", {}))
            if "conditioning" in model:
                raise RecipeError("model.conditioning is set per arm, not globally")
            ModelConfig.from_dict(model)
            ft = d.get("finetune_train")
            return cls(
                name=d["name"],
                seed=int(d.get("seed", 0)),
                cohorts=[CohortSpec.from_dict(c) for c in d["cohorts"]],
                model=model,
                train=TrainConfig.from_dict(d.get("train", {})),
                finetune_train=TrainConfig.from_dict(ft) if ft else None,
                arms=[_strict(Arm, a) for a in d["arms"]],
                evaluate=[_strict(EvalRow, r) for r in d["evaluate"]],
                analyze=list(d.get("analyze", [])),
            )
        except KeyError as exc:
            raise RecipeError(f"recipe is missing {exc}") from None
        except (TypeError, DataError) as exc:
            raise RecipeError(str(exc)) from None


def _strict(cls, d: dict):
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise RecipeError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


# -- overrides --------------------------------------------------------------

def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(d: dict, key: str, value) -> None:
    """Set ``a.b.c`` inside nested dicts/lists; ``*`` fans out over a list.

    Unknown keys are rejected rather than created.
    """
    parts = key.split(".")

    def walk(node, i):
        part = parts[i]
        last = i == len(parts) - 1
        if isinstance(node, list):
            if part == "*":
                targets = range(len(node))
            elif part.isdigit() and int(part) < len(node):
                targets = [int(part)]
            else:
                raise RecipeError(f"override {key!r}: bad list index {part!r}")
            for t in targets:
                if last:
                    node[t] = value
                else:
                    walk(node[t], i + 1)
            return
        if not isinstance(node, dict) or part not in node:
            raise RecipeError(f"override {key!r}: unknown key {part!r}")
        if last:
            node[part] = value
        else:
            walk(node[part], i + 1)

    walk(d, 0)


def with_overrides(recipe: ExperimentRecipe, overrides: dict[str, Any]) -> ExperimentRecipe:
    d = recipe.to_dict()
    fields = ModelConfig().to_dict()
    fields.pop("conditioning")
    d["model"] = {**fields, **d["model"]}
    d["finetune_train"] = d["finetune_train"] or None
    for key, value in overrides.items():
        if key == "seed":
            d["seed"] = int(value)
            continue
        if key.startswith("finetune_train.") and d["finetune_train"] is None:
            d["finetune_train"] = dict(d["train"])
        apply_override(d, key, value)
    return ExperimentRecipe.from_dict(d)


def restrict(recipe: ExperimentRecipe, arm_names) -> ExperimentRecipe:
    """Keep only the named arms (plus anything they depend on) and their rows."""
    by_name = {a.name: a for a in recipe.arms}
    keep: set[str] = set()
    todo = list(arm_names)
    while todo:
        name = todo.pop()
        if name not in by_name:
            raise RecipeError(f"unknown arm {name!r}")
        if name in keep:
            continue
        keep.add(name)
        arm = by_name[name]
        if arm.base:
            todo.append(arm.base)
        if isinstance(arm.groups, str):
            todo.append(arm.groups.removeprefix("discover:"))
    d = recipe.to_dict()
    d["arms"] = [a for a in d["arms"] if a["name"] in keep]
    d["evaluate"] = [r for r in d["evaluate"] if r["arm"] in keep]
    d["analyze"] = [a for a in d["analyze"] if a in keep]
    return ExperimentRecipe.from_dict(d)


# -- running ----------------------------------------------------------------

def _slice(samples: list[Sample], cohort: str) -> list[Sample]:
    return [s for s in samples if s.source == cohort]


def _subset(samples: list[Sample], subset: str) -> list[int]:
    if subset == "all":
        return list(range(len(samples)))
    want = subset == "marker"
    return [i for i, s in enumerate(samples) if s.has_marker == want]


def _arm_key(recipe: ExperimentRecipe, arm: Arm, resolved_groups, base_key: str | None) -> str:
    used = set(arm.train_on) | ({arm.new_source} if arm.new_source else set())
    payload = {
        "version": __version__,
        "seed": recipe.seed,
        "cohorts": [c.to_dict() for c in recipe.cohorts if c.source in used],
        "model": recipe.model,
        "train": (recipe.finetune_train or recipe.train).to_dict() if arm.kind == "finetune" else recipe.train.to_dict(),
        "arm": {**asdict(arm), "name": None, "groups": resolved_groups},
        "base": base_key,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RecipeResult:
    rows: list[dict]
    models: dict
    histories: dict
    analyses: dict


def run_recipe(recipe: ExperimentRecipe, out_dir=None, cache_dir=None, plots: bool = True) -> RecipeResult:
    """Generate data, train every arm, evaluate every row, write results.

    With ``cache_dir`` set, trained arms are stored there keyed by a hash of
    everything that determines them, and reused on later runs.
    """
    dataset = generate(recipe.cohorts)
    train_set, val_set, test_set = split(dataset, seed=recipe.seed)
    models, histories, keys = {}, {}, {}
    for arm in recipe.arms:
        log.info("arm %s", arm.name)
        groups = arm.groups
        if arm.kind == "train" and arm.conditioning == GROUPED and isinstance(groups, str):
            ref = models[groups.removeprefix("discover:")]
            partition = discover_groups(build_report(ref.bank)[0])
            groups = [g for g in partition.groups if set(g) & set(arm.train_on)]
        keys[arm.name] = _arm_key(recipe, arm, groups, keys.get(arm.base))
        cached = Path(cache_dir) / keys[arm.name] if cache_dir else None
        if cached is not None and (cached / "manifest.json").exists():
            models[arm.name] = load_checkpoint(cached)
            histories[arm.name] = None
            continue
        if arm.kind == "train":
            mode = {
                NAIVE: lambda: ConditioningMode.naive(),
                PER_SOURCE: lambda: ConditioningMode.per_source(arm.train_on),
                GROUPED: lambda: ConditioningMode.grouped(groups),
                IMAGE: lambda: ConditioningMode.image(),
            }[arm.conditioning]()
            model = build(ModelConfig.from_dict({**recipe.model, "conditioning": mode, "seed": recipe.seed}))
            tr = [s for c in arm.train_on for s in _slice(train_set, c)]
            va = [s for c in arm.train_on for s in _slice(val_set, c)]
            cfg = TrainConfig.from_dict({**recipe.train.to_dict(), "seed": recipe.seed})
            histories[arm.name] = train(model, tr, va, cfg)
        else:
            base = models[arm.base]
            few = _slice(train_set, arm.new_source)[:arm.k]
            if len(few) < arm.k:
                raise RecipeError(f"cohort {arm.new_source!r} has only {len(few)} training samples, need {arm.k}")
            cfg = recipe.finetune_train or recipe.train
            cfg = TrainConfig.from_dict({**cfg.to_dict(), "seed": recipe.seed})
            model, histories[arm.name] = finetune(base, few, cfg, arm.new_source,
                                                  _slice(val_set, arm.new_source), arm.copy_from)
        models[arm.name] = model
        if cached is not None:
            save_checkpoint(model, cached, {"arm": arm.name, "recipe": recipe.name})

    arms = {a.name: a for a in recipe.arms}
    rows = []
    scores_cache: dict = {}
    for spec in recipe.evaluate:
        model = models[spec.arm]
        query = spec.query if model.bank is not None and model.mode.kind != NAIVE else None
        key = (spec.arm, query, spec.cohort)
        if key not in scores_cache:
            val = _slice(val_set, spec.cohort)
            test = _slice(test_set, spec.cohort)
            threshold = select_threshold(predict(model, val, query), np.stack([s.label for s in val]))
            scores_cache[key] = (threshold, test, predict(model, test, query))
        threshold, test, scores = scores_cache[key]
        keep = _subset(test, spec.subset)
        if not keep:
            raise RecipeError(f"row {spec.row!r}: test subset {spec.subset!r} of {spec.cohort!r} is empty")
        report = evaluate_masks(scores[keep], np.stack([test[i].label for i in keep]), threshold)
        arm = arms[spec.arm]
        if arm.kind == "train":
            trained_on = "+".join(arm.train_on)
        else:
            trained_on = "+".join(arms[arm.base].train_on + [f"ft:{arm.new_source}"])
        rows.append({"row": spec.row, "arm": spec.arm, "trained_on": trained_on,
                     "query": spec.query if spec.query is not None else "", "cohort": spec.cohort,
                     "subset": spec.subset, "n_test": len(keep), **report.as_dict()})

    analyses = {}
    for name in recipe.analyze:
        target = Path(out_dir) / "analysis" / name if out_dir else None
        analyses[name] = analyze_bank(models[name].bank, target, plots=plots)

    if out_dir is not None:
        out = Path(out_dir)
        write_table(rows, out, "results", RESULT_FIELDS)
        hist_rows = []
        for name, h in histories.items():
            if h is not None:
                hist_rows.extend({"arm": name, **r} for r in h.to_rows())
        _write_history(hist_rows, out / "history.csv")
        manifest = {
            "recipe": recipe.to_dict(),
            "seed": recipe.seed,
            "rng": ALGORITHM,
            "package_version": __version__,
            "arm_keys": keys,
            "best_epochs": {n: h.best_epoch for n, h in histories.items() if h is not None},
        }
        (out / "run-manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return RecipeResult(rows, models, histories, analyses)


def _write_history(rows: list[dict], path: Path) -> None:
    import csv
    import io

    fields: list[str] = []
    for r in rows:
        fields.extend(k for k in r if k not in fields)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields or ["arm", "epoch"], lineterminator="\n", restval="")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("nan" if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()})
    path.write_text(buf.getvalue())


def load_recipe(path) -> ExperimentRecipe:
    try:
        return ExperimentRecipe.from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise RecipeError(f"{path}: {exc}") from None


# -- canned experiments -----------------------------------------------------

def _cohort(source, style, seed, recipe_seed, **kw) -> CohortSpec:
    # distinct recipe seeds draw distinct data as well as distinct initializations
    return CohortSpec(source=source, style=style, seed=seed + 1000 * recipe_seed, **kw)


DESK_DATA = {"n_samples": 60, "image_size": (32, 32)}
DESK_TRAIN = {"epochs": 80, "lr": 1e-3, "milestones": (40, 60)}


def trial_cond(seed: int = 0) -> ExperimentRecipe:
    """Two cohorts with shared images: Identity vs. BoundaryGrow(1)."""
    cohorts = [_cohort("A", "identity", 101, seed, **DESK_DATA), _cohort("B", "grow:1", 101, seed, **DESK_DATA)]
    arms = [
        Arm("single-A", train_on=["A"]),
        Arm("single-B", train_on=["B"]),
        Arm("naive", train_on=["A", "B"]),
        Arm("conditioned", conditioning=PER_SOURCE, train_on=["A", "B"]),
    ]
    rows = [EvalRow("Single-Trial", f"single-{c}", c) for c in "AB"]
    rows += [EvalRow("Naive-Pooling", "naive", c) for c in "AB"]
    rows += [EvalRow(f"Conditioned-{q}", "conditioned", c, q) for q in "AB" for c in "AB"]
    return ExperimentRecipe("trial-cond", cohorts, arms, rows, train=TrainConfig(**DESK_TRAIN), seed=seed)


def analyze(seed: int = 0) -> ExperimentRecipe:
    """Four cohorts in two planted style groups; trains and analyses a per-source bank."""
    styles = {"A": "identity", "B": "identity", "C": "grow:1", "D": "grow:1"}
    cohorts = [_cohort(s, st, 201 + i, seed, **DESK_DATA) for i, (s, st) in enumerate(styles.items())]
    arms = [Arm("conditioned", conditioning=PER_SOURCE, train_on=list(styles))]
    rows = [EvalRow("Conditioned", "conditioned", s, s) for s in styles]
    return ExperimentRecipe("analyze", cohorts, arms, rows, train=TrainConfig(**DESK_TRAIN),
                            analyze=["conditioned"], seed=seed)


def group_cond(seed: int = 0) -> ExperimentRecipe:
    """Group pooling and group conditioning over groups discovered from a per-source bank."""
    base = analyze(seed)
    sources = [c.source for c in base.cohorts]
    arms = [
        Arm("naive", train_on=sources),
        Arm("trial-conditioned", conditioning=PER_SOURCE, train_on=sources),
        Arm("group-pooled-AB", train_on=["A", "B"]),
        Arm("group-pooled-CD", train_on=["C", "D"]),
        Arm("group-conditioned", conditioning=GROUPED, train_on=sources, groups="discover:trial-conditioned"),
    ]
    rows = []
    for s in sources:
        rows.append(EvalRow("Naive-Pooling", "naive", s))
        rows.append(EvalRow("Group-Pooling", "group-pooled-AB" if s in "AB" else "group-pooled-CD", s))
        rows.append(EvalRow("Group-Conditioned", "group-conditioned", s, s))
        rows.append(EvalRow("Trial-Conditioned", "trial-conditioned", s, s))
    return ExperimentRecipe("group-cond", base.cohorts, arms, rows, train=base.train,
                            analyze=["trial-conditioned"], seed=seed)


def msl(seed: int = 0) -> ExperimentRecipe:
    """Orig vs. missing-small-lesions labels; every row is scored on the Orig test set."""
    # small lesions are rare, so this experiment needs larger cohorts and a longer schedule
    data = {**DESK_DATA, "n_samples": 150}
    cohorts = [_cohort("Orig", "identity", 301, seed, **data), _cohort("MSL", "remove_small:10", 302, seed, **data)]
    arms = [
        Arm("single-Orig", train_on=["Orig"]),
        Arm("single-MSL", train_on=["MSL"]),
        Arm("naive", train_on=["Orig", "MSL"]),
        Arm("conditioned", conditioning=PER_SOURCE, train_on=["Orig", "MSL"]),
    ]
    rows = [
        EvalRow("Single-Trial-Orig", "single-Orig", "Orig"),
        EvalRow("Single-Trial-MSL", "single-MSL", "Orig"),
        EvalRow("Naive-Pooling", "naive", "Orig"),
        EvalRow("Conditioned-Orig", "conditioned", "Orig", "Orig"),
        EvalRow("Conditioned-MSL", "conditioned", "Orig", "MSL"),
    ]
    cfg = TrainConfig(**{**DESK_TRAIN, "epochs": 120, "milestones": (60, 90)})
    return ExperimentRecipe("msl", cohorts, arms, rows, train=cfg, seed=seed)


def finetune10(seed: int = 0) -> ExperimentRecipe:
    """Two known styles, then affine-only adaptation to a held-out third style from 10 samples."""
    cohorts = [
        _cohort("A", "identity", 401, seed, **DESK_DATA),
        _cohort("B", "grow:2", 402, seed, **DESK_DATA),
        _cohort("C", "shrink:1", 403, seed, **DESK_DATA),
    ]
    arms = [
        Arm("naive", train_on=["A", "B"]),
        Arm("conditioned", conditioning=PER_SOURCE, train_on=["A", "B"]),
        Arm("conditioned-ft", kind="finetune", base="conditioned", new_source="C", k=10, copy_from="A"),
    ]
    rows = [
        EvalRow("Naive-Pooling", "naive", "C"),
        EvalRow("Conditioned-A", "conditioned", "C", "A"),
        EvalRow("Conditioned-B", "conditioned", "C", "B"),
        EvalRow("Fine-Tuned-C", "conditioned-ft", "C", "C"),
    ]
    ft = TrainConfig(epochs=60, lr=1e-2, milestones=(40,), batch_size=5)
    return ExperimentRecipe("finetune10", cohorts, arms, rows, train=TrainConfig(**DESK_TRAIN),
                            finetune_train=ft, seed=seed)


def gad_film(seed: int = 0) -> ExperimentRecipe:
    """Labels dilated only when the marker channel shows a blob; naive vs. image-conditioned."""
    cohorts = [_cohort("G", "dilate_if_marker:2", 501, seed, marker_prob=0.34, n_samples=150, image_size=(32, 32))]
    arms = [Arm("naive", train_on=["G"]), Arm("film", conditioning=IMAGE, train_on=["G"])]
    rows = [EvalRow(f"{label}-{sub}", arm, "G", None, sub)
            for label, arm in (("Naive-Pooling", "naive"), ("Image-Conditioned", "film"))
            for sub in ("marker", "no_marker", "all")]
    return ExperimentRecipe("gad-film", cohorts, arms, rows, train=TrainConfig(**{**DESK_TRAIN, "epochs": 60,
                                                                                  "milestones": (30, 45)}),
                            seed=seed)


CANNED = {
    "trial-cond": trial_cond,
    "group-cond": group_cond,
    "msl": msl,
    "finetune10": finetune10,
    "gad-film": gad_film,
    "analyze": analyze,
}


def canned(name: str, seed: int = 0) -> ExperimentRecipe:
    try:
        return CANNED[name](seed)
    except KeyError:
        raise RecipeError(f"unknown recipe {name!r}; choose from {sorted(CANNED)}") from None
