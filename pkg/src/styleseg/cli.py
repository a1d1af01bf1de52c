"""Command-line entry point: ``styleseg <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure. Failures print one ``error: <category>: <reason>`` line on stderr.
Set ``STYLESEG_THREADS`` to cap the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import warnings
from pathlib import Path

from . import __version__
from .analysis import AnalysisError, analyze_bank
from .checkpoint import FormatError, load_bank, load_checkpoint, save_checkpoint
from .conditioning import IMAGE, NAIVE, PER_SOURCE, ConditioningMode, UnknownSource
from .data import CohortSpec, DataError, generate, load_cohort, save_cohort, split
from .model import ConfigError, ModelConfig, build
from .recipes import RecipeError, canned, load_recipe, parse_value, run_recipe, with_overrides
from .rng import ALGORITHM
from .tensor import NonFiniteError
from .training import TrainConfig, TrainingDiverged, evaluate_matrix, finetune, matrix_rows, train, write_table

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CONFIG_VERSION = 1


class CliConfigError(ValueError):
    pass


# -- config handling --------------------------------------------------------

def _read_config(path) -> dict:
    if path is None:
        return {"schema_version": CONFIG_VERSION}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise CliConfigError(f"{path}: {exc}") from None
    if not isinstance(cfg, dict) or cfg.get("schema_version") != CONFIG_VERSION:
        raise CliConfigError(f"{path}: expected a JSON object with schema_version {CONFIG_VERSION}")
    return cfg


def _overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise CliConfigError(f"override {pair!r} is not key=value")
        out[key] = parse_value(value)
    return out


def _resolve(cfg: dict, allowed: set[str], args) -> dict:
    unknown = set(cfg) - allowed - {"schema_version"}
    if unknown:
        raise CliConfigError(f"unknown config keys: {sorted(unknown)}")
    for key, value in _overrides(args.override).items():
        top = key.split(".")[0]
        if top not in allowed:
            raise CliConfigError(f"override {key!r}: unknown key {top!r}")
        node, parts = cfg, key.split(".")
        for part in parts[:-1]:
            if isinstance(node, list):
                if not part.isdigit() or int(part) >= len(node):
                    raise CliConfigError(f"override {key!r}: bad list index {part!r}")
                node = node[int(part)]
            else:
                node = node.setdefault(part, {})
        node[parts[-1]] = value
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg.setdefault("seed", 0)
    return cfg


def _conditioning(spec, sources: list[str]) -> ConditioningMode:
    if isinstance(spec, dict):
        return ConditioningMode.from_dict(spec)
    return {
        NAIVE: ConditioningMode.naive,
        IMAGE: ConditioningMode.image,
        PER_SOURCE: lambda: ConditioningMode.per_source(sources),
    }.get(spec, lambda: _bad_conditioning(spec))()


def _bad_conditioning(spec):
    raise CliConfigError(f"conditioning must be naive, per_source, image or a grouped mapping, got {spec!r}")


def _datasets(cfg: dict):
    if "data" in cfg:
        samples = []
        for d in cfg["data"]:
            samples.extend(load_cohort(d)[1])
        return samples
    if "cohorts" in cfg:
        return generate(CohortSpec.from_dict(c) for c in cfg["cohorts"])
    raise CliConfigError("config needs either 'cohorts' (specs) or 'data' (cohort directories)")


def _sources(samples) -> list[str]:
    return list(dict.fromkeys(s.source for s in samples))


def _manifest(out: Path, command: str, cfg: dict, extra: dict | None = None) -> None:
    payload = {"command": command, "config": cfg, "seed": cfg.get("seed"), "rng": ALGORITHM,
               "package_version": __version__, **(extra or {})}
    (out / "run-manifest.json").write_text(json.dumps(payload, indent=2) + "\n")


# -- subcommands ------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _resolve(_read_config(args.config), {"cohorts", "seed"}, args)
    specs = [CohortSpec.from_dict(c) for c in cfg.get("cohorts", [])]
    if not specs:
        raise CliConfigError("gen-data needs at least one cohort spec")
    for spec in specs:
        spec.validate()
    out = Path(args.out)
    for spec in specs:
        from .data import generate_cohort

        save_cohort(spec, generate_cohort(spec), out / spec.source)
    _manifest(out, "gen-data", cfg)
    return EXIT_OK


def _train_setup(cfg: dict):
    samples = _datasets(cfg)
    sources = _sources(samples)
    model_cfg = dict(cfg.get("model", {}))
    mode = _conditioning(model_cfg.pop("conditioning", PER_SOURCE), sources)
    model_cfg.setdefault("seed", cfg["seed"])
    model = build(ModelConfig.from_dict({**model_cfg, "conditioning": mode}))
    train_cfg = TrainConfig.from_dict({"seed": cfg["seed"], **cfg.get("train", {})})
    return samples, model, train_cfg


def cmd_train(args) -> int:
    cfg = _resolve(_read_config(args.config), {"cohorts", "data", "model", "train", "seed"}, args)
    samples, model, train_cfg = _train_setup(cfg)
    tr, va, _ = split(samples, seed=cfg["seed"])
    out = Path(args.out)
    history = train(model, tr, va, train_cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "checkpoint", {"best_epoch": history.best_epoch})
    history.write_csv(out / "history.csv")
    _manifest(out, "train", cfg, {"best_epoch": history.best_epoch})
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(_read_config(args.config), {"cohorts", "data", "styles", "seed"}, args)
    model = load_checkpoint(args.checkpoint)
    samples = _datasets(cfg)
    _, va, te = split(samples, seed=cfg["seed"])
    cohorts = _sources(samples)
    if model.bank is None or model.mode.kind == NAIVE:
        styles = [None]
    else:
        styles = cfg.get("styles") or [s for s in cohorts if s in model.bank.source_map]
    by = lambda items, c: [s for s in items if s.source == c]
    matrix = evaluate_matrix(model, {c: by(va, c) for c in cohorts}, {c: by(te, c) for c in cohorts}, styles)
    out = Path(args.out)
    write_table(matrix_rows(matrix, model.mode.kind), out)
    _manifest(out, "eval", cfg, {"checkpoint": str(args.checkpoint)})
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _resolve(_read_config(args.config), {"cohorts", "data", "train", "seed", "source", "k", "copy_from"}, args)
    model = load_checkpoint(args.checkpoint)
    source = args.source or cfg.get("source")
    if not source:
        raise CliConfigError("finetune needs --source (the new cohort)")
    k = args.k if args.k is not None else int(cfg.get("k", 10))
    samples = [s for s in _datasets(cfg) if s.source == source]
    if not samples:
        raise DataError(f"no samples for source {source!r}")
    tr, va, _ = split(samples, seed=cfg["seed"])
    if len(tr) < k:
        raise DataError(f"source {source!r} has {len(tr)} training samples, fewer than k={k}")
    train_cfg = TrainConfig.from_dict({"seed": cfg["seed"], **cfg.get("train", {})})
    tuned, history = finetune(model, tr[:k], train_cfg, source, va, args.copy_from or cfg.get("copy_from"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(tuned, out / "checkpoint", {"finetuned_source": source, "k": k})
    history.write_csv(out / "history.csv")
    _manifest(out, "finetune", cfg, {"checkpoint": str(args.checkpoint), "source": source, "k": k})
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _resolve(_read_config(args.config), {"threshold", "seed"}, args)
    bank = load_bank(args.bank)
    out = Path(args.out)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        _, _, partition = analyze_bank(bank, out, float(cfg.get("threshold", 0.5)), plots=not args.no_plots)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    _manifest(out, "analyze", cfg, {"bank": str(args.bank), "groups": partition.groups if partition else None})
    return EXIT_OK


def cmd_recipe(args) -> int:
    path = Path(args.name)
    seed = 0 if args.seed is None else args.seed
    if path.suffix == ".json" or path.exists():
        recipe = load_recipe(path)
        recipe = with_overrides(recipe, {"seed": seed} if args.seed is not None else {})
    else:
        recipe = canned(args.name, seed)
    recipe = with_overrides(recipe, _overrides(args.override))
    run_recipe(recipe, args.out, cache_dir=args.cache, plots=not args.no_plots)
    return EXIT_OK


# -- plumbing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="styleseg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON config file (schema_version 1)")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="set a config value; dotted keys reach nested fields; repeatable")
        return sp

    common(sub.add_parser("gen-data", help="generate cohorts and write them to disk")).set_defaults(fn=cmd_gen_data)
    common(sub.add_parser("train", help="train one model")).set_defaults(fn=cmd_train)
    sp = common(sub.add_parser("eval", help="style x cohort evaluation matrix"))
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(fn=cmd_eval)
    sp = common(sub.add_parser("finetune", help="affine-only adaptation to a new source"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--source", help="id of the new source")
    sp.add_argument("-k", type=int, help="number of labelled samples (default 10)")
    sp.add_argument("--copy-from", help="initialise the new parameter set from this source")
    sp.set_defaults(fn=cmd_finetune)
    sp = common(sub.add_parser("analyze", help="similarity analysis of a parameter bank"))
    sp.add_argument("--bank", required=True, help="bank or checkpoint directory")
    sp.add_argument("--no-plots", action="store_true")
    sp.set_defaults(fn=cmd_analyze)
    sp = common(sub.add_parser("recipe", help="run a canned or file-based experiment recipe"), config=False)
    sp.add_argument("name", help="trial-cond, group-cond, msl, finetune10, gad-film, analyze, or a recipe .json")
    sp.add_argument("--cache", help="directory for reusable trained arms")
    sp.add_argument("--no-plots", action="store_true")
    sp.set_defaults(fn=cmd_recipe)
    return p


@contextlib.contextmanager
def _thread_cap():
    value = os.environ.get("STYLESEG_THREADS")
    if not value:
        yield
        return
    if not value.isdigit() or int(value) < 1:
        raise CliConfigError(f"STYLESEG_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(value)):
        yield


def _fail(category: str, code: int, message) -> int:
    text = " ".join(str(message).split())
    print(f"error: {category}: {text}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_cap():
            return args.fn(args)
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        return _fail("numeric", EXIT_NUMERIC, exc)
    except (DataError, FormatError, UnknownSource, FileNotFoundError) as exc:
        return _fail("data", EXIT_DATA, exc)
    except (CliConfigError, RecipeError, ConfigError, AnalysisError, ValueError, TypeError, KeyError) as exc:
        return _fail("config", EXIT_CONFIG, exc)


if __name__ == "__main__":
    sys.exit(main())
