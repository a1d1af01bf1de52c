"""End-to-end acceptance checks A1-A9.

Each check prints one ``A<n> PASS|FAIL`` line with its measurements and
runtime, then asserts. Trained arms are cached per session (or under
``--cache-dir`` across sessions); runtimes reported for cached arms cover
only the uncached work.
"""

import time

import numpy as np
import pytest

from oracles import components_union_find, detection_f1_bruteforce, dice_sets, pr_auc_enumerate
from styleseg import functional as F
from styleseg.conditioning import ConditioningMode, scin_forward
from styleseg.gradcheck import check_gradients
from styleseg.metrics import connected_components, detection_f1, dice, pr_auc
from styleseg.model import ModelConfig, build, state_dict
from styleseg.recipes import CANNED, canned, restrict, run_recipe, with_overrides
from styleseg.tensor import Tensor

pytestmark = pytest.mark.slow

MINUTE = 60.0


@pytest.fixture(scope="session")
def cache(request, tmp_path_factory):
    given = request.config.getoption("--cache-dir")
    return given if given else tmp_path_factory.mktemp("arm-cache")


@pytest.fixture
def report(request, capsys, acceptance_log):
    def emit(ok: bool, detail: str):
        line = f"{request.node.name.split('_')[1].upper()} {'PASS' if ok else 'FAIL'}  {detail}"
        acceptance_log.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok
    return emit


def rows_by_name(result):
    return {(r["row"], r["cohort"], r["subset"]): r for r in result.rows}


def timed(fn):
    start = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - start


def test_a1_gradients(report):
    gen = np.random.default_rng(0)
    x = gen.normal(size=(2, 2, 8, 8))
    y = (gen.random((2, 1, 8, 8)) > 0.6).astype(float)
    worst = {}

    def run():
        for mode, sources in ((ConditioningMode.per_source(["A", "B"]), ["A", "B"]),
                              (ConditioningMode.image(), None)):
            model = build(ModelConfig(widths=(2, 3, 4, 5, 4, 3, 2), film_widths=(2, 3, 4),
                                      conditioning=mode, seed=1)).eval()
            for t in model.parameters().values():
                t.data += gen.normal(0, 0.1, size=t.shape)  # move FiLM heads and affines off their init
            errs = check_gradients(lambda: F.bce_loss(model(x, sources), y), model.parameters())
            worst[mode.kind] = (len(errs), max(errs.values()))

    _, seconds = timed(run)
    ok = all(e < 1e-4 for _, e in worst.values()) and seconds < MINUTE
    detail = ", ".join(f"{k}: {n} params, max rel err {e:.1e}" for k, (n, e) in worst.items())
    assert report(ok, f"{detail}; {seconds:.1f}s (limit 60s)")


def test_a2_scin_identity(report):
    model = build(ModelConfig(conditioning=ConditioningMode.per_source(["A", "B", "C"])))
    gen = np.random.default_rng(1)
    worst = 0.0
    for layer, width in enumerate(model.config.norm_widths):
        z = Tensor(gen.normal(3, 4, size=(3, width, 8, 8)))
        out = scin_forward(z, ["A", "B", "C"], model.bank, layer)
        worst = max(worst, float(np.abs(out.data - F.instance_norm(z).data).max()))
    assert report(worst <= 1e-12, f"14 layers, max |SCIN - IN| = {worst:.1e} (limit 1e-12)")


def test_a3_conditioning_beats_naive(report, cache):
    result, seconds = timed(lambda: run_recipe(canned("trial-cond"), cache_dir=cache, plots=False))
    rows = rows_by_name(result)
    d = lambda row, cohort: rows[(row, cohort, "all")]["dice"]
    margins = {c: d(f"Conditioned-{c}", c) - d("Naive-Pooling", c) for c in "AB"}
    row_max = {c: d(f"Conditioned-{c}", c) >= max(d(f"Conditioned-{q}", c) for q in "AB") for c in "AB"}
    ok = all(m >= 0.03 for m in margins.values()) and all(row_max.values()) and seconds < 10 * MINUTE
    detail = "; ".join(
        f"cohort {c}: conditioned {d(f'Conditioned-{c}', c):.3f} vs naive {d('Naive-Pooling', c):.3f} "
        f"(margin {margins[c]:+.3f}, need +0.030), matched style row max {row_max[c]}" for c in "AB")
    assert report(ok, f"{detail}; {seconds:.0f}s (limit 600s)")


def test_a4_subgroup_recovery(report, cache):
    planted = {frozenset("AB"), frozenset("CD")}
    lines, hits = [], 0

    def run():
        nonlocal hits
        for seed in range(5):
            rep, _, partition = run_recipe(canned("analyze", seed), cache_dir=cache, plots=False).analyses["conditioned"]
            within = np.mean([rep.summary("A", "B"), rep.summary("C", "D")])
            between = np.mean([rep.summary(a, b) for a in "AB" for b in "CD"])
            exact = partition is not None and partition.as_sets() == planted
            hits += bool(within > between and exact)
            lines.append(f"seed {seed}: within {within:.3f} between {between:.3f} groups {partition.groups}")

    _, seconds = timed(run)
    ok = hits >= 4 and seconds < 25 * MINUTE
    assert report(ok, f"{hits}/5 seeds recover the planted partition (need 4); {'; '.join(lines)}; "
                      f"{seconds:.0f}s (limit 1500s)")


def test_a5_missing_small_lesions(report, cache):
    recipe = restrict(canned("msl"), ["conditioned"])
    result, seconds = timed(lambda: run_recipe(recipe, cache_dir=cache, plots=False))
    rows = rows_by_name(result)
    orig, msl = rows[("Conditioned-Orig", "Orig", "all")], rows[("Conditioned-MSL", "Orig", "all")]
    ratio = msl["small_lesion_f1"] / orig["small_lesion_f1"] if orig["small_lesion_f1"] else float("inf")
    gap = abs(orig["dice"] - msl["dice"])
    ok = ratio <= 0.5 and gap < 0.1 and seconds < 10 * MINUTE
    assert report(ok, f"small-lesion F1 Orig query {orig['small_lesion_f1']:.3f}, MSL query "
                      f"{msl['small_lesion_f1']:.3f} (ratio {ratio:.2f}, limit 0.5); Dice {orig['dice']:.3f} vs "
                      f"{msl['dice']:.3f} (gap {gap:.3f}, limit 0.1); {seconds:.0f}s (limit 600s)")


def test_a6_finetune(report, cache):
    recipe = restrict(canned("finetune10"), ["conditioned", "conditioned-ft"])
    run_recipe(restrict(recipe, ["conditioned"]), cache_dir=cache, plots=False)  # base checkpoint
    result, seconds = timed(lambda: run_recipe(recipe, cache_dir=cache, plots=False))
    rows = rows_by_name(result)
    tuned = rows[("Fine-Tuned-C", "C", "all")]["dice"]
    zero_shot = {q: rows[(f"Conditioned-{q}", "C", "all")]["dice"] for q in "AB"}
    best = max(zero_shot.values())
    before, after = state_dict(result.models["conditioned"]), state_dict(result.models["conditioned-ft"])
    frozen = [k for k in before if not k.startswith("scin")]
    changed = [k for k in frozen if before[k].tobytes() != after[k].tobytes()]
    ok = tuned - best >= 0.02 and not changed and seconds < 5 * MINUTE
    assert report(ok, f"fine-tuned {tuned:.3f} vs best zero-shot {best:.3f} {zero_shot} "
                      f"(margin {tuned - best:+.3f}, need +0.020); {len(changed)}/{len(frozen)} frozen tensors "
                      f"changed; {seconds:.0f}s on the cached base (limit 300s)")


def test_a7_image_conditioning(report, cache):
    result, seconds = timed(lambda: run_recipe(canned("gad-film"), cache_dir=cache, plots=False))
    rows = rows_by_name(result)
    d = lambda row, sub: rows[(f"{row}-{sub}", "G", sub)]["dice"]
    no_marker = d("Image-Conditioned", "no_marker") - d("Naive-Pooling", "no_marker")
    marker = d("Image-Conditioned", "marker") - d("Naive-Pooling", "marker")
    ok = no_marker >= 0.03 and marker >= -0.01 and seconds < 15 * MINUTE
    assert report(ok, f"no-marker FiLM {d('Image-Conditioned', 'no_marker'):.3f} vs naive "
                      f"{d('Naive-Pooling', 'no_marker'):.3f} ({no_marker:+.3f}, need +0.030); marker FiLM "
                      f"{d('Image-Conditioned', 'marker'):.3f} vs naive {d('Naive-Pooling', 'marker'):.3f} "
                      f"({marker:+.3f}, floor -0.010); {seconds:.0f}s (limit 900s)")


def test_a8_metric_oracles(report):
    gen = np.random.default_rng(8)
    bad = {"dice": 0, "pr_auc": 0, "components": 0, "detection": 0}
    for _ in range(200):
        h, w = gen.integers(1, 17, size=2)
        p, g = gen.random((h, w)) < gen.uniform(0.1, 0.6), gen.random((h, w)) < gen.uniform(0.1, 0.6)
        scores = np.round(gen.random((h, w)), 2)
        bad["dice"] += dice(p, g) != dice_sets(p, g)
        if g.any():
            bad["pr_auc"] += abs(pr_auc(scores, g) - pr_auc_enumerate(scores, g)) > 1e-12
        labels, sizes = connected_components(p)
        ours = sorted(({tuple(x) for x in np.argwhere(labels == k)} for k in range(1, len(sizes) + 1)), key=min)
        bad["components"] += ours != components_union_find(p)
        bad["detection"] += detection_f1(p, g) != detection_f1_bruteforce(p, g)
    ok = not any(bad.values())
    assert report(ok, "mismatches over 200 instances: " + ", ".join(f"{k} {v}" for k, v in bad.items()))


def _tiny(recipe):
    ov = {"cohorts.*.image_size": [16, 16], "cohorts.*.n_samples": 40, "cohorts.*.lesion_radius": [1, 3],
          "model.widths": [2, 3, 4, 5, 4, 3, 2], "train.epochs": 2, "train.milestones": [1]}
    if recipe.finetune_train is not None:
        ov.update({"finetune_train.epochs": 2, "finetune_train.milestones": [1]})
    return with_overrides(recipe, ov)


def test_a9_determinism(report, tmp_path):
    same = {}
    for name in CANNED:
        recipe = _tiny(canned(name, 3))
        for run in "ab":
            run_recipe(recipe, tmp_path / name / run, plots=False)
        same[name] = (tmp_path / name / "a" / "results.csv").read_bytes() == \
            (tmp_path / name / "b" / "results.csv").read_bytes()
    ok = all(same.values())
    assert report(ok, "results.csv byte-identical on rerun: " + ", ".join(f"{k} {v}" for k, v in same.items()))
