import csv
import json

import numpy as np
import pytest

from styleseg.cli import main
from styleseg.recipes import (EvalRow, ExperimentRecipe, RecipeError, apply_override, canned, restrict,
                              run_recipe, with_overrides)

TINY_MODEL = {"widths": [2, 3, 4, 5, 4, 3, 2]}
TINY_TRAIN = {"epochs": 1, "batch_size": 4, "milestones": [1]}


def tiny_cohort(source, style="identity", seed=0, n=10):
    return {"source": source, "style": style, "seed": seed, "n_samples": n, "image_size": [16, 16],
            "lesion_radius": [1, 3], "lesion_count": [1, 3]}


def write_config(path, **body):
    path.write_text(json.dumps({"schema_version": 1, **body}))
    return str(path)


def tiny_overrides(recipe, n=10):
    """Shrink a canned recipe to seconds: 16x16 images, few samples, one epoch."""
    ov = {"cohorts.*.image_size": [16, 16], "cohorts.*.n_samples": n, "cohorts.*.lesion_radius": [1, 3],
          "model.widths": [2, 3, 4, 5, 4, 3, 2], "train.epochs": 1, "train.milestones": [1]}
    if recipe.finetune_train is not None:
        ov.update({"finetune_train.epochs": 1, "finetune_train.milestones": [1]})
    return with_overrides(recipe, ov)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "cfg.json", cohorts=[tiny_cohort("A"), tiny_cohort("B", "grow:1", seed=1),
                                                   tiny_cohort("C", "remove_small:3", seed=2)])
    assert main(["gen-data", "--config", cfg, "--out", str(root / "data")]) == 0
    data_cfg = write_config(root / "data.json", data=[str(root / "data" / s) for s in "AB"],
                            model=TINY_MODEL, train=TINY_TRAIN)
    assert main(["train", "--config", data_cfg, "--out", str(root / "run")]) == 0
    return root


class TestCli:
    def test_gen_data_layout(self, trained):
        for s in "ABC":
            assert (trained / "data" / s / "manifest.json").exists()
        assert json.loads((trained / "data" / "run-manifest.json").read_text())["command"] == "gen-data"

    def test_train_outputs(self, trained):
        run = trained / "run"
        assert (run / "checkpoint" / "manifest.json").exists()
        assert len(list(csv.DictReader(open(run / "history.csv")))) == 1
        manifest = json.loads((run / "run-manifest.json").read_text())
        assert manifest["seed"] == 0 and manifest["rng"]

    def test_eval_matrix(self, trained, tmp_path):
        cfg = write_config(tmp_path / "e.json", data=[str(trained / "data" / s) for s in "AB"])
        assert main(["eval", "--config", cfg, "--checkpoint", str(trained / "run" / "checkpoint"),
                     "--out", str(tmp_path / "ev")]) == 0
        rows = list(csv.DictReader(open(tmp_path / "ev" / "results.csv")))
        assert {(r["style"], r["cohort"]) for r in rows} == {(s, c) for s in "AB" for c in "AB"}

    def test_finetune(self, trained, tmp_path):
        cfg = write_config(tmp_path / "f.json", data=[str(trained / "data" / "C")], train=TINY_TRAIN)
        assert main(["finetune", "--config", cfg, "--checkpoint", str(trained / "run" / "checkpoint"),
                     "--source", "C", "-k", "3", "--copy-from", "A", "--out", str(tmp_path / "ft")]) == 0
        manifest = json.loads((tmp_path / "ft" / "checkpoint" / "manifest.json").read_text())
        assert "C" in manifest["source_map"]

    def test_finetune_k_too_large(self, trained, tmp_path):
        cfg = write_config(tmp_path / "f.json", data=[str(trained / "data" / "C")], train=TINY_TRAIN)
        code = main(["finetune", "--config", cfg, "--checkpoint", str(trained / "run" / "checkpoint"),
                     "--source", "C", "-k", "50", "--out", str(tmp_path / "ft")])
        assert code == 3

    def test_analyze_initial_bank_warns(self, tmp_path, capsys):
        from styleseg.checkpoint import save_checkpoint
        from styleseg.conditioning import ConditioningMode
        from styleseg.model import ModelConfig, build

        save_checkpoint(build(ModelConfig(widths=(2, 3, 4, 5, 4, 3, 2),
                                          conditioning=ConditioningMode.per_source(["A", "B"]))), tmp_path / "ck")
        assert main(["analyze", "--bank", str(tmp_path / "ck"), "--no-plots", "--out", str(tmp_path / "an")]) == 0
        assert "warning" in capsys.readouterr().err
        assert json.loads((tmp_path / "an" / "groups.json").read_text())["groups"] is None

    def test_malformed_key_exits_2_without_outputs(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", cohorts=[tiny_cohort("A")], train={"epoch": 3})
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "out")]) == 2
        assert "epoch" in capsys.readouterr().err
        assert not (tmp_path / "out").exists()

    def test_unknown_top_level_key(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", cohorts=[tiny_cohort("A")], colour="red")
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "out")]) == 2

    def test_bad_override(self, tmp_path):
        assert main(["gen-data", "--override", "nonsense", "--out", str(tmp_path)]) == 2

    def test_wrong_schema_version(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"schema_version": 7}))
        assert main(["gen-data", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 2

    def test_missing_data_exits_3(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", data=[str(tmp_path / "nowhere")])
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "out")]) == 3
        assert capsys.readouterr().err.startswith("error: data")

    def test_nan_images_exit_4(self, trained, tmp_path, capsys):
        import shutil

        bad = tmp_path / "A"
        shutil.copytree(trained / "data" / "A", bad)
        blob = np.frombuffer((bad / "images.f32").read_bytes(), "<f4").copy()
        blob[::7] = np.nan
        (bad / "images.f32").write_bytes(blob.tobytes())
        cfg = write_config(tmp_path / "c.json", data=[str(bad)], model=TINY_MODEL, train=TINY_TRAIN)
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "out")]) == 4
        assert "step" in capsys.readouterr().err

    def test_override_reaches_nested_field(self, trained, tmp_path):
        cfg = write_config(tmp_path / "c.json", data=[str(trained / "data" / "A")], model=TINY_MODEL,
                           train=TINY_TRAIN)
        assert main(["train", "--config", cfg, "--override", "train.epochs=2", "--seed", "3",
                     "--out", str(tmp_path / "o")]) == 0
        assert len(list(csv.DictReader(open(tmp_path / "o" / "history.csv")))) == 2
        assert json.loads((tmp_path / "o" / "run-manifest.json").read_text())["seed"] == 3


class TestRecipes:
    def test_round_trip(self):
        for name in ["trial-cond", "analyze", "group-cond", "msl", "finetune10", "gad-film"]:
            r = canned(name)
            assert ExperimentRecipe.from_dict(r.to_dict()).to_dict() == r.to_dict()

    def test_unknown_recipe(self):
        with pytest.raises(RecipeError):
            canned("nope")

    def test_override_rejects_unknown_path(self):
        with pytest.raises(RecipeError):
            apply_override(canned("msl").to_dict(), "train.speed", 3)

    def test_seed_changes_data(self):
        a, b = canned("trial-cond", 0), canned("trial-cond", 1)
        assert a.cohorts[0].seed != b.cohorts[0].seed

    def test_restrict_keeps_dependencies(self):
        r = restrict(canned("group-cond"), ["group-conditioned"])
        assert {a.name for a in r.arms} == {"group-conditioned", "trial-conditioned"}

    def test_finetune_arm_needs_base(self):
        d = canned("msl").to_dict()
        d["arms"].append({"name": "ft", "kind": "finetune", "base": "ghost", "new_source": "MSL"})
        with pytest.raises(RecipeError, match="base"):
            ExperimentRecipe.from_dict(d)

    def test_msl_layout(self, tmp_path):
        result = run_recipe(tiny_overrides(canned("msl")), tmp_path, plots=False)
        rows = [(r["row"], r["cohort"]) for r in result.rows]
        assert rows == [("Single-Trial-Orig", "Orig"), ("Single-Trial-MSL", "Orig"), ("Naive-Pooling", "Orig"),
                        ("Conditioned-Orig", "Orig"), ("Conditioned-MSL", "Orig")]
        for name in ["results.csv", "results.json", "history.csv", "run-manifest.json"]:
            assert (tmp_path / name).exists()

    def test_gad_subsets(self, tmp_path):
        result = run_recipe(tiny_overrides(canned("gad-film"), n=40), tmp_path, plots=False)
        assert {r["subset"] for r in result.rows} == {"all", "marker", "no_marker"}
        by = {(r["arm"], r["subset"]): r["threshold_used"] for r in result.rows}
        assert by[("film", "marker")] == by[("film", "no_marker")] == by[("film", "all")]

    def test_rerun_is_byte_identical_and_cache_agrees(self, tmp_path):
        recipe = tiny_overrides(canned("trial-cond"))
        run_recipe(recipe, tmp_path / "a", plots=False)
        run_recipe(recipe, tmp_path / "b", cache_dir=tmp_path / "cache", plots=False)
        run_recipe(recipe, tmp_path / "c", cache_dir=tmp_path / "cache", plots=False)
        first = (tmp_path / "a" / "results.csv").read_bytes()
        assert first == (tmp_path / "b" / "results.csv").read_bytes() == (tmp_path / "c" / "results.csv").read_bytes()

    def test_cli_recipe(self, tmp_path):
        code = main(["recipe", "analyze", "--out", str(tmp_path), "--no-plots",
                     "--override", "cohorts.*.image_size=[16,16]", "--override", "cohorts.*.n_samples=10",
                     "--override", "cohorts.*.lesion_radius=[1,3]", "--override", "train.epochs=1",
                     "--override", "train.milestones=[1]", "--override", "model.widths=[2,3,4,5,4,3,2]"])
        assert code == 0
        assert (tmp_path / "analysis" / "conditioned" / "groups.json").exists()

    def test_finetune_on_naive_rejected(self):
        d = canned("finetune10").to_dict()
        for arm in d["arms"]:
            if arm["kind"] == "finetune":
                arm["base"] = "naive"
        with pytest.raises(RecipeError):
            ExperimentRecipe.from_dict(d)


def test_eval_row_needs_known_arm():
    r = canned("msl").to_dict()
    r["evaluate"].append(EvalRow("X", "ghost", "Orig").__dict__)
    with pytest.raises(RecipeError):
        ExperimentRecipe.from_dict(r)
