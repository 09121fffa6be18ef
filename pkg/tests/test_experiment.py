import csv

import numpy as np
import pytest

from treereg import nn
from treereg.datasets import Dataset, Splits, gen_five_rectangles
from treereg.errors import ContractError, InvalidInputError, NonFiniteLossError
from treereg.experiment import (RESULT_FIELDS, TrainConfig, baseline_rows, convergence_epoch,
                                distill, evaluate, evaluate_tree_baseline, export_trees,
                                fidelity, fit_tree_baseline, import_trees, routed_tree_predict,
                                select_run, sweep, tradeoff_curves, train_target)
from treereg.regions import partition
from treereg.regularizer import SurrogateConfig
from treereg.tree import DecisionTree, TreeConfig


def small_cfg(kind="regional_lsp", strength=0.1, epochs=30, seed=0):
    return TrainConfig(hidden=(8,), epochs=epochs, lr=1e-2, seed=seed,
                       tree=TreeConfig(min_samples_leaf=1),
                       surrogate=SurrogateConfig(epochs=10, retrain_period=10, n_synthetic=20)
                       ).with_regularizer(kind, strength)


@pytest.fixture(scope="module")
def toy():
    train, test, spec, val = gen_five_rectangles(seed=0, n_test=1000, n_val=100, label_noise=0.2)
    return Splits(train, val, test), spec


def leaf(label, n_features=2):
    return DecisionTree(np.array([-1]), np.zeros(1), np.array([-1]), np.array([-1]),
                        np.array([2]), np.array([2 * label]), n_features)


class TestTrainTarget:
    @pytest.mark.parametrize("kind", ["l2", "global_tree", "regional_l1", "regional_l0",
                                      "regional_lsp"])
    def test_zero_strength_matches_none(self, toy, kind):
        splits, spec = toy
        base, hb = train_target(small_cfg("none", 0.0, epochs=12), splits, spec)
        m, h = train_target(small_cfg(kind, 0.0, epochs=12), splits, spec)
        assert np.array_equal(m.params, base.params)
        np.testing.assert_array_equal(h.column("loss"), hb.column("loss"))

    def test_history_columns(self, toy):
        splits, spec = toy
        _, h = train_target(small_cfg(epochs=25), splits, spec)
        assert len(h.rows) == 25
        assert {"loss", "train_apl", "val_acc", "val_apl"} <= set(h.rows[0])
        assert "surrogate_apl" in h.rows[-1]
        assert len(h.surrogate_rows) == 2 * spec.n_regions  # refits at epochs 10 and 20
        assert np.isnan(h.surrogate_rows[0]["heldout_mse"])
        assert np.isfinite(h.surrogate_rows[-1]["heldout_mse"])

    def test_deterministic(self, toy):
        splits, spec = toy
        a, _ = train_target(small_cfg(epochs=15), splits, spec)
        b, _ = train_target(small_cfg(epochs=15), splits, spec)
        assert np.array_equal(a.params, b.params)

    def test_l2_shrinks_weights(self, toy):
        splits, spec = toy
        plain, _ = train_target(small_cfg("none", 0.0, epochs=20), splits, spec)
        l2, _ = train_target(small_cfg("l2", 0.5, epochs=20), splits, spec)
        assert l2.params @ l2.params < plain.params @ plain.params

    def test_global_tree_has_one_surrogate(self, toy):
        splits, spec = toy
        _, h = train_target(small_cfg("global_tree", 1.0, epochs=10), splits, spec)
        assert {r["region"] for r in h.surrogate_rows} == {0}

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_aborts(self):
        X = np.full((40, 2), 1e308)
        X[::2] *= -1
        Y = (np.arange(40) % 2)[:, None]
        ds = Dataset(X, Y)
        with pytest.raises(NonFiniteLossError):
            train_target(small_cfg("none", 0.0, epochs=3), Splits(ds, ds, ds), None)


class TestConvergence:
    def test_flat_series(self):
        assert convergence_epoch(np.ones(30), np.ones(30), window=10) == 1

    def test_settles_later(self):
        acc = np.r_[np.linspace(0, 1, 20), np.ones(15)]
        # last change is 19 -> 20; ten unchanged steps follow
        assert convergence_epoch(acc, np.zeros(35), window=10) == 20

    def test_never(self):
        assert convergence_epoch(np.arange(30.0), np.zeros(30), window=10) is None


class TestEvaluate:
    def test_perfect_model(self):
        rng = np.random.default_rng(0)
        X = rng.random((400, 2))
        Y = (X[:, 0] > 0.5).astype(int)
        ds = Dataset(X, Y)
        m = evaluate(lambda Z: (Z[:, 0] > 0.5).astype(float), Splits(ds, ds, ds), None,
                     TreeConfig(min_samples_leaf=1))
        assert m["f1"] == 1.0 and m["auc"] == 1.0

    def test_constant_model(self, toy):
        splits, spec = toy
        m = evaluate(lambda Z: np.full(len(Z), 0.9), splits, spec, TreeConfig())
        assert m["apl"] == 0.0 and m["fidelity"] == 1.0

    def test_apl_is_regional_sum(self, toy):
        splits, spec = toy
        model, _ = train_target(small_cfg("none", 0.0, epochs=20), splits, spec)
        m = evaluate(model, splits, spec, TreeConfig(min_samples_leaf=1))
        assert m["apl"] == pytest.approx(sum(m["region_apls"]))
        assert m["apl_mean"] == pytest.approx(m["apl"] / spec.n_regions)

    def test_empty_test(self, toy):
        splits, spec = toy
        empty = Dataset(np.zeros((0, 2)), np.zeros((0, 1)))
        with pytest.raises(InvalidInputError):
            evaluate(lambda Z: np.zeros(len(Z)), Splits(splits.train, splits.val, empty), spec,
                     TreeConfig())


class TestFidelity:
    def test_constant_agree(self):
        X = np.random.default_rng(0).random((50, 2))
        assert fidelity(lambda Z: np.ones(len(Z)), [[leaf(1)]], X, None) == 1.0

    def test_opposite(self):
        X = np.random.default_rng(0).random((50, 2))
        assert fidelity(lambda Z: np.ones(len(Z)), [[leaf(0)]], X, None) == 0.0

    def test_missing_region_tree(self, toy):
        _, spec = toy
        X = np.random.default_rng(0).random((50, 2))
        trees = [[leaf(1)], None, [leaf(1)], [leaf(1)], [leaf(1)]]
        with pytest.raises(ContractError):
            fidelity(lambda Z: np.ones(len(Z)), trees, X, spec)


class TestDistill:
    def test_single_region_is_global(self, toy):
        splits, _ = toy
        model = nn.init_mlp([2, 8, 1], 0)
        trees = distill(model, splits.train, None, TreeConfig())
        assert len(trees) == 1 and len(trees[0]) == 1

    def test_export_roundtrip(self, toy, tmp_path):
        splits, spec = toy
        model, _ = train_target(small_cfg("none", 0.0, epochs=20), splits, spec)
        trees = distill(model, splits.train, spec, TreeConfig(min_samples_leaf=1))
        paths = export_trees(trees, tmp_path / "trees")
        assert [p.rsplit("/", 1)[1] for p in paths] == [f"region_{r}.json" for r in range(5)]
        back = import_trees(tmp_path / "trees")
        np.testing.assert_array_equal(routed_tree_predict(back, spec, splits.test.X),
                                      routed_tree_predict(trees, spec, splits.test.X))


class TestBaselines:
    def test_regional_tree_apl_is_own_depth(self, toy):
        splits, spec = toy
        cfg = TreeConfig()
        trees = fit_tree_baseline(splits, spec, cfg)
        m = evaluate_tree_baseline(trees, splits, spec, spec)
        own = sum(trees[r][0].depths(splits.test.X[idx]).mean()
                  for r, idx in enumerate(partition(splits.test.X, spec)))
        assert m["apl"] == pytest.approx(own)

    def test_rows_per_seed(self, toy):
        splits, spec = toy
        rows = baseline_rows(splits, spec, small_cfg(), seeds=(0, 1, 2))
        assert len(rows) == 6
        assert {r["kind"] for r in rows} == {"decision_tree", "regional_decision_tree"}


class TestSweep:
    def test_row_count_and_order(self, toy, tmp_path):
        splits, spec = toy
        out = tmp_path / "results.csv"
        rows = sweep(small_cfg(epochs=10), ["regional_l1", "none"], [0.1, 0.01], splits, spec,
                     seeds=(0, 1, 2), out_csv=out)
        assert len(rows) == 2 * 2 * 3 + 6
        cells = [(r["kind"], r["lambda"], r["seed"]) for r in rows[:12]]
        assert cells == sorted(cells)
        with open(out) as fh:
            read = list(csv.DictReader(fh))
        assert len(read) == len(rows) and list(read[0]) == list(RESULT_FIELDS)

    def test_single_config(self, toy):
        splits, spec = toy
        rows = sweep(small_cfg(epochs=5), ["none"], [0.0], splits, spec, baselines=False)
        assert len(rows) == 3 and all(r["status"] == "ok" for r in rows)

    def test_reproducible(self, toy):
        splits, spec = toy
        a = sweep(small_cfg(epochs=12), ["regional_lsp"], [0.1], splits, spec, seeds=(1,),
                  baselines=False)
        b = sweep(small_cfg(epochs=12), ["regional_lsp"], [0.1], splits, spec, seeds=(1,),
                  baselines=False)
        strip = lambda r: {k: v for k, v in r.items() if k != "train_time"}
        assert strip(a[0]) == strip(b[0])

    def test_failure_recorded(self, toy):
        splits, _ = toy
        # a spec whose boxes miss most inputs makes every cell fail, not the sweep
        from treereg.regions import rectangles_spec
        bad = rectangles_spec([[0.0, 0.0]], [[0.1, 0.1]])
        rows = sweep(small_cfg(epochs=3), ["regional_l1"], [0.1], splits, bad, seeds=(0,),
                     baselines=False)
        assert rows[0]["status"].startswith("error: UncoveredInputError")

    def test_empty_grid(self, toy):
        splits, spec = toy
        with pytest.raises(InvalidInputError):
            sweep(small_cfg(), [], [0.1], splits, spec)

    def test_workers_match_serial(self, toy):
        splits, spec = toy
        kw = dict(seeds=(0, 1), baselines=False)
        serial = sweep(small_cfg(epochs=6), ["regional_l0"], [0.1], splits, spec, **kw)
        pooled = sweep(small_cfg(epochs=6), ["regional_l0"], [0.1], splits, spec, workers=2, **kw)
        assert [r["test_acc"] for r in serial] == [r["test_acc"] for r in pooled]


class TestCurves:
    ROWS = [
        {"kind": "a", "lambda": 0.1, "seed": s, "apl": 2.0 + s, "test_f1": 0.5, "val_f1": 0.1 * s,
         "status": "ok"} for s in range(3)
    ] + [{"kind": "a", "lambda": 1.0, "seed": 0, "apl": 1.0, "test_f1": 0.4, "val_f1": 0.9,
          "status": "ok"},
         {"kind": "a", "lambda": 2.0, "seed": 0, "status": "error: boom"}]

    def test_tradeoff_average(self):
        curve = tradeoff_curves(self.ROWS)["a"]
        assert curve == [(1.0, 0.4, 1.0), (3.0, 0.5, 0.1)]

    def test_select_run_budget(self):
        assert select_run(self.ROWS, 3.5)["lambda"] == 1.0
        assert select_run(self.ROWS, 10.0)["lambda"] == 1.0
        assert select_run(self.ROWS, 0.5) is None
