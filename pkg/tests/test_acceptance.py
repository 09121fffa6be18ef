"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they are
produced; they are repeated in the terminal summary either way.  The toy
criteria train full models and take roughly a quarter of an hour on one core.
"""

import itertools
from functools import lru_cache

import numpy as np
import pytest

from treereg import nn
from treereg.datasets import Splits, gen_five_rectangles, gen_two_region_toy
from treereg.experiment import TrainConfig, evaluate, select_run, train_target
from treereg.regions import partition, single_region
from treereg.regularizer import (ParamBuffer, SurrogateConfig, augment_buffer, init_surrogates,
                                 penalty, penalty_grad, regional_apls_from_predictions, sparsemax,
                                 train_surrogates, true_regional_apls)
from treereg.tree import TreeConfig, label_matrix, prune_tree, train_tree

SEEDS = (0, 1, 2)
LABEL_NOISE = 0.2
N_VAL = 250


def protocol(kind="none", strength=0.0, seed=0, epochs=1000):
    return TrainConfig(hidden=(32, 32), epochs=epochs, batch_size=32, lr=1e-2, seed=seed,
                       tree=TreeConfig(min_samples_leaf=1)).with_regularizer(kind, strength)


def five_rect(seed):
    train, test, spec, val = gen_five_rectangles(seed=seed, n_val=N_VAL, label_noise=LABEL_NOISE)
    return Splits(train, val, test), spec


def two_region(seed):
    train, test, spec, val = gen_two_region_toy(seed=seed, n_val=N_VAL, label_noise=LABEL_NOISE)
    return Splits(train, val, test), spec


@lru_cache(maxsize=None)
def toy_run(data, kind, strength, seed):
    splits, spec = {"five": five_rect, "two": two_region}[data](seed)
    cfg = protocol(kind, strength, seed)
    model, hist = train_target(cfg, splits, spec)
    m = evaluate(model, splits, spec, cfg.tree)
    m["epochs_to_converge"] = hist.epochs_to_converge
    m["converged"] = hist.converged
    return m


def mean_of(data, kind, strength, key):
    return float(np.mean([toy_run(data, kind, strength, s)[key] for s in SEEDS]))


def brute_force_projection(z):
    """Closest simplex point, searching every candidate support set."""
    best, best_d = None, np.inf
    for size in range(1, len(z) + 1):
        for S in itertools.combinations(range(len(z)), size):
            S = list(S)
            tau = (z[S].sum() - 1.0) / size
            p = np.zeros(len(z))
            p[S] = z[S] - tau
            if np.all(p >= 0):
                d = np.sum((p - z) ** 2)
                if d < best_d:
                    best, best_d = p, d
    return best


def central_diff(f, x, h=1e-5):
    return np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(len(x))])


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1e-6, np.abs(a) + np.abs(b))))


class TestSparsemaxCorrectness:
    def test_criterion_1(self, verdict):
        rng = np.random.default_rng(2024)
        worst_oracle = worst_sum = 0.0
        nonneg = shift_exact = True
        for _ in range(1000):
            R = int(rng.integers(1, 7))
            # dyadic entries so that integer shifts are exact in floating point
            z = np.round(rng.uniform(-5, 5, R) * 2**20) / 2**20
            p = sparsemax(z)
            worst_oracle = max(worst_oracle, float(np.max(np.abs(p - brute_force_projection(z)))))
            worst_sum = max(worst_sum, abs(float(p.sum()) - 1.0))
            nonneg &= bool(np.all(p >= 0))
            c = float(rng.integers(-100, 101))
            shift_exact &= bool(np.array_equal(sparsemax(z + c), p))
        ok = worst_oracle <= 1e-9 and worst_sum <= 1e-9 and nonneg and shift_exact
        verdict("criterion 1 sparsemax", ok,
                f"max|p - oracle|={worst_oracle:.2e}, max|sum-1|={worst_sum:.2e}, "
                f"nonnegative={nonneg}, shift exact={shift_exact}")
        assert ok


class TestGradientChecks:
    def test_criterion_2(self, verdict):
        rng = np.random.default_rng(7)
        worst_bwd = worst_inp = 0.0
        for k in range(50):
            p, h, q = int(rng.integers(1, 5)), int(rng.integers(2, 8)), int(rng.integers(1, 3))
            m = nn.init_mlp([p, h, q], 100 + k)
            X = rng.normal(size=(6, p))
            Y = rng.integers(0, 2, size=(6, q))
            fd = central_diff(lambda t: nn.loss_bce(nn.forward(m.with_params(t), X), Y), m.params)
            worst_bwd = max(worst_bwd, rel_err(nn.backward(m, X, Y), fd))
            s = nn.init_mlp([p, h, 1], 200 + k, head="identity")
            x = rng.normal(size=p)
            fd_x = central_diff(lambda v: float(nn.forward(s, v)[0]), x)
            worst_inp = max(worst_inp, rel_err(nn.grad_wrt_input(s, x), fd_x))

        # surrogates fit on a real buffer; weights frozen at the evaluation point
        D, R = 12, 4
        thetas = rng.normal(size=(60, D))
        targets = np.abs(thetas[:, :R] * 2 + thetas[:, R : 2 * R]) + 1.0
        S = train_surrogates(ParamBuffer(thetas, targets, 60),
                             init_surrogates(R, SurrogateConfig(epochs=40, project=False)))
        worst_pen = {}
        for kind in ("regional_l0", "regional_lsp"):
            worst = 0.0
            checked = 0
            for th in thetas[:20] + 0.05 * rng.normal(size=(20, D)):
                raw = S.predict(th)
                if np.any(raw < 0):
                    continue
                _, w = penalty(kind, raw)
                fd = central_diff(lambda t: float(w @ S.predict(t)), th)
                worst = max(worst, rel_err(penalty_grad(kind, S, th)[1], fd))
                checked += 1
            assert checked >= 10
            worst_pen[kind] = worst
        ok = max(worst_bwd, worst_inp, *worst_pen.values()) < 1e-4
        verdict("criterion 2 gradient checks", ok,
                f"backward {worst_bwd:.1e}, grad_wrt_input {worst_inp:.1e}, "
                f"L0 {worst_pen['regional_l0']:.1e}, LSP {worst_pen['regional_lsp']:.1e} (< 1e-4)")
        assert ok


class TestDeterministicCart:
    def test_criterion_3(self, verdict):
        rng = np.random.default_rng(3)
        X = rng.random((300, 3))
        y = ((X[:, 0] + X[:, 1] > 1) ^ (rng.random(300) < 0.2)).astype(int)
        cfg = TreeConfig(min_samples_leaf=1)
        first = train_tree(X, y, cfg)
        identical = all(train_tree(X, y, cfg).structurally_equal(first) for _ in range(100))

        acc_ok = nodes_ok = True
        for trial in range(200):
            n = int(rng.integers(10, 200))
            Xt = rng.random((n, 2))
            noise = rng.uniform(0, 0.4)
            yt = (Xt[:, 1] > np.sin(4 * Xt[:, 0]) / 3 + 0.5) ^ (rng.random(n) < noise)
            Xv = rng.random((n // 3 + 1, 2))
            yv = (Xv[:, 1] > np.sin(4 * Xv[:, 0]) / 3 + 0.5) ^ (rng.random(len(Xv)) < noise)
            t = train_tree(Xt, yt.astype(int), cfg)
            pr = prune_tree(t, Xv, yv.astype(int))
            acc_ok &= bool(np.mean(pr.predict(Xv) == yv) >= np.mean(t.predict(Xv) == yv))
            nodes_ok &= pr.n_nodes <= t.n_nodes
        ok = identical and acc_ok and nodes_ok
        verdict("criterion 3 deterministic CART", ok,
                f"100 refits identical={identical}, pruning keeps val acc={acc_ok}, "
                f"never adds nodes={nodes_ok} (200 trials)")
        assert ok


def surrogate_heldout(seed, n_synthetic, epochs=200, refits=(50, 100, 150), horizon=25):
    """Held-out MSE of surrogates refit along one unregularized toy trajectory.

    At each refit epoch the last 50 records form the buffer; the next ``horizon``
    records (never seen by the surrogate) are the held-out set.
    """
    splits, spec = five_rect(seed)
    cfg = protocol(seed=seed, epochs=epochs)
    parts = partition(splits.train.X, spec)
    X = splits.train.X

    template = nn.init_mlp([2, *cfg.hidden, 1], seed)

    def oracle(theta):
        m = template.with_params(theta)
        return regional_apls_from_predictions(X, label_matrix(nn.forward(m, X)), parts, cfg.tree)

    thetas, apls = [], []

    def record(_, model):
        thetas.append(model.params.copy())
        apls.append(oracle(model.params))

    train_target(cfg, splits, spec, on_epoch=record)
    thetas, apls = np.array(thetas), np.array(apls)
    scfg = SurrogateConfig(seed=seed)
    errs = []
    for t in refits:
        buf = ParamBuffer(thetas[t - 50 : t], apls[t - 50 : t], 50)
        buf = augment_buffer(buf, n_synthetic, seed + t, oracle)
        S = train_surrogates(buf, init_surrogates(len(parts), scfg))
        held_t, held_a = thetas[t : t + horizon], apls[t : t + horizon]
        pred = np.array([S.predict(th) for th in held_t])
        errs.append(np.mean((pred - held_a) ** 2))
    return float(np.mean(errs))


class TestAugmentationBenefit:
    def test_criterion_4(self, verdict):
        plain = [surrogate_heldout(s, 0) for s in range(5)]
        aug = [surrogate_heldout(s, 500) for s in range(5)]
        ok = np.mean(aug) < np.mean(plain)
        verdict("criterion 4 augmentation benefit", ok,
                f"held-out MSE without {np.mean(plain):.4f} vs with 500 samples "
                f"{np.mean(aug):.4f} (5 seeds; per seed {np.round(plain, 4).tolist()} / "
                f"{np.round(aug, 4).tolist()})")
        assert ok


TABLE = {"unregularized": ("none", 0.0), "l2": ("l2", 1e-3), "global": ("global_tree", 1.0),
         "l1": ("regional_l1", 0.1), "l0": ("regional_l0", 0.1), "lsp": ("regional_lsp", 0.1)}


@pytest.fixture(scope="module")
def table():
    rows = {}
    for name, (kind, lam) in TABLE.items():
        rows[name] = (mean_of("five", kind, lam, "accuracy"), mean_of("five", kind, lam, "apl"))
        print(f"  {name:14s} acc={rows[name][0]:.4f} apl={rows[name][1]:.3f}", flush=True)
    return rows


@pytest.mark.slow
class TestToyTable:
    def test_criterion_5a(self, table, verdict):
        acc, apl = table["unregularized"]
        ok = 0.78 <= acc <= 0.88 and 14 <= apl <= 22
        verdict("criterion 5a unregularized", ok,
                f"acc {acc:.4f} in [0.78, 0.88], APL {apl:.3f} in [14, 22]")
        assert ok

    def test_criterion_5b(self, table, verdict):
        acc, apl = table["lsp"]
        base = table["unregularized"][0]
        ok = acc >= base + 0.05 and apl <= 12
        verdict("criterion 5b LSP lambda=0.1", ok,
                f"acc {acc:.4f} vs required >= {base + 0.05:.4f}, APL {apl:.3f} vs <= 12")
        assert ok

    def test_criterion_5c(self, table, verdict):
        regs = {k: v for k, v in table.items() if k != "unregularized"}
        lowest = min(regs, key=lambda k: regs[k][1])
        ok = lowest == "global" and table["global"][0] < table["lsp"][0]
        verdict("criterion 5c global tree lambda=1", ok,
                f"lowest APL among regularizers: {lowest} ({regs[lowest][1]:.3f}); "
                f"global acc {table['global'][0]:.4f} vs LSP {table['lsp'][0]:.4f}")
        assert ok

    def test_criterion_5d(self, table, verdict):
        gap = abs(table["l0"][0] - table["lsp"][0])
        ok = gap <= 0.02
        verdict("criterion 5d L0 vs LSP accuracy", ok,
                f"|{table['l0'][0]:.4f} - {table['lsp'][0]:.4f}| = {gap:.4f} <= 0.02")
        assert ok


HIGH_STRENGTH = 10.0


@pytest.mark.slow
class TestOverRegularization:
    def test_criterion_6(self, verdict):
        hits = 0
        detail = []
        for s in SEEDS:
            l1 = toy_run("two", "regional_l1", HIGH_STRENGTH, s)["region_apls"]
            sp = toy_run("two", "regional_lsp", HIGH_STRENGTH, s)["region_apls"]
            hit = min(l1) == 0.0 and min(sp) >= 1.0
            hits += hit
            detail.append(f"seed {s}: L1 {np.round(l1, 2).tolist()} LSP {np.round(sp, 2).tolist()}")
        ok = hits >= 2
        verdict("criterion 6 L1 collapse vs LSP", ok,
                f"{hits}/3 seeds (lambda={HIGH_STRENGTH}); " + "; ".join(detail))
        assert ok


@pytest.mark.slow
class TestConvergenceSpeed:
    def test_criterion_7(self, verdict):
        l0 = [toy_run("five", "regional_l0", 0.1, s) for s in SEEDS]
        sp = [toy_run("five", "regional_lsp", 0.1, s) for s in SEEDS]
        e0 = float(np.mean([r["epochs_to_converge"] for r in l0]))
        esp = float(np.mean([r["epochs_to_converge"] for r in sp]))
        ok = e0 >= 3 * esp
        verdict("criterion 7 convergence speed", ok,
                f"L0 {e0:.0f} epochs vs LSP {esp:.0f} (ratio {e0 / esp:.2f}, need >= 3); "
                f"converged L0 {sum(r['converged'] for r in l0)}/3, "
                f"LSP {sum(r['converged'] for r in sp)}/3 (unconverged runs count the full budget)")
        assert ok


FIDELITY_GRID = (0.01, 0.1, 1.0)


@pytest.mark.slow
class TestFidelity:
    def test_criterion_8(self, verdict):
        rows = [{"kind": "regional_lsp", "lambda": lam, "seed": s, "status": "ok",
                 "val_f1": toy_run("five", "regional_lsp", lam, s)["val_f1"],
                 "apl": toy_run("five", "regional_lsp", lam, s)["apl"],
                 "fidelity": toy_run("five", "regional_lsp", lam, s)["fidelity"]}
                for lam in FIDELITY_GRID for s in SEEDS]
        # selection by validation F1 alone (no APL budget)
        chosen = select_run(rows, float("inf"))
        monotone = 0
        per_seed = []
        for s in SEEDS:
            f = [toy_run("five", "regional_lsp", lam, s)["fidelity"] for lam in FIDELITY_GRID]
            monotone += bool(f[0] < f[1] < f[2])
            per_seed.append(np.round(f, 3).tolist())
        ok = chosen["fidelity"] >= 0.8 and monotone >= 2
        verdict("criterion 8 fidelity", ok,
                f"selected run (lambda={chosen['lambda']}, seed {chosen['seed']}) fidelity "
                f"{chosen['fidelity']:.3f} >= 0.8; monotone in {monotone}/3 seeds {per_seed}")
        assert ok


class TestReductionIdentities:
    def test_criterion_9(self, verdict):
        rng = np.random.default_rng(9)
        values_equal = True
        for a in np.r_[rng.uniform(0, 20, 200), 0.0, 1e-300, 1e6]:
            g = penalty("global_tree", [a])
            for kind in ("regional_l1", "regional_l0", "regional_lsp"):
                r = penalty(kind, [a])
                values_equal &= r[0] == g[0] and np.array_equal(r[1], g[1])

        # same through trained single-region surrogates and real trees
        splits, _ = five_rect(0)
        model, _ = train_target(protocol(epochs=40), splits, None)
        X = splits.train.X
        true_equal = np.array_equal(true_regional_apls(model, X, single_region(2), TreeConfig()),
                                    true_regional_apls(model, X, None, TreeConfig()))
        thetas = model.params + 0.01 * rng.normal(size=(30, len(model.params)))
        targets = np.abs(rng.normal(3, 1, size=(30, 1)))
        S = train_surrogates(ParamBuffer(thetas, targets, 30), init_surrogates(1))
        ref = penalty_grad("global_tree", S, model.params)
        grads_equal = all(
            penalty_grad(k, S, model.params)[0] == ref[0]
            and np.array_equal(penalty_grad(k, S, model.params)[1], ref[1])
            for k in ("regional_l1", "regional_l0", "regional_lsp"))
        ok = values_equal and true_equal and grads_equal
        verdict("criterion 9 single-region identities", ok,
                f"penalty values={values_equal}, surrogate value+grad={grads_equal}, "
                f"true APL={true_equal} (exact equality)")
        assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-s", "-q"]))
