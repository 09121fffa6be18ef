"""Joint training with tree penalties, evaluation, distillation and the strength sweep."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import nn
from .datasets import Dataset, Splits
from .errors import ContractError, InvalidInputError, NonFiniteLossError
from .metrics import macro_scores
from .regions import RegionSpec, partition, single_region
from .regularizer import (
    ParamBuffer,
    RegularizerKind,
    SurrogateConfig,
    augment_buffer,
    init_surrogates,
    penalty_grad,
    regional_apls_from_predictions,
    train_surrogates,
)
from .tree import DecisionTree, TreeConfig, distill_tree, label_matrix

log = logging.getLogger(__name__)

LAMBDA_GRID = (0.0001, 0.0005, 0.001, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0)
SWEEP_SEEDS = (0, 1, 2)


@dataclass(frozen=True)
class TrainConfig:
    regularizer: RegularizerKind = field(default_factory=RegularizerKind)
    hidden: tuple[int, ...] = (32,)
    epochs: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    tree: TreeConfig = field(default_factory=TreeConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    record_every: int = 1
    convergence_window: int = 10
    convergence_tol: float = 1e-3
    stop_at_convergence: bool = False
    # "mean": mean data loss + strength * penalty; "sum": summed loss + strength * penalty
    loss_reduction: str = "mean"

    def with_regularizer(self, kind: str, strength: float, temperature: float | None = None):
        t = self.regularizer.temperature if temperature is None else temperature
        return replace(self, regularizer=RegularizerKind(kind, strength, t))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "regularizer" in d:
            d["regularizer"] = RegularizerKind(**d["regularizer"])
        if "tree" in d:
            d["tree"] = TreeConfig.from_dict(d["tree"])
        if "surrogate" in d:
            d["surrogate"] = SurrogateConfig.from_dict(d["surrogate"])
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


@dataclass
class History:
    rows: list = field(default_factory=list)
    surrogate_rows: list = field(default_factory=list)
    epochs_to_converge: int | None = None
    converged: bool = False

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)


def _region_parts(X, spec: RegionSpec | None):
    return [np.arange(len(X))] if spec is None else partition(X, spec)


def regional_apls(X, probs, spec: RegionSpec | None, cfg: TreeConfig) -> np.ndarray:
    """Per-region APL of the thresholded predictions."""
    parts = _region_parts(X, spec)
    return regional_apls_from_predictions(np.asarray(X, dtype=float), label_matrix(probs), parts, cfg)


def evaluation_apl(X, probs, spec: RegionSpec | None, cfg: TreeConfig) -> float:
    """Evaluation APL: per-region APLs summed over regions."""
    return float(regional_apls(X, probs, spec, cfg).sum())


def convergence_epoch(acc, apl, window: int = 10, tol: float = 1e-3) -> int | None:
    """First epoch (1-based) after which both series move by < ``tol`` for ``window``
    consecutive epochs; None if that never happens."""
    acc = np.asarray(acc, dtype=float)
    apl = np.asarray(apl, dtype=float)
    steady = (np.abs(np.diff(acc)) < tol) & (np.abs(np.diff(apl)) < tol)
    run = 0
    for i, ok in enumerate(steady):
        run = run + 1 if ok else 0
        if run >= window:
            # steady[i] compares epoch i+2 to epoch i+1 (1-based)
            return i + 2 - window
    return None


def train_target(cfg: TrainConfig, splits: Splits, spec: RegionSpec | None = None,
                 on_epoch: Callable[[int, nn.MlpModel], None] | None = None):
    """Minibatch Adam on mean data loss plus ``strength * penalty``.

    Tree penalties are estimated by per-region surrogates, refit every
    ``surrogate.retrain_period`` epochs on the recent parameter buffer plus
    Dirichlet-mixed synthetic parameters.  ``global_tree`` uses one region.
    ``on_epoch(epoch, model)`` is called after every epoch's updates.
    """
    reg = cfg.regularizer
    train, val = splits.train, splits.val
    P, Q = train.n_features, train.n_outputs
    model = nn.init_mlp([P, *cfg.hidden, Q], cfg.seed)
    opt = nn.adam_state(model, cfg.lr)
    batch_rng = np.random.default_rng(cfg.seed + 1)
    hist = History()

    active = reg.strength > 0 and reg.kind != "none"
    use_trees = active and reg.uses_trees
    train_spec = None if reg.kind == "global_tree" else spec
    parts = _region_parts(train.X, train_spec)
    R = len(parts)
    scfg = replace(cfg.surrogate, seed=cfg.surrogate.seed + 1000 * cfg.seed)
    surrogates = init_surrogates(R, scfg)
    buffer = ParamBuffer.empty(len(model.params), R, scfg.capacity)
    region_ok = np.array([len(p) >= 2 for p in parts])
    since_refit: list[tuple[np.ndarray, np.ndarray]] = []

    def regional(theta):
        m = model.with_params(theta)
        return regional_apls_from_predictions(train.X, label_matrix(nn.forward(m, train.X)), parts,
                                              cfg.tree)

    n = len(train)
    # backward() returns the mean-loss gradient; a summed loss is that times N
    penalty_scale = reg.strength / n if cfg.loss_reduction == "sum" else reg.strength
    for epoch in range(1, cfg.epochs + 1):
        order = batch_rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            extra = None
            if active and (reg.kind == "l2" or surrogates.trained):
                _, g = penalty_grad(reg, surrogates, model.params)
                extra = penalty_scale * g
            grad = nn.backward(model, train.X[idx], train.Y[idx], extra)
            model, opt = nn.step(model, grad, opt)

        if not np.all(np.isfinite(model.params)):
            raise NonFiniteLossError(f"parameters became non-finite at epoch {epoch} "
                                     f"({reg.kind}, strength={reg.strength})")
        probs_tr = nn.forward(model, train.X)
        loss = nn.loss_bce(probs_tr, train.Y)
        if not np.isfinite(loss):
            raise NonFiniteLossError(f"non-finite loss at epoch {epoch}")

        if on_epoch is not None:
            on_epoch(epoch, model)
        row = {"epoch": epoch, "loss": loss,
               "train_acc": float(np.mean(label_matrix(probs_tr) == train.Y))}
        if use_trees and (epoch % cfg.record_every == 0):
            apls = regional(model.params)
            buffer = buffer.add(model.params, apls)
            since_refit.append((model.params.copy(), apls))
            row["train_apl"] = float(apls.mean())
        if use_trees and surrogates.trained:
            est = np.maximum(surrogates.predict(model.params), 0.0)
            row["surrogate_apl"] = float(est.mean())
            row["penalty"] = penalty_grad(reg, surrogates, model.params)[0]
        probs_va = nn.forward(model, val.X)
        row["val_acc"] = float(np.mean(label_matrix(probs_va) == val.Y))
        row["val_apl"] = evaluation_apl(val.X, probs_va, spec, cfg.tree)
        hist.rows.append(row)

        if use_trees and epoch % scfg.retrain_period == 0 and len(buffer):
            held = None
            if surrogates.trained and since_refit:
                th = np.array([t for t, _ in since_refit])
                ap = np.array([a for _, a in since_refit])
                pred = np.array([surrogates.predict(t) for t in th])
                held = np.mean((pred - ap) ** 2, axis=0)
            aug = augment_buffer(buffer, scfg.n_synthetic, scfg.seed + epoch, regional)
            surrogates = train_surrogates(aug, surrogates, active=region_ok)
            since_refit = []
            for r in range(R):
                hist.surrogate_rows.append({
                    "epoch": epoch, "region": r, "buffer_size": len(aug),
                    "train_mse": surrogates.train_mse[r],
                    "heldout_mse": float("nan") if held is None else float(held[r]),
                })

        if cfg.stop_at_convergence:
            c = convergence_epoch(hist.column("val_acc"), hist.column("val_apl"),
                                  cfg.convergence_window, cfg.convergence_tol)
            if c is not None:
                break

    c = convergence_epoch(hist.column("val_acc"), hist.column("val_apl"),
                          cfg.convergence_window, cfg.convergence_tol)
    hist.converged = c is not None
    hist.epochs_to_converge = c if c is not None else len(hist.rows)
    return model, hist


def model_predictor(model: nn.MlpModel) -> Callable[[np.ndarray], np.ndarray]:
    return lambda X: nn.forward(model, X)


def distill_labels(X, labels, spec: RegionSpec | None, cfg: TreeConfig):
    """One pruned tree per nonempty region and output column of ``labels``.

    Returns ``trees[r][q]``; empty regions hold ``None``.
    """
    X = np.asarray(X, dtype=float)
    spec = spec or single_region(X.shape[1])
    labels = label_matrix(labels)
    trees = []
    for idx in partition(X, spec):
        if len(idx) == 0:
            trees.append(None)
            continue
        trees.append([distill_tree(X[idx], labels[idx], cfg, output=q)
                      for q in range(labels.shape[1])])
    return trees


def distill(predict_fn, dataset: Dataset, spec: RegionSpec | None, cfg: TreeConfig):
    """Region trees fit to the model's thresholded predictions on ``dataset``."""
    if isinstance(predict_fn, nn.MlpModel):
        predict_fn = model_predictor(predict_fn)
    return distill_labels(dataset.X, predict_fn(dataset.X), spec, cfg)


def trees_to_dict(trees, spec: RegionSpec | None) -> list[dict]:
    return [{"region": r, "outputs": None if ts is None else [t.to_dict() for t in ts]}
            for r, ts in enumerate(trees)]


def trees_from_dict(records: list[dict]):
    out = []
    for rec in sorted(records, key=lambda d: d["region"]):
        outs = rec["outputs"]
        out.append(None if outs is None else [DecisionTree.from_dict(t) for t in outs])
    return out


def export_trees(trees, directory) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for rec in trees_to_dict(trees, None):
        path = os.path.join(directory, f"region_{rec['region']}.json")
        with open(path, "w") as fh:
            json.dump(rec, fh, indent=1)
        paths.append(path)
    return paths


def import_trees(directory):
    recs = []
    for name in os.listdir(directory):
        if name.startswith("region_") and name.endswith(".json"):
            with open(os.path.join(directory, name)) as fh:
                recs.append(json.load(fh))
    return trees_from_dict(recs)


def routed_tree_predict(trees, spec: RegionSpec | None, X, proba: bool = False) -> np.ndarray:
    """Predict with the region's own trees.  ``proba`` returns leaf positive rates."""
    X = np.asarray(X, dtype=float)
    spec = spec or single_region(X.shape[1])
    ids = spec.assign_many(X)
    Q = next(len(ts) for ts in trees if ts is not None)
    out = np.zeros((len(X), Q))
    for r in np.unique(ids):
        rows = ids == r
        if r >= len(trees) or trees[r] is None:
            raise ContractError(f"region {r} has no distilled tree")
        for q, t in enumerate(trees[r]):
            if proba:
                leaves, _ = t.apply(X[rows])
                out[rows, q] = t.n_pos[leaves] / np.maximum(t.n_samples[leaves], 1)
            else:
                out[rows, q] = t.predict(X[rows])
    return out


def fidelity(predict_fn, trees, X, spec: RegionSpec | None) -> float:
    """Fraction of inputs where the region's tree agrees with the thresholded model."""
    if isinstance(predict_fn, nn.MlpModel):
        predict_fn = model_predictor(predict_fn)
    model_labels = label_matrix(predict_fn(X))
    tree_labels = routed_tree_predict(trees, spec, X)
    return float(np.mean(model_labels == tree_labels))


def evaluate(predict_fn, splits: Splits, spec: RegionSpec | None, cfg: TreeConfig,
             trees=None) -> dict:
    """Test metrics: evaluation APL (sum over regions), macro F1/AUC, accuracy, fidelity.

    ``region_apls`` holds the per-region terms and ``apl_mean`` their average.

    ``trees`` (distilled per region) defaults to a fresh distillation on the
    training inputs.
    """
    if isinstance(predict_fn, nn.MlpModel):
        predict_fn = model_predictor(predict_fn)
    test = splits.test
    if len(test) == 0:
        raise InvalidInputError("test split is empty")
    probs = predict_fn(test.X)
    out = macro_scores(test.Y, probs)
    parts = _region_parts(test.X, spec)
    for r, idx in enumerate(parts):
        if len(idx) < 2:
            log.warning("test region %d has %d points; its APL counts as 0", r, len(idx))
    per_region = regional_apls(test.X, probs, spec, cfg)
    out["apl"] = float(per_region.sum())
    out["apl_mean"] = float(per_region.mean())
    out["region_apls"] = [float(a) for a in per_region]
    if trees is None:
        trees = distill(predict_fn, splits.train, spec, cfg)
    try:
        out["fidelity"] = fidelity(predict_fn, trees, test.X, spec)
    except ContractError as exc:
        log.warning("fidelity unavailable: %s", exc)
        out["fidelity"] = float("nan")
    if len(splits.val):
        out["val_f1"] = macro_scores(splits.val.Y, predict_fn(splits.val.X))["f1"]
    return out


# ---------------------------------------------------------------- baselines


def fit_tree_baseline(splits: Splits, spec: RegionSpec | None, cfg: TreeConfig):
    """Trees fit directly on training labels, one per region (or one globally when
    ``spec`` is None), pruned with the same validation protocol as distillation."""
    return distill_labels(splits.train.X, splits.train.Y, spec, cfg)


def evaluate_tree_baseline(trees, splits: Splits, tree_spec: RegionSpec | None,
                           eval_spec: RegionSpec | None) -> dict:
    """Scores for a routed tree ensemble; its evaluation APL sums, over evaluation
    regions, the mean path depth of the test points in the ensemble itself."""
    test = splits.test
    probs = routed_tree_predict(trees, tree_spec, test.X, proba=True)
    out = macro_scores(test.Y, probs)
    tspec = tree_spec or single_region(test.n_features)
    tree_ids = tspec.assign_many(test.X)
    depth = np.zeros((len(test), probs.shape[1]))
    for r in np.unique(tree_ids):
        rows = tree_ids == r
        for q, t in enumerate(trees[r]):
            depth[rows, q] = t.depths(test.X[rows])
    parts = _region_parts(test.X, eval_spec)
    per_region = [depth[idx].mean() if len(idx) else 0.0 for idx in parts]
    out["apl"] = float(np.sum(per_region))
    out["apl_mean"] = float(np.mean(per_region))
    out["region_apls"] = [float(a) for a in per_region]
    out["fidelity"] = 1.0
    if len(splits.val):
        out["val_f1"] = macro_scores(splits.val.Y,
                                     routed_tree_predict(trees, tree_spec, splits.val.X))["f1"]
    return out


# ---------------------------------------------------------------- sweep

RESULT_FIELDS = ("kind", "lambda", "seed", "test_f1", "test_auc", "test_acc", "apl", "fidelity",
                 "val_f1", "train_time", "epochs_to_converge", "converged", "status")


def run_cell(base: TrainConfig, kind: str, strength: float, seed: int, splits: Splits,
             spec: RegionSpec | None) -> dict:
    cfg = replace(base.with_regularizer(kind, strength), seed=seed,
                  tree=base.tree.with_seed(base.tree.seed))
    row = {"kind": kind, "lambda": strength, "seed": seed}
    t0 = time.perf_counter()
    try:
        model, hist = train_target(cfg, splits, spec)
        m = evaluate(model, splits, spec, cfg.tree)
        row.update(test_f1=m["f1"], test_auc=m["auc"], test_acc=m["accuracy"], apl=m["apl"],
                   fidelity=m["fidelity"], val_f1=m.get("val_f1", float("nan")),
                   epochs_to_converge=hist.epochs_to_converge, converged=hist.converged,
                   status="ok")
    except Exception as exc:  # a failed cell must not sink the sweep
        log.exception("cell %s/%s/%s failed", kind, strength, seed)
        row.update(status=f"error: {type(exc).__name__}: {exc}")
    row["train_time"] = time.perf_counter() - t0
    return row


def baseline_rows(splits: Splits, spec: RegionSpec | None, base: TrainConfig,
                  seeds=SWEEP_SEEDS) -> list[dict]:
    rows = []
    for name, tree_spec in (("decision_tree", None), ("regional_decision_tree", spec)):
        for seed in seeds:
            t0 = time.perf_counter()
            trees = fit_tree_baseline(splits, tree_spec, base.tree.with_seed(seed))
            m = evaluate_tree_baseline(trees, splits, tree_spec, spec)
            rows.append({"kind": name, "lambda": float("nan"), "seed": seed, "test_f1": m["f1"],
                         "test_auc": m["auc"], "test_acc": m["accuracy"], "apl": m["apl"],
                         "fidelity": m["fidelity"], "val_f1": m["val_f1"],
                         "train_time": time.perf_counter() - t0, "epochs_to_converge": 0,
                         "converged": True, "status": "ok"})
    return rows


def sweep(base: TrainConfig, kinds, strengths, splits: Splits, spec: RegionSpec | None,
          seeds=SWEEP_SEEDS, out_csv=None, baselines: bool = True, workers: int = 1) -> list[dict]:
    """Every (kind, strength, seed) cell plus the two tree baselines; rows sorted by
    (kind, strength, seed).

    Cells are independent; with ``workers > 1`` they run in a process pool.
    """
    kinds, strengths = list(kinds), list(strengths)
    if not kinds or not strengths:
        raise InvalidInputError("sweep grid is empty")
    cells = [(k, lam, s) for k in kinds for lam in strengths for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(run_cell, base, k, lam, s, splits, spec) for k, lam, s in cells]
            rows = [f.result() for f in futs]
    else:
        rows = [run_cell(base, k, lam, s, splits, spec) for k, lam, s in cells]
    rows.sort(key=lambda r: (r["kind"], r["lambda"], r["seed"]))
    if baselines:
        rows += baseline_rows(splits, spec, base, seeds)
    if out_csv:
        write_rows(rows, out_csv, RESULT_FIELDS)
    return rows


def tradeoff_curves(rows: list[dict]) -> dict[str, list[tuple[float, float, float]]]:
    """Per kind: (mean APL, mean F1, strength) averaged over seeds, sorted by APL."""
    curves: dict[str, dict[float, list]] = {}
    for r in rows:
        if r.get("status") != "ok":
            continue
        curves.setdefault(r["kind"], {}).setdefault(r["lambda"], []).append(r)
    out = {}
    for kind, by_lam in curves.items():
        pts = [(float(np.mean([r["apl"] for r in rs])), float(np.mean([r["test_f1"] for r in rs])),
                lam) for lam, rs in by_lam.items()]
        out[kind] = sorted(pts)
    return out


def select_run(rows: list[dict], apl_budget: float) -> dict | None:
    """Best validation F1 among finished runs with evaluation APL within budget."""
    ok = [r for r in rows if r.get("status") == "ok" and r["apl"] <= apl_budget]
    return max(ok, key=lambda r: r["val_f1"]) if ok else None


def write_rows(rows: list[dict], path, fields=None) -> None:
    fields = list(fields or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in fields})


def write_history(hist: History, path) -> None:
    fields = ["epoch", "loss", "train_acc", "train_apl", "surrogate_apl", "penalty", "val_acc",
              "val_apl"]
    write_rows(hist.rows, path, fields)


def write_surrogate_log(hist: History, path) -> None:
    write_rows(hist.surrogate_rows, path,
               ["epoch", "region", "buffer_size", "train_mse", "heldout_mse"])
