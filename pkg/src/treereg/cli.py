"""Command-line entry point: ``treereg {gen-data,train,sweep,eval,distill}``.

Every subcommand reads an optional JSON config with sections ``dataset``,
``regions``, ``model``, ``regularizer``, ``tree``, ``surrogate`` and ``sweep``.
A flag of the same name (``--model '{"epochs": 50}'``) is merged over the
matching section.  Failures exit nonzero after printing one JSON line to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

from . import nn
from .datasets import (Dataset, Splits, gen_five_rectangles, gen_grid_toy, gen_two_region_toy,
                       load_delimited, read_exported, save_delimited)
from .errors import ContractError, NonFiniteLossError, TreeRegError
from .experiment import (LAMBDA_GRID, RESULT_FIELDS, SWEEP_SEEDS, TrainConfig, distill, evaluate,
                         export_trees, select_run, sweep, tradeoff_curves, train_target,
                         write_history, write_rows, write_surrogate_log)
from .regions import RegionSpec, kmeans_regions, load_spec, save_spec
from .regularizer import KINDS, TREE_KINDS, RegularizerKind, SurrogateConfig
from .tree import TreeConfig

log = logging.getLogger("treereg")

SECTIONS = ("dataset", "regions", "model", "regularizer", "tree", "surrogate", "sweep")

DEFAULTS = {
    "dataset": {"kind": "five_rectangles", "seed": 0, "n_train": 250, "n_test": 5000,
                "n_val": 250, "label_noise": 0.2},
    "regions": {"kind": "native"},
    "model": {"hidden": [32, 32], "epochs": 1000, "batch_size": 32, "lr": 0.01, "seed": 0,
              "loss_reduction": "mean"},
    "regularizer": {"kind": "regional_lsp", "strength": 0.1, "temperature": 1.0},
    "tree": {"min_samples_leaf": 1},
    "surrogate": {},
    "sweep": {"kinds": list(TREE_KINDS), "strengths": list(LAMBDA_GRID),
              "seeds": list(SWEEP_SEEDS), "baselines": True, "workers": 1},
}

_TOYS = {"five_rectangles": gen_five_rectangles, "two_region": gen_two_region_toy,
         "grid": gen_grid_toy}


class ConfigError(TreeRegError, ValueError):
    pass


def _json_arg(text: str) -> dict:
    try:
        val = json.loads(text)
    except json.JSONDecodeError as exc:
        raise argparse.ArgumentTypeError(f"not valid JSON: {exc}") from exc
    if not isinstance(val, dict):
        raise argparse.ArgumentTypeError("expected a JSON object")
    return val


def load_config(path: str | None, overrides: dict) -> dict:
    cfg = {k: dict(v) for k, v in DEFAULTS.items()}
    if path:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        unknown = set(user) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s) {sorted(unknown)}")
        for k, v in user.items():
            cfg[k].update(v)
    for k, v in overrides.items():
        if v is not None:
            cfg[k].update(v)
    return cfg


# ---------------------------------------------------------------- config -> objects


def build_splits(dcfg: dict) -> tuple[Splits, RegionSpec | None]:
    """Splits plus the generator's own region spec (None for file data)."""
    d = dict(dcfg)
    kind = d.pop("kind")
    if kind in _TOYS:
        if d.get("n_val", 0) < 2:
            raise ConfigError("toy datasets need n_val >= 2 for validation tracking")
        allowed = {"seed", "n_train", "n_test", "n_val", "label_noise", "rows", "cols"}
        extra = set(d) - allowed
        if extra:
            raise ConfigError(f"unsupported dataset option(s) {sorted(extra)} for {kind}")
        train, test, spec, val = _TOYS[kind](**d)
        return Splits(train, val, test), spec
    if kind == "csv":
        if "path" not in d or "label_columns" not in d:
            raise ConfigError("csv dataset needs 'path' and 'label_columns'")
        return load_delimited(d["path"], d["label_columns"], d.get("standardize", True),
                              d.get("categorical_columns", ()), d.get("seed", 0)), None
    if kind == "exported":
        # directory written by gen-data
        root = d.get("path")
        if not root:
            raise ConfigError("exported dataset needs 'path'")
        parts = [read_exported(os.path.join(root, f"{s}.csv")) for s in ("train", "val", "test")]
        parts = [Dataset(p.X, p.Y, s, p.region_ids) for p, s in zip(parts, ("train", "validation", "test"))]
        spec_path = os.path.join(root, "regions.json")
        return Splits(*parts), load_spec(spec_path) if os.path.exists(spec_path) else None
    raise ConfigError(f"unknown dataset kind {kind!r}")


def build_spec(rcfg: dict, splits: Splits, native: RegionSpec | None) -> RegionSpec | None:
    kind = rcfg.get("kind", "native")
    if kind == "native":
        if native is None:
            raise ConfigError("dataset has no native regions; use regions.kind 'kmeans' or 'file'")
        return native
    if kind == "kmeans":
        return kmeans_regions(splits.train.X, int(rcfg.get("k", 5)), int(rcfg.get("seed", 0)))
    if kind == "file":
        return load_spec(rcfg["path"])
    if kind == "none":
        return None
    raise ConfigError(f"unknown regions kind {kind!r}")


def build_train_config(cfg: dict) -> TrainConfig:
    m = dict(cfg["model"])
    if "hidden" in m:
        m["hidden"] = tuple(m["hidden"])
    try:
        return TrainConfig(regularizer=RegularizerKind(**cfg["regularizer"]),
                           tree=TreeConfig.from_dict(cfg["tree"]),
                           surrogate=SurrogateConfig.from_dict(cfg["surrogate"]), **m)
    except TypeError as exc:
        raise ConfigError(f"bad config field: {exc}") from exc


# ---------------------------------------------------------------- subcommands


def _ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _save_checkpoint(path, model, tcfg: TrainConfig, spec, cfg: dict) -> None:
    with open(path, "w") as fh:
        json.dump({"model": nn.model_to_dict(model), "train_config": tcfg.to_dict(),
                   "config": cfg, "regions": None if spec is None else spec.to_dict()}, fh)


def _load_checkpoint(path):
    with open(path) as fh:
        ck = json.load(fh)
    spec = None if ck["regions"] is None else RegionSpec.from_dict(ck["regions"])
    return nn.model_from_dict(ck["model"]), spec, ck


def cmd_gen_data(args, cfg) -> int:
    out = _ensure_dir(args.out)
    splits, spec = build_splits(cfg["dataset"])
    for name, ds in (("train", splits.train), ("val", splits.val), ("test", splits.test)):
        save_delimited(ds, os.path.join(out, f"{name}.csv"), spec)
    if spec is not None:
        save_spec(spec, os.path.join(out, "regions.json"))
    print(json.dumps({"out": out, "n_train": len(splits.train), "n_val": len(splits.val),
                      "n_test": len(splits.test)}))
    return 0


def cmd_train(args, cfg) -> int:
    out = _ensure_dir(args.out)
    splits, native = build_splits(cfg["dataset"])
    spec = build_spec(cfg["regions"], splits, native)
    tcfg = build_train_config(cfg)
    t0 = time.perf_counter()
    model, hist = train_target(tcfg, splits, spec)
    train_time = time.perf_counter() - t0
    trees = distill(model, splits.train, spec, tcfg.tree)
    m = evaluate(model, splits, spec, tcfg.tree, trees)
    _save_checkpoint(os.path.join(out, "checkpoint.json"), model, tcfg, spec, cfg)
    write_history(hist, os.path.join(out, "history.csv"))
    write_surrogate_log(hist, os.path.join(out, "surrogates.csv"))
    export_trees(trees, os.path.join(out, "trees"))
    reg = tcfg.regularizer
    row = {"kind": reg.kind, "lambda": reg.strength, "seed": tcfg.seed, "test_f1": m["f1"],
           "test_auc": m["auc"], "test_acc": m["accuracy"], "apl": m["apl"],
           "fidelity": m["fidelity"], "val_f1": m.get("val_f1", float("nan")), "train_time": train_time,
           "epochs_to_converge": hist.epochs_to_converge, "converged": hist.converged,
           "status": "ok"}
    write_rows([row], os.path.join(out, "results.csv"), RESULT_FIELDS)
    print(json.dumps(m))
    return 0


def cmd_sweep(args, cfg) -> int:
    out = _ensure_dir(args.out)
    splits, native = build_splits(cfg["dataset"])
    spec = build_spec(cfg["regions"], splits, native)
    base = build_train_config(cfg)
    s = cfg["sweep"]
    unknown = [k for k in s["kinds"] if k not in KINDS]
    if unknown:
        raise ConfigError(f"unknown regularizer kind(s) {unknown}")
    rows = sweep(base, s["kinds"], s["strengths"], splits, spec, tuple(s["seeds"]),
                 os.path.join(out, "results.csv"), s.get("baselines", True), s.get("workers", 1))
    curves = [{"kind": k, "apl": a, "f1": f, "lambda": lam}
              for k, pts in tradeoff_curves(rows).items() for a, f, lam in pts]
    write_rows(curves, os.path.join(out, "curves.csv"), ["kind", "lambda", "apl", "f1"])
    summary = {"rows": len(rows), "failed": sum(r["status"] != "ok" for r in rows)}
    if "apl_budget" in s:
        summary["selected"] = select_run(rows, float(s["apl_budget"]))
    print(json.dumps(summary))
    return 0


def _checkpoint_defaults(args, cfg: dict, ck: dict) -> dict:
    # without an explicit config, reuse the dataset and tree settings the model was trained with
    cfg = dict(cfg)
    for name in ("dataset", "tree"):
        if args.config is None and getattr(args, name) is None and name in ck.get("config", {}):
            cfg[name] = ck["config"][name]
    return cfg


def cmd_eval(args, cfg) -> int:
    model, spec, ck = _load_checkpoint(args.checkpoint)
    cfg = _checkpoint_defaults(args, cfg, ck)
    splits, _ = build_splits(cfg["dataset"])
    m = evaluate(model, splits, spec, TreeConfig.from_dict(cfg["tree"]))
    text = json.dumps(m)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_distill(args, cfg) -> int:
    model, spec, ck = _load_checkpoint(args.checkpoint)
    cfg = _checkpoint_defaults(args, cfg, ck)
    splits, _ = build_splits(cfg["dataset"])
    trees = distill(model, splits.train, spec, TreeConfig.from_dict(cfg["tree"]))
    paths = export_trees(trees, os.path.join(args.out, "trees"))
    print(json.dumps({"trees": paths}))
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="treereg", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        for name in SECTIONS:
            sp.add_argument(f"--{name}", type=_json_arg, default=None,
                            help=f"JSON object merged into the '{name}' section")

    sp = sub.add_parser("gen-data", help="write a toy dataset as CSV plus region JSON")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train one configuration")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sweep", help="run the kind x strength x seed grid")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("eval", help="metrics JSON for a checkpoint on a dataset")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", help="also write the metrics JSON here")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("distill", help="per-region trees from a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_distill)
    return p


# exit codes
EXIT_OK, EXIT_UNEXPECTED, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2, 3


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (ContractError, NonFiniteLossError)):
        return EXIT_RUNTIME
    if isinstance(exc, (ValueError, KeyError, OSError)):
        return EXIT_INPUT
    return EXIT_UNEXPECTED


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {k: getattr(args, k) for k in SECTIONS})
        return args.func(args, cfg)
    except Exception as exc:  # noqa: BLE001 - report every failure as one JSON line
        code = exit_code(exc)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}),
              file=sys.stderr)
        return code

if __name__ == "__main__":
    sys.exit(main())
