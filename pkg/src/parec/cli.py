"""Command-line entry point: ``parec {prepare,train,eval,visualize,experiment}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Run configuration comes from an optional JSON file (``--config``); flags
given on the command line override it.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

from . import BACKEND
from .analysis import attention_map, export_grid, grid_filename, positional_correlation
from .dataset import (
    DataError,
    dataset_stats,
    load_dataset,
    load_interactions,
    preprocess,
    save_dataset,
)
from .evaluation import evaluate, write_report
from .model import VARIANTS, AttentionSpec, ModelDims, default_rank, load_checkpoint, save_checkpoint
from .model import validate as validate_model
from .training import DivergenceError, TrainConfig, run_experiment, train, write_log

log = logging.getLogger("parec")

# config key -> (type, default); None defaults are filled in from other keys
RUN_KEYS = {
    "data": (str, None),
    "variant": (str, "fparec"),
    "dim": (int, 64),
    "max_len": (int, 50),
    "blocks": (int, 2),
    "rank_k": (int, None),
    "heads": (int, 1),
    "mask_after_softmax": (bool, False),
    "dropout": (float, 0.2),
    "seed": (int, 0),
    "lr": (float, 1e-3),
    "batch_size": (int, 128),
    "epochs": (int, 200),
    "patience": (int, 20),
    "eval_batch_size": (int, 256),
}


class UsageError(Exception):
    """Bad invocation or configuration (exit code 2)."""

    def __init__(self, errors):
        self.errors = [errors] if isinstance(errors, str) else list(errors)
        super().__init__("; ".join(self.errors))


def _check_out(out, force):
    out = Path(out)
    occupied = any(out.iterdir()) if out.is_dir() else out.exists()
    if occupied:
        if not force:
            raise UsageError(f"output {out} already exists; pass --force to overwrite")
        if out.is_dir():
            shutil.rmtree(out)
        else:
            out.unlink()
    return out


def _write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------------
# run configuration


def resolve_config(args):
    """Merge ``--config`` JSON with flag overrides; report every problem at once."""
    errs = []
    cfg = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}")
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {args.config} is not valid JSON: {e}")
        if not isinstance(loaded, dict):
            raise UsageError(f"config file {args.config} must hold a JSON object")
        for key, value in loaded.items():
            if key not in RUN_KEYS:
                errs.append(f"unknown config key {key!r}")
                continue
            typ = RUN_KEYS[key][0]
            if typ is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if not isinstance(value, typ) or (typ is int and isinstance(value, bool)):
                errs.append(f"config key {key!r} must be {typ.__name__}, got {value!r}")
                continue
            cfg[key] = value
    for key in RUN_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    for key, (_, default) in RUN_KEYS.items():
        cfg.setdefault(key, default)

    if cfg["data"] is None:
        errs.append("no dataset given (--data or config key 'data')")
    elif not (Path(cfg["data"]) / "dataset.json").is_file():
        errs.append(f"dataset directory {cfg['data']} has no dataset.json (run 'parec prepare')")
    if cfg["variant"] not in VARIANTS:
        errs.append(f"variant must be one of {sorted(VARIANTS)}, got {cfg['variant']!r}")
        spec = None
    else:
        kind = VARIANTS[cfg["variant"]][0]
        if kind == "factorized" and cfg["rank_k"] is None:
            cfg["rank_k"] = min(default_rank(cfg["max_len"]), max(cfg["max_len"], 1))
        if kind != "factorized" and cfg["rank_k"] is not None:
            errs.append(f"--rank-k only applies to fparec, not {cfg['variant']}")
        if kind != "dot_product" and cfg["heads"] != 1:
            errs.append(f"--heads only applies to sasrec, not {cfg['variant']}")
        spec = AttentionSpec.from_variant(cfg["variant"], k=cfg["rank_k"], num_heads=cfg["heads"],
                                          mask_after_softmax=cfg["mask_after_softmax"])
    if cfg["max_len"] < 2:
        errs.append(f"max_len must be >= 2, got {cfg['max_len']}")
    if spec is not None:
        dims = ModelDims(cfg["dim"], cfg["max_len"], cfg["blocks"], 1)
        errs.extend(validate_model(spec, dims))
    errs.extend(train_config(cfg).errors())
    if errs:
        raise UsageError(errs)
    return cfg, spec


def train_config(cfg):
    return TrainConfig(learning_rate=cfg["lr"], batch_size=cfg["batch_size"],
                       max_epochs=cfg["epochs"], patience=cfg["patience"],
                       dropout_rate=cfg["dropout"], seed=cfg["seed"],
                       eval_batch_size=cfg["eval_batch_size"])


def _load_data(cfg):
    ds = load_dataset(cfg["data"])
    dims = ModelDims(cfg["dim"], cfg["max_len"], cfg["blocks"], ds.num_items)
    return ds, dims


def _provenance(cfg, ds):
    return {"seed": cfg["seed"], "dataset_sha256": ds.fingerprint(), "backend": BACKEND}


# --------------------------------------------------------------------------
# commands


def cmd_prepare(args):
    src = Path(args.input)
    if not src.is_file():
        raise UsageError(f"input file not found: {src}")
    if args.min_count < 1:
        raise UsageError(f"--min-count must be >= 1, got {args.min_count}")
    out = _check_out(args.out, args.force)
    raw = load_interactions(src, args.format)
    ds = preprocess(raw, args.min_count, iterative=not args.single_pass)
    users, items, inter, avg = dataset_stats(ds)
    stats = {"users": users, "items": items, "interactions": inter, "avg_length": avg,
             "raw_interactions": len(raw), "min_count": args.min_count,
             "iterative": not args.single_pass, "source": str(src)}
    save_dataset(ds, out, extra={"source": str(src), "min_count": args.min_count,
                                 "iterative": not args.single_pass})
    _write_json(stats, out / "stats.json")
    print(f"{src}: {len(raw)} raw interactions -> {users} users, {items} items, "
          f"{inter} interactions (avg length {avg:.2f})")
    print(f"wrote {out}")
    return 0


def cmd_train(args):
    cfg, spec = resolve_config(args)
    out = _check_out(args.out, args.force)
    ds, dims = _load_data(cfg)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(cfg, out / "config.json")
    res = train(ds, spec, dims, train_config(cfg),
                on_epoch=lambda r: log.info("epoch %(epoch)d loss %(train_loss).4f "
                                            "val HR@10 %(val_hr10).4f", r))
    write_log(res.log, out / "train_log.jsonl")
    save_checkpoint(out, res.params, spec, dims, epoch=res.best_epoch, **_provenance(cfg, ds))
    valid = evaluate(res.params, spec, ds, "valid", cfg["eval_batch_size"], n=dims.n)
    test = evaluate(res.params, spec, ds, "test", cfg["eval_batch_size"], n=dims.n)
    report = {"valid": valid.to_json(), "test": test.to_json(), "best_epoch": res.best_epoch,
              "epochs_run": len(res.log), **_provenance(cfg, ds)}
    _write_json(report, out / "report.json")
    print(f"{spec.variant}: {len(res.log)} epochs, best epoch {res.best_epoch}")
    print(f"  valid HR@10 {valid.hr:.4f}  NDCG@10 {valid.ndcg:.4f}")
    print(f"  test  HR@10 {test.hr:.4f}  NDCG@10 {test.ndcg:.4f}")
    print(f"wrote {out}")
    return 0


def _open_checkpoint(path):
    path = Path(path)
    if not (path / "model.json").is_file() or not (path / "model.bin").is_file():
        raise UsageError(f"{path} is not a checkpoint directory (model.json/model.bin missing)")
    return load_checkpoint(path)


def cmd_eval(args):
    params, spec, dims, manifest = _open_checkpoint(args.checkpoint)
    data = args.data
    if data is None:
        cfg_path = Path(args.checkpoint) / "config.json"
        if not cfg_path.is_file():
            raise UsageError("no --data given and the checkpoint has no config.json")
        data = json.loads(cfg_path.read_text(encoding="utf-8"))["data"]
    if not (Path(data) / "dataset.json").is_file():
        raise UsageError(f"dataset directory {data} has no dataset.json")
    ds = load_dataset(data)
    if ds.num_items != dims.num_items:
        raise UsageError(f"checkpoint scores {dims.num_items} items but dataset has {ds.num_items}")
    if "dataset_sha256" in manifest and manifest["dataset_sha256"] != ds.fingerprint():
        log.warning("dataset fingerprint differs from the one the checkpoint was trained on")
    rep = evaluate(params, spec, ds, args.phase, k=args.k, exclude_seen=args.exclude_seen,
                   n=dims.n)
    out = Path(args.out) if args.out else Path(args.checkpoint) / f"eval_{args.phase}.json"
    write_report(rep, out, ranks_path=args.ranks,
                 extra={"phase": args.phase, "exclude_seen": args.exclude_seen,
                        "variant": spec.variant, "dataset_sha256": ds.fingerprint()})
    print(f"{spec.variant} on {args.phase}: HR@{args.k} {rep.hr:.4f}  NDCG@{args.k} {rep.ndcg:.4f}"
          f"  ({rep.num_users_evaluated} users)")
    print(f"wrote {out}")
    return 0


def cmd_visualize(args):
    params, spec, dims, _ = _open_checkpoint(args.checkpoint)
    if args.what == "attention" and spec.kind not in ("positional", "factorized"):
        raise UsageError(f"attention maps need a parec or fparec checkpoint, not {spec.variant}")
    if args.what == "correlation" and "pos_emb" not in params:
        raise UsageError(f"correlation maps need positional embeddings (sasrec), not {spec.variant}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grids = []
    if args.what == "attention":
        for block in range(1, dims.num_blocks + 1):
            grids.append((block, attention_map(params, spec, block)))
    else:
        grids.append((None, positional_correlation(params["pos_emb"], broadcast=args.broadcast)))
    written = []
    for block, grid in grids:
        for ext in ("pgm", "csv"):
            name = grid_filename(args.what, spec.variant, dims.n, block, ext)
            if (out / name).exists() and not args.force:
                raise UsageError(f"{out / name} already exists; pass --force to overwrite")
            written.append(export_grid(grid, out / name))
    for p in written:
        print(f"wrote {p}")
    return 0


def cmd_experiment(args):
    if args.repeats < 1 or args.repeats % 2 == 0:
        raise UsageError(f"--repeats must be a positive odd number, got {args.repeats}")
    cfg, spec = resolve_config(args)
    out = _check_out(args.out, args.force)
    ds, dims = _load_data(cfg)
    out.mkdir(parents=True, exist_ok=True)
    _write_json({**cfg, "repeats": args.repeats}, out / "config.json")

    def on_run(run, res):
        run_dir = out / f"run_seed{run['seed']}"
        run_dir.mkdir()
        write_log(res.log, run_dir / "train_log.jsonl")
        save_checkpoint(run_dir, res.params, spec, dims, epoch=res.best_epoch,
                        **{**_provenance(cfg, ds), "seed": run["seed"]})
        log.info("seed %d: test HR@10 %.4f NDCG@10 %.4f", run["seed"], run["test_hr10"],
                 run["test_ndcg10"])

    summary = run_experiment(ds, spec, dims, train_config(cfg), args.repeats, on_run)
    summary.update(variant=spec.variant, **_provenance(cfg, ds))
    _write_json(summary, out / "experiment.json")
    for r in summary["runs"]:
        print(f"  seed {r['seed']}: test HR@10 {r['test_hr10']:.4f}  NDCG@10 {r['test_ndcg10']:.4f}"
              f"  (best epoch {r['best_epoch']})")
    med = summary["median"]
    print(f"{spec.variant} median of {args.repeats}: HR@10 {med['test_hr10']:.4f}  "
          f"NDCG@10 {med['test_ndcg10']:.4f}")
    print(f"wrote {out}")
    return 0


# --------------------------------------------------------------------------
# argument parsing


def _run_flags(p):
    g = p.add_argument_group("run configuration (overrides --config)")
    g.add_argument("--config", help="JSON file with run settings")
    g.add_argument("--data", help="prepared dataset directory")
    g.add_argument("--variant", choices=sorted(VARIANTS))
    g.add_argument("--dim", type=int, help="hidden size d (default 64)")
    g.add_argument("--max-len", dest="max_len", type=int, help="sequence length n (default 50)")
    g.add_argument("--blocks", type=int, help="number of attention blocks (default 2)")
    g.add_argument("--rank-k", dest="rank_k", type=int,
                   help="factorization rank for fparec (default 40 if n >= 200 else 20, capped at n)")
    g.add_argument("--heads", type=int, help="attention heads for sasrec (default 1)")
    g.add_argument("--mask-after-softmax", dest="mask_after_softmax", action="store_const",
                   const=True, help="zero future weights after the softmax instead of before")
    g.add_argument("--dropout", type=float, help="dropout rate (default 0.2)")
    g.add_argument("--seed", type=int)
    g.add_argument("--lr", type=float, help="Adam learning rate (default 1e-3)")
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--epochs", type=int, help="maximum epochs (default 200)")
    g.add_argument("--patience", type=int, help="early-stopping patience (default 20)")
    g.add_argument("--eval-batch-size", dest="eval_batch_size", type=int)


def build_parser():
    ap = argparse.ArgumentParser(prog="parec", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="filter, split and index a raw interaction log")
    p.add_argument("input", help="ratings file")
    p.add_argument("--format", choices=("movielens_dat", "tsv"), default="movielens_dat")
    p.add_argument("--min-count", dest="min_count", type=int, default=5)
    p.add_argument("--single-pass", dest="single_pass", action="store_true",
                   help="apply the count filter once instead of to a fixed point")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one model and save its best checkpoint")
    _run_flags(p)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="full-ranking HR@K / NDCG@K of a checkpoint")
    p.add_argument("checkpoint", help="run directory holding model.bin/model.json")
    p.add_argument("--data", help="dataset directory (default: the one in the run config)")
    p.add_argument("--phase", choices=("valid", "test"), default="test")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--exclude-seen", dest="exclude_seen", action="store_true")
    p.add_argument("--out", help="report path (default <checkpoint>/eval_<phase>.json)")
    p.add_argument("--ranks", help="also write per-user ranks as TSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize", help="export attention or embedding-correlation grids")
    p.add_argument("checkpoint")
    p.add_argument("--what", choices=("attention", "correlation"), default="attention")
    p.add_argument("--broadcast", choices=("row", "literal"), default="row",
                   help="correlation row normalization: per row, or numpy's unkept-axis division")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("experiment", help="median test metrics over several seeds")
    _run_flags(p)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_experiment)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as e:
        for msg in e.errors:
            print(f"parec {args.command}: error: {msg}", file=sys.stderr)
        return 2
    except (DataError, DivergenceError, ValueError, OSError) as e:
        print(f"parec {args.command}: failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
