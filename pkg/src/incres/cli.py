"""``incres`` command-line entry point.

Every table is UTF-8 CSV with a header row; figures are PNGs written next
to them. Reruns with the same config and seed produce identical files.
"""

import argparse
import concurrent.futures as cf
import csv
import itertools
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import metrics as M
from . import weights
from .arch import build_model, format_shape_table, reset_head
from .config import ExperimentConfig, from_flat, load_config
from .data import gen_synthetic, load_manifest, load_samples, resize_samples, split_train_val
from .errors import ConfigError, IncresError
from .train import TrainConfig, crossval, finetune, fit, read_records, write_records

log = logging.getLogger("incres")

EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

CURVE_COLUMNS = ("run", "fold", "epoch", "train_loss", "val_loss", "train_acc", "val_acc",
                 "val_auc")
SWEEP_COLUMNS = ("lr", "bs", "tl", "val_acc", "val_loss", "status")
RECORD_COLUMNS = ("run", "fold", "status") + M.METRIC_NAMES


# ---------------------------------------------------------------- helpers

def _fmt(v):
    if v is None or not M.is_defined(v):
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metric_cells(d):
    """Metric dict with undefined values spelled out rather than left blank."""
    return {k: ("undefined" if v is None else v) for k, v in (d or {}).items()}


def write_csv(path, columns, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def resolve_config(args):
    cfg = load_config(args.config, args.desk) if args.config else from_flat({}, args.desk)
    if args.seed is not None:
        cfg = ExperimentConfig(replace(cfg.model, seed=args.seed),
                               replace(cfg.train, seed=args.seed), cfg.extra)
    return cfg


def load_data(args, cfg, split="train"):
    """Samples for ``split``, from the manifest or the synthetic generator."""
    size = cfg.model.input_size
    if args.synthetic:
        offset = 0 if split == "train" else 1
        s = gen_synthetic(cfg.get("data.synthetic_n"), cfg.get("data.synthetic_size"),
                          cfg.train.seed * 2 + offset, cfg.get("data.synthetic_task"))
        return resize_samples(s, size)
    if not args.manifest:
        raise ConfigError("need --manifest or --synthetic")
    return load_samples(load_manifest(args.manifest), split, size)


def holdout(args, cfg):
    samples = load_data(args, cfg, "train")
    return split_train_val(samples, cfg.get("data.val_fraction"), cfg.train.seed)


def curve_rows(records, sources=None):
    """Long-format curve rows sorted by (source, run, fold, epoch)."""
    rows = []
    for i, rec in enumerate(records):
        for c in rec.curve:
            rows.append({"source": sources[i] if sources else "", "run": rec.run,
                         "fold": rec.fold, "epoch": c.epoch,
                         "train_loss": c.train_loss, "val_loss": c.val_loss,
                         "train_acc": c.train_acc, "val_acc": c.val_acc, "val_auc": c.val_auc})
    return sorted(rows, key=lambda r: (r["source"], r["run"], r["fold"], r["epoch"]))


def _out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run(out, rec, model, cfg):
    from . import plots
    write_records([rec], out / "record.jsonl")
    rows = curve_rows([rec])
    write_csv(out / "curve.csv", CURVE_COLUMNS, rows)
    if rows:
        plots.plot_curves(rows, out / "curves.png")
    (out / "config.json").write_text(cfg.dumps(), encoding="utf-8")
    if rec.ok:
        # no extra metadata, so the file digest equals rec.checkpoint_digest
        weights.save(model, out / "model.irwt")
        write_csv(out / "metrics.csv", M.METRIC_NAMES, [metric_cells(rec.metrics)])


# ---------------------------------------------------------------- commands

def cmd_train(args):
    cfg = resolve_config(args)
    base = getattr(args, "base", None) or cfg.get("train.base_checkpoint")
    train, val = holdout(args, cfg)
    if base:
        model, rec = finetune(base, cfg.model, cfg.train, train, val)
    else:
        model = build_model(cfg.model)
        rec = fit(model, train, val, cfg.train)
    out = _out(args)
    _write_run(out, rec, model, cfg)
    if not rec.ok:
        log.error("training diverged at epoch %s batch %s: %s", rec.failure["epoch"],
                  rec.failure["batch"], rec.failure["message"])
        return EXIT_DIVERGED
    log.info("val acc %s after %d epochs -> %s", M.sci(rec.metrics["acc"]), len(rec.curve), out)
    return 0


def cmd_finetune(args):
    if not args.base:
        raise ConfigError("finetune needs --base CHECKPOINT")
    return cmd_train(args)


def cmd_crossval(args):
    from . import plots
    cfg = resolve_config(args)
    samples = load_data(args, cfg, "train")
    out = _out(args)
    res = crossval(samples, cfg.model, cfg.train, k=cfg.get("train.k"),
                   runs=cfg.get("train.runs"), workers=cfg.get("train.workers"),
                   on_record=lambda r: log.info("run %d fold %d: %s", r.run, r.fold, r.status))
    write_records(res.records, out / "records.jsonl")
    rows = [{"run": r.run, "fold": r.fold, "status": r.status,
             **metric_cells(r.metrics)}
            for r in res.records]
    if res.aggregate is not None:
        rows.append({"run": "mean", "fold": "", "status": f"n={res.aggregate.n}",
                     **metric_cells(res.aggregate.report.to_dict())})
    write_csv(out / "crossval.csv", RECORD_COLUMNS, rows)
    if res.aggregate is not None:
        (out / "report.csv").write_text(M.render_report(res.aggregate.report), encoding="utf-8")
    crows = curve_rows(res.records)
    write_csv(out / "curves.csv", CURVE_COLUMNS, crows)
    if crows:
        plots.plot_curves(crows, out / "curves.png")
    (out / "config.json").write_text(cfg.dumps(), encoding="utf-8")
    if res.failed:
        log.warning("%d of %d folds failed and were left out of the mean", res.failed,
                    len(res.records))
    return 0


def _sweep_cell(job):
    model_cfg, tcfg, train, val = job
    row = {"lr": tcfg.learning_rate, "bs": tcfg.batch_size,
           "tl": "all" if tcfg.trainable_layers is None else tcfg.trainable_layers}
    try:
        rec = fit(build_model(model_cfg), train, val, tcfg)
    except ConfigError as exc:
        return {**row, "status": f"failed: {exc}"}
    if not rec.ok:
        return {**row, "status": "diverged"}
    last = rec.curve[-1]
    return {**row, "val_acc": last.val_acc, "val_loss": last.val_loss, "status": "ok"}


def sweep_grid(cfg):
    lrs, bss, tls = (cfg.get("sweep.learning_rates"), cfg.get("sweep.batch_sizes"),
                     cfg.get("sweep.trainable_layers"))
    if not (lrs and bss and tls):
        raise ConfigError("sweep grid is empty", key="sweep.learning_rates")
    return [replace(cfg.train, learning_rate=lr, batch_size=bs, trainable_layers=tl)
            for lr, bs, tl in itertools.product(lrs, bss, tls)]


def best_cell(rows):
    """Highest val_acc among successful cells; ties -> lower LR, smaller BS, smaller TL."""
    ok = [r for r in rows if r["status"] == "ok"]
    if not ok:
        return None

    def tl_key(tl):
        return float("inf") if tl == "all" else tl
    return min(ok, key=lambda r: (-r["val_acc"], r["lr"], r["bs"], tl_key(r["tl"])))


def cmd_sweep(args):
    from . import plots
    cfg = resolve_config(args)
    cells = sweep_grid(cfg)
    train, val = holdout(args, cfg)
    jobs = [(cfg.model, t, train, val) for t in cells]
    workers = cfg.get("sweep.workers")
    if workers > 1:
        with cf.ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_sweep_cell, jobs))
    else:
        rows = []
        for job in jobs:
            rows.append(_sweep_cell(job))
            log.info("lr=%g bs=%d tl=%s: %s", rows[-1]["lr"], rows[-1]["bs"], rows[-1]["tl"],
                     rows[-1]["status"])
    out = _out(args)
    write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
    best = best_cell(rows)
    write_csv(out / "best.csv", SWEEP_COLUMNS, [best] if best else [])
    plots.plot_sweep(rows, out / "sweep.png")
    (out / "config.json").write_text(cfg.dumps(), encoding="utf-8")
    if best:
        log.info("best cell lr=%g bs=%d tl=%s val_acc=%s", best["lr"], best["bs"], best["tl"],
                 M.sci(best["val_acc"]))
    return 0


def _evaluate_checkpoint(args):
    cfg = resolve_config(args)
    ckpt = weights.load(args.checkpoint)
    model = build_model(cfg.model)
    head = dict(ckpt.entries).get("head/logits/bias")
    if head is not None and head.shape[0] != cfg.model.num_classes:
        reset_head(model, head.shape[0], seed=0)
    weights.load_partial(model, ckpt, "strict")
    split = args.split or cfg.get("data.split")
    return M.evaluate(model, load_data(args, cfg, split), cfg.train.batch_size)


def cmd_evaluate(args):
    ev = _evaluate_checkpoint(args)
    out = _out(args)
    write_csv(out / "metrics.csv", M.METRIC_NAMES, [metric_cells(ev.report.to_dict())])
    (out / "report.csv").write_text(M.render_report(ev.report), encoding="utf-8")
    write_csv(out / "scores.csv", ("id", "label", "score", "prediction"),
              [{"id": i, "label": int(y), "score": float(s), "prediction": int(p)}
               for i, y, s, p in zip(ev.ids, ev.labels, ev.scores, ev.predictions)])
    sys.stdout.write(M.render_report(ev.report))
    return 0


def cmd_confusion(args):
    from . import plots
    ev = _evaluate_checkpoint(args)
    out = _out(args)
    grid = M.render_confusion(ev.confusion)
    (out / "confusion.txt").write_text(grid, encoding="utf-8")
    write_csv(out / "confusion.csv", ("true", "pred_normal", "pred_pneumonia"),
              [{"true": name, "pred_normal": row[0], "pred_pneumonia": row[1]}
               for name, row in zip(("NORMAL", "PNEUMONIA"), ev.confusion.grid())])
    (out / "report.csv").write_text(M.render_report(ev.report), encoding="utf-8")
    plots.plot_confusion(ev.confusion, out / "confusion.png")
    sys.stdout.write(grid)
    return 0


def cmd_export_curves(args):
    from . import plots
    src = Path(args.records)
    if not src.exists():
        raise IncresError(f"no run records at {src}")
    files = sorted(src.rglob("*.jsonl")) if src.is_dir() else [src]
    pairs = [(f, r) for f in files for r in read_records(f)]
    root = src if src.is_dir() else src.parent
    rows = curve_rows([r for _, r in pairs],
                      [f.relative_to(root).as_posix() for f, _ in pairs])
    if not rows:
        raise IncresError(f"no run records with curves under {src}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, ("source",) + CURVE_COLUMNS, rows)
    plots.plot_curves(rows, out.with_suffix(".png"))
    return 0


def cmd_weights(args):
    ckpt = weights.load(args.checkpoint)
    if args.action == "inspect":
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["name", "shape", "count"])
        for name, arr in ckpt.entries:
            w.writerow([name, "x".join(map(str, arr.shape)), arr.size])
        for k, v in sorted(ckpt.metadata.items()):
            sys.stderr.write(f"{k} = {v}\n")
        return 0
    if not args.out:
        raise ConfigError("convert-head needs --out PATH")
    if args.num_classes is None or args.num_classes < 2:
        raise ConfigError("convert-head needs --num-classes >= 2", key="model.num_classes")
    cfg = resolve_config(args)
    model = build_model(cfg.model)
    old = dict(ckpt.entries).get("head/logits/bias")
    if old is not None and old.shape[0] != cfg.model.num_classes:
        reset_head(model, old.shape[0], seed=0)
    weights.load_partial(model, ckpt, "skip_mismatched")
    reset_head(model, args.num_classes, seed=cfg.train.seed)
    weights.save(model, args.out, {**ckpt.metadata, "num_classes": str(args.num_classes)})
    return 0


def cmd_shape_table(args):
    cfg = resolve_config(args)
    text = format_shape_table(build_model(cfg.model).shape_table(1))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config (model.*, train.*, data.*, sweep.*)")
    common.add_argument("--manifest", help="CSV manifest (path,label,split)")
    common.add_argument("--out", help="output directory (file for export-curves)")
    common.add_argument("--seed", type=int, help="overrides model.seed and train.seed")
    common.add_argument("--synthetic", action="store_true",
                        help="use the synthetic generator instead of a manifest")
    common.add_argument("--desk", action="store_true",
                        help="desk-scale model defaults (input 75, width 1/8, blocks 1,2,1)")
    common.add_argument("-q", "--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="incres", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, out_required=True):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(fn=fn, out_required=out_required)
        return sp

    add("train", cmd_train, "train (or fine-tune with --base) on a holdout split") \
        .add_argument("--base", help="base checkpoint: fine-tune instead of training from scratch")
    add("finetune", cmd_finetune, "fine-tune from --base").add_argument("--base")
    add("crossval", cmd_crossval, "runs x k-fold cross-validation")
    add("sweep", cmd_sweep, "LR x BS x TL grid search")
    for name, fn, h in (("evaluate", cmd_evaluate, "metrics of a checkpoint on a split"),
                        ("confusion", cmd_confusion, "confusion matrix of a checkpoint")):
        sp = add(name, fn, h)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--split", choices=("train", "test"))
    add("export-curves", cmd_export_curves, "long-format curve table from run records") \
        .add_argument("--records", required=True, help="record file or directory of *.jsonl")
    sp = add("weights", cmd_weights, "inspect or convert checkpoints", out_required=False)
    sp.add_argument("action", choices=("inspect", "convert-head"))
    sp.add_argument("checkpoint")
    sp.add_argument("--num-classes", type=int)
    add("shape-table", cmd_shape_table, "per-layer shape table of the configured model",
        out_required=False)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    if args.out_required and not args.out:
        parser.error(f"{args.command} needs --out")
    try:
        return args.fn(args)
    except ConfigError as exc:
        key = f" [{exc.key}]" if getattr(exc, "key", None) else ""
        print(f"incres: config error{key}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IncresError, OSError) as exc:
        print(f"incres: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
