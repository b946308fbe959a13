"""Command line: parameter accounting, training, evaluation, analysis and freeze verification.

Exit codes: 0 success, 1 invariant violation, 2 usage or configuration
error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from . import analysis as A
from .architectures import (TABLE1_CONFIGS, VGG_TABLE_CONFIGS, ArchSpec, ConfigError, Network, build_plan,
                            count_params, parse_width)
from .checkpoint import Checkpoint, atomic_write, load_checkpoint, save_checkpoint
from .config import SYNTHETIC_DEFAULTS, RunConfig, load_config, load_dataset
from .batchnorm import UninitializedStatisticsError
from .datasets import DATA_DIR_ENV, FormatError
from .rng import Prng
from .reports import Report, export_report, human_count, render_csv, render_text
from .trainability import select, verify_frozen
from .training import METRICS_COLUMNS, DivergenceError, Hyperparams, aggregate, evaluate, train

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE, EXIT_DIVERGENCE = 0, 1, 2, 3

FAMILY_ALIASES = {"cifar": "cifar_resnet", "cifar_resnet": "cifar_resnet", "wrn": "cifar_resnet",
                  "imagenet": "imagenet_resnet", "imagenet_resnet": "imagenet_resnet", "vgg": "vgg"}
COUNT_COLUMNS = ["family", "depth", "width", "total", "batchnorm", "output", "shortcut",
                 "batchnorm_pct", "output_pct", "shortcut_pct"]

log = logging.getLogger("bnlab")


class UsageFailure(Exception):
    """Raised for bad arguments; maps to exit code 2."""


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def parse_data_arg(text: str) -> dict:
    """``cifar10``, ``cifar10:DIR``, ``synthetic`` or ``synthetic:key=value,...``."""
    source, _, rest = text.partition(":")
    if source == "cifar10":
        return {"source": "cifar10", "path": rest or None}
    if source == "synthetic":
        spec = {"source": "synthetic"}
        for item in filter(None, rest.split(",")):
            key, eq, val = item.partition("=")
            if not eq or key not in SYNTHETIC_DEFAULTS:
                raise UsageFailure(f"bad synthetic dataset option {item!r}; known: {sorted(SYNTHETIC_DEFAULTS)}")
            spec[key] = type(SYNTHETIC_DEFAULTS[key])(float(val))
        return spec
    raise UsageFailure(f"--data must be cifar10[:DIR] or synthetic[:k=v,...], got {text!r}")


def _emit(report: Report, out: str | None, fmt: str) -> None:
    if out:
        export_report(report, out, fmt)
    else:
        sys.stdout.write(render_csv(report) if fmt == "csv" else render_text(report))


# count-params

def count_rows(configs) -> list[dict]:
    rows = []
    for family, depth, width in configs:
        c = count_params(build_plan(ArchSpec(family, depth, width)))
        row = {"family": family, "depth": int(depth), "width": str(parse_width(width)),
               **{k: c[k] for k in ("total", "batchnorm", "output", "shortcut")}}
        for k in ("batchnorm", "output", "shortcut"):
            row[f"{k}_pct"] = 100.0 * c[k] / c["total"]
        rows.append(row)
    return rows


def cmd_count_params(args) -> int:
    configs = []
    if args.all_table1:
        configs += list(TABLE1_CONFIGS)
    if args.vgg_table:
        configs += list(VGG_TABLE_CONFIGS)
    if not configs:
        if args.family is None or args.depth is None:
            raise UsageFailure("give --family and --depth, or --all-table1 / --vgg-table")
        configs = [(FAMILY_ALIASES[args.family], args.depth, args.width)]
    rows = count_rows(configs)
    _emit(Report(COUNT_COLUMNS, rows), args.out, args.format)
    if len(rows) == 1:
        r = rows[0]
        print(f"{ArchSpec(r['family'], r['depth'], r['width']).label}: total {r['total']} "
              f"batchnorm {r['batchnorm']} ({r['batchnorm_pct']:.2f}%)", file=sys.stderr)
    return EXIT_OK


# train

def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    d = cfg.to_dict()
    arch = d["arch"]
    for key, val in (("family", args.family and FAMILY_ALIASES[args.family]), ("depth", args.depth),
                     ("width", args.width), ("feature_init", args.feature_init), ("bn_init", args.bn_init)):
        if val is not None:
            arch[key] = val
    hp = d["hyperparams"]
    for key, val in (("epochs", args.epochs), ("batch_size", args.batch_size), ("base_lr", args.lr),
                     ("momentum", args.momentum), ("weight_decay", args.weight_decay),
                     ("warmup_epochs", args.warmup_epochs), ("mask_seed", args.mask_seed)):
        if val is not None:
            hp[key] = val
    if args.schedule is not None:
        hp["schedule"] = [[float(e), float(m)] for e, m in (p.split("=") for p in args.schedule.split(",") if p)]
    if args.seed is not None:
        hp["seeds"] = [args.seed] * 3
    if args.no_augment:
        hp["augment"] = False
    if args.selector is not None:
        d["selector"] = args.selector
    if args.replicates is not None:
        d["replicates"] = args.replicates
    if args.output_dir is not None:
        d["output_dir"] = args.output_dir
    if args.data is not None:
        d["dataset"] = parse_data_arg(args.data)
    return RunConfig.from_dict(d)


def _metrics_report(rows) -> Report:
    return Report(METRICS_COLUMNS, [vars(r) for r in rows])


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig.from_dict({})
    cfg = _apply_overrides(cfg, args)
    out = Path(cfg.output_dir)
    atomic_write(out / "config.yaml", yaml.safe_dump(cfg.to_dict(), sort_keys=False).encode())
    data = load_dataset(cfg.dataset)
    results = []
    for r in range(cfg.replicates):
        hp = cfg.hyperparams_for(r)
        net = Network(build_plan(cfg.arch), Prng(hp.seeds[0]))
        mask = select(net, cfg.selector, seed=hp.mask_seed)
        print(f"replicate {r}: {cfg.arch.label} selector {cfg.selector}: "
              f"{mask.trainable} / {human_count(mask.total)} trainable")
        rdir = out / f"replicate{r}"
        init = Checkpoint.from_network(net, mask=mask.describe(), hyperparams=hp.to_dict(), epoch=0,
                                       meta={"dataset": cfg.dataset, "replicate": r})
        save_checkpoint(rdir / "init.bnck", init)
        try:
            ckpt, rows = train(net, mask, data["train"], hp, data["test"])
        except DivergenceError as exc:
            atomic_write(rdir / "divergence.json", json.dumps(
                {"replicate": r, "epoch": exc.epoch, "iteration": exc.iteration, "loss": str(exc.loss)}).encode())
            print(f"error: replicate {r} diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGENCE
        ckpt.meta["dataset"] = cfg.dataset
        ckpt.meta["replicate"] = r
        res = evaluate(net, data["test"], (1, 5) if net.plan.num_classes >= 5 else (1,))
        results.append(res)
        save_checkpoint(rdir / "final.bnck", ckpt)
        export_report(_metrics_report(rows), rdir / "metrics.csv")
    agg = aggregate(results)
    cols = ["replicate", "top1", "top5"]
    summary_rows = [{"replicate": i, "top1": r.top1, "top5": r.top5} for i, r in enumerate(results)]
    summary_rows.append({"replicate": "mean", "top1": agg.top1, "top5": agg.top5})
    summary_rows.append({"replicate": "std", "top1": agg.std[1], "top5": agg.std.get(5, float("nan"))})
    export_report(Report(cols, summary_rows, {"arch": cfg.arch.label, "selector": cfg.selector,
                                              "replicates": cfg.replicates}), out / "summary.csv")
    print(f"{cfg.arch.label} {cfg.selector}: top1 {agg.top1:.4f} +- {agg.std[1]:.4f} over "
          f"{cfg.replicates} replicate(s); outputs in {out}")
    return EXIT_OK


# eval / analyze

def _dataset_for(args, ckpt, required: bool = True):
    spec = parse_data_arg(args.data) if getattr(args, "data", None) else ckpt.meta.get("dataset")
    if spec is None:
        if required:
            raise UsageFailure("this command needs a dataset: pass --data cifar10[:DIR] or synthetic[:k=v,...]")
        return None
    if spec.get("source") == "synthetic":
        spec = {**SYNTHETIC_DEFAULTS, **spec}
    try:
        return load_dataset(spec)[getattr(args, "split", "test")]
    except FileNotFoundError as exc:
        raise UsageFailure(f"dataset unavailable: {exc} (set {DATA_DIR_ENV} or pass --data cifar10:DIR)") from exc


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ds = _dataset_for(args, ckpt)
    res = evaluate(ckpt, ds, args.topk)
    rows = [{"k": k, "accuracy": acc} for k, acc in sorted(res.accuracies.items())]
    _emit(Report(["k", "accuracy"], rows, {"checkpoint": str(args.checkpoint), "examples": res.n_examples}),
          args.out, args.format)
    print(" ".join(f"top{k} {a:.4f}" for k, a in sorted(res.accuracies.items())), file=sys.stderr)
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.which == "scaling":
        return _analyze_scaling(args)
    ckpt = load_checkpoint(args.checkpoint)
    if args.which == "gamma":
        stats = A.gamma_distribution(ckpt, args.thresholds or A.DEFAULT_THRESHOLDS)
        _emit(stats.report(), args.out, args.format)
        if args.hist_out:
            export_report(stats.histogram_report("gamma", args.bins), args.hist_out)
            base, ext = os.path.splitext(args.hist_out)
            export_report(stats.histogram_report("beta", args.bins), f"{base}.beta{ext or '.csv'}")
        print(f"gamma mean {stats.mean:.4f} std {stats.std:.4f} fraction_negative {stats.fraction_negative:.4f}",
              file=sys.stderr)
        return EXIT_OK
    ds = _dataset_for(args, ckpt)
    if args.which == "clamp":
        rep = A.clamp_sweep(ckpt, args.thresholds or [0.0, *A.DEFAULT_THRESHOLDS], ds)
        _emit(rep, args.out, args.format)
        print(f"baseline {rep.meta['baseline_accuracy']:.4f}; {len(rep.rows)} thresholds", file=sys.stderr)
        return EXIT_OK
    stats = A.activation_zero_frequency(ckpt, ds, threshold=args.disabled_above)
    stats.bins = args.bins
    _emit(stats.report(), args.out, args.format)
    if args.hist_out:
        export_report(stats.histogram_report(), args.hist_out)
    print(f"fraction of ReLU units with Pr[0] > {args.disabled_above:g}: {stats.fraction_disabled:.4f}", file=sys.stderr)
    return EXIT_OK


def read_points(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(line for line in fh if not line.startswith("#"))]
    need = {"batchnorm", "accuracy"}
    if not rows or not need <= set(rows[0]):
        raise UsageFailure(f"{path}: points CSV needs columns {sorted(need)} (plus depth/width or group)")
    return rows


def group_points(rows: list[dict], group_by: str) -> dict[str, list[tuple[float, float]]]:
    """Split points into depth-scaled and width-scaled series.

    An explicit ``group`` column wins. Otherwise the depth series holds the
    rows at the smallest width and the width series the rows at the
    smallest depth.
    """
    pt = lambda r: (float(r["batchnorm"]), float(r["accuracy"]))  # noqa: E731
    if "group" in rows[0]:
        groups: dict[str, list] = {}
        for r in rows:
            groups.setdefault(r["group"], []).append(pt(r))
    else:
        if not {"depth", "width"} <= set(rows[0]):
            raise UsageFailure("points CSV needs a group column or both depth and width columns")
        wmin = min(parse_width(r["width"]) for r in rows)
        dmin = min(int(r["depth"]) for r in rows)
        groups = {"depth": [pt(r) for r in rows if parse_width(r["width"]) == wmin],
                  "width": [pt(r) for r in rows if int(r["depth"]) == dmin]}
    if group_by != "both":
        if group_by not in groups:
            raise UsageFailure(f"no group {group_by!r} in points; have {sorted(groups)}")
        groups = {group_by: groups[group_by]}
    return groups


def _analyze_scaling(args) -> int:
    groups = group_points(read_points(args.checkpoint), args.group_by)
    try:
        fits, ratio = A.scaling_regression(groups)
    except A.FitError as exc:
        raise UsageFailure(f"cannot fit: {exc}") from exc
    _emit(A.scaling_report(fits, ratio), args.out, args.format)
    msg = "; ".join(f"{g}: {f.slope:.4f}/doubling" for g, f in fits.items())
    print(msg + (f"; ratio {ratio:.3f}" if ratio is not None else ""), file=sys.stderr)
    return EXIT_OK


# verify

def cmd_verify(args) -> int:
    before, after = load_checkpoint(args.before), load_checkpoint(args.after)
    if before.manifest_key() != after.manifest_key():
        raise UsageFailure("checkpoints come from different plans")
    selector = args.mask or after.mask.get("selector")
    if not selector:
        raise UsageFailure("no mask: pass --mask SELECTOR or use a checkpoint that records its mask")
    seed = args.mask_seed if args.mask_seed is not None else after.mask.get("seed") or 0
    mask = select(before.to_network(), selector, seed=seed)
    rep = verify_frozen(before, after, mask)
    rows = [{"tensor": n, "status": "violation", "changed": "", "max_abs_delta": ""} for n in rep.violations]
    rows += [{"tensor": n, "status": "trained", "changed": v["count"], "max_abs_delta": v["max_abs"]}
             for n, v in rep.changed.items()]
    if args.out:
        export_report(Report(["tensor", "status", "changed", "max_abs_delta"], rows,
                             {"selector": selector, "ok": rep.ok}), args.out)
    print(rep.summary())
    return EXIT_OK if rep.ok else EXIT_VIOLATION


# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bnlab", description=__doc__.splitlines()[0],
                                epilog=f"Default data directory comes from ${DATA_DIR_ENV}.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def fmt(sp):
        sp.add_argument("--out", help="output file (default: stdout)")
        sp.add_argument("--format", choices=["csv", "structured-text", "json"], default="csv",
                        help="report format (default: csv)")

    c = sub.add_parser("count-params", help="exact parameter counts per group")
    c.add_argument("--family", choices=sorted(FAMILY_ALIASES), help="architecture family")
    c.add_argument("--depth", type=int, help="depth; CIFAR ResNets need 6N+2")
    c.add_argument("--width", default="1", help="width scale, e.g. 2 or 1/4 (default: 1)")
    c.add_argument("--all-table1", action="store_true", help="all 18 reference ResNet/WRN configurations")
    c.add_argument("--vgg-table", "--vgg", action="store_true", help="the four VGG configurations")
    fmt(c)
    c.set_defaults(func=cmd_count_params)

    d = Hyperparams()
    t = sub.add_parser("train", help="train replicates of a run configuration",
                       description="Flags override fields of the config file.")
    t.add_argument("config", nargs="?", help="YAML run configuration")
    t.add_argument("--family", choices=sorted(FAMILY_ALIASES), help="architecture family (default: cifar)")
    t.add_argument("--depth", type=int, help="depth (default: 14)")
    t.add_argument("--width", help="width scale (default: 1)")
    t.add_argument("--feature-init", help="he_normal | uniform | binarized | orthogonal (default: he_normal)")
    t.add_argument("--bn-init", help="uniform01_zero | one_zero | uniform_sym_zero | one_one "
                                     "(default: uniform01_zero)")
    t.add_argument("--selector", help="trainable set, e.g. batchnorm, batchnorm+output, random:2 "
                                      "(default: batchnorm)")
    t.add_argument("--epochs", type=int, help=f"(default: {d.epochs})")
    t.add_argument("--batch-size", type=int, help=f"(default: {d.batch_size})")
    t.add_argument("--lr", type=float, help=f"base learning rate (default: {d.base_lr})")
    t.add_argument("--momentum", type=float, help=f"(default: {d.momentum})")
    t.add_argument("--weight-decay", type=float, help=f"(default: {d.weight_decay})")
    t.add_argument("--schedule", help="LR multipliers as EPOCH=MULT,... (default: 80=0.1,120=0.01)")
    t.add_argument("--warmup-epochs", type=float, help=f"linear warmup length (default: {d.warmup_epochs:g})")
    t.add_argument("--no-augment", action="store_true", help="disable flip + 4-pixel translation")
    t.add_argument("--seed", type=int, help="init, data-order and augmentation seed (default: 0)")
    t.add_argument("--mask-seed", type=int, help="seed for random selectors (default: 0)")
    t.add_argument("--replicates", type=int, help="(default: 5)")
    t.add_argument("--data", help=f"cifar10[:DIR] or synthetic[:k=v,...] (default: cifar10 from ${DATA_DIR_ENV})")
    t.add_argument("--output-dir", help="(default: runs/default)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="top-k accuracy of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--data", help="dataset (default: the one recorded in the checkpoint)")
    e.add_argument("--split", choices=["train", "test"], default="test", help="(default: test)")
    e.add_argument("--topk", type=_ints, default=[1, 5], help="comma-separated k values (default: 1,5)")
    fmt(e)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="gamma statistics, clamping, activation sparsity, scaling fits")
    a.add_argument("which", choices=["gamma", "clamp", "activations", "scaling"])
    a.add_argument("checkpoint", help="checkpoint file, or a points CSV for 'scaling'")
    a.add_argument("--data", help="dataset for clamp/activations (default: the one recorded in the checkpoint)")
    a.add_argument("--split", choices=["train", "test"], default="test", help="(default: test)")
    a.add_argument("--thresholds", type=_floats, help="gamma: 0.01,0.05,0.1,0.2; clamp: 0,0.01,0.05,0.1,0.2")
    a.add_argument("--bins", type=int, default=A.HIST_BINS, help=f"histogram bins (default: {A.HIST_BINS})")
    a.add_argument("--hist-out", help="also write histogram CSV here")
    a.add_argument("--disabled-above", type=float, default=0.99,
                   help="zero-probability above which a unit counts as disabled (default: 0.99)")
    a.add_argument("--group-by", choices=["depth", "width", "both"], default="both",
                   help="scaling: which series to fit (default: both, with slope ratio)")
    fmt(a)
    a.set_defaults(func=cmd_analyze)

    v = sub.add_parser("verify", help="check that frozen parameters are bit-identical")
    v.add_argument("before")
    v.add_argument("after")
    v.add_argument("--mask", help="selector expression (default: the one recorded in AFTER)")
    v.add_argument("--mask-seed", type=int, help="seed for random selectors (default: recorded)")
    v.add_argument("--out", help="write per-tensor CSV report")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageFailure, ConfigError, FormatError, ValueError, FileNotFoundError, IsADirectoryError,
            UninitializedStatisticsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
