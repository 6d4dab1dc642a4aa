"""Command-line entry point: train / eval / count / analyze / gradcheck.

Exit codes: 0 success, 2 configuration error (also argparse's own code for
bad flags), 3 data or checkpoint-file error, 4 training divergence,
5 gradient-check failure.

Heavy imports happen inside handlers so LCT_THREADS can cap the BLAS worker
pool before numpy first loads.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_GRADCHECK = 5

log = logging.getLogger("lctnet.cli")


def _setup_threads() -> None:
    v = os.environ.get("LCT_THREADS")
    if not v:
        return
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, v)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="key = value config file")
    p.add_argument("--preset", choices=["resnet-mini", "resnet50", "resnet101"],
                   help="built-in model spec")
    p.add_argument("--attention", choices=["none", "se", "lct", "se+"],
                   help="attention block kind inserted into each residual block")
    p.add_argument("--groups", type=int, metavar="G",
                   help="context-normalization group count")
    p.add_argument("--reduction", type=int, metavar="R",
                   help="bottleneck reduction ratio of the se/se+ blocks")
    p.add_argument("--init", choices=["w0_b1", "w0_b0", "w1_b0"],
                   help="initialization of the per-channel affine gate")
    p.add_argument("--skip-normalize", action="store_true",
                   help="ablation: bypass the normalization operator")
    p.add_argument("--skip-transform", action="store_true",
                   help="ablation: bypass the per-channel affine transform")
    p.add_argument("--seed", type=int, metavar="N", help="run seed")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--data", metavar="PATH",
                   help="CIFAR-10 binary file or directory (switches data.kind)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lctnet",
        description="Channel-attention residual networks on a numpy substrate.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoints + log CSV")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_model_flags(p)
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("count", help="parameter / multiply-add cost report")
    _add_model_flags(p)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("analyze", help="export per-block attention statistics CSVs")
    _add_model_flags(p)
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    p.add_argument("--scope", choices=["first", "all"], default="first",
                   help="which attention blocks to analyze (default: first of each stage)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference check of all backward passes")
    p.add_argument("--scope", choices=["layers", "blocks", "end2end", "all"],
                   default="all")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def _overrides(args) -> dict[str, str]:
    m: dict[str, str] = {}
    if getattr(args, "preset", None):
        m["model.preset"] = args.preset
    if getattr(args, "attention", None):
        m["attention.kind"] = args.attention
    if getattr(args, "groups", None) is not None:
        m["attention.groups"] = str(args.groups)
    if getattr(args, "reduction", None) is not None:
        m["attention.reduction"] = str(args.reduction)
    if getattr(args, "init", None):
        m["attention.init"] = args.init
    if getattr(args, "skip_normalize", False):
        m["attention.skip_normalize"] = "true"
    if getattr(args, "skip_transform", False):
        m["attention.skip_transform"] = "true"
    if getattr(args, "seed", None) is not None:
        m["run.seed"] = str(args.seed)
    if getattr(args, "out", None):
        m["run.out"] = args.out
    if getattr(args, "data", None):
        m["data.kind"] = "cifar10"
        m["data.path"] = args.data
    return m


def _resolve_config(args):
    from .config import load_run_config, run_config_from_mapping
    overrides = _overrides(args)
    if getattr(args, "config", None):
        return load_run_config(args.config, overrides)
    return run_config_from_mapping(overrides)


def _load_datasets(cfg):
    from .data import DataError, load_cifar10_binary, synth_dataset
    if cfg.data_kind == "synth":
        train_ds = synth_dataset(cfg.data_seed, cfg.data_n, cfg.data_classes)
        val_ds = None
        if cfg.data_val_n > 0:
            val_ds = synth_dataset(cfg.data_seed + 1, cfg.data_val_n,
                                   cfg.data_classes, stats=train_ds.stats(),
                                   split="val")
        return train_ds, val_ds
    if not cfg.data_path:
        raise DataError("data.path is required when data.kind = cifar10")
    train_ds = load_cifar10_binary(cfg.data_path)
    val_ds = None
    if cfg.data_val_path:
        val_ds = load_cifar10_binary(cfg.data_val_path, split="val",
                                     stats=train_ds.stats())
    return train_ds, val_ds


def _build_net(cfg):
    from .backbone import build
    from .rng import Rng
    rng = Rng(cfg.seed)
    net = build(cfg.spec, rng)
    return net, rng


def cmd_train(args) -> int:
    from .train import train
    cfg = _resolve_config(args)
    train_ds, val_ds = _load_datasets(cfg)
    net, rng = _build_net(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    tl = train(net, train_ds, cfg.train, val_dataset=val_ds,
               rng_state=rng.state(), out_dir=cfg.out)
    log_path = os.path.join(cfg.out, "train_log.csv")
    with open(log_path, "w", encoding="utf-8", newline="") as f:
        f.write(tl.to_csv())
    if tl.status == "diverged":
        print(f"error: training diverged at epoch {tl.final_epoch} "
              f"(loss {tl.rows[-1].train_loss:.6g}); artifacts in {cfg.out}",
              file=sys.stderr)
        return EXIT_DIVERGED
    last = tl.rows[-1] if tl.rows else None
    if last is not None:
        print(f"done: {tl.final_epoch} epochs, train top1 {last.train_top1:.2f}%, "
              f"val top1 {last.val_top1:.2f}%, artifacts in {cfg.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import apply_checkpoint, evaluate, load_checkpoint
    cfg = _resolve_config(args)
    train_ds, val_ds = _load_datasets(cfg)
    net, _ = _build_net(cfg)
    apply_checkpoint(net, load_checkpoint(args.checkpoint))
    ds = val_ds if val_ds is not None else train_ds
    top1, top5, loss = evaluate(net, ds)
    print(f"split={ds.split} n={ds.n} top1={top1:.9g} top5={top5:.9g} loss={loss:.9g}")
    return EXIT_OK


def cmd_count(args) -> int:
    from .accounting import cost_report
    cfg = _resolve_config(args)
    report = cost_report(cfg.spec)
    print(report.as_text(), end="")
    if getattr(args, "out", None):
        os.makedirs(cfg.out, exist_ok=True)
        path = os.path.join(cfg.out, "count.csv")
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(report.as_csv())
        print(f"wrote {path}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .analysis import collect, export_stats
    from .train import apply_checkpoint, load_checkpoint
    cfg = _resolve_config(args)
    train_ds, val_ds = _load_datasets(cfg)
    net, _ = _build_net(cfg)
    apply_checkpoint(net, load_checkpoint(args.checkpoint))
    ds = val_ds if val_ds is not None else train_ds
    stats = collect(net, ds, selector=args.scope)
    os.makedirs(cfg.out, exist_ok=True)
    paths = export_stats(stats, cfg.out)
    gated = [st for st in stats if st.kind != "none"]
    if not gated:
        print("no attention blocks (attention kind none)")
    for st in gated:
        rho = "undefined" if st.spearman_rho is None else f"{st.spearman_rho:+.6f}"
        print(f"{st.name}: spearman_rho={rho}")
    for p in paths:
        log.info("wrote %s", p)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_scope
    results = run_scope(args.scope)
    failed = [r for r in results if not r.ok]
    for r in results:
        flag = "ok  " if r.ok else "FAIL"
        print(f"{flag} {r.name:<24} max_rel_err={r.max_err:.3e} worst={r.worst}")
    if failed:
        worst = max(failed, key=lambda r: r.max_err)
        print(f"error: gradient check failed for {worst.name} at {worst.worst} "
              f"(max_rel_err {worst.max_err:.3e} >= {TOLERANCE:g})", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def main(argv=None) -> int:
    _setup_threads()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    from .backbone import SpecError
    from .config import ConfigError
    from .data import DataError
    from .layers import ModeError
    from .train import CheckpointError, CheckpointMismatchError
    try:
        return args.func(args)
    except (ConfigError, SpecError, CheckpointMismatchError, ModeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
