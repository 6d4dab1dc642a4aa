#!/usr/bin/env python3
"""Train the desk-scale backbone under each attention kind and compare.

Runs resnet-mini on the procedural dataset for every attention variant with
a shared seed and optimizer recipe, then prints a ranking by final train and
validation accuracy. Per-run artifacts (checkpoints, train_log.csv, analysis
CSVs) land in <out>/<kind>/.

Typical run, about ten minutes on one core:

    python3 scripts/run_desk_experiments.py --out runs/desk --epochs 4
"""

import argparse
import os
import sys
import time

from lctnet.analysis import collect, export_stats
from lctnet.attention import AttentionConfig
from lctnet.backbone import build, resnet_mini_spec
from lctnet.data import synth_dataset
from lctnet.rng import Rng
from lctnet.train import TrainConfig, default_schedule, evaluate, train

KINDS = ("none", "se", "lct", "se_plus")


def run_one(kind, args, train_ds, val_ds):
    spec = resnet_mini_spec()
    if kind != "none":
        spec.attention = AttentionConfig(kind=kind, groups=args.groups,
                                         reduction=args.reduction)
    rng = Rng(args.seed)
    net = build(spec, rng)
    cfg = TrainConfig(lr0=args.lr0, momentum=0.9, weight_decay=1e-4,
                      schedule=default_schedule(args.epochs),
                      epochs=args.epochs, batch_size=args.batch_size,
                      seed=args.seed)
    out_dir = os.path.join(args.out, kind)
    os.makedirs(out_dir, exist_ok=True)
    t0 = time.time()
    log = train(net, train_ds, cfg, val_dataset=val_ds, rng_state=rng.state(),
                out_dir=out_dir)
    wall = time.time() - t0
    if log.status != "ok":
        print(f"{kind}: diverged at epoch {log.final_epoch}", file=sys.stderr)
        return None
    top1, top5, _ = evaluate(net, val_ds)
    stats = collect(net, val_ds, selector="all")
    export_stats(stats, out_dir)
    return {"kind": kind, "train_top1": log.final_train_top1,
            "val_top1": top1, "val_top5": top5, "wall_s": wall,
            "rhos": [(st.name, st.spearman_rho) for st in stats]}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--epochs", type=int, default=4)
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--val-n", type=int, default=500)
    ap.add_argument("--batch-size", type=int, default=64)
    ap.add_argument("--lr0", type=float, default=0.1)
    ap.add_argument("--groups", type=int, default=8)
    ap.add_argument("--reduction", type=int, default=16)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args(argv)

    train_ds = synth_dataset(args.seed, args.n, 10)
    val_ds = synth_dataset(args.seed + 1, args.val_n, 10,
                           stats=train_ds.stats(), split="val")

    rows = []
    for kind in KINDS:
        print(f"== training {kind} ({args.epochs} epochs, n={args.n}) ==",
              flush=True)
        row = run_one(kind, args, train_ds, val_ds)
        if row is not None:
            rows.append(row)

    rows.sort(key=lambda r: r["val_top1"], reverse=True)
    print(f"\n{'kind':<8} {'train top1':>10} {'val top1':>9} "
          f"{'val top5':>9} {'wall':>7}")
    for r in rows:
        print(f"{r['kind']:<8} {r['train_top1']:>9.2f}% {r['val_top1']:>8.2f}% "
              f"{r['val_top5']:>8.2f}% {r['wall_s']:>6.0f}s")
    print("\nrank correlation of |context| vs gate, per block:")
    for r in rows:
        if r["kind"] == "none":
            continue
        shown = ", ".join(
            f"{name.split('_', 1)[0]}/{name.split('_')[1]} "
            f"{'undef' if rho is None else f'{rho:+.3f}'}"
            for name, rho in r["rhos"])
        print(f"  {r['kind']:<8} {shown}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
