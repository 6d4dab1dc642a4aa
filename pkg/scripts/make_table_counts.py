#!/usr/bin/env python3
"""Tabulate parameter and MAC budgets for each preset x attention kind.

Symbolic counting only (no tensors are allocated), so the deep presets are
instant. Deltas are reported against the attention-free baseline of the same
preset. Use --csv to emit a machine-readable copy.
"""

import argparse
import sys

from lctnet.accounting import cost_report
from lctnet.attention import AttentionConfig
from lctnet.backbone import resnet50_spec, resnet101_spec, resnet_mini_spec

PRESETS = (
    ("resnet-mini", resnet_mini_spec),
    ("resnet50", resnet50_spec),
    ("resnet101", resnet101_spec),
)
KINDS = ("none", "se", "lct", "se_plus")


def gather(groups, reduction):
    rows = []
    for preset, spec_fn in PRESETS:
        for kind in KINDS:
            spec = spec_fn()
            if kind != "none":
                spec.attention = AttentionConfig(kind=kind, groups=groups,
                                                 reduction=reduction)
            rep = cost_report(spec)
            rows.append((preset, kind, rep.total_params, rep.total_macs,
                         rep.attention_delta[0], rep.attention_delta[1]))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--groups", type=int, default=64)
    ap.add_argument("--reduction", type=int, default=16)
    ap.add_argument("--csv", action="store_true",
                    help="emit CSV instead of the aligned table")
    args = ap.parse_args(argv)

    rows = gather(args.groups, args.reduction)
    if args.csv:
        print("preset,kind,params,macs,delta_params,delta_macs")
        for row in rows:
            print(",".join(str(v) for v in row))
        return 0

    print(f"{'preset':<12} {'kind':<8} {'params':>12} {'macs':>14} "
          f"{'+params':>10} {'+macs':>12}")
    for preset, kind, params, macs, dp, dm in rows:
        print(f"{preset:<12} {kind:<8} {params:>12,} {macs:>14,} "
              f"{dp:>+10,} {dm:>+12,}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
