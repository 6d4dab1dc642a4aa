"""Per-block attention statistics: averaged global context before and after
each attention block, averaged gate activations, and a rank-correlation
summary of how context magnitude relates to gate strength.

"Context after" is the spatial mean of the block's fused output; because the
gate is constant over a channel's spatial map, that equals the per-sample
product of context and gate, which is what the streaming accumulator uses.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .backbone import Network
from .data import Dataset

CSV_HEADER = "channel,ctx_before,ctx_after,attention,delta"


@dataclass
class BlockStats:
    stage: int
    index: int
    kind: str
    ctx_before: np.ndarray  # C, mean over samples of aggregate(block input)
    ctx_after: np.ndarray   # C, mean over samples of aggregate(block output)
    attention: np.ndarray   # C, mean gate
    sort_order: np.ndarray  # channels by ascending ctx_before
    delta: np.ndarray       # |ctx_after - ctx_before|
    spearman_rho: float | None  # rank corr of |ctx_before| vs attention

    @property
    def name(self) -> str:
        return f"stage{self.stage}_block{self.index}_{self.kind}"


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties sharing their average rank."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x: np.ndarray, y: np.ndarray) -> float | None:
    """Rank correlation with average-rank ties; None when either input is
    constant (the correlation is undefined, not NaN)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 3:
        raise ValueError(f"spearman needs two equal rank-1 vectors of length >= 3, "
                         f"got {x.shape} and {y.shape}")
    rx, ry = _average_ranks(x), _average_ranks(y)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    vx, vy = float(dx @ dx), float(dy @ dy)
    if vx == 0.0 or vy == 0.0:
        return None
    return float((dx @ dy) / np.sqrt(vx * vy))


def select_blocks(net: Network, selector) -> list[tuple[int, int]]:
    """Resolve a selector to (stage, index) pairs.

    "first" keeps the first block of each stage, "all" keeps every block,
    and an explicit list of (stage, index) pairs is passed through.
    """
    available = [(s, b) for s, b, _ in net.attention_handles]
    if selector == "all":
        picked = available
    elif selector == "first":
        picked = [(s, b) for s, b in available if b == 0]
    else:
        picked = [(int(s), int(b)) for s, b in selector]
        missing = [p for p in picked if p not in available]
        if missing:
            raise ValueError(f"selector matches no block: {missing[0]}")
    if not picked:
        raise ValueError(f"selector {selector!r} matches no block")
    return picked


def collect(net: Network, dataset: Dataset, selector="first",
            batch_size: int = 256) -> list[BlockStats]:
    """Stream the dataset through the net in inference mode, maintaining
    running means of context, gate, and fused context per selected block."""
    picked = select_blocks(net, selector)
    handles = {(s, b): blk for s, b, blk in net.attention_handles if (s, b) in picked}
    acc = {key: None for key in picked}
    seen = 0
    net.set_capture(True)
    try:
        for start in range(0, dataset.n, batch_size):
            x = dataset.images[start:start + batch_size]
            net.forward(x, train=False)
            b = x.shape[0]
            seen += b
            for key, blk in handles.items():
                z = blk.last_z.astype(np.float64)
                g = blk.last_gate.astype(np.float64)
                sums = np.stack([z.sum(axis=0), g.sum(axis=0), (z * g).sum(axis=0)])
                if acc[key] is None:
                    acc[key] = sums / seen
                else:
                    acc[key] += (sums - b * acc[key]) / seen
    finally:
        net.set_capture(False)
    out = []
    for (s, b) in picked:
        ctx_before, attention, ctx_after = acc[(s, b)]
        out.append(BlockStats(
            stage=s, index=b, kind=handles[(s, b)].kind,
            ctx_before=ctx_before, ctx_after=ctx_after, attention=attention,
            sort_order=np.argsort(ctx_before, kind="stable"),
            delta=np.abs(ctx_after - ctx_before),
            spearman_rho=spearman(np.abs(ctx_before), attention),
        ))
    return out


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def export_stats(stats: list[BlockStats], out_dir: str) -> list[str]:
    """One CSV per block: header, rows in ascending-context order, and a
    footer comment carrying the block's spearman rho."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for st in stats:
        path = os.path.join(out_dir, st.name + ".csv")
        lines = [CSV_HEADER]
        for ch in st.sort_order:
            lines.append(
                f"{ch},{_fmt(st.ctx_before[ch])},{_fmt(st.ctx_after[ch])},"
                f"{_fmt(st.attention[ch])},{_fmt(st.delta[ch])}"
            )
        rho = "undefined" if st.spearman_rho is None else _fmt(st.spearman_rho)
        lines.append(f"# spearman_rho={rho}")
        try:
            with open(path, "w", encoding="utf-8") as f:
                f.write("\n".join(lines) + "\n")
        except OSError as e:
            raise OSError(f"cannot write stats to {path}: {e}") from e
        paths.append(path)
    return paths


def read_stats_csv(path: str) -> tuple[np.ndarray, float | None]:
    """Parse an exported block CSV back into (rows array, rho); rows keep the
    file's order with columns channel,ctx_before,ctx_after,attention,delta."""
    rows = []
    rho: float | None = None
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip()
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in f:
            line = line.strip()
            if line.startswith("# spearman_rho="):
                val = line.split("=", 1)[1]
                rho = None if val == "undefined" else float(val)
            elif line:
                rows.append([float(t) for t in line.split(",")])
    return np.array(rows, dtype=np.float64), rho
