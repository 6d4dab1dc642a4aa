"""Parameter and multiply-accumulate accounting over a NetworkSpec.

Counting is symbolic (no instantiation) but mirrors the builder's layer
names one-to-one, so the parameter column can be cross-checked against an
instantiated registry.  Because multiply-add accounting has no universal
convention, the convention used here is versioned, printed with every
report, and kept deliberately simple: multiplies are charged, bare
additions and comparisons are not.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .attention import AttentionConfig
from .backbone import (BOTTLENECK_EXPANSION, NetworkSpec, block_attention_config,
                       validate_spec)

MAC_CONVENTION_VERSION = "v1"

MAC_CONVENTION = (
    f"mac convention {MAC_CONVENTION_VERSION} (per sample; multiplies charged, additions free):",
    "  conv            k*k * c_in * c_out * h_out * w_out",
    "  fully-connected in * out",
    "  batchnorm, relu, avg/max pool: 0 (inference affine/compare only)",
    "  global avg pool c (one scale multiply per channel)",
    "  att normalize   4*c   (mean, centered square, scaled deviation)",
    "  att transform   c     sigmoid: c     fuse: c * h * w",
)


@dataclass
class CostRow:
    name: str
    params: int
    macs: int


@dataclass
class CostReport:
    total_params: int
    total_macs: int
    rows: list[CostRow]
    attention_delta: tuple[int, int]  # (params, macs) vs attention none
    convention: str = MAC_CONVENTION_VERSION

    def as_csv(self) -> str:
        lines = ["name,params,macs"]
        lines.extend(f"{r.name},{r.params},{r.macs}" for r in self.rows)
        lines.append(f"total,{self.total_params},{self.total_macs}")
        return "\n".join(lines) + "\n"

    def as_text(self) -> str:
        width = max(len(r.name) for r in self.rows) if self.rows else 4
        lines = [f"{'layer':<{width}}  {'params':>12}  {'macs':>14}"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}  {r.params:>12}  {r.macs:>14}")
        lines.append(f"{'total':<{width}}  {self.total_params:>12}  {self.total_macs:>14}")
        dp, dm = self.attention_delta
        lines.append(f"attention delta vs none: params {dp:+d} ({dp / 1e6:+.3f}M), "
                     f"macs {dm:+d} ({dm / 1e9:+.4f}G)")
        lines.extend(MAC_CONVENTION)
        return "\n".join(lines) + "\n"


def _conv_cost(c_in: int, c_out: int, k: int, h_out: int, w_out: int) -> tuple[int, int]:
    return k * k * c_in * c_out, k * k * c_in * c_out * h_out * w_out


def _out_hw(h: int, k: int, stride: int, pad: int) -> int:
    return (h + 2 * pad - k) // stride + 1


def attention_cost(cfg: AttentionConfig, h: int, w: int) -> tuple[int, int]:
    """(params, macs) of one attention block on a C x h x w feature map."""
    c = cfg.channels
    if cfg.kind == "none":
        return 0, 0
    if cfg.kind == "lct":
        macs = c  # aggregate
        if not cfg.skip_normalize:
            macs += 4 * c
        if not cfg.skip_transform:
            macs += c
        macs += c + c * h * w  # sigmoid + fuse
        return 2 * c, macs
    r = cfg.reduction
    params = 2 * c * c // r + c // r + c
    macs = c + 2 * c * c // r + c + c * h * w  # aggregate + FCs + sigmoid + fuse
    if cfg.kind == "se_plus":
        macs += 4 * c
    return params, macs


def _walk(spec: NetworkSpec) -> list[CostRow]:
    rows: list[CostRow] = []
    c_in, h, w = spec.input_geometry
    c_stem, k_stem, s_stem = spec.stem
    pad = k_stem // 2
    h, w = _out_hw(h, k_stem, s_stem, pad), _out_hw(w, k_stem, s_stem, pad)
    p, m = _conv_cost(c_in, c_stem, k_stem, h, w)
    rows.append(CostRow("stem.conv", p, m))
    rows.append(CostRow("stem.bn", 2 * c_stem, 0))
    if spec.stem_pool:
        h, w = _out_hw(h, 3, 2, 1), _out_hw(w, 3, 2, 1)
        rows.append(CostRow("stem.pool", 0, 0))
    c_prev = c_stem
    for si, st in enumerate(spec.stages, start=1):
        for bi in range(st.blocks):
            stride = st.stride if bi == 0 else 1
            name = f"stage{si}.block{bi}"
            h_in, w_in = h, w
            h, w = _out_hw(h, 3, stride, 1), _out_hw(w, 3, stride, 1)
            if st.kind == "basic":
                p, m = _conv_cost(c_prev, st.channels, 3, h, w)
                rows.append(CostRow(name + ".conv1", p, m))
                rows.append(CostRow(name + ".bn1", 2 * st.channels, 0))
                p, m = _conv_cost(st.channels, st.channels, 3, h, w)
                rows.append(CostRow(name + ".conv2", p, m))
                rows.append(CostRow(name + ".bn2", 2 * st.channels, 0))
            else:
                mid = st.channels // BOTTLENECK_EXPANSION
                p, m = _conv_cost(c_prev, mid, 1, h_in, w_in)
                rows.append(CostRow(name + ".conv1", p, m))
                rows.append(CostRow(name + ".bn1", 2 * mid, 0))
                p, m = _conv_cost(mid, mid, 3, h, w)
                rows.append(CostRow(name + ".conv2", p, m))
                rows.append(CostRow(name + ".bn2", 2 * mid, 0))
                p, m = _conv_cost(mid, st.channels, 1, h, w)
                rows.append(CostRow(name + ".conv3", p, m))
                rows.append(CostRow(name + ".bn3", 2 * st.channels, 0))
            p, m = attention_cost(block_attention_config(spec, st.channels), h, w)
            rows.append(CostRow(name + ".attn", p, m))
            if stride != 1 or c_prev != st.channels:
                p, m = _conv_cost(c_prev, st.channels, 1, h, w)
                rows.append(CostRow(name + ".down.conv", p, m))
                rows.append(CostRow(name + ".down.bn", 2 * st.channels, 0))
            c_prev = st.channels
    rows.append(CostRow("head.gap", 0, c_prev))
    rows.append(CostRow("head.fc", c_prev * spec.num_classes + spec.num_classes,
                        c_prev * spec.num_classes))
    return rows


def cost_report(spec: NetworkSpec) -> CostReport:
    validate_spec(spec)
    rows = _walk(spec)
    total_p = sum(r.params for r in rows)
    total_m = sum(r.macs for r in rows)
    if spec.attention.kind == "none":
        delta = (0, 0)
    else:
        plain = _walk(replace(spec, attention=AttentionConfig(kind="none")))
        delta = (total_p - sum(r.params for r in plain),
                 total_m - sum(r.macs for r in plain))
    return CostReport(total_p, total_m, rows, delta)


def count_params(spec: NetworkSpec) -> CostReport:
    return cost_report(spec)


def count_macs(spec: NetworkSpec, input_geometry: tuple[int, int, int] | None = None) -> CostReport:
    if input_geometry is not None:
        spec = replace(spec, input_geometry=input_geometry)
    return cost_report(spec)
