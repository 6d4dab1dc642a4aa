"""Residual network builder with a channel-attention block in every residual
block.

Networks are described declaratively by NetworkSpec and built into explicit
layer graphs with hand-wired backward passes.  The attention block sits on
the residual branch, after the last BatchNorm and before the shortcut
addition.  Structural specs for the two large reference networks exist
primarily for cost accounting; the desk-scale spec trains in minutes on CPU.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .attention import AttentionBlock, AttentionConfig, LCTBlock, make_block
from .layers import (AvgPool2d, BatchNorm2d, Conv2d, GlobalAvgPool, Linear,
                     ModeError, ParamRegistry, ReLU)
from .rng import Rng
from .tensor import ShapeError

BLOCK_KINDS = ("basic", "bottleneck")
BOTTLENECK_EXPANSION = 4


class SpecError(ValueError):
    """NetworkSpec field is invalid; message carries the field path."""


@dataclass
class StageSpec:
    blocks: int
    channels: int
    kind: str = "basic"
    stride: int = 1


@dataclass
class NetworkSpec:
    stem: tuple[int, int, int] = (16, 3, 1)  # channels, kernel, stride
    stages: list[StageSpec] = field(default_factory=list)
    attention: AttentionConfig = field(default_factory=lambda: AttentionConfig(kind="none"))
    num_classes: int = 10
    input_geometry: tuple[int, int, int] = (3, 32, 32)  # channels, H, W
    stem_pool: bool = False  # stride-2 average pool after the stem


def validate_spec(spec: NetworkSpec) -> None:
    c, k, s = spec.stem
    if c <= 0 or k <= 0 or s <= 0:
        raise SpecError(f"stem: all of (channels, kernel, stride) must be positive, got {spec.stem}")
    if not spec.stages:
        raise SpecError("stages: at least one stage required")
    for i, st in enumerate(spec.stages):
        if st.blocks <= 0:
            raise SpecError(f"stages[{i}].blocks: must be positive, got {st.blocks}")
        if st.channels <= 0:
            raise SpecError(f"stages[{i}].channels: must be positive, got {st.channels}")
        if st.kind not in BLOCK_KINDS:
            raise SpecError(f"stages[{i}].kind: unknown block kind {st.kind!r}")
        if st.stride not in (1, 2):
            raise SpecError(f"stages[{i}].stride: must be 1 or 2, got {st.stride}")
        if st.kind == "bottleneck" and st.channels % BOTTLENECK_EXPANSION != 0:
            raise SpecError(
                f"stages[{i}].channels: bottleneck width {st.channels} not divisible "
                f"by the expansion factor {BOTTLENECK_EXPANSION}"
            )
    if spec.num_classes <= 0:
        raise SpecError(f"num_classes: must be positive, got {spec.num_classes}")
    ci, h, w = spec.input_geometry
    if ci <= 0 or h <= 0 or w <= 0:
        raise SpecError(f"input_geometry: must be positive, got {spec.input_geometry}")
    if spec.attention.kind not in ("none", "se", "lct", "se_plus"):
        raise SpecError(f"attention.kind: unknown kind {spec.attention.kind!r}")
    for i, st in enumerate(spec.stages):
        try:
            block_attention_config(spec, st.channels).validate()
        except ValueError as e:
            raise SpecError(f"stages[{i}].attention: {e}") from e


def block_attention_config(spec: NetworkSpec, channels: int) -> AttentionConfig:
    return replace(spec.attention, channels=channels)


class ResidualBlock:
    """conv path -> attention -> plus shortcut -> ReLU."""

    def __init__(self, registry: ParamRegistry, name: str, c_in: int, c_out: int,
                 kind: str, stride: int, attn_cfg: AttentionConfig, rng: Rng,
                 dtype=np.float32):
        self.kind = kind
        self.relu_out = ReLU()
        if kind == "basic":
            self.path = [
                Conv2d(registry, name + ".conv1", c_in, c_out, 3, stride, rng=rng, dtype=dtype),
                BatchNorm2d(registry, name + ".bn1", c_out, dtype=dtype),
                ReLU(),
                Conv2d(registry, name + ".conv2", c_out, c_out, 3, 1, rng=rng, dtype=dtype),
                BatchNorm2d(registry, name + ".bn2", c_out, dtype=dtype),
            ]
        else:
            mid = c_out // BOTTLENECK_EXPANSION
            self.path = [
                Conv2d(registry, name + ".conv1", c_in, mid, 1, 1, rng=rng, dtype=dtype),
                BatchNorm2d(registry, name + ".bn1", mid, dtype=dtype),
                ReLU(),
                Conv2d(registry, name + ".conv2", mid, mid, 3, stride, rng=rng, dtype=dtype),
                BatchNorm2d(registry, name + ".bn2", mid, dtype=dtype),
                ReLU(),
                Conv2d(registry, name + ".conv3", mid, c_out, 1, 1, rng=rng, dtype=dtype),
                BatchNorm2d(registry, name + ".bn3", c_out, dtype=dtype),
            ]
        self.attn: AttentionBlock = make_block(registry, name + ".attn", attn_cfg,
                                               rng=rng, dtype=dtype)
        if stride != 1 or c_in != c_out:
            self.down_conv = Conv2d(registry, name + ".down.conv", c_in, c_out, 1,
                                    stride, rng=rng, dtype=dtype)
            self.down_bn = BatchNorm2d(registry, name + ".down.bn", c_out, dtype=dtype)
        else:
            self.down_conv = None
            self.down_bn = None

    def forward(self, x, train=True):
        h = x
        for layer in self.path:
            h = layer.forward(h, train)
        h = self.attn.forward(h, train)
        sc = x if self.down_conv is None else self.down_bn.forward(
            self.down_conv.forward(x, train), train)
        return self.relu_out.forward(h + sc, train)

    def backward(self, dy):
        dsum = self.relu_out.backward(dy)
        dh = self.attn.backward(dsum)
        for layer in reversed(self.path):
            dh = layer.backward(dh)
        if self.down_conv is None:
            dsc = dsum
        else:
            dsc = self.down_conv.backward(self.down_bn.backward(dsum))
        return dh + dsc


class Network:
    """Explicit feed-forward graph with a parameter registry and attention
    handles (stage, index, block) for the analysis pipeline."""

    def __init__(self, spec: NetworkSpec, rng: Rng, dtype=np.float32):
        validate_spec(spec)
        self.spec = spec
        self.dtype = dtype
        self.registry = ParamRegistry()
        c_img = spec.input_geometry[0]
        c_stem, k_stem, s_stem = spec.stem
        self.stem_conv = Conv2d(self.registry, "stem.conv", c_img, c_stem, k_stem,
                                s_stem, rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm2d(self.registry, "stem.bn", c_stem, dtype=dtype)
        self.stem_relu = ReLU()
        self.stem_pool = AvgPool2d(3, 2, 1) if spec.stem_pool else None
        self.stages: list[list[ResidualBlock]] = []
        self.attention_handles: list[tuple[int, int, AttentionBlock]] = []
        c_in = c_stem
        for si, st in enumerate(spec.stages, start=1):
            blocks = []
            for bi in range(st.blocks):
                stride = st.stride if bi == 0 else 1
                name = f"stage{si}.block{bi}"
                blk = ResidualBlock(self.registry, name, c_in, st.channels, st.kind,
                                    stride, block_attention_config(spec, st.channels),
                                    rng, dtype=dtype)
                blocks.append(blk)
                self.attention_handles.append((si, bi, blk.attn))
                c_in = st.channels
            self.stages.append(blocks)
        self.gap = GlobalAvgPool()
        self.fc = Linear(self.registry, "head.fc", c_in, spec.num_classes,
                         rng=rng, dtype=dtype)

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        expect = self.spec.input_geometry
        if x.ndim != 4 or x.shape[1:] != expect:
            raise ShapeError(f"network expects N x {expect}, got {x.shape}")
        h = self.stem_relu.forward(self.stem_bn.forward(
            self.stem_conv.forward(x, train), train), train)
        if self.stem_pool is not None:
            h = self.stem_pool.forward(h, train)
        for blocks in self.stages:
            for blk in blocks:
                h = blk.forward(h, train)
        return self.fc.forward(self.gap.forward(h, train), train)

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        dh = self.gap.backward(self.fc.backward(dlogits))
        for blocks in reversed(self.stages):
            for blk in reversed(blocks):
                dh = blk.backward(dh)
        if self.stem_pool is not None:
            dh = self.stem_pool.backward(dh)
        return self.stem_conv.backward(self.stem_bn.backward(self.stem_relu.backward(dh)))

    def set_capture(self, on: bool) -> None:
        for _, _, attn in self.attention_handles:
            attn.capture = on

    def force_unit_gates(self, on: bool = True) -> None:
        """Test scaffolding: make every LCT gate multiply by exactly one."""
        for _, _, attn in self.attention_handles:
            if isinstance(attn, LCTBlock):
                attn.force_unit_gate = on


def forward_full(net: Network, x: np.ndarray, mode: str = "eval") -> np.ndarray:
    if mode not in ("train", "eval"):
        raise ModeError(f"unknown mode {mode!r}; expected 'train' or 'eval'")
    return net.forward(x, train=(mode == "train"))


def build(spec: NetworkSpec, rng: Rng, dtype=np.float32) -> Network:
    return Network(spec, rng, dtype=dtype)


def resnet_mini_spec() -> NetworkSpec:
    """Desk-scale residual net: 3 stages of basic blocks on 32 x 32 inputs."""
    return NetworkSpec(
        stem=(16, 3, 1),
        stages=[StageSpec(3, 16, "basic", 1),
                StageSpec(3, 32, "basic", 2),
                StageSpec(3, 64, "basic", 2)],
        num_classes=10,
        input_geometry=(3, 32, 32),
    )


def resnet50_spec() -> NetworkSpec:
    return NetworkSpec(
        stem=(64, 7, 2),
        stages=[StageSpec(3, 256, "bottleneck", 1),
                StageSpec(4, 512, "bottleneck", 2),
                StageSpec(6, 1024, "bottleneck", 2),
                StageSpec(3, 2048, "bottleneck", 2)],
        num_classes=1000,
        input_geometry=(3, 224, 224),
        stem_pool=True,
    )


def resnet101_spec() -> NetworkSpec:
    spec = resnet50_spec()
    spec.stages[2] = StageSpec(23, 1024, "bottleneck", 2)
    return spec


PRESETS = {
    "resnet-mini": resnet_mini_spec,
    "resnet50": resnet50_spec,
    "resnet101": resnet101_spec,
}
