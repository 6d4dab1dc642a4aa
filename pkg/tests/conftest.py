"""Shared fixtures.

The desk-scale training runs are expensive (minutes each on one core), so
they are trained once per session and shared by the regression, analysis,
and persistence tests.
"""

from __future__ import annotations

import time

import numpy as np
import pytest

from lctnet.attention import AttentionConfig
from lctnet.backbone import build, resnet_mini_spec
from lctnet.data import synth_dataset
from lctnet.rng import Rng
from lctnet.train import TrainConfig, default_schedule, train

DESK_SEED = 1
DESK_N = 2000
DESK_CLASSES = 10
DESK_EPOCHS = 4
DESK_GROUPS = 8  # well below the desk channel widths (16/32/64)
DESK_REDUCTION = 16

ATTENTION_KINDS = ("none", "se", "lct", "se_plus")


def desk_attention(kind: str) -> AttentionConfig:
    return AttentionConfig(kind=kind, groups=DESK_GROUPS, reduction=DESK_REDUCTION)


def desk_train_config() -> TrainConfig:
    return TrainConfig(lr0=0.1, momentum=0.9, weight_decay=1e-4,
                       schedule=default_schedule(DESK_EPOCHS), epochs=DESK_EPOCHS,
                       batch_size=64, seed=DESK_SEED)


def train_desk_model(kind: str, dataset):
    spec = resnet_mini_spec()
    spec.attention = desk_attention(kind)
    rng = Rng(DESK_SEED)
    net = build(spec, rng)
    log = train(net, dataset, desk_train_config(), rng_state=rng.state())
    return net, log


@pytest.fixture(scope="session")
def desk_data():
    train_ds = synth_dataset(DESK_SEED, DESK_N, DESK_CLASSES)
    val_ds = synth_dataset(DESK_SEED + 1, 500, DESK_CLASSES,
                           stats=train_ds.stats(), split="val")
    return train_ds, val_ds


@pytest.fixture(scope="session")
def desk_models(desk_data):
    """kind -> (net, TrainLog, wall_seconds) for all four attention kinds."""
    train_ds, _ = desk_data
    out = {}
    for kind in ATTENTION_KINDS:
        t0 = time.time()
        net, log = train_desk_model(kind, train_ds)
        out[kind] = (net, log, time.time() - t0)
    return out


@pytest.fixture(scope="session")
def desk_lct_rerun(desk_data):
    """A second, independent run of the LCT configuration (determinism)."""
    train_ds, _ = desk_data
    t0 = time.time()
    _, log = train_desk_model("lct", train_ds)
    return log, time.time() - t0
