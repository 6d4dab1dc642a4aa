"""Data ingestion, the training loop's determinism contract, and the binary
checkpoint format (byte-level fixtures, corruption detection, resume).
"""

import os
import struct
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lctnet.attention import AttentionConfig
from lctnet.backbone import NetworkSpec, StageSpec, build
from lctnet.data import (CIFAR_RECORD_BYTES, DataError, Dataset,
                         load_cifar10_binary, synth_dataset)
from lctnet.layers import softmax_cross_entropy
from lctnet.rng import Rng
from lctnet.train import (CKPT_MAGIC, CheckpointError, CheckpointMismatchError,
                          EpochRow, TrainConfig, TrainLog, apply_checkpoint,
                          augment_batch, default_schedule, evaluate, lr_at,
                          load_checkpoint, save_checkpoint, train,
                          write_checkpoint)


def toy_spec(kind="lct"):
    return NetworkSpec(
        stem=(8, 3, 1),
        stages=[StageSpec(1, 8, "basic", 1), StageSpec(1, 16, "basic", 2)],
        attention=AttentionConfig(kind=kind, groups=4, reduction=4),
        num_classes=5,
        input_geometry=(3, 8, 8),
    )


def toy_dataset(seed, n, classes=5):
    rng = Rng(seed)
    return Dataset(
        images=rng.normal((n, 3, 8, 8)).astype(np.float32),
        labels=rng.integers(0, classes, (n,)).astype(np.int64),
        classes=classes, split="train",
        mean=np.zeros(3), std=np.ones(3),
    )


# ------------------------------------------------------------ cifar loader

def _write_records(path, labels, pixel_fn):
    recs = []
    for i, lab in enumerate(labels):
        pixels = np.array([pixel_fn(i, j) for j in range(3072)], dtype=np.uint8)
        recs.append(bytes([lab]) + pixels.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(recs))


def test_cifar_record_layout(tmp_path):
    p = tmp_path / "batch.bin"
    _write_records(p, [3, 7], lambda i, j: 255 if i == 0 else (i * 1024 + j) % 256)
    ds = load_cifar10_binary(str(p), stats=(np.zeros(3), np.ones(3)))
    assert ds.n == 2 and ds.classes == 10
    np.testing.assert_array_equal(ds.labels, [3, 7])
    # record 0: every pixel byte 255 -> exactly 1.0 after the /255 mapping
    np.testing.assert_array_equal(ds.images[0], np.ones((3, 32, 32), np.float32))
    # record 1: plane-major (R then G then B), rows within a plane
    for c, i, j in [(0, 0, 0), (0, 0, 5), (1, 2, 3), (2, 31, 31)]:
        want = ((1024 + c * 1024 + i * 32 + j) % 256) / 255.0
        assert ds.images[1, c, i, j] == np.float32(want)


def test_cifar_directory_reads_files_in_sorted_order(tmp_path):
    _write_records(tmp_path / "b.bin", [2], lambda i, j: 0)
    _write_records(tmp_path / "a.bin", [1], lambda i, j: 0)
    ds = load_cifar10_binary(str(tmp_path))
    np.testing.assert_array_equal(ds.labels, [1, 2])


def test_cifar_truncated_file_reports_offset(tmp_path):
    p = tmp_path / "bad.bin"
    _write_records(p, [0, 1], lambda i, j: 0)
    with open(p, "ab") as f:
        f.write(b"\x00" * 100)  # partial third record
    with pytest.raises(DataError, match=f"byte offset {2 * CIFAR_RECORD_BYTES}"):
        load_cifar10_binary(str(p))


def test_cifar_label_out_of_range_names_the_record(tmp_path):
    p = tmp_path / "bad.bin"
    _write_records(p, [0, 10, 1], lambda i, j: 0)
    with pytest.raises(DataError, match="label 10.*record 1"):
        load_cifar10_binary(str(p))


def test_cifar_missing_path_and_empty_dir(tmp_path):
    with pytest.raises(DataError, match="does not exist"):
        load_cifar10_binary(str(tmp_path / "nope.bin"))
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(DataError, match="no .bin files"):
        load_cifar10_binary(str(empty))


def test_cifar_standardization_and_stats_reuse(tmp_path):
    p = tmp_path / "train.bin"
    rng = Rng(1)
    vals = rng.integers(0, 256, (4, 3072))
    _write_records(p, [0, 1, 2, 3], lambda i, j: int(vals[i, j]))
    train_ds = load_cifar10_binary(str(p))
    assert abs(train_ds.images.mean()) < 1e-6
    per_chan_std = train_ds.images.std(axis=(0, 2, 3))
    np.testing.assert_allclose(per_chan_std, 1.0, rtol=1e-5)
    val_ds = load_cifar10_binary(str(p), split="val", stats=train_ds.stats())
    np.testing.assert_array_equal(val_ds.images, train_ds.images)
    assert val_ds.split == "val"


def test_standardization_tolerates_constant_channel(tmp_path):
    p = tmp_path / "flat.bin"
    _write_records(p, [0, 1], lambda i, j: 128 if j < 1024 else (i * 7 + j) % 256)
    ds = load_cifar10_binary(str(p))  # channel 0 constant across both images
    assert np.all(np.isfinite(ds.images))
    np.testing.assert_array_equal(ds.images[:, 0], 0.0)  # centered, not scaled


# ------------------------------------------------------------------- synth

def test_synth_is_deterministic_and_balanced():
    a = synth_dataset(1, 100)
    b = synth_dataset(1, 100)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, synth_dataset(2, 100).images)
    counts = np.bincount(a.labels, minlength=10)
    np.testing.assert_array_equal(counts, 10)
    np.testing.assert_array_equal(a.labels[:10], np.arange(10))
    assert a.images.dtype == np.float32 and a.images.shape == (100, 3, 32, 32)


def test_synth_rejects_fewer_samples_than_classes():
    with pytest.raises(DataError):
        synth_dataset(1, 5, classes=10)


def test_synth_val_split_reuses_train_statistics():
    train_ds = synth_dataset(1, 200)
    val_ds = synth_dataset(2, 50, stats=train_ds.stats(), split="val")
    np.testing.assert_array_equal(val_ds.mean, train_ds.mean)
    np.testing.assert_array_equal(val_ds.std, train_ds.std)
    # re-standardizing val by its own stats would differ
    own = synth_dataset(2, 50)
    assert not np.allclose(own.images, val_ds.images)


def test_synth_classes_are_separable_by_nearest_centroid():
    train_ds = synth_dataset(1, 1000)
    test_ds = synth_dataset(2, 300, stats=train_ds.stats(), split="val")
    flat = train_ds.images.reshape(train_ds.n, -1).astype(np.float64)
    centroids = np.stack([flat[train_ds.labels == c].mean(axis=0)
                          for c in range(10)])
    tflat = test_ds.images.reshape(test_ds.n, -1).astype(np.float64)
    d2 = ((tflat[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    acc = (d2.argmin(axis=1) == test_ds.labels).mean()
    assert acc > 0.8, f"nearest-centroid accuracy only {acc:.2%}"


# ------------------------------------------------------- schedule / config

def test_default_schedule_marks():
    assert default_schedule(10) == [(6, 0.1), (9, 0.1)]
    assert default_schedule(4) == [(2, 0.1), (3, 0.1)]
    assert default_schedule(1) == [(1, 0.1)]  # the two marks collapse


def test_lr_at_applies_all_passed_marks():
    cfg = TrainConfig(lr0=0.1, schedule=[(6, 0.1), (9, 0.1)])
    np.testing.assert_allclose(lr_at(cfg, 1), 0.1)
    np.testing.assert_allclose(lr_at(cfg, 5), 0.1)
    np.testing.assert_allclose(lr_at(cfg, 6), 0.01)
    np.testing.assert_allclose(lr_at(cfg, 8), 0.01)
    np.testing.assert_allclose(lr_at(cfg, 9), 0.001)
    np.testing.assert_allclose(lr_at(cfg, 99), 0.001)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(schedule=[(4, 0.1), (4, 0.1)]).validate()
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1).validate()
    TrainConfig(schedule=[(2, 0.1), (3, 0.5)]).validate()


def test_train_log_csv_header_and_formatting():
    log = TrainLog()
    log.rows.append(EpochRow(1, 0.1, 2.302585093, 10.5, 9.0, 50.25))
    csv = log.to_csv()
    lines = csv.strip().split("\n")
    assert lines[0] == "epoch,lr,train_loss,train_top1,val_top1,val_top5"
    assert lines[1] == "1,0.1,2.30258509,10.5,9,50.25"


# ------------------------------------------------------------ augmentation

def test_augment_is_deterministic_given_rng_state():
    x = Rng(1).normal((6, 3, 8, 8)).astype(np.float32)
    a = augment_batch(x.copy(), Rng(9), hflip=True, pad_crop=True)
    b = augment_batch(x.copy(), Rng(9), hflip=True, pad_crop=True)
    np.testing.assert_array_equal(a, b)


def test_augment_noop_flags_leave_input_alone():
    x = Rng(2).normal((4, 3, 8, 8)).astype(np.float32)
    out = augment_batch(x, Rng(0), hflip=False, pad_crop=False)
    np.testing.assert_array_equal(out, x)


def test_augment_matches_manual_replay_of_the_stream():
    x = Rng(3).normal((5, 3, 8, 8)).astype(np.float32)
    got = augment_batch(x.copy(), Rng(42), hflip=True, pad_crop=True)
    rng = Rng(42)
    xp = np.pad(x, ((0, 0), (0, 0), (4, 4), (4, 4)), mode="reflect")
    offs = rng.integers(0, 9, (5, 2))
    want = np.stack([xp[i, :, offs[i, 0]:offs[i, 0] + 8, offs[i, 1]:offs[i, 1] + 8]
                     for i in range(5)])
    flips = rng.integers(0, 2, (5,)).astype(bool)
    want[flips] = want[flips][..., ::-1]
    np.testing.assert_array_equal(got, want)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_augment_preserves_multiset_of_rows_under_flip_only(seed):
    x = Rng(seed).normal((3, 2, 4, 4)).astype(np.float32)
    out = augment_batch(x.copy(), Rng(seed + 1), hflip=True, pad_crop=False)
    # a horizontal flip permutes columns, so sorted pixel values are invariant
    np.testing.assert_array_equal(np.sort(out, axis=-1), np.sort(x, axis=-1))


# -------------------------------------------------------------- evaluation

def test_evaluate_matches_top_k_oracle():
    net = build(toy_spec(), Rng(4))
    ds = toy_dataset(5, 50)
    top1, top5, loss = evaluate(net, ds, batch_size=16)
    logits = np.concatenate([net.forward(ds.images[s:s + 16], train=False)
                             for s in range(0, 50, 16)])
    hits1 = hits5 = 0
    losses = []
    for i in range(50):
        row = logits[i]
        best = min(np.flatnonzero(row == row.max()))  # ties to lowest index
        hits1 += best == ds.labels[i]
        top = np.argsort(-row, kind="stable")[:5]
        hits5 += ds.labels[i] in top
        l, _ = softmax_cross_entropy(row[None], ds.labels[i:i + 1])
        losses.append(l)
    np.testing.assert_allclose(top1, 100.0 * hits1 / 50, rtol=1e-12)
    np.testing.assert_allclose(top5, 100.0 * hits5 / 50, rtol=1e-12)
    np.testing.assert_allclose(loss, np.mean(losses), rtol=1e-5)


def test_evaluate_top5_caps_at_class_count():
    net = build(toy_spec(), Rng(6))
    ds = toy_dataset(7, 20)  # 5 classes -> top-5 is guaranteed
    _, top5, _ = evaluate(net, ds)
    assert top5 == 100.0


def test_evaluate_is_batch_size_independent():
    net = build(toy_spec(), Rng(8))
    ds = toy_dataset(9, 30)
    a = evaluate(net, ds, batch_size=30)
    b = evaluate(net, ds, batch_size=7)
    assert a[0] == b[0] and a[1] == b[1]
    np.testing.assert_allclose(a[2], b[2], rtol=1e-5)


# ---------------------------------------------------------------- training

def test_zero_lr_training_changes_nothing():
    net = build(toy_spec(), Rng(10))
    before = {n: t.copy() for n, t in net.registry.named_tensors()
              if "running" not in n}
    ds = toy_dataset(11, 64)
    cfg = TrainConfig(lr0=0.0, momentum=0.9, weight_decay=1e-4, epochs=2,
                      batch_size=16, seed=1, hflip=False, pad_crop=False)
    log = train(net, ds, cfg)
    for name, t in net.registry.named_params():
        np.testing.assert_array_equal(t.data, before[name], err_msg=name)
    assert log.status == "ok" and len(log.rows) == 2
    # batchnorm buffers still track batch statistics even with frozen params
    rm = dict(net.registry.named_tensors())["stem.bn.running_mean"]
    assert not np.array_equal(rm, np.zeros_like(rm))


def test_training_run_is_bit_identical_across_reruns():
    def run():
        net = build(toy_spec(), Rng(12))
        cfg = TrainConfig(lr0=0.05, momentum=0.9, weight_decay=1e-4,
                          schedule=default_schedule(3), epochs=3,
                          batch_size=16, seed=3)
        return train(net, toy_dataset(13, 96), cfg, val_dataset=toy_dataset(14, 32))
    a, b = run(), run()
    assert a.to_csv() == b.to_csv()
    assert a.rng_state == b.rng_state


def test_validation_columns_are_nan_without_a_val_set():
    net = build(toy_spec(), Rng(15))
    log = train(net, toy_dataset(16, 32),
                TrainConfig(lr0=0.01, epochs=1, batch_size=16, seed=1))
    assert np.isnan(log.rows[0].val_top1) and np.isnan(log.rows[0].val_top5)
    assert np.isfinite(log.rows[0].train_loss)


def test_divergence_guard_trips_on_nonfinite_loss(monkeypatch):
    import lctnet.train as train_mod
    real = train_mod.softmax_cross_entropy
    calls = {"n": 0}

    def wedge(logits, labels):
        calls["n"] += 1
        loss, d = real(logits, labels)
        if calls["n"] > 4:  # 64 samples / batch 16 = 4 batches: epoch 2 on
            return float("nan"), np.zeros_like(d)
        return loss, d

    monkeypatch.setattr(train_mod, "softmax_cross_entropy", wedge)
    net = build(toy_spec(), Rng(17))
    cfg = TrainConfig(lr0=0.05, epochs=6, batch_size=16, seed=1,
                      hflip=False, pad_crop=False)
    log = train(net, toy_dataset(18, 64), cfg)
    assert log.status == "diverged"
    assert log.final_epoch == 2 and len(log.rows) == 2
    assert not np.isfinite(log.rows[-1].train_loss)


def test_divergence_guard_trips_on_tenfold_loss_blowup(monkeypatch):
    import lctnet.train as train_mod
    calls = {"n": 0}

    def escalating(logits, labels):
        calls["n"] += 1
        loss = 1.0 if calls["n"] <= 4 else 20.0
        return loss, np.zeros_like(logits)

    monkeypatch.setattr(train_mod, "softmax_cross_entropy", escalating)
    net = build(toy_spec(), Rng(19))
    cfg = TrainConfig(lr0=0.05, epochs=6, batch_size=16, seed=1,
                      hflip=False, pad_crop=False)
    log = train(net, toy_dataset(20, 64), cfg)
    assert log.status == "diverged"
    assert log.final_epoch == 2 and len(log.rows) == 2
    np.testing.assert_allclose(log.rows[0].train_loss, 1.0)
    np.testing.assert_allclose(log.rows[1].train_loss, 20.0)


def test_train_writes_final_and_best_checkpoints(tmp_path):
    net = build(toy_spec(), Rng(19))
    cfg = TrainConfig(lr0=0.05, epochs=2, batch_size=16, seed=2)
    train(net, toy_dataset(20, 48), cfg, out_dir=str(tmp_path))
    final = load_checkpoint(str(tmp_path / "final.ckpt"))
    best = load_checkpoint(str(tmp_path / "best.ckpt"))
    assert final.epoch == 2
    assert best.epoch in (1, 2)
    assert set(final.tensors) == {n for n, _ in net.registry.named_tensors()}


# ------------------------------------------------------------- checkpoints

def _trained_toy(tmp_path, kind="lct", seed=21, epochs=1):
    net = build(toy_spec(kind), Rng(seed))
    cfg = TrainConfig(lr0=0.05, momentum=0.9, epochs=epochs, batch_size=16,
                      seed=seed)
    log = train(net, toy_dataset(seed + 1, 48, 5), cfg)
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(path, net, log.rng_state, log.final_epoch)
    return net, path, log


def test_checkpoint_roundtrip_is_bitwise(tmp_path):
    net, path, log = _trained_toy(tmp_path)
    fresh = build(toy_spec(), Rng(99))  # different init, fully overwritten
    ckpt = load_checkpoint(path)
    apply_checkpoint(fresh, ckpt)
    for name, t in net.registry.named_tensors():
        got = dict(fresh.registry.named_tensors())[name]
        np.testing.assert_array_equal(got, t, err_msg=name)
    for p in net.registry.params():
        q = fresh.registry.get(p.name)
        np.testing.assert_array_equal(q.vel, p.vel, err_msg=p.name)
    assert ckpt.rng_state == log.rng_state
    assert ckpt.epoch == log.final_epoch


def test_checkpoint_header_layout(tmp_path):
    _, path, _ = _trained_toy(tmp_path)
    with open(path, "rb") as f:
        blob = f.read()
    assert blob[:4] == CKPT_MAGIC == b"LCTC"
    assert struct.unpack("<I", blob[4:8])[0] == 1  # format version
    tensor_count = struct.unpack("<Q", blob[8:16])[0]
    net = build(toy_spec(), Rng(1))
    assert tensor_count == len(net.registry.named_tensors())


def test_checkpoint_without_momentum_loads_cleanly(tmp_path):
    net = build(toy_spec(), Rng(22))
    path = str(tmp_path / "fresh.ckpt")
    save_checkpoint(path, net, (5, 0), 0)  # untrained: no velocity buffers
    ckpt = load_checkpoint(path)
    assert ckpt.momenta == {}
    fresh = build(toy_spec(), Rng(23))
    apply_checkpoint(fresh, ckpt)
    assert all(p.vel is None for p in fresh.registry.params())


def test_checkpoint_detects_corruption(tmp_path):
    _, path, _ = _trained_toy(tmp_path)
    blob = bytearray(open(path, "rb").read())
    blob[len(blob) // 2] ^= 0xFF
    bad = tmp_path / "corrupt.ckpt"
    bad.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(str(bad))


def test_checkpoint_detects_truncation_magic_version_trailing(tmp_path):
    _, path, _ = _trained_toy(tmp_path)
    blob = open(path, "rb").read()

    trunc = tmp_path / "trunc.ckpt"
    trunc.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(str(trunc))

    bad_magic = tmp_path / "magic.ckpt"
    bad_magic.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(str(bad_magic))

    bad_ver = tmp_path / "ver.ckpt"
    bad_ver.write_bytes(blob[:4] + struct.pack("<I", 9) + blob[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(str(bad_ver))

    trailing = tmp_path / "trail.ckpt"
    trailing.write_bytes(blob + b"\x00\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(str(trailing))


def test_checkpoint_spec_mismatch_names_first_tensor(tmp_path):
    _, path, _ = _trained_toy(tmp_path, kind="lct")
    other = build(toy_spec(kind="se"), Rng(24))
    with pytest.raises(CheckpointMismatchError, match="first mismatching tensor"):
        apply_checkpoint(other, load_checkpoint(path))


def test_checkpoint_shape_mismatch_names_the_tensor(tmp_path):
    net = build(toy_spec(), Rng(25))
    tensors = dict(net.registry.named_tensors())
    name = "stage1.block0.conv1.weight"
    tensors[name] = np.zeros((1, 2, 3, 3), dtype=np.float32)
    path = str(tmp_path / "shape.ckpt")
    write_checkpoint(path, tensors, {}, (0, 0), 0)
    with pytest.raises(CheckpointMismatchError, match=name):
        apply_checkpoint(build(toy_spec(), Rng(26)), load_checkpoint(path))


def test_checkpoint_write_is_atomic(tmp_path):
    net = build(toy_spec(), Rng(27))
    path = str(tmp_path / "atomic.ckpt")
    save_checkpoint(path, net, (0, 0), 0)
    assert not os.path.exists(path + ".tmp")


def test_resume_equals_uninterrupted_run(tmp_path):
    ds = toy_dataset(30, 96)
    cfg = TrainConfig(lr0=0.05, momentum=0.9, weight_decay=1e-4,
                      schedule=default_schedule(4), epochs=4, batch_size=16,
                      seed=7)

    straight = build(toy_spec(), Rng(7))
    log_a = train(straight, ds, cfg, rng_state=Rng(7).state())

    first = build(toy_spec(), Rng(7))
    half_cfg = replace(cfg, epochs=2)
    train(first, ds, half_cfg, rng_state=Rng(7).state(), out_dir=str(tmp_path))
    ckpt = load_checkpoint(str(tmp_path / "final.ckpt"))

    resumed = build(toy_spec(), Rng(0))
    apply_checkpoint(resumed, ckpt)
    log_b = train(resumed, ds, cfg, start_epoch=ckpt.epoch,
                  rng_state=ckpt.rng_state)

    for name, t in straight.registry.named_tensors():
        got = dict(resumed.registry.named_tensors())[name]
        np.testing.assert_array_equal(got, t, err_msg=name)
    assert [r.epoch for r in log_b.rows] == [3, 4]
    tail_a = [(r.train_loss, r.train_top1) for r in log_a.rows[2:]]
    tail_b = [(r.train_loss, r.train_top1) for r in log_b.rows]
    assert tail_a == tail_b
