"""Training loop, evaluation metrics, and binary checkpointing.

Determinism contract: given (seed, config, dataset bytes) every logged
number is bit-identical across runs.  All randomness (shuffling,
augmentation) flows through one counter-based Rng whose state is saved in
checkpoints, so a resumed run consumes exactly the stream the uninterrupted
run would have.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .backbone import Network
from .data import Dataset
from .layers import softmax_cross_entropy, sgd_step
from .rng import Rng
from .tensor import ShapeError

CKPT_MAGIC = b"LCTC"
CKPT_VERSION = 1
MOMENTUM_PREFIX = "__momentum__/"
CROP_PAD = 4


class CheckpointError(ValueError):
    """Checkpoint file malformed (magic, version, truncation, checksum)."""


class CheckpointMismatchError(ValueError):
    """Checkpoint tensors do not line up with the network's registry."""


@dataclass
class TrainConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: list[tuple[int, float]] = field(default_factory=list)
    epochs: int = 10
    batch_size: int = 64
    seed: int = 1
    hflip: bool = True
    pad_crop: bool = True
    source: str = "synth"

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        marks = [e for e, _ in self.schedule]
        if any(b <= a for a, b in zip(marks, marks[1:])):
            raise ValueError(f"schedule epochs must be strictly increasing, got {marks}")


def default_schedule(epochs: int) -> list[tuple[int, float]]:
    """Step decay at 60% and 90% of the run, factor 0.1 each."""
    marks = []
    for frac in (0.6, 0.9):
        e = max(1, int(epochs * frac))
        if e <= epochs and (not marks or e > marks[-1][0]):
            marks.append((e, 0.1))
    return marks


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    lr = cfg.lr0
    for e, m in cfg.schedule:
        if e <= epoch:
            lr *= m
    return lr


@dataclass
class EpochRow:
    epoch: int
    lr: float
    train_loss: float
    train_top1: float
    val_top1: float
    val_top5: float


@dataclass
class TrainLog:
    rows: list[EpochRow] = field(default_factory=list)
    status: str = "ok"  # "ok" or "diverged"
    final_epoch: int = 0
    rng_state: tuple[int, int] = (0, 0)

    def to_csv(self) -> str:
        lines = ["epoch,lr,train_loss,train_top1,val_top1,val_top5"]
        for r in self.rows:
            lines.append(
                f"{r.epoch},{r.lr:.9g},{r.train_loss:.9g},{r.train_top1:.9g},"
                f"{r.val_top1:.9g},{r.val_top5:.9g}"
            )
        return "\n".join(lines) + "\n"

    @property
    def final_train_top1(self) -> float:
        return self.rows[-1].train_top1 if self.rows else 0.0


def augment_batch(x: np.ndarray, rng: Rng, hflip: bool, pad_crop: bool) -> np.ndarray:
    """Reflect-pad random crop then horizontal flip, one draw per sample."""
    b, _, h, w = x.shape
    if pad_crop:
        xp = np.pad(x, ((0, 0), (0, 0), (CROP_PAD, CROP_PAD), (CROP_PAD, CROP_PAD)),
                    mode="reflect")
        offs = rng.integers(0, 2 * CROP_PAD + 1, (b, 2))
        out = np.empty_like(x)
        for i in range(b):
            oy, ox = offs[i]
            out[i] = xp[i, :, oy:oy + h, ox:ox + w]
        x = out
    if hflip:
        flips = rng.integers(0, 2, (b,)).astype(bool)
        x = x.copy()
        x[flips] = x[flips][..., ::-1]
    return x


def evaluate(net: Network, dataset: Dataset, batch_size: int = 256) -> tuple[float, float, float]:
    """(top-1 %, top-5 %, mean loss) in inference mode, no augmentation.

    Ties in the logits go to the lower class index.
    """
    n = dataset.n
    hits1 = hits5 = 0
    loss_sum = 0.0
    k = min(5, dataset.classes)
    for s in range(0, n, batch_size):
        x = dataset.images[s:s + batch_size]
        y = dataset.labels[s:s + batch_size]
        logits = net.forward(x, train=False)
        loss, _ = softmax_cross_entropy(logits, y)
        loss_sum += loss * x.shape[0]
        order = np.argsort(-logits, axis=1, kind="stable")
        hits1 += int((order[:, 0] == y).sum())
        hits5 += int((order[:, :k] == y[:, None]).any(axis=1).sum())
    return 100.0 * hits1 / n, 100.0 * hits5 / n, loss_sum / n


def train(net: Network, dataset: Dataset, cfg: TrainConfig,
          val_dataset: Dataset | None = None, start_epoch: int = 0,
          rng_state: tuple[int, int] | None = None,
          out_dir: str | None = None) -> TrainLog:
    """Momentum-SGD training with step decay and a divergence guard.

    Aborts with status "diverged" when an epoch's mean loss is non-finite or
    exceeds 10x the first epoch's.  With out_dir set, writes final.ckpt after
    every epoch and best.ckpt whenever the selection metric (validation top-1
    when available, else train top-1) improves.
    """
    cfg.validate()
    rng = Rng.from_state(rng_state) if rng_state is not None else Rng(cfg.seed)
    log = TrainLog()
    n = dataset.n
    initial_loss = None
    best_metric = -np.inf
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        lr = lr_at(cfg, epoch)
        perm = rng.permutation(n)
        loss_sum = 0.0
        hits = 0
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            x = dataset.images[idx]
            y = dataset.labels[idx]
            if cfg.pad_crop or cfg.hflip:
                x = augment_batch(x, rng, cfg.hflip, cfg.pad_crop)
            logits = net.forward(x, train=True)
            loss, dlogits = softmax_cross_entropy(logits, y)
            if not np.isfinite(loss):
                loss_sum = float("nan")
                break
            loss_sum += loss * x.shape[0]
            order = np.argsort(-logits, axis=1, kind="stable")
            hits += int((order[:, 0] == y).sum())
            net.backward(dlogits)
            sgd_step(net.registry, lr, cfg.momentum, cfg.weight_decay)
        train_loss = loss_sum / n
        train_top1 = 100.0 * hits / n
        if val_dataset is not None:
            val_top1, val_top5, _ = evaluate(net, val_dataset)
        else:
            val_top1 = val_top5 = float("nan")
        log.rows.append(EpochRow(epoch, lr, train_loss, train_top1, val_top1, val_top5))
        log.final_epoch = epoch
        log.rng_state = rng.state()
        if not np.isfinite(train_loss) or (
                initial_loss is not None and train_loss > 10.0 * initial_loss):
            log.status = "diverged"
            break
        if initial_loss is None:
            initial_loss = train_loss
        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, "final.ckpt"), net, rng.state(), epoch)
            metric = val_top1 if val_dataset is not None else train_top1
            if metric > best_metric:
                best_metric = metric
                save_checkpoint(os.path.join(out_dir, "best.ckpt"), net, rng.state(), epoch)
    return log


@dataclass
class Checkpoint:
    version: int
    tensors: dict[str, np.ndarray]
    momenta: dict[str, np.ndarray]
    rng_state: tuple[int, int]
    epoch: int


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return head + dims + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def write_checkpoint(path: str, tensors: dict[str, np.ndarray],
                     momenta: dict[str, np.ndarray], rng_state: tuple[int, int],
                     epoch: int) -> None:
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    parts.append(struct.pack("<Q", len(tensors)))
    for name, arr in tensors.items():
        parts.append(_pack_tensor(name, arr))
    parts.append(struct.pack("<Q", len(momenta)))
    for name, arr in momenta.items():
        parts.append(_pack_tensor(MOMENTUM_PREFIX + name, arr))
    parts.append(struct.pack("<QQQ", rng_state[0], rng_state[1], epoch))
    blob = b"".join(parts)
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def save_checkpoint(path: str, net: Network, rng_state: tuple[int, int],
                    epoch: int) -> None:
    tensors = dict(net.registry.named_tensors())
    momenta = {p.name: p.vel for p in net.registry.params() if p.vel is not None}
    write_checkpoint(path, tensors, momenta, rng_state, epoch)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, nbytes: int) -> bytes:
        if self.off + nbytes > len(self.blob):
            raise CheckpointError(f"truncated checkpoint at byte offset {self.off}")
        out = self.blob[self.off:self.off + nbytes]
        self.off += nbytes
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def tensor(self) -> tuple[str, np.ndarray]:
        name = self.take(self.u32()).decode("utf-8")
        rank = self.u32()
        dims = tuple(self.u64() for _ in range(rank))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = self.take(4 * count)
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        return name, arr


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8 or blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    r = _Reader(blob)
    r.take(4)
    version = r.u32()
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(r.u64()):
        name, arr = r.tensor()
        tensors[name] = arr
    momenta = {}
    for _ in range(r.u64()):
        name, arr = r.tensor()
        if not name.startswith(MOMENTUM_PREFIX):
            raise CheckpointError(f"{path}: optimizer tensor {name!r} lacks reserved prefix")
        momenta[name[len(MOMENTUM_PREFIX):]] = arr
    seed, counter, epoch = (r.u64(), r.u64(), r.u64())
    stored_crc = r.u32()
    if r.off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.off} trailing bytes after checksum")
    if stored_crc != (zlib.crc32(blob[:-4]) & 0xFFFFFFFF):
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    return Checkpoint(version, tensors, momenta, (seed, counter), epoch)


def apply_checkpoint(net: Network, ckpt: Checkpoint) -> None:
    """Restore parameters, buffers, and momentum in place; names must match."""
    reg_names = [name for name, _ in net.registry.named_tensors()]
    for name in reg_names:
        if name not in ckpt.tensors:
            raise CheckpointMismatchError(f"first mismatching tensor: {name} (missing from checkpoint)")
    reg_set = set(reg_names)
    for name in ckpt.tensors:
        if name not in reg_set:
            raise CheckpointMismatchError(f"first mismatching tensor: {name} (not in network)")
    params = {p.name: p for p in net.registry.params()}
    for name in ckpt.momenta:
        if name not in params:
            raise CheckpointMismatchError(f"first mismatching tensor: {MOMENTUM_PREFIX}{name}")
    for name, arr in ckpt.tensors.items():
        try:
            net.registry.load_tensor(name, arr.astype(net.dtype, copy=False))
        except ShapeError as e:
            raise CheckpointMismatchError(f"first mismatching tensor: {name} ({e})") from e
    for name, arr in ckpt.momenta.items():
        p = params[name]
        if arr.shape != p.data.shape:
            raise CheckpointMismatchError(
                f"first mismatching tensor: {MOMENTUM_PREFIX}{name} "
                f"(shape {arr.shape} vs {p.data.shape})")
        p.vel = arr.astype(net.dtype, copy=True)
