"""Adagrad training loop with seeded determinism and checkpointing.

The protocol is deliberately plain: fixed epoch count, shuffled mini-batches
of softmax cross-entropy descent, no early stopping, no validation split.
Everything the protocol leaves unstated (batch size, optimizer epsilon,
weight init, batch-norm constants) is fixed here and written into both the
experiment log and the checkpoint header so runs are reproducible bit for bit.
"""

from __future__ import annotations

import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ArgumentError, DimensionError, FormatError, NumericError
from .models import model_from_arch_string
from .tensor import softmax_xent

ADAGRAD_EPS = 1e-7
INIT_SCHEME = "glorot_uniform"

CHECKPOINT_MAGIC = b"IRX1"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    adagrad_eps: float = ADAGRAD_EPS

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ArgumentError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ArgumentError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ArgumentError(f"batch size must be >= 1, got {self.batch_size}")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float
    seconds: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)

    def append(self, stats):
        self.epochs.append(stats)

    def save_csv(self, path):
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write("epoch,loss,accuracy,seconds\n")
            for e in self.epochs:
                fh.write(f"{e.epoch},{e.loss:.8f},{e.accuracy:.6f},{e.seconds:.3f}\n")
        os.replace(tmp, path)


def adagrad_step(param, lr, eps=ADAGRAD_EPS):
    """acc += g^2; value -= lr * g / (sqrt(acc) + eps)."""
    g = param.grad
    if not np.isfinite(g).all():
        raise NumericError(f"non-finite gradient in parameter {param.name or '<unnamed>'}")
    param.accumulator += g * g
    param.data -= lr * g / (np.sqrt(param.accumulator) + eps)


def train(model, patch_set, config):
    """Run the fixed-epoch protocol over a PatchSet; returns (model, history).

    Shuffle order is a pure function of (seed, epoch); with one worker and
    one BLAS thread the resulting weights are bit-reproducible.
    """
    x_all = patch_set.patches
    y_all = patch_set.labels
    if y_all is None:
        raise ArgumentError("training requires labeled patches")
    if x_all.shape[-1] != model.bands:
        raise DimensionError(
            f"patches have {x_all.shape[-1]} bands, model expects {model.bands}")
    if y_all.min() < 0 or y_all.max() >= model.classes:
        raise IndexError(f"labels must be < {model.classes}")
    x_all = x_all.astype(model.dtype, copy=False)
    n = x_all.shape[0]
    params = [p for p in model.parameters() if p.trainable]
    history = TrainHistory()

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([config.seed, epoch])))
        perm = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            xb = T.Tensor(x_all[idx])
            logits = model.forward(xb, train=True)
            loss = softmax_xent(logits, y_all[idx])
            if not np.isfinite(loss.data):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}")
            for p in params:
                p.zero_grad()
            T.backward(loss)
            for p in params:
                adagrad_step(p, config.learning_rate, config.adagrad_eps)
            loss_sum += float(loss.data) * idx.size
            correct += int((np.argmax(logits.data, axis=-1) == y_all[idx]).sum())
        history.append(EpochStats(
            epoch=epoch, loss=loss_sum / n, accuracy=correct / n,
            seconds=time.perf_counter() - t0))
    return model, history


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (all integers little-endian uint64):
#   magic "IRX1" | version | bands | classes | patch | value_size (4 or 8)
#   | arch_len, arch utf-8 | meta_len, meta utf-8 (sorted key=value lines)
#   | n_tensors | for each: name_len, name, rank, extents..., raw values
# Weights only; optimizer state is not persisted.


def _default_meta(config=None):
    meta = {
        "adagrad_eps": repr(ADAGRAD_EPS),
        "bn_eps": repr(T.BN_EPS),
        "bn_momentum": repr(T.BN_MOMENTUM),
        "init": INIT_SCHEME,
    }
    if config is not None:
        meta.update({
            "batch_size": str(config.batch_size),
            "epochs": str(config.epochs),
            "learning_rate": repr(config.learning_rate),
            "seed": str(config.seed),
        })
    return meta


def save_checkpoint(model, path, config=None, extra_meta=None):
    """Serialize model weights; byte-identical for identical models and meta."""
    meta = getattr(model, "checkpoint_meta", None)
    if meta is None:
        meta = _default_meta(config)
        if extra_meta:
            meta.update({str(k): str(v) for k, v in extra_meta.items()})
    meta_text = "\n".join(f"{k}={v}" for k, v in sorted(meta.items()))
    arch = model.arch_string().encode()
    value_size = np.dtype(model.dtype).itemsize
    fmt = "<f4" if value_size == 4 else "<f8"

    parts = [CHECKPOINT_MAGIC, struct.pack("<5Q", CHECKPOINT_VERSION, model.bands,
                                           model.classes, model.patch, value_size)]
    parts.append(struct.pack("<Q", len(arch)))
    parts.append(arch)
    meta_bytes = meta_text.encode()
    parts.append(struct.pack("<Q", len(meta_bytes)))
    parts.append(meta_bytes)
    params = model.parameters()
    parts.append(struct.pack("<Q", len(params)))
    for p in params:
        name = p.name.encode()
        parts.append(struct.pack("<Q", len(name)))
        parts.append(name)
        parts.append(struct.pack("<Q", p.data.ndim))
        parts.append(struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
        parts.append(np.ascontiguousarray(p.data, dtype=fmt).tobytes())
    blob = b"".join(parts)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


class _Cursor:
    def __init__(self, blob, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated checkpoint", reason="truncated")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]


def load_checkpoint(path):
    """Rebuild the model from a checkpoint; raises FormatError on corruption."""
    with open(path, "rb") as fh:
        blob = fh.read()
    cur = _Cursor(blob, path)
    if cur.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint", reason="magic")
    version = cur.u64()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", reason="version")
    bands, classes, patch, value_size = cur.u64(), cur.u64(), cur.u64(), cur.u64()
    if value_size not in (4, 8):
        raise FormatError(f"{path}: bad value size {value_size}", reason="format")
    dtype = np.float32 if value_size == 4 else np.float64
    arch = cur.take(cur.u64()).decode()
    meta_text = cur.take(cur.u64()).decode()
    meta = dict(line.split("=", 1) for line in meta_text.splitlines() if "=" in line)
    n_tensors = cur.u64()
    fmt = "<f4" if value_size == 4 else "<f8"

    tensors = []
    for _ in range(n_tensors):
        name = cur.take(cur.u64()).decode()
        rank = cur.u64()
        if rank > 8:
            raise FormatError(f"{path}: implausible tensor rank {rank}", reason="format")
        shape = struct.unpack(f"<{max(rank, 1)}Q", cur.take(8 * max(rank, 1)))
        shape = tuple(shape[:rank]) if rank else ()
        count = int(np.prod(shape)) if rank else int(shape and shape[0] or 1)
        if rank == 0:
            count = 1
        data = np.frombuffer(cur.take(count * value_size), dtype=fmt).reshape(shape)
        tensors.append((name, data))
    if cur.pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - cur.pos} trailing bytes", reason="format")

    model = model_from_arch_string(arch, bands, classes, patch, seed=0, dtype=dtype)
    params = model.parameters()
    if len(params) != len(tensors):
        raise FormatError(
            f"{path}: {len(tensors)} tensors for a model with {len(params)}", reason="format")
    for p, (name, data) in zip(params, tensors):
        if p.name != name or p.data.shape != data.shape:
            raise FormatError(
                f"{path}: tensor {name} {data.shape} does not match model "
                f"parameter {p.name} {p.data.shape}", reason="format")
        p.data[...] = data.astype(dtype)
    model.checkpoint_meta = meta
    return model


# ---------------------------------------------------------------------------
# experiment log


def write_experiment_log(path, entries):
    """Self-describing key=value record of a run (one file per run)."""
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for key in sorted(entries):
            fh.write(f"{key}={entries[key]}\n")
    os.replace(tmp, path)


def read_experiment_log(path):
    with open(path, "r", encoding="utf-8") as fh:
        return dict(line.rstrip("\n").split("=", 1) for line in fh if "=" in line)
