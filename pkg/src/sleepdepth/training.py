"""Training loop: stratified mini-batch sampling, Adam updates on the
combined ranking/classification objective, recording-level 7:3 splits, and
bit-exact checkpointing.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .edf import EpochGrid
from .losses import LossConfig, combined_loss, rem_cross_entropy
from .model import ModelConfig, SleepDepthModel

MODES = ("joint", "classification_only")
CHECKPOINT_MAGIC = b"SDIK\x01\n"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_steps: int = 100
    seed: int = 0
    mode: str = "joint"
    alpha: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.mode == "joint" and self.batch_size < 4:
            raise ValueError("joint mode needs batch_size >= 4 so stage pairs exist")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("batch_size and max_steps must be positive")


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    test_fraction: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not np.isclose(self.train_fraction + self.test_fraction, 1.0):
            raise ValueError("split fractions must sum to 1")
        if not (0 < self.train_fraction < 1):
            raise ValueError("train fraction must lie in (0, 1)")


def split_recordings(n_recordings: int, spec: SplitSpec | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Seeded recording-level split; a recording never sits in both parts."""
    spec = spec or SplitSpec()
    if n_recordings < 2:
        raise ValueError("need at least 2 recordings to split")
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(n_recordings)
    n_train = int(round(spec.train_fraction * n_recordings))
    n_train = min(max(n_train, 1), n_recordings - 1)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


@dataclass
class EpochPool:
    """Flattened labeled epochs from one or more recordings."""

    epochs: np.ndarray          # (n, 4, 3000)
    stages: np.ndarray          # (n,)
    recording_ids: np.ndarray   # (n,)

    def __post_init__(self):
        n = len(self.epochs)
        if len(self.stages) != n or len(self.recording_ids) != n:
            raise ValueError("pool arrays must share their first dimension")

    def __len__(self) -> int:
        return len(self.epochs)


def pool_from_grids(grids: list[EpochGrid], indices=None) -> EpochPool:
    indices = range(len(grids)) if indices is None else indices
    parts, stages, rec_ids = [], [], []
    for i in indices:
        g = grids[i]
        if g.stages is None:
            raise ValueError(f"grid {i} has no stage labels")
        parts.append(g.epochs)
        stages.append(g.stages)
        rec_ids.append(np.full(len(g), i))
    if not parts:
        raise ValueError("empty grid list")
    return EpochPool(np.concatenate(parts), np.concatenate(stages), np.concatenate(rec_ids))


def stratified_batch(pool: EpochPool, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Batch indices; targets >= 2 distinct non-REM stages when the pool has them."""
    n = len(pool)
    if n == 0:
        raise ValueError("cannot sample from an empty pool")
    idx = rng.integers(0, n, size=cfg.batch_size)
    pool_nonrem = set(np.unique(pool.stages[pool.stages != 4]).tolist())
    if len(pool_nonrem) < 2:
        return idx
    batch_nonrem = set(np.unique(pool.stages[idx][pool.stages[idx] != 4]).tolist())
    if len(batch_nonrem) >= 2:
        return idx
    # force a second distinct non-REM stage into a random slot
    missing = sorted(pool_nonrem - batch_nonrem)
    target = missing[int(rng.integers(0, len(missing)))]
    candidates = np.flatnonzero(pool.stages == target)
    slot = int(rng.integers(0, cfg.batch_size))
    idx[slot] = candidates[int(rng.integers(0, len(candidates)))]
    return idx


class Adam:
    """Adam-style optimizer with bias correction."""

    def __init__(self, params: list[ad.Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        c = self.cfg
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:  # parameter unreached by this objective
                continue
            self.m[i] = c.beta1 * self.m[i] + (1 - c.beta1) * g
            self.v[i] = c.beta2 * self.v[i] + (1 - c.beta2) * g * g
            m_hat = self.m[i] / (1 - c.beta1 ** self.t)
            v_hat = self.v[i] / (1 - c.beta2 ** self.t)
            p.data -= c.learning_rate * m_hat / (np.sqrt(v_hat) + c.eps)


@dataclass
class TrainResult:
    model: SleepDepthModel
    trace: list[tuple[int, float, float, float]]  # (step, rank, clas, total)


def train_step(model: SleepDepthModel, optimizer: Adam, epochs: np.ndarray,
               stages: np.ndarray, cfg: TrainConfig,
               rng: np.random.Generator) -> tuple[float, float, float]:
    """One optimizer update; returns (rank, clas, total) losses for the batch."""
    loss_cfg = LossConfig(alpha=cfg.alpha)
    is_rem = (np.asarray(stages) == 4).astype(int)
    raw_depth, rem_logits = model.forward(epochs, train=True, rng=rng)
    if not (np.isfinite(raw_depth.data).all() and np.isfinite(rem_logits.data).all()):
        raise FloatingPointError("training diverged: non-finite model outputs")
    if cfg.mode == "classification_only":
        clas = rem_cross_entropy(rem_logits, is_rem)
        total = ad.scale(clas, cfg.alpha)
        rank_val = 0.0
    else:
        total, rank, clas, _ = combined_loss(raw_depth, stages, rem_logits, is_rem, loss_cfg)
        rank_val = float(rank.data)
    total_val = float(total.data)
    clas_val = float(clas.data)
    if not np.isfinite(total_val):
        raise FloatingPointError(
            f"training diverged: loss {total_val} (rank={rank_val}, clas={clas_val})")
    model.zero_grad()
    ad.backward(total)
    optimizer.step()
    return rank_val, clas_val, total_val


def train(pool: EpochPool, model: SleepDepthModel, cfg: TrainConfig) -> TrainResult:
    """Seeded mini-batch training; the trace records losses before each update."""
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(model.trainable(), cfg)
    trace = []
    for step in range(cfg.max_steps):
        idx = stratified_batch(pool, cfg, rng)
        try:
            rank, clas, total = train_step(
                model, optimizer, pool.epochs[idx], pool.stages[idx], cfg, rng)
        except FloatingPointError as exc:
            raise FloatingPointError(f"step {step}: {exc}") from exc
        trace.append((step, rank, clas, total))
    return TrainResult(model, trace)


def write_loss_trace(trace, path) -> None:
    lines = ["step,rank_loss,clas_loss,total"]
    for step, rank, clas, total in trace:
        lines.append(f"{step},{rank!r},{clas!r},{total!r}")
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


# --------------------------------------------------------------- checkpoints

def save_checkpoint(model: SleepDepthModel) -> bytes:
    """Magic + JSON manifest + little-endian float64 parameter blob."""
    c = model.config
    manifest = {
        "format_version": 1,
        "config": {
            "channels": c.channels, "samples_per_epoch": c.samples_per_epoch,
            "patch_size": c.patch_size, "embed_dim": c.embed_dim,
            "depth": c.depth, "n_heads": c.n_heads, "mlp_dim": c.mlp_dim,
            "dropout": c.dropout,
        },
        "params": [{"name": k, "shape": list(v.data.shape)}
                   for k, v in model.params.items()],
    }
    blob = b"".join(np.ascontiguousarray(v.data, dtype="<f8").tobytes()
                    for v in model.params.values())
    head = json.dumps(manifest, sort_keys=True).encode()
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + blob


def load_checkpoint(data: bytes) -> SleepDepthModel:
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    if len(data) < off + 8:
        raise ValueError("checkpoint truncated in header")
    (head_len,) = struct.unpack_from("<Q", data, off)
    off += 8
    try:
        manifest = json.loads(data[off:off + head_len])
    except json.JSONDecodeError as exc:
        raise ValueError(f"corrupt checkpoint manifest: {exc}") from exc
    off += head_len
    model = SleepDepthModel(ModelConfig(**manifest["config"]))
    expected = [(k, tuple(v.data.shape)) for k, v in model.params.items()]
    listed = [(e["name"], tuple(e["shape"])) for e in manifest["params"]]
    for (name, shape), (lname, lshape) in zip(expected, listed):
        if name != lname or shape != lshape:
            raise ValueError(
                f"checkpoint shape mismatch for parameter {lname!r}: "
                f"manifest {lshape}, model expects {name!r} {shape}")
    if len(expected) != len(listed):
        raise ValueError("checkpoint parameter list does not match model")
    total = sum(int(np.prod(s)) for _, s in expected)
    blob = data[off:]
    if len(blob) != 8 * total:
        raise ValueError(
            f"checkpoint blob length {len(blob)} != expected {8 * total} bytes")
    flat = np.frombuffer(blob, dtype="<f8")
    pos = 0
    for name, shape in expected:
        n = int(np.prod(shape))
        model.params[name].data = flat[pos:pos + n].reshape(shape).astype(np.float64)
        pos += n
    return model


def save_checkpoint_file(model: SleepDepthModel, path) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    data = save_checkpoint(model)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint_file(path) -> SleepDepthModel:
    with open(path, "rb") as fh:
        return load_checkpoint(fh.read())
