"""Whole-night inference: per-epoch sleep depth index (SDI) via sigmoid
post-processing of the raw depth score, REM probabilities, and the
epoch-to-epoch depth-decrease series.
"""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass

import numpy as np

from .edf import EPOCH_SECONDS, EpochGrid
from .model import SleepDepthModel

REM_THRESHOLD = 0.5


@dataclass
class SdiNight:
    sdi: np.ndarray
    rem_prob: np.ndarray
    stages: np.ndarray | None = None
    arousal_prop: np.ndarray | None = None
    epoch_duration: float = EPOCH_SECONDS

    def __post_init__(self):
        self.sdi = np.asarray(self.sdi, dtype=np.float64)
        self.rem_prob = np.asarray(self.rem_prob, dtype=np.float64)
        n = len(self.sdi)
        if len(self.rem_prob) != n:
            raise ValueError("sdi and rem_prob lengths differ")
        for name, arr in (("sdi", self.sdi), ("rem_prob", self.rem_prob)):
            if arr.size and (arr.min() < 0 or arr.max() > 1):
                raise ValueError(f"{name} values must lie in [0, 1]")
        if self.stages is not None and len(self.stages) != n:
            raise ValueError("stage list length mismatch")
        if self.arousal_prop is not None and len(self.arousal_prop) != n:
            raise ValueError("arousal proportion length mismatch")

    @property
    def n_epochs(self) -> int:
        return len(self.sdi)

    def rem_labels(self, threshold: float = REM_THRESHOLD) -> np.ndarray:
        return (self.rem_prob >= threshold).astype(int)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def annotate_night(grid: EpochGrid, model: SleepDepthModel,
                   batch_size: int = 64) -> SdiNight:
    """sdi_t = sigmoid(raw_depth_t), rem_prob_t = softmax(rem_logits_t)[REM]."""
    c = model.config
    if grid.epochs.shape[1:] != (c.channels, c.samples_per_epoch):
        raise ValueError(
            f"grid epochs {grid.epochs.shape[1:]} do not match model input "
            f"({c.channels}, {c.samples_per_epoch})")
    sdi, rem = [], []
    for i in range(0, len(grid), batch_size):
        raw, logits = model.forward(grid.epochs[i:i + batch_size])
        z = logits.data - logits.data.max(axis=-1, keepdims=True)
        probs = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
        sdi.append(_sigmoid(raw.data))
        rem.append(probs[:, 1])
    return SdiNight(np.concatenate(sdi), np.concatenate(rem),
                    stages=grid.stages, arousal_prop=grid.arousal_proportion)


def depth_decrease(night: SdiNight) -> np.ndarray:
    """d_t = sdi_{t-1} - sdi_t for t = 1..n-1."""
    if night.n_epochs < 2:
        raise ValueError("depth decrease needs at least 2 epochs")
    return night.sdi[:-1] - night.sdi[1:]


STAGE_LABELS = {0: "W", 1: "N1", 2: "N2", 3: "N3", 4: "R"}


def night_to_csv(night: SdiNight) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["epoch", "sdi", "rem_prob"]
    if night.stages is not None:
        header.append("stage_label")
    if night.arousal_prop is not None:
        header.append("arousal_prop")
    w.writerow(header)
    for i in range(night.n_epochs):
        row = [i, repr(float(night.sdi[i])), repr(float(night.rem_prob[i]))]
        if night.stages is not None:
            row.append(STAGE_LABELS[int(night.stages[i])])
        if night.arousal_prop is not None:
            row.append(repr(float(night.arousal_prop[i])))
        w.writerow(row)
    return buf.getvalue()


def night_from_csv(text: str) -> SdiNight:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][:3] != ["epoch", "sdi", "rem_prob"]:
        raise ValueError("not a night annotation CSV")
    header = rows[0]
    cols = {name: k for k, name in enumerate(header)}
    body = rows[1:]
    sdi = np.array([float(r[cols["sdi"]]) for r in body])
    rem = np.array([float(r[cols["rem_prob"]]) for r in body])
    stages = None
    if "stage_label" in cols:
        inverse = {v: k for k, v in STAGE_LABELS.items()}
        stages = np.array([inverse[r[cols["stage_label"]]] for r in body])
    props = None
    if "arousal_prop" in cols:
        props = np.array([float(r[cols["arousal_prop"]]) for r in body])
    return SdiNight(sdi, rem, stages=stages, arousal_prop=props)


def write_night_csv(night: SdiNight, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(night_to_csv(night))
    os.replace(tmp, path)
