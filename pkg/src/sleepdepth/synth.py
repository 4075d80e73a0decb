"""Seeded synthetic polysomnography for desk-scale training and validation.

Nights are generated from a stage Markov chain with a smoothly drifting
latent depth per epoch. The signal construction makes depth decodable from
spectral shape (per-epoch z-scoring removes absolute amplitude): EEG mixes
a delta-band tone whose weight grows with depth against a beta-band tone
that shrinks with it, EOG carries slow rolling waves only during REM, EMG
burstiness falls with depth, and the ECG pulse rate drops with depth.
Arousal events inject high-frequency EEG/EMG bursts and depress the latent
depth of the epochs they touch.

All randomness flows through numpy's counter-based Philox generator, so a
seed fully determines a night on any platform.
"""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .edf import (
    ArousalEvents,
    Channel,
    EpochGrid,
    Recording,
    SAMPLES_PER_EPOCH,
    arousal_proportion,
    write_edf,
)

EPOCHS_PER_HOUR = 120.0

DEFAULT_TRANSITIONS = np.array([
    # W     N1    N2    N3    R
    [0.60, 0.30, 0.08, 0.00, 0.02],
    [0.10, 0.40, 0.45, 0.02, 0.03],
    [0.03, 0.10, 0.60, 0.20, 0.07],
    [0.01, 0.02, 0.25, 0.65, 0.07],
    [0.05, 0.10, 0.15, 0.02, 0.68],
])

DEFAULT_DEPTH_RANGES = {
    0: (0.00, 0.10),
    1: (0.10, 0.35),
    2: (0.30, 0.70),
    3: (0.70, 1.00),
    4: (0.20, 0.60),
}

SHALLOW_DEPTH_RANGES = {
    0: (0.00, 0.08),
    1: (0.06, 0.25),
    2: (0.18, 0.50),
    3: (0.45, 0.80),
    4: (0.12, 0.40),
}

DISTURBED_TRANSITIONS = np.array([
    [0.65, 0.25, 0.08, 0.00, 0.02],
    [0.25, 0.40, 0.30, 0.01, 0.04],
    [0.12, 0.20, 0.50, 0.10, 0.08],
    [0.05, 0.08, 0.32, 0.50, 0.05],
    [0.15, 0.15, 0.15, 0.01, 0.54],
])


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


@dataclass
class SynthProfile:
    n_epochs: int = 60
    transitions: np.ndarray = field(default_factory=lambda: DEFAULT_TRANSITIONS.copy())
    depth_ranges: dict = field(default_factory=lambda: dict(DEFAULT_DEPTH_RANGES))
    arousal_rate_per_hour: float = 10.0
    arousal_depth_penalty: float = 0.85
    noise_level: float = 0.30
    seed: int = 0

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        if self.transitions.shape != (5, 5) or np.any(self.transitions < 0):
            raise ValueError("transition matrix must be 5x5 nonnegative")
        if not np.allclose(self.transitions.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("transition matrix rows must sum to 1")
        for s, (lo, hi) in self.depth_ranges.items():
            if not (0.0 <= lo < hi <= 1.0):
                raise ValueError(f"depth range for stage {s} must satisfy 0 <= lo < hi <= 1")
        if self.n_epochs < 1:
            raise ValueError("n_epochs must be positive")


@dataclass
class SynthNight:
    recording: Recording
    stages: np.ndarray
    arousals: ArousalEvents
    latent_depth: np.ndarray        # pre-arousal stage-driven depth
    effective_depth: np.ndarray     # depth after arousal depression (drives the signals)
    arousal_props: np.ndarray

    def grid(self) -> EpochGrid:
        n = len(self.stages)
        data = np.stack([ch.samples for ch in self.recording.channels])
        epochs = data.reshape(4, n, SAMPLES_PER_EPOCH).transpose(1, 0, 2)
        return EpochGrid(epochs, stages=self.stages, arousal_proportion=self.arousal_props)


def _markov_stages(profile: SynthProfile, rng: np.random.Generator) -> np.ndarray:
    stages = np.empty(profile.n_epochs, dtype=int)
    state = 0
    for i in range(profile.n_epochs):
        stages[i] = state
        state = int(rng.choice(5, p=profile.transitions[state]))
    return stages


def _latent_depth(profile: SynthProfile, stages: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = 0.5
    depth = np.empty(len(stages))
    for i, s in enumerate(stages):
        u = float(np.clip(0.5 + 0.8 * (u - 0.5) + 0.15 * rng.standard_normal(), 0.0, 1.0))
        lo, hi = profile.depth_ranges[int(s)]
        depth[i] = lo + (hi - lo) * u
    return depth


def _draw_arousals(profile: SynthProfile, stages: np.ndarray, rng: np.random.Generator) -> ArousalEvents:
    p_event = min(1.0, profile.arousal_rate_per_hour / EPOCHS_PER_HOUR)
    events = []
    for i, s in enumerate(stages):
        if s == 0:
            continue  # arousals are departures from sleep
        if rng.random() < p_event:
            duration = float(rng.uniform(3.0, 15.0))
            start = float(i * 30.0 + rng.uniform(0.0, 30.0 - duration))
            events.append((start, duration))
    return ArousalEvents(events)


def _epoch_signals(stage: int, depth: float, noise: float, arousal_window: tuple | None,
                   rng: np.random.Generator) -> np.ndarray:
    t = np.arange(SAMPLES_PER_EPOCH) / 100.0
    out = np.empty((4, SAMPLES_PER_EPOCH))

    # EEG: delta weight rises with depth, beta weight falls
    delta = (0.3 + 2.2 * depth) * np.sin(2 * np.pi * rng.uniform(0.7, 3.0) * t + rng.uniform(0, 2 * np.pi))
    beta = (0.3 + 2.0 * (1.0 - depth)) * np.sin(2 * np.pi * rng.uniform(14.0, 30.0) * t + rng.uniform(0, 2 * np.pi))
    eeg = delta + beta + noise * rng.standard_normal(SAMPLES_PER_EPOCH)

    # EOG: slow rolling waves during REM, blink spikes during wake
    eog = 0.4 * noise * rng.standard_normal(SAMPLES_PER_EPOCH)
    if stage == 4:
        eog += 2.0 * np.sin(2 * np.pi * rng.uniform(0.25, 0.5) * t + rng.uniform(0, 2 * np.pi))
    elif stage == 0:
        for _ in range(rng.poisson(3)):
            c = rng.integers(50, SAMPLES_PER_EPOCH - 50)
            eog[c - 20:c + 20] += 3.0 * np.exp(-0.5 * ((np.arange(-20, 20)) / 6.0) ** 2)

    # EMG: burst count falls with depth (amplitude alone would not survive z-scoring)
    emg = noise * rng.standard_normal(SAMPLES_PER_EPOCH)
    for _ in range(rng.poisson(5.0 * (1.0 - depth))):
        c = rng.integers(25, SAMPLES_PER_EPOCH - 25)
        emg[c - 25:c + 25] += 4.0 * noise * rng.standard_normal(50)

    # ECG: pulse train whose rate falls with depth
    bpm = 50.0 + 25.0 * (1.0 - depth)
    period = 60.0 / bpm
    ecg = 0.1 * noise * rng.standard_normal(SAMPLES_PER_EPOCH)
    beat = rng.uniform(0, period)
    kernel = np.exp(-0.5 * (np.arange(-8, 9) / 2.0) ** 2)
    while beat < 30.0:
        c = int(beat * 100)
        lo, hi = max(0, c - 8), min(SAMPLES_PER_EPOCH, c + 9)
        ecg[lo:hi] += kernel[: hi - lo]
        beat += period * rng.uniform(0.95, 1.05)

    if arousal_window is not None:
        lo, hi = arousal_window
        seg = slice(int(lo * 100), int(hi * 100))
        w = np.arange(SAMPLES_PER_EPOCH)[seg] / 100.0
        burst = np.sin(2 * np.pi * 25.0 * w + rng.uniform(0, 2 * np.pi))
        eeg[seg] += 2.5 * burst
        emg[seg] += 2.0 * np.abs(burst) * rng.standard_normal(seg.stop - seg.start)

    out[0], out[1], out[2], out[3] = eeg, eog, emg, ecg
    return out


def gen_night(profile: SynthProfile) -> SynthNight:
    rng = _rng(profile.seed)
    stages = _markov_stages(profile, rng)
    latent = _latent_depth(profile, stages, rng)
    arousals = _draw_arousals(profile, stages, rng)
    props = np.array([arousal_proportion(arousals, i) for i in range(profile.n_epochs)])
    effective = np.clip(latent * (1.0 - profile.arousal_depth_penalty * props), 0.0, 1.0)

    per_epoch_window = {}
    for start, duration in arousals.events:
        i = int(start // 30.0)
        per_epoch_window[i] = (start - i * 30.0, min(30.0, start + duration - i * 30.0))

    epochs = np.empty((profile.n_epochs, 4, SAMPLES_PER_EPOCH))
    for i in range(profile.n_epochs):
        epochs[i] = _epoch_signals(int(stages[i]), float(effective[i]), profile.noise_level,
                                   per_epoch_window.get(i), rng)
    signals = epochs.transpose(1, 0, 2).reshape(4, -1)
    recording = Recording([
        Channel("EEG C4", 100.0, signals[0]),
        Channel("EOG R", 100.0, signals[1]),
        Channel("EMG Chin", 100.0, signals[2]),
        Channel("ECG", 100.0, signals[3]),
    ])
    return SynthNight(recording, stages, arousals, latent, effective, props)


# -------------------------------------------------------------------- cohort

RACE_LEVELS = 3


@dataclass
class Subject:
    subject_id: str
    disturbed: bool
    age: float
    sex: int        # 0/1
    bmi: float
    race: int       # 0..RACE_LEVELS-1
    outcome: int
    time_days: float
    event: int


@dataclass
class Cohort:
    subjects: list[Subject]
    nights: list[SynthNight] | None
    planted: dict


def gen_cohort(n_subjects: int, disturbed_fraction: float, seed: int,
               n_epochs: int = 60, signals: bool = True,
               planted_or: float = 1.6, planted_hr: float = 1.5) -> Cohort:
    """Cohort with planted outcome/hazard effects for the disturbed subtype."""
    if n_subjects < 2:
        raise ValueError("need at least 2 subjects")
    rng = _rng(seed)
    subjects = []
    nights = [] if signals else None
    base_logit = -1.2
    baseline_hazard = 1.0 / 3000.0  # per day
    for i in range(n_subjects):
        disturbed = bool(rng.random() < disturbed_fraction)
        age = float(np.clip(rng.normal(63.0, 11.0), 30.0, 90.0))
        sex = int(rng.random() < 0.5)
        bmi = float(np.clip(rng.normal(28.0, 5.0), 16.0, 50.0))
        race = int(rng.choice(RACE_LEVELS, p=[0.6, 0.25, 0.15]))
        logit = base_logit + np.log(planted_or) * disturbed + 0.1 * (age - 63.0) / 11.0
        outcome = int(rng.random() < 1.0 / (1.0 + np.exp(-logit)))
        hazard = baseline_hazard * planted_hr ** disturbed * np.exp(0.1 * (age - 63.0) / 11.0)
        event_time = float(rng.exponential(1.0 / hazard))
        censor_time = float(rng.uniform(1000.0, 4000.0))
        time_days = min(event_time, censor_time)
        subjects.append(Subject(
            subject_id=f"sub-{i:04d}", disturbed=disturbed, age=age, sex=sex,
            bmi=bmi, race=race, outcome=outcome,
            time_days=max(time_days, 1.0), event=int(event_time <= censor_time),
        ))
        if signals:
            profile = SynthProfile(
                n_epochs=n_epochs,
                transitions=DISTURBED_TRANSITIONS if disturbed else DEFAULT_TRANSITIONS,
                depth_ranges=dict(SHALLOW_DEPTH_RANGES if disturbed else DEFAULT_DEPTH_RANGES),
                arousal_rate_per_hour=40.0 if disturbed else 10.0,
                seed=int(rng.integers(0, 2**31)),
            )
            nights.append(gen_night(profile))
    planted = {"odds_ratio": planted_or, "hazard_ratio": planted_hr,
               "disturbed_fraction": disturbed_fraction, "seed": seed}
    return Cohort(subjects, nights, planted)


# ------------------------------------------------------------ file emission

STAGE_CODES = ("W", "N1", "N2", "N3", "R")


def _atomic_write(path, data) -> None:
    tmp = f"{path}.tmp"
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_night_files(night: SynthNight, edf_path, annotations_path,
                      truth_path=None) -> None:
    """Emit a night as an EDF plus JSON sidecar (stages + arousal events),
    and optionally a ground-truth JSON with the latent depth series."""
    _atomic_write(edf_path, write_edf(night.recording))
    sidecar = {
        "stages": [STAGE_CODES[s] for s in night.stages],
        "arousals": [{"start": start, "duration": duration}
                     for start, duration in night.arousals.events],
    }
    _atomic_write(annotations_path, json.dumps(sidecar, sort_keys=True, indent=1) + "\n")
    if truth_path is not None:
        truth = {
            "latent_depth": list(night.latent_depth),
            "effective_depth": list(night.effective_depth),
            "arousal_proportion": list(night.arousal_props),
        }
        _atomic_write(truth_path, json.dumps(truth, sort_keys=True, indent=1) + "\n")


SUBJECT_FIELDS = ("subject_id", "disturbed", "age", "sex", "bmi", "race",
                  "outcome", "time_days", "event")


def subjects_csv(cohort: Cohort) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUBJECT_FIELDS)
    for s in cohort.subjects:
        w.writerow([s.subject_id, int(s.disturbed), repr(s.age), s.sex,
                    repr(s.bmi), s.race, s.outcome, repr(s.time_days), s.event])
    return buf.getvalue()


def parse_subjects_csv(text: str) -> list[Subject]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != SUBJECT_FIELDS:
        raise ValueError("not a subject table CSV")
    subjects = []
    for r in rows[1:]:
        subjects.append(Subject(
            subject_id=r[0], disturbed=bool(int(r[1])), age=float(r[2]),
            sex=int(r[3]), bmi=float(r[4]), race=int(r[5]),
            outcome=int(r[6]), time_days=float(r[7]), event=int(r[8]),
        ))
    return subjects


def write_cohort(cohort: Cohort, out_dir, n_epochs_note: int | None = None) -> list[str]:
    """Write subject table, planted-effect record, and per-subject night
    files into out_dir; returns the emitted subject ids."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "subjects.csv", subjects_csv(cohort))
    _atomic_write(out / "planted.json",
                  json.dumps(cohort.planted, sort_keys=True, indent=1) + "\n")
    ids = []
    if cohort.nights is not None:
        for subject, night in zip(cohort.subjects, cohort.nights):
            stem = subject.subject_id
            write_night_files(night, out / f"{stem}.edf", out / f"{stem}.json",
                              out / f"{stem}.truth.json")
            ids.append(stem)
    return ids
