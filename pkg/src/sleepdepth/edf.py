"""EDF parsing/writing and PSG preprocessing.

Covers the classic EDF container (256-byte fixed header, 256 bytes per
signal, ASCII fields, 16-bit little-endian samples), selection of the four
study channels (EEG, EOG, EMG, ECG), resampling to 100 Hz, segmentation
into 30-second epochs, and the sidecar stage/arousal annotation formats.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

EPOCH_SECONDS = 30.0
TARGET_RATE = 100.0
SAMPLES_PER_EPOCH = 3000

STAGE_NAMES = {"W": 0, "N1": 1, "N2": 2, "N3": 3, "R": 4}


class EdfParseError(ValueError):
    """Raised when an EDF byte stream violates the format."""


@dataclass
class EdfHeader:
    version: str
    patient_info: str
    recording_info: str
    start_datetime: datetime
    header_bytes: int
    n_records: int
    record_duration: float
    n_signals: int


@dataclass
class SignalSpec:
    label: str
    physical_min: float
    physical_max: float
    digital_min: int = -32768
    digital_max: int = 32767
    samples_per_record: int = 100
    transducer: str = ""
    physical_dimension: str = ""
    prefiltering: str = ""

    def __post_init__(self):
        if self.digital_min >= self.digital_max:
            raise ValueError("digital_min must be below digital_max")
        if self.physical_min == self.physical_max:
            raise ValueError("physical range must be nonempty")
        if self.samples_per_record <= 0:
            raise ValueError("samples_per_record must be positive")

    @property
    def gain(self) -> float:
        return (self.physical_max - self.physical_min) / (self.digital_max - self.digital_min)

    def to_physical(self, digital: np.ndarray) -> np.ndarray:
        return self.physical_min + (digital - self.digital_min) * self.gain

    def to_digital(self, physical: np.ndarray) -> np.ndarray:
        out_of_range = (physical < self.physical_min) | (physical > self.physical_max)
        if np.any(out_of_range):
            raise ValueError(
                f"signal {self.label!r}: value outside physical range "
                f"[{self.physical_min}, {self.physical_max}]"
            )
        d = np.rint((physical - self.physical_min) / self.gain) + self.digital_min
        return np.clip(d, self.digital_min, self.digital_max).astype("<i2")


@dataclass
class Channel:
    label: str
    sampling_rate: float
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sampling_rate <= 0:
            raise ValueError(f"channel {self.label!r}: sampling rate must be positive")
        if self.samples.size == 0:
            raise ValueError(f"channel {self.label!r}: empty samples")


@dataclass
class Recording:
    channels: list[Channel]
    start_datetime: datetime = field(default_factory=lambda: datetime(2000, 1, 1))

    def labels(self) -> list[str]:
        return [c.label for c in self.channels]


@dataclass(frozen=True)
class ChannelMap:
    """Case-insensitive substring patterns for the four study channels."""

    eeg_label: str = "EEG"
    eog_label: str = "EOG"
    emg_label: str = "EMG"
    ecg_label: str = "ECG"

    def __post_init__(self):
        for role in ("eeg", "eog", "emg", "ecg"):
            if not getattr(self, f"{role}_label"):
                raise ValueError(f"empty pattern for role {role}")

    def patterns(self) -> list[tuple[str, str]]:
        return [
            ("EEG", self.eeg_label),
            ("EOG", self.eog_label),
            ("EMG", self.emg_label),
            ("ECG", self.ecg_label),
        ]


@dataclass
class ArousalEvents:
    events: list[tuple[float, float]]  # (start seconds, duration seconds)

    def __post_init__(self):
        for start, duration in self.events:
            if start < 0:
                raise ValueError("arousal start must be nonnegative")
            if duration <= 0:
                raise ValueError("arousal duration must be positive")


@dataclass
class EpochGrid:
    """Per-epoch 4x3000 signal arrays plus optional labels."""

    epochs: np.ndarray  # (n, 4, 3000)
    stages: np.ndarray | None = None
    arousal_proportion: np.ndarray | None = None

    def __post_init__(self):
        self.epochs = np.asarray(self.epochs, dtype=np.float64)
        if self.epochs.ndim != 3 or self.epochs.shape[1:] != (4, SAMPLES_PER_EPOCH):
            raise ValueError(f"epochs must have shape (n, 4, {SAMPLES_PER_EPOCH})")
        if not np.isfinite(self.epochs).all():
            raise ValueError("epoch signals must be finite")
        n = len(self.epochs)
        if self.stages is not None:
            self.stages = np.asarray(self.stages, dtype=int)
            if self.stages.shape != (n,):
                raise ValueError(f"stage list length {self.stages.shape} != epoch count {n}")
            if self.stages.size and (self.stages.min() < 0 or self.stages.max() > 4):
                raise ValueError("stage codes must be in 0..4")
        if self.arousal_proportion is not None:
            self.arousal_proportion = np.asarray(self.arousal_proportion, dtype=np.float64)
            if self.arousal_proportion.shape != (n,):
                raise ValueError("arousal proportion length mismatch")
            if self.arousal_proportion.size and (
                self.arousal_proportion.min() < 0 or self.arousal_proportion.max() > 1
            ):
                raise ValueError("arousal proportions must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.epochs)


# ------------------------------------------------------------------ parsing

def _ascii(raw: bytes) -> str:
    return raw.decode("ascii", errors="replace").strip()


def _number(raw: bytes, kind, what: str):
    text = _ascii(raw)
    try:
        return kind(text)
    except ValueError:
        raise EdfParseError(f"non-numeric {what} field: {text!r}") from None


def parse_edf(data: bytes) -> Recording:
    header, specs, signals = _parse_edf_full(data)
    channels = [
        Channel(spec.label, spec.samples_per_record / header.record_duration, sig)
        for spec, sig in zip(specs, signals)
    ]
    return Recording(channels, header.start_datetime)


def parse_edf_header(data: bytes) -> tuple[EdfHeader, list[SignalSpec]]:
    header, specs, _ = _parse_edf_full(data, header_only=True)
    return header, specs


def _parse_edf_full(data: bytes, header_only: bool = False):
    if len(data) < 256:
        raise EdfParseError("truncated file: fixed header incomplete")
    buf = io.BytesIO(data)
    version = _ascii(buf.read(8))
    patient = _ascii(buf.read(80))
    recording_info = _ascii(buf.read(80))
    startdate = _ascii(buf.read(8))
    starttime = _ascii(buf.read(8))
    header_bytes = _number(buf.read(8), int, "header length")
    buf.read(44)
    n_records = _number(buf.read(8), int, "record count")
    record_duration = _number(buf.read(8), float, "record duration")
    n_signals = _number(buf.read(4), int, "signal count")
    if n_signals <= 0:
        raise EdfParseError(f"invalid signal count {n_signals}")
    if header_bytes != 256 * (n_signals + 1):
        raise EdfParseError(
            f"header length {header_bytes} != 256*(n_signals+1) = {256 * (n_signals + 1)}"
        )
    if n_records < 0:
        raise EdfParseError("record count must be nonnegative")
    if record_duration <= 0:
        raise EdfParseError("record duration must be positive")
    try:
        start_dt = datetime.strptime(startdate + " " + starttime, "%d.%m.%y %H.%M.%S")
    except ValueError:
        start_dt = datetime(2000, 1, 1)
    if len(data) < header_bytes:
        raise EdfParseError("truncated file: signal headers incomplete")

    def fields(width):
        return [buf.read(width) for _ in range(n_signals)]

    labels = [_ascii(f) for f in fields(16)]
    transducers = [_ascii(f) for f in fields(80)]
    dims = [_ascii(f) for f in fields(8)]
    phys_min = [_number(f, float, "physical minimum") for f in fields(8)]
    phys_max = [_number(f, float, "physical maximum") for f in fields(8)]
    dig_min = [_number(f, int, "digital minimum") for f in fields(8)]
    dig_max = [_number(f, int, "digital maximum") for f in fields(8)]
    prefilters = [_ascii(f) for f in fields(80)]
    spr = [_number(f, int, "samples per record") for f in fields(8)]
    fields(32)

    specs = [
        SignalSpec(
            label=labels[i], physical_min=phys_min[i], physical_max=phys_max[i],
            digital_min=dig_min[i], digital_max=dig_max[i], samples_per_record=spr[i],
            transducer=transducers[i], physical_dimension=dims[i], prefiltering=prefilters[i],
        )
        for i in range(n_signals)
    ]
    header = EdfHeader(version, patient, recording_info, start_dt, header_bytes,
                       n_records, record_duration, n_signals)
    if header_only:
        return header, specs, None

    record_samples = sum(spr)
    expected = header_bytes + 2 * record_samples * n_records
    if len(data) != expected:
        raise EdfParseError(
            f"data section length mismatch: have {len(data)} bytes, expected {expected}"
        )
    raw = np.frombuffer(data, dtype="<i2", offset=header_bytes)
    raw = raw.reshape(n_records, record_samples)
    signals = []
    offset = 0
    for i, spec in enumerate(specs):
        block = raw[:, offset:offset + spec.samples_per_record].reshape(-1)
        signals.append(spec.to_physical(block.astype(np.float64)))
        offset += spec.samples_per_record
    return header, specs, signals


# ------------------------------------------------------------------ writing

def _fit(text: str, width: int) -> bytes:
    raw = text.encode("ascii", errors="replace")[:width]
    return raw.ljust(width)


def _fit_number(value, width: int) -> bytes:
    if isinstance(value, float) and value == int(value):
        value = int(value)
    text = repr(value)
    if len(text) > width:
        for precision in range(width, 0, -1):
            text = f"{value:.{precision}g}"
            if len(text) <= width:
                break
    if len(text) > width:
        raise ValueError(f"numeric field {value!r} does not fit in {width} chars")
    return _fit(text, width)


def default_specs(recording: Recording) -> list[SignalSpec]:
    """Full-scale symmetric physical ranges, one-second records."""
    specs = []
    for ch in recording.channels:
        if abs(ch.sampling_rate - round(ch.sampling_rate)) > 1e-9:
            raise ValueError(f"channel {ch.label!r}: non-integer rate unsupported by writer")
        limit = max(1e-6, float(np.abs(ch.samples).max()) * 1.001)
        specs.append(SignalSpec(
            label=ch.label, physical_min=-limit, physical_max=limit,
            samples_per_record=int(round(ch.sampling_rate)),
        ))
    return specs


def write_edf(recording: Recording, specs: list[SignalSpec] | None = None,
              record_duration: float = 1.0) -> bytes:
    if not recording.channels:
        raise ValueError("cannot write an EDF with no channels")
    if specs is None:
        specs = default_specs(recording)
    if len(specs) != len(recording.channels):
        raise ValueError("one SignalSpec per channel required")
    n_records = None
    for ch, spec in zip(recording.channels, specs):
        if len(ch.samples) % spec.samples_per_record != 0:
            raise ValueError(
                f"channel {ch.label!r}: length {len(ch.samples)} not a multiple of "
                f"samples_per_record {spec.samples_per_record}"
            )
        records = len(ch.samples) // spec.samples_per_record
        if n_records is None:
            n_records = records
        elif records != n_records:
            raise ValueError("channels cover different numbers of records")

    # quantize against the physical range exactly as serialized in the header,
    # so parse(write(...)) sees the same digital->physical map
    canonical = []
    for spec in specs:
        lo = float(_fit_number(spec.physical_min, 8).decode().strip())
        hi = float(_fit_number(spec.physical_max, 8).decode().strip())
        canonical.append(SignalSpec(
            label=spec.label, physical_min=lo, physical_max=hi,
            digital_min=spec.digital_min, digital_max=spec.digital_max,
            samples_per_record=spec.samples_per_record, transducer=spec.transducer,
            physical_dimension=spec.physical_dimension, prefiltering=spec.prefiltering,
        ))
    specs = canonical

    ns = len(specs)
    out = io.BytesIO()
    start = recording.start_datetime
    out.write(_fit("0", 8))
    out.write(_fit("X X X X", 80))
    out.write(_fit("Startdate X X X X", 80))
    out.write(_fit(start.strftime("%d.%m.%y"), 8))
    out.write(_fit(start.strftime("%H.%M.%S"), 8))
    out.write(_fit_number(256 * (ns + 1), 8))
    out.write(_fit("", 44))
    out.write(_fit_number(n_records, 8))
    out.write(_fit_number(record_duration, 8))
    out.write(_fit_number(ns, 4))
    for getter, width in (
        (lambda s: _fit(s.label, 16), None),
        (lambda s: _fit(s.transducer, 80), None),
        (lambda s: _fit(s.physical_dimension, 8), None),
        (lambda s: _fit_number(s.physical_min, 8), None),
        (lambda s: _fit_number(s.physical_max, 8), None),
        (lambda s: _fit_number(s.digital_min, 8), None),
        (lambda s: _fit_number(s.digital_max, 8), None),
        (lambda s: _fit(s.prefiltering, 80), None),
        (lambda s: _fit_number(s.samples_per_record, 8), None),
        (lambda s: _fit("", 32), None),
    ):
        for spec in specs:
            out.write(getter(spec))

    digital = [spec.to_digital(ch.samples) for ch, spec in zip(recording.channels, specs)]
    record = np.empty(sum(s.samples_per_record for s in specs), dtype="<i2")
    for r in range(n_records):
        offset = 0
        for d, spec in zip(digital, specs):
            k = spec.samples_per_record
            record[offset:offset + k] = d[r * k:(r + 1) * k]
            offset += k
        out.write(record.tobytes())
    return out.getvalue()


# ---------------------------------------------------------------- selection

def select_channels(recording: Recording, channel_map: ChannelMap | None = None) -> Recording:
    """Reorder to the canonical EEG, EOG, EMG, ECG order; first match wins."""
    channel_map = channel_map or ChannelMap()
    chosen = []
    for role, pattern in channel_map.patterns():
        match = next(
            (ch for ch in recording.channels if pattern.lower() in ch.label.lower()), None
        )
        if match is None:
            raise ValueError(
                f"missing channel: no label matches {pattern!r} for role {role} "
                f"(have {recording.labels()})"
            )
        chosen.append(match)
    return Recording(chosen, recording.start_datetime)


# --------------------------------------------------------------- resampling

ANTI_ALIAS_TAPS = 63


def _lowpass_taps(cutoff_fraction: float, n_taps: int = ANTI_ALIAS_TAPS) -> np.ndarray:
    """Hamming-windowed sinc, unit DC gain."""
    m = np.arange(n_taps) - (n_taps - 1) / 2
    h = np.sinc(2 * cutoff_fraction * m)
    h *= np.hamming(n_taps)
    return h / h.sum()


def resample(samples, src_rate: float, dst_rate: float = TARGET_RATE) -> np.ndarray:
    """Rate conversion to `dst_rate`; windowed-sinc anti-aliasing on the way down."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot resample an empty sequence")
    if src_rate <= 0 or dst_rate <= 0:
        raise ValueError("rates must be positive")
    if src_rate == dst_rate:
        return x.copy()
    mean = x.mean()
    y = x - mean
    if dst_rate < src_rate:
        taps = _lowpass_taps(0.45 * dst_rate / src_rate)
        pad = ANTI_ALIAS_TAPS // 2
        padded = np.concatenate([np.full(pad, y[0]), y, np.full(pad, y[-1])])
        y = np.convolve(padded, taps, mode="valid")
    n_out = int(round(x.size * dst_rate / src_rate))
    positions = np.arange(n_out) * (src_rate / dst_rate)
    return mean + np.interp(positions, np.arange(x.size), y)


# --------------------------------------------------------------- segmenting

def arousal_proportion(events: ArousalEvents | None, epoch_index: int,
                       epoch_seconds: float = EPOCH_SECONDS) -> float:
    """Fraction of epoch `epoch_index` covered by arousal events."""
    if epoch_index < 0:
        raise ValueError("epoch index must be nonnegative")
    if events is None or not events.events:
        return 0.0
    lo = epoch_index * epoch_seconds
    hi = lo + epoch_seconds
    overlap = 0.0
    for start, duration in events.events:
        overlap += max(0.0, min(hi, start + duration) - max(lo, start))
    return min(1.0, overlap / epoch_seconds)


def segment_epochs(recording: Recording, stages=None,
                   arousals: ArousalEvents | None = None) -> EpochGrid:
    """Split a 4-channel 100 Hz recording into 30 s epochs, dropping the tail."""
    if len(recording.channels) != 4:
        raise ValueError(f"expected 4 channels, got {len(recording.channels)}")
    lengths = {len(ch.samples) for ch in recording.channels}
    if len(lengths) != 1:
        raise ValueError(f"channel length mismatch: {sorted(lengths)}")
    for ch in recording.channels:
        if abs(ch.sampling_rate - TARGET_RATE) > 1e-6:
            raise ValueError(f"channel {ch.label!r} not at {TARGET_RATE:g} Hz")
    n_samples = lengths.pop()
    n_epochs = n_samples // SAMPLES_PER_EPOCH
    data = np.stack([ch.samples[: n_epochs * SAMPLES_PER_EPOCH] for ch in recording.channels])
    epochs = data.reshape(4, n_epochs, SAMPLES_PER_EPOCH).transpose(1, 0, 2)
    props = None
    if arousals is not None:
        props = np.array([arousal_proportion(arousals, i) for i in range(n_epochs)])
    return EpochGrid(epochs, stages=stages, arousal_proportion=props)


# -------------------------------------------------------------- annotations

def _parse_stage(token) -> int:
    text = str(token).strip()
    if text.upper() in STAGE_NAMES:
        return STAGE_NAMES[text.upper()]
    try:
        code = int(text)
    except ValueError:
        raise ValueError(f"unknown stage label {token!r}") from None
    if code not in (0, 1, 2, 3, 4):
        raise ValueError(f"stage code {code} outside 0..4")
    return code


def load_annotations_json(path) -> tuple[np.ndarray | None, ArousalEvents | None]:
    doc = json.loads(Path(path).read_text())
    stages = None
    arousals = None
    if "stages" in doc:
        stages = np.array([_parse_stage(s) for s in doc["stages"]], dtype=int)
    if "arousals" in doc:
        arousals = ArousalEvents([(float(a["start"]), float(a["duration"])) for a in doc["arousals"]])
    return stages, arousals


def load_stages_csv(path) -> np.ndarray:
    rows = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            rows[int(row["epoch_index"])] = _parse_stage(row["stage"])
    if sorted(rows) != list(range(len(rows))):
        raise ValueError("stage CSV epoch indices must be contiguous from 0")
    return np.array([rows[i] for i in range(len(rows))], dtype=int)


def load_arousals_csv(path) -> ArousalEvents:
    events = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            events.append((float(row["arousal_start_sec"]), float(row["arousal_duration_sec"])))
    return ArousalEvents(events)


def load_annotations(path) -> tuple[np.ndarray | None, ArousalEvents | None]:
    path = Path(path)
    if path.suffix.lower() == ".json":
        return load_annotations_json(path)
    return load_stages_csv(path), None


# ----------------------------------------------------------------- pipeline

def load_night(edf_path, annotations_path=None,
               channel_map: ChannelMap | None = None) -> EpochGrid:
    """EDF file + optional sidecar -> labeled EpochGrid at 100 Hz."""
    recording = parse_edf(Path(edf_path).read_bytes())
    selected = select_channels(recording, channel_map)
    resampled = Recording(
        [Channel(ch.label, TARGET_RATE, resample(ch.samples, ch.sampling_rate, TARGET_RATE))
         for ch in selected.channels],
        selected.start_datetime,
    )
    stages = arousals = None
    if annotations_path is not None:
        stages, arousals = load_annotations(annotations_path)
    grid = segment_epochs(resampled, stages=None, arousals=arousals)
    if stages is not None:
        if len(stages) != len(grid):
            raise ValueError(f"stage list length {len(stages)} != epoch count {len(grid)}")
        grid = EpochGrid(grid.epochs, stages=stages, arousal_proportion=grid.arousal_proportion)
    return grid
