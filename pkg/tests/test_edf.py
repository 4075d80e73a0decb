import json
import math

import numpy as np
import pytest

from sleepdepth import edf
from sleepdepth.edf import (
    ArousalEvents,
    Channel,
    ChannelMap,
    EdfParseError,
    EpochGrid,
    Recording,
    SignalSpec,
    arousal_proportion,
    parse_edf,
    parse_edf_header,
    resample,
    segment_epochs,
    select_channels,
    write_edf,
)


def build_edf_bytes(n_signals=1, n_records=1, spr=3, dig=(-32768, 32767),
                    phys=(-1.0, 1.0), samples=None, header_bytes=None,
                    n_records_field=None, duration="1"):
    """Hand-rolled EDF byte stream, independent of write_edf."""
    def pad(text, width):
        return str(text).encode("ascii").ljust(width)

    hb = header_bytes if header_bytes is not None else 256 * (n_signals + 1)
    head = b"".join([
        pad("0", 8), pad("X", 80), pad("X", 80),
        pad("01.01.20", 8), pad("22.30.00", 8),
        pad(hb, 8), pad("", 44),
        pad(n_records_field if n_records_field is not None else n_records, 8),
        pad(duration, 8), pad(n_signals, 4),
    ])
    sig = b"".join([
        b"".join(pad(f"sig{i}", 16) for i in range(n_signals)),
        b"".join(pad("", 80) for _ in range(n_signals)),
        b"".join(pad("uV", 8) for _ in range(n_signals)),
        b"".join(pad(phys[0], 8) for _ in range(n_signals)),
        b"".join(pad(phys[1], 8) for _ in range(n_signals)),
        b"".join(pad(dig[0], 8) for _ in range(n_signals)),
        b"".join(pad(dig[1], 8) for _ in range(n_signals)),
        b"".join(pad("", 80) for _ in range(n_signals)),
        b"".join(pad(spr, 8) for _ in range(n_signals)),
        b"".join(pad("", 32) for _ in range(n_signals)),
    ])
    if samples is None:
        samples = np.zeros(n_signals * spr * n_records, dtype="<i2")
    return head + sig + np.asarray(samples, dtype="<i2").tobytes()


# ------------------------------------------------------------------ parsing

def test_parse_digital_zero_maps_near_physical_zero():
    rec = parse_edf(build_edf_bytes())
    step = 2.0 / 65535
    assert len(rec.channels) == 1
    assert np.all(np.abs(rec.channels[0].samples) <= step)


def test_parse_reads_signal_count():
    rec = parse_edf(build_edf_bytes(n_signals=4))
    assert len(rec.channels) == 4


def test_parse_channel_rate_from_record_duration():
    rec = parse_edf(build_edf_bytes(spr=30, duration="2"))
    assert rec.channels[0].sampling_rate == 15.0


def test_parse_truncated_data_section():
    data = build_edf_bytes(spr=10)
    with pytest.raises(EdfParseError, match="data section length mismatch"):
        parse_edf(data[:-5])


def test_parse_header_bytes_mismatch():
    with pytest.raises(EdfParseError, match="256"):
        parse_edf(build_edf_bytes(header_bytes=999))


def test_parse_non_numeric_field():
    with pytest.raises(EdfParseError, match="non-numeric"):
        parse_edf(build_edf_bytes(n_records_field="abc"))


def test_parse_truncated_header():
    with pytest.raises(EdfParseError, match="truncated"):
        parse_edf(build_edf_bytes()[:100])


def test_parse_header_fields():
    header, specs = parse_edf_header(build_edf_bytes(n_signals=2, spr=5))
    assert header.n_signals == 2
    assert header.header_bytes == 768
    assert header.start_datetime.hour == 22
    assert specs[0].samples_per_record == 5
    assert specs[1].physical_dimension == "uV"


# ------------------------------------------------------------------ writing

def make_recording(seed=0, n=200, rates=(100, 100)):
    rng = np.random.default_rng(seed)
    channels = [
        Channel(f"ch{i}", rate, rng.normal(scale=40.0, size=n))
        for i, rate in enumerate(rates)
    ]
    return Recording(channels)


def test_write_parse_roundtrip_two_channels():
    rec = make_recording()
    specs = edf.default_specs(rec)
    once = parse_edf(write_edf(rec, specs))
    twice = parse_edf(write_edf(once, specs))
    for a, b in zip(once.channels, twice.channels):
        assert np.array_equal(a.samples, b.samples)  # quantization is idempotent


def test_roundtrip_within_one_quantization_step():
    for seed in range(5):
        rec = make_recording(seed=seed, n=300)
        back = parse_edf(write_edf(rec))
        for orig, decoded in zip(rec.channels, back.channels):
            spec_gain = (2 * np.abs(orig.samples).max() * 1.001) / 65535
            assert np.max(np.abs(orig.samples - decoded.samples)) <= spec_gain


def test_write_empty_channel_list():
    with pytest.raises(ValueError):
        write_edf(Recording([]))


def test_write_rejects_out_of_range_values():
    rec = Recording([Channel("a", 100, np.linspace(-2, 2, 100))])
    spec = SignalSpec(label="a", physical_min=-1, physical_max=1, samples_per_record=100)
    with pytest.raises(ValueError, match="physical range"):
        write_edf(rec, [spec])


def test_quantization_error_bound():
    rec = Recording([Channel("a", 100, np.full(100, 0.5))])
    spec = SignalSpec(label="a", physical_min=-1, physical_max=1, samples_per_record=100)
    decoded = parse_edf(write_edf(rec, [spec])).channels[0].samples
    assert np.max(np.abs(decoded - 0.5)) <= 2.0 / 65535


# ---------------------------------------------------------------- selection

def test_select_channels_canonical_order():
    rec = Recording([
        Channel("ECG", 100, np.ones(10)),
        Channel("EMG Chin", 100, np.ones(10)),
        Channel("EEG C4-M1", 100, np.ones(10)),
        Channel("EOG R", 100, np.ones(10)),
    ])
    out = select_channels(rec)
    assert out.labels() == ["EEG C4-M1", "EOG R", "EMG Chin", "ECG"]


def test_select_case_insensitive_substring():
    rec = Recording([
        Channel("eeg c4-a1", 100, np.ones(10)),
        Channel("loc", 100, np.ones(10)),
        Channel("chin emg", 100, np.ones(10)),
        Channel("ekg ii", 100, np.ones(10)),
    ])
    cmap = ChannelMap(eeg_label="C4", eog_label="LOC", emg_label="EMG", ecg_label="EKG")
    assert select_channels(rec, cmap).labels()[0] == "eeg c4-a1"


def test_select_missing_channel_names_role():
    rec = Recording([
        Channel("EEG", 100, np.ones(10)),
        Channel("EOG", 100, np.ones(10)),
        Channel("EMG", 100, np.ones(10)),
    ])
    with pytest.raises(ValueError, match="ECG"):
        select_channels(rec)


def test_channel_map_rejects_empty_pattern():
    with pytest.raises(ValueError):
        ChannelMap(ecg_label="")


# --------------------------------------------------------------- resampling

def test_resample_constant_preserved_exactly():
    for src, dst in ((200, 100), (100, 128), (50, 100)):
        out = resample(np.full(400, 3.0), src, dst)
        assert out.size == round(400 * dst / src)
        assert np.all(out == 3.0)


def test_resample_identity_at_equal_rates():
    x = np.random.default_rng(0).normal(size=256)
    assert np.array_equal(resample(x, 100, 100), x)


def test_resample_sinusoid_amplitude():
    t = np.arange(0, 4, 1 / 200)
    x = np.sin(2 * np.pi * 1.0 * t)
    out = resample(x, 200, 100)
    dense = np.sin(2 * np.pi * 1.0 * np.arange(out.size) / 100)
    # compare against the analytic signal away from filter edge effects
    core = slice(40, -40)
    assert out.size == 400
    assert np.max(np.abs(out[core] - dense[core])) < 0.01


def test_resample_empty_input():
    with pytest.raises(ValueError):
        resample(np.array([]), 200, 100)


def test_resample_length_rule():
    assert resample(np.ones(95), 10, 3).size == round(95 * 0.3)


# --------------------------------------------------------------- segmenting

def four_channel_recording(n_samples):
    return Recording([Channel(role, 100.0, np.random.default_rng(1).normal(size=n_samples))
                      for role in ("EEG", "EOG", "EMG", "ECG")])


def test_segment_ten_minutes_gives_twenty_epochs():
    grid = segment_epochs(four_channel_recording(60000))
    assert len(grid) == 20


def test_segment_discards_partial_tail():
    grid = segment_epochs(four_channel_recording(9500))  # 95 s
    assert len(grid) == 3


def test_segment_epoch_count_floor_property():
    for n in (3000, 3001, 5999, 6000, 12345):
        assert len(segment_epochs(four_channel_recording(n))) == n // 3000


def test_segment_stage_length_mismatch():
    rec = four_channel_recording(9000)
    with pytest.raises(ValueError, match="length"):
        segment_epochs(rec, stages=[0, 1])


def test_segment_channel_length_mismatch():
    rec = four_channel_recording(6000)
    rec.channels[2] = Channel("EMG", 100.0, np.ones(5000))
    with pytest.raises(ValueError, match="mismatch"):
        segment_epochs(rec)


def test_segment_requires_100hz():
    rec = four_channel_recording(6000)
    rec.channels[0] = Channel("EEG", 128.0, np.ones(6000))
    with pytest.raises(ValueError, match="Hz"):
        segment_epochs(rec)


# ------------------------------------------------------ arousal proportions

def test_arousal_proportion_half_overlap():
    events = ArousalEvents([(45.0, 30.0)])
    assert arousal_proportion(events, 1) == 0.5


def test_arousal_proportion_no_events():
    assert arousal_proportion(ArousalEvents([]), 3) == 0.0
    assert arousal_proportion(None, 0) == 0.0


def test_arousal_proportion_full_epoch():
    assert arousal_proportion(ArousalEvents([(30.0, 30.0)]), 1) == 1.0


def test_arousal_proportion_sum_bound():
    rng = np.random.default_rng(9)
    events = ArousalEvents([(float(rng.uniform(0, 270)), float(rng.uniform(1, 20)))
                            for _ in range(12)])
    total = sum(d for _, d in events.events)
    prop_sum = sum(arousal_proportion(events, i) * 30.0 for i in range(10))
    assert prop_sum <= total + 1e-9


def test_arousal_proportion_equality_for_contained_events():
    events = ArousalEvents([(31.0, 5.0), (90.0, 10.0)])
    prop_sum = sum(arousal_proportion(events, i) * 30.0 for i in range(5))
    assert abs(prop_sum - 15.0) < 1e-12


def test_arousal_events_validation():
    with pytest.raises(ValueError):
        ArousalEvents([(-1.0, 5.0)])
    with pytest.raises(ValueError):
        ArousalEvents([(10.0, 0.0)])


# -------------------------------------------------------------- annotations

def test_json_annotations_roundtrip(tmp_path):
    doc = {"stages": ["W", 1, "N2", "R"], "arousals": [{"start": 31.5, "duration": 4.0}]}
    p = tmp_path / "night.json"
    p.write_text(json.dumps(doc))
    stages, arousals = edf.load_annotations(p)
    assert stages.tolist() == [0, 1, 2, 4]
    assert arousals.events == [(31.5, 4.0)]


def test_csv_stage_annotations(tmp_path):
    p = tmp_path / "stages.csv"
    p.write_text("epoch_index,stage\n0,W\n1,N3\n2,2\n")
    assert edf.load_stages_csv(p).tolist() == [0, 3, 2]


def test_csv_arousal_annotations(tmp_path):
    p = tmp_path / "arousals.csv"
    p.write_text("arousal_start_sec,arousal_duration_sec\n12.0,3.5\n")
    assert edf.load_arousals_csv(p).events == [(12.0, 3.5)]


def test_epoch_grid_validation():
    good = np.zeros((2, 4, 3000))
    EpochGrid(good)
    with pytest.raises(ValueError):
        EpochGrid(np.zeros((2, 3, 3000)))
    with pytest.raises(ValueError):
        EpochGrid(good, stages=[0, 9])
    with pytest.raises(ValueError):
        EpochGrid(good, arousal_proportion=[0.5, 1.5])
    bad = good.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        EpochGrid(bad)
