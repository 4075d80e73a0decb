import numpy as np
import pytest

from sleepdepth import synth
from sleepdepth.edf import SAMPLES_PER_EPOCH
from sleepdepth.synth import Cohort, SynthProfile, gen_cohort, gen_night


def band_power(x, lo_hz, hi_hz, rate=100.0):
    """Independent oracle: periodogram power in [lo_hz, hi_hz)."""
    spec = np.abs(np.fft.rfft(x - x.mean())) ** 2
    freqs = np.fft.rfftfreq(len(x), d=1.0 / rate)
    sel = (freqs >= lo_hz) & (freqs < hi_hz)
    return spec[sel].sum() / len(x)


def test_same_seed_bit_identical():
    a = gen_night(SynthProfile(n_epochs=20, seed=123))
    b = gen_night(SynthProfile(n_epochs=20, seed=123))
    assert np.array_equal(a.stages, b.stages)
    assert a.arousals.events == b.arousals.events
    for ca, cb in zip(a.recording.channels, b.recording.channels):
        assert np.array_equal(ca.samples, cb.samples)


def test_different_seeds_differ():
    a = gen_night(SynthProfile(n_epochs=20, seed=1))
    b = gen_night(SynthProfile(n_epochs=20, seed=2))
    assert not np.array_equal(a.recording.channels[0].samples,
                              b.recording.channels[0].samples)


def test_shapes_and_grid():
    night = gen_night(SynthProfile(n_epochs=16, seed=5))
    assert night.stages.shape == (16,)
    for ch in night.recording.channels:
        assert ch.samples.shape == (16 * SAMPLES_PER_EPOCH,)
        assert ch.sampling_rate == 100.0
    grid = night.grid()
    assert grid.epochs.shape == (16, 4, SAMPLES_PER_EPOCH)
    assert np.array_equal(grid.stages, night.stages)
    # grid epochs are views of the concatenated channels in order
    assert np.array_equal(grid.epochs[3, 0],
                          night.recording.channels[0].samples[3 * 3000:4 * 3000])


def test_depth_monotone_in_stage():
    for seed in range(5):
        night = gen_night(SynthProfile(n_epochs=240, seed=seed))
        means = {}
        for s in range(4):
            sel = night.stages == s
            if sel.sum() >= 3:
                means[s] = night.latent_depth[sel].mean()
        keys = sorted(means)
        for a, b in zip(keys, keys[1:]):
            assert means[a] < means[b]


def test_eeg_delta_beta_ratio_tracks_depth():
    night = gen_night(SynthProfile(n_epochs=240, seed=7))
    eeg = night.recording.channels[0].samples.reshape(-1, SAMPLES_PER_EPOCH)
    deep = night.effective_depth > 0.7
    light = night.effective_depth < 0.15
    assert deep.sum() >= 5 and light.sum() >= 5

    def ratio(idx):
        d = band_power(eeg[idx], 0.5, 4.0)
        b = band_power(eeg[idx], 13.0, 31.0)
        return d / b

    deep_ratios = [ratio(i) for i in np.flatnonzero(deep)]
    light_ratios = [ratio(i) for i in np.flatnonzero(light)]
    assert np.median(deep_ratios) > 10 * np.median(light_ratios)


def test_rem_eog_slow_wave_power():
    night = gen_night(SynthProfile(n_epochs=240, seed=9))
    eog = night.recording.channels[1].samples.reshape(-1, SAMPLES_PER_EPOCH)
    rem = np.flatnonzero(night.stages == 4)
    nrem = np.flatnonzero((night.stages > 0) & (night.stages < 4))
    assert len(rem) >= 5 and len(nrem) >= 5
    rem_p = np.median([band_power(eog[i], 0.2, 0.6) for i in rem])
    nrem_p = np.median([band_power(eog[i], 0.2, 0.6) for i in nrem])
    assert rem_p > 20 * nrem_p


def test_arousals_only_in_sleep_and_contained():
    for seed in range(5):
        night = gen_night(SynthProfile(n_epochs=120, seed=seed, arousal_rate_per_hour=60.0))
        for start, duration in night.arousals.events:
            i = int(start // 30.0)
            assert night.stages[i] != 0
            assert start + duration <= (i + 1) * 30.0 + 1e-9


def test_arousals_depress_effective_depth():
    night = gen_night(SynthProfile(n_epochs=240, seed=3, arousal_rate_per_hour=60.0))
    hit = night.arousal_props > 0
    assert hit.sum() >= 5
    assert np.all(night.effective_depth[hit] < night.latent_depth[hit])
    assert np.allclose(night.effective_depth[~hit], night.latent_depth[~hit])
    # depression is proportional to overlap
    expect = night.latent_depth * (1 - 0.85 * night.arousal_props)
    assert np.allclose(night.effective_depth, np.clip(expect, 0, 1))


def test_invalid_profiles_rejected():
    with pytest.raises(ValueError):
        SynthProfile(transitions=np.ones((5, 5)))
    with pytest.raises(ValueError):
        SynthProfile(n_epochs=0)
    with pytest.raises(ValueError):
        SynthProfile(depth_ranges={0: (0.2, 0.1), 1: (0.1, 0.35),
                                   2: (0.3, 0.7), 3: (0.7, 1.0), 4: (0.2, 0.6)})


# ------------------------------------------------------------------- cohort

def test_cohort_determinism_and_fields():
    a = gen_cohort(10, 0.3, seed=11, n_epochs=8)
    b = gen_cohort(10, 0.3, seed=11, n_epochs=8)
    assert isinstance(a, Cohort) and len(a.subjects) == 10
    for sa, sb in zip(a.subjects, b.subjects):
        assert sa == sb
    for na, nb in zip(a.nights, b.nights):
        assert np.array_equal(na.recording.channels[0].samples,
                              nb.recording.channels[0].samples)
    assert a.planted["odds_ratio"] == 1.6


def test_cohort_fraction_extremes():
    all_normal = gen_cohort(30, 0.0, seed=0, signals=False)
    assert all_normal.nights is None
    assert not any(s.disturbed for s in all_normal.subjects)
    all_dist = gen_cohort(30, 1.0, seed=0, signals=False)
    assert all(s.disturbed for s in all_dist.subjects)


def test_cohort_disturbed_nights_more_fragmented():
    cohort = gen_cohort(30, 0.5, seed=21, n_epochs=120)
    dist = [n for n, s in zip(cohort.nights, cohort.subjects) if s.disturbed]
    norm = [n for n, s in zip(cohort.nights, cohort.subjects) if not s.disturbed]
    assert len(dist) >= 5 and len(norm) >= 5
    dist_props = np.mean([n.arousal_props.mean() for n in dist])
    norm_props = np.mean([n.arousal_props.mean() for n in norm])
    assert dist_props > 2 * norm_props
    dist_depth = np.mean([n.latent_depth.mean() for n in dist])
    norm_depth = np.mean([n.latent_depth.mean() for n in norm])
    assert dist_depth < norm_depth


def test_cohort_planted_outcome_enrichment():
    cohort = gen_cohort(2000, 0.5, seed=33, signals=False, planted_or=3.0)
    d = np.array([s.disturbed for s in cohort.subjects])
    y = np.array([s.outcome for s in cohort.subjects])
    a, b = y[d].mean(), y[~d].mean()
    emp_or = (a / (1 - a)) / (b / (1 - b))
    assert 2.0 < emp_or < 4.5


def test_cohort_survival_sane():
    cohort = gen_cohort(200, 0.5, seed=44, signals=False)
    for s in cohort.subjects:
        assert s.time_days >= 1.0
        assert s.event in (0, 1)
    events = np.mean([s.event for s in cohort.subjects])
    assert 0.1 < events < 0.9


def test_cohort_too_small():
    with pytest.raises(ValueError):
        gen_cohort(1, 0.5, seed=0)


# ------------------------------------------------------------ file emission

def test_night_file_roundtrip(tmp_path):
    from sleepdepth.edf import load_night
    from sleepdepth.synth import write_night_files

    night = gen_night(SynthProfile(n_epochs=6, seed=1))
    write_night_files(night, tmp_path / "n.edf", tmp_path / "n.json",
                      tmp_path / "n.truth.json")
    grid = load_night(tmp_path / "n.edf", tmp_path / "n.json")
    assert len(grid) == 6
    assert np.array_equal(grid.stages, night.stages)
    assert np.allclose(grid.arousal_proportion, night.arousal_props)
    # 16-bit quantization over the full signal range
    assert np.abs(grid.epochs - night.grid().epochs).max() < 1e-3


def test_cohort_emission_and_subject_table(tmp_path):
    import json

    from sleepdepth.synth import parse_subjects_csv, write_cohort

    cohort = gen_cohort(3, 0.5, seed=2, n_epochs=4)
    ids = write_cohort(cohort, tmp_path)
    assert ids == [s.subject_id for s in cohort.subjects]
    for stem in ids:
        assert (tmp_path / f"{stem}.edf").exists()
        assert (tmp_path / f"{stem}.json").exists()
        truth = json.loads((tmp_path / f"{stem}.truth.json").read_text())
        assert len(truth["latent_depth"]) == 4
    back = parse_subjects_csv((tmp_path / "subjects.csv").read_text())
    assert back == cohort.subjects
    planted = json.loads((tmp_path / "planted.json").read_text())
    assert planted == cohort.planted
