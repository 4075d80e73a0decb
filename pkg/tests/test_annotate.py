import numpy as np
import pytest

from sleepdepth.annotate import (
    SdiNight,
    annotate_night,
    depth_decrease,
    night_from_csv,
    night_to_csv,
)
from sleepdepth.model import ModelConfig, SleepDepthModel
from sleepdepth.synth import SynthProfile, gen_night

TINY = ModelConfig(samples_per_epoch=300, patch_size=100, embed_dim=16,
                   depth=1, n_heads=2, mlp_dim=32)


def tiny_grid(n=6, seed=0):
    rng = np.random.default_rng(seed)

    class Grid:
        epochs = rng.normal(size=(n, 4, 300))
        stages = rng.integers(0, 5, size=n)
        arousal_proportion = rng.uniform(0, 0.4, size=n)

        def __len__(self):
            return n

    return Grid()


def test_zero_weight_model_gives_half():
    model = SleepDepthModel(TINY, seed=0)
    model.zero_weights()
    night = annotate_night(tiny_grid(), model)
    assert np.allclose(night.sdi, 0.5)
    assert np.allclose(night.rem_prob, 0.5)


def test_outputs_strictly_inside_unit_interval():
    night = annotate_night(tiny_grid(10, seed=1), SleepDepthModel(TINY, seed=1))
    assert np.all((night.sdi > 0) & (night.sdi < 1))
    assert np.all((night.rem_prob > 0) & (night.rem_prob < 1))


def test_annotation_deterministic_and_batch_invariant():
    grid = tiny_grid(9, seed=2)
    model = SleepDepthModel(TINY, seed=2)
    a = annotate_night(grid, model)
    b = annotate_night(grid, model)
    assert np.array_equal(a.sdi, b.sdi) and np.array_equal(a.rem_prob, b.rem_prob)
    c = annotate_night(grid, model, batch_size=4)
    assert np.allclose(a.sdi, c.sdi, atol=1e-9)


def test_sigmoid_preserves_raw_ordering():
    grid = tiny_grid(12, seed=3)
    model = SleepDepthModel(TINY, seed=3)
    raw, _ = model.forward(grid.epochs)
    night = annotate_night(grid, model)
    assert np.array_equal(np.argsort(raw.data, kind="stable"),
                          np.argsort(night.sdi, kind="stable"))


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="match model"):
        annotate_night(tiny_grid(), SleepDepthModel(ModelConfig(), seed=0))


def test_annotate_real_synth_night():
    night_data = gen_night(SynthProfile(n_epochs=8, seed=4))
    model = SleepDepthModel(ModelConfig(), seed=0)
    night = annotate_night(night_data.grid(), model)
    assert night.n_epochs == 8
    assert np.array_equal(night.stages, night_data.stages)
    assert np.allclose(night.arousal_prop, night_data.arousal_props)


# ----------------------------------------------------------- depth decrease

def test_depth_decrease_hand_example():
    night = SdiNight([0.8, 0.3], [0.1, 0.1])
    assert np.allclose(depth_decrease(night), [0.5])


def test_depth_decrease_signs():
    inc = SdiNight(np.linspace(0.1, 0.9, 6), np.zeros(6))
    assert np.all(depth_decrease(inc) < 0)
    const = SdiNight(np.full(5, 0.4), np.zeros(5))
    assert np.all(depth_decrease(const) == 0)


def test_depth_decrease_telescopes():
    rng = np.random.default_rng(5)
    sdi = rng.uniform(size=50)
    night = SdiNight(sdi, np.zeros(50))
    d = depth_decrease(night)
    assert len(d) == 49
    assert np.all(np.abs(d) <= 1)
    assert abs(d.sum() - (sdi[0] - sdi[-1])) < 1e-12


def test_depth_decrease_single_epoch_errors():
    with pytest.raises(ValueError):
        depth_decrease(SdiNight([0.5], [0.5]))


# -------------------------------------------------------------------- types

def test_sdi_night_validation():
    with pytest.raises(ValueError):
        SdiNight([0.5, 1.2], [0.5, 0.5])
    with pytest.raises(ValueError):
        SdiNight([0.5, 0.5], [0.5])
    with pytest.raises(ValueError):
        SdiNight([0.5, 0.5], [0.5, 0.5], stages=[1])


def test_rem_labels_threshold():
    night = SdiNight([0.5] * 3, [0.49, 0.5, 0.9])
    assert night.rem_labels().tolist() == [0, 1, 1]
    assert night.rem_labels(threshold=0.95).tolist() == [0, 0, 0]


# ---------------------------------------------------------------------- csv

def test_csv_roundtrip_exact():
    rng = np.random.default_rng(6)
    night = SdiNight(rng.uniform(size=7), rng.uniform(size=7),
                     stages=rng.integers(0, 5, size=7),
                     arousal_prop=rng.uniform(0, 1, size=7))
    text = night_to_csv(night)
    assert text.splitlines()[0] == "epoch,sdi,rem_prob,stage_label,arousal_prop"
    back = night_from_csv(text)
    assert np.array_equal(back.sdi, night.sdi)
    assert np.array_equal(back.rem_prob, night.rem_prob)
    assert np.array_equal(back.stages, night.stages)
    assert np.array_equal(back.arousal_prop, night.arousal_prop)


def test_csv_optional_columns_absent():
    night = SdiNight([0.25, 0.75], [0.1, 0.9])
    text = night_to_csv(night)
    assert text.splitlines()[0] == "epoch,sdi,rem_prob"
    back = night_from_csv(text)
    assert back.stages is None and back.arousal_prop is None


def test_csv_rejects_garbage():
    with pytest.raises(ValueError):
        night_from_csv("a,b,c\n1,2,3\n")
