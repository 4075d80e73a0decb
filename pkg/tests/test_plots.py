import numpy as np
import pytest

from sleepdepth.annotate import SdiNight
from sleepdepth.plots import binned_correlation_svg, night_svg
from sleepdepth.stats import decile_arousal_analysis


def demo_night(n=40, seed=0, staged=True, arousals=True):
    rng = np.random.default_rng(seed)
    return SdiNight(
        rng.uniform(0.05, 0.95, size=n),
        rng.uniform(size=n),
        stages=rng.integers(0, 5, size=n) if staged else None,
        arousal_prop=rng.uniform(0, 0.8, size=n) if arousals else None,
    )


def test_night_svg_has_expected_panels():
    svg = night_svg(demo_night(), title="demo")
    assert svg.startswith("<svg ") and svg.rstrip().endswith("</svg>")
    assert "Hypnogram" in svg
    assert "Sleep depth index" in svg
    assert "TST:" in svg and "SE:" in svg and "AUC:" in svg and "AP:" in svg
    assert svg.count("<polyline") >= 2  # hypnogram + sdi curve
    assert "rgb(" in svg  # arousal shading rectangles


def test_night_svg_shading_darkness_scales_with_proportion():
    light = SdiNight([0.5] * 4, [0.1] * 4, arousal_prop=[0, 0.1, 0, 0])
    dark = SdiNight([0.5] * 4, [0.1] * 4, arousal_prop=[0, 0.9, 0, 0])
    grey = lambda svg: min(int(s.split(",")[0]) for s in svg.split("rgb(")[1:])
    assert grey(night_svg(dark)) < grey(night_svg(light))


def test_night_svg_without_labels_skips_hypnogram():
    svg = night_svg(demo_night(staged=False, arousals=False))
    assert "Hypnogram" not in svg
    assert "rgb(" not in svg
    assert "Sleep depth index" in svg


def test_night_svg_deterministic():
    assert night_svg(demo_night(seed=3)) == night_svg(demo_night(seed=3))


def test_night_svg_too_short():
    with pytest.raises(ValueError):
        night_svg(SdiNight([0.5], [0.5]))


def test_binned_correlation_svg():
    rng = np.random.default_rng(4)
    d = rng.uniform(0, 1, 5000)
    binned = decile_arousal_analysis(d, 0.7 * d + rng.normal(0, 0.05, 5000))
    svg = binned_correlation_svg(binned, title="arousal")
    assert svg.startswith("<svg ")
    assert svg.count("<circle") == int(binned.nonempty().sum())
    assert "slope" in svg
