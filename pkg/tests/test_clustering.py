import numpy as np
import pytest

from sleepdepth.clustering import (
    RB_INDEX,
    GmmModel,
    assign_subtypes,
    assignment_csv,
    fit_gmm,
    impute_missing,
)


def two_blobs(n=200, sep=6.0, seed=0, d=8):
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, 1.0, size=(n, d))
    b = rng.normal(sep, 1.0, size=(n, d))
    X = np.vstack([a, b])
    truth = np.r_[np.zeros(n, dtype=int), np.ones(n, dtype=int)]
    return X, truth


def test_two_blob_recovery():
    X, truth = two_blobs()
    model = fit_gmm(X, seed=1)
    assignment = assign_subtypes(model, X)
    hard = (assignment.posterior_disturbed >= 0.5).astype(int)
    acc = max((hard == truth).mean(), (hard == 1 - truth).mean())
    assert acc >= 0.99


def test_log_likelihood_nondecreasing():
    X, _ = two_blobs(n=100, sep=3.0, seed=2)
    model = fit_gmm(X, seed=0)
    ll = np.array(model.log_likelihoods)
    assert len(ll) >= 2
    assert np.all(np.diff(ll) >= -1e-8)


def test_degenerate_duplicates_regularized():
    rng = np.random.default_rng(3)
    X = np.vstack([np.tile(rng.normal(size=8), (30, 1)),
                   rng.normal(5.0, 1.0, size=(30, 8))])
    model = fit_gmm(X, seed=0)  # duplicate block needs the covariance ridge
    for cov in model.covariances:
        np.linalg.cholesky(cov)  # still positive definite


def test_validation_errors():
    with pytest.raises(ValueError):
        fit_gmm(np.zeros((5, 8)))
    with pytest.raises(ValueError):
        fit_gmm(np.tile(np.arange(8.0), (20, 1)))


def test_seeded_determinism():
    X, _ = two_blobs(n=80, sep=4.0, seed=4)
    m1, m2 = fit_gmm(X, seed=9), fit_gmm(X, seed=9)
    assert np.array_equal(m1.means, m2.means)
    assert np.array_equal(m1.covariances, m2.covariances)
    a1, a2 = assign_subtypes(m1, X), assign_subtypes(m2, X)
    assert np.array_equal(a1.posterior_disturbed, a2.posterior_disturbed)


def test_standardize_roundtrip_identity():
    X, _ = two_blobs(n=50, seed=5)
    model = fit_gmm(X, seed=0)
    assert np.allclose(model.destandardize(model.standardize(X)), X, atol=1e-12)


def test_posteriors_sum_to_one():
    X, _ = two_blobs(n=60, sep=2.0, seed=6)
    model = fit_gmm(X, seed=0)
    assignment = assign_subtypes(model, X)
    assert np.all((assignment.posterior_disturbed >= 0)
                  & (assignment.posterior_disturbed <= 1))


def test_disturbed_is_higher_rb_component():
    # blobs differing only in the RB column
    rng = np.random.default_rng(7)
    lo = rng.normal(0.0, 0.03, size=(100, 8))
    hi = rng.normal(0.0, 0.03, size=(100, 8))
    lo[:, RB_INDEX] += 0.32
    hi[:, RB_INDEX] += 0.51
    X = np.vstack([lo, hi])
    model = fit_gmm(X, seed=0)
    assignment = assign_subtypes(model, X)
    hi_labels = assignment.labels[100:]
    assert (hi_labels == "disturbed").mean() > 0.9
    means = model.component_means_original()
    assert means[model.disturbed_component, RB_INDEX] > \
        means[1 - model.disturbed_component, RB_INDEX]


def test_label_rule_invariant_to_component_swap():
    X, _ = two_blobs(n=80, sep=5.0, seed=8)
    model = fit_gmm(X, seed=0)
    swapped = GmmModel(model.weights[::-1].copy(), model.means[::-1].copy(),
                       model.covariances[::-1].copy(), model.feature_mean,
                       model.feature_std)
    rb_means = swapped.component_means_original()[:, RB_INDEX]
    swapped.disturbed_component = int(np.argmax(rb_means))
    a, b = assign_subtypes(model, X), assign_subtypes(swapped, X)
    assert np.allclose(a.posterior_disturbed, b.posterior_disturbed, atol=1e-9)
    assert np.array_equal(a.labels, b.labels)


def test_point_at_component_mean_prefers_it():
    X, _ = two_blobs(n=100, sep=6.0, seed=10)
    model = fit_gmm(X, seed=0)
    at_mean = model.destandardize(model.means)
    assignment = assign_subtypes(model, at_mean)
    k = model.disturbed_component
    assert assignment.posterior_disturbed[k] > 0.5
    assert assignment.posterior_disturbed[1 - k] < 0.5


def test_impute_missing_median():
    X = np.array([[1.0, np.nan], [3.0, 4.0], [5.0, 8.0]])
    out = impute_missing(X)
    assert out[0, 1] == 6.0
    with pytest.raises(ValueError):
        impute_missing(np.full((4, 2), np.nan))


def test_missing_mdr_rows_clusterable():
    X, truth = two_blobs(n=60, seed=11)
    X[::7, 4] = np.nan  # REM-free nights
    model = fit_gmm(X, seed=0)
    assignment = assign_subtypes(model, X)
    hard = (assignment.posterior_disturbed >= 0.5).astype(int)
    acc = max((hard == truth).mean(), (hard == 1 - truth).mean())
    assert acc >= 0.99


def test_diagonal_flag():
    X, _ = two_blobs(n=80, sep=4.0, seed=12)
    model = fit_gmm(X, seed=0, diagonal=True)
    for cov in model.covariances:
        off = cov - np.diag(np.diag(cov))
        assert np.allclose(off, 0.0)


def test_assignment_csv_format():
    X, _ = two_blobs(n=20, seed=13)
    model = fit_gmm(X, seed=0)
    assignment = assign_subtypes(model, X[:3])
    text = assignment_csv(["a", "b", "c"], assignment)
    lines = text.splitlines()
    assert lines[0] == "recording_id,posterior_disturbed,label"
    assert len(lines) == 4
    assert lines[1].split(",")[2] in ("normal", "disturbed")
