"""Two-component Gaussian mixture over the eight biomarker features, used
to split nights into normal and disturbed sleep subtypes.

Features are z-scored before fitting; the mixture is fit by EM with
k-means++ initialization and a diagonal ridge on every covariance update.
The disturbed label goes to the component with the higher mean shallow-sleep
ratio (RB) in original feature units.
"""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from .biomarkers import FEATURE_COLUMNS

N_COMPONENTS = 2
RIDGE = 1e-6
EM_TOL = 1e-6
EM_MAX_ITER = 500
MDR_INDEX = FEATURE_COLUMNS.index("MDR")
RB_INDEX = FEATURE_COLUMNS.index("RB")


@dataclass
class GmmModel:
    weights: np.ndarray          # (K,)
    means: np.ndarray            # (K, d) in standardized units
    covariances: np.ndarray      # (K, d, d)
    feature_mean: np.ndarray     # (d,) standardization offsets
    feature_std: np.ndarray      # (d,)
    log_likelihoods: list[float] = field(default_factory=list)
    disturbed_component: int = 0

    @property
    def n_features(self) -> int:
        return self.means.shape[1]

    def standardize(self, X: np.ndarray) -> np.ndarray:
        return (X - self.feature_mean) / self.feature_std

    def destandardize(self, Z: np.ndarray) -> np.ndarray:
        return Z * self.feature_std + self.feature_mean

    def component_means_original(self) -> np.ndarray:
        return self.destandardize(self.means)


@dataclass
class SubtypeAssignment:
    posterior_disturbed: np.ndarray  # (n,)
    labels: np.ndarray               # (n,) of "normal" / "disturbed"


def impute_missing(X: np.ndarray) -> np.ndarray:
    """Replace nan entries (MDR on REM-free nights) with the feature median."""
    X = np.array(X, dtype=np.float64)
    for j in range(X.shape[1]):
        bad = np.isnan(X[:, j])
        if bad.all():
            raise ValueError(f"feature column {j} has no observed values")
        if bad.any():
            X[bad, j] = np.median(X[~bad, j])
    return X


def _log_gaussian(Z: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    d = len(mean)
    chol = np.linalg.cholesky(cov)
    diff = Z - mean
    solved = np.linalg.solve(chol, diff.T)
    maha = (solved ** 2).sum(axis=0)
    log_det = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (d * np.log(2 * np.pi) + log_det + maha)


def _kmeanspp_centers(Z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [Z[rng.integers(len(Z))]]
    for _ in range(1, k):
        d2 = np.min([((Z - c) ** 2).sum(axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total == 0:
            centers.append(Z[rng.integers(len(Z))])
            continue
        centers.append(Z[rng.choice(len(Z), p=d2 / total)])
    return np.stack(centers)


def fit_gmm(X, seed: int = 0, diagonal: bool = False, n_init: int = 5) -> GmmModel:
    """EM fit of a 2-component mixture on z-scored features.

    Runs n_init k-means++-seeded EM restarts and keeps the highest final
    log-likelihood.
    """
    X = impute_missing(np.asarray(X, dtype=np.float64))
    n, d = X.shape
    if n < 10:
        raise ValueError("need at least 10 nights to fit subtypes")
    feature_mean = X.mean(axis=0)
    feature_std = np.maximum(X.std(axis=0), 1e-12)
    if np.all(X == X[0]):
        raise ValueError("all feature rows identical; subtypes undefined")
    Z = (X - feature_mean) / feature_std

    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        candidate = _fit_em(Z, rng, diagonal)
        if best is None or candidate[3][-1] > best[3][-1]:
            best = candidate
    weights, means, covariances, log_likes = best

    model = GmmModel(weights, means, covariances, feature_mean, feature_std,
                     log_likelihoods=log_likes)
    rb_means = model.component_means_original()[:, RB_INDEX]
    model.disturbed_component = int(np.argmax(rb_means))
    return model


def _fit_em(Z: np.ndarray, rng: np.random.Generator, diagonal: bool):
    n, d = Z.shape
    means = _kmeanspp_centers(Z, N_COMPONENTS, rng)
    weights = np.full(N_COMPONENTS, 1.0 / N_COMPONENTS)
    covariances = np.stack([np.eye(d)] * N_COMPONENTS)

    log_likes = []
    prev = -np.inf
    for _ in range(EM_MAX_ITER):
        # E-step
        log_p = np.stack([
            np.log(weights[k]) + _log_gaussian(Z, means[k], covariances[k])
            for k in range(N_COMPONENTS)
        ], axis=1)
        shift = log_p.max(axis=1, keepdims=True)
        post = np.exp(log_p - shift)
        norm = post.sum(axis=1, keepdims=True)
        post /= norm
        ll = float((shift[:, 0] + np.log(norm[:, 0])).sum())
        log_likes.append(ll)
        # M-step
        nk = post.sum(axis=0)
        weights = nk / n
        means = (post.T @ Z) / nk[:, None]
        for k in range(N_COMPONENTS):
            diff = Z - means[k]
            cov = (post[:, k, None] * diff).T @ diff / nk[k]
            if diagonal:
                cov = np.diag(np.diag(cov))
            covariances[k] = cov + RIDGE * np.eye(d)
        if ll - prev < EM_TOL and np.isfinite(prev):
            break
        prev = ll
    return weights, means, covariances, log_likes


def assign_subtypes(model: GmmModel, X) -> SubtypeAssignment:
    """Posterior component membership by Bayes rule; hard label by argmax."""
    X = impute_missing(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.n_features:
        raise ValueError("feature dimension does not match the fitted model")
    Z = model.standardize(X)
    log_p = np.stack([
        np.log(model.weights[k]) + _log_gaussian(Z, model.means[k], model.covariances[k])
        for k in range(N_COMPONENTS)
    ], axis=1)
    shift = log_p.max(axis=1, keepdims=True)
    post = np.exp(log_p - shift)
    post /= post.sum(axis=1, keepdims=True)
    p_dist = post[:, model.disturbed_component]
    labels = np.where(p_dist >= 0.5, "disturbed", "normal")
    return SubtypeAssignment(p_dist, labels)


def assignment_csv(recording_ids, assignment: SubtypeAssignment) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("recording_id", "posterior_disturbed", "label"))
    for rec_id, p, label in zip(recording_ids, assignment.posterior_disturbed,
                                assignment.labels):
        w.writerow([rec_id, repr(float(p)), label])
    return buf.getvalue()


def write_assignment_csv(recording_ids, assignment: SubtypeAssignment, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(assignment_csv(recording_ids, assignment))
    os.replace(tmp, path)
