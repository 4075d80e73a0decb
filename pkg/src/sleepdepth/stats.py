"""Statistical evaluation harness: rank concordance, the binned
depth-decrease vs arousal analysis, AUROC with bootstrap intervals, group
comparisons (Welch t, Cohen's d, chi-square), covariate-adjusted odds
ratios, and survival analysis (Kaplan-Meier, log-rank, Cox proportional
hazards).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

BOOTSTRAP_B = 1000


def _ranks(x: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with midrank tie handling."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


# -------------------------------------------------------------- concordance

def spearman_concordance(sdi, stages) -> float:
    """Spearman correlation of SDI against stage depth, REM epochs excluded.

    Stage codes W=0 < N1=1 < N2=2 < N3=3 order depth; REM (4) has no fixed
    position and is dropped before ranking.
    """
    sdi = np.asarray(sdi, dtype=np.float64)
    stages = np.asarray(stages, dtype=int)
    if sdi.shape != stages.shape:
        raise ValueError("sdi and stage lengths differ")
    keep = stages != 4
    sdi, stages = sdi[keep], stages[keep]
    if len(sdi) < 3:
        raise ValueError("need at least 3 non-REM epochs")
    if np.all(stages == stages[0]):
        raise ValueError("all stages equal; concordance undefined")
    ra, rb_ = _ranks(sdi), _ranks(stages)
    ra = ra - ra.mean()
    rb_ = rb_ - rb_.mean()
    return float((ra * rb_).sum() / math.sqrt((ra ** 2).sum() * (rb_ ** 2).sum()))


# ------------------------------------------------------- binned correlation

@dataclass
class BinnedCorrelation:
    n_bins: int
    bin_edges: np.ndarray
    bin_counts: np.ndarray
    decrease_means: np.ndarray      # nan where a bin is empty
    arousal_means: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    slope: float
    intercept: float
    pearson_r: float

    def nonempty(self) -> np.ndarray:
        return self.bin_counts > 0


def pair_decrease_arousal(sdi, arousal_props, offset: int = 0):
    """Depth decreases paired with arousal proportions.

    d_t = sdi_{t-1} - sdi_t is paired with the arousal proportion of epoch
    t (offset 0) or epoch t+1 (offset 1, the "next 30 seconds" reading).
    """
    sdi = np.asarray(sdi, dtype=np.float64)
    props = np.asarray(arousal_props, dtype=np.float64)
    if sdi.shape != props.shape:
        raise ValueError("sdi and arousal lengths differ")
    if offset not in (0, 1):
        raise ValueError("offset must be 0 or 1")
    d = sdi[:-1] - sdi[1:]
    if offset == 0:
        return d, props[1:]
    return d[:-1], props[2:]


def decile_arousal_analysis(decreases, arousal_props, n_bins: int = 10,
                            clamp_negative: bool = False) -> BinnedCorrelation:
    """Bin depth decreases into equal intervals over [0, 1] and correlate
    per-bin mean arousal proportion against per-bin mean decrease.

    Negative decreases are excluded by default (or clamped to 0). Per-bin
    error bars are two-sided 95% confidence intervals of the mean; the line
    and Pearson r are computed over nonempty bin means.
    """
    d = np.asarray(decreases, dtype=np.float64)
    a = np.asarray(arousal_props, dtype=np.float64)
    if d.shape != a.shape:
        raise ValueError("decrease and arousal series lengths differ")
    if clamp_negative:
        d = np.clip(d, 0.0, None)
    else:
        keep = d >= 0
        d, a = d[keep], a[keep]
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.digitize(d, edges) - 1, 0, n_bins - 1)
    counts = np.zeros(n_bins, dtype=int)
    d_means = np.full(n_bins, np.nan)
    a_means = np.full(n_bins, np.nan)
    lo = np.full(n_bins, np.nan)
    hi = np.full(n_bins, np.nan)
    for b in range(n_bins):
        sel = idx == b
        n = int(sel.sum())
        counts[b] = n
        if n == 0:
            continue
        d_means[b] = d[sel].mean()
        mean = a[sel].mean()
        a_means[b] = mean
        if n > 1:
            sem = a[sel].std(ddof=1) / math.sqrt(n)
            tcrit = sps.t.ppf(0.975, n - 1)
            lo[b], hi[b] = mean - tcrit * sem, mean + tcrit * sem
        else:
            lo[b] = hi[b] = mean
    good = counts > 0
    if good.sum() < 2:
        raise ValueError("fewer than 2 nonempty bins")
    x, y = d_means[good], a_means[good]
    xc, yc = x - x.mean(), y - y.mean()
    slope = float((xc * yc).sum() / (xc ** 2).sum())
    intercept = float(y.mean() - slope * x.mean())
    denom = math.sqrt((xc ** 2).sum() * (yc ** 2).sum())
    r = float((xc * yc).sum() / denom) if denom > 0 else float("nan")
    return BinnedCorrelation(n_bins, edges, counts, d_means, a_means, lo, hi,
                             slope, intercept, r)


# -------------------------------------------------------------------- AUROC

def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with midrank tie handling (ties count half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels lengths differ")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes present")
    ranks = _ranks(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_bootstrap_ci(scores, labels, b: int = BOOTSTRAP_B,
                       seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap CI over subject-level resamples."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    rng = np.random.default_rng(seed)
    n = len(scores)
    values = []
    for _ in range(b):
        for _ in range(100):
            idx = rng.integers(0, n, size=n)
            if 0 < labels[idx].sum() < n:
                break
        else:
            raise ValueError("could not draw a two-class bootstrap resample")
        values.append(auroc(scores[idx], labels[idx]))
    return (float(np.percentile(values, 2.5)), float(np.percentile(values, 97.5)))


# -------------------------------------------------------- group comparisons

def welch_t(a, b) -> tuple[float, float]:
    """Welch two-sided t-test; returns (t statistic, p value)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each group needs at least 2 observations")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0 and vb == 0:
        if a.mean() == b.mean():
            return 0.0, 1.0
        raise ValueError("zero variance in both groups")
    se2 = va / len(a) + vb / len(b)
    t = (a.mean() - b.mean()) / math.sqrt(se2)
    df = se2 ** 2 / (va ** 2 / (len(a) ** 2 * (len(a) - 1))
                     + vb ** 2 / (len(b) ** 2 * (len(b) - 1)))
    p = 2.0 * sps.t.sf(abs(t), df)
    return float(t), float(p)


def cohens_d(normal, disturbed) -> float:
    """Pooled-SD Cohen's d, signed disturbed minus normal."""
    a = np.asarray(normal, dtype=np.float64)
    b = np.asarray(disturbed, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each group needs at least 2 observations")
    na, nb = len(a), len(b)
    pooled = math.sqrt(((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1))
                       / (na + nb - 2))
    if pooled == 0:
        raise ValueError("zero pooled variance")
    return float((b.mean() - a.mean()) / pooled)


def chi_square_2x2(table) -> tuple[float, float]:
    """Pearson chi-square (1 df, no continuity correction); (stat, p)."""
    t = np.asarray(table, dtype=np.float64)
    if t.shape != (2, 2) or (t < 0).any():
        raise ValueError("need a 2x2 table of nonnegative counts")
    total = t.sum()
    if total == 0:
        raise ValueError("empty table")
    expected = np.outer(t.sum(axis=1), t.sum(axis=0)) / total
    if (expected == 0).any():
        raise ValueError("degenerate margin in 2x2 table")
    stat = float(((t - expected) ** 2 / expected).sum())
    return stat, float(sps.chi2.sf(stat, 1))


# ---------------------------------------------------------------- logistic

@dataclass
class LogisticResult:
    odds_ratio: float
    ci: tuple[float, float] | None
    beta: np.ndarray
    converged: bool
    separated: bool


def _logistic_fit(X: np.ndarray, y: np.ndarray, tol: float = 1e-8,
                  max_iter: int = 100) -> tuple[np.ndarray, bool, bool]:
    """Newton-Raphson on the Bernoulli log-likelihood; returns
    (beta, converged, separated)."""
    n, d = X.shape
    if np.linalg.matrix_rank(X) < d:
        raise ValueError("singular design matrix")
    beta = np.zeros(d)
    for _ in range(max_iter):
        eta = X @ beta
        p = 1.0 / (1.0 + np.exp(-eta))
        grad = X.T @ (y - p)
        if np.abs(beta).max() > 15.0:
            return beta, False, True
        if np.linalg.norm(grad) < tol:
            return beta, True, False
        w = np.maximum(p * (1 - p), 1e-12)
        hess = X.T @ (w[:, None] * X)
        beta = beta + np.linalg.solve(hess, grad)
    return beta, False, False


def logistic_or(outcome, group, covariates=None, bootstrap: int = BOOTSTRAP_B,
                seed: int = 0) -> LogisticResult:
    """Odds ratio for group membership from a logistic fit with intercept.

    Covariates (n, k) are adjusted for; the CI is a percentile bootstrap
    over subjects. Complete separation is reported without an estimate.
    """
    y = np.asarray(outcome, dtype=np.float64)
    g = np.asarray(group, dtype=np.float64)
    cols = [np.ones(len(y)), g]
    if covariates is not None:
        cov = np.asarray(covariates, dtype=np.float64)
        if cov.ndim == 1:
            cov = cov[:, None]
        cols.extend(cov.T)
    X = np.column_stack(cols)
    beta, converged, separated = _logistic_fit(X, y)
    if separated:
        return LogisticResult(float("nan"), None, beta, False, True)
    if not converged:
        raise ValueError("logistic fit did not converge")
    ci = None
    if bootstrap:
        rng = np.random.default_rng(seed)
        reps = []
        for _ in range(bootstrap):
            idx = rng.integers(0, len(y), size=len(y))
            try:
                b_rep, conv, sep = _logistic_fit(X[idx], y[idx])
            except (ValueError, np.linalg.LinAlgError):
                continue
            if conv and not sep:
                reps.append(math.exp(b_rep[1]))
        if len(reps) >= bootstrap // 2:
            ci = (float(np.percentile(reps, 2.5)), float(np.percentile(reps, 97.5)))
    return LogisticResult(float(math.exp(beta[1])), ci, beta, True, False)


# ---------------------------------------------------------------- survival

@dataclass
class KmCurve:
    times: np.ndarray       # distinct event times
    survival: np.ndarray    # S(t) just after each event time
    n_at_risk: np.ndarray
    n_events: np.ndarray

    def at(self, t: float) -> float:
        """Right-continuous survival probability at time t."""
        s = 1.0
        for time, surv in zip(self.times, self.survival):
            if time <= t:
                s = surv
            else:
                break
        return s


def km_estimate(times, events) -> KmCurve:
    """Kaplan-Meier product-limit estimator."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=int)
    if times.shape != events.shape:
        raise ValueError("times and events lengths differ")
    if (times <= 0).any():
        raise ValueError("survival times must be positive")
    event_times = np.unique(times[events == 1])
    surv, out_t, out_r, out_d = [], [], [], []
    s = 1.0
    for t in event_times:
        at_risk = int((times >= t).sum())
        d = int(((times == t) & (events == 1)).sum())
        s *= 1.0 - d / at_risk
        out_t.append(t)
        out_r.append(at_risk)
        out_d.append(d)
        surv.append(s)
    return KmCurve(np.array(out_t), np.array(surv),
                   np.array(out_r, dtype=int), np.array(out_d, dtype=int))


def logrank(times_a, events_a, times_b, events_b) -> tuple[float, float]:
    """Two-group log-rank test; returns (chi-square with 1 df, p)."""
    ta = np.asarray(times_a, dtype=np.float64)
    ea = np.asarray(events_a, dtype=int)
    tb = np.asarray(times_b, dtype=np.float64)
    eb = np.asarray(events_b, dtype=int)
    all_times = np.unique(np.r_[ta[ea == 1], tb[eb == 1]])
    if len(all_times) == 0:
        raise ValueError("log-rank needs at least one event")
    obs_a = 0.0
    exp_a = 0.0
    var = 0.0
    for t in all_times:
        ra = int((ta >= t).sum())
        rb_ = int((tb >= t).sum())
        da = int(((ta == t) & (ea == 1)).sum())
        db = int(((tb == t) & (eb == 1)).sum())
        r = ra + rb_
        d = da + db
        if r == 0:
            continue
        obs_a += da
        exp_a += d * ra / r
        if r > 1:
            var += d * (ra / r) * (rb_ / r) * (r - d) / (r - 1)
    if var == 0:
        return 0.0, 1.0
    stat = (obs_a - exp_a) ** 2 / var
    return float(stat), float(sps.chi2.sf(stat, 1))


@dataclass
class CoxResult:
    beta: np.ndarray
    hr: np.ndarray
    se: np.ndarray
    ci: list[tuple[float, float]]
    log_likelihood: float
    converged: bool


def _cox_loglik_grad_hess(beta, times, events, X, efron):
    """Partial log-likelihood with Breslow (default) or Efron ties."""
    order = np.argsort(-times, kind="stable")  # decreasing time
    t_s, e_s, X_s = times[order], events[order], X[order]
    n, d = X_s.shape
    ll = 0.0
    grad = np.zeros(d)
    hess = np.zeros((d, d))
    eta = X_s @ beta
    w = np.exp(eta)
    # running risk-set accumulators over decreasing time
    s0 = 0.0
    s1 = np.zeros(d)
    s2 = np.zeros((d, d))
    i = 0
    while i < n:
        j = i
        while j + 1 < n and t_s[j + 1] == t_s[i]:
            j += 1
        for k in range(i, j + 1):
            s0 += w[k]
            s1 += w[k] * X_s[k]
            s2 += w[k] * np.outer(X_s[k], X_s[k])
        tied = [k for k in range(i, j + 1) if e_s[k] == 1]
        m = len(tied)
        if m:
            xs = X_s[tied]
            ll += float(eta[tied].sum())
            if efron and m > 1:
                d0 = sum(w[k] for k in tied)
                d1 = sum(w[k] * X_s[k] for k in tied)
                d2 = sum(w[k] * np.outer(X_s[k], X_s[k]) for k in tied)
                for ell in range(m):
                    f = ell / m
                    z0 = s0 - f * d0
                    z1 = s1 - f * d1
                    z2 = s2 - f * d2
                    ll -= math.log(z0)
                    grad -= z1 / z0
                    hess -= z2 / z0 - np.outer(z1, z1) / z0 ** 2
            else:
                ll -= m * math.log(s0)
                grad -= m * s1 / s0
                hess -= m * (s2 / s0 - np.outer(s1, s1) / s0 ** 2)
            grad += xs.sum(axis=0)
        i = j + 1
    return ll, grad, hess


def cox_ph(times, events, X, ties: str = "breslow", tol: float = 1e-8,
           max_iter: int = 100) -> CoxResult:
    """Newton maximization of the Cox partial likelihood; HR = exp(beta)."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=int)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if ties not in ("breslow", "efron"):
        raise ValueError("ties must be 'breslow' or 'efron'")
    if len(np.unique(times[events == 1])) < 2:
        raise ValueError("need at least 2 distinct event times")
    if np.linalg.matrix_rank(X - X.mean(axis=0)) < X.shape[1]:
        raise ValueError("singular covariate matrix")
    efron = ties == "efron"
    beta = np.zeros(X.shape[1])
    converged = False
    for _ in range(max_iter):
        ll, grad, hess = _cox_loglik_grad_hess(beta, times, events, X, efron)
        if np.abs(beta).max() > 20.0:
            raise ValueError("monotone partial likelihood; no finite estimate")
        if np.linalg.norm(grad) < tol:
            converged = True
            break
        beta = beta - np.linalg.solve(hess, grad)
    if not converged:
        raise ValueError("Cox fit did not converge")
    info = -hess
    se = np.sqrt(np.diag(np.linalg.inv(info)))
    z = sps.norm.ppf(0.975)
    ci = [(math.exp(b - z * s), math.exp(b + z * s)) for b, s in zip(beta, se)]
    return CoxResult(beta, np.exp(beta), se, ci, ll, True)
