"""Evaluation statistics: AUC, subsample-bootstrap CIs, Wilcoxon signed-rank, Brier, KDE."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import norm, rankdata

EXACT_MAX_N = 25


class SingleClass(ValueError):
    """Raised when a metric needs both classes but only one is present."""


@dataclass
class EvalReport:
    model_id: str
    dataset_id: str
    auc: float
    ci_low: float
    ci_high: float
    brier: float
    n: int
    n_positive: int

    def to_dict(self):
        return asdict(self)

    def cell(self):
        """Format as a results-table cell, e.g. ``0.85 (0.84-0.85)``."""
        return f"{self.auc:.2f} ({self.ci_low:.2f}-{self.ci_high:.2f})"


@dataclass
class ComparisonResult:
    model_a: str
    model_b: str
    dataset_id: str
    p_value: float
    significant: bool
    median_difference: float
    differences: list = field(repr=False, default_factory=list)

    def to_dict(self, include_differences=True):
        d = asdict(self)
        if not include_differences:
            d.pop("differences")
        return d


def _as_labeled(scores, labels):
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length ({s.size} vs {y.size})")
    if s.size == 0:
        raise ValueError("empty input")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be binary 0/1")
    return s, y.astype(int)


def auc(scores, labels):
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie), via rank sums."""
    s, y = _as_labeled(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC needs at least one positive and one negative")
    ranks = rankdata(s)
    rank_sum = ranks[y == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def brier(scores, labels):
    s, y = _as_labeled(scores, labels)
    return float(np.mean((s - y) ** 2))


def roc_curve(scores, labels):
    """ROC operating points (fpr, tpr), one per distinct threshold, starting at (0, 0)."""
    s, y = _as_labeled(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("ROC needs both classes")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    # keep the last index of each run of tied scores
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], s_sorted.size - 1]
    fpr = np.r_[0.0, fp[last] / n_neg]
    tpr = np.r_[0.0, tp[last] / n_pos]
    return fpr, tpr


def _stratified_subsample(y, frac, rng):
    """Indices of ceil(frac*n) records without replacement, class counts kept proportional."""
    n = y.size
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    m = math.ceil(frac * n - 1e-9)
    m_pos = int(round(m * pos.size / n))
    m_pos = min(max(m_pos, 1), pos.size)
    m_neg = m - m_pos
    if m_neg < 1 or m_neg > neg.size:
        raise ValueError("class too small for a stratified subsample")
    idx = np.concatenate([rng.choice(pos, m_pos, replace=False), rng.choice(neg, m_neg, replace=False)])
    idx.sort()
    return idx


def _iteration_indices(y, frac, seed, i):
    return _stratified_subsample(y, frac, np.random.default_rng([int(seed), int(i)]))


def _run_iterations(fn, iterations, n_jobs):
    if n_jobs is None or n_jobs <= 1:
        return [fn(i) for i in range(iterations)]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, range(iterations)))


def bootstrap_auc_ci(scores, labels, iterations=1000, subsample_frac=0.95, seed=0, alpha=0.05, n_jobs=None):
    """Percentile CI of AUC over repeated stratified subsamples drawn without replacement.

    Each iteration ``i`` draws from its own generator seeded with ``(seed, i)``, so the
    result does not depend on ``n_jobs``.

    Returns
    -------
    ci_low, ci_high : float
    aucs : numpy.ndarray
        Per-iteration AUC values in iteration order.
    """
    s, y = _as_labeled(scores, labels)
    if s.size < 20:
        raise ValueError(f"bootstrap needs n >= 20, got {s.size}")
    if y.min() == y.max():
        raise SingleClass("bootstrap needs both classes")

    def one(i):
        idx = _iteration_indices(y, subsample_frac, seed, i)
        return auc(s[idx], y[idx])

    aucs = np.asarray(_run_iterations(one, iterations, n_jobs))
    lo, hi = np.percentile(aucs, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return float(lo), float(hi), aucs


def _signed_rank_stat(differences):
    d = np.asarray(differences, dtype=float).ravel()
    d = d[d != 0]
    if d.size == 0:
        return None
    ranks = rankdata(np.abs(d))
    w_plus = ranks[d > 0].sum()
    w_minus = ranks[d < 0].sum()
    return d, ranks, w_plus, w_minus


def _exact_null_counts(ranks):
    """Number of sign assignments reaching each value of 2*W+ (ranks may be half-integers)."""
    doubled = np.rint(2 * ranks).astype(int)
    counts = np.zeros(doubled.sum() + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r] if r > 0 else counts
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(differences, exact_max_n=EXACT_MAX_N):
    """Two-sided Wilcoxon signed-rank p-value.

    Zero differences are dropped; tied magnitudes get average ranks. For
    ``n <= exact_max_n`` the p-value is exact over all ``2**n`` sign assignments
    (counted by convolution rather than listed), otherwise a tie- and
    continuity-corrected normal approximation is used. All-zero input gives 1.0.
    """
    stat = _signed_rank_stat(differences)
    if stat is None:
        return 1.0
    _, ranks, w_plus, w_minus = stat
    n = ranks.size
    w = min(w_plus, w_minus)
    if n <= exact_max_n:
        counts = _exact_null_counts(ranks)
        k = int(round(2 * w))
        tail = int(counts[: k + 1].sum())
        return float(min(1.0, 2 * tail / 2**n))
    mean = n * (n + 1) / 4.0
    _, tie_sizes = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_sizes**3 - tie_sizes) / 48.0
    if var <= 0:
        return 1.0
    z = max(0.0, abs(w - mean) - 0.5) / math.sqrt(var)
    return float(min(1.0, 2 * norm.sf(z)))


def compare_models(preds_a, preds_b, labels, iterations=1000, seed=0, subsample_frac=0.95,
                   model_a="a", model_b="b", dataset_id="", n_jobs=None):
    """Paired bootstrap comparison of two scorers on the same records.

    ``preds_a`` and ``preds_b`` are either aligned score arrays or mappings
    ``record_id -> score``; with mappings, ``labels`` must be a mapping too and
    all three must share the same keys. Each iteration evaluates both models on
    the same subsample; the per-iteration AUC differences (a - b) go to the
    Wilcoxon signed-rank test.
    """
    if isinstance(preds_a, dict) or isinstance(preds_b, dict):
        ids_a, ids_b, ids_y = set(preds_a), set(preds_b), set(labels)
        bad = sorted((ids_a ^ ids_b) | (ids_a ^ ids_y))
        if bad:
            raise ValueError(f"prediction ids differ between inputs: {bad[:20]}")
        keys = sorted(ids_a)
        preds_a = [preds_a[k] for k in keys]
        preds_b = [preds_b[k] for k in keys]
        labels = [labels[k] for k in keys]
    a, y = _as_labeled(preds_a, labels)
    b, _ = _as_labeled(preds_b, labels)

    def one(i):
        idx = _iteration_indices(y, subsample_frac, seed, i)
        return auc(a[idx], y[idx]) - auc(b[idx], y[idx])

    diffs = np.asarray(_run_iterations(one, iterations, n_jobs))
    p = wilcoxon_signed_rank(diffs)
    return ComparisonResult(
        model_a=model_a,
        model_b=model_b,
        dataset_id=dataset_id,
        p_value=p,
        significant=bool(p < 0.05),
        median_difference=float(np.median(diffs)),
        differences=[float(x) for x in diffs],
    )


def silverman_bandwidth(values, floor=1e-3):
    x = np.asarray(values, dtype=float)
    sd = np.std(x, ddof=1) if x.size > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    h = 0.9 * min(sd, (q75 - q25) / 1.34) * x.size ** (-0.2)
    return max(h, floor)


def kde(values, grid_points=512, bandwidth=None):
    """Gaussian KDE on a uniform grid over [0, 1] with reflection at both ends.

    Zero-variance input collapses to the bandwidth floor, i.e. a narrow spike
    at the repeated value.

    Returns
    -------
    grid, density : numpy.ndarray
    """
    x = np.asarray(values, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("kde needs at least two values")
    if not np.all(np.isfinite(x)):
        raise ValueError("kde input must be finite")
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    grid = np.linspace(0.0, 1.0, grid_points)
    u = grid[:, None]
    mirrored = np.concatenate([x, -x, 2.0 - x])
    dens = norm.pdf((u - mirrored[None, :]) / h).sum(axis=1) / (x.size * h)
    return grid, dens


def evaluate(scores, labels, model_id, dataset_id, iterations=1000, subsample_frac=0.95, seed=0):
    s, y = _as_labeled(scores, labels)
    lo, hi, _ = bootstrap_auc_ci(s, y, iterations=iterations, subsample_frac=subsample_frac, seed=seed)
    return EvalReport(
        model_id=model_id,
        dataset_id=dataset_id,
        auc=auc(s, y),
        ci_low=lo,
        ci_high=hi,
        brier=brier(s, y),
        n=int(s.size),
        n_positive=int(y.sum()),
    )
