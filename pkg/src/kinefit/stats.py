"""Accuracy and clinimetric statistics.

Accuracy: median joint angle error, normalized interquartile range, and
root (pelvis) translation error after a single rigid alignment.

Clinimetrics: two-way random-effects absolute-agreement intraclass
correlations (single and average measure) from ANOVA mean squares with
F-based confidence bounds; the standardized response mean with jackknife
pseudo-value confidence intervals; Pearson/Spearman correlations; the
Mann-Whitney U test (exact null distribution for small untied samples,
normal approximation with tie correction otherwise); paired and unpaired
t-tests.

All quantiles use linear interpolation (numpy's default).  Everything here
is a pure function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import stats as sps

__all__ = [
    "mjae",
    "mjae_by_group",
    "niqr",
    "align_rigid",
    "rte",
    "RepeatedMeasures",
    "icc2",
    "icc2k",
    "srm",
    "srm_jackknife_ci",
    "pearson",
    "spearman",
    "mann_whitney_u",
    "t_test",
    "NIQR_FACTOR",
]

NIQR_FACTOR = 0.7413


# --- accuracy ------------------------------------------------------------------

def mjae(estimated, reference) -> float:
    """Median absolute difference between two aligned series (degrees)."""
    est = np.asarray(estimated, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if est.shape != ref.shape or est.size == 0:
        raise ValueError("series must be non-empty and aligned")
    return float(np.median(np.abs(est - ref)))


def mjae_by_group(est_series: dict[str, np.ndarray],
                  ref_series: dict[str, np.ndarray],
                  groups: dict[str, tuple[str, ...]]) -> tuple[dict[str, float], float]:
    """Per-group error (left/right traces pooled) and the aggregate median.

    Each group's value is the median absolute error pooled over its
    coordinates; the aggregate is the median over groups.
    """
    per_group = {}
    for group, names in groups.items():
        errs = [np.abs(np.asarray(est_series[n]) - np.asarray(ref_series[n]))
                for n in names]
        per_group[group] = float(np.median(np.concatenate(errs)))
    return per_group, float(np.median(list(per_group.values())))


def niqr(values) -> float:
    """Interquartile range scaled by 0.7413 (matches the standard deviation
    under normality); linear-interpolation quartiles."""
    vals = np.asarray(values, dtype=np.float64)
    if vals.size < 4:
        raise ValueError("need at least 4 values for a stable IQR")
    q1, q3 = np.quantile(vals, [0.25, 0.75])
    return float((q3 - q1) * NIQR_FACTOR)


def align_rigid(moving: np.ndarray, fixed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rigid transform (R, t) mapping ``moving`` onto ``fixed``.

    Kabsch solution without scaling; both inputs are (N, 3).
    """
    a = np.asarray(moving, dtype=np.float64)
    b = np.asarray(fixed, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ValueError("expected matching (N, 3) trajectories")
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    h = (a - ca).T @ (b - cb)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return rot, cb - rot @ ca


def rte(pelvis_estimated: np.ndarray, pelvis_reference: np.ndarray,
        align: bool = True) -> float:
    """Mean per-frame Euclidean pelvis error in centimeters.

    The two trajectories live in frames that differ by an arbitrary rigid
    registration, so a single least-squares rigid transform is applied
    first (disable with ``align=False`` when frames are known to coincide).
    """
    est = np.asarray(pelvis_estimated, dtype=np.float64)
    ref = np.asarray(pelvis_reference, dtype=np.float64)
    if est.shape != ref.shape or est.ndim != 2 or est.shape[1] != 3:
        raise ValueError("expected matching (N, 3) pelvis trajectories")
    if align:
        rot, t = align_rigid(est, ref)
        est = est @ rot.T + t
    return float(np.mean(np.linalg.norm(est - ref, axis=1)) * 100.0)


# --- reliability ----------------------------------------------------------------

@dataclass
class RepeatedMeasures:
    """Subjects x repeated observations of one metric; possibly ragged."""

    values: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, subject: str, value: float) -> None:
        arr = self.values.get(subject)
        self.values[subject] = np.append(arr, value) if arr is not None \
            else np.array([value])

    def to_balanced(self, seed: int = 0) -> np.ndarray:
        """(n_subjects, k) table truncated to the minimum repeat count.

        Subjects with more repeats contribute a seeded random subsample, so
        the classical balanced ANOVA applies; a documented limitation.
        """
        if len(self.values) < 2:
            raise ValueError("need at least 2 subjects")
        k = min(len(v) for v in self.values.values())
        if k < 2:
            raise ValueError("every subject needs at least 2 observations")
        rng = np.random.default_rng(seed)
        rows = []
        for subject in sorted(self.values):
            v = np.asarray(self.values[subject], dtype=np.float64)
            rows.append(v if len(v) == k else rng.choice(v, size=k, replace=False))
        return np.stack(rows)


def _anova_mean_squares(table: np.ndarray) -> tuple[float, float, float, int, int]:
    x = np.asarray(table, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ValueError("need an (n >= 2) x (k >= 2) table")
    n, k = x.shape
    grand = x.mean()
    ms_rows = k * np.sum((x.mean(axis=1) - grand) ** 2) / (n - 1)
    ms_cols = n * np.sum((x.mean(axis=0) - grand) ** 2) / (k - 1)
    ss_total = np.sum((x - grand) ** 2)
    ss_err = ss_total - ms_rows * (n - 1) - ms_cols * (k - 1)
    ms_err = ss_err / ((n - 1) * (k - 1))
    return ms_rows, ms_cols, max(ms_err, 0.0), n, k


def _icc2_point(ms_rows, ms_cols, ms_err, n, k) -> float:
    denom = ms_rows + (k - 1) * ms_err + k * (ms_cols - ms_err) / n
    if denom <= 0:
        return 0.0
    return max((ms_rows - ms_err) / denom, 0.0)


def _icc2_ci(table: np.ndarray, confidence: float) -> tuple[float, float]:
    """F-based bounds for the single-measure coefficient."""
    ms_rows, ms_cols, ms_err, n, k = _anova_mean_squares(table)
    coeff = _icc2_point(ms_rows, ms_cols, ms_err, n, k)
    if ms_err == 0:
        return coeff, coeff
    alpha = 1.0 - confidence
    fj = ms_cols / ms_err
    vn = (k - 1) * (n - 1) * (k * coeff * fj + n * (1 + (k - 1) * coeff)
                              - k * coeff) ** 2
    vd = (n - 1) * k ** 2 * coeff ** 2 * fj ** 2 \
        + (n * (1 + (k - 1) * coeff) - k * coeff) ** 2
    v = vn / vd if vd > 0 else 1.0
    f_lo = sps.f.ppf(1 - alpha / 2, n - 1, v)
    f_hi = sps.f.ppf(1 - alpha / 2, v, n - 1)
    lower = n * (ms_rows - f_lo * ms_err) / (
        f_lo * (k * ms_cols + (k * n - k - n) * ms_err) + n * ms_rows)
    upper = n * (f_hi * ms_rows - ms_err) / (
        k * ms_cols + (k * n - k - n) * ms_err + n * f_hi * ms_rows)
    return float(lower), float(upper)


def icc2(table: np.ndarray, confidence: float = 0.95
         ) -> tuple[float, tuple[float, float]]:
    """Two-way random-effects absolute-agreement single-measure ICC.

    Rows are subjects, columns repeated observations ("raters").  Returns
    the coefficient and its F-based confidence interval; a table with zero
    between-subject variance yields 0.
    """
    ms_rows, ms_cols, ms_err, n, k = _anova_mean_squares(table)
    coeff = _icc2_point(ms_rows, ms_cols, ms_err, n, k)
    lo, hi = _icc2_ci(table, confidence)
    return coeff, (lo, hi)


def icc2k(table: np.ndarray, confidence: float = 0.95
          ) -> tuple[float, tuple[float, float]]:
    """Average-measure form of :func:`icc2` (mean of the k observations)."""
    ms_rows, ms_cols, ms_err, n, k = _anova_mean_squares(table)
    denom = ms_rows + (ms_cols - ms_err) / n
    coeff = max((ms_rows - ms_err) / denom, 0.0) if denom > 0 else 0.0
    lo1, hi1 = _icc2_ci(table, confidence)

    def spearman_brown(r):
        denom_sb = 1 + r * (k - 1)
        return r * k / denom_sb if denom_sb > 0 else 1.0

    return coeff, (float(spearman_brown(lo1)), float(spearman_brown(hi1)))


# --- responsiveness --------------------------------------------------------------

def srm(diffs) -> float:
    """Standardized response mean: mean of the pre/post differences divided
    by their sample standard deviation (n - 1 denominator)."""
    d = np.asarray(diffs, dtype=np.float64)
    if d.size < 2:
        raise ValueError("need at least 2 differences")
    sd = d.std(ddof=1)
    if sd == 0:
        raise ValueError("zero variance: SRM undefined")
    return float(d.mean() / sd)


def srm_jackknife_ci(diffs, level: float = 0.95) -> tuple[float, float, float]:
    """Bias-corrected SRM and a t-based confidence interval from jackknife
    pseudo-values (leave one observation out at a time)."""
    d = np.asarray(diffs, dtype=np.float64)
    n = d.size
    if n < 3:
        raise ValueError("need at least 3 differences for the jackknife")
    full = srm(d)
    pseudo = np.empty(n)
    for i in range(n):
        loo = np.delete(d, i)
        pseudo[i] = n * full - (n - 1) * srm(loo)
    point = float(pseudo.mean())
    se = float(pseudo.std(ddof=1) / math.sqrt(n))
    t_crit = float(sps.t.ppf(0.5 + level / 2.0, n - 1))
    return point, point - t_crit * se, point + t_crit * se


# --- correlations and tests -------------------------------------------------------

def pearson(x, y) -> float:
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("need two aligned series of length >= 2")
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float(a @ a) * float(b @ b))
    if denom == 0:
        raise ValueError("zero variance input")
    return float(a @ b / denom)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(sx):
        j = i
        while j + 1 < len(sx) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Rank correlation with average ranks for ties."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("need two aligned series of length >= 2")
    return pearson(_average_ranks(a), _average_ranks(b))


@lru_cache(maxsize=64)
def _u_null_counts(n1: int, n2: int) -> tuple[float, ...]:
    """Exact null counts of U arrangements via the recurrence
    N(i, j, u) = N(i-1, j, u-j) + N(i, j-1, u)."""
    max_u = n1 * n2
    memo = np.zeros((n1 + 1, n2 + 1, max_u + 1))
    memo[0, :, 0] = 1.0
    memo[:, 0, 0] = 1.0
    for i in range(1, n1 + 1):
        for j in range(1, n2 + 1):
            shifted = np.zeros(max_u + 1)
            shifted[j:] = memo[i - 1, j, :max_u + 1 - j]
            memo[i, j] = shifted + memo[i, j - 1]
    return tuple(memo[n1, n2])


def _u_cdf(u: int, n1: int, n2: int) -> float:
    """Exact P(U <= u) under the no-ties null."""
    counts = np.asarray(_u_null_counts(n1, n2))
    return float(counts[:u + 1].sum() / counts.sum())


def mann_whitney_u(a, b) -> tuple[float, float]:
    """Two-sided Mann-Whitney U test.

    Returns (U, p) with U the smaller of the two one-sided statistics.  The
    p-value uses the exact null distribution when both groups have at most
    20 observations and there are no ties, and the normal approximation
    with tie correction otherwise.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    n1, n2 = len(x), len(y)
    if n1 < 1 or n2 < 1:
        raise ValueError("both groups must be non-empty")
    combined = np.concatenate([x, y])
    ranks = _average_ranks(combined)
    r1 = ranks[:n1].sum()
    u1 = r1 - n1 * (n1 + 1) / 2.0
    u2 = n1 * n2 - u1
    u = min(u1, u2)
    has_ties = len(np.unique(combined)) != len(combined)
    if not has_ties and max(n1, n2) <= 20:
        p = 2.0 * _u_cdf(int(round(u)), n1, n2)
    else:
        n = n1 + n2
        _, tie_counts = np.unique(combined, return_counts=True)
        tie_term = np.sum(tie_counts ** 3 - tie_counts) / (n * (n - 1))
        sigma2 = n1 * n2 / 12.0 * ((n + 1) - tie_term)
        if sigma2 <= 0:
            return float(u), 1.0
        z = (u + 0.5 - n1 * n2 / 2.0) / math.sqrt(sigma2)
        p = 2.0 * float(sps.norm.cdf(z))
    return float(u), float(min(p, 1.0))


def t_test(a, b, paired: bool = False) -> tuple[float, float]:
    """Two-sided Student t-test (pooled variance when unpaired)."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if paired:
        if x.shape != y.shape:
            raise ValueError("paired test needs equal-length samples")
        d = x - y
        n = len(d)
        if n < 2:
            raise ValueError("need at least 2 pairs")
        se = d.std(ddof=1) / math.sqrt(n)
        if se == 0:
            raise ValueError("zero variance of differences")
        t_stat = d.mean() / se
        df = n - 1
    else:
        n1, n2 = len(x), len(y)
        if n1 < 2 or n2 < 2:
            raise ValueError("need at least 2 observations per group")
        sp2 = ((n1 - 1) * x.var(ddof=1) + (n2 - 1) * y.var(ddof=1)) / (n1 + n2 - 2)
        if sp2 == 0:
            raise ValueError("zero pooled variance")
        t_stat = (x.mean() - y.mean()) / math.sqrt(sp2 * (1 / n1 + 1 / n2))
        df = n1 + n2 - 2
    p = 2.0 * float(sps.t.sf(abs(t_stat), df))
    return float(t_stat), p
