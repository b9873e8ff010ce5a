"""Correlational machinery: Spearman/Pearson, RSA between RDMs, rank-based
partial correlation, permutation significance, and the Williams test for two
dependent correlations sharing one variable.

Ties in rank transforms always receive average ranks. All tests are
two-tailed. Analytic RSA p-values treat condensed cells as independent
observations (the standard RSA simplification); permutation mode is the
rigorous alternative, and every result records which method produced it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import t as student_t

from .rdm import RDM, CondensedVector, condense


class StatsError(ValueError):
    """A statistics precondition violation (constant input, bad sizes...)."""


@dataclass(frozen=True)
class AlignmentResult:
    rho: float
    p_value: float
    n_pairs: int
    method: str

    def __post_init__(self) -> None:
        if not -1.0 <= self.rho <= 1.0:
            raise StatsError(f"rho {self.rho} outside [-1, 1]")
        if not 0.0 <= self.p_value <= 1.0:
            raise StatsError(f"p {self.p_value} outside [0, 1]")
        if self.method == "analytic" and self.n_pairs < 3:
            raise StatsError("analytic p needs at least 3 pairs")


@dataclass(frozen=True)
class WilliamsResult:
    t: float
    df: int
    p_value: float
    r12: float
    r13: float
    r23: float

    def __post_init__(self) -> None:
        if self.df < 1:
            raise StatsError(f"df must be >= 1, got {self.df}")
        if not 0.0 <= self.p_value <= 1.0:
            raise StatsError(f"p {self.p_value} outside [0, 1]")


def average_ranks(x: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties assigned the mean of the tied positions."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    boundaries = np.flatnonzero(np.r_[True, sorted_x[1:] != sorted_x[:-1], True])
    starts, stops = boundaries[:-1], boundaries[1:]
    run_ranks = 0.5 * (starts + stops - 1) + 1.0
    ranks = np.empty(len(x))
    ranks[order] = np.repeat(run_ranks, stops - starts)
    return ranks


def _check_pair(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise StatsError(f"length mismatch: {x.shape} vs {y.shape}")
    if len(x) < 3:
        raise StatsError(f"need at least 3 observations, got {len(x)}")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise StatsError("correlation undefined for a constant input")
    return x, y


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Sample Pearson correlation coefficient."""
    x, y = _check_pair(x, y)
    xc = x - x.mean()
    yc = y - y.mean()
    r = float(xc @ yc / np.sqrt((xc @ xc) * (yc @ yc)))
    return min(1.0, max(-1.0, r))


def spearman(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation of average-ranked values."""
    x, y = _check_pair(x, y)
    return pearson(average_ranks(x), average_ranks(y))


def _two_tailed_t_p(t_stat: float, df: int) -> float:
    return float(2.0 * student_t.sf(abs(t_stat), df))


def _analytic_rho_p(rho: float, m: int, n_controls: int = 0) -> float:
    # t = r * sqrt(df / (1 - r^2)) with df = m - 2 - #controls.
    df = m - 2 - n_controls
    if df < 1:
        raise StatsError(f"too few pairs ({m}) for {n_controls} controls")
    if abs(rho) >= 1.0:
        return 0.0
    t_stat = rho * np.sqrt(df / (1.0 - rho * rho))
    return _two_tailed_t_p(t_stat, df)


def reindex_rdm(rdm: RDM, labels: tuple[str, ...]) -> RDM:
    """Reorder an RDM's rows/columns to match `labels` (same label set)."""
    if rdm.labels == labels:
        return rdm
    if set(rdm.labels) != set(labels):
        raise StatsError(
            f"label sets differ: {sorted(set(labels) - set(rdm.labels))[:5]} missing"
        )
    pos = {w: i for i, w in enumerate(rdm.labels)}
    idx = np.array([pos[w] for w in labels])
    return RDM(labels=labels, values=rdm.values[np.ix_(idx, idx)], kind=rdm.kind)


def _aligned_condensed(target: RDM, model: RDM) -> tuple[np.ndarray, np.ndarray]:
    model = reindex_rdm(model, target.labels)
    return condense(target).values, condense(model).values


def rsa(
    target: RDM,
    model: RDM,
    method: str = "analytic",
    n_perm: int = 1000,
    seed: int = 0,
) -> AlignmentResult:
    """Spearman correlation between the condensed forms of two RDMs.

    RDMs are reconciled by label, not position. `method` selects the
    p-value: "analytic" (t approximation over m = n(n-1)/2 pairs) or
    "permutation" (condition-label permutation, see `permutation_p`).
    """
    if target.n < 4:
        raise StatsError(f"RSA needs at least 4 conditions, got {target.n}")
    if method not in ("analytic", "permutation"):
        raise StatsError(f"unknown method {method!r}")
    tv, mv = _aligned_condensed(target, model)
    rho = spearman(tv, mv)
    m = len(tv)
    if method == "analytic":
        p = _analytic_rho_p(rho, m)
    else:
        p = permutation_p(target, model, n_perm=n_perm, seed=seed)
    return AlignmentResult(rho=rho, p_value=p, n_pairs=m, method=method)


def partial_spearman(y: RDM, x: RDM, controls: list[RDM]) -> AlignmentResult:
    """Rank-based partial correlation between two RDMs given control RDMs.

    All condensed vectors are rank-transformed first; the partial Pearson
    correlation of ranked x and ranked y is then computed by regressing both
    on the ranked controls (with intercept) and correlating the residuals.
    With no controls this reduces exactly to the plain Spearman correlation.
    """
    yv, xv = _aligned_condensed(y, x)
    cvs = [_aligned_condensed(y, c)[1] for c in controls]
    m = len(yv)
    k = len(cvs)
    if m <= 2 + k:
        raise StatsError(f"{m} pairs cannot support {k} controls")
    ry = average_ranks(yv)
    rx = average_ranks(xv)
    for cv in cvs:
        if np.all(cv == cv[0]):
            raise StatsError("constant control RDM")
    design = np.column_stack([np.ones(m)] + [average_ranks(cv) for cv in cvs])
    coef_x, *_ = np.linalg.lstsq(design, rx, rcond=None)
    coef_y, *_ = np.linalg.lstsq(design, ry, rcond=None)
    res_x = rx - design @ coef_x
    res_y = ry - design @ coef_y
    scale = float(np.sqrt(np.mean(rx**2)) + 1.0)
    if np.std(res_x) < 1e-10 * scale or np.std(res_y) < 1e-10 * scale:
        raise StatsError(
            "singular partial correlation: a control is (nearly) identical to x or y"
        )
    rho = pearson(res_x, res_y)
    p = _analytic_rho_p(rho, m, n_controls=k)
    return AlignmentResult(rho=rho, p_value=p, n_pairs=m, method="analytic")


def williams_t(r12: float, r13: float, r23: float, n: int) -> WilliamsResult:
    """Williams test for the difference between two dependent correlations
    r12 and r13 that share variable 1, with r23 the correlation between
    variables 2 and 3 and n the number of observations.

        t = (r12 - r13) * sqrt( (n-1)(1+r23) /
              ( 2 (n-1)/(n-3) |R| + rbar^2 (1-r23)^3 ) ),   df = n - 3

    where |R| = 1 + 2 r12 r13 r23 - r12^2 - r13^2 - r23^2 and
    rbar = (r12 + r13)/2. Two-tailed p from Student t. The degenerate
    case r23 = 1 with r12 = r13 short-circuits to t = 0, p = 1.
    """
    if n <= 3:
        raise StatsError(f"Williams test needs n >= 4, got {n}")
    if r23 == 1.0 and r12 == r13:
        # perfectly correlated predictors are one ranking measured twice:
        # no difference exists to test, so the limit t = 0 applies
        return WilliamsResult(t=0.0, df=n - 3, p_value=1.0, r12=r12, r13=r13, r23=r23)
    for name, r in (("r12", r12), ("r13", r13), ("r23", r23)):
        if not -1.0 < r < 1.0:
            raise StatsError(f"{name} = {r} must lie strictly inside (-1, 1)")
    det_r = 1.0 + 2.0 * r12 * r13 * r23 - r12 * r12 - r13 * r13 - r23 * r23
    if det_r <= 0.0:
        raise StatsError(
            f"correlation triple (r12={r12}, r13={r13}, r23={r23}) has "
            f"non-positive determinant {det_r}; not a valid correlation matrix"
        )
    df = n - 3
    rbar = 0.5 * (r12 + r13)
    denom = 2.0 * det_r * (n - 1) / df + rbar * rbar * (1.0 - r23) ** 3
    t_stat = (r12 - r13) * np.sqrt((n - 1) * (1.0 + r23) / denom)
    return WilliamsResult(
        t=float(t_stat),
        df=df,
        p_value=_two_tailed_t_p(float(t_stat), df),
        r12=r12,
        r13=r13,
        r23=r23,
    )


def permutation_p(target: RDM, model: RDM, n_perm: int, seed: int = 0) -> float:
    """Permutation p-value for the RSA correlation.

    Condition labels of the model RDM are jointly row/column permuted
    n_perm times; p = (1 + #{|rho_perm| >= |rho_obs|}) / (n_perm + 1).
    Each permutation draws from its own counter-derived generator, so the
    result is independent of evaluation order.
    """
    if n_perm < 1:
        raise StatsError(f"n_perm must be >= 1, got {n_perm}")
    tv, mv = _aligned_condensed(target, model)
    model_aligned = reindex_rdm(model, target.labels)
    rho_obs = abs(spearman(tv, mv))
    n = target.n
    iu, ju = np.triu_indices(n, k=1)
    target_ranks = average_ranks(tv)
    exceed = 0
    for i in range(n_perm):
        rng = np.random.default_rng((seed, i))
        perm = rng.permutation(n)
        permuted = model_aligned.values[np.ix_(perm, perm)][iu, ju]
        rho_perm = abs(pearson(target_ranks, average_ranks(permuted)))
        if rho_perm >= rho_obs:
            exceed += 1
    return (1 + exceed) / (n_perm + 1)
