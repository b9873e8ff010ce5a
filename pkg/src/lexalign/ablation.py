"""Ridge-based removal of a scalar feature from embedding matrices.

A ridge model maps feature values to embedding vectors on one word set,
its predictions are subtracted from the embeddings of a held-out word
set, and the alignment of the residual geometry with behavioral data is
compared against the unablated baseline. The size of the drop, tested
with a dependent-correlation statistic, quantifies how much of the
alignment that feature carried.

Everything here treats the feature matrix generically: one column is
the common case, but any p >= 1 works unchanged.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import warnings
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from .ingest import EmbeddingTable, FeatureTable
from .rdm import RDM, condense, cosine_rdm, embedding_rdm
from .stats import WilliamsResult, rsa, spearman, williams_t

DEFAULT_ALPHA_GRID = tuple(float(a) for a in np.logspace(-3, 3, 13))


class AblationError(ValueError):
    """Raised when ablation inputs or invariants are violated."""


@dataclass(frozen=True)
class RidgeFit:
    """Ridge weights plus the scalers needed to apply them to new data.

    Weights act in standardized space: rows are feature columns, columns
    are embedding dimensions. Dimensions with zero training variance are
    excluded from the fit; their weight columns are zero and their y_sd
    entries are a placeholder 1.0 so the inverse transform returns the
    training mean.
    """

    weights: np.ndarray
    alpha: float
    x_mean: np.ndarray
    x_sd: np.ndarray
    y_mean: np.ndarray
    y_sd: np.ndarray
    cv_r2: float
    alpha_grid: tuple[float, ...]
    folds: int
    kept_dims: tuple[int, ...]
    seed: int

    def __post_init__(self):
        if self.alpha not in self.alpha_grid:
            raise AblationError("alpha must come from the alpha grid")
        if np.any(np.asarray(self.x_sd) <= 0) or np.any(np.asarray(self.y_sd) <= 0):
            raise AblationError("scaler standard deviations must be positive")
        if self.cv_r2 > 1.0 + 1e-12:
            raise AblationError(f"cv_r2 cannot exceed 1, got {self.cv_r2}")

    @property
    def n_features(self) -> int:
        return self.weights.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class AblationReport:
    feature_name: str
    base_rho: float
    ablated_rho: float
    delta: float
    pct_drop: float
    williams: WilliamsResult
    train_size: int
    model_source: str
    # carried so callers can serialize the fit behind the numbers; not
    # part of the tabular output
    fit: RidgeFit | None = dataclasses.field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if abs(self.delta - (self.base_rho - self.ablated_rho)) > 1e-12:
            raise AblationError("delta must equal base_rho - ablated_rho")
        if self.base_rho > 0:
            expected = 100.0 * self.delta / self.base_rho
            if abs(self.pct_drop - expected) > 1e-9:
                raise AblationError("pct_drop inconsistent with base_rho and delta")


def _as_matrix(x, name: str) -> np.ndarray:
    m = np.asarray(x, dtype=float)
    if m.ndim == 1:
        m = m[:, None]
    if m.ndim != 2:
        raise AblationError(f"{name} must be a 2-d matrix")
    if not np.all(np.isfinite(m)):
        raise AblationError(f"{name} contains non-finite values")
    return m


def _scaler(m: np.ndarray):
    return m.mean(axis=0), m.std(axis=0)


def _solve_ridge(xs: np.ndarray, ys: np.ndarray, alpha: float) -> np.ndarray:
    p = xs.shape[1]
    gram = xs.T @ xs + alpha * np.eye(p)
    try:
        return np.linalg.solve(gram, xs.T @ ys)
    except np.linalg.LinAlgError as err:
        raise AblationError(f"ridge system is singular at alpha={alpha}") from err


def _fold_r2(x_tr, y_tr, x_va, y_va, alpha: float, fold: int) -> float:
    """Pooled variance-weighted R^2 on one validation fold, raw space."""
    xm, xsd = _scaler(x_tr)
    ym, ysd = _scaler(y_tr)
    if np.any(xsd == 0):
        raise AblationError(f"singular fold {fold}: constant feature column")
    if np.any(ysd == 0):
        raise AblationError(f"singular fold {fold}: constant embedding dimension")
    w = _solve_ridge((x_tr - xm) / xsd, (y_tr - ym) / ysd, alpha)
    pred = ym + ysd * (((x_va - xm) / xsd) @ w)
    ss_res = float(np.sum((y_va - pred) ** 2))
    ss_tot = float(np.sum((y_va - y_va.mean(axis=0)) ** 2))
    if ss_tot == 0.0:
        raise AblationError(f"singular fold {fold}: validation rows are constant")
    return 1.0 - ss_res / ss_tot


def fit_ridge(
    x,
    y,
    alpha_grid: Sequence[float] | None = None,
    k_folds: int = 5,
    seed: int = 0,
) -> RidgeFit:
    """Fit ridge weights from features to embeddings with the penalty
    chosen by cross-validation.

    Both matrices are standardized; each grid alpha is scored by the
    mean out-of-fold variance-weighted R^2 and the best one (ties to
    the smaller alpha) is refit on all rows. Embedding dimensions with
    zero variance are dropped from the fit with a warning.
    """
    x = _as_matrix(x, "x")
    y = _as_matrix(y, "y")
    n = x.shape[0]
    if y.shape[0] != n:
        raise AblationError(f"x has {n} rows but y has {y.shape[0]}")
    if k_folds < 2:
        raise AblationError("k_folds must be at least 2")
    if n < k_folds:
        raise AblationError(f"need at least {k_folds} rows for {k_folds}-fold CV, got {n}")
    if alpha_grid is None:
        grid = DEFAULT_ALPHA_GRID
    else:
        grid = tuple(sorted(float(a) for a in alpha_grid))
        if not grid or any(a < 0 or not np.isfinite(a) for a in grid):
            raise AblationError("alpha_grid must be non-negative finite values")

    if np.any(x.std(axis=0) == 0):
        raise AblationError("x has a constant column; cannot standardize")
    y_sd_full = y.std(axis=0)
    kept = tuple(int(i) for i in np.nonzero(y_sd_full > 0)[0])
    if len(kept) < y.shape[1]:
        warnings.warn(
            f"{y.shape[1] - len(kept)} embedding dimensions have zero variance; "
            "dropped from the fit, predictions fall back to the training mean",
            stacklevel=2,
        )
    if not kept:
        raise AblationError("every embedding dimension is constant")
    y_kept = y[:, kept]

    rng = np.random.default_rng(seed)
    fold_indices = np.array_split(rng.permutation(n), k_folds)
    scores = []
    for alpha in grid:
        per_fold = []
        for f, va in enumerate(fold_indices):
            tr = np.setdiff1d(np.arange(n), va)
            per_fold.append(_fold_r2(x[tr], y_kept[tr], x[va], y_kept[va], alpha, f))
        scores.append(float(np.mean(per_fold)))
    best = int(np.argmax(scores))  # ascending grid: first max is the smallest alpha
    alpha = grid[best]

    xm, xsd = _scaler(x)
    ym_full = y.mean(axis=0)
    w_kept = _solve_ridge((x - xm) / xsd, (y_kept - ym_full[list(kept)]) / y_sd_full[list(kept)], alpha)
    weights = np.zeros((x.shape[1], y.shape[1]))
    weights[:, list(kept)] = w_kept
    ysd = np.where(y_sd_full > 0, y_sd_full, 1.0)
    return RidgeFit(
        weights=weights,
        alpha=alpha,
        x_mean=xm,
        x_sd=xsd,
        y_mean=ym_full,
        y_sd=ysd,
        cv_r2=scores[best],
        alpha_grid=grid,
        folds=k_folds,
        kept_dims=kept,
        seed=seed,
    )


def _check_test_shapes(fit: RidgeFit, x_test: np.ndarray, y_test: np.ndarray | None):
    if x_test.shape[1] != fit.n_features:
        raise AblationError(
            f"x_test has {x_test.shape[1]} columns, fit expects {fit.n_features}"
        )
    if y_test is not None and y_test.shape[1] != fit.n_outputs:
        raise AblationError(
            f"y_test has {y_test.shape[1]} columns, fit expects {fit.n_outputs}"
        )


def predict(fit: RidgeFit, x_test) -> np.ndarray:
    """Raw-space predictions for new feature rows."""
    x_test = _as_matrix(x_test, "x_test")
    _check_test_shapes(fit, x_test, None)
    std_pred = ((x_test - fit.x_mean) / fit.x_sd) @ fit.weights
    return fit.y_mean + fit.y_sd * std_pred


def residualize(fit: RidgeFit, x_test, y_test, *, standardized: bool = False) -> np.ndarray:
    """Subtract feature-predicted embeddings from observed ones.

    Predictions are mapped back to raw embedding space by default so the
    residuals live on the original scale; pass ``standardized=True`` to
    stay in standardized space instead.
    """
    x_test = _as_matrix(x_test, "x_test")
    y_test = _as_matrix(y_test, "y_test")
    if x_test.shape[0] != y_test.shape[0]:
        raise AblationError("x_test and y_test must have the same number of rows")
    _check_test_shapes(fit, x_test, y_test)
    if standardized:
        std_pred = ((x_test - fit.x_mean) / fit.x_sd) @ fit.weights
        return (y_test - fit.y_mean) / fit.y_sd - std_pred
    return y_test - predict(fit, x_test)


def _feature_column(features: FeatureTable, name: str, words: Sequence[str]) -> np.ndarray:
    column = features.features.get(name)
    if column is None:
        raise AblationError(
            f"feature table has no feature {name!r} (has {sorted(features.features)})"
        )
    missing = [w for w in words if w not in column]
    if missing:
        raise AblationError(f"no value of feature {name!r} for word {missing[0]!r}")
    return np.asarray([column[w] for w in words], dtype=float)[:, None]


def ablation_pipeline(
    embeddings: EmbeddingTable,
    behavioral: RDM,
    features: FeatureTable,
    feature_name: str,
    train_words: Sequence[str],
    test_words: Sequence[str],
    *,
    alpha_grid: Sequence[float] | None = None,
    k_folds: int = 5,
    seed: int = 0,
    method: str = "analytic",
    n_perm: int = 1000,
) -> AblationReport:
    """Quantify how much behavioral alignment one feature carries.

    Fits feature-to-embedding ridge weights on the training words,
    removes the predicted component from the test-word embeddings, and
    compares pre- and post-removal alignment with the behavioral data
    through a dependent-correlation test on the shared behavioral
    variable.
    """
    train = list(dict.fromkeys(train_words))
    overlap = set(train) & set(test_words)
    if overlap:
        raise AblationError(f"train and test words overlap: {sorted(overlap)[:3]}")
    if set(test_words) != set(behavioral.labels):
        raise AblationError("test words must match the behavioral labels")
    labels = behavioral.labels

    base_rdm = embedding_rdm(embeddings, labels)
    base = rsa(behavioral, base_rdm, method=method, n_perm=n_perm, seed=seed)

    fit = fit_ridge(
        _feature_column(features, feature_name, train),
        embeddings.matrix(train),
        alpha_grid=alpha_grid,
        k_folds=k_folds,
        seed=seed,
    )
    residuals = residualize(fit, _feature_column(features, feature_name, labels), embeddings.matrix(labels))
    ablated_rdm = cosine_rdm(labels, residuals)
    ablated = rsa(behavioral, ablated_rdm, method=method, n_perm=n_perm, seed=seed)

    r23 = spearman(condense(base_rdm).values, condense(ablated_rdm).values)
    williams = williams_t(base.rho, ablated.rho, r23, n=base.n_pairs)

    delta = base.rho - ablated.rho
    pct_drop = 100.0 * delta / base.rho if base.rho > 0 else float("nan")
    return AblationReport(
        feature_name=feature_name,
        base_rho=base.rho,
        ablated_rho=ablated.rho,
        delta=delta,
        pct_drop=pct_drop,
        williams=williams,
        train_size=len(train),
        model_source=embeddings.source_name,
        fit=fit,
    )


FIT_FORMAT = "ridge-fit/1"


def save_ridge_fit(fit: RidgeFit, stream: IO[str]) -> None:
    """Persist a fit as versioned JSON text; floats survive exactly."""
    payload = {
        "format": FIT_FORMAT,
        "alpha": fit.alpha,
        "alpha_grid": list(fit.alpha_grid),
        "folds": fit.folds,
        "seed": fit.seed,
        "cv_r2": fit.cv_r2,
        "kept_dims": list(fit.kept_dims),
        "x_mean": fit.x_mean.tolist(),
        "x_sd": fit.x_sd.tolist(),
        "y_mean": fit.y_mean.tolist(),
        "y_sd": fit.y_sd.tolist(),
        "weights": fit.weights.tolist(),
    }
    json.dump(payload, stream, indent=2, sort_keys=True)
    stream.write("\n")


def load_ridge_fit(stream: IO[str]) -> RidgeFit:
    payload = json.load(stream)
    if payload.get("format") != FIT_FORMAT:
        raise AblationError(f"unsupported fit format {payload.get('format')!r}")
    return RidgeFit(
        weights=np.asarray(payload["weights"], dtype=float),
        alpha=float(payload["alpha"]),
        x_mean=np.asarray(payload["x_mean"], dtype=float),
        x_sd=np.asarray(payload["x_sd"], dtype=float),
        y_mean=np.asarray(payload["y_mean"], dtype=float),
        y_sd=np.asarray(payload["y_sd"], dtype=float),
        cv_r2=float(payload["cv_r2"]),
        alpha_grid=tuple(float(a) for a in payload["alpha_grid"]),
        folds=int(payload["folds"]),
        kept_dims=tuple(int(i) for i in payload["kept_dims"]),
        seed=int(payload["seed"]),
    )


ABLATION_COLUMNS = [
    "feature",
    "model_source",
    "train_size",
    "base_rho",
    "ablated_rho",
    "delta",
    "pct_drop",
    "williams_t",
    "williams_df",
    "williams_p",
]


def write_ablation_reports(reports: Sequence[AblationReport], stream: IO[str]) -> None:
    writer = csv.writer(stream)
    writer.writerow(ABLATION_COLUMNS)
    for r in reports:
        writer.writerow(
            [
                r.feature_name,
                r.model_source,
                r.train_size,
                f"{r.base_rho:.17g}",
                f"{r.ablated_rho:.17g}",
                f"{r.delta:.17g}",
                f"{r.pct_drop:.17g}",
                f"{r.williams.t:.17g}",
                r.williams.df,
                f"{r.williams.p_value:.17g}",
            ]
        )
