"""Trace featurization and regression: presence/sequential features, OLS, LASSO.

Presence features are bag-of-actions indicators with the first template of
each dimension as the dropped reference category.  Sequential features keep
every indicator (position per dimension, within-step cross-dimension
interaction, within-dimension transitions of length two); the L1 penalty
resolves the collinearity that reference coding handles in OLS.

The LASSO solver is cyclic coordinate descent with soft-thresholding on
standardized columns, minimizing (1/2N)*sum((y - X beta)^2) + alpha*||beta||_1.
Each coordinate update solves its one-dimensional subproblem exactly, so the
objective never increases; fits stop when coefficients are stable and the KKT
conditions hold to tolerance.
"""

from __future__ import annotations

import csv
import itertools
import logging
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .actions import ActionChoice, ActionSpace
from .tree import Trace

logger = logging.getLogger(__name__)

LENGTH_COLUMN = "len.chars"

PRESENCE_SELECTORS = ("structure-only", "content-only", "both")


class FeatureError(ValueError):
    """Trace set or feature request is inconsistent with the action space."""


@dataclass(frozen=True)
class FeatureMatrix:
    """Dense named feature matrix over traces."""

    row_ids: tuple[str, ...]
    column_names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.values.shape != (len(self.row_ids), len(self.column_names)):
            raise FeatureError("feature values do not match row/column names")
        if len(set(self.column_names)) != len(self.column_names):
            raise FeatureError("feature column names must be unique")

    @property
    def n_rows(self) -> int:
        return len(self.row_ids)

    @property
    def n_columns(self) -> int:
        return len(self.column_names)

    def rows(self, row_ids: Sequence[str]) -> "FeatureMatrix":
        index = {row_id: position for position, row_id in enumerate(self.row_ids)}
        picks = [index[row_id] for row_id in row_ids]
        return FeatureMatrix(
            row_ids=tuple(row_ids),
            column_names=self.column_names,
            values=self.values[picks],
        )

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(("trace_id", *self.column_names))
            for row_id, row in zip(self.row_ids, self.values):
                writer.writerow((row_id, *(format(value, "g") for value in row)))


def presence_name(dimension: str, action: str) -> str:
    return f"presence.{dimension}.{action}"


def position_name(step: int, dimension: str, action: str) -> str:
    return f"pos[{step}].{dimension}.{action}"


def interaction_name(step: int, first_action: str, second_action: str) -> str:
    return f"step[{step}].{first_action}x{second_action}"


def transition_name(dimension: str, source: str, target: str, step: int) -> str:
    return f"trans.{dimension}.{source}->{target}[{step}->{step + 1}]"


def _resolve_selector(space: ActionSpace, selector) -> list[str]:
    if isinstance(selector, str):
        if selector == "both":
            return list(space.dimension_names)
        if selector in ("structure-only", "content-only"):
            wanted = 0 if selector == "structure-only" else 1
            if len(space.dimensions) <= wanted:
                raise FeatureError(
                    f"selector {selector!r} needs at least {wanted + 1} dimensions"
                )
            return [space.dimensions[wanted].name]
        raise FeatureError(f"unknown selector {selector!r}; use one of {PRESENCE_SELECTORS}")
    names = list(selector)
    for name in names:
        space.dimension(name)
    return names


def _check_trajectory(trace: Trace, space: ActionSpace) -> None:
    for choice in trace.trajectory:
        for dimension, action in choice.per_dimension:
            space.template(dimension, action)  # raises on unknown references


def presence_columns(space: ActionSpace, dimensions: Sequence[str]) -> list[str]:
    """One column per non-reference action; the first template is the reference."""
    names = []
    for dimension_name in dimensions:
        dimension = space.dimension(dimension_name)
        names.extend(
            presence_name(dimension_name, template.name)
            for template in dimension.templates[1:]
        )
    return names


def extract_presence_features(
    traces: Sequence[Trace],
    space: ActionSpace,
    dimensions_selector="both",
    *,
    include_length: bool = False,
) -> FeatureMatrix:
    """Bag-of-actions indicators over the selected dimensions."""
    dimensions = _resolve_selector(space, dimensions_selector)
    columns = presence_columns(space, dimensions)
    if include_length:
        columns = columns + [LENGTH_COLUMN]
    index = {name: position for position, name in enumerate(columns)}
    values = np.zeros((len(traces), len(columns)))
    selected = set(dimensions)
    for row, trace in enumerate(traces):
        _check_trajectory(trace, space)
        for choice in trace.trajectory:
            for dimension, action in choice.per_dimension:
                if dimension not in selected:
                    continue
                name = presence_name(dimension, action)
                if name in index:  # reference actions carry no column
                    values[row, index[name]] = 1.0
        if include_length:
            values[row, index[LENGTH_COLUMN]] = float(len(trace.final_answer))
    return FeatureMatrix(
        row_ids=tuple(trace.trace_id for trace in traces),
        column_names=tuple(columns),
        values=values,
    )


def sequential_columns(space: ActionSpace, depth: int) -> list[str]:
    """Position, within-step interaction, and within-dimension transition columns."""
    names = []
    for step in range(1, depth + 1):
        for dimension in space.dimensions:
            names.extend(
                position_name(step, dimension.name, template.name)
                for template in dimension.templates
            )
    for step in range(1, depth + 1):
        for first, second in itertools.combinations(space.dimensions, 2):
            names.extend(
                interaction_name(step, a.name, b.name)
                for a in first.templates
                for b in second.templates
            )
    for dimension in space.dimensions:
        for step in range(1, depth):
            names.extend(
                transition_name(dimension.name, source.name, target.name, step)
                for source in dimension.templates
                for target in dimension.templates
            )
    return names


def active_sequential_features(trajectory: Sequence[ActionChoice]) -> list[str]:
    """Names of the indicators a fixed-length trajectory switches on."""
    names = []
    for step, choice in enumerate(trajectory, start=1):
        for dimension, action in choice.per_dimension:
            names.append(position_name(step, dimension, action))
        for (_, first), (_, second) in itertools.combinations(choice.per_dimension, 2):
            names.append(interaction_name(step, first, second))
    for step in range(1, len(trajectory)):
        previous, current = trajectory[step - 1], trajectory[step]
        for (dimension, source), (_, target) in zip(
            previous.per_dimension, current.per_dimension
        ):
            names.append(transition_name(dimension, source, target, step))
    return names


def extract_sequential_features(
    traces: Sequence[Trace],
    space: ActionSpace,
    depth: int,
    *,
    include_length: bool = False,
) -> FeatureMatrix:
    """Sequential indicators for a fixed-length trace set.

    Raises on variable-length trace sets: positional features are undefined
    there, so the caller must filter to one length first.
    """
    columns = sequential_columns(space, depth)
    if include_length:
        columns = columns + [LENGTH_COLUMN]
    index = {name: position for position, name in enumerate(columns)}
    values = np.zeros((len(traces), len(columns)))
    for row, trace in enumerate(traces):
        if len(trace.trajectory) != depth:
            raise FeatureError(
                f"trace {trace.trace_id} has {len(trace.trajectory)} steps, expected {depth}; "
                "filter the trace set to a single length first"
            )
        _check_trajectory(trace, space)
        for name in active_sequential_features(trace.trajectory):
            values[row, index[name]] = 1.0
        if include_length:
            values[row, index[LENGTH_COLUMN]] = float(len(trace.final_answer))
    return FeatureMatrix(
        row_ids=tuple(trace.trace_id for trace in traces),
        column_names=tuple(columns),
        values=values,
    )


@dataclass
class RegressionFit:
    """Fitted linear model with cross-validation and evaluation metadata."""

    model_kind: str
    coefficients: dict[str, float]
    intercept: float
    alpha: float = 0.0
    cv_curve: tuple[tuple[float, float], ...] = ()
    train_r2: float = 0.0
    test_r2: float | None = None
    test_r2_ci: tuple[float, float] | None = None
    nonzero_count: int = 0
    diagnostics: dict = field(default_factory=dict)


def r_squared(y: np.ndarray, predicted: np.ndarray) -> float:
    sst = float(np.sum((y - np.mean(y)) ** 2))
    if sst == 0.0:
        raise ValueError("R^2 is undefined when the outcome has zero variance")
    sse = float(np.sum((y - predicted) ** 2))
    return 1.0 - sse / sst


def predict(fit: RegressionFit, features: FeatureMatrix) -> np.ndarray:
    try:
        coefficients = np.array([fit.coefficients[name] for name in features.column_names])
    except KeyError as exc:
        raise FeatureError(f"fit has no coefficient for feature {exc}") from exc
    return fit.intercept + features.values @ coefficients


def fit_ols(features: FeatureMatrix, y: Sequence[float]) -> RegressionFit:
    """Least squares via orthogonal decomposition (minimum-norm on rank deficiency)."""
    y = np.asarray(y, dtype=float)
    if features.n_rows == 0 or features.n_rows != len(y):
        raise ValueError("feature rows and outcomes must align and be nonempty")
    X = features.values
    x_mean = X.mean(axis=0)
    y_mean = float(y.mean())
    beta, _, rank, _ = np.linalg.lstsq(X - x_mean, y - y_mean, rcond=None)
    if rank < features.n_columns:
        logger.info(
            "design matrix rank %d < %d columns; minimum-norm solution used",
            rank,
            features.n_columns,
        )
    intercept = y_mean - float(x_mean @ beta)
    predicted = intercept + X @ beta
    return RegressionFit(
        model_kind="ols",
        coefficients=dict(zip(features.column_names, map(float, beta))),
        intercept=intercept,
        train_r2=r_squared(y, predicted),
        nonzero_count=int(np.sum(beta != 0.0)),
        diagnostics={"rank": int(rank), "n_columns": features.n_columns},
    )


def soft_threshold(value: float, threshold: float) -> float:
    if value > threshold:
        return value - threshold
    if value < -threshold:
        return value + threshold
    return 0.0


def _standardize(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Zero-mean, unit-variance columns (population std); constants become zeros."""
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    keep = std > 0.0
    safe_std = np.where(keep, std, 1.0)
    Xs = (X - mean) / safe_std
    Xs[:, ~keep] = 0.0
    return np.asfortranarray(Xs), mean, safe_std, keep


def lasso_alpha_max(Xs: np.ndarray, y_centered: np.ndarray) -> float:
    """Smallest penalty that forces the all-zero solution on standardized data."""
    n = Xs.shape[0]
    return float(np.max(np.abs(Xs.T @ y_centered)) / n)


def default_alpha_grid(alpha_max: float, size: int = 50, decades: float = 4.0) -> list[float]:
    """Log-spaced grid from alpha_max down to alpha_max * 10**-decades."""
    if alpha_max <= 0.0:
        return [0.0]
    return list(np.geomspace(alpha_max, alpha_max * 10.0**-decades, num=size))


def _coordinate_descent(
    Xs: np.ndarray,
    y_centered: np.ndarray,
    alpha: float,
    beta: np.ndarray | None = None,
    tol: float = 1e-7,
    max_sweeps: int = 10_000,
    kkt_tol: float = 5e-7,
) -> tuple[np.ndarray, list[float], int]:
    """Cyclic soft-threshold updates; returns (beta, objective path, sweeps).

    Uses the usual active-set strategy: after each full pass, only nonzero
    coordinates are iterated until stable, then a full pass re-checks the
    whole column set.  Convergence requires both a stable coefficient vector
    and the KKT stationarity bound, so converged fits always satisfy
    |x_j^T r / N| <= alpha (+tol), with equality on active coordinates.
    """
    n, p = Xs.shape
    beta = np.zeros(p) if beta is None else beta.copy()
    col_norms = np.einsum("ij,ij->j", Xs, Xs) / n
    live = np.nonzero(col_norms > 0.0)[0]
    residual = y_centered - Xs @ beta
    objective_path: list[float] = []

    def objective() -> float:
        return float(residual @ residual) / (2 * n) + alpha * float(np.sum(np.abs(beta)))

    def sweep(indices) -> float:
        nonlocal residual
        max_change = 0.0
        for j in indices:
            norm = col_norms[j]
            column = Xs[:, j]
            rho = (column @ residual) / n + beta[j] * norm
            updated = soft_threshold(rho, alpha) / norm
            change = updated - beta[j]
            if change != 0.0:
                residual -= column * change
                beta[j] = updated
                max_change = max(max_change, abs(change))
        objective_path.append(objective())
        return max_change

    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        max_change = sweep(live)
        while max_change >= tol and sweeps < max_sweeps:
            active = np.nonzero(beta)[0]
            if active.size == 0:
                break
            sweeps += 1
            max_change = sweep(active)
        if max_change < tol:
            gradient = np.abs(Xs.T @ residual) / n
            bound_ok = np.all(gradient[live] <= alpha + kkt_tol)
            active_mask = (col_norms > 0.0) & (beta != 0.0)
            tight_ok = np.all(np.abs(gradient[active_mask] - alpha) <= kkt_tol)
            if bound_ok and tight_ok:
                break
    return beta, objective_path, sweeps


def cv_fold_indices(n: int, folds: int, seed: int) -> list[np.ndarray]:
    """Contiguous fold blocks over a seeded shuffle of the row indices."""
    if folds < 2:
        raise ValueError("cross-validation needs at least 2 folds")
    order = np.random.default_rng(seed).permutation(n)
    return [np.sort(block) for block in np.array_split(order, folds)]


def _lasso_path_fit(
    X: np.ndarray, y: np.ndarray, grid: Sequence[float], stop_alpha: float | None = None
):
    """Warm-started fits along a descending penalty path.

    Yields (alpha, beta on standardized scale, objective path); standardization
    parameters are computed on this X.
    """
    Xs, mean, std, keep = _standardize(X)
    y_centered = y - y.mean()
    beta = np.zeros(X.shape[1])
    for alpha in grid:
        beta, objective_path, sweeps = _coordinate_descent(Xs, y_centered, alpha, beta)
        yield alpha, beta.copy(), objective_path, sweeps, (mean, std, keep)
        if stop_alpha is not None and alpha == stop_alpha:
            return


def _unstandardize(
    beta_std: np.ndarray, mean: np.ndarray, std: np.ndarray, y_mean: float
) -> tuple[np.ndarray, float]:
    beta = beta_std / std
    intercept = y_mean - float(mean @ beta)
    return beta, intercept


def fit_lasso(
    features: FeatureMatrix,
    y: Sequence[float],
    alpha_grid: Sequence[float] | None = None,
    folds: int = 10,
    seed: int = 0,
) -> RegressionFit:
    """Cross-validated LASSO: pick alpha by mean fold R^2, refit on all rows.

    Columns are standardized internally (constant columns dropped to zero
    coefficients); reported coefficients are on the original scale.
    """
    y = np.asarray(y, dtype=float)
    X = features.values
    if X.shape[0] != len(y) or X.shape[0] == 0:
        raise ValueError("feature rows and outcomes must align and be nonempty")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("features and outcomes must be finite")

    if alpha_grid is None:
        Xs_full, _, _, _ = _standardize(X)
        alpha_grid = default_alpha_grid(lasso_alpha_max(Xs_full, y - y.mean()))
    grid = sorted({float(alpha) for alpha in alpha_grid}, reverse=True)
    if not grid or grid[-1] < 0:
        raise ValueError("alpha grid must be nonempty and nonnegative")

    fold_blocks = cv_fold_indices(len(y), folds, seed)
    fold_r2 = np.full((len(grid), len(fold_blocks)), np.nan)
    for fold_index, val_idx in enumerate(fold_blocks):
        mask = np.ones(len(y), dtype=bool)
        mask[val_idx] = False
        X_train, y_train = X[mask], y[mask]
        X_val, y_val = X[val_idx], y[val_idx]
        val_sst = float(np.sum((y_val - y_val.mean()) ** 2))
        for alpha_index, (alpha, beta_std, _, _, (mean, std, _)) in enumerate(
            _lasso_path_fit(X_train, y_train, grid)
        ):
            beta, intercept = _unstandardize(beta_std, mean, std, float(y_train.mean()))
            predicted = intercept + X_val @ beta
            if val_sst == 0.0:
                continue  # leaves NaN; ignored by the nan-aware mean below
            fold_r2[alpha_index, fold_index] = 1.0 - float(
                np.sum((y_val - predicted) ** 2)
            ) / val_sst

    with np.errstate(invalid="ignore"):
        mean_r2 = np.nanmean(fold_r2, axis=1)
    best_index = int(np.nanargmax(mean_r2))
    best_alpha = grid[best_index]

    final = None
    for step in _lasso_path_fit(X, y, grid[: best_index + 1], stop_alpha=best_alpha):
        final = step
    _, beta_std, objective_path, sweeps, (mean, std, keep) = final
    beta, intercept = _unstandardize(beta_std, mean, std, float(y.mean()))
    predicted = intercept + X @ beta
    dropped = [
        name for name, kept in zip(features.column_names, keep) if not kept
    ]
    if dropped:
        logger.info("dropped %d constant columns", len(dropped))
    return RegressionFit(
        model_kind="lasso",
        coefficients=dict(zip(features.column_names, map(float, beta))),
        intercept=intercept,
        alpha=best_alpha,
        cv_curve=tuple(
            (alpha, float(score)) for alpha, score in zip(grid, mean_r2)
        ),
        train_r2=r_squared(y, predicted),
        nonzero_count=int(np.sum(beta != 0.0)),
        diagnostics={
            "objective_path": [float(value) for value in objective_path],
            "sweeps": sweeps,
            "dropped_constant_columns": dropped,
            "folds": folds,
            "seed": seed,
        },
    )


def lasso_kkt_gaps(
    features: FeatureMatrix, y: Sequence[float], fit: RegressionFit
) -> dict[str, float]:
    """Stationarity diagnostics of a fit on its training data.

    Returns the largest |x_j^T r / N| - alpha excess over all live columns and
    the largest | |x_j^T r / N| - alpha | over active columns, both on the
    standardized scale the solver used.
    """
    y = np.asarray(y, dtype=float)
    Xs, _, std, keep = _standardize(features.values)
    beta = np.array([fit.coefficients[name] for name in features.column_names])
    beta_std = beta * std
    residual = (y - y.mean()) - Xs @ beta_std
    gradient = np.abs(Xs.T @ residual) / len(y)
    live = keep
    active = live & (beta_std != 0.0)
    bound_excess = float(np.max(gradient[live] - fit.alpha)) if live.any() else 0.0
    tightness = (
        float(np.max(np.abs(gradient[active] - fit.alpha))) if active.any() else 0.0
    )
    return {"bound_excess": bound_excess, "active_tightness": tightness}


def evaluate_fit(
    fit: RegressionFit,
    features_test: FeatureMatrix,
    y_test: Sequence[float],
    bootstrap_iters: int = 1000,
    seed: int = 0,
) -> tuple[float, tuple[float, float]]:
    """Held-out R^2 with a percentile bootstrap confidence interval."""
    y_test = np.asarray(y_test, dtype=float)
    predicted = predict(fit, features_test)
    test_r2 = r_squared(y_test, predicted)
    rng = np.random.default_rng(seed)
    samples = np.full(bootstrap_iters, np.nan)
    n = len(y_test)
    for iteration in range(bootstrap_iters):
        picks = rng.integers(0, n, size=n)
        y_pick = y_test[picks]
        sst = float(np.sum((y_pick - y_pick.mean()) ** 2))
        if sst == 0.0:
            continue
        sse = float(np.sum((y_pick - predicted[picks]) ** 2))
        samples[iteration] = 1.0 - sse / sst
    low, high = np.nanpercentile(samples, [2.5, 97.5])
    return test_r2, (float(low), float(high))


def split_train_test(
    traces: Sequence[Trace],
    train_fraction: float = 0.6,
    seed: int = 0,
    *,
    drop_exact_duplicates: bool = False,
) -> tuple[list[str], list[str]]:
    """Seeded uniform split of trace ids, optionally deduplicating answers first."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train fraction must lie strictly between 0 and 1")
    pool = list(traces)
    if drop_exact_duplicates:
        seen: set[str] = set()
        deduped = []
        for trace in pool:
            if trace.final_answer in seen:
                continue
            seen.add(trace.final_answer)
            deduped.append(trace)
        removed = len(pool) - len(deduped)
        if removed:
            logger.info("removed %d exact duplicate answers before splitting", removed)
        pool = deduped
    ids = [trace.trace_id for trace in pool]
    random.Random(seed).shuffle(ids)
    cut = int(len(ids) * train_fraction)
    return ids[:cut], ids[cut:]
