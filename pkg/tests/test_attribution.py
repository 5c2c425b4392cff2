import itertools
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import build_trace
from treesteer.actions import enumerate_choices
from treesteer.attribution import (
    FeatureError,
    FeatureMatrix,
    cv_fold_indices,
    default_alpha_grid,
    evaluate_fit,
    extract_presence_features,
    extract_sequential_features,
    fit_lasso,
    fit_ols,
    lasso_alpha_max,
    lasso_kkt_gaps,
    predict,
    r_squared,
    soft_threshold,
    split_train_test,
)


def _random_traces(space, count, depth, seed, answer_of=None):
    rng = random.Random(seed)
    n_choices = space.choice_count()
    traces = []
    for index in range(count):
        picks = [rng.randrange(n_choices) for _ in range(depth)]
        answer = answer_of(index, picks) if answer_of else f"answer {index}"
        traces.append(build_trace(space, picks, tree_seed=index, answer=answer))
    return traces


def _brute_force_sequential(trace, space, depth):
    """Independent extractor: scans every possible indicator explicitly."""
    actions_at = [choice.as_dict() for choice in trace.trajectory]
    active = set()
    for k in range(1, depth + 1):
        for dim in space.dimensions:
            for template in dim.templates:
                if actions_at[k - 1][dim.name] == template.name:
                    active.add(f"pos[{k}].{dim.name}.{template.name}")
    dims = list(space.dimensions)
    for k in range(1, depth + 1):
        for first_index in range(len(dims)):
            for second_index in range(first_index + 1, len(dims)):
                a = actions_at[k - 1][dims[first_index].name]
                b = actions_at[k - 1][dims[second_index].name]
                active.add(f"step[{k}].{a}x{b}")
    for dim in space.dimensions:
        for k in range(1, depth):
            source = actions_at[k - 1][dim.name]
            target = actions_at[k][dim.name]
            active.add(f"trans.{dim.name}.{source}->{target}[{k}->{k + 1}]")
    return active


# ---------------------------------------------------------------- features


def test_presence_column_counts_10x10(argument_space):
    traces = _random_traces(argument_space, 5, 3, seed=0)
    m1a = extract_presence_features(traces, argument_space, "structure-only")
    m1b = extract_presence_features(traces, argument_space, "content-only")
    m1c = extract_presence_features(traces, argument_space, "both")
    assert m1a.n_columns == 9
    assert m1b.n_columns == 9
    assert m1c.n_columns == 18


def test_presence_reference_action_gives_zero_row(argument_space):
    traces = [build_trace(argument_space, [0, 0, 0])]  # first choice = both references
    features = extract_presence_features(traces, argument_space, "both")
    assert features.values.sum() == 0.0


def test_presence_marks_any_position(argument_space):
    choices = enumerate_choices(argument_space)
    # index 11 = second structure, second subtopic
    traces = [build_trace(argument_space, [0, 11, 0])]
    features = extract_presence_features(traces, argument_space, "both")
    row = dict(zip(features.column_names, features.values[0]))
    assert row["presence.structure.conditional"] == 1.0
    assert row["presence.subtopic.rights_and_liberties"] == 1.0
    assert sum(row.values()) == 2.0


def test_sequential_column_count_formula(argument_space):
    columns = extract_sequential_features(
        _random_traces(argument_space, 2, 3, seed=1), argument_space, 3
    ).column_names
    assert len(columns) == 3 * 20 + 3 * 100 + 2 * 200 == 760


def test_sequential_single_trace_bit_counts(argument_space):
    depth = 3
    traces = _random_traces(argument_space, 1, depth, seed=2)
    features = extract_sequential_features(traces, argument_space, depth)
    row = features.values[0]
    # d position bits per dimension, d interaction bits, d-1 transitions per dimension.
    assert row.sum() == depth * 2 + depth + (depth - 1) * 2


def test_sequential_matches_brute_force_on_random_trajectories(argument_space):
    depth = 3
    traces = _random_traces(argument_space, 200, depth, seed=3)
    features = extract_sequential_features(traces, argument_space, depth)
    for row_index, trace in enumerate(traces):
        expected = _brute_force_sequential(trace, argument_space, depth)
        active = {
            name
            for name, value in zip(features.column_names, features.values[row_index])
            if value == 1.0
        }
        assert active == expected


def test_sequential_contains_presence_information(argument_space):
    # max over positions of pos[k].dim.a equals the presence indicator.
    depth = 3
    traces = _random_traces(argument_space, 50, depth, seed=4)
    sequential = extract_sequential_features(traces, argument_space, depth)
    presence = extract_presence_features(traces, argument_space, "both")
    seq_cols = {name: i for i, name in enumerate(sequential.column_names)}
    for p_index, p_name in enumerate(presence.column_names):
        _, dim, action = p_name.split(".")
        positions = [seq_cols[f"pos[{k}].{dim}.{action}"] for k in range(1, depth + 1)]
        reconstructed = sequential.values[:, positions].max(axis=1)
        assert np.array_equal(reconstructed, presence.values[:, p_index])


def test_variable_length_traces_rejected(argument_space):
    traces = [build_trace(argument_space, [0, 1]), build_trace(argument_space, [0, 1, 2])]
    with pytest.raises(FeatureError, match="filter"):
        extract_sequential_features(traces, argument_space, 3)


def test_unknown_action_rejected(argument_space, tiny_space):
    foreign = [build_trace(tiny_space, [0, 1, 2])]
    with pytest.raises(Exception):
        extract_sequential_features(foreign, argument_space, 3)


def test_length_column_optional(argument_space):
    traces = [build_trace(argument_space, [0, 1, 2], answer="seven77")]
    features = extract_sequential_features(traces, argument_space, 3, include_length=True)
    assert features.column_names[-1] == "len.chars"
    assert features.values[0, -1] == 7.0


def test_feature_csv_round_trip_shape(argument_space, tmp_path):
    traces = _random_traces(argument_space, 3, 2, seed=5)
    features = extract_sequential_features(traces, argument_space, 2)
    path = tmp_path / "features.csv"
    features.to_csv(path)
    header = path.read_text(encoding="utf-8").splitlines()[0]
    assert header.split(",")[0] == "trace_id"
    assert len(header.split(",")) == features.n_columns + 1


# ---------------------------------------------------------------- OLS


def _matrix(values, names=None):
    values = np.asarray(values, dtype=float)
    names = names or [f"f{i}" for i in range(values.shape[1])]
    return FeatureMatrix(
        row_ids=tuple(f"r{i}" for i in range(values.shape[0])),
        column_names=tuple(names),
        values=values,
    )


def test_ols_exact_fit_recovers_coefficients():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 4))
    beta = np.array([1.5, -2.0, 0.0, 0.5])
    y = 3.0 + X @ beta
    fit = fit_ols(_matrix(X), y)
    assert fit.train_r2 == pytest.approx(1.0, abs=1e-12)
    assert fit.intercept == pytest.approx(3.0, abs=1e-9)
    for name, value in zip(_matrix(X).column_names, beta):
        assert fit.coefficients[name] == pytest.approx(value, abs=1e-9)


def test_ols_all_zero_features():
    X = np.zeros((10, 3))
    y = np.arange(10.0)
    fit = fit_ols(_matrix(X), y)
    assert all(value == 0.0 for value in fit.coefficients.values())
    assert fit.intercept == pytest.approx(float(y.mean()))
    assert fit.train_r2 == pytest.approx(0.0)


def test_ols_matches_normal_equations_oracle():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(50, 5))
    y = rng.normal(size=50)
    fit = fit_ols(_matrix(X), y)
    # Independent oracle: solve the normal equations with an explicit intercept column.
    design = np.hstack([np.ones((50, 1)), X])
    theta = np.linalg.solve(design.T @ design, design.T @ y)
    assert fit.intercept == pytest.approx(theta[0], abs=1e-8)
    for index, name in enumerate(_matrix(X).column_names):
        assert fit.coefficients[name] == pytest.approx(theta[index + 1], abs=1e-8)


def test_ols_empty_input_errors():
    with pytest.raises(ValueError):
        fit_ols(_matrix(np.zeros((0, 2))), [])


# ---------------------------------------------------------------- LASSO


def test_soft_threshold():
    assert soft_threshold(0.5, 0.2) == pytest.approx(0.3)
    assert soft_threshold(-0.5, 0.2) == pytest.approx(-0.3)
    assert soft_threshold(0.1, 0.2) == 0.0


def test_lasso_alpha_zero_matches_ols():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(60, 8))
    y = X @ rng.normal(size=8) + 0.1 * rng.normal(size=60)
    features = _matrix(X)
    lasso = fit_lasso(features, y, alpha_grid=[0.0], folds=3, seed=0)
    ols = fit_ols(features, y)
    for name in features.column_names:
        assert lasso.coefficients[name] == pytest.approx(ols.coefficients[name], abs=1e-6)
    assert lasso.intercept == pytest.approx(ols.intercept, abs=1e-6)


def test_lasso_alpha_max_forces_all_zero():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(80, 6))
    y = X @ rng.normal(size=6) + rng.normal(size=80)
    Xs = (X - X.mean(axis=0)) / X.std(axis=0)
    alpha_max = lasso_alpha_max(Xs, y - y.mean())
    fit = fit_lasso(_matrix(X), y, alpha_grid=[alpha_max], folds=3)
    assert all(value == 0.0 for value in fit.coefficients.values())
    assert fit.intercept == pytest.approx(float(y.mean()))
    bigger = fit_lasso(_matrix(X), y, alpha_grid=[2 * alpha_max], folds=3)
    assert all(value == 0.0 for value in bigger.coefficients.values())


def test_lasso_one_feature_soft_threshold_closed_form():
    # Standardized x with x^T y / N = 0.5; the solution is S(0.5, alpha).
    x = np.array([-1.0] * 4 + [1.0] * 4)
    y = np.array([-0.5] * 4 + [0.5] * 4)
    fit = fit_lasso(_matrix(x[:, None]), y, alpha_grid=[0.2], folds=2, seed=3)
    assert fit.coefficients["f0"] == pytest.approx(0.3, abs=1e-10)
    assert fit.intercept == pytest.approx(0.0, abs=1e-10)


def test_lasso_objective_path_never_increases():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(100, 20))
    y = X[:, 0] * 2.0 - X[:, 3] + 0.5 * rng.normal(size=100)
    fit = fit_lasso(_matrix(X), y, alpha_grid=[0.05], folds=3)
    path = fit.diagnostics["objective_path"]
    for earlier, later in zip(path, path[1:]):
        assert later <= earlier + 1e-12 * (1 + abs(earlier))


def test_lasso_kkt_conditions_hold():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(120, 30))
    y = X[:, :5] @ rng.normal(size=5) + 0.3 * rng.normal(size=120)
    features = _matrix(X)
    fit = fit_lasso(features, y, alpha_grid=[0.1], folds=3)
    gaps = lasso_kkt_gaps(features, y, fit)
    assert gaps["bound_excess"] <= 1e-6
    assert gaps["active_tightness"] <= 1e-6


def test_lasso_selects_alpha_by_cv():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(200, 10))
    y = 1.5 * X[:, 0] + 0.2 * rng.normal(size=200)
    fit = fit_lasso(_matrix(X), y, folds=5, seed=0)
    assert len(fit.cv_curve) == 50
    alphas = [alpha for alpha, _ in fit.cv_curve]
    assert alphas == sorted(alphas, reverse=True)
    best_score, best_alpha = max((score, alpha) for alpha, score in fit.cv_curve)
    assert fit.alpha == best_alpha
    assert fit.coefficients["f0"] != 0.0
    assert fit.nonzero_count <= 10


def test_lasso_rejects_non_finite():
    X = np.ones((5, 2))
    X[0, 0] = np.nan
    with pytest.raises(ValueError, match="finite"):
        fit_lasso(_matrix(X), np.ones(5), alpha_grid=[0.1], folds=2)


def test_constant_columns_dropped_to_zero():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(50, 3))
    X[:, 1] = 2.5
    y = X[:, 0] + 0.1 * rng.normal(size=50)
    fit = fit_lasso(_matrix(X), y, alpha_grid=[0.01], folds=2)
    assert fit.coefficients["f1"] == 0.0
    assert "f1" in fit.diagnostics["dropped_constant_columns"]


def test_default_alpha_grid_shape():
    grid = default_alpha_grid(1.0)
    assert len(grid) == 50
    assert grid[0] == pytest.approx(1.0)
    assert grid[-1] == pytest.approx(1e-4)


def test_cv_curve_matches_independent_refit():
    # Recompute the reported mean fold R^2 at 3 grid points with cold
    # single-alpha fits over the same fold assignment.  Full-rank Gaussian
    # features keep the solution unique, so warm and cold starts agree.
    rng = np.random.default_rng(11)
    X = rng.normal(size=(60, 8))
    y = X @ np.array([1.0, -0.5, 0.0, 0.0, 0.3, 0.0, 0.0, 0.0]) + 0.2 * rng.normal(size=60)
    features = _matrix(X)
    fit = fit_lasso(features, y, folds=5, seed=4)
    curve = list(fit.cv_curve)
    for index in (0, len(curve) // 2, len(curve) - 1):
        alpha, reported = curve[index]
        refit_scores = []
        for val_idx in cv_fold_indices(len(y), 5, seed=4):
            mask = np.ones(len(y), dtype=bool)
            mask[val_idx] = False
            row_ids = [f"r{i}" for i in np.where(mask)[0]]
            fold_fit = fit_lasso(
                features.rows(row_ids), y[mask], alpha_grid=[alpha], folds=2, seed=0
            )
            predictions = predict(fold_fit, features.rows([f"r{i}" for i in val_idx]))
            y_val = y[val_idx]
            sst = float(np.sum((y_val - y_val.mean()) ** 2))
            refit_scores.append(1.0 - float(np.sum((y_val - predictions) ** 2)) / sst)
        assert np.nanmean(refit_scores) == pytest.approx(reported, abs=1e-6)


def test_cv_fold_indices_partition():
    folds = cv_fold_indices(23, 5, seed=2)
    assert len(folds) == 5
    joined = np.concatenate(folds)
    assert sorted(joined.tolist()) == list(range(23))
    assert cv_fold_indices(23, 5, seed=2)[0].tolist() == folds[0].tolist()


# ---------------------------------------------------------------- evaluation


def test_evaluate_perfect_predictions():
    X = np.eye(4)
    fit = fit_ols(_matrix(X), np.array([1.0, 2.0, 3.0, 4.0]))
    r2, (low, high) = evaluate_fit(fit, _matrix(X), [1.0, 2.0, 3.0, 4.0], bootstrap_iters=100)
    assert r2 == pytest.approx(1.0, abs=1e-9)
    assert low == pytest.approx(1.0, abs=1e-9)
    assert high == pytest.approx(1.0, abs=1e-9)


def test_evaluate_mean_only_prediction_is_zero_r2():
    y = np.array([1.0, 2.0, 3.0, 4.0])
    X = np.zeros((4, 1))
    fit = fit_ols(_matrix(X), y)
    r2, _ = evaluate_fit(fit, _matrix(X), y, bootstrap_iters=50)
    assert r2 == pytest.approx(0.0, abs=1e-12)


def test_evaluate_rejects_zero_variance_outcome():
    X = np.eye(3)
    fit = fit_ols(_matrix(X), np.array([1.0, 2.0, 3.0]))
    with pytest.raises(ValueError, match="zero variance"):
        evaluate_fit(fit, _matrix(X), [2.0, 2.0, 2.0])


def test_predict_requires_known_feature_names():
    X = np.ones((3, 1))
    fit = fit_ols(_matrix(X, names=["known"]), np.arange(3.0))
    with pytest.raises(FeatureError):
        predict(fit, _matrix(X, names=["unknown"]))


def test_nesting_sequential_ols_beats_presence_ols(argument_space):
    # The sequential feature space linearly contains the presence space, so
    # unpenalized least squares can never fit the training data worse.
    rng = np.random.default_rng(8)
    traces = _random_traces(argument_space, 120, 3, seed=9)
    y = rng.normal(size=120)
    presence = extract_presence_features(traces, argument_space, "both")
    sequential = extract_sequential_features(traces, argument_space, 3)
    r2_presence = fit_ols(presence, y).train_r2
    r2_sequential = fit_ols(sequential, y).train_r2
    assert r2_sequential >= r2_presence - 1e-9


# ---------------------------------------------------------------- split


def test_split_fractions():
    traces = _random_traces_space_free(5000)
    train, test = split_train_test(traces, 0.6, seed=1)
    assert len(train) == 3000 and len(test) == 2000
    train_small, test_small = split_train_test(traces[:10], 0.5, seed=1)
    assert len(train_small) == 5 and len(test_small) == 5


def _random_traces_space_free(count):
    from treesteer.actions import ActionSpace, ActionTemplate, Dimension

    space = ActionSpace(
        dimensions=(Dimension("d", (ActionTemplate("a", "x", prefix="A"), ActionTemplate("b", "x", prefix="B"))),)
    )
    return _random_traces(space, count, 1, seed=0)


def test_split_is_seeded_and_disjoint():
    traces = _random_traces_space_free(100)
    first = split_train_test(traces, 0.6, seed=3)
    second = split_train_test(traces, 0.6, seed=3)
    other = split_train_test(traces, 0.6, seed=4)
    assert first == second
    assert first != other
    assert set(first[0]).isdisjoint(first[1])


def test_split_dedupes_exact_answers():
    from treesteer.actions import ActionSpace, ActionTemplate, Dimension

    space = ActionSpace(
        dimensions=(Dimension("d", (ActionTemplate("a", "x", prefix="A"),)),)
    )
    traces = [
        build_trace(space, [0], tree_seed=i, answer="duplicate" if i < 3 else f"unique {i}")
        for i in range(10)
    ]
    train, test = split_train_test(traces, 0.5, seed=0, drop_exact_duplicates=True)
    assert len(train) + len(test) == 8  # two of the three duplicates removed


@settings(max_examples=20, deadline=None)
@given(n=st.integers(4, 60), seed=st.integers(0, 1000))
def test_split_covers_all_ids(n, seed):
    traces = _random_traces_space_free(n)
    train, test = split_train_test(traces, 0.6, seed=seed)
    assert sorted(train + test) == sorted(t.trace_id for t in traces)
