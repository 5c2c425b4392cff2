"""Trajectory enumeration, model-guided ranking, targeted generation, matching.

A fitted sequential model scores any fixed-depth action sequence as intercept
plus the sum of its active feature coefficients, which lets the full
trajectory space be ranked in a single streaming pass without materializing
it.  Top unobserved plans are regenerated exactly through the forced
controller, then compared against baselines on length-matched pools.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import random
from bisect import bisect_left
from dataclasses import dataclass, replace
from typing import Iterator, Sequence

from .actions import ActionChoice, ActionSpace, enumerate_choices
from .attribution import LENGTH_COLUMN, RegressionFit, active_sequential_features
from .beam import NoSolutionError, SearchConfig, TreeModules, run_tree
from .controllers import ForcedController
from .gateway import GatewayError
from .preference import BTFit, Judgment, JudgeError, fit_bradley_terry, judge_pair, sample_pairs
from .tree import Trace

logger = logging.getLogger(__name__)

TrajectoryKey = tuple[tuple[str, ...], ...]


@dataclass(frozen=True)
class TrajectoryPlan:
    """A fixed-depth sequence of action choices, optionally with a prediction."""

    steps: tuple[ActionChoice, ...]
    predicted_score: float | None = None

    def __post_init__(self) -> None:
        if not self.steps:
            raise ValueError("a trajectory plan needs at least one step")
        if any(choice.is_finish for choice in self.steps):
            raise ValueError("plans hold content actions only; FINISH is implicit")

    @property
    def depth(self) -> int:
        return len(self.steps)

    def key(self) -> TrajectoryKey:
        return trajectory_key(self.steps)


def trajectory_key(choices: Sequence[ActionChoice]) -> TrajectoryKey:
    """Canonical hashable form of a trajectory (action names in dimension order)."""
    return tuple(tuple(action for _, action in choice.per_dimension) for choice in choices)


def enumerate_trajectories(space: ActionSpace, depth: int) -> Iterator[TrajectoryPlan]:
    """Stream all depth-length plans in lexicographic choice order."""
    choices = enumerate_choices(space, include_finish=False)
    for combo in itertools.product(choices, repeat=depth):
        yield TrajectoryPlan(steps=combo)


def score_trajectory(fit: RegressionFit, plan: TrajectoryPlan) -> float:
    """Predicted outcome: intercept plus the plan's active coefficients.

    Equals extracting the plan's sequential features and taking the dot
    product with the fitted coefficient vector.
    """
    if LENGTH_COLUMN in fit.coefficients:
        raise ValueError(
            "fits with a length column cannot score plans; refit without it"
        )
    total = fit.intercept
    try:
        for name in active_sequential_features(plan.steps):
            total += fit.coefficients[name]
    except KeyError as exc:
        raise ValueError(f"fit has no coefficient for feature {exc}") from exc
    return total


def _contribution_tables(
    fit: RegressionFit, space: ActionSpace, depth: int
) -> tuple[list[list[float]], list[list[list[float]]], list[ActionChoice]]:
    """Per-(step, choice) and per-(step, choice, choice) coefficient sums.

    Grouping the position and interaction terms by step, and the transition
    terms by adjacent step pair, turns scoring into a handful of table adds.
    """
    choices = enumerate_choices(space, include_finish=False)
    step_table: list[list[float]] = []
    for step in range(1, depth + 1):
        row = []
        for choice in choices:
            total = 0.0
            for name in active_sequential_features([choice]):
                # active features of a singleton are exactly the step-1 names
                total += fit.coefficients[name.replace("[1]", f"[{step}]")]
            row.append(total)
        step_table.append(row)
    transition_table: list[list[list[float]]] = []
    for step in range(1, depth):
        grid = []
        for previous in choices:
            row = []
            for current in choices:
                total = 0.0
                pair_names = active_sequential_features([previous, current])
                for name in pair_names:
                    if name.startswith("trans."):
                        total += fit.coefficients[
                            name.replace("[1->2]", f"[{step}->{step + 1}]")
                        ]
                row.append(total)
            grid.append(row)
        transition_table.append(grid)
    return step_table, transition_table, choices


def top_unobserved(
    fit: RegressionFit,
    space: ActionSpace,
    depth: int,
    observed: set[TrajectoryKey],
    k: int,
) -> list[TrajectoryPlan]:
    """Best k unobserved plans by predicted score, ties by enumeration order.

    Streams the full trajectory space with a bounded heap; nothing is
    materialized beyond the running top k.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    step_table, transition_table, choices = _contribution_tables(fit, space, depth)
    choice_keys = [tuple(action for _, action in choice.per_dimension) for choice in choices]
    n_choices = len(choices)
    # Heap entries are (score, -order) so the root is the worst kept plan.
    heap: list[tuple[float, int, tuple[int, ...]]] = []
    for order, combo in enumerate(itertools.product(range(n_choices), repeat=depth)):
        key = tuple(choice_keys[i] for i in combo)
        if key in observed:
            continue
        score = fit.intercept
        for step, choice_index in enumerate(combo):
            score += step_table[step][choice_index]
        for step in range(depth - 1):
            score += transition_table[step][combo[step]][combo[step + 1]]
        entry = (score, -order, combo)
        if len(heap) < k:
            heapq.heappush(heap, entry)
        elif entry > heap[0]:
            heapq.heapreplace(heap, entry)
    if len(heap) < k:
        logger.warning("only %d unobserved trajectories available (asked for %d)", len(heap), k)
    ranked = sorted(heap, key=lambda entry: (-entry[0], -entry[1]))
    return [
        TrajectoryPlan(steps=tuple(choices[i] for i in combo), predicted_score=score)
        for score, _, combo in ranked
    ]


def sample_random_unobserved(
    space: ActionSpace,
    depth: int,
    observed: set[TrajectoryKey],
    count: int,
    seed: int,
) -> list[TrajectoryPlan]:
    """Uniform seeded sample of distinct unobserved plans."""
    choices = enumerate_choices(space, include_finish=False)
    total = len(choices) ** depth
    rng = random.Random(seed)
    if total <= 200_000:
        pool = [plan for plan in enumerate_trajectories(space, depth) if plan.key() not in observed]
        if len(pool) <= count:
            return pool
        return rng.sample(pool, count)
    picked: dict[TrajectoryKey, TrajectoryPlan] = {}
    attempts = 0
    while len(picked) < count and attempts < 100 * count:
        attempts += 1
        combo = tuple(rng.randrange(len(choices)) for _ in range(depth))
        plan = TrajectoryPlan(steps=tuple(choices[i] for i in combo))
        key = plan.key()
        if key in observed or key in picked:
            continue
        picked[key] = plan
    return list(picked.values())


def sample_topic_presence(
    presence_fit: RegressionFit,
    space: ActionSpace,
    depth: int,
    observed: set[TrajectoryKey],
    count: int,
    seed: int,
    content_dimension: str,
    top_k_topics: int = 3,
) -> list[TrajectoryPlan]:
    """Sample plans whose content actions all lie in the presence model's top topics."""
    prefix = f"presence.{content_dimension}."
    ranked_topics = sorted(
        (
            (value, name[len(prefix):])
            for name, value in presence_fit.coefficients.items()
            if name.startswith(prefix)
        ),
        key=lambda item: -item[0],
    )
    top_topics = {topic for _, topic in ranked_topics[:top_k_topics]}
    if not top_topics:
        raise ValueError(f"fit has no presence columns for dimension {content_dimension!r}")
    pool = [
        plan
        for plan in enumerate_trajectories(space, depth)
        if all(choice.action_for(content_dimension) in top_topics for choice in plan.steps)
        and plan.key() not in observed
    ]
    rng = random.Random(seed)
    if len(pool) <= count:
        return pool
    return rng.sample(pool, count)


def generate_targeted(
    input_text: str,
    plans: Sequence[TrajectoryPlan],
    samples_per_plan: int,
    config: SearchConfig,
    modules: TreeModules,
    *,
    seed_base: int = 0,
) -> list[Trace]:
    """Forced-controller regeneration: samples_per_plan single-path trees per plan."""
    traces: list[Trace] = []
    shortfall = 0
    for plan_index, plan in enumerate(plans):
        for sample in range(samples_per_plan):
            tree_seed = seed_base + plan_index * samples_per_plan + sample
            forced_config = replace(
                config,
                branching=1,
                beam_width=1,
                max_depth=plan.depth,
                controller="forced",
                tree_seed=tree_seed,
            )
            forced_modules = replace(modules, controller=ForcedController(plan))
            try:
                result = run_tree(input_text, forced_config, forced_modules)
            except (NoSolutionError, GatewayError) as exc:
                logger.warning("targeted run for plan %d failed: %s", plan_index, exc)
                shortfall += 1
                continue
            trace = result.traces[0]
            if trajectory_key(trace.trajectory) != plan.key():
                raise AssertionError("forced run diverged from its plan")
            traces.append(trace)
    if shortfall:
        logger.warning("targeted generation fell short by %d runs", shortfall)
    return traces


@dataclass(frozen=True)
class MatchedDataset:
    """Balanced targeted/baseline pairs within a length tolerance."""

    pairs: tuple[tuple[str, str], ...]
    tolerance: int

    @property
    def targeted_ids(self) -> tuple[str, ...]:
        return tuple(left for left, _ in self.pairs)

    @property
    def baseline_ids(self) -> tuple[str, ...]:
        return tuple(right for _, right in self.pairs)


def length_match_items(
    targeted: Sequence[tuple[str, int]],
    baseline: Sequence[tuple[str, int]],
    tolerance: int,
) -> MatchedDataset:
    """Greedy nearest-length pairing, each baseline used at most once.

    Targeted items are scanned in ascending length order; each takes the
    closest unused baseline within the tolerance, preferring the shorter
    baseline on distance ties.  Unmatched items on either side are dropped.
    """
    if tolerance < 0:
        raise ValueError("tolerance must be nonnegative")
    ordered = sorted(targeted, key=lambda item: (item[1], item[0]))
    # Baselines kept sorted by (length, id); removal keeps the scan greedy.
    available: list[tuple[int, str]] = sorted((length, item) for item, length in baseline)
    pairs: list[tuple[str, str]] = []
    for item_id, length in ordered:
        if not available:
            break
        position = bisect_left(available, (length, ""))
        best_index = None
        best_distance = None
        for candidate in (position - 1, position):
            if 0 <= candidate < len(available):
                distance = abs(available[candidate][0] - length)
                if distance > tolerance:
                    continue
                # Strict inequality prefers the earlier (shorter) candidate on ties.
                if best_distance is None or distance < best_distance:
                    best_distance = distance
                    best_index = candidate
        if best_index is None:
            continue
        matched_length, matched_id = available.pop(best_index)
        pairs.append((item_id, matched_id))
    return MatchedDataset(pairs=tuple(pairs), tolerance=tolerance)


def length_match(
    targeted: Sequence[Trace], baseline: Sequence[Trace], tolerance: int = 5
) -> MatchedDataset:
    return length_match_items(
        [(trace.trace_id, len(trace.final_answer)) for trace in targeted],
        [(trace.trace_id, len(trace.final_answer)) for trace in baseline],
        tolerance,
    )


@dataclass
class MatchedEvalResult:
    win_rate: float
    cross_comparisons: int
    bt: BTFit
    top_counts: dict[int, int]
    judgments: list[Judgment]
    judge_errors: int


def evaluate_matched(
    dataset: MatchedDataset,
    texts: dict[str, str],
    comparisons: int,
    prompt: str,
    gateway,
    seed: int,
    top_ns: Sequence[int] = (10, 100),
) -> MatchedEvalResult:
    """Judge random pairs within the matched pool and rank with Bradley-Terry.

    The win rate counts only targeted-versus-baseline comparisons; top-n
    membership counts targeted items among the strongest n of the whole pool.
    """
    if not dataset.pairs:
        raise ValueError("matched dataset is empty")
    targeted = set(dataset.targeted_ids)
    pool = list(dataset.targeted_ids) + list(dataset.baseline_ids)
    judgments: list[Judgment] = []
    errors = 0
    for left_id, right_id in sample_pairs(pool, comparisons, seed):
        try:
            judgments.append(
                judge_pair(
                    left_id, texts[left_id], right_id, texts[right_id], prompt, gateway, seed=seed
                )
            )
        except JudgeError as exc:
            errors += 1
            logger.warning("judgment failed for (%s, %s): %s", left_id, right_id, exc)
    cross = [
        judgment
        for judgment in judgments
        if (judgment.left_id in targeted) != (judgment.right_id in targeted)
    ]
    wins = sum(1 for judgment in cross if judgment.winner_id in targeted)
    bt = fit_bradley_terry(judgments, all_ids=pool)
    ranked = sorted(bt.strengths, key=lambda item: (-bt.strengths[item], item))
    top_counts = {
        n: sum(1 for item in ranked[:n] if item in targeted) for n in top_ns
    }
    return MatchedEvalResult(
        win_rate=wins / len(cross) if cross else float("nan"),
        cross_comparisons=len(cross),
        bt=bt,
        top_counts=top_counts,
        judgments=judgments,
        judge_errors=errors,
    )
