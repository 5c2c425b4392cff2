"""Pairwise judging, Bradley-Terry fitting, and output-diversity metrics.

The Bradley-Terry fit uses minorize-maximize strength updates, whose
log-likelihood never decreases across iterations; strengths are gauge-fixed to
geometric mean 1 and summarized as z-scored average ranks.
"""

from __future__ import annotations

import logging
import math
import random
import re
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .gateway import ChatRequest, GatewayError, ModelGateway

logger = logging.getLogger(__name__)

DEFAULT_JUDGE_PROMPT = (
    "You are an impartial judge comparing two candidate responses to the same task. "
    "Decide which candidate is more effective overall."
)

PAIR_TEMPLATE = (
    "Candidate A:\n{left}\n\nCandidate B:\n{right}\n\n"
    "Which candidate is more effective? Reply with exactly one letter: A or B."
)

_VERDICT = re.compile(r"\b([AB])\b")


class JudgeError(Exception):
    """The judge reply could not be parsed as a forced choice."""


@dataclass(frozen=True)
class Judgment:
    left_id: str
    right_id: str
    winner: str  # "left" | "right"
    judge: str = ""
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.left_id == self.right_id:
            raise ValueError("a judgment needs two distinct items")
        if self.winner not in ("left", "right"):
            raise ValueError(f"winner must be 'left' or 'right', got {self.winner!r}")

    @property
    def winner_id(self) -> str:
        return self.left_id if self.winner == "left" else self.right_id

    @property
    def loser_id(self) -> str:
        return self.right_id if self.winner == "left" else self.left_id


def sample_pairs(ids: Sequence[str], count: int, seed: int) -> list[tuple[str, str]]:
    """Uniform random comparison pairs with randomized left/right order."""
    if len(ids) < 2:
        raise ValueError("need at least two ids to sample pairs")
    rng = random.Random(seed)
    pool = list(ids)
    return [tuple(rng.sample(pool, 2)) for _ in range(count)]


def judge_pair(
    left_id: str,
    left_text: str,
    right_id: str,
    right_text: str,
    prompt: str,
    gateway: ModelGateway,
    *,
    seed: int | None = None,
    temperature: float = 0.0,
) -> Judgment:
    """Forced-choice comparison; re-asks once before giving up."""
    if not left_text or not right_text:
        raise ValueError("both candidate texts must be nonempty")
    user = PAIR_TEMPLATE.format(left=left_text, right=right_text)
    for attempt in range(2):
        message = user if attempt == 0 else user + "\n\nAnswer with only the letter A or B."
        try:
            result = gateway.complete(
                ChatRequest(
                    messages=(("system", prompt), ("user", message)),
                    temperature=temperature,
                    max_tokens=8,
                    seed=seed,
                )
            )
        except GatewayError as exc:
            raise JudgeError(f"judge call failed: {exc}") from exc
        match = _VERDICT.search(result.text)
        if match:
            winner = "left" if match.group(1) == "A" else "right"
            return Judgment(
                left_id=left_id,
                right_id=right_id,
                winner=winner,
                judge=gateway.chat_backend.identifier,
                seed=seed,
            )
    raise JudgeError("judge reply held no forced choice after a re-ask")


def position_swap_disagreement(
    pairs: Sequence[tuple[str, str]],
    prompt: str,
    gateway: ModelGateway,
) -> float:
    """Judge-consistency diagnostic: fraction of (A,B)/(B,A) verdict flips."""
    if not pairs:
        raise ValueError("need at least one text pair")
    flips = 0
    for left, right in pairs:
        forward = judge_pair("l", left, "r", right, prompt, gateway)
        backward = judge_pair("l", right, "r", left, prompt, gateway)
        # A consistent judge picks the same underlying text in both orders,
        # which means opposite positions across the two calls.
        if (forward.winner == "left") == (backward.winner == "left"):
            flips += 1
    return flips / len(pairs)


@dataclass
class BTFit:
    """Fitted Bradley-Terry strengths with standardized ranks."""

    strengths: dict[str, float]
    standardized_ranks: dict[str, float]
    iterations: int
    final_log_likelihood: float
    diagnostics: dict = field(default_factory=dict)


def _components(items: list[str], wins: dict[tuple[str, str], float]) -> list[list[str]]:
    neighbors: dict[str, set[str]] = defaultdict(set)
    for winner, loser in wins:
        neighbors[winner].add(loser)
        neighbors[loser].add(winner)
    seen: set[str] = set()
    components = []
    for item in items:
        if item in seen:
            continue
        stack = [item]
        component = []
        while stack:
            node = stack.pop()
            if node in seen:
                continue
            seen.add(node)
            component.append(node)
            stack.extend(neighbors[node] - seen)
        components.append(sorted(component))
    return components


def _fit_component(
    items: list[str],
    wins: dict[tuple[str, str], float],
    tol: float,
    max_iter: int,
    pseudo_count: float,
) -> tuple[dict[str, float], int, list[float], bool]:
    index = {item: position for position, item in enumerate(items)}
    n = len(items)
    win_totals = np.zeros(n)
    loss_totals = np.zeros(n)
    for (winner, loser), count in wins.items():
        win_totals[index[winner]] += count
        loss_totals[index[loser]] += count
    pseudo_applied = False
    if n > 1 and (np.any(win_totals == 0.0) or np.any(loss_totals == 0.0)):
        # All-win or all-loss items push the MLE to the boundary; seed every
        # observed pair direction with a small pseudo-count to keep it finite.
        pseudo_applied = True
        seeded: dict[tuple[str, str], float] = defaultdict(float)
        for pair, count in wins.items():
            seeded[pair] += count
        for first, second in {tuple(sorted(pair)) for pair in wins}:
            seeded[(first, second)] += pseudo_count
            seeded[(second, first)] += pseudo_count
        wins = dict(seeded)
        win_totals = np.zeros(n)
        for (winner, _), count in wins.items():
            win_totals[index[winner]] += count

    win_i = np.array([index[winner] for winner, _ in wins], dtype=np.intp)
    win_j = np.array([index[loser] for _, loser in wins], dtype=np.intp)
    win_counts = np.array(list(wins.values()))

    matches: dict[tuple[int, int], float] = defaultdict(float)
    for (winner, loser), count in wins.items():
        first, second = sorted((index[winner], index[loser]))
        matches[(first, second)] += count
    match_i = np.array([pair[0] for pair in matches], dtype=np.intp)
    match_j = np.array([pair[1] for pair in matches], dtype=np.intp)
    match_counts = np.array(list(matches.values()))

    def log_likelihood(strengths: np.ndarray) -> float:
        return float(
            np.sum(win_counts * np.log(strengths[win_i] / (strengths[win_i] + strengths[win_j])))
        )

    strengths = np.ones(n)
    likelihood_path = [log_likelihood(strengths)]
    iterations = 0
    for iterations in range(1, max_iter + 1):
        shared = match_counts / (strengths[match_i] + strengths[match_j])
        denominator = np.zeros(n)
        np.add.at(denominator, match_i, shared)
        np.add.at(denominator, match_j, shared)
        updated = np.where(denominator > 0, win_totals / np.maximum(denominator, 1e-300), 1.0)
        # Gauge fix: geometric mean 1 leaves all win probabilities unchanged.
        updated = updated / np.exp(np.mean(np.log(updated)))
        delta = float(np.max(np.abs(updated - strengths) / strengths))
        strengths = updated
        likelihood_path.append(log_likelihood(strengths))
        if delta < tol:
            break
    fitted = {item: float(strengths[index[item]]) for item in items}
    return fitted, iterations, likelihood_path, pseudo_applied


def average_ranks(values: Sequence[float]) -> list[float]:
    """1-based ranks of values ascending, averaging over ties."""
    order = sorted(range(len(values)), key=lambda index: values[index])
    ranks = [0.0] * len(values)
    position = 0
    while position < len(order):
        tail = position
        while tail + 1 < len(order) and values[order[tail + 1]] == values[order[position]]:
            tail += 1
        mean_rank = (position + tail) / 2 + 1
        for index in order[position : tail + 1]:
            ranks[index] = mean_rank
        position = tail + 1
    return ranks


def _z_scores(values: Sequence[float]) -> list[float]:
    mean = sum(values) / len(values)
    variance = sum((value - mean) ** 2 for value in values) / len(values)
    if variance == 0.0:
        return [0.0] * len(values)
    std = math.sqrt(variance)
    return [(value - mean) / std for value in values]


def fit_bradley_terry(
    judgments: Sequence[Judgment],
    *,
    all_ids: Sequence[str] | None = None,
    tol: float = 1e-8,
    max_iter: int = 10_000,
    pseudo_count: float = 0.01,
) -> BTFit:
    """Maximum-likelihood strengths via minorize-maximize updates.

    Disconnected comparison graphs are fitted per component with a warning;
    ids in ``all_ids`` that were never compared are excluded and reported.
    """
    if not judgments:
        raise ValueError("need at least one judgment")
    wins: dict[tuple[str, str], float] = defaultdict(float)
    for judgment in judgments:
        wins[(judgment.winner_id, judgment.loser_id)] += 1.0
    judged = sorted({identifier for pair in wins for identifier in pair})
    excluded = sorted(set(all_ids or []) - set(judged))
    if excluded:
        logger.warning("%d ids had no comparisons and are excluded", len(excluded))

    components = _components(judged, dict(wins))
    if len(components) > 1:
        logger.warning(
            "comparison graph is disconnected (%d components); fitting each separately",
            len(components),
        )

    strengths: dict[str, float] = {}
    iterations = 0
    likelihood = 0.0
    pseudo_components = 0
    likelihood_paths: list[list[float]] = []
    for component in components:
        component_wins = {
            pair: count for pair, count in wins.items() if pair[0] in set(component)
        }
        fitted, count, path, pseudo_applied = _fit_component(
            component, component_wins, tol, max_iter, pseudo_count
        )
        for earlier, later in zip(path, path[1:]):
            if later < earlier - 1e-9 * (1 + abs(earlier)):
                raise AssertionError("log-likelihood decreased during MM updates")
        strengths.update(fitted)
        iterations = max(iterations, count)
        likelihood += path[-1]
        likelihood_paths.append(path)
        pseudo_components += int(pseudo_applied)

    ordered = sorted(strengths)
    ranks = average_ranks([strengths[item] for item in ordered])
    zs = _z_scores(ranks)
    standardized = dict(zip(ordered, zs))
    return BTFit(
        strengths=strengths,
        standardized_ranks=standardized,
        iterations=iterations,
        final_log_likelihood=likelihood,
        diagnostics={
            "components": len(components),
            "component_sizes": [len(c) for c in components],
            "excluded_ids": excluded,
            "pseudo_count_components": pseudo_components,
            "pseudo_count": pseudo_count,
            "n_judgments": len(judgments),
            "log_likelihood_paths": likelihood_paths,
        },
    )


@dataclass(frozen=True)
class EquivalenceClass:
    representative_id: str
    member_ids: tuple[str, ...]


@dataclass(frozen=True)
class EquivalencePartition:
    classes: tuple[EquivalenceClass, ...]
    threshold: float


SimilarityScorer = Callable[[str, str], float]


def partition_equivalence(
    texts: Sequence[str],
    similarity_scorer: SimilarityScorer,
    threshold: float = 0.102,
    *,
    ids: Sequence[str] | None = None,
    seed: int = 0,
) -> EquivalencePartition:
    """Sequential scan partition into functional-equivalence classes.

    Each text joins the first existing class whose randomly drawn
    representative scores strictly above the threshold, else founds a new
    class.  The representative draw is seeded for reproducibility.
    """
    item_ids = list(ids) if ids is not None else [str(index) for index in range(len(texts))]
    if len(item_ids) != len(texts):
        raise ValueError("ids and texts must align")
    rng = random.Random(seed)
    classes: list[list[int]] = []
    for index, text in enumerate(texts):
        joined = False
        for members in classes:
            representative = members[rng.randrange(len(members))]
            if similarity_scorer(text, texts[representative]) > threshold:
                members.append(index)
                joined = True
                break
        if not joined:
            classes.append([index])
    return EquivalencePartition(
        classes=tuple(
            EquivalenceClass(
                representative_id=item_ids[members[0]],
                member_ids=tuple(item_ids[member] for member in members),
            )
            for members in classes
        ),
        threshold=threshold,
    )


def mean_distinct(partition: EquivalencePartition) -> int:
    """Number of distinct equivalence classes."""
    return len(partition.classes)


def patience_utility(
    class_labels: Sequence[object], utilities: Sequence[float], p: float = 0.8
) -> float:
    """Patience-weighted utility over an ordered generation list.

    Positions repeating an earlier class contribute nothing; novel positions
    contribute their utility discounted geometrically by user patience.
    """
    if not class_labels:
        raise ValueError("need at least one generation")
    if len(class_labels) != len(utilities):
        raise ValueError("labels and utilities must align")
    if not 0.0 < p < 1.0:
        raise ValueError("patience must lie in (0, 1)")
    k = len(class_labels)
    seen: set[object] = set()
    total = 0.0
    for position, (label, utility) in enumerate(zip(class_labels, utilities)):
        if label not in seen:
            total += p**position * utility
        seen.add(label)
    return (1.0 - p) / (1.0 - p**k) * total


def exact_match_scorer(candidate: str, representative: str) -> float:
    return 1.0 if candidate == representative else 0.0


def jaccard_scorer(candidate: str, representative: str) -> float:
    left = set(candidate.lower().split())
    right = set(representative.lower().split())
    if not left and not right:
        return 1.0
    if not left or not right:
        return 0.0
    return len(left & right) / len(left | right)


SIMILARITY_SCORERS: dict[str, SimilarityScorer] = {
    "exact": exact_match_scorer,
    "jaccard": jaccard_scorer,
}
