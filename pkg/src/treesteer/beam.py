"""Layer-wise beam search: controller -> generator -> evaluator -> top-k.

Each layer expands every frontier state with up to n actions, routes FINISH
children straight to the final set, scores the rest with the process evaluator
and keeps the top k (ties broken by node id).  Reasoning is force-terminated
one layer past the maximum depth.  Failed branches shrink the candidate set
but never abort a layer.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field, replace
from typing import Sequence

from .actions import FINISH_CHOICE, ActionChoice, ActionSpace, enumerate_choices
from .controllers import ControllerError, finish_offered
from .evaluators import EvaluationError
from .gateway import ChatRequest, GatewayError, ModelGateway
from .generation import (
    SYNTHESIS_MODES,
    TaskSignature,
    build_answer_request,
    build_step_request,
    make_step_record,
)
from .tree import (
    NodeCounter,
    SearchState,
    Trace,
    append_step,
    finalize,
    make_root,
    trace_of,
    with_orm_score,
    with_prm_score,
)

logger = logging.getLogger(__name__)


class NoSolutionError(RuntimeError):
    """Every branch failed before any state reached a final answer."""

    def __init__(self, message: str, partial: list | None = None) -> None:
        super().__init__(message)
        self.partial = partial or []


@dataclass(frozen=True)
class SearchConfig:
    """Beam-search parameters for one tree."""

    branching: int
    beam_width: int
    max_depth: int
    temperature: float = 0.7
    synthesis_mode: str = "conclusion"
    controller: str = "reranker"
    prm: str = "reranker"
    orm: str = "generative"
    tree_seed: int = 0
    return_all_finals: bool = False
    max_tokens_step: int = 512
    max_tokens_answer: int = 1024

    def __post_init__(self) -> None:
        if self.branching < 1 or self.beam_width < 1 or self.max_depth < 1:
            raise ValueError("branching, beam width, and depth must all be at least 1")
        if self.synthesis_mode not in SYNTHESIS_MODES:
            raise ValueError(f"unknown synthesis mode {self.synthesis_mode!r}")


@dataclass
class TreeModules:
    """Wired collaborators for one run; all shared pieces are immutable."""

    space: ActionSpace
    gateway: ModelGateway
    controller: object
    prm: object
    orm: object
    signature: TaskSignature
    fallback_random: bool = True


@dataclass(frozen=True)
class CandidateRecord:
    """Audit entry for one scored (or unscored) candidate, pruned or kept."""

    node_id: tuple[int, int]
    parent_id: tuple[int, int] | None
    depth: int
    choice: ActionChoice
    prm_score: float | None
    kept: bool


@dataclass
class TreeResult:
    finals: list[SearchState]
    traces: list[Trace]
    candidates: list[CandidateRecord] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    @property
    def best(self) -> SearchState:
        return self.finals[0]


def prune_layer(candidates: Sequence[SearchState], k: int) -> list[SearchState]:
    """Top-k by PRM score, descending; ties keep the lowest node ids."""
    for state in candidates:
        if state.prm_score is None:
            raise EvaluationError(f"candidate {state.node_id} is unscored")
    ranked = sorted(candidates, key=lambda state: (-state.prm_score, state.node_id))
    return ranked[: min(k, len(ranked))]


def _fallback_choices(
    state: SearchState, space: ActionSpace, n: int, rng: random.Random
) -> tuple[ActionChoice, ...]:
    pool = enumerate_choices(space, include_finish=finish_offered(state, space))
    return tuple(rng.sample(pool, min(n, len(pool))))


def run_tree(input_text: str, config: SearchConfig, modules: TreeModules) -> TreeResult:
    """Run one search tree; returns finals ranked by ORM plus all their traces."""
    counter = NodeCounter(config.tree_seed)
    rng = random.Random(config.tree_seed)
    frontier: list[SearchState] = [make_root(input_text, counter)]
    finals: list[SearchState] = []
    candidates_log: list[CandidateRecord] = []
    failures: list[str] = []

    for layer in range(1, config.max_depth + 2):
        expansions: list[tuple[SearchState, ActionChoice]] = []
        for state in frontier:
            if layer == config.max_depth + 1:
                choices: Sequence[ActionChoice] = (FINISH_CHOICE,)
            else:
                try:
                    decision = modules.controller.select(
                        state, modules.space, config.branching, rng=rng
                    )
                    choices = decision.choices
                except ControllerError as exc:
                    if not modules.fallback_random:
                        raise
                    logger.warning(
                        "controller failed at %s, falling back to random choices: %s",
                        state.node_id,
                        exc,
                    )
                    choices = _fallback_choices(state, modules.space, config.branching, rng)
            expansions.extend((state, choice) for choice in choices)

        requests: list[ChatRequest] = []
        interventions = []
        for state, choice in expansions:
            if choice.is_finish:
                requests.append(
                    build_answer_request(
                        state,
                        config.synthesis_mode,
                        modules.signature,
                        config.temperature,
                        config.max_tokens_answer,
                        seed=config.tree_seed,
                    )
                )
                interventions.append(None)
            else:
                request, intervention = build_step_request(
                    state,
                    choice,
                    modules.space,
                    config.synthesis_mode,
                    modules.signature,
                    config.temperature,
                    config.max_tokens_step,
                    seed=config.tree_seed,
                )
                requests.append(request)
                interventions.append(intervention)
        results = modules.gateway.batch(requests)

        children: list[SearchState] = []
        for (state, choice), intervention, result in zip(expansions, interventions, results):
            if isinstance(result, GatewayError):
                failures.append(
                    f"layer {layer}: branch {choice.label()} of {state.node_id} failed: {result}"
                )
                continue
            if choice.is_finish:
                finals.append(finalize(state, result.text, config.synthesis_mode, counter))
            else:
                record = make_step_record(choice, intervention, result)
                children.append(append_step(state, record, counter))

        if not children:
            break  # every surviving branch terminated (or failed) this layer

        if len(children) > config.beam_width:
            scores = modules.prm.score_states("process", children)
            children = [with_prm_score(child, score) for child, score in zip(children, scores)]
            kept = prune_layer(children, config.beam_width)
        else:
            # Selection is vacuous here; skip the judge calls, record no scores.
            kept = list(children)
        kept_ids = {state.node_id for state in kept}
        candidates_log.extend(
            CandidateRecord(
                node_id=child.node_id,
                parent_id=child.parent_id,
                depth=child.depth,
                choice=child.steps[-1].choice,
                prm_score=child.prm_score,
                kept=child.node_id in kept_ids,
            )
            for child in children
        )
        frontier = kept

    if not finals:
        raise NoSolutionError(
            "all branches failed before any final answer was produced",
            partial=[*candidates_log, *failures],
        )

    orm_scores = modules.orm.score_states("outcome", finals)
    finals = [with_orm_score(state, score) for state, score in zip(finals, orm_scores)]
    ranked = sorted(finals, key=lambda state: (-(state.orm_score or 0.0), state.node_id))
    traces = [trace_of(state) for state in ranked]
    returned = ranked if config.return_all_finals else ranked[:1]
    return TreeResult(
        finals=returned, traces=traces, candidates=candidates_log, failures=failures
    )


@dataclass
class ForestResult:
    traces: list[Trace]
    results: dict[int, TreeResult] = field(default_factory=dict)
    errors: dict[int, str] = field(default_factory=dict)


def run_forest(
    input_text: str,
    config: SearchConfig,
    modules: TreeModules,
    seeds: Sequence[int],
) -> ForestResult:
    """One tree per seed; per-tree failures leave the other trees untouched."""
    if len(set(seeds)) != len(seeds):
        raise ValueError("forest seeds must be distinct")
    forest = ForestResult(traces=[])
    for seed in seeds:
        tree_config = replace(config, tree_seed=seed)
        try:
            result = run_tree(input_text, tree_config, modules)
        except (NoSolutionError, GatewayError) as exc:
            logger.warning("tree with seed %d failed: %s", seed, exc)
            forest.errors[seed] = str(exc)
            continue
        forest.results[seed] = result
        forest.traces.extend(result.traces)
    return forest
