"""Process and outcome scoring: rubric judges, reranker scoring, verifiers.

Every evaluator maps states to scores in [0, 1].  Beam selection depends only
on score order, so any strictly increasing squash of raw backend scores leaves
the selected states unchanged.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from .gateway import ChatRequest, GatewayError, ModelGateway, RerankRequest
from .tree import SearchState, TreeUsageError

logger = logging.getLogger(__name__)

PROCESS = "process"
OUTCOME = "outcome"


class EvaluationError(Exception):
    """The evaluator could not produce a usable score."""


@dataclass(frozen=True)
class RubricItem:
    criterion: str
    weight: float

    def __post_init__(self) -> None:
        if self.weight <= 0:
            raise ValueError("rubric weights must be positive")


@dataclass(frozen=True)
class Rubric:
    """Weighted criteria scored on an integer scale; weights normalize to 1."""

    items: tuple[RubricItem, ...]
    scale: int = 4

    def __post_init__(self) -> None:
        if not self.items:
            raise ValueError("rubric needs at least one item")
        if self.scale < 1:
            raise ValueError("rubric scale must be a positive integer")

    @property
    def normalized_weights(self) -> tuple[float, ...]:
        total = sum(item.weight for item in self.items)
        return tuple(item.weight / total for item in self.items)


def load_rubric(source: str | Path | list, scale: int = 4) -> Rubric:
    """Rubric from a JSON file or an in-memory list of {criterion, weight}."""
    if isinstance(source, (str, Path)):
        source = json.loads(Path(source).read_text(encoding="utf-8"))
    items = tuple(RubricItem(entry["criterion"], float(entry["weight"])) for entry in source)
    return Rubric(items=items, scale=scale)


DEFAULT_RUBRIC = Rubric(
    items=(
        RubricItem("The answer addresses the task and follows its instructions.", 0.4),
        RubricItem("The answer is coherent, well structured, and self-contained.", 0.3),
        RubricItem("The answer is specific, persuasive, and stylistically appropriate.", 0.3),
    )
)


def _state_text(kind: str, state: SearchState) -> str:
    if kind == OUTCOME:
        if not state.is_final:
            raise TreeUsageError("outcome scoring requires a finalized state")
        return state.final_answer or ""
    return "\n".join(step.step_text for step in state.steps)


def _judge_messages(kind: str, state: SearchState, rubric: Rubric, note: str = ""):
    lines = [
        "You are a meticulous evaluator. Score the candidate against each rubric item",
        f"with an integer from 0 to {rubric.scale}.",
        "Reply with only a JSON array of objects, one per rubric item in the given order,",
        'each of the form {"criterion": str, "score": int, "justification": str}.',
    ]
    if note:
        lines.append(note)
    system = "\n".join(lines)
    target = "Final answer" if kind == OUTCOME else "Reasoning so far"
    rubric_text = "\n".join(
        f"- {item.criterion} (weight {item.weight})" for item in rubric.items
    )
    user = (
        f"Task input:\n{state.input_text}\n\n{target}:\n{_state_text(kind, state)}\n\n"
        f"Rubric:\n{rubric_text}"
    )
    return (("system", system), ("user", user))


def _parse_item_scores(reply: str, rubric: Rubric) -> list[int] | None:
    start = reply.find("[")
    if start < 0:
        return None
    try:
        value = json.JSONDecoder().raw_decode(reply[start:])[0]
    except json.JSONDecodeError:
        return None
    if not isinstance(value, list) or len(value) != len(rubric.items):
        return None
    scores = []
    for entry in value:
        if not isinstance(entry, dict) or not isinstance(entry.get("score"), (int, float)):
            return None
        scores.append(int(max(0, min(rubric.scale, entry["score"]))))
    return scores


def score_generative(
    kind: str,
    state: SearchState,
    rubric: Rubric,
    gateway: ModelGateway,
    *,
    temperature: float = 0.0,
    max_reasks: int = 2,
) -> float:
    """Weighted rubric score from a generative judge, normalized to [0, 1]."""
    for attempt in range(max_reasks + 1):
        note = "" if attempt == 0 else (
            "Your previous reply could not be parsed; output only the JSON array."
        )
        try:
            result = gateway.complete(
                ChatRequest(
                    messages=_judge_messages(kind, state, rubric, note),
                    temperature=temperature,
                    max_tokens=512,
                )
            )
        except GatewayError as exc:
            raise EvaluationError(f"judge call failed: {exc}") from exc
        scores = _parse_item_scores(result.text, rubric)
        if scores is not None:
            weights = rubric.normalized_weights
            return sum(w * s for w, s in zip(weights, scores)) / rubric.scale
    raise EvaluationError(f"unparseable judgment after {max_reasks + 1} attempts")


def logistic(value: float) -> float:
    if value >= 0:
        return 1.0 / (1.0 + math.exp(-value))
    scaled = math.exp(value)
    return scaled / (1.0 + scaled)


def score_reranker(
    kind: str,
    states: Sequence[SearchState],
    criteria_text: str,
    gateway: ModelGateway,
) -> list[float]:
    """Score candidate states in one batched reranker call.

    Raw relevance scores are squashed into [0, 1] by a logistic map; any
    monotone map preserves the selection order downstream.
    """
    if not states:
        raise EvaluationError("need at least one state to score")
    inputs = {state.input_text for state in states}
    if len(inputs) != 1:
        raise EvaluationError("all states in one scoring call must share an input")
    query = f"Input: {states[0].input_text}\nCriteria: {criteria_text}"
    documents = tuple(_state_text(kind, state) for state in states)
    try:
        raw = gateway.rerank(RerankRequest(query=query, documents=documents))
    except GatewayError as exc:
        raise EvaluationError(f"reranker scoring failed: {exc}") from exc
    return [logistic(score) for score in raw]


Verifier = Callable[[str, str], float]

_VERIFIER_REGISTRY: dict[str, Callable[..., Verifier]] = {}


def register_verifier(name: str):
    def decorator(factory: Callable[..., Verifier]):
        _VERIFIER_REGISTRY[name] = factory
        return factory

    return decorator


def make_verifier(name: str, params: dict | None = None) -> Verifier:
    if name not in _VERIFIER_REGISTRY:
        raise EvaluationError(f"unknown verifier {name!r}; known: {sorted(_VERIFIER_REGISTRY)}")
    return _VERIFIER_REGISTRY[name](**(params or {}))


@register_verifier("nonempty")
def _nonempty_verifier() -> Verifier:
    def verify(task_input: str, output: str) -> float:
        return 1.0 if output.strip() else 0.0

    return verify


@register_verifier("min_sentences")
def _min_sentences_verifier(count: int = 3) -> Verifier:
    def verify(task_input: str, output: str) -> float:
        sentences = [chunk for chunk in output.replace("!", ".").replace("?", ".").split(".") if chunk.strip()]
        return 1.0 if len(sentences) >= count else 0.0

    return verify


@register_verifier("contains_all")
def _contains_all_verifier(substrings: Sequence[str] = ()) -> Verifier:
    def verify(task_input: str, output: str) -> float:
        if not substrings:
            return 1.0
        hits = sum(1 for needle in substrings if needle in output)
        return hits / len(substrings)

    return verify


@register_verifier("banned_words")
def _banned_words_verifier(words: Sequence[str] = ()) -> Verifier:
    # Prefix-monotonic: once a banned word appears, every extension scores 0.
    def verify(task_input: str, output: str) -> float:
        lowered = output.lower()
        return 0.0 if any(word.lower() in lowered for word in words) else 1.0

    return verify


def score_programmatic(state: SearchState, verifier: Verifier) -> float:
    """Apply a deterministic verifier to the visible output.

    Finalized states are scored on their answer; intermediate states on the
    concatenation of visible step texts (internal reasoning excluded).
    """
    if state.is_final:
        text = state.final_answer or ""
    else:
        text = "\n".join(step.step_text for step in state.steps)
    try:
        score = float(verifier(state.input_text, text))
    except Exception:
        logger.exception("verifier raised; scoring 0")
        return 0.0
    if not 0.0 <= score <= 1.0:
        logger.warning("verifier returned %s outside [0, 1]; clamping", score)
        score = min(1.0, max(0.0, score))
    return score


class RerankerEvaluator:
    kind = "reranker"

    def __init__(self, gateway: ModelGateway, criteria_text: str) -> None:
        self.gateway = gateway
        self.criteria_text = criteria_text

    def score_states(self, kind: str, states: Sequence[SearchState]) -> list[float]:
        return score_reranker(kind, states, self.criteria_text, self.gateway)


class GenerativeEvaluator:
    kind = "generative"

    def __init__(self, gateway: ModelGateway, rubric: Rubric | None = None) -> None:
        self.gateway = gateway
        self.rubric = rubric or DEFAULT_RUBRIC

    def score_states(self, kind: str, states: Sequence[SearchState]) -> list[float]:
        scores = []
        for state in states:
            try:
                scores.append(score_generative(kind, state, self.rubric, self.gateway))
            except EvaluationError as exc:
                # Caller policy: an unscorable branch gets 0 and stays in the log.
                logger.warning("judge failed for %s, scoring 0: %s", state.node_id, exc)
                scores.append(0.0)
        return scores


class ProgrammaticEvaluator:
    kind = "programmatic"

    def __init__(self, verifier: Verifier) -> None:
        self.verifier = verifier

    def score_states(self, kind: str, states: Sequence[SearchState]) -> list[float]:
        return [score_programmatic(state, self.verifier) for state in states]
