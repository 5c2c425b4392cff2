"""Next-action selection: reranker scoring, generative tool calls, forced plans.

All controllers return up to ``n`` distinct valid choices.  FINISH is offered
only from depth 1 onward; the final layer of the beam search forces it anyway.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from typing import Sequence

from .actions import (
    FINISH_CHOICE,
    ActionChoice,
    ActionSpace,
    ActionSpaceError,
    enumerate_choices,
    make_choice,
)
from .gateway import ChatRequest, GatewayError, ModelGateway, RerankRequest

logger = logging.getLogger(__name__)

FINISH_DOCUMENT = "finish reasoning and write the final answer"


class ControllerError(Exception):
    """The controller could not produce a usable decision."""


@dataclass(frozen=True)
class ControllerDecision:
    choices: tuple[ActionChoice, ...]
    rationale_texts: tuple[str | None, ...] | None = None

    def __post_init__(self) -> None:
        if len(set(self.choices)) != len(self.choices):
            raise ControllerError("controller decisions must be distinct")
        if sum(1 for choice in self.choices if choice.is_finish) > 1:
            raise ControllerError("FINISH may appear at most once")


def choice_document(choice: ActionChoice, space: ActionSpace) -> str:
    """Reranker document describing one choice's effect."""
    if choice.is_finish:
        return FINISH_DOCUMENT
    parts = []
    for dim_name, action_name in choice.per_dimension:
        template = space.template(dim_name, action_name)
        parts.append(f"{dim_name}: {template.name} — {template.definition}")
    return "; ".join(parts)


def state_query(state) -> str:
    """Reranker query combining the input with the reasoning chain so far."""
    chain = "\n".join(step.step_text for step in state.steps)
    return f"Input: {state.input_text}\nReasoning so far:\n{chain}"


def finish_offered(state, space: ActionSpace) -> bool:
    # A zero-step answer defeats the point of stepwise search.
    return space.allow_finish and state.depth >= 1


def select_reranker(
    state, space: ActionSpace, n: int, gateway: ModelGateway
) -> ControllerDecision:
    """Score every candidate choice with the reranker and keep the top n.

    Ties break by enumeration order, so identical scores yield identical
    decisions across runs.
    """
    if n < 1:
        raise ControllerError("n must be at least 1")
    choices = enumerate_choices(space, include_finish=finish_offered(state, space))
    documents = tuple(choice_document(choice, space) for choice in choices)
    try:
        scores = gateway.rerank(RerankRequest(query=state_query(state), documents=documents))
    except GatewayError as exc:
        raise ControllerError(f"reranker unavailable: {exc}") from exc
    order = sorted(range(len(choices)), key=lambda index: (-scores[index], index))
    top = tuple(choices[index] for index in order[: min(n, len(choices))])
    return ControllerDecision(choices=top)


def _tool_schema_text(space: ActionSpace, finish_allowed: bool, n: int) -> str:
    lines = [
        "You steer a multi-step writing process by choosing the next action.",
        "An action names exactly one option per dimension:",
    ]
    for dim in space.dimensions:
        lines.append(f"- {dim.name}:")
        for template in dim.templates:
            lines.append(f"    - {template.name}: {template.definition}")
    keys = ", ".join(f'"{name}"' for name in space.dimension_names)
    lines.append(
        f"Reply with a JSON array of up to {n} distinct actions. "
        f"Each action is an object with keys {keys} and an optional \"rationale\"."
    )
    if finish_allowed:
        lines.append('To stop reasoning and write the final answer, use {"action": "FINISH"}.')
    return "\n".join(lines)


def _extract_json_array(reply: str):
    start = reply.find("[")
    if start < 0:
        return None
    decoder = json.JSONDecoder()
    try:
        value, _ = decoder.raw_decode(reply[start:])
    except json.JSONDecodeError:
        return None
    return value if isinstance(value, list) else None


def parse_tool_calls(
    reply: str, space: ActionSpace, finish_allowed: bool
) -> tuple[list[ActionChoice], list[str | None], int]:
    """Parse proposed tool calls; returns (valid choices, rationales, dropped)."""
    entries = _extract_json_array(reply)
    if entries is None:
        return [], [], 0
    choices: list[ActionChoice] = []
    rationales: list[str | None] = []
    dropped = 0
    for entry in entries:
        if isinstance(entry, str) and entry.strip().upper() == "FINISH":
            entry = {"action": "FINISH"}
        if not isinstance(entry, dict):
            dropped += 1
            continue
        rationale = entry.get("rationale")
        if entry.get("action", "").upper() == "FINISH":
            if finish_allowed:
                choices.append(FINISH_CHOICE)
                rationales.append(rationale)
            else:
                dropped += 1
            continue
        mapping = {key: value for key, value in entry.items() if key != "rationale"}
        try:
            choices.append(make_choice(space, mapping))
            rationales.append(rationale)
        except ActionSpaceError as exc:
            logger.warning("dropping invalid tool call %r: %s", entry, exc)
            dropped += 1
    return choices, rationales, dropped


def _dedupe(choices: Sequence[ActionChoice], rationales: Sequence[str | None]):
    seen: set[ActionChoice] = set()
    kept_choices: list[ActionChoice] = []
    kept_rationales: list[str | None] = []
    for choice, rationale in zip(choices, rationales):
        if choice in seen:
            continue
        seen.add(choice)
        kept_choices.append(choice)
        kept_rationales.append(rationale)
    return kept_choices, kept_rationales


def _backfill(
    chosen: list[ActionChoice],
    state,
    space: ActionSpace,
    n: int,
    gateway: ModelGateway,
    rng: random.Random,
    finish_allowed: bool,
) -> list[ActionChoice]:
    pool = enumerate_choices(space, include_finish=finish_allowed)
    want = min(n, len(pool))
    remaining = [choice for choice in pool if choice not in set(chosen)]
    if len(chosen) >= want or not remaining:
        return chosen[:want]
    if gateway.has_reranker:
        documents = tuple(choice_document(choice, space) for choice in remaining)
        try:
            scores = gateway.rerank(RerankRequest(query=state_query(state), documents=documents))
            order = sorted(range(len(remaining)), key=lambda index: (-scores[index], index))
            remaining = [remaining[index] for index in order]
        except GatewayError as exc:
            logger.warning("reranker backfill failed, falling back to random: %s", exc)
            remaining = rng.sample(remaining, len(remaining))
    else:
        remaining = rng.sample(remaining, len(remaining))
    return chosen + remaining[: want - len(chosen)]


def select_generative(
    state,
    space: ActionSpace,
    n: int,
    gateway: ModelGateway,
    *,
    rng: random.Random | None = None,
    temperature: float = 0.7,
    max_reasks: int = 2,
) -> ControllerDecision:
    """Ask the model to propose tool calls; validate, dedupe, and backfill.

    Invalid or duplicate calls are dropped; the decision is topped up to
    min(n, available) by the reranker when one is configured, else uniformly
    at random without replacement.
    """
    if n < 1:
        raise ControllerError("n must be at least 1")
    rng = rng or random.Random(0)
    finish_allowed = finish_offered(state, space)
    system = _tool_schema_text(space, finish_allowed, n)
    chain = "\n".join(step.step_text for step in state.steps) or "(none)"
    user = (
        f"Task input:\n{state.input_text}\n\nReasoning so far:\n{chain}\n\n"
        f"Propose up to {n} distinct actions as a JSON array."
    )
    choices: list[ActionChoice] = []
    rationales: list[str | None] = []
    for attempt in range(max_reasks + 1):
        prompt = user if attempt == 0 else (
            user + "\n\nYour previous reply could not be parsed. "
            "Reply with only a JSON array of action objects."
        )
        try:
            result = gateway.complete(
                ChatRequest(
                    messages=(("system", system), ("user", prompt)),
                    temperature=temperature,
                    max_tokens=512,
                )
            )
        except GatewayError as exc:
            raise ControllerError(f"generative controller call failed: {exc}") from exc
        choices, rationales, _ = parse_tool_calls(result.text, space, finish_allowed)
        if choices:
            break
    if not choices:
        raise ControllerError(f"no parseable tool calls after {max_reasks + 1} attempts")
    choices, rationales = _dedupe(choices, rationales)
    filled = _backfill(choices[:n], state, space, n, gateway, rng, finish_allowed)
    rationales = rationales[: len(filled)] + [None] * (len(filled) - len(rationales))
    return ControllerDecision(choices=tuple(filled), rationale_texts=tuple(rationales))


def select_forced(state, plan) -> ControllerDecision:
    """Follow a fixed plan: the step at the state's depth, then FINISH."""
    steps: Sequence[ActionChoice] = tuple(getattr(plan, "steps", plan))
    if state.depth > len(steps):
        raise ControllerError(
            f"plan of length {len(steps)} is exhausted at depth {state.depth}"
        )
    if state.depth == len(steps):
        return ControllerDecision(choices=(FINISH_CHOICE,))
    return ControllerDecision(choices=(steps[state.depth],))


class RerankerController:
    kind = "reranker"

    def __init__(self, gateway: ModelGateway) -> None:
        self.gateway = gateway

    def select(self, state, space: ActionSpace, n: int, rng=None) -> ControllerDecision:
        return select_reranker(state, space, n, self.gateway)


class GenerativeController:
    kind = "generative"

    def __init__(self, gateway: ModelGateway, temperature: float = 0.7) -> None:
        self.gateway = gateway
        self.temperature = temperature

    def select(self, state, space: ActionSpace, n: int, rng=None) -> ControllerDecision:
        return select_generative(
            state, space, n, self.gateway, rng=rng, temperature=self.temperature
        )


class ForcedController:
    kind = "forced"

    def __init__(self, plan) -> None:
        self.plan = plan

    def select(self, state, space: ActionSpace, n: int, rng=None) -> ControllerDecision:
        return select_forced(state, self.plan)
