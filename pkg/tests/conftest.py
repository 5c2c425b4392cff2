"""Shared fixtures: tiny action spaces, scripted gateways, trace builders."""

from __future__ import annotations

import pytest

from treesteer.actions import (
    ActionSpace,
    ActionTemplate,
    Dimension,
    bundled_action_space,
    enumerate_choices,
    load_action_space,
)
from treesteer.gateway import (
    MockChatBackend,
    MockRerankBackend,
    MockRerankRule,
    MockRule,
    ModelGateway,
)
from treesteer.tree import NodeCounter, StepRecord, Trace, append_step, finalize, make_root, trace_of


@pytest.fixture
def tiny_space() -> ActionSpace:
    """2x2 space: a prefix-bearing tone dimension and a reasoning-bearing focus dimension."""
    return ActionSpace(
        dimensions=(
            Dimension(
                "tone",
                (
                    ActionTemplate("warm", "Warm register.", prefix="Warmly"),
                    ActionTemplate("stern", "Stern register.", prefix="Sternly"),
                ),
            ),
            Dimension(
                "focus",
                (
                    ActionTemplate("cost", "Cost focus.", internal_reasoning="I should weigh the costs."),
                    ActionTemplate("risk", "Risk focus.", internal_reasoning="I should weigh the risks."),
                ),
            ),
        ),
        allow_finish=True,
    )


@pytest.fixture
def argument_space() -> ActionSpace:
    return load_action_space(bundled_action_space("argument"))


@pytest.fixture
def noveltybench_space() -> ActionSpace:
    return load_action_space(bundled_action_space("noveltybench"))


def scripted_gateway(chat_rules=(), rerank_rules=(), seed: int = 0, **kwargs) -> ModelGateway:
    return ModelGateway(
        chat_backend=MockChatBackend(rules=list(chat_rules), seed=seed),
        rerank_backend=MockRerankBackend(rules=list(rerank_rules), seed=seed),
        **kwargs,
    )


@pytest.fixture
def mock_gateway() -> ModelGateway:
    """Catch-all mock gateway: step and answer replies distinguish themselves."""
    return scripted_gateway(
        chat_rules=[
            MockRule(pattern=r"<answer>", mode="digest"),
            MockRule(pattern=r"<step>", mode="digest"),
        ]
    )


def build_trace(
    space: ActionSpace,
    choice_indices: list[int],
    tree_seed: int = 0,
    answer: str = "answer text",
    counter: NodeCounter | None = None,
    mode: str = "strict",
) -> Trace:
    """Trace following the given enumerate_choices indices, one per step."""
    choices = enumerate_choices(space, include_finish=False)
    counter = counter or NodeCounter(tree_seed)
    state = make_root("input text", counter)
    for step, index in enumerate(choice_indices):
        choice = choices[index]
        prefix = ""
        for dim_name, action_name in choice.per_dimension:
            template = space.template(dim_name, action_name)
            if template.prefix:
                prefix = template.prefix
        state = append_step(
            state,
            StepRecord(
                choice=choice,
                internal_reasoning_text=f"reasoning {step}",
                prefix_text=prefix,
                step_text=(prefix + " " if prefix else "") + f"step text {step} of {index}",
            ),
            counter,
        )
    return trace_of(finalize(state, answer, mode, counter))


__all__ = [
    "MockChatBackend",
    "MockRerankBackend",
    "MockRerankRule",
    "MockRule",
    "build_trace",
    "scripted_gateway",
]
