"""Prefill construction, step/answer generation, and synthesis-mode prompts.

The prefill grammar is bit-exact and shared with trace re-serialization:
every prefill opens the thinking block once, re-serializes prior steps inside
``<step>...</step>`` blocks, and either opens a new step block that ends with
the intervention prefix or closes the thinking block to request the answer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .actions import ActionChoice, ActionSpace, Intervention, render_intervention
from .gateway import ChatRequest, CompletionResult, ModelGateway
from .tree import SearchState, StepRecord, TreeUsageError

logger = logging.getLogger(__name__)

SYNTHESIS_MODES = ("strict", "faithful", "restructured", "conclusion")

STEP_STOP = "</step>"
ANSWER_STOP = "</answer>"

THINKING_OPEN = "<thinking>\n"
ANSWER_PREFILL_TAIL = "</thinking>\n<answer>\n"


class TemplateError(ValueError):
    """A prompt template placeholder could not be bound."""


FINAL_OUTPUT_INSTRUCTIONS = {
    "strict": """Your final answer must include the full text from all reasoning steps, copied nearly word-for-word and in sequential order.

- Preserve the exact wording, phrasing, structure, and examples.
- Maintain the original order and logical flow exactly as provided.
- You may add only: A brief introduction/conclusion, short transitions.
- Do NOT rewrite, paraphrase, summarize, or restructure.
- Do NOT add new ideas, arguments, facts, or examples.""",
    "faithful": """Your final answer must remain highly faithful to the reasoning steps.

- Preserve the full set of reasoning steps and their original order.
- You may lightly rephrase for clarity, but meaning must remain unchanged.
- Structure and sequence should closely follow the original.
- Do NOT introduce new ideas or significantly alter existing reasoning.""",
    "restructured": """Your final answer should preserve the same core ideas and reasoning from the steps provided, while improving clarity and coherence.

- Maintain the essential arguments and logical intent.
- You may rephrase, reorganize, and restructure the content for better flow and readability.
- The overall set of ideas should remain the same, but the presentation may differ.
- Do NOT introduce new ideas or factual content beyond what appears in the reasoning steps.

Your goal is to produce a well-structured synthesis that faithfully reflects the original reasoning while optimizing expression and organization.""",
    "conclusion": """Your final answer must be a standalone response to the user's task and instructions.

- Focus on producing a clear, logically consistent, and high-quality final answer.
- You are not required to preserve the structure, wording, or order of the reasoning steps (between <thinking>...</thinking> tags).
- Use the reasoning steps only as internal guidance; do NOT mention them or refer to them.
- The user will *not* have access to the reasoning steps you wrote, so referencing them is confusing and unhelpful. The user will only see what you write between <answer>...</answer> tags.
- Do NOT explain what you are going to do; just produce the final deliverable. While reasoning was meant for planning, the final output should be a standalone response to the user's task and instructions.
- If the task requires strict formatting (math, formatting specifications for text, code, etc.), follow those requirements exactly in the final output.

Your goal is to output only the final answer content that satisfies the user's instructions.""",
}


_VANILLA_SYSTEM_TEMPLATE = """# Instructions
{task_instructions}

{field_descriptions}

When solving this problem, you must break down your solution into a series of reasoning steps, followed by a final answer.
Each step towards the answer should be encased within <step>...</step> tags, and contain a `{reasoning_field_name}` that advances the solution towards producing {output_fields}.
{final_output_description}

Your reasoning process should follow the rules below:
- Each `{reasoning_field_name}` (of type `{reasoning_field_type}`) entails {reasoning_field_description}.{thought_length_instruction}{response_length_instruction}

## Response Format
Once a user provides {input_fields}, your response must follow this template:

<thinking>
<step>
## {reasoning_field_name}
The first reasoning step towards producing {output_fields}
</step>
<step>
## {reasoning_field_name}
The second reasoning step towards producing {output_fields}
</step>
...
<step>
## {reasoning_field_name}
The final reasoning step towards producing {output_fields}
</step>
</thinking>
<answer>
{output_field_sections}
</answer>"""


_INTERNAL_REASONING_SYSTEM_TEMPLATE = """# Instructions
{task_instructions}

{field_descriptions}

When solving this problem, you must break down your solution into a series of reasoning steps, followed by a final answer.
Each step towards the answer should be encased within <step>...</step> tags, and contain a `{reasoning_field_name}` that advances the solution towards producing {output_fields}.
{final_output_description}

Your reasoning process should follow the rules below:
- Each `{reasoning_field_name}` (of type `{reasoning_field_type}`) entails {reasoning_field_description}.
- Before writing a new `{reasoning_field_name}`, start with some internal reasoning which discusses and guides what to do with the next `{reasoning_field_name}`.{thought_length_instruction}{response_length_instruction}

## Response Format
Once a user provides {input_fields}, your response must follow this template:

<thinking>
<step>
## internal_reasoning
Your internal reasoning about the first `{reasoning_field_name}`
## {reasoning_field_name}
The first reasoning step towards producing {output_fields}
</step>
<step>
## internal_reasoning
Your internal reasoning about the second `{reasoning_field_name}`
## {reasoning_field_name}
The second reasoning step towards producing {output_fields}
</step>
...
</thinking>
<answer>
{output_field_sections}
</answer>"""


@dataclass(frozen=True)
class TaskSignature:
    """Per-task prompt bindings for the generator templates."""

    task_instructions: str
    field_descriptions: str = ""
    reasoning_field_name: str = "claim"
    reasoning_field_type: str = "str"
    reasoning_field_description: str = "a single self-contained reasoning step that advances the final answer"
    input_fields: str = "the task input"
    output_fields: str = "the final answer"
    output_field_sections: str = "The final answer content"
    thought_length_instruction: str = ""
    response_length_instruction: str = ""
    use_internal_reasoning: bool = True


def render_system_prompt(mode: str, signature: TaskSignature) -> str:
    """Deterministic generator system prompt for one synthesis mode."""
    if mode not in SYNTHESIS_MODES:
        raise TemplateError(f"unknown synthesis mode {mode!r}")
    template = (
        _INTERNAL_REASONING_SYSTEM_TEMPLATE
        if signature.use_internal_reasoning
        else _VANILLA_SYSTEM_TEMPLATE
    )
    bindings = {
        "task_instructions": signature.task_instructions,
        "field_descriptions": signature.field_descriptions,
        "reasoning_field_name": signature.reasoning_field_name,
        "reasoning_field_type": signature.reasoning_field_type,
        "reasoning_field_description": signature.reasoning_field_description,
        "input_fields": signature.input_fields,
        "output_fields": signature.output_fields,
        "output_field_sections": signature.output_field_sections,
        "thought_length_instruction": signature.thought_length_instruction,
        "response_length_instruction": signature.response_length_instruction,
        "final_output_description": FINAL_OUTPUT_INSTRUCTIONS[mode],
    }
    try:
        return template.format_map(bindings)
    except KeyError as exc:
        raise TemplateError(f"unbound template placeholder: {exc}") from exc


def serialize_steps(state: SearchState, reasoning_field_name: str = "claim") -> str:
    """Prior steps re-serialized as closed step blocks (may be empty)."""
    blocks = []
    for step in state.steps:
        blocks.append(
            f"<step>\n## internal_reasoning\n{step.internal_reasoning_text}\n"
            f"## {reasoning_field_name}\n{step.step_text}\n</step>\n"
        )
    return "".join(blocks)


def build_step_prefill(
    state: SearchState, intervention: Intervention, reasoning_field_name: str = "claim"
) -> str:
    """Prefill that opens a new step block ending with the intervention prefix."""
    if state.is_final:
        raise TreeUsageError("cannot build a step prefill for a finalized state")
    return (
        THINKING_OPEN
        + serialize_steps(state, reasoning_field_name)
        + f"<step>\n## internal_reasoning\n{intervention.internal_reasoning_text}\n"
        + f"## {reasoning_field_name}\n{intervention.prefix_text}"
    )


def build_answer_prefill(state: SearchState, reasoning_field_name: str = "claim") -> str:
    """Prefill that closes the thinking block and opens the answer."""
    return THINKING_OPEN + serialize_steps(state, reasoning_field_name) + ANSWER_PREFILL_TAIL


def join_step_text(prefix: str, continuation: str) -> str:
    """Prefix followed by the continuation, with a single separating space
    when neither side already provides boundary whitespace."""
    if not prefix:
        return continuation
    if not continuation:
        return prefix
    if prefix[-1].isspace() or continuation[0].isspace():
        return prefix + continuation
    return prefix + " " + continuation


def build_step_request(
    state: SearchState,
    choice: ActionChoice,
    space: ActionSpace,
    mode: str,
    signature: TaskSignature,
    temperature: float = 0.7,
    max_tokens: int = 512,
    seed: int | None = None,
) -> tuple[ChatRequest, Intervention]:
    if choice.is_finish:
        raise TreeUsageError("FINISH routes to answer generation, not step generation")
    intervention = render_intervention(choice, space)
    request = ChatRequest(
        messages=(
            ("system", render_system_prompt(mode, signature)),
            ("user", state.input_text),
        ),
        prefill=build_step_prefill(state, intervention, signature.reasoning_field_name),
        stop_sequences=(STEP_STOP,),
        temperature=temperature,
        max_tokens=max_tokens,
        seed=seed,
    )
    return request, intervention


def build_answer_request(
    state: SearchState,
    mode: str,
    signature: TaskSignature,
    temperature: float = 0.7,
    max_tokens: int = 1024,
    seed: int | None = None,
) -> ChatRequest:
    return ChatRequest(
        messages=(
            ("system", render_system_prompt(mode, signature)),
            ("user", state.input_text),
        ),
        prefill=build_answer_prefill(state, signature.reasoning_field_name),
        stop_sequences=(ANSWER_STOP,),
        temperature=temperature,
        max_tokens=max_tokens,
        seed=seed,
    )


def make_step_record(
    choice: ActionChoice, intervention: Intervention, result: CompletionResult
) -> StepRecord:
    return StepRecord(
        choice=choice,
        internal_reasoning_text=intervention.internal_reasoning_text,
        prefix_text=intervention.prefix_text,
        step_text=join_step_text(intervention.prefix_text, result.text),
    )


def generate_step(
    state: SearchState,
    choice: ActionChoice,
    space: ActionSpace,
    gateway: ModelGateway,
    temperature: float = 0.7,
    *,
    mode: str = "conclusion",
    signature: TaskSignature | None = None,
    max_tokens: int = 512,
    seed: int | None = None,
) -> StepRecord:
    """Generate one reasoning step; raises GenerationFailure on a failed branch."""
    signature = signature or TaskSignature(task_instructions="")
    request, intervention = build_step_request(
        state, choice, space, mode, signature, temperature, max_tokens, seed
    )
    result = gateway.complete(request)
    return make_step_record(choice, intervention, result)


def generate_answer(
    state: SearchState,
    mode: str,
    gateway: ModelGateway,
    temperature: float = 0.7,
    *,
    signature: TaskSignature | None = None,
    max_tokens: int = 1024,
    seed: int | None = None,
) -> str:
    """Generate the final answer text for a state (zero or more steps)."""
    signature = signature or TaskSignature(task_instructions="")
    request = build_answer_request(state, mode, signature, temperature, max_tokens, seed)
    return gateway.complete(request).text
