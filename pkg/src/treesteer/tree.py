"""Search states, traces, and JSONL trace persistence.

States are immutable values; appending a step or finalizing creates a new
state with a fresh node id drawn from a per-tree counter, so node ids order
creation deterministically and break score ties in beam selection.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

from .actions import ActionChoice

logger = logging.getLogger(__name__)

TRACE_SCHEMA_VERSION = "1"

NodeId = tuple[int, int]


class TreeUsageError(RuntimeError):
    """Operation applied to a state in the wrong lifecycle stage."""


class TraceSchemaError(ValueError):
    """Trace file declares an unsupported schema version."""


@dataclass(frozen=True)
class StepRecord:
    """One executed reasoning step: the choice, its intervention, and the text."""

    choice: ActionChoice
    internal_reasoning_text: str
    prefix_text: str
    step_text: str

    def __post_init__(self) -> None:
        if self.choice.is_finish:
            raise TreeUsageError("FINISH is a finalization event, not a step")
        if self.prefix_text and not self.step_text.startswith(self.prefix_text):
            raise TreeUsageError(
                f"step text must start with its prefix {self.prefix_text!r}"
            )


@dataclass(frozen=True)
class SearchState:
    """A node in the reasoning tree: input, steps so far, and scores."""

    node_id: NodeId
    parent_id: NodeId | None
    input_text: str
    tree_seed: int
    steps: tuple[StepRecord, ...] = ()
    final_answer: str | None = None
    synthesis_mode: str | None = None
    prm_trail: tuple[float | None, ...] = ()
    orm_score: float | None = None

    def __post_init__(self) -> None:
        if len(self.prm_trail) != len(self.steps):
            raise TreeUsageError("one PRM slot per step is required")
        for score in (*self.prm_trail, self.orm_score):
            if score is not None and not 0.0 <= score <= 1.0:
                raise TreeUsageError(f"scores must lie in [0, 1], got {score}")

    @property
    def depth(self) -> int:
        return len(self.steps)

    @property
    def is_final(self) -> bool:
        return self.final_answer is not None

    @property
    def prm_score(self) -> float | None:
        return self.prm_trail[-1] if self.prm_trail else None


@dataclass
class NodeCounter:
    """Allocates (tree_seed, index) node ids in creation order."""

    tree_seed: int
    next_index: int = 0

    def allocate(self) -> NodeId:
        node_id = (self.tree_seed, self.next_index)
        self.next_index += 1
        return node_id


def make_root(input_text: str, counter: NodeCounter) -> SearchState:
    return SearchState(
        node_id=counter.allocate(),
        parent_id=None,
        input_text=input_text,
        tree_seed=counter.tree_seed,
    )


def append_step(state: SearchState, record: StepRecord, counter: NodeCounter) -> SearchState:
    """Child state extending ``state`` by one step; the original is unchanged."""
    if state.is_final:
        raise TreeUsageError("cannot append a step to a finalized state")
    return replace(
        state,
        node_id=counter.allocate(),
        parent_id=state.node_id,
        steps=state.steps + (record,),
        prm_trail=state.prm_trail + (None,),
    )


def finalize(
    state: SearchState, answer_text: str, mode: str, counter: NodeCounter
) -> SearchState:
    """Final state carrying the answer; eligible for ORM scoring and export."""
    if state.is_final:
        raise TreeUsageError("state is already finalized")
    return replace(
        state,
        node_id=counter.allocate(),
        parent_id=state.node_id,
        final_answer=answer_text,
        synthesis_mode=mode,
    )


def with_prm_score(state: SearchState, score: float) -> SearchState:
    """Annotate the state's own step with its PRM score (not a tree event)."""
    if not state.steps:
        raise TreeUsageError("root states take no PRM score")
    return replace(state, prm_trail=state.prm_trail[:-1] + (score,))


def with_orm_score(state: SearchState, score: float) -> SearchState:
    if not state.is_final:
        raise TreeUsageError("ORM scores apply to finalized states only")
    return replace(state, orm_score=score)


@dataclass(frozen=True)
class Trace:
    """One finished root-to-answer path; the unit of attribution analysis."""

    trajectory: tuple[ActionChoice, ...]
    final_answer: str
    synthesis_mode: str
    prm_scores: tuple[float | None, ...]
    orm_score: float | None
    tree_seed: int
    node_id: NodeId
    parent_id: NodeId | None
    input_text: str
    steps: tuple[StepRecord, ...]

    @property
    def trace_id(self) -> str:
        return format_node_id(self.node_id)


def trace_of(state: SearchState) -> Trace:
    if not state.is_final:
        raise TreeUsageError("only finalized states yield traces")
    return Trace(
        trajectory=tuple(step.choice for step in state.steps),
        final_answer=state.final_answer or "",
        synthesis_mode=state.synthesis_mode or "",
        prm_scores=state.prm_trail,
        orm_score=state.orm_score,
        tree_seed=state.tree_seed,
        node_id=state.node_id,
        parent_id=state.parent_id,
        input_text=state.input_text,
        steps=state.steps,
    )


def format_node_id(node_id: NodeId) -> str:
    return f"{node_id[0]}:{node_id[1]}"


def parse_node_id(text: str) -> NodeId:
    seed, _, index = text.partition(":")
    return (int(seed), int(index))


_RECORD_KEYS = (
    "tree_seed",
    "node_id",
    "parent_id",
    "input",
    "trajectory",
    "steps",
    "final_answer",
    "synthesis_mode",
    "prm_scores",
    "orm_score",
)


def trace_to_record(trace: Trace) -> dict:
    # key order is fixed so exports are byte-stable; trajectory objects keep
    # dimension order, so records must not be re-sorted by key.
    return {
        "tree_seed": trace.tree_seed,
        "node_id": format_node_id(trace.node_id),
        "parent_id": format_node_id(trace.parent_id) if trace.parent_id else None,
        "input": trace.input_text,
        "trajectory": [choice.as_dict() for choice in trace.trajectory],
        "steps": [
            {
                "internal_reasoning": step.internal_reasoning_text,
                "prefix": step.prefix_text,
                "text": step.step_text,
            }
            for step in trace.steps
        ],
        "final_answer": trace.final_answer,
        "synthesis_mode": trace.synthesis_mode,
        "prm_scores": list(trace.prm_scores),
        "orm_score": trace.orm_score,
    }


def trace_from_record(record: dict) -> Trace:
    extras = set(record) - set(_RECORD_KEYS)
    if extras:
        logger.warning("trace record has unknown keys, ignoring: %s", sorted(extras))
    trajectory = tuple(
        ActionChoice(per_dimension=tuple(step.items())) for step in record["trajectory"]
    )
    steps = tuple(
        StepRecord(
            choice=choice,
            internal_reasoning_text=step["internal_reasoning"],
            prefix_text=step["prefix"],
            step_text=step["text"],
        )
        for choice, step in zip(trajectory, record["steps"])
    )
    return Trace(
        trajectory=trajectory,
        final_answer=record["final_answer"],
        synthesis_mode=record["synthesis_mode"],
        prm_scores=tuple(record["prm_scores"]),
        orm_score=record["orm_score"],
        tree_seed=record["tree_seed"],
        node_id=parse_node_id(record["node_id"]),
        parent_id=parse_node_id(record["parent_id"]) if record["parent_id"] else None,
        input_text=record["input"],
        steps=steps,
    )


def export_traces(
    traces: Iterable[Trace], path: str | Path, header: dict | None = None
) -> None:
    """Write traces as JSONL with a leading header record."""
    head = {"header": {"schema": TRACE_SCHEMA_VERSION, **(header or {})}}
    with Path(path).open("w", encoding="utf-8") as handle:
        handle.write(json.dumps(head, ensure_ascii=False) + "\n")
        for trace in traces:
            handle.write(json.dumps(trace_to_record(trace), ensure_ascii=False) + "\n")


def import_traces(path: str | Path) -> tuple[list[Trace], dict]:
    """Read a trace file; returns (traces, header). Rejects unknown schemas."""
    traces: list[Trace] = []
    header: dict = {}
    with Path(path).open("r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if line_number == 0 and "header" in record:
                header = record["header"]
                schema = header.get("schema")
                if schema != TRACE_SCHEMA_VERSION:
                    raise TraceSchemaError(
                        f"unsupported trace schema {schema!r}, expected {TRACE_SCHEMA_VERSION!r}"
                    )
                continue
            traces.append(trace_from_record(record))
    return traces, header
