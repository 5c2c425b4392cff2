"""Action templates, multi-dimensional action spaces, and intervention rendering.

An action space is an ordered list of named dimensions, each holding a list of
action templates.  One action choice selects exactly one template per
dimension; rendering a choice yields the textual intervention (an optional
prefix plus concatenated internal-reasoning guidance) that steers the next
generation step.  A dedicated FINISH sentinel ends reasoning early.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass
from pathlib import Path

logger = logging.getLogger(__name__)

FINISH_NAME = "FINISH"


class ActionSpaceError(ValueError):
    """Malformed action-space document or invalid template reference."""


class PrefixConflictError(ActionSpaceError):
    """More than one selected template contributes a prefix."""


@dataclass(frozen=True)
class ActionTemplate:
    """A named textual intervention: prefix and/or internal-reasoning guidance."""

    name: str
    definition: str
    prefix: str | None = None
    internal_reasoning: str | None = None

    def __post_init__(self) -> None:
        if not self.name:
            raise ActionSpaceError("action template name must be nonempty")
        if not (self.prefix or self.internal_reasoning):
            raise ActionSpaceError(
                f"template {self.name!r} must carry a prefix or internal reasoning"
            )


@dataclass(frozen=True)
class Dimension:
    name: str
    templates: tuple[ActionTemplate, ...]

    def __post_init__(self) -> None:
        if not self.name:
            raise ActionSpaceError("dimension name must be nonempty")
        if not self.templates:
            raise ActionSpaceError(f"dimension {self.name!r} has no templates")
        seen: set[str] = set()
        for template in self.templates:
            if template.name in seen:
                raise ActionSpaceError(
                    f"duplicate template name {template.name!r} in dimension {self.name!r}"
                )
            seen.add(template.name)

    def template(self, action_name: str) -> ActionTemplate:
        for template in self.templates:
            if template.name == action_name:
                return template
        raise ActionSpaceError(
            f"unknown action {action_name!r} in dimension {self.name!r}"
        )


@dataclass(frozen=True)
class ActionSpace:
    """Ordered dimensions of action templates plus the FINISH policy flag."""

    dimensions: tuple[Dimension, ...]
    allow_finish: bool = True

    def __post_init__(self) -> None:
        if not self.dimensions:
            raise ActionSpaceError("action space needs at least one dimension")
        names = [d.name for d in self.dimensions]
        if len(set(names)) != len(names):
            raise ActionSpaceError(f"duplicate dimension names: {names}")

    @property
    def dimension_names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.dimensions)

    def dimension(self, name: str) -> Dimension:
        for dim in self.dimensions:
            if dim.name == name:
                return dim
        raise ActionSpaceError(f"unknown dimension {name!r}")

    def template(self, dimension_name: str, action_name: str) -> ActionTemplate:
        return self.dimension(dimension_name).template(action_name)

    def choice_count(self, include_finish: bool = False) -> int:
        count = 1
        for dim in self.dimensions:
            count *= len(dim.templates)
        if include_finish and self.allow_finish:
            count += 1
        return count


@dataclass(frozen=True)
class ActionChoice:
    """One template name per dimension, or the FINISH sentinel.

    ``per_dimension`` is an ordered tuple of (dimension_name, action_name)
    pairs so choices hash and compare deterministically.
    """

    per_dimension: tuple[tuple[str, str], ...]
    is_finish: bool = False

    def __post_init__(self) -> None:
        if self.is_finish and self.per_dimension:
            raise ActionSpaceError("FINISH choice must not name any template")
        if not self.is_finish and not self.per_dimension:
            raise ActionSpaceError("non-FINISH choice must name one template per dimension")

    @classmethod
    def finish(cls) -> "ActionChoice":
        return cls(per_dimension=(), is_finish=True)

    def action_for(self, dimension_name: str) -> str:
        for dim, action in self.per_dimension:
            if dim == dimension_name:
                return action
        raise ActionSpaceError(f"choice has no dimension {dimension_name!r}")

    def as_dict(self) -> dict[str, str]:
        return dict(self.per_dimension)

    def label(self) -> str:
        if self.is_finish:
            return FINISH_NAME
        return "/".join(action for _, action in self.per_dimension)


FINISH_CHOICE = ActionChoice.finish()


@dataclass(frozen=True)
class Intervention:
    """Rendered text guidance for one step: prefix plus internal reasoning."""

    prefix_text: str
    internal_reasoning_text: str


def make_choice(space: ActionSpace, mapping: dict[str, str]) -> ActionChoice:
    """Build a validated choice from a dimension->action mapping.

    Pairs are normalized to the space's dimension order.
    """
    if set(mapping) != set(space.dimension_names):
        raise ActionSpaceError(
            f"choice must name exactly the dimensions {space.dimension_names}, got {sorted(mapping)}"
        )
    pairs = []
    for dim in space.dimensions:
        dim.template(mapping[dim.name])  # existence check
        pairs.append((dim.name, mapping[dim.name]))
    return ActionChoice(per_dimension=tuple(pairs))


def _parse_template(entry: object, index: int, source: str) -> ActionTemplate:
    if not isinstance(entry, dict):
        raise ActionSpaceError(f"{source}: entry {index} is not an object")
    name = entry.get("name")
    definition = entry.get("definition")
    if not name or not isinstance(name, str):
        raise ActionSpaceError(f"{source}: entry {index} is missing a name")
    if not definition or not isinstance(definition, str):
        raise ActionSpaceError(f"{source}: entry {name!r} is missing a definition")
    return ActionTemplate(
        name=name,
        definition=definition,
        prefix=entry.get("prefix") or None,
        internal_reasoning=entry.get("internal_reasoning") or None,
    )


def _parse_dimension(name: str, records: object, source: str) -> Dimension:
    if not isinstance(records, list) or not records:
        raise ActionSpaceError(f"{source}: dimension {name!r} must be a nonempty array")
    templates = tuple(
        _parse_template(entry, index, source) for index, entry in enumerate(records)
    )
    return Dimension(name=name, templates=templates)


def load_action_space_data(manifest: dict, documents: dict[str, list]) -> ActionSpace:
    """Build an action space from an in-memory manifest plus dimension documents."""
    entries = manifest.get("dimensions")
    if not isinstance(entries, list) or not entries:
        raise ActionSpaceError("manifest must list at least one dimension")
    dimensions = []
    for entry in entries:
        name = entry.get("name") if isinstance(entry, dict) else None
        if not name:
            raise ActionSpaceError(f"manifest dimension entry {entry!r} has no name")
        if name not in documents:
            raise ActionSpaceError(f"missing document for dimension {name!r}")
        dimensions.append(_parse_dimension(name, documents[name], f"dimension {name!r}"))
    return ActionSpace(
        dimensions=tuple(dimensions),
        allow_finish=bool(manifest.get("allow_finish", True)),
    )


def load_action_space(manifest_path: str | Path) -> ActionSpace:
    """Load a space from a manifest file referencing one document per dimension."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ActionSpaceError(f"failed to parse manifest {manifest_path}: {exc}") from exc
    entries = manifest.get("dimensions")
    if not isinstance(entries, list) or not entries:
        raise ActionSpaceError(f"{manifest_path}: manifest must list at least one dimension")
    documents = {}
    for entry in entries:
        name = entry.get("name") if isinstance(entry, dict) else None
        path = entry.get("path") if isinstance(entry, dict) else None
        if not name or not path:
            raise ActionSpaceError(f"{manifest_path}: dimension entry {entry!r} needs name and path")
        doc_path = manifest_path.parent / path
        try:
            documents[name] = json.loads(doc_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ActionSpaceError(f"failed to parse {doc_path}: {exc}") from exc
    return load_action_space_data(manifest, documents)


def serialize_action_space(space: ActionSpace) -> dict:
    """Inverse of :func:`load_action_space_data`; returns manifest plus documents."""
    manifest = {
        "dimensions": [{"name": d.name, "path": f"{d.name}.json"} for d in space.dimensions],
        "allow_finish": space.allow_finish,
    }
    documents = {
        d.name: [
            {
                "name": t.name,
                "definition": t.definition,
                "prefix": t.prefix,
                "internal_reasoning": t.internal_reasoning,
            }
            for t in d.templates
        ]
        for d in space.dimensions
    }
    return {"manifest": manifest, "documents": documents}


def save_action_space(space: ActionSpace, directory: str | Path) -> Path:
    """Write manifest plus per-dimension documents; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = serialize_action_space(space)
    for name, records in payload["documents"].items():
        (directory / f"{name}.json").write_text(
            json.dumps(records, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
        )
    manifest_path = directory / "manifest.json"
    manifest_path.write_text(
        json.dumps(payload["manifest"], indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    return manifest_path


def bundled_action_space(name: str) -> Path:
    """Manifest path of an action space shipped with the package."""
    path = Path(__file__).parent / "data" / "action_spaces" / name / "manifest.json"
    if not path.exists():
        available = sorted(p.name for p in (path.parent.parent).iterdir())
        raise ActionSpaceError(f"no bundled action space {name!r}; available: {available}")
    return path


def enumerate_choices(space: ActionSpace, include_finish: bool = False) -> list[ActionChoice]:
    """All choices in lexicographic dimension order; FINISH appended last when offered."""
    names = [[t.name for t in dim.templates] for dim in space.dimensions]
    choices = [
        ActionChoice(
            per_dimension=tuple(zip(space.dimension_names, combo)),
        )
        for combo in itertools.product(*names)
    ]
    if include_finish and space.allow_finish:
        choices.append(FINISH_CHOICE)
    return choices


def normalize_reasoning_fragment(text: str) -> str:
    """Shape a guidance fragment into a first-person sentence.

    Fragments already phrased in first person are kept verbatim; imperative
    fragments get an "I should" lead-in.  A terminal period is ensured.
    """
    fragment = text.strip()
    if not fragment:
        return ""
    if not (fragment == "I" or fragment.startswith(("I ", "I'"))):
        fragment = "I should " + fragment[0].lower() + fragment[1:]
    if fragment[-1] not in ".!?":
        fragment += "."
    return fragment


def render_intervention(choice: ActionChoice, space: ActionSpace) -> Intervention:
    """Render the prefix and internal reasoning for one non-FINISH choice.

    The prefix comes from the single prefix-bearing selected template; internal
    reasoning fragments are normalized and joined with single spaces in
    dimension order.
    """
    if choice.is_finish:
        raise ActionSpaceError("FINISH is rendered by the answer delimiter prefill, not here")
    prefixes: list[tuple[str, str]] = []
    fragments: list[str] = []
    for dim_name, action_name in choice.per_dimension:
        template = space.template(dim_name, action_name)
        if template.prefix:
            prefixes.append((dim_name, template.prefix))
        if template.internal_reasoning:
            fragments.append(normalize_reasoning_fragment(template.internal_reasoning))
    if len(prefixes) > 1:
        dims = ", ".join(dim for dim, _ in prefixes)
        raise PrefixConflictError(f"multiple dimensions contribute a prefix: {dims}")
    prefix_text = prefixes[0][1] if prefixes else ""
    return Intervention(
        prefix_text=prefix_text,
        internal_reasoning_text=" ".join(fragments),
    )
