"""Run-manifest loading, backend construction, and module wiring.

Manifests are plain JSON; every command output embeds a hash of the manifest
(or resolved options) that produced it, so reruns are checkable byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

from .beam import SearchConfig, TreeModules
from .controllers import ForcedController, GenerativeController, RerankerController
from .evaluators import (
    GenerativeEvaluator,
    ProgrammaticEvaluator,
    RerankerEvaluator,
    load_rubric,
    make_verifier,
)
from .gateway import (
    HttpChatBackend,
    HttpRerankBackend,
    MockChatBackend,
    MockRerankBackend,
    MockRerankRule,
    MockRule,
    ModelGateway,
    ReplayChatBackend,
)
from .generation import TaskSignature
from .actions import load_action_space

logger = logging.getLogger(__name__)


class ManifestError(ValueError):
    """Run manifest is missing or inconsistent."""


def stable_hash(payload) -> str:
    """Order-insensitive hash of a JSON-serializable object."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def load_manifest(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"failed to parse manifest {path}: {exc}") from exc


def build_chat_backend(config: dict):
    kind = config.get("kind", "mock")
    if kind == "mock":
        rules = [
            MockRule(
                pattern=rule["pattern"],
                reply=rule.get("reply", ""),
                mode=rule.get("mode", "literal"),
                stop_reason=rule.get("stop_reason"),
            )
            for rule in config.get("rules", [])
        ]
        return MockChatBackend(
            rules=rules,
            seed=config.get("seed", 0),
            record_path=config.get("record_path"),
        )
    if kind == "replay":
        return ReplayChatBackend.from_fixture(config["fixture"])
    if kind == "openai_chat":
        return HttpChatBackend(
            base_url=config["base_url"],
            model=config["model"],
            api_key_env=config.get("api_key_env", "OPENAI_API_KEY"),
            prefill_mode=config.get("prefill_mode", "continue_final"),
            timeout=config.get("timeout", 120.0),
        )
    raise ManifestError(f"unknown chat backend kind {kind!r}")


def build_rerank_backend(config: dict | None):
    if not config:
        return None
    kind = config.get("kind", "mock")
    if kind == "mock":
        rules = [
            MockRerankRule(
                pattern=rule["pattern"],
                score=float(rule["score"]),
                query_pattern=rule.get("query_pattern"),
            )
            for rule in config.get("rules", [])
        ]
        return MockRerankBackend(rules=rules, seed=config.get("seed", 0))
    if kind == "http":
        return HttpRerankBackend(
            url=config["url"],
            model=config.get("model"),
            api_key_env=config.get("api_key_env", "RERANK_API_KEY"),
            timeout=config.get("timeout", 120.0),
        )
    raise ManifestError(f"unknown rerank backend kind {kind!r}")


def build_gateway(config: dict) -> ModelGateway:
    return ModelGateway(
        chat_backend=build_chat_backend(config.get("chat", {"kind": "mock"})),
        rerank_backend=build_rerank_backend(config.get("rerank")),
        max_in_flight=config.get("max_in_flight", 8),
        retries=config.get("retries", 3),
    )


def build_search_config(config: dict) -> SearchConfig:
    try:
        return SearchConfig(
            branching=config["branching"],
            beam_width=config["beam_width"],
            max_depth=config["max_depth"],
            temperature=config.get("temperature", 0.7),
            synthesis_mode=config.get("synthesis_mode", "conclusion"),
            controller=config.get("controller", "reranker"),
            prm=config.get("prm", "reranker"),
            orm=config.get("orm", "generative"),
            return_all_finals=config.get("return_all_finals", False),
            max_tokens_step=config.get("max_tokens_step", 512),
            max_tokens_answer=config.get("max_tokens_answer", 1024),
        )
    except KeyError as exc:
        raise ManifestError(f"search config is missing {exc}") from exc


def build_signature(config: dict | None) -> TaskSignature:
    config = config or {}
    known = {
        key: config[key]
        for key in (
            "task_instructions",
            "field_descriptions",
            "reasoning_field_name",
            "reasoning_field_type",
            "reasoning_field_description",
            "input_fields",
            "output_fields",
            "output_field_sections",
            "thought_length_instruction",
            "response_length_instruction",
            "use_internal_reasoning",
        )
        if key in config
    }
    known.setdefault("task_instructions", "Complete the task.")
    return TaskSignature(**known)


def build_controller(kind: str, gateway: ModelGateway, temperature: float = 0.7):
    if kind == "reranker":
        return RerankerController(gateway)
    if kind == "generative":
        return GenerativeController(gateway, temperature=temperature)
    if kind == "forced":
        raise ManifestError("the forced controller is wired per plan by targeted generation")
    raise ManifestError(f"unknown controller kind {kind!r}")


def build_evaluator(kind: str, gateway: ModelGateway, config: dict):
    if kind == "reranker":
        return RerankerEvaluator(gateway, criteria_text=config.get("criteria", "overall quality"))
    if kind == "generative":
        rubric = None
        if config.get("rubric"):
            rubric = load_rubric(config["rubric"], scale=config.get("rubric_scale", 4))
        return GenerativeEvaluator(gateway, rubric=rubric)
    if kind == "programmatic":
        verifier_config = config.get("verifier") or {"name": "nonempty"}
        return ProgrammaticEvaluator(
            make_verifier(verifier_config["name"], verifier_config.get("params"))
        )
    raise ManifestError(f"unknown evaluator kind {kind!r}")


def build_run(manifest: dict, base_dir: Path | None = None):
    """Wire (input_text, seeds, SearchConfig, TreeModules) from a run manifest."""
    base_dir = base_dir or Path(".")
    if "input" not in manifest:
        raise ManifestError("manifest needs an 'input' key")
    if "action_space" not in manifest:
        raise ManifestError("manifest needs an 'action_space' path")
    space_path = Path(manifest["action_space"])
    if not space_path.is_absolute():
        space_path = base_dir / space_path
    if not space_path.exists():
        raise ManifestError(f"action space manifest not found: {space_path}")
    space = load_action_space(space_path)
    search = build_search_config(manifest.get("search", {}))
    gateway = build_gateway(manifest.get("gateway", {}))
    evaluators = manifest.get("evaluators", {})
    prm = build_evaluator(
        search.prm, gateway, {**evaluators, "criteria": evaluators.get("prm_criteria", "reasoning quality")}
    )
    orm = build_evaluator(
        search.orm, gateway, {**evaluators, "criteria": evaluators.get("orm_criteria", "answer quality")}
    )
    modules = TreeModules(
        space=space,
        gateway=gateway,
        controller=build_controller(search.controller, gateway, search.temperature),
        prm=prm,
        orm=orm,
        signature=build_signature(manifest.get("task")),
        fallback_random=manifest.get("fallback_random", True),
    )
    seeds = manifest.get("seeds", [0])
    return manifest["input"], seeds, search, modules
