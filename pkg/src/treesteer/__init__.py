"""treesteer: steer LLM tree search with named action templates, attribute
output quality to logged action sequences, and target promising unexplored
trajectories."""

from .actions import (
    ActionChoice,
    ActionSpace,
    ActionTemplate,
    FINISH_CHOICE,
    Intervention,
    enumerate_choices,
    load_action_space,
    render_intervention,
)
from .beam import SearchConfig, TreeModules, prune_layer, run_forest, run_tree
from .tree import SearchState, StepRecord, Trace, export_traces, import_traces

__version__ = "0.1.0"

__all__ = [
    "ActionChoice",
    "ActionSpace",
    "ActionTemplate",
    "FINISH_CHOICE",
    "Intervention",
    "SearchConfig",
    "SearchState",
    "StepRecord",
    "Trace",
    "TreeModules",
    "enumerate_choices",
    "export_traces",
    "import_traces",
    "load_action_space",
    "prune_layer",
    "render_intervention",
    "run_forest",
    "run_tree",
    "__version__",
]
