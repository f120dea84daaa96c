from .config import ExperimentConfig, ExperimentKind, config_hash, load_config
from .fields import read_field, render_heatmap, write_field
from .presets import get_preset, list_presets
from .runner import ExperimentRunner, RunManifest

__all__ = [
    "ExperimentConfig",
    "ExperimentKind",
    "config_hash",
    "load_config",
    "read_field",
    "render_heatmap",
    "write_field",
    "get_preset",
    "list_presets",
    "ExperimentRunner",
    "RunManifest",
]
