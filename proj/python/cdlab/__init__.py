"""Python bindings for the cdlab C++ core."""

from ._core import (
    Backend,
    ConfigError,
    Error,
    FeatureSpace,
    FormatError,
    Pipeline,
    PipelineError,
    Sae,
    ToyLM,
    World,
    cayley,
    default_config,
    disentangle_score,
    display_round,
    load_config,
    normalize_config,
    partition,
    read_reports,
)

__all__ = [
    "Backend",
    "ConfigError",
    "Error",
    "FeatureSpace",
    "FormatError",
    "Pipeline",
    "PipelineError",
    "Sae",
    "ToyLM",
    "World",
    "cayley",
    "default_config",
    "disentangle_score",
    "display_round",
    "load_config",
    "normalize_config",
    "partition",
    "read_reports",
]
