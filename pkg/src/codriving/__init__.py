"""Deterministic multi-agent cooperative-driving simulator with an LLM decision loop."""

from .actions import MetaAction
from .config import ScenarioConfig, default_config, load_config
from .harness import Flags, report, run_batch, run_episode

__all__ = [
    "Flags",
    "MetaAction",
    "ScenarioConfig",
    "default_config",
    "load_config",
    "report",
    "run_batch",
    "run_episode",
]
__version__ = "0.1.0"
