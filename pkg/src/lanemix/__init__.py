"""Multi-agent lane-change learning on a simulated highway."""

from .sim import ConfigError, ScenarioConfig, UsageError

__all__ = ["ConfigError", "ScenarioConfig", "UsageError"]
__version__ = "0.1.0"
