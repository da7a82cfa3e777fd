"""Root cause localization for microservice incidents from metrics, logs and traces."""

from .config import Config, load_config
from .ingestion import load_case
from .metrics_rca import metrics_rank
from .model import IncidentCase, Ranking, fuse_rankings, validate_case
from .twist import twist_rank

__all__ = [
    "Config",
    "IncidentCase",
    "Ranking",
    "fuse_rankings",
    "load_case",
    "load_config",
    "metrics_rank",
    "twist_rank",
    "validate_case",
]
