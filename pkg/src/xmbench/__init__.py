"""Class-disjoint cross-modal retrieval benchmark.

Subpackages map to the pipeline stages: :mod:`dataset` (features, labels,
synthetic generator), :mod:`protocol` (folds and tasks), :mod:`learners`
(CM/SM/SCM/TS and binary codes), :mod:`retrieval` (ranking, run files),
:mod:`metrics` (AP, MAP, CMC) and :mod:`runner` (config-driven grids).
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError, DatasetError, LearnerError, MetricError, ProtocolError, RetrievalError, XmbenchError,
)

__all__ = [
    "__version__", "XmbenchError", "DatasetError", "ProtocolError", "LearnerError", "RetrievalError",
    "MetricError", "ConfigError",
]
