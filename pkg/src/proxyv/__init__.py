"""Desk-scale lab for proxy vision tokens.

A numpy transformer stack with a reverse-mode tape, interchangeable
vision-token compute regimes, an exact multiply-accumulate cost model, and a
synthetic-task harness for information-loss comparisons.
"""

from .errors import CheckpointError, ConfigError, ShapeError, StateError, TrainingError
from .rng import SeededRng
from .tensor import (
    MacCounter,
    Parameter,
    Tensor,
    backward,
    count_macs,
    mac_scope,
    no_grad,
)

__version__ = "0.1.0"
