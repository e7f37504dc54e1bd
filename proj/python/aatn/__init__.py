"""Transformer encoder with query/key alignment losses."""

import json

from ._core import (
    ConfigError,
    ContractError,
    DimensionError,
    InputError,
    IoError,
    NumericError,
    accuracy,
    attention_weights,
    ece,
    gen_pair_matching,
    mmd_gaussian,
    run_cli,
    sinkhorn,
)
from ._core import train as _train


def train(config=None, checkpoint=None):
    """Train from a config dict (or JSON text) and return the run report as a dict."""
    if config is None:
        config = {}
    text = config if isinstance(config, str) else json.dumps(config)
    return json.loads(_train(text, checkpoint))


__all__ = [
    "ConfigError",
    "ContractError",
    "DimensionError",
    "InputError",
    "IoError",
    "NumericError",
    "accuracy",
    "attention_weights",
    "ece",
    "gen_pair_matching",
    "mmd_gaussian",
    "run_cli",
    "sinkhorn",
    "train",
]
