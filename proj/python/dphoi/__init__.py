"""Python front end for the dphoi core."""

import json
import os

import numpy as np

from ._core import (
    CheckpointError,
    ConfigError,
    DataError,
    EmptyRpqError,
    Error,
    NonFiniteError,
    ShapeError,
    StateError,
    fuse,
    hungarian_match,
    info_nce,
    parse_caption,
    select_rpq,
    template_prompt,
)
from . import _core

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataError",
    "EmptyRpqError",
    "Error",
    "NonFiniteError",
    "ShapeError",
    "StateError",
    "default_config",
    "fuse",
    "hungarian_match",
    "info_nce",
    "init_checkpoint",
    "load_config",
    "parse_caption",
    "probe",
    "run_pretrain",
    "select_rpq",
    "template_prompt",
    "transfer",
]


def default_config():
    return json.loads(_core._default_config())


def load_config(path):
    return json.loads(_core._load_config(os.fspath(path)))


def run_pretrain(config):
    """Runs pretraining from a config dict (see default_config) and returns the summary."""
    return json.loads(_core._run_pretrain(json.dumps(config)))


def probe(checkpoint, image, threshold=None, fusion="max", attention=True):
    """Probes one HxWx3 image in [0, 1] with the model stored in `checkpoint`."""
    img = np.ascontiguousarray(image, dtype=np.float64)
    return json.loads(_core._probe(os.fspath(checkpoint), img, threshold, fusion, attention))


def transfer(source, target, strategy, output):
    """Initializes `target` from `source`, writes `output` and returns the report."""
    return json.loads(_core._transfer(os.fspath(source), os.fspath(target), strategy, os.fspath(output)))


def init_checkpoint(model_config, output):
    """Writes a freshly initialized checkpoint for a model config dict."""
    _core._init_checkpoint(json.dumps(model_config), os.fspath(output))
