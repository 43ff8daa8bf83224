"""JSON run configuration, validated against a closed schema before any work starts."""
from __future__ import annotations

import json
from typing import Any, Dict

import jsonschema

from .errors import ConfigError

_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}
_SHAPE = {"type": "array", "items": _POS_INT, "minItems": 3, "maxItems": 3}


def _closed(properties: Dict[str, Any]) -> Dict[str, Any]:
    return {"type": "object", "properties": properties, "additionalProperties": False}


RUN_CONFIG_SCHEMA = _closed(
    {
        "seed": _NONNEG_INT,
        "threads": _POS_INT,
        "out": {"type": "string"},
        "gen": _closed(
            {
                "shape": _SHAPE,
                "mean_grain_size": {"type": "number", "exclusiveMinimum": 0},
                "mean_twins_per_grain": {"type": "number", "minimum": 0},
                "sigma_ln": {"type": "number", "exclusiveMinimum": 0},
                "voxels_per_unit": {"type": "number", "exclusiveMinimum": 0},
                "min_grain_voxels": _POS_INT,
                "count": _POS_INT,
                "preset": {"enum": ["full", None]},
            }
        ),
        "model": _closed(
            {
                "layers": _NONNEG_INT,
                "heads": _POS_INT,
                "embed_dim": _POS_INT,
                "ff_dim": _POS_INT,
                "dropout_p": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "input_channels": {"const": 3},
                "crop_shape": _SHAPE,
            }
        ),
        "train": _closed(
            {
                "lr_peak": {"type": "number", "exclusiveMinimum": 0},
                "warmup_steps": _NONNEG_INT,
                "total_steps": _NONNEG_INT,
                "momentum": {"type": "number", "minimum": 0, "maximum": 1},
                "weight_decay": {"type": "number", "minimum": 0},
                "batch_size": _POS_INT,
                "seed": _NONNEG_INT,
                "checkpoint_every": _NONNEG_INT,
                "volumes": {"type": "array", "items": {"type": "string"}},
            }
        ),
        "augment": _closed(
            {
                "scale_range": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                "offset_range": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                "flips": {"type": "boolean"},
                "rotations": {"type": "boolean"},
                "permute_axes": {"type": "boolean"},
                "color_shift": {"type": "boolean"},
            }
        ),
        "eval": _closed(
            {
                "methods": {
                    "type": "array",
                    "items": {"enum": ["transformer", "knn", "previous", "next"]},
                    "uniqueItems": True,
                },
                "segment_shape": _SHAPE,
                "workers": _POS_INT,
                "volumes": {"type": "array", "items": {"type": "string"}},
            }
        ),
    }
)


def validate_config(doc: Any) -> Dict[str, Any]:
    try:
        jsonschema.validate(doc, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from exc
    return doc


def load_config(path) -> Dict[str, Any]:
    """Read and validate a run configuration; a missing path raises FileNotFoundError."""
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return validate_config(doc)
