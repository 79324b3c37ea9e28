"""Run configuration: JSON schema, defaults, path resolution and stage hashes.

Each pipeline stage has a hash over the configuration sections that affect
its outputs, chained to the upstream stage hash. Outputs embed their stage
hash and downstream stages refuse inputs whose hash does not match.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

import jsonschema

from .evaluation import TrainConfig
from .model import ModelConfig
from .preprocess import NormalizationParams
from .synth import CohortSpec


class ConfigError(ValueError):
    pass


ABLATIONS = ("no_aux", "no_ensemble")

_num = {"type": "number"}
_int = {"type": "integer"}
_bool = {"type": "boolean"}
_str = {"type": "string"}
_nstr = {"type": ["string", "null"]}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


SCHEMA = _obj(
    {
        "seed": {"type": "integer", "minimum": 0},
        "ablation": {"enum": [None, *ABLATIONS]},
        "paths": _obj(
            {
                "data_dir": _str,
                "atlas": _nstr,
                "roi_table": _nstr,
                "labels": _nstr,
                "output_dir": _str,
            },
            required=["data_dir", "output_dir"],
        ),
        "synth": _obj(
            {
                "n_per_class": {"type": "integer", "minimum": 1},
                "shape": {"type": "array", "items": _int, "minItems": 3, "maxItems": 3},
                "voxel_size": {"type": "number", "exclusiveMinimum": 0},
                "n_rois": {"type": "integer", "minimum": 2},
                "planted_rois": {"type": "array", "items": _int},
                "mean_shift": _num,
                "iqr_factor": {"type": "number", "exclusiveMinimum": 0},
                "roi_noise_sd": {"type": "number", "minimum": 0},
                "voxel_noise_sd": {"type": "number", "minimum": 0},
                "base_range": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
                "gain_sd": {"type": "number", "minimum": 0},
                "seed": {"type": "integer", "minimum": 0},
            }
        ),
        "normalization": _obj(
            {"clip_lo": _num, "clip_hi": _num, "mad_scale": {"type": "number", "exclusiveMinimum": 0}, "mask_threshold": _num}
        ),
        "model": _obj(
            {
                "n_rois": {"type": "integer", "minimum": 1},
                "n_aux": {"type": "integer", "minimum": 1},
                "conv_channels": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3},
                "kernel_size": {"type": "integer", "minimum": 1},
                "scn_fc": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "aux_fc": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "fusion_fc": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "n_classes": {"type": "integer", "minimum": 2},
                "dropout_scn": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "dropout_aux": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            }
        ),
        "train": _obj(
            {
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "max_epochs": {"type": "integer", "minimum": 1},
                "patience": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 2},
                "n_seeds": {"type": "integer", "minimum": 1},
                "n_folds": {"type": "integer", "minimum": 2},
                "val_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "alpha": {"type": "number", "minimum": 0, "maximum": 1},
                "correlation": {"enum": ["pearson", "spearman"]},
                "class_weighting": _bool,
                "standardize_aux": _bool,
            }
        ),
        "interpret": _obj(
            {
                "percentile": {"type": "number", "minimum": 0, "maximum": 100},
                "population": {"enum": ["all_test", "correct_adhd"]},
                "stat_feature": {"enum": ["roi_means", "roi_iqrs"]},
                "network_grouping": _nstr,
                "network_values": {"enum": ["abs_d", "importance"]},
            }
        ),
    },
    required=["paths"],
)

DEFAULTS = {
    "seed": 0,
    "ablation": None,
    "paths": {"data_dir": "data", "atlas": None, "roi_table": None, "labels": None, "output_dir": "out"},
    "synth": CohortSpec().to_dict(),
    "normalization": NormalizationParams().to_dict(),
    "model": ModelConfig().to_dict(),
    "train": {k: v for k, v in TrainConfig().to_dict().items() if k not in ("use_aux", "ensemble")},
    "interpret": {
        "percentile": 90.0,
        "population": "all_test",
        "stat_feature": "roi_means",
        "network_grouping": None,
        "network_values": "abs_d",
    },
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve(raw, base_dir=".", seed=None, ablation=None):
    """Validate ``raw`` against the schema, fill defaults and apply CLI overrides.

    Relative paths are taken relative to ``base_dir`` (the config file's
    directory); ``SCNFUSION_OUT`` replaces the output directory.
    """
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    cfg = _merge(DEFAULTS, raw)
    if seed is not None:
        cfg["seed"] = int(seed)
    if ablation is not None:
        cfg["ablation"] = ablation
    paths = cfg["paths"]
    base = Path(base_dir)
    for key in ("data_dir", "atlas", "roi_table", "labels", "output_dir"):
        if paths[key] is not None:
            paths[key] = str(base / paths[key]) if not os.path.isabs(paths[key]) else paths[key]
    if os.environ.get("SCNFUSION_OUT"):
        paths["output_dir"] = os.environ["SCNFUSION_OUT"]
    data = Path(paths["data_dir"])
    paths["atlas"] = paths["atlas"] or str(data / "atlas.nii.gz")
    paths["roi_table"] = paths["roi_table"] or str(data / "atlas_rois.tsv")
    paths["labels"] = paths["labels"] or str(data / "labels.csv")
    try:
        spec(cfg)
        normalization(cfg)
        model_config(cfg)
        train_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config invalid: {exc}") from None
    return cfg


def load_config(path=None, seed=None, ablation=None):
    if path is None:
        return resolve({"paths": {"data_dir": "data", "output_dir": "out"}}, ".", seed, ablation)
    p = Path(path)
    try:
        raw = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: not valid JSON ({exc})") from None
    return resolve(raw, p.parent, seed, ablation)


def spec(cfg):
    return CohortSpec.from_dict(cfg["synth"])


def normalization(cfg):
    return NormalizationParams(**cfg["normalization"])


def model_config(cfg):
    return ModelConfig.from_dict(cfg["model"])


def train_config(cfg):
    ab = cfg.get("ablation")
    return TrainConfig(**cfg["train"], use_aux=ab != "no_aux", ensemble=ab != "no_ensemble")


def canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def digest(obj):
    return hashlib.sha256(canonical(obj).encode()).hexdigest()[:16]


def stage_hashes(cfg):
    """Chained hashes for extract -> train -> explain.

    Paths and worker counts do not enter any hash: moving a run directory or
    changing ``--jobs`` leaves artifacts valid.
    """
    extract = digest({"normalization": cfg["normalization"]})
    train = digest({"up": extract, "model": cfg["model"], "train": cfg["train"], "ablation": cfg["ablation"], "seed": cfg["seed"]})
    explain = digest({"up": train, "interpret": cfg["interpret"]})
    return {"extract": extract, "train": train, "explain": explain}


def provenance(cfg):
    """Config echo embedded in outputs (paths excluded so outputs are relocatable)."""
    return {k: v for k, v in cfg.items() if k != "paths"}
