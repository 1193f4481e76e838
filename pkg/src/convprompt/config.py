"""Experiment configuration: JSON schema, defaults, and construction."""

from __future__ import annotations

import copy
import json

import jsonschema

from .backbone import BackboneConfig
from .data import StreamConfig
from .prompts import PromptConfig
from .similarity import SimilarityConfig
from .trainer import TrainConfig

DEFAULTS = {
    "backbone": {"image_size": 32, "patch_size": 8, "channels": 3, "d": 64,
                 "heads": 4, "layers": 4, "ffn_hidden": 128, "seed": 0,
                 "init_std": 0.2},
    "prompt": {"l_p": 4, "k": 3, "prompted_layers": [0, 1, 2], "j_max": 3,
               "seed": 1},
    "train": {"lam": 0.1, "epochs": 8, "batch_size": 16, "lr": 1e-2,
              "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "seed": 2,
              "baseline_mode": "convprompt"},
    "stream": {"num_tasks": 5, "classes_per_task": 4, "samples_per_class": 64,
               "image_size": 32, "channels": 3, "seed": 3, "noise_std": 0.03},
    "similarity": {"j_max": 3, "mode": "attribute", "embedder": "deterministic",
                   "d_e": 64},
    "output": "runs/latest",
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "backbone": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "image_size": {"type": "integer", "minimum": 1},
                "patch_size": {"type": "integer", "minimum": 1},
                "channels": {"type": "integer", "minimum": 1},
                "d": {"type": "integer", "minimum": 4},
                "heads": {"type": "integer", "minimum": 1},
                "layers": {"type": "integer", "minimum": 1},
                "ffn_hidden": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "init_std": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "prompt": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "l_p": {"type": "integer", "minimum": 1},
                "k": {"type": "integer", "minimum": 1},
                "prompted_layers": {"type": "array",
                                    "items": {"type": "integer", "minimum": 0}},
                "j_max": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lam": {"type": "number", "minimum": 0},
                "epochs": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "beta1": {"type": "number"},
                "beta2": {"type": "number"},
                "eps": {"type": "number"},
                "seed": {"type": "integer", "minimum": 0},
                "baseline_mode": {"enum": ["convprompt", "seq_ft", "se_only"]},
            },
        },
        "stream": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "num_tasks": {"type": "integer", "minimum": 1},
                "classes_per_task": {"type": "integer", "minimum": 1},
                "samples_per_class": {"type": "integer", "minimum": 2},
                "image_size": {"type": "integer", "minimum": 1},
                "channels": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "noise_std": {"type": "number", "minimum": 0},
            },
        },
        "similarity": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "j_max": {"type": "integer", "minimum": 1},
                "mode": {"enum": ["attribute", "class_label", "image"]},
                "embedder": {"enum": ["deterministic", "file"]},
                "d_e": {"type": "integer", "minimum": 1},
            },
        },
        "output": {"type": "string"},
    },
}


class ExperimentConfig:
    """Validated experiment configuration with defaults echoed explicitly."""

    def __init__(self, raw=None):
        raw = raw or {}
        jsonschema.validate(raw, SCHEMA)
        merged = copy.deepcopy(DEFAULTS)
        for section, values in raw.items():
            if isinstance(values, dict):
                merged[section].update(values)
            else:
                merged[section] = values
        # the prompt budget and the similarity budget are the same knob
        if "similarity" in raw and "j_max" in raw["similarity"]:
            merged["prompt"]["j_max"] = raw["similarity"]["j_max"]
        elif "prompt" in raw and "j_max" in raw["prompt"]:
            merged["similarity"]["j_max"] = raw["prompt"]["j_max"]
        self.raw = merged
        # construct eagerly so invalid combinations fail before any work
        self.backbone = BackboneConfig(**merged["backbone"])
        self.prompt = PromptConfig(
            l_p=merged["prompt"]["l_p"], k=merged["prompt"]["k"],
            prompted_layers=tuple(merged["prompt"]["prompted_layers"]),
            j_max=merged["prompt"]["j_max"], seed=merged["prompt"]["seed"])
        self.train = TrainConfig(**merged["train"])
        self.stream = StreamConfig(**merged["stream"])
        self.similarity = SimilarityConfig(**merged["similarity"])
        self.output = merged["output"]
        if merged["stream"]["image_size"] != merged["backbone"]["image_size"]:
            raise ValueError("stream and backbone image sizes differ")
        if merged["stream"]["channels"] != merged["backbone"]["channels"]:
            raise ValueError("stream and backbone channel counts differ")

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            return cls(json.load(fh))

    def with_overrides(self, **sections):
        """New config with per-section field overrides, e.g. train={'lam': 0}."""
        raw = copy.deepcopy(self.raw)
        for section, values in sections.items():
            if isinstance(values, dict):
                raw[section].update(values)
            else:
                raw[section] = values
        return ExperimentConfig(raw)

    def with_seed(self, seed):
        """Derive all sub-seeds from one master seed."""
        return self.with_overrides(
            backbone={"seed": seed}, prompt={"seed": seed + 1},
            train={"seed": seed + 2}, stream={"seed": seed + 3})

    def snapshot(self):
        return copy.deepcopy(self.raw)
