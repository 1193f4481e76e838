import os

import pytest

from convprompt.config import ExperimentConfig

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def small_raw(**extra):
    """A deliberately tiny experiment that still exercises every code path."""
    raw = {
        "backbone": {"image_size": 16, "patch_size": 8, "channels": 3, "d": 8,
                     "heads": 2, "layers": 2, "ffn_hidden": 16, "seed": 5},
        "prompt": {"l_p": 2, "k": 2, "prompted_layers": [0], "j_max": 2,
                   "seed": 6},
        "train": {"epochs": 1, "batch_size": 8, "lr": 1e-2, "seed": 7},
        "stream": {"num_tasks": 2, "classes_per_task": 2,
                   "samples_per_class": 6, "image_size": 16, "channels": 3,
                   "seed": 8},
    }
    for section, values in extra.items():
        raw.setdefault(section, {}).update(values)
    return raw


@pytest.fixture
def small_cfg():
    return ExperimentConfig(small_raw())


@pytest.fixture
def fixtures_dir():
    return FIXTURES
