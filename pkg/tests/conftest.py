import numpy as np
import pytest

from infsample.harness import config_from_dict
from infsample.model import Dataset
from infsample.oracles import tiny_model


@pytest.fixture(scope="session")
def tiny():
    """Trained (4, 6, 3) tanh net on three blobs."""
    return tiny_model(0)


@pytest.fixture(scope="session")
def separable():
    rng = np.random.default_rng(3)
    X = np.concatenate([rng.normal(-3, 0.5, size=(40, 2)), rng.normal(3, 0.5, size=(40, 2))])
    y = np.repeat([0, 1], 40)
    return Dataset(X, y)


@pytest.fixture
def small_config(tmp_path):
    """Scaled-down blob experiment that runs in about a second."""
    raw = {
        "dataset": {"format": "synthetic", "classes": 3, "per_class": 60, "dim": 4, "seed": 3},
        "model": {"hidden": [8]},
        "train": {"epochs": 100},
        "extrinsic": {"hidden": [6]},
        "removed_class": 2,
        "samplers": ["random", "logit", "int_topk", "ext_distance"],
        "sample_counts": [12, 24],
        "repetitions": 3,
        # the small net has more negative curvature than the default one
        "lissa": {"damping": 1.0},
        "output_dir": str(tmp_path / "out"),
    }
    return config_from_dict(raw, base_dir=tmp_path)

