import os
from contextlib import contextmanager
from functools import wraps
from unittest.mock import patch

import numpy as np

from crfrefine.tensors import LabelMask, ProbabilityMap, SliceImage


@contextmanager
def patched_env(exclude=(), **env_vars):
    """Temporarily set `env_vars` and remove the `exclude` keys; everything is restored on exit."""
    # USERPROFILE is what expanduser reads on Windows
    if "HOME" in env_vars and "USERPROFILE" not in env_vars:
        env_vars["USERPROFILE"] = env_vars["HOME"]
    with patch.dict(os.environ, env_vars, clear=False):
        for key in exclude:
            os.environ.pop(key, None)
        yield


def mock_env_vars(__exclude__=None, **env_vars):
    """
    Decorator form of `patched_env`.
    Usage: @mock_env_vars(HOME="/fake/home", CRF_REFINE_THREADS="4", __exclude__=["UNSET_ME"])
    """
    def decorator(test_func):
        @wraps(test_func)
        def wrapper(*args, **kwargs):
            with patched_env(exclude=__exclude__ or (), **env_vars):
                return test_func(*args, **kwargs)
        return wrapper
    return decorator


def mask(rows, n_labels=2) -> LabelMask:
    return LabelMask(np.array(rows, dtype=np.uint8), n_labels=n_labels)


def two_label_prob(lung) -> ProbabilityMap:
    """Background/lung map from the lung probability of every pixel."""
    lung = np.asarray(lung, dtype=np.float64)
    return ProbabilityMap(np.stack([1.0 - lung, lung], axis=2))


def random_prob(rng: np.random.Generator, height: int, width: int, labels: int = 2) -> ProbabilityMap:
    raw = rng.uniform(0.05, 1.0, size=(height, width, labels))
    return ProbabilityMap.load((raw / raw.sum(axis=2, keepdims=True)).astype(np.float32))


def flat_image(height: int, width: int, value: float = 100.0) -> SliceImage:
    return SliceImage(np.full((height, width), value, dtype=np.float32))
