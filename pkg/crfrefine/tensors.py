"""Dense grids shared by every other module.

Arrays are stored as numpy arrays flagged read-only, so the value objects can
be passed between worker threads without copies.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from crfrefine.errors import InvalidInputError
from crfrefine.validators import require_finite

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.uint8), np.dtype(np.uint16))

# ingest tolerance on per-pixel probability sums
PROB_SUM_TOL = 1e-5

BACKGROUND = 0
LUNG = 1


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class DenseTensor:
    dims: Tuple[int, ...]
    data: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if not dims or any(d < 1 for d in dims):
            raise InvalidInputError(f"dims must be non-empty with every extent >= 1, got {dims}")
        data = np.asarray(self.data)
        if data.dtype not in SUPPORTED_DTYPES:
            raise InvalidInputError(f"unsupported element type {data.dtype}")
        data = data.reshape(-1)
        if data.size != int(np.prod(dims, dtype=np.int64)):
            raise InvalidInputError(
                f"data length {data.size} does not match dims {dims}"
            )
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", _frozen(data))

    @classmethod
    def from_array(cls, array: np.ndarray) -> "DenseTensor":
        array = np.asarray(array)
        return cls(dims=array.shape, data=array.reshape(-1))

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def to_array(self) -> np.ndarray:
        return self.data.reshape(self.dims)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DenseTensor):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.dtype == other.dtype
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SliceImage:
    """Windowed CT intensities, float32, expected on the 0-255 scale."""
    intensity: np.ndarray

    def __post_init__(self):
        intensity = np.asarray(self.intensity, dtype=np.float32)
        if intensity.ndim != 2:
            raise InvalidInputError(f"image must be 2D, got shape {intensity.shape}")
        require_finite(intensity, "image intensities")
        object.__setattr__(self, "intensity", _frozen(intensity))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.intensity.shape

    @property
    def height(self) -> int:
        return self.intensity.shape[0]

    @property
    def width(self) -> int:
        return self.intensity.shape[1]


@dataclass(frozen=True, eq=False)
class ProbabilityMap:
    """Per-pixel label distribution, float32 H x W x L with L innermost."""
    prob: np.ndarray

    def __post_init__(self):
        prob = np.asarray(self.prob, dtype=np.float32)
        if prob.ndim != 3 or prob.shape[2] < 2:
            raise InvalidInputError(f"probabilities must be H x W x L with L >= 2, got {prob.shape}")
        require_finite(prob, "probabilities")
        if prob.min() < 0.0 or prob.max() > 1.0:
            raise InvalidInputError("probabilities must lie in [0, 1]")
        sums = prob.sum(axis=2, dtype=np.float64)
        worst = float(np.abs(sums - 1.0).max())
        if worst > PROB_SUM_TOL:
            raise InvalidInputError(f"per-pixel probabilities sum off by {worst:.3g}")
        object.__setattr__(self, "prob", _frozen(prob))

    @classmethod
    def load(cls, array: np.ndarray) -> "ProbabilityMap":
        """Accept upstream float32 output and renormalize it per pixel."""
        raw = cls(array)
        prob = raw.prob.astype(np.float64)
        prob /= prob.sum(axis=2, keepdims=True)
        return cls(np.clip(prob, 0.0, 1.0).astype(np.float32))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.prob.shape[:2]

    @property
    def labels(self) -> int:
        return self.prob.shape[2]


@dataclass(frozen=True, eq=False)
class LabelMask:
    label: np.ndarray
    n_labels: int = 2

    def __post_init__(self):
        label = np.asarray(self.label)
        if label.ndim != 2:
            raise InvalidInputError(f"mask must be 2D, got shape {label.shape}")
        if self.n_labels < 2 or self.n_labels > 256:
            raise InvalidInputError(f"label count must be in [2, 256], got {self.n_labels}")
        if label.size and (label.min() < 0 or label.max() >= self.n_labels):
            raise InvalidInputError(f"mask values must be < {self.n_labels}")
        object.__setattr__(self, "label", _frozen(label.astype(np.uint8)))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.label.shape

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelMask):
            return NotImplemented
        return self.n_labels == other.n_labels and np.array_equal(self.label, other.label)

    __hash__ = None


def softmax_normalize(scores: np.ndarray) -> ProbabilityMap:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 3 or scores.shape[2] < 2:
        raise InvalidInputError(f"scores must be H x W x L with L >= 2, got {scores.shape}")
    require_finite(scores, "scores")
    shifted = np.exp(scores - scores.max(axis=2, keepdims=True))
    return ProbabilityMap(shifted / shifted.sum(axis=2, keepdims=True))


def argmax_labels(prob: ProbabilityMap) -> LabelMask:
    # np.argmax returns the first maximum, i.e. the lowest label on ties
    return LabelMask(np.argmax(prob.prob, axis=2).astype(np.uint8), n_labels=prob.labels)


def rescale_to_byte_range(field: np.ndarray) -> np.ndarray:
    field = np.asarray(field, dtype=np.float64)
    require_finite(field, "field")
    lo, hi = (float(field.min()), float(field.max())) if field.size else (0.0, 0.0)
    if hi == lo:
        return np.zeros(field.shape, dtype=np.uint8)
    # halved so hi - lo cannot overflow to inf
    scaled = (field / 2.0 - lo / 2.0) / (hi / 2.0 - lo / 2.0) * 255.0
    return np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)
