"""Fully connected CRF over one 2D slice.

Energy: E(x) = sum_i u_i(x_i) + sum_{i<j, x_i != x_j} [w1 k_app(i, j) + w2 k_smooth(i, j)]
with Potts compatibility. Inference is parallel mean-field: every iteration
filters the current Q with each Gaussian kernel (message passing), applies
the Potts compatibility transform and renormalizes per pixel.
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from crfrefine.config import CrfParams, FilterMode
from crfrefine.errors import GridTooLargeError, InvalidInputError, InvalidParameterError
from crfrefine.filtering import (
    FeatureField, LatticeFilter, brute_force_filter, build_features, lattice_filter
)
from crfrefine.tensors import LabelMask, ProbabilityMap, SliceImage, argmax_labels
from crfrefine.validators import require_same_shape

Monitor = Callable[[int, np.ndarray], None]

DEFAULT_FLOOR = 1e-8
# exact energy is quadratic in the pixel count
DEFAULT_ENERGY_MAX_PIXELS = 64 * 64


@dataclass(frozen=True, eq=False)
class UnaryField:
    u: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float32)
        if u.ndim != 3 or u.shape[2] < 2:
            raise InvalidInputError(f"unaries must be H x W x L with L >= 2, got {u.shape}")
        if not np.all(np.isfinite(u)) or u.min() < 0:
            raise InvalidInputError("unaries must be finite and non-negative")
        u = np.ascontiguousarray(u)
        u.setflags(write=False)
        object.__setattr__(self, "u", u)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.u.shape[:2]

    @property
    def labels(self) -> int:
        return self.u.shape[2]


def unary_from_probabilities(prob: ProbabilityMap, floor: float = DEFAULT_FLOOR) -> UnaryField:
    if not 0.0 < floor < 1.0:
        raise InvalidParameterError(f"probability floor must be in (0, 1), got {floor}")
    u = -np.log(np.maximum(prob.prob.astype(np.float64), floor))
    # turns -0.0 at p = 1 into 0.0
    return UnaryField(u + 0.0)


def _kernel_features(image: SliceImage, params: CrfParams) -> List[Tuple[float, FeatureField]]:
    kernels = []
    if params.w1 > 0:
        kernels.append((params.w1, build_features(image, "appearance", params)))
    if params.w2 > 0:
        kernels.append((params.w2, build_features(image, "smoothness", params)))
    return kernels


def energy(labels: LabelMask, unary: UnaryField, image: SliceImage, params: CrfParams,
           max_pixels: int = DEFAULT_ENERGY_MAX_PIXELS) -> float:
    """Exact Gibbs energy of a labelling; pairwise terms counted once per unordered pair."""
    require_same_shape("energy", labels.shape, unary.shape, image.shape)
    n = labels.label.size
    if n > max_pixels:
        raise GridTooLargeError(
            f"exact energy on {n} pixels exceeds the cap of {max_pixels}"
        )
    x = labels.label.ravel().astype(np.int64)
    if x.max(initial=0) >= unary.labels:
        raise InvalidInputError("mask holds labels the unaries do not cover")

    u = unary.u.reshape(n, -1).astype(np.float64)
    total = float(u[np.arange(n), x].sum())

    for weight, features in _kernel_features(image, params):
        feat = features.feat.astype(np.float64)
        pairwise = 0.0
        for i in range(n - 1):
            dist2 = ((feat[i + 1:] - feat[i]) ** 2).sum(axis=1)
            differ = x[i + 1:] != x[i]
            pairwise += float(np.exp(-0.5 * dist2[differ]).sum())
        total += weight * pairwise
    return total


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row softmax computed in place; `logits` is overwritten and returned."""
    logits -= logits.max(axis=1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=1, keepdims=True)
    return logits


def _message_filters(image: SliceImage, params: CrfParams, filter_mode: FilterMode):
    filters = []
    for weight, features in _kernel_features(image, params):
        if filter_mode == "lattice":
            lattice = LatticeFilter(features)
            filters.append((weight, lambda q, f=lattice: lattice_filter(f, q)))
        elif filter_mode == "brute_force":
            filters.append((weight, lambda q, f=features: brute_force_filter(f, q)))
        else:
            raise InvalidParameterError(f"unknown filter mode {filter_mode!r}")
    return filters


def mean_field_infer(unary: UnaryField, image: SliceImage, params: CrfParams,
                     filter_mode: FilterMode = "lattice",
                     monitor: Optional[Monitor] = None,
                     early_stop_tol: Optional[float] = None) -> ProbabilityMap:
    """
    Parallel mean-field updates starting from Q = softmax(-u).

    `monitor(iteration, q)` is called with every iterate (iteration 0 is the
    initialization) as a read-only H x W x L float64 array.
    `early_stop_tol` stops once max |Q_new - Q_old| falls below it.
    """
    require_same_shape("mean field", unary.shape, image.shape)
    height, width, n_labels = unary.u.shape
    neg_u = -unary.u.reshape(-1, n_labels).astype(np.float64)

    q = _softmax_rows(neg_u.copy())
    _notify(monitor, 0, q, unary.u.shape)

    filters = _message_filters(image, params, filter_mode) if params.iterations else []
    for iteration in range(1, params.iterations + 1):
        messages = np.zeros_like(q)
        for weight, apply in filters:
            # the filters include the j = i term
            messages += weight * (apply(q) - q)
        # Potts: label l pays the messages of every other label
        pairwise = messages.sum(axis=1, keepdims=True) - messages
        updated = _softmax_rows(np.subtract(neg_u, pairwise, out=pairwise))

        change = float(np.abs(updated - q).max())
        q = updated
        logging.debug("Mean field iteration %d: max |dQ| = %.3g", iteration, change)
        _notify(monitor, iteration, q, unary.u.shape)
        if early_stop_tol is not None and change < early_stop_tol:
            logging.debug("Mean field converged after %d iterations", iteration)
            break

    return ProbabilityMap(q.reshape(height, width, n_labels).astype(np.float32))


def _notify(monitor: Optional[Monitor], iteration: int, q: np.ndarray, shape) -> None:
    if monitor is None:
        return
    view = q.reshape(shape).view()
    view.setflags(write=False)
    monitor(iteration, view)


def refine_segmentation(prob: ProbabilityMap, image: SliceImage, params: CrfParams,
                        floor: float = DEFAULT_FLOOR,
                        filter_mode: FilterMode = "lattice",
                        early_stop_tol: Optional[float] = None) -> LabelMask:
    require_same_shape("refine", prob.shape, image.shape)
    unary = unary_from_probabilities(prob, floor)
    q = mean_field_infer(unary, image, params, filter_mode, early_stop_tol=early_stop_tol)
    return argmax_labels(q)
