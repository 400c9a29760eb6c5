"""High-dimensional Gaussian filtering over per-pixel feature vectors.

Both filters compute (approximately) the unnormalized kernel sum

    out_i = sum_j exp(-|f_i - f_j|^2 / 2) * v_j      (j = i included)

where the features f are already divided by the kernel bandwidths.
`brute_force_filter` is the exact O(N^2) oracle; `LatticeFilter` is the
permutohedral-lattice approximation (splat onto the lattice, blur along the
d + 1 lattice axes, slice back).

Features built from a pixel grid also carry the grid shape and the spatial
bandwidth. For those, exact sums are taken over a disc of radius
4 * sigma pixels around each point, which drops at most exp(-8) of the
spatial kernel mass.
"""
import logging
import math
from dataclasses import dataclass
from typing import Literal, Optional, Tuple

import numpy as np
from scipy import sparse

from crfrefine.config import CrfParams
from crfrefine.errors import InvalidInputError, InvalidParameterError
from crfrefine.tensors import SliceImage
from crfrefine.validators import require_finite

KernelKind = Literal["appearance", "smoothness"]
FilterBackend = Literal["lattice", "window", "dense"]

# rows per block in the exact oracle; bounds the (block, N) temporary
_BLOCK = 256
_BLOCK_ELEMENTS = 2 ** 21
# points used to calibrate the lattice scale and to measure its error
_CALIBRATION_POINTS = 64
_GRID_SAMPLE_POINTS = 1024
# relative L2 error above which the lattice is replaced by exact sums
_MAX_LATTICE_ERROR = 0.035
# point x neighbour pairs an exact fallback may cost per filter call
_EXACT_BUDGET = 2 ** 26
# window radius in spatial bandwidths, as scipy.ndimage's truncate
_TRUNCATE = 4.0


@dataclass(frozen=True, eq=False)
class FeatureField:
    feat: np.ndarray
    grid: Optional[Tuple[int, int]] = None
    spatial_sigma: Optional[float] = None

    def __post_init__(self):
        feat = np.asarray(self.feat, dtype=np.float32)
        if feat.ndim != 2 or feat.shape[0] < 1 or feat.shape[1] < 1:
            raise InvalidInputError(f"features must be N x d, got shape {feat.shape}")
        if feat.shape[1] > 5:
            raise InvalidInputError(f"feature dimension {feat.shape[1]} is not supported")
        require_finite(feat, "features")
        if (self.grid is None) != (self.spatial_sigma is None):
            raise InvalidInputError("grid and spatial_sigma go together")
        if self.grid is not None:
            height, width = self.grid
            if height * width != feat.shape[0]:
                raise InvalidInputError(f"grid {height}x{width} does not hold {feat.shape[0]} points")
            if not self.spatial_sigma > 0:
                raise InvalidInputError("spatial_sigma must be positive")
        feat = np.ascontiguousarray(feat)
        feat.setflags(write=False)
        object.__setattr__(self, "feat", feat)

    @property
    def n_points(self) -> int:
        return self.feat.shape[0]

    @property
    def dim(self) -> int:
        return self.feat.shape[1]

    @property
    def on_grid(self) -> bool:
        return self.grid is not None


def build_features(image: SliceImage, kind: KernelKind, params: CrfParams) -> FeatureField:
    """Pixel features in row-major order: (x, y[, I]) divided by the kernel bandwidths."""
    if kind == "appearance":
        spatial, chroma = params.sigma_alpha, params.sigma_beta
    elif kind == "smoothness":
        spatial, chroma = params.sigma_gamma, None
    else:
        raise InvalidParameterError(f"unknown kernel kind {kind!r}")
    if spatial <= 0 or (chroma is not None and chroma <= 0):
        raise InvalidParameterError("kernel bandwidths must be positive")

    height, width = image.shape
    ys, xs = np.mgrid[0:height, 0:width]
    columns = [xs.ravel() / spatial, ys.ravel() / spatial]
    if chroma is not None:
        columns.append(image.intensity.astype(np.float64).ravel() / chroma)
    return FeatureField(np.stack(columns, axis=1), grid=(height, width), spatial_sigma=float(spatial))


def _as_columns(values: np.ndarray, n_points: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim not in (1, 2) or values.shape[0] != n_points:
        raise InvalidInputError(
            f"values of shape {values.shape} do not match {n_points} feature points"
        )
    require_finite(values, "values")
    return values


def _exact_sums(feat: np.ndarray, rows: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Exact kernel sums for the points `rows` over every point."""
    out = np.empty((len(rows),) + values.shape[1:], dtype=np.float64)
    step = max(1, min(_BLOCK, _BLOCK_ELEMENTS // feat.shape[0]))
    for start in range(0, len(rows), step):
        block = feat[rows[start:start + step]]
        dist2 = np.zeros((len(block), feat.shape[0]), dtype=np.float64)
        for k in range(feat.shape[1]):
            dist2 += (block[:, k, None] - feat[None, :, k]) ** 2
        out[start:start + step] = np.exp(-0.5 * dist2) @ values
    return out


def window_offsets(features: FeatureField) -> np.ndarray:
    """(dy, dx) pixel offsets within 4 spatial bandwidths, clipped to the grid."""
    height, width = features.grid
    radius = _TRUNCATE * features.spatial_sigma
    reach_y = min(int(math.floor(radius)), height - 1)
    reach_x = min(int(math.floor(radius)), width - 1)
    dy, dx = np.mgrid[-reach_y:reach_y + 1, -reach_x:reach_x + 1]
    keep = dy ** 2 + dx ** 2 <= radius ** 2
    return np.stack([dy[keep], dx[keep]], axis=1)


def _window_sums(features: FeatureField, values: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Exact kernel sums of every grid point over its window, one shifted slab per offset."""
    height, width = features.grid
    feat = features.feat.astype(np.float64).reshape(height, width, -1)
    grid_values = values.reshape(height, width, -1)
    out = np.zeros_like(grid_values)
    for dy, dx in offsets:
        dst = (slice(max(0, -dy), min(height, height - dy)), slice(max(0, -dx), min(width, width - dx)))
        src = (slice(max(0, dy), min(height, height + dy)), slice(max(0, dx), min(width, width + dx)))
        diff = feat[dst] - feat[src]
        weight = np.exp(-0.5 * np.einsum("yxk,yxk->yx", diff, diff))
        out[dst] += weight[..., None] * grid_values[src]
    return out.reshape(values.shape)


def _window_rows(features: FeatureField, rows: np.ndarray, values: np.ndarray,
                 offsets: np.ndarray) -> np.ndarray:
    """Exact kernel sums for the points `rows` over their windows."""
    height, width = features.grid
    feat = features.feat.astype(np.float64).reshape(height, width, -1)
    grid_values = values.reshape(height, width, -1)
    out = np.empty((len(rows), grid_values.shape[2]), dtype=np.float64)
    step = max(1, _BLOCK_ELEMENTS // (len(offsets) * feat.shape[2]))
    for start in range(0, len(rows), step):
        ys, xs = np.divmod(rows[start:start + step], width)
        ny = ys[:, None] + offsets[None, :, 0]
        nx = xs[:, None] + offsets[None, :, 1]
        inside = (ny >= 0) & (ny < height) & (nx >= 0) & (nx < width)
        ny = np.clip(ny, 0, height - 1)
        nx = np.clip(nx, 0, width - 1)
        diff = feat[ny, nx] - feat[ys, xs][:, None, :]
        weight = np.exp(-0.5 * np.einsum("skd,skd->sk", diff, diff)) * inside
        out[start:start + step] = np.einsum("sk,skc->sc", weight, grid_values[ny, nx])
    return out


def brute_force_filter(features: FeatureField, values: np.ndarray) -> np.ndarray:
    values = _as_columns(values, features.n_points)
    feat = features.feat.astype(np.float64)
    return _exact_sums(feat, np.arange(features.n_points), values)


def _canonical_simplex(d: int) -> np.ndarray:
    canonical = np.empty((d + 1, d + 1), dtype=np.int64)
    for r in range(d + 1):
        canonical[r, :d + 1 - r] = r
        canonical[r, d + 1 - r:] = r - (d + 1)
    return canonical


class LatticeFilter:
    """Permutohedral lattice built once per feature field and reused for every filter call.

    The raw splat/blur/slice response is proportional to the Gaussian kernel sum;
    the constant is calibrated against exact sums on a fixed subset of points so
    that the output approximates the unnormalized oracle.

    The lattice resolution is fixed at one bandwidth. When the features are
    sparse at that resolution (bandwidths of a pixel or two, or intensity
    steps much larger than sigma_beta) the calibrated lattice can still miss
    the exact sums by several percent. The error is measured on the same
    sample points, and above `_MAX_LATTICE_ERROR` the filter switches to
    exact sums if they fit `_EXACT_BUDGET`.
    """

    def __init__(self, features: FeatureField):
        self.features = features
        self.n_points = features.n_points
        self.dim = features.dim
        self.backend: FilterBackend = "lattice"
        self._offsets = window_offsets(features) if features.on_grid else None
        self._build()
        self.scale, self.error = self._calibrate()
        if self.error > _MAX_LATTICE_ERROR:
            self._fall_back()
        logging.debug(
            "Lattice built: %d points, %d vertices, dim %d, scale %.5f, error %.4f, backend %s",
            self.n_points, self.n_vertices, self.dim, self.scale, self.error, self.backend,
        )

    def _build(self) -> None:
        d = self.dim
        n = self.n_points
        feat = self.features.feat.astype(np.float64)

        scale_factor = np.sqrt(2.0 / 3.0) * (d + 1) / np.sqrt(
            (np.arange(d) + 2.0) * (np.arange(d) + 1.0)
        )
        cf = feat * scale_factor

        # embed into the hyperplane x . 1 = 0 of R^(d+1)
        elevated = np.empty((n, d + 1), dtype=np.float64)
        running = np.zeros(n, dtype=np.float64)
        for j in range(d, 0, -1):
            elevated[:, j] = running - j * cf[:, j - 1]
            running += cf[:, j - 1]
        elevated[:, 0] = running

        # nearest remainder-0 lattice point
        scaled = elevated / (d + 1)
        up = np.ceil(scaled) * (d + 1)
        down = np.floor(scaled) * (d + 1)
        rem0 = np.where(up - elevated < elevated - down, up, down).astype(np.int64)
        total = rem0.sum(axis=1) // (d + 1)

        # rank of each coordinate of the residual, ties to the lower index
        residual = elevated - rem0
        rank = np.zeros((n, d + 1), dtype=np.int64)
        for i in range(d):
            for j in range(i + 1, d + 1):
                less = residual[:, i] < residual[:, j]
                rank[:, i] += less
                rank[:, j] += ~less

        rank += total[:, None]
        low = rank < 0
        high = rank > d
        rank[low] += d + 1
        rem0[low] += d + 1
        rank[high] -= d + 1
        rem0[high] -= d + 1

        residual = (elevated - rem0) / (d + 1)
        bary = np.zeros((n, d + 2), dtype=np.float64)
        rows = np.repeat(np.arange(n), d + 1)
        # rank is a permutation per point, so no column repeats within a row
        bary[rows, (d - rank).ravel()] += residual.ravel()
        bary[rows, (d + 1 - rank).ravel()] -= residual.ravel()
        bary[:, 0] += 1.0 + bary[:, d + 1]
        weights = bary[:, :d + 1]

        # only the first d coordinates of a lattice key are stored
        canonical = _canonical_simplex(d)
        keys = rem0[:, None, :d] + canonical[:, rank[:, :d]].transpose(1, 0, 2)

        flat = keys.reshape(-1, d)
        low_corner = flat.min(axis=0) - (d + 1)
        extent = flat.max(axis=0) - low_corner + (d + 2)
        if float(np.prod(extent.astype(np.float64))) >= 2.0 ** 62:
            raise InvalidInputError("feature range too large for the lattice key encoding")
        strides = np.ones(d, dtype=np.int64)
        for k in range(d - 2, -1, -1):
            strides[k] = strides[k + 1] * extent[k + 1]
        codes = (flat - low_corner) @ strides

        vertex_codes, vertex_index = np.unique(codes, return_inverse=True)
        self.n_vertices = len(vertex_codes)
        vertex_index = vertex_index.reshape(n, d + 1)

        self._splat = sparse.csr_matrix(
            (weights.ravel(), (vertex_index.ravel(), np.repeat(np.arange(n), d + 1))),
            shape=(self.n_vertices, n),
        )
        self._slice = self._splat.T.tocsr()

        # blur neighbours along each lattice axis; index n_vertices is the zero sentinel
        self._neighbours = []
        for j in range(d + 1):
            step = -np.ones(d, dtype=np.int64)
            if j < d:
                step[j] = d
            offset = int(step @ strides)
            pair = tuple(
                self._lookup(vertex_codes, vertex_codes + sign * offset) for sign in (1, -1)
            )
            self._neighbours.append(pair)

        self._alpha = 1.0 / (1.0 + 2.0 ** -d)

    @staticmethod
    def _lookup(sorted_codes: np.ndarray, wanted: np.ndarray) -> np.ndarray:
        pos = np.searchsorted(sorted_codes, wanted)
        pos_clipped = np.minimum(pos, len(sorted_codes) - 1)
        found = sorted_codes[pos_clipped] == wanted
        return np.where(found, pos_clipped, len(sorted_codes))

    def _raw(self, values: np.ndarray) -> np.ndarray:
        lattice = np.zeros((self.n_vertices + 1, values.shape[1]), dtype=np.float64)
        lattice[:-1] = self._splat @ values
        for n1, n2 in self._neighbours:
            blurred = lattice[:-1] + 0.5 * (lattice[n1] + lattice[n2])
            lattice[:-1] = blurred
        return self._alpha * (self._slice @ lattice[:-1])

    def _sample_rows(self) -> np.ndarray:
        n = self.n_points
        count = min(n, _GRID_SAMPLE_POINTS if self.features.on_grid else _CALIBRATION_POINTS)
        return np.unique(np.linspace(0, n - 1, count).round().astype(np.int64))

    def _exact_at(self, rows: np.ndarray, values: np.ndarray) -> np.ndarray:
        if self._offsets is not None:
            return _window_rows(self.features, rows, values, self._offsets)
        return _exact_sums(self.features.feat.astype(np.float64), rows, values)

    def _calibrate(self) -> Tuple[float, float]:
        """Scale fitted on a constant field, and the worst relative L2 error after scaling."""
        rows = self._sample_rows()
        columns = np.ones((self.n_points, 2), dtype=np.float64)
        columns[:, 1] = np.random.default_rng(0).uniform(size=self.n_points)
        exact = self._exact_at(rows, columns)
        approx = self._raw(columns)[rows]
        scale = float(exact[:, 0].sum() / approx[:, 0].sum())
        error = max(
            float(np.linalg.norm(scale * approx[:, c] - exact[:, c]) / np.linalg.norm(exact[:, c]))
            for c in range(columns.shape[1])
        )
        return scale, error

    def _fall_back(self) -> None:
        if self._offsets is not None and self.n_points * len(self._offsets) <= _EXACT_BUDGET:
            self.backend = "window"
        elif self.n_points ** 2 <= _EXACT_BUDGET:
            self.backend = "dense"
        else:
            logging.warning(
                "Lattice error %.3f is above %.3f but exact sums over %d points are too costly; "
                "keeping the lattice",
                self.error, _MAX_LATTICE_ERROR, self.n_points,
            )

    def apply(self, values: np.ndarray) -> np.ndarray:
        values = _as_columns(values, self.n_points)
        columns = values.reshape(self.n_points, -1)
        if self.backend == "window":
            out = _window_sums(self.features, columns, self._offsets)
        elif self.backend == "dense":
            out = _exact_sums(self.features.feat.astype(np.float64), np.arange(self.n_points), columns)
        else:
            out = self.scale * self._raw(columns)
        return out.reshape(values.shape)


def lattice_filter(filter: LatticeFilter, values: np.ndarray) -> np.ndarray:  # pylint: disable=redefined-builtin
    return filter.apply(values)
