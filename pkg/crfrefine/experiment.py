"""Evaluation protocol: case-level folds, HU windowing, synthetic slices and parameter sweeps."""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from crfrefine.config import CrfParams, FixtureSettings, HuWindow, SweepGrid
from crfrefine.crf import DEFAULT_FLOOR, FilterMode, refine_segmentation
from crfrefine.errors import InvalidInputError, InvalidParameterError
from crfrefine.metrics import CaseScore, case_dice
from crfrefine.rng import SplitMix64, XorShift64Star, derive_seed
from crfrefine.tensors import LabelMask, ProbabilityMap, SliceImage, argmax_labels
from crfrefine.utils import parallel_map

MIN_FIXTURE_SIZE = 16


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    mapping: Dict[str, int]

    def __post_init__(self):
        if self.k < 2:
            raise InvalidParameterError(f"fold count must be >= 2, got {self.k}")
        bad = [c for c, f in self.mapping.items() if not 0 <= f < self.k]
        if bad:
            raise InvalidInputError(f"fold index out of range for cases: {', '.join(sorted(bad))}")

    def cases_in(self, fold: int) -> List[str]:
        return sorted(c for c, f in self.mapping.items() if f == fold)

    def folds(self) -> List[List[str]]:
        return [self.cases_in(fold) for fold in range(self.k)]


def assign_folds(case_ids: Sequence[str], k: int = 5, seed: int = 0) -> FoldAssignment:
    """Seeded Fisher-Yates shuffle of the sorted ids, then round-robin over k folds."""
    if k < 2:
        raise InvalidParameterError(f"fold count must be >= 2, got {k}")
    if len(set(case_ids)) != len(case_ids):
        seen, dupes = set(), set()
        for case_id in case_ids:
            (dupes if case_id in seen else seen).add(case_id)
        raise InvalidInputError(f"duplicate case ids: {', '.join(sorted(dupes))}")
    if len(case_ids) < k:
        raise InvalidInputError(f"need at least {k} cases for {k} folds, got {len(case_ids)}")

    shuffled = XorShift64Star(seed).shuffle(sorted(case_ids))
    return FoldAssignment(k=k, mapping={case_id: i % k for i, case_id in enumerate(shuffled)})


def hu_window(raw: np.ndarray, center: float = -500.0, width: float = 1500.0) -> SliceImage:
    """Clamp HU to [center - width/2, center + width/2] and map affinely onto [0, 255]."""
    if width <= 0:
        raise InvalidParameterError(f"window width must be positive, got {width}")
    raw = np.asarray(raw, dtype=np.float64)
    low = center - width / 2.0
    clipped = np.clip(raw, low, center + width / 2.0)
    return SliceImage(((clipped - low) / width * 255.0).astype(np.float32))


def apply_window(raw: np.ndarray, window: HuWindow) -> SliceImage:
    return hu_window(raw, window.center, window.width)


@dataclass(frozen=True, eq=False)
class Fixture:
    image: SliceImage
    prob: ProbabilityMap
    truth: LabelMask
    case_id: str
    slice_index: int

    def __post_init__(self):
        if not self.image.shape == self.prob.shape == self.truth.shape:
            raise InvalidInputError(
                f"fixture shapes disagree: {self.image.shape}, {self.prob.shape}, {self.truth.shape}"
            )
        if self.truth.n_labels != self.prob.labels:
            raise InvalidInputError("truth and probabilities use different label counts")


def _ellipses(stream: SplitMix64, height: int, width: int) -> np.ndarray:
    n_blobs = 1 + int(stream.uniform(1)[0] < 0.5)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    short_side = min(height, width)
    truth = np.zeros((height, width), dtype=bool)
    for cy, cx, ry, rx, angle in stream.uniform(5 * n_blobs).reshape(n_blobs, 5):
        cy = (0.3 + 0.4 * cy) * height
        cx = (0.25 + 0.5 * cx) * width
        ry = (0.12 + 0.16 * ry) * short_side
        rx = (0.12 + 0.16 * rx) * short_side
        angle *= np.pi
        dy, dx = ys - cy, xs - cx
        along = dx * np.cos(angle) + dy * np.sin(angle)
        across = -dx * np.sin(angle) + dy * np.cos(angle)
        truth |= (along / rx) ** 2 + (across / ry) ** 2 <= 1.0
    return truth


def synth_fixture(seed: int, index: int, height: int, width: int, noise_level: float,
                  settings: FixtureSettings = FixtureSettings(),
                  slices_per_case: int = 1) -> Fixture:
    """Fixture `index` of the seeded corpus; independent of every other index."""
    stream = SplitMix64(derive_seed(seed, index))
    truth = _ellipses(stream, height, width)

    smooth = ndimage.gaussian_filter(truth.astype(np.float64), settings.prob_smoothing, mode="nearest")
    # argmax of the clean map is exactly the truth: lung > 0.5 inside, < 0.5 outside
    lung = np.where(truth, 0.55 + 0.4 * smooth, 0.05 + 0.4 * smooth)
    flips = stream.uniform(height * width).reshape(height, width) < noise_level
    lung = np.where(flips, 1.0 - lung, lung)
    prob = ProbabilityMap.load(np.stack([1.0 - lung, lung], axis=2).astype(np.float32))

    means = np.where(truth, settings.lung_mean, settings.body_mean)
    noise = settings.noise_sigma * stream.normal(height * width).reshape(height, width)
    image = SliceImage(np.clip(means + noise, 0.0, 255.0).astype(np.float32))

    return Fixture(
        image=image,
        prob=prob,
        truth=LabelMask(truth.astype(np.uint8)),
        case_id=f"case{index // slices_per_case:04d}",
        slice_index=index % slices_per_case,
    )


def synth_fixtures(seed: int, count: int, height: int, width: int, noise_level: float,
                   settings: FixtureSettings = FixtureSettings(),
                   slices_per_case: int = 1) -> List[Fixture]:
    if count < 1:
        raise InvalidParameterError(f"fixture count must be >= 1, got {count}")
    if min(height, width) < MIN_FIXTURE_SIZE:
        raise InvalidParameterError(f"fixture size must be at least {MIN_FIXTURE_SIZE}x{MIN_FIXTURE_SIZE}")
    if not 0.0 <= noise_level <= 1.0:
        raise InvalidParameterError(f"noise level must be in [0, 1], got {noise_level}")
    if slices_per_case < 1:
        raise InvalidParameterError(f"slices per case must be >= 1, got {slices_per_case}")
    return [
        synth_fixture(seed, index, height, width, noise_level, settings, slices_per_case)
        for index in range(count)
    ]


def score_cases(items: Iterable[Tuple[str, LabelMask, LabelMask]],
                positive_label: int = 1) -> List[CaseScore]:
    """Group (case_id, pred, truth) slices by case and score each case volumetrically."""
    grouped: Dict[str, List[Tuple[LabelMask, LabelMask]]] = {}
    for case_id, pred, truth in items:
        grouped.setdefault(case_id, []).append((pred, truth))
    return [
        case_dice(grouped[case_id], positive_label, case_id=case_id)
        for case_id in sorted(grouped)
    ]


def baseline_scores(fixtures: Sequence[Fixture], positive_label: int = 1) -> List[CaseScore]:
    """Scores of the raw argmax prediction (no CRF)."""
    return score_cases(
        ((f.case_id, argmax_labels(f.prob), f.truth) for f in fixtures), positive_label
    )


@dataclass(frozen=True)
class SweepResult:
    params: CrfParams
    mean_dsc: float
    scores: List[CaseScore] = field(default_factory=list)


def sweep(grid: SweepGrid, fixtures: Sequence[Fixture], positive_label: int = 1,
          floor: float = DEFAULT_FLOOR, filter_mode: FilterMode = "lattice",
          threads: int = 1) -> List[SweepResult]:
    """Rank every grid point by mean case DSC over the corpus, best first."""
    if not fixtures:
        raise InvalidInputError("sweep needs at least one fixture")
    points = list(grid.points())
    jobs = [(params, fixture) for params in points for fixture in fixtures]
    logging.info("Sweeping %d grid points over %d fixtures", len(points), len(fixtures))

    def run(job):
        params, fixture = job
        return refine_segmentation(fixture.prob, fixture.image, params, floor, filter_mode)

    masks = parallel_map(run, jobs, threads)

    results = []
    for p, params in enumerate(points):
        chunk = masks[p * len(fixtures):(p + 1) * len(fixtures)]
        scores = score_cases(
            ((f.case_id, mask, f.truth) for f, mask in zip(fixtures, chunk)), positive_label
        )
        mean = float(np.mean([s.dsc for s in scores]))
        logging.debug("Grid point %s: mean DSC %.5f", params, mean)
        results.append(SweepResult(params=params, mean_dsc=mean, scores=scores))
    # stable sort keeps grid order among ties
    return sorted(results, key=lambda r: -r.mean_dsc)


def select_params_for_fold(fixtures: Sequence[Fixture], assignment: FoldAssignment, fold: int,
                           grid: SweepGrid, inner_k: Optional[int] = 10, seed: int = 0,
                           positive_label: int = 1, floor: float = DEFAULT_FLOOR,
                           filter_mode: FilterMode = "lattice",
                           threads: int = 1) -> List[Tuple[CrfParams, float]]:
    """
    Tune on the training subset of `fold` (every case outside it).

    With `inner_k`, the training cases are split again into inner folds and a
    grid point is ranked by the mean of its per-inner-fold mean DSC; without it
    the training subset is swept as one corpus.
    """
    held_out = set(assignment.cases_in(fold))
    training = [f for f in fixtures if f.case_id not in held_out]
    if not training:
        raise InvalidInputError(f"fold {fold} leaves no training cases")

    training_cases = sorted({f.case_id for f in training})
    if not inner_k or len(training_cases) < 2:
        return [(r.params, r.mean_dsc) for r in sweep(
            grid, training, positive_label, floor, filter_mode, threads)]

    inner = assign_folds(training_cases, min(inner_k, len(training_cases)), seed)
    totals: Dict[CrfParams, List[float]] = {params: [] for params in grid.points()}
    for inner_fold in range(inner.k):
        members = set(inner.cases_in(inner_fold))
        subset = [f for f in training if f.case_id in members]
        for result in sweep(grid, subset, positive_label, floor, filter_mode, threads):
            totals[result.params].append(result.mean_dsc)

    ranked = [(params, float(np.mean(values))) for params, values in totals.items()]
    return sorted(ranked, key=lambda item: -item[1])
