from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from crfrefine.errors import InvalidInputError, UndefinedTestError
from crfrefine.tensors import LabelMask
from crfrefine.validators import require_same_shape

if TYPE_CHECKING:
    from crfrefine.experiment import FoldAssignment


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise InvalidInputError(f"confusion counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            tp=self.tp + other.tp, tn=self.tn + other.tn,
            fp=self.fp + other.fp, fn=self.fn + other.fn,
        )

    def swapped(self) -> "ConfusionCounts":
        """Counts with prediction and truth exchanged."""
        return ConfusionCounts(tp=self.tp, tn=self.tn, fp=self.fn, fn=self.fp)


@dataclass(frozen=True)
class CaseScore:
    case_id: str
    dsc: float
    counts: ConfusionCounts


def confusion(pred: LabelMask, truth: LabelMask, positive_label: int = 1) -> ConfusionCounts:
    require_same_shape("confusion", pred.shape, truth.shape)
    p = pred.label == positive_label
    t = truth.label == positive_label
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & t)),
        tn=int(np.count_nonzero(~p & ~t)),
        fp=int(np.count_nonzero(p & ~t)),
        fn=int(np.count_nonzero(~p & t)),
    )


def dice(counts: ConfusionCounts) -> float:
    denominator = 2 * counts.tp + counts.fp + counts.fn
    if denominator == 0:
        # both masks empty
        return 1.0
    return 2 * counts.tp / denominator


def iou(counts: ConfusionCounts) -> float:
    denominator = counts.tp + counts.fp + counts.fn
    if denominator == 0:
        return 1.0
    return counts.tp / denominator


def case_dice(slices: Sequence[Tuple[LabelMask, LabelMask]], positive_label: int = 1,
              case_id: str = "") -> CaseScore:
    """Volumetric score of one case: counts pooled over its slices, then Dice once."""
    if len(slices) == 0:
        raise InvalidInputError(f"case {case_id!r} has no slices")
    counts = ConfusionCounts()
    for pred, truth in slices:
        counts = counts + confusion(pred, truth, positive_label)
    return CaseScore(case_id=case_id, dsc=dice(counts), counts=counts)


def count_below(scores: Sequence[CaseScore], threshold: float) -> int:
    return sum(1 for score in scores if score.dsc < threshold)


@dataclass(frozen=True)
class SummaryStats:
    n: int
    mean: float
    std: float

    @classmethod
    def of(cls, values: Sequence[float]) -> "SummaryStats":
        values = np.asarray(values, dtype=np.float64)
        std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
        return cls(n=len(values), mean=float(values.mean()), std=std)


@dataclass(frozen=True)
class FoldReport:
    """Per-fold and overall Dice statistics; `folds` maps fold index to stats."""
    folds: Dict[int, SummaryStats]
    overall: SummaryStats
    cases: List[CaseScore] = field(default_factory=list)
    assignment: Dict[str, int] = field(default_factory=dict)


def fold_report(scores: Sequence[CaseScore], assignment: "FoldAssignment") -> FoldReport:
    ordered = sorted(scores, key=lambda s: s.case_id)
    if not ordered:
        raise InvalidInputError("no case scores to report")
    missing = [s.case_id for s in ordered if s.case_id not in assignment.mapping]
    if missing:
        raise InvalidInputError(f"cases without a fold: {', '.join(missing)}")

    by_fold: Dict[int, List[float]] = {}
    for score in ordered:
        by_fold.setdefault(assignment.mapping[score.case_id], []).append(score.dsc)

    return FoldReport(
        folds={fold: SummaryStats.of(by_fold[fold]) for fold in sorted(by_fold)},
        # over all cases, not the mean of fold means
        overall=SummaryStats.of([s.dsc for s in ordered]),
        cases=ordered,
        assignment={s.case_id: assignment.mapping[s.case_id] for s in ordered},
    )


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    n: int
    df: Optional[float] = None


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-tailed paired t-test on a - b with n - 1 degrees of freedom."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInputError("paired samples must be 1D and of equal length")
    n = len(a)
    if n < 2:
        raise UndefinedTestError(f"paired t-test needs at least 2 pairs, got {n}")
    diff = a - b
    mean = float(diff.mean())
    sd = float(diff.std(ddof=1))
    # float subtraction leaves ulp-level spread on constant differences
    if sd <= 1e-12 * max(1.0, abs(mean)):
        raise UndefinedTestError("differences have zero variance")
    t = mean / (sd / np.sqrt(n))
    p = float(2.0 * stats.t.sf(abs(t), df=n - 1))
    return TTestResult(t=float(t), p=min(p, 1.0), n=n, df=float(n - 1))


def summary_t_test(summary: SummaryStats, ref_mean: float, ref_std: float, ref_n: int) -> TTestResult:
    """Two-tailed Welch t-test of a summary against a published mean and sample std over `ref_n` cases."""
    if not np.all(np.isfinite([summary.mean, summary.std, ref_mean, ref_std])):
        raise InvalidInputError("summary statistics must be finite")
    if summary.std < 0 or ref_std < 0:
        raise InvalidInputError("standard deviations must be non-negative")
    if summary.n < 2 or ref_n < 2:
        raise UndefinedTestError(
            f"Welch t-test needs at least 2 cases per side, got {summary.n} and {ref_n}"
        )
    if summary.std == 0 and ref_std == 0:
        raise UndefinedTestError("both samples have zero variance")

    result = stats.ttest_ind_from_stats(
        summary.mean, summary.std, summary.n, ref_mean, ref_std, ref_n, equal_var=False
    )
    own, other = summary.std ** 2 / summary.n, ref_std ** 2 / ref_n
    df = (own + other) ** 2 / (own ** 2 / (summary.n - 1) + other ** 2 / (ref_n - 1))
    return TTestResult(t=float(result.statistic), p=float(result.pvalue), n=summary.n + ref_n, df=float(df))


@dataclass(frozen=True)
class Comparison:
    baseline: FoldReport
    refined: FoldReport
    test: Optional[TTestResult]
    test_error: Optional[str] = None


def compare_reports(baseline: Sequence[CaseScore], refined: Sequence[CaseScore],
                    assignment: "FoldAssignment") -> Comparison:
    """Side-by-side fold tables and a paired test over the per-case scores."""
    base = fold_report(baseline, assignment)
    ref = fold_report(refined, assignment)
    if [s.case_id for s in base.cases] != [s.case_id for s in ref.cases]:
        raise InvalidInputError("baseline and refined scores cover different cases")
    try:
        test = paired_t_test([s.dsc for s in ref.cases], [s.dsc for s in base.cases])
        return Comparison(baseline=base, refined=ref, test=test)
    except UndefinedTestError as e:
        return Comparison(baseline=base, refined=ref, test=None, test_error=str(e))


@dataclass(frozen=True)
class ReferenceComparison:
    reference: SummaryStats
    test: Optional[TTestResult]
    test_error: Optional[str] = None


def compare_to_reference(summary: SummaryStats, ref_mean: float, ref_std: float,
                         ref_n: int) -> ReferenceComparison:
    reference = SummaryStats(n=ref_n, mean=ref_mean, std=ref_std)
    try:
        return ReferenceComparison(reference, summary_t_test(summary, ref_mean, ref_std, ref_n))
    except UndefinedTestError as e:
        return ReferenceComparison(reference, test=None, test_error=str(e))
