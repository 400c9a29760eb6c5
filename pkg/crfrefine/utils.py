import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, List, Sequence, Tuple, TypeVar

T = TypeVar("T")
R = TypeVar("R")

IMAGE_SUFFIX = ".dten"
MASK_SUFFIX = ".pgm"
LABELS_SUFFIX = ".dten"
PROB_SUFFIX = ".dten"
PREVIEW_SUFFIX = ".prob.pgm"


def parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> List[R]:
    """Map `fn` over `items` on a thread pool; results keep the input order."""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def try_each(fn: Callable[[T], R], items: Sequence[T], threads: int = 1,
             describe: Callable[[T], str] = str) -> Tuple[List[R], List[str]]:
    """Like `parallel_map` but keeps going past failures and returns them as messages."""
    def guarded(item):
        try:
            return True, fn(item)
        except Exception as e:  # pylint: disable=broad-except
            message = f"{describe(item)}: {e}"
            logging.error("Failed %s", message)
            return False, message

    results, failures = [], []
    for ok, value in parallel_map(guarded, items, threads):
        (results if ok else failures).append(value)
    return results, failures


def slice_stem(case_id: str, slice_index: int) -> str:
    return f"{case_id}/{slice_index:04d}"


def mask_output_path(root: str, case_id: str, slice_index: int, n_labels: int = 2) -> Path:
    """Two-label masks go to PGM; masks with more labels are stored as uint8 DTEN."""
    suffix = MASK_SUFFIX if n_labels == 2 else LABELS_SUFFIX
    return Path(root) / (slice_stem(case_id, slice_index) + suffix)


def prob_output_paths(root: str, case_id: str, slice_index: int) -> Tuple[Path, Path]:
    """Marginals dump and its 0-255 preview for one slice."""
    stem = Path(root) / slice_stem(case_id, slice_index)
    return stem.with_name(stem.name + PROB_SUFFIX), stem.with_name(stem.name + PREVIEW_SUFFIX)


def find_mask(root: str, case_id: str, slice_index: int) -> Path:
    stem = Path(root) / slice_stem(case_id, slice_index)
    for suffix in (MASK_SUFFIX, LABELS_SUFFIX):
        candidate = stem.with_name(stem.name + suffix)
        if candidate.is_file():
            return candidate
    raise FileNotFoundError(f"no prediction for {case_id} slice {slice_index} under {root}")
