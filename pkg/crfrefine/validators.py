import logging
from os.path import expanduser, expandvars
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from crfrefine.errors import InvalidInputError


def expand_vars_and_user(
        s: Union[None, str, Tuple[Any], List[Any], Dict[Any, Any]]
) -> Union[None, str, Tuple[Any], List[Any], Dict[Any, Any]]:
    """
    Return a copy of the input with `~` and `$VAR` expanded in every string,
    recursing into tuples, lists and dicts. Non-string leaves are returned as-is.
    """
    if s is None:
        return None

    if isinstance(s, tuple):
        return tuple(expand_vars_and_user(x) for x in s)

    if isinstance(s, list):
        return [expand_vars_and_user(x) for x in s]

    if isinstance(s, dict):
        return {k: expand_vars_and_user(v) for k, v in s.items()}

    if not isinstance(s, str):
        return s

    # NB: vars first, a var may expand into a `~/...` path
    s = expanduser(expandvars(s))

    if "$" in s:
        logging.warning('Path still contains a `$` after env vars expansion: "%s"', s)

    return s


def ensure_dir_path(p: Optional[str]) -> Optional[str]:
    """Resolve an output directory and create it if needed."""
    if p is None:
        return None

    path = Path(p).resolve()
    if path.exists() and not path.is_dir():
        raise InvalidInputError(f'"{path}" exists and is not a directory')
    path.mkdir(parents=True, exist_ok=True)
    return str(path)


def non_empty(values: Sequence[Any]) -> Sequence[Any]:
    if len(values) == 0:
        raise ValueError("must contain at least one value")
    return values


def require_finite(array: np.ndarray, what: str) -> np.ndarray:
    array = np.asarray(array)
    if not np.all(np.isfinite(array)):
        raise InvalidInputError(f"{what} must be finite")
    return array


def require_same_shape(what: str, *shapes: Tuple[int, ...]) -> Tuple[int, ...]:
    first = tuple(shapes[0])
    for shape in shapes[1:]:
        if tuple(shape) != first:
            raise InvalidInputError(f"{what}: shape mismatch {first} vs {tuple(shape)}")
    return first
