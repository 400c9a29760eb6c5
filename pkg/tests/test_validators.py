# pylint: disable=redefined-outer-name
import numpy as np
import pytest

from crfrefine.errors import InvalidInputError
from crfrefine.validators import (
    ensure_dir_path, expand_vars_and_user, non_empty, require_finite, require_same_shape
)
from tests.utils.mocks import mock_env_vars


@pytest.fixture
def run_paths():
    return {
        "out_dir": "$DATA_ROOT/runs",
        "seed": 42,
        "missing": "~/runs/$UNSET_ROOT",
        "manifests": ["~/m.json", "$DATA_ROOT/$DATA_ROOT.json", None],
        "grid": (0.5, "$DATA_ROOT"),
        "nested": {"pred": "~/pred", "cost": "$5 per slice"},
    }


@mock_env_vars(HOME="/home/tester", DATA_ROOT="/data/ct", __exclude__=["UNSET_ROOT"])
def test_expand_vars_and_user(run_paths):
    result = expand_vars_and_user(run_paths)

    assert result is not run_paths
    assert result == {
        "out_dir": "/data/ct/runs",
        "seed": 42,
        "missing": "/home/tester/runs/$UNSET_ROOT",
        "manifests": ["/home/tester/m.json", "/data/ct//data/ct.json", None],
        "grid": (0.5, "/data/ct"),
        "nested": {"pred": "/home/tester/pred", "cost": "$5 per slice"},
    }
    assert expand_vars_and_user(None) is None


@mock_env_vars(__exclude__=["UNSET_ROOT"])
def test_expand_vars_and_user_warning(caplog):
    with caplog.at_level("WARNING"):
        assert expand_vars_and_user("$UNSET_ROOT/masks") == "$UNSET_ROOT/masks"

    assert caplog.records
    assert caplog.records[-1].message == (
        'Path still contains a `$` after env vars expansion: "$UNSET_ROOT/masks"'
    )


def test_ensure_dir_path(tmp_path):
    assert ensure_dir_path(None) is None
    created = ensure_dir_path(str(tmp_path / "a" / "b"))
    assert (tmp_path / "a" / "b").is_dir()
    assert created == str((tmp_path / "a" / "b").resolve())
    assert ensure_dir_path(created) == created


def test_ensure_dir_path_is_not_dir(tmp_path):
    (tmp_path / "report.json").write_text("{}")
    with pytest.raises(InvalidInputError, match="not a directory"):
        ensure_dir_path(str(tmp_path / "report.json"))


def test_non_empty():
    assert non_empty([1]) == [1]
    with pytest.raises(ValueError, match="at least one"):
        non_empty([])


def test_require_helpers():
    assert require_same_shape("pair", (2, 3), (2, 3)) == (2, 3)
    with pytest.raises(InvalidInputError, match="pair: shape mismatch"):
        require_same_shape("pair", (2, 3), (3, 2))
    with pytest.raises(InvalidInputError, match="scores must be finite"):
        require_finite(np.array([0.0, np.nan]), "scores")
