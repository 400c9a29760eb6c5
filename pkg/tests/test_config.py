import pytest
from pydantic import ValidationError

from crfrefine.config import (
    THREADS_ENV_VAR, CrfParams, FixtureSettings, HuWindow, RunConfig, SweepGrid, load_config,
    threads_from_env
)
from tests.utils.mocks import mock_env_vars


def test_crf_params_defaults():
    params = CrfParams()
    assert (params.w1, params.w2, params.sigma_alpha, params.sigma_beta, params.iterations) == \
        (3.0, 0.0, 5.0, 26.0, 10)


@pytest.mark.parametrize("kwargs", [
    dict(sigma_alpha=0.0), dict(sigma_beta=-1.0), dict(w1=-0.5), dict(iterations=-1), dict(gamma=2.0),
])
def test_crf_params_validation(kwargs):
    with pytest.raises(ValidationError):
        CrfParams(**kwargs)


def test_crf_params_are_frozen_and_hashable():
    params = CrfParams()
    with pytest.raises(ValidationError):
        params.w1 = 1.0
    assert {params: 1}[CrfParams()] == 1


@mock_env_vars(__exclude__=[THREADS_ENV_VAR])
def test_run_config_defaults():
    config = RunConfig()
    assert config.crf == CrfParams()
    assert config.floor == 1e-8
    assert config.window == HuWindow(center=-500.0, width=1500.0)
    assert config.fixtures == FixtureSettings()
    assert config.threads == 1
    assert config.filter_mode == "lattice"
    assert config.positive_label == 1
    assert config.early_stop_tol is None


@mock_env_vars(**{THREADS_ENV_VAR: "6"})
def test_threads_from_environment():
    assert RunConfig().threads == 6
    assert RunConfig(threads=2).threads == 2


@mock_env_vars(**{THREADS_ENV_VAR: "0"})
def test_zero_threads_in_environment_clamps_to_one():
    assert threads_from_env() == 1
    assert RunConfig().threads == 1


@mock_env_vars(__exclude__=[THREADS_ENV_VAR])
def test_threads_from_env_unset():
    assert threads_from_env() is None


@mock_env_vars(**{THREADS_ENV_VAR: "many"})
def test_threads_from_env_rejects_non_integers():
    with pytest.raises(ValueError, match="CRF_REFINE_THREADS must be an integer"):
        threads_from_env()


@mock_env_vars(HOME="/home/tester")
def test_out_dir_expansion():
    assert RunConfig(out_dir="~/crf").out_dir == "/home/tester/crf"


@pytest.mark.parametrize("kwargs", [
    dict(floor=0.0), dict(floor=1.0), dict(threads=0), dict(filter_mode="fft"), dict(unknown=1),
])
def test_run_config_validation(kwargs):
    with pytest.raises(ValidationError):
        RunConfig(**kwargs)


def test_sweep_grid_points_order():
    grid = SweepGrid(w1=[0.0, 3.0], sigma_alpha=[3.0, 5.0])
    points = [(p.w1, p.sigma_alpha) for p in grid.points()]
    assert points == [(0.0, 3.0), (0.0, 5.0), (3.0, 3.0), (3.0, 5.0)]
    assert len(grid) == 4


def test_sweep_grid_rejects_empty_axis():
    with pytest.raises(ValidationError, match="at least one"):
        SweepGrid(w1=[])


@mock_env_vars(__exclude__=[THREADS_ENV_VAR])
def test_load_config_json(tmp_path):
    path = tmp_path / "run.json"
    path.write_text('{"crf": {"w1": 2.0, "iterations": 5}, "seed": 9, "sweep": {"w1": [0, 1]}}')
    config = load_config(str(path))
    assert config.crf == CrfParams(w1=2.0, iterations=5)
    assert config.seed == 9
    assert len(config.sweep) == 2


def test_load_config_yaml(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("crf:\n  sigma_beta: 13\nfilter_mode: brute_force\nthreads: 3\n")
    config = load_config(str(path))
    assert config.crf.sigma_beta == 13.0
    assert config.filter_mode == "brute_force"
    assert config.threads == 3


def test_load_config_empty_and_missing(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    assert load_config(str(path)).crf == CrfParams()
    assert load_config(None).crf == CrfParams()


def test_load_config_rejects_bad_values(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"crf": {"sigma_alpha": -5}}')
    with pytest.raises(ValidationError):
        load_config(str(path))


def test_shipped_sample_config():
    from importlib.resources import files  # pylint: disable=import-outside-toplevel
    config = load_config(str(files("crfrefine") / "run.yaml"))
    assert config.crf == CrfParams()
    assert len(config.sweep) > 1
