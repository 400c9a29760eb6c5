import itertools
import os
from typing import Annotated, Iterator, List, Literal, Optional

import yaml
from pydantic import AfterValidator, BaseModel, ConfigDict, Field

from crfrefine.validators import expand_vars_and_user, non_empty

THREADS_ENV_VAR = "CRF_REFINE_THREADS"

FilterMode = Literal["lattice", "brute_force"]

PositiveFloat = Annotated[float, Field(gt=0)]
NonNegativeFloat = Annotated[float, Field(ge=0)]
NonNegativeInt = Annotated[int, Field(ge=0)]


class CrfParams(BaseModel):
    """Pairwise kernel weights and bandwidths; defaults are the tuned lung values."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    w1: NonNegativeFloat = 3.0
    w2: NonNegativeFloat = 0.0
    sigma_alpha: PositiveFloat = 5.0
    sigma_beta: PositiveFloat = 26.0
    # only used when w2 > 0
    sigma_gamma: PositiveFloat = 3.0
    iterations: NonNegativeInt = 10


class HuWindow(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    center: float = -500.0
    width: PositiveFloat = 1500.0


class SweepGrid(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    w1: Annotated[List[NonNegativeFloat], AfterValidator(non_empty)] = [3.0]
    w2: Annotated[List[NonNegativeFloat], AfterValidator(non_empty)] = [0.0]
    sigma_alpha: Annotated[List[PositiveFloat], AfterValidator(non_empty)] = [5.0]
    sigma_beta: Annotated[List[PositiveFloat], AfterValidator(non_empty)] = [26.0]
    sigma_gamma: Annotated[List[PositiveFloat], AfterValidator(non_empty)] = [3.0]
    iterations: Annotated[List[NonNegativeInt], AfterValidator(non_empty)] = [10]

    def points(self) -> Iterator[CrfParams]:
        """Grid points in lexicographic listing order (last field varies fastest)."""
        for w1, w2, sa, sb, sg, it in itertools.product(
                self.w1, self.w2, self.sigma_alpha, self.sigma_beta,
                self.sigma_gamma, self.iterations,
        ):
            yield CrfParams(
                w1=w1, w2=w2, sigma_alpha=sa, sigma_beta=sb,
                sigma_gamma=sg, iterations=it,
            )

    def __len__(self) -> int:
        return (len(self.w1) * len(self.w2) * len(self.sigma_alpha)
                * len(self.sigma_beta) * len(self.sigma_gamma) * len(self.iterations))


class FixtureSettings(BaseModel):
    """Region intensities of synthetic slices on the 0-255 scale."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    lung_mean: float = 30.0
    body_mean: float = 180.0
    noise_sigma: NonNegativeFloat = 10.0
    prob_smoothing: PositiveFloat = 1.0


def threads_from_env() -> Optional[int]:
    """Thread count from CRF_REFINE_THREADS, clamped to at least 1; None when unset."""
    value = os.environ.get(THREADS_ENV_VAR)
    if value is None:
        return None
    try:
        return max(1, int(value))
    except ValueError as e:
        raise ValueError(f"{THREADS_ENV_VAR} must be an integer, got {value!r}") from e


def _default_threads() -> int:
    threads = threads_from_env()
    return 1 if threads is None else threads


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    crf: CrfParams = CrfParams()
    floor: Annotated[float, Field(gt=0, lt=1)] = 1e-8
    early_stop_tol: Optional[PositiveFloat] = None
    window: HuWindow = HuWindow()
    sweep: SweepGrid = SweepGrid()
    fixtures: FixtureSettings = FixtureSettings()
    seed: Annotated[int, Field(ge=0, lt=2 ** 64)] = 0
    threads: Annotated[int, Field(ge=1)] = Field(default_factory=_default_threads)
    filter_mode: FilterMode = "lattice"
    positive_label: NonNegativeInt = 1
    out_dir: Annotated[str, AfterValidator(expand_vars_and_user)] = "crfrefine_out"


def load_config(path: Optional[str]) -> RunConfig:
    """Read a JSON or YAML config document; a missing path gives the defaults."""
    if path is None:
        return RunConfig()
    with open(path, "r", encoding="utf-8") as file:
        document = yaml.safe_load(file)
    return RunConfig(**(document or {}))
