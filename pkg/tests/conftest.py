"""Shared builders: linear-Gaussian benchmark problems and kernel warmup."""

from dataclasses import dataclass

import numpy as np
import pytest

from ekirod.imaging import warmup_kernels as warmup_imaging
from ekirod.problem import (
    InverseProblem,
    NoiseModel,
    PriorModel,
    tikhonov_solution,
)
from ekirod.rod import warmup_kernels as warmup_rod


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    # JIT-compile the image and rod kernels once so per-test timing budgets
    # measure the algorithms, not the compiler.
    warmup_imaging()
    warmup_rod()


@dataclass(frozen=True)
class LinearCase:
    """A linear forward map with its closed-form regularised minimiser."""

    problem: InverseProblem
    operator: np.ndarray
    u_true: np.ndarray
    u_star: np.ndarray
    initial: np.ndarray


def make_linear_case(
    seed: int = 0,
    d: int = 2,
    n_obs: int = 10,
    n_ens: int = 3,
    alpha: float = 1.0,
    op_scale: float = 1.0,
    noise: NoiseModel | None = None,
    exact_data: bool = True,
) -> LinearCase:
    """Random linear problem ``y = A u`` with a Tikhonov prior.

    The operator and truth come from one RNG stream, the initial ensemble
    from another, so the same problem can carry different ensembles. With
    ``exact_data`` the data is attainable (no residual at the truth);
    otherwise a fixed perturbation is added.
    """
    rng_op = np.random.default_rng(np.random.Philox(key=[seed, 11]))
    rng_ens = np.random.default_rng(np.random.Philox(key=[seed, 13]))
    a = op_scale * rng_op.standard_normal((n_obs, d))
    u_true = rng_op.standard_normal(d)
    y = a @ u_true
    if not exact_data:
        y = y + 0.5 * rng_op.standard_normal(n_obs)
    if noise is None:
        noise = NoiseModel.identity(n_obs)
    problem = InverseProblem(
        forward=lambda u: a @ u,
        data=y,
        noise=noise,
        prior=PriorModel(np.eye(d), alpha=alpha),
        dim_input=d,
        dim_output=n_obs,
    )
    return LinearCase(
        problem=problem,
        operator=a,
        u_true=u_true,
        u_star=tikhonov_solution(problem, a),
        initial=rng_ens.standard_normal((n_ens, d)),
    )


def random_spd(rng: np.random.Generator, n: int, jitter: float = 0.5) -> np.ndarray:
    """Well-conditioned random SPD matrix for noise and prior weights."""
    m = rng.standard_normal((n, n))
    return m @ m.T / n + jitter * np.eye(n)
