"""Randomized data subsampling for the regularised ensemble flow.

The observation vector is split into subsets; at any instant the ensemble
is driven by one subset only, and the active subset switches at random
times drawn from a process whose rate ``a t + b`` grows linearly, so the
switching accelerates as the learning rate ``eta(t) = 1/(a t + b)`` decays.
Past a cutoff time the remaining switches are placed deterministically,
equally spaced up to the horizon.

The per-subset drift is scaled by the number of subsets and its regulariser
weight is scaled down by the same factor. With that convention the average
of the subset drifts over all subsets equals the full-data regularised
drift exactly, so the subsampled flow is an unbiased, time-rescaled
surrogate of the full flow with identical stationary points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from .ensemble import Ensemble, _as_particles
from .errors import ConfigurationError
from .flows import FlowConfig, Trajectory, _drift, _forward_all, _integrate_core
from .problem import InverseProblem, whiten

_PARTITION_MODES = ("contiguous_blocks", "horizontal_bands")


@dataclass(frozen=True)
class DataPartition:
    """A whitened inverse problem with its observations split into subsets.

    ``problem`` carries a prior whose regulariser covariance is already
    scaled for per-subset use (one factor of ``n_subsets`` stronger than
    the full-data regulariser). ``slices`` index contiguous ranges of the
    flattened observation vector.
    """

    problem: InverseProblem
    slices: tuple[slice, ...]

    @property
    def n_subsets(self) -> int:
        return len(self.slices)

    def data_block(self, index: int) -> npt.NDArray[np.double]:
        return self.problem.data[self.slices[index]]


def partition(
    problem: InverseProblem,
    n_subsets: int,
    mode: str = "contiguous_blocks",
    image_shape: tuple[int, int] | None = None,
) -> DataPartition:
    """Split a problem's observations into ``n_subsets`` contiguous subsets.

    ``contiguous_blocks`` cuts the flattened vector into nearly equal runs.
    ``horizontal_bands`` needs ``image_shape = (height, width)`` with
    ``height * width`` equal to the observation count; it groups whole
    image rows, which are contiguous runs of the row-major flattening.

    The problem is whitened and its prior rescaled for per-subset use.
    """
    if problem.prior is None:
        raise ConfigurationError("subsampling requires a problem with a prior")
    if n_subsets < 1:
        raise ConfigurationError(f"n_subsets must be >= 1, got {n_subsets}")
    k = problem.dim_output
    if mode == "contiguous_blocks":
        if n_subsets > k:
            raise ConfigurationError(
                f"cannot split {k} observations into {n_subsets} subsets"
            )
        bounds = np.linspace(0, k, n_subsets + 1).astype(int)
    elif mode == "horizontal_bands":
        if image_shape is None:
            raise ConfigurationError("horizontal_bands requires image_shape")
        height, width = image_shape
        if height * width != k:
            raise ConfigurationError(
                f"image_shape {image_shape} does not match "
                f"{k} observations"
            )
        if n_subsets > height:
            raise ConfigurationError(
                f"cannot split {height} rows into {n_subsets} bands"
            )
        bounds = np.linspace(0, height, n_subsets + 1).astype(int) * width
    else:
        raise ConfigurationError(
            f"mode must be one of {_PARTITION_MODES}, got {mode!r}"
        )
    slices = tuple(slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]))
    white = whiten(problem)
    scaled = InverseProblem(
        forward=white.forward,
        data=white.data,
        noise=white.noise,
        prior=white.prior.with_subsets(n_subsets),
        dim_input=white.dim_input,
        dim_output=white.dim_output,
    )
    return DataPartition(problem=scaled, slices=slices)


@dataclass(frozen=True)
class LearningRateSchedule:
    """Decaying learning rate ``eta(t) = 1/(slope * t + intercept)``.

    The reciprocal is the switching rate of the subset index process. After
    ``t_cutoff`` the process stops drawing random holding times and places
    ``n_post_switches`` deterministic switches equally spaced up to the
    horizon.
    """

    slope: float = 10.0
    intercept: float = 10.0
    t_cutoff: float = 10.0
    n_post_switches: int = 10

    def __post_init__(self) -> None:
        if self.slope < 0.0 or not np.isfinite(self.slope):
            raise ConfigurationError(f"slope must be >= 0, got {self.slope}")
        if self.intercept <= 0.0 or not np.isfinite(self.intercept):
            raise ConfigurationError(
                f"intercept must be positive, got {self.intercept}"
            )
        if self.t_cutoff <= 0.0:
            raise ConfigurationError(f"t_cutoff must be positive, got {self.t_cutoff}")
        if self.n_post_switches < 1:
            raise ConfigurationError("n_post_switches must be >= 1")

    def eta(self, t: float) -> float:
        return 1.0 / (self.slope * t + self.intercept)

    def holding_time(self, t_start: float, exp_draw: float) -> float:
        """Time until the next switch after ``t_start``.

        Solves the integrated-rate equation: the integral of the rate
        ``slope * s + intercept`` over the holding interval equals the unit
        exponential draw. Quadratic in the holding time, closed form.
        """
        if exp_draw < 0.0:
            raise ConfigurationError("exponential draw must be nonnegative")
        c = self.slope * t_start + self.intercept
        if self.slope == 0.0:
            return exp_draw / c
        # Rationalised quadratic root: the textbook (-c + sqrt(...)) / a form
        # cancels to zero once 2 a E drops below c^2 * eps, which would stall
        # the switching process for tiny slopes.
        root = math.sqrt(c * c + 2.0 * self.slope * exp_draw)
        return 2.0 * exp_draw / (c + root)


def transition_rate_matrix(n_subsets: int, eta: float) -> npt.NDArray[np.double]:
    """Generator of the uniform index process at learning rate ``eta``.

    Off-diagonal entries ``1 / ((n - 1) eta)``, diagonal ``-1 / eta``; rows
    sum to zero.
    """
    if n_subsets < 2:
        raise ConfigurationError("the index process needs at least two subsets")
    if eta <= 0.0:
        raise ConfigurationError(f"eta must be positive, got {eta}")
    n = n_subsets
    a = np.full((n, n), 1.0 / ((n - 1) * eta))
    np.fill_diagonal(a, 1.0 / ((n - 1) * eta) - n / ((n - 1) * eta))
    return a


class IndexProcess:
    """Materialized path of the switching subset index on ``[0, horizon]``.

    Built eagerly at construction so a run's switching pattern is fixed by
    the RNG state alone: random holding times up to the schedule cutoff,
    then deterministic equally spaced switches. At each switch the next
    index is uniform over the other subsets.
    """

    def __init__(
        self,
        schedule: LearningRateSchedule,
        n_subsets: int,
        horizon: float,
        rng: np.random.Generator,
    ):
        if n_subsets < 2:
            raise ConfigurationError("the index process needs at least two subsets")
        if horizon <= schedule.t_cutoff:
            raise ConfigurationError(
                f"horizon {horizon} must exceed the schedule cutoff "
                f"{schedule.t_cutoff}"
            )
        self.schedule = schedule
        self.n_subsets = n_subsets
        self.horizon = float(horizon)

        times = [0.0]
        indices = [int(rng.integers(n_subsets))]
        t = 0.0
        while True:
            t = t + schedule.holding_time(t, float(rng.standard_exponential()))
            if t >= schedule.t_cutoff:
                break
            times.append(t)
            indices.append(self._next_index(indices[-1], rng))
        remaining = self.horizon - schedule.t_cutoff
        for k in range(1, schedule.n_post_switches + 1):
            times.append(schedule.t_cutoff + k * remaining / schedule.n_post_switches)
            indices.append(self._next_index(indices[-1], rng))
        self.times = np.asarray(times)
        self.indices = np.asarray(indices, dtype=int)

    def _next_index(self, current: int, rng: np.random.Generator) -> int:
        # Uniform over the other subsets: shift a draw from the n-1
        # non-current labels past the current one.
        return int((current + 1 + rng.integers(self.n_subsets - 1)) % self.n_subsets)

    @property
    def n_switches(self) -> int:
        return self.times.size - 1

    def index_at(self, t: float) -> int:
        k = int(np.searchsorted(self.times, t, side="right") - 1)
        return int(self.indices[k])

    def intervals(self) -> list[tuple[float, float, int]]:
        """Constancy intervals as (start, end, index); zero-length tails
        from a switch placed exactly at the horizon are dropped."""
        out = []
        for k in range(self.times.size):
            start = float(self.times[k])
            end = self.horizon if k + 1 == self.times.size else float(self.times[k + 1])
            if end > start:
                out.append((start, end, int(self.indices[k])))
        return out

    def switch_events(self) -> list[tuple[float, int]]:
        """Switch times with the index active from each time on."""
        return [
            (float(t), int(i))
            for t, i in zip(self.times[1:], self.indices[1:])
        ]


def rhs_subsampled(
    ensemble: Ensemble | npt.NDArray[np.double],
    part: DataPartition,
    subset_index: int,
    rho_vi: float = 0.0,
    predictions: npt.NDArray[np.double] | None = None,
) -> npt.NDArray[np.double]:
    """Drift driven by one data subset, scaled by the subset count.

    ``predictions`` are full-output forward values; the subset restriction
    happens here. ``rho_vi`` applies the same mean-steering inflation as
    the full-data flow, on the subset's misfit. At ``rho_vi = 0``,
    averaging this drift over all subset indices reproduces the full-data
    regularised drift exactly.
    """
    u = _as_particles(ensemble)
    n_sub = part.n_subsets
    if not (0 <= subset_index < n_sub):
        raise ConfigurationError(
            f"subset_index {subset_index} out of range for {n_sub} subsets"
        )
    if not (0.0 <= rho_vi < 1.0):
        raise ConfigurationError(f"rho_vi must lie in [0, 1), got {rho_vi}")
    problem = part.problem
    if predictions is None:
        predictions, _ = _forward_all(problem, u, policy="raise")
    sl = part.slices[subset_index]
    return _drift(
        u,
        predictions[:, sl],
        problem.noise.block(sl),
        problem.data[sl],
        rho=rho_vi,
        c0_inverse=problem.prior.c0_inverse,
        scale=float(n_sub),
    )


def integrate_subsampled(
    ensemble: Ensemble | npt.NDArray[np.double],
    problem: InverseProblem,
    config: FlowConfig,
    schedule: LearningRateSchedule,
    n_subsets: int,
    rng: np.random.Generator,
    mode: str = "contiguous_blocks",
    image_shape: tuple[int, int] | None = None,
    workers: int = 1,
) -> Trajectory:
    """Integrate the subsampled flow to ``config.t_end``.

    Supports the regularised variant and its variance-inflated form (the
    config's ``rho`` steers toward the ensemble mean exactly as in the
    full-data flow). Switch times of the materialized index process are
    hard step boundaries. Diagnostics use the full data: the recorded
    residual is the full regularised potential, directly comparable with a
    full-data run. The trajectory's ``switches`` list holds (time, new
    subset index).
    """
    if config.variant not in ("regularised", "variance_inflated"):
        raise ConfigurationError(
            "subsampled integration requires the 'regularised' or "
            "'variance_inflated' variant"
        )
    rho_vi = config.rho if config.variant == "variance_inflated" else 0.0
    u0 = _as_particles(ensemble)
    part = partition(problem, n_subsets, mode=mode, image_shape=image_shape)
    white = part.problem
    if n_subsets == 1:
        # Degenerate case: one subset is the full data, nothing switches.
        process = None
        segments = [(0.0, config.t_end, 0)]
    else:
        process = IndexProcess(schedule, n_subsets, config.t_end, rng)
        segments = process.intervals()
    c0_inv = white.prior.c0_inverse
    n_sub = float(n_subsets)

    def drift_for_segment(subset_index: int):
        sl = part.slices[subset_index]
        noise_block = white.noise.block(sl)
        data_block = white.data[sl]

        def fn(u_stage, preds, failed):
            return _drift(
                u_stage, preds[:, sl], noise_block, data_block, rho=rho_vi,
                c0_inverse=c0_inv, failed=failed, scale=n_sub,
            )
        return fn

    traj = _integrate_core(
        u0, white, config, drift_for_segment,
        segments=segments, workers=workers,
    )
    traj.switches = [] if process is None else process.switch_events()
    return traj
