"""Convergence-rate estimation and cross-run comparison.

Residual decay along an ensemble flow is close to a power law over most of
the integration window; fitting the exponent on a log-log grid is how runs
with different subsampling schedules are compared. Comparison works on a
shared logarithmic time grid so that runs sampled at different times (the
subsampled flow breaks steps at switch times) line up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from .errors import ConfigurationError
from .flows import Trajectory
from .problem import InverseProblem, potential


@dataclass(frozen=True)
class RateFit:
    """Least-squares power law ``value ~ amplitude * t ** exponent``."""

    exponent: float
    amplitude: float
    n_points: int
    rms_log_residual: float

    def evaluate(self, t: npt.NDArray[np.double]) -> npt.NDArray[np.double]:
        return self.amplitude * np.asarray(t, dtype=float) ** self.exponent


@dataclass(frozen=True)
class ComparisonReport:
    """Two runs' residual histories compared on a common log-time grid."""

    terminal_ratio: float
    max_log10_gap: float
    rate_first: RateFit
    rate_second: RateFit
    window: tuple[float, float]


def mean_residual(
    trajectory: Trajectory, problem: InverseProblem
) -> npt.NDArray[np.double]:
    """Mean regularised potential across the ensemble at each sample.

    Recomputed from the stored states, so a trajectory produced by the
    subsampled flow can be scored against the full-data problem (or any
    other problem with matching input dimension).
    """
    out = np.empty(trajectory.times.size)
    for k in range(trajectory.times.size):
        state = trajectory.states[k]
        out[k] = float(
            np.mean([potential(problem, state[j]) for j in range(state.shape[0])])
        )
    return out


def fit_power_law(
    times: npt.NDArray[np.double],
    values: npt.NDArray[np.double],
    t_min: float = 0.0,
) -> RateFit:
    """Fit ``values ~ amplitude * times ** exponent`` by log-log least squares.

    Samples at nonpositive times, and nonpositive or non-finite values, are
    dropped; at least eight must survive.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.shape != v.shape:
        raise ConfigurationError("times and values must have matching shapes")
    keep = (t > max(t_min, 0.0)) & (v > 0.0) & np.isfinite(v)
    t, v = t[keep], v[keep]
    if t.size < 8:
        raise ConfigurationError(
            f"power-law fit needs at least 8 usable samples, got {t.size}"
        )
    lt, lv = np.log10(t), np.log10(v)
    slope, intercept = np.polyfit(lt, lv, deg=1)
    resid = lv - (slope * lt + intercept)
    return RateFit(
        exponent=float(slope),
        amplitude=float(10.0 ** intercept),
        n_points=int(t.size),
        rms_log_residual=float(np.sqrt(np.mean(resid**2))),
    )


def _interp_log(
    grid: npt.NDArray[np.double],
    times: npt.NDArray[np.double],
    values: npt.NDArray[np.double],
) -> npt.NDArray[np.double]:
    keep = (times > 0.0) & (values > 0.0) & np.isfinite(values)
    return np.interp(np.log10(grid), np.log10(times[keep]), np.log10(values[keep]))


def compare_runs(
    first: Trajectory,
    second: Trajectory,
    n_grid: int = 200,
    t_min: float | None = None,
) -> ComparisonReport:
    """Compare two residual histories on a shared logarithmic grid.

    The window is the overlap of the two runs' positive-time supports
    (optionally floored at ``t_min``). Reports the residual ratio at the
    window's end, the largest pointwise log10 gap, and a power-law fit for
    each run over the window.
    """
    lo = max(first.times[first.times > 0.0].min(),
             second.times[second.times > 0.0].min())
    if t_min is not None:
        lo = max(lo, t_min)
    hi = min(first.times.max(), second.times.max())
    if not hi > lo:
        raise ConfigurationError(
            f"runs do not overlap in time: window [{lo}, {hi}]"
        )
    grid = np.geomspace(lo, hi, n_grid)
    la = _interp_log(grid, first.times, first.mean_residuals)
    lb = _interp_log(grid, second.times, second.mean_residuals)
    return ComparisonReport(
        terminal_ratio=float(10.0 ** (la[-1] - lb[-1])),
        max_log10_gap=float(np.max(np.abs(la - lb))),
        rate_first=fit_power_law(first.times, first.mean_residuals, t_min=lo * 0.999),
        rate_second=fit_power_law(second.times, second.mean_residuals, t_min=lo * 0.999),
        window=(float(lo), float(hi)),
    )
