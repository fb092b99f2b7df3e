"""Continuous-time ensemble Kalman flows and their adaptive integrator.

Drift variants
--------------
With empirical covariances from the current ensemble, data ``y``, whitened
noise, and regulariser covariance ``C0`` from the prior, the particle drifts
are

    plain          du_j = -Cug G^{-1}(G(u_j) - y)
    regularised    du_j = plain_j - Cu C0^{-1} u_j
    inflated       du_j = (1 - rho) [particle terms] + rho [mean terms],

where the inflated variant mixes each particle's misfit and regulariser
anchor with the ensemble-mean ones. The four-term expansion of the inflated
drift (particle terms plus rho-weighted recentering toward the mean) is
algebraically identical and kept in ``rhs_variance_inflated_expanded`` as a
cross-check; tests pin their agreement to 1e-12.

Integration uses an embedded Cash-Karp 4(5) pair. The tableau has six
stages and no reuse between attempts, so every attempted step costs exactly
``6 * n_ens`` forward evaluations; diagnostic residual evaluations are
accounted separately. Diagnostics are sampled on a logarithmic time grid
and sample times are hard step boundaries, never interpolated.

Forward failures (``EvaluationError`` or ``SolverError`` from one particle)
are recoverable by default: the failing particle keeps only the regulariser
part of its drift for that stage and the event is logged on the trajectory.
Set ``failure_policy="raise"`` to make failures fatal.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

from .ensemble import Ensemble, _as_particles, span_restricted_min_eigenvalue
from .errors import (
    ConfigurationError,
    EvaluationError,
    InputOutputError,
    ParseError,
    SolverError,
    StiffnessError,
)
from .problem import InverseProblem, potential, whiten

_VARIANTS = ("plain", "regularised", "variance_inflated")

# Failure events beyond this count are tallied but not itemized.
_FAILURE_LOG_CAP = 1000

# Cash-Karp embedded pair: six stages, fifth-order propagation, fourth-order
# error estimate, no first-same-as-last reuse.
_CK_C = np.array([0.0, 1 / 5, 3 / 10, 3 / 5, 1.0, 7 / 8])
_CK_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (3 / 10, -9 / 10, 6 / 5),
    (-11 / 54, 5 / 2, -70 / 27, 35 / 27),
    (1631 / 55296, 175 / 512, 575 / 13824, 44275 / 110592, 253 / 4096),
)
_CK_B5 = np.array([37 / 378, 0.0, 250 / 621, 125 / 594, 0.0, 512 / 1771])
_CK_B4 = np.array(
    [2825 / 27648, 0.0, 18575 / 48384, 13525 / 55296, 277 / 14336, 1 / 4]
)
N_STAGES = 6


@dataclass(frozen=True)
class FlowConfig:
    """Flow variant, horizon, tolerances, and diagnostic grid settings."""

    t_end: float
    variant: str = "regularised"
    rho: float = 0.0
    rel_tol: float = 1e-6
    abs_tol: float = 1e-9
    min_step: float = 1e-14
    max_step: float = math.inf
    initial_step: float | None = None
    samples_per_decade: int = 64
    first_sample: float = 1e-2
    failure_policy: str = "regulariser"

    def __post_init__(self) -> None:
        if not (np.isfinite(self.t_end) and self.t_end > 0.0):
            raise ConfigurationError(f"t_end must be positive, got {self.t_end}")
        if self.variant not in _VARIANTS:
            raise ConfigurationError(
                f"variant must be one of {_VARIANTS}, got {self.variant!r}"
            )
        if not (0.0 <= self.rho < 1.0):
            raise ConfigurationError(f"rho must lie in [0, 1), got {self.rho}")
        for name in ("rel_tol", "abs_tol", "min_step"):
            if getattr(self, name) <= 0.0:
                raise ConfigurationError(f"{name} must be positive")
        if self.max_step <= self.min_step:
            raise ConfigurationError("max_step must exceed min_step")
        if self.initial_step is not None and self.initial_step <= 0.0:
            raise ConfigurationError("initial_step must be positive")
        if self.samples_per_decade < 1:
            raise ConfigurationError("samples_per_decade must be >= 1")
        if not (0.0 < self.first_sample < self.t_end):
            raise ConfigurationError(
                f"first_sample must lie in (0, t_end), got {self.first_sample}"
            )
        if self.failure_policy not in ("regulariser", "raise"):
            raise ConfigurationError(
                f"failure_policy must be 'regulariser' or 'raise', "
                f"got {self.failure_policy!r}"
            )


@dataclass
class Trajectory:
    """Diagnostic record of one flow integration.

    ``states`` has shape ``(n_samples, n_ens, dim)``; the counters separate
    integrator stage evaluations (exactly ``6 * n_ens`` per attempted step)
    from the extra forward evaluations spent on residual diagnostics.
    """

    times: npt.NDArray[np.double]
    states: npt.NDArray[np.double]
    mean_residuals: npt.NDArray[np.double]
    spreads: npt.NDArray[np.double]
    min_eigenvalues: npt.NDArray[np.double]
    n_rhs_evals: int = 0
    n_diag_evals: int = 0
    n_steps_accepted: int = 0
    n_steps_attempted: int = 0
    n_forward_failures: int = 0
    failure_log: list[tuple[float, int]] = field(default_factory=list)
    switches: list[tuple[float, int]] | None = None

    @property
    def n_ens(self) -> int:
        return self.states.shape[1]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    def final_mean(self) -> npt.NDArray[np.double]:
        return self.states[-1].mean(axis=0)

    def final_ensemble(self) -> Ensemble:
        return Ensemble(self.states[-1], time=float(self.times[-1]))

    def to_csv(self, path) -> None:
        n, d = self.n_ens, self.dim
        header = ["t", "mean_residual", "spread", "lambda_min"]
        header += [f"u_mean_{c}" for c in range(d)]
        header += [f"p{j}_c{c}" for j in range(n) for c in range(d)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for k in range(self.times.size):
                mean = self.states[k].mean(axis=0)
                row = [self.times[k], self.mean_residuals[k], self.spreads[k],
                       self.min_eigenvalues[k]]
                row += list(mean) + list(self.states[k].ravel())
                writer.writerow([f"{x:.17g}" for x in row])

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        try:
            fh = open(path, newline="")
        except OSError as exc:
            raise InputOutputError(f"cannot read trajectory {path}: {exc}") from exc
        with fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ParseError(f"{path}: line 1: empty trajectory file") from None
            expected = ["t", "mean_residual", "spread", "lambda_min"]
            if header[:4] != expected:
                raise ParseError(
                    f"{path}: line 1: header must start with {expected}, "
                    f"got {header[:4]}"
                )
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise ParseError(
                        f"{path}: line {lineno}: expected {len(header)} fields, "
                        f"got {len(row)}"
                    )
                try:
                    rows.append([float(x) for x in row])
                except ValueError as exc:
                    raise ParseError(f"{path}: line {lineno}: {exc}") from None
        if not rows:
            raise ParseError(f"{path}: trajectory file has no samples")
        particle_cols = [name for name in header if name.startswith("p")]
        dims = {int(name.split("_c")[1]) for name in particle_cols}
        d = max(dims) + 1 if dims else 0
        n = len(particle_cols) // d if d else 0
        data = np.asarray(rows)
        base = 4 + d  # t, residual, spread, lambda_min, mean components
        return cls(
            times=data[:, 0],
            states=data[:, base : base + n * d].reshape(-1, n, d),
            mean_residuals=data[:, 1],
            spreads=data[:, 2],
            min_eigenvalues=data[:, 3],
        )


def _forward_all(
    problem: InverseProblem,
    particles: npt.NDArray[np.double],
    policy: str,
    workers: int = 1,
) -> tuple[npt.NDArray[np.double], npt.NDArray[np.bool_]]:
    """Evaluate the forward map on every particle.

    Returns predictions ``(n_ens, dim_output)`` and a failure mask. Failed
    rows are zero-filled and must not be read.
    """
    n = particles.shape[0]
    preds = np.zeros((n, problem.dim_output))
    failed = np.zeros(n, dtype=bool)

    def eval_one(j: int) -> None:
        try:
            preds[j] = problem.forward(particles[j])
        except (EvaluationError, SolverError):
            if policy == "raise":
                raise
            failed[j] = True

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(eval_one, range(n)))
    else:
        for j in range(n):
            eval_one(j)
    return preds, failed


def _drift(
    particles: npt.NDArray[np.double],
    predictions: npt.NDArray[np.double],
    noise,
    data: npt.NDArray[np.double],
    rho: float,
    c0_inverse: npt.NDArray[np.double] | None,
    failed: npt.NDArray[np.bool_] | None = None,
    scale: float = 1.0,
) -> npt.NDArray[np.double]:
    """Shared drift kernel for all flow variants.

    ``c0_inverse`` of None drops the regulariser term. Particles flagged in
    ``failed`` contribute nothing to the data statistics and receive only
    the regulariser part of the drift. ``scale`` multiplies the whole drift;
    the subsampled flow uses it so that averaging per-subset drifts over all
    subsets reproduces the full-data drift exactly.
    """
    u = particles
    n = u.shape[0]
    out = np.zeros_like(u)
    valid = slice(None) if failed is None else ~failed
    u_valid = u[valid]
    g_valid = predictions[valid]

    if u_valid.shape[0] >= 2:
        du = u_valid - u_valid.mean(axis=0)
        g_mean = g_valid.mean(axis=0)
        dg = g_valid - g_mean
        cug = du.T @ dg / (u_valid.shape[0] - 1)  # (d, k)
        misfit = noise.apply_inverse(g_valid - data)
        mean_misfit = noise.apply_inverse(g_mean - data)
        combined = (1.0 - rho) * misfit + rho * mean_misfit
        out[valid] = -combined @ cug.T

    if c0_inverse is not None:
        du_all = u - u.mean(axis=0)
        cu = du_all.T @ du_all / (n - 1)
        anchor = (1.0 - rho) * u + rho * u.mean(axis=0)
        out -= anchor @ (cu @ c0_inverse).T
    if scale != 1.0:
        out *= scale
    return out


def rhs_plain(
    ensemble: Ensemble | npt.NDArray[np.double],
    problem: InverseProblem,
    predictions: npt.NDArray[np.double] | None = None,
) -> npt.NDArray[np.double]:
    """Drift of the unregularised flow, ``-Cug Gamma^{-1} (G(u_j) - y)``."""
    u = _as_particles(ensemble)
    if predictions is None:
        predictions, _ = _forward_all(problem, u, policy="raise")
    return _drift(u, predictions, problem.noise, problem.data, rho=0.0,
                  c0_inverse=None)


def rhs_regularised(
    ensemble: Ensemble | npt.NDArray[np.double],
    problem: InverseProblem,
    predictions: npt.NDArray[np.double] | None = None,
) -> npt.NDArray[np.double]:
    """Drift of the Tikhonov-regularised flow."""
    if problem.prior is None:
        raise ConfigurationError("this flow variant requires a prior")
    u = _as_particles(ensemble)
    if predictions is None:
        predictions, _ = _forward_all(problem, u, policy="raise")
    return _drift(u, predictions, problem.noise, problem.data, rho=0.0,
                  c0_inverse=problem.prior.c0_inverse)


def rhs_variance_inflated(
    ensemble: Ensemble | npt.NDArray[np.double],
    problem: InverseProblem,
    rho: float,
    predictions: npt.NDArray[np.double] | None = None,
) -> npt.NDArray[np.double]:
    """Variance-inflated regularised drift in its convex-combination form."""
    if not (0.0 <= rho < 1.0):
        raise ConfigurationError(f"rho must lie in [0, 1), got {rho}")
    if problem.prior is None:
        raise ConfigurationError("this flow variant requires a prior")
    u = _as_particles(ensemble)
    if predictions is None:
        predictions, _ = _forward_all(problem, u, policy="raise")
    return _drift(u, predictions, problem.noise, problem.data, rho=rho,
                  c0_inverse=problem.prior.c0_inverse)


def rhs_variance_inflated_expanded(
    ensemble: Ensemble | npt.NDArray[np.double],
    problem: InverseProblem,
    rho: float,
    predictions: npt.NDArray[np.double] | None = None,
) -> npt.NDArray[np.double]:
    """Four-term expansion of the variance-inflated drift.

    Kept as an independent implementation of the same vector field: the
    particle-wise misfit and regulariser terms plus the rho-weighted pulls
    toward the ensemble means. Used to pin the algebraic identity with the
    convex-combination form.
    """
    if not (0.0 <= rho < 1.0):
        raise ConfigurationError(f"rho must lie in [0, 1), got {rho}")
    u = _as_particles(ensemble)
    if problem.prior is None:
        raise ConfigurationError("this flow variant requires a prior")
    if predictions is None:
        predictions, _ = _forward_all(problem, u, policy="raise")
    du = u - u.mean(axis=0)
    g_mean = predictions.mean(axis=0)
    dg = predictions - g_mean
    n = u.shape[0]
    cug = du.T @ dg / (n - 1)
    cu = du.T @ du / (n - 1)
    c0_inv = problem.prior.c0_inverse
    misfit = problem.noise.apply_inverse(predictions - problem.data)
    centred = problem.noise.apply_inverse(dg)
    drift = -misfit @ cug.T - u @ (cu @ c0_inv).T
    drift += rho * (centred @ cug.T) + rho * (du @ (cu @ c0_inv).T)
    return drift


def _log_grid(config: FlowConfig) -> npt.NDArray[np.double]:
    """Sample times: zero, then a logarithmic grid up to ``t_end``."""
    decades = math.log10(config.t_end / config.first_sample)
    count = max(2, int(math.ceil(decades * config.samples_per_decade)) + 1)
    grid = np.geomspace(config.first_sample, config.t_end, count)
    grid[-1] = config.t_end
    return np.concatenate([[0.0], grid])


class _CashKarpStepper:
    """Embedded 4(5) stepper over the flattened ensemble state."""

    def __init__(self, drift, n_ens: int, dim: int, config: FlowConfig):
        self.drift = drift  # (particles (n, d)) -> (n, d)
        self.n_ens = n_ens
        self.dim = dim
        self.config = config
        self.n_rhs_evals = 0
        self.n_attempted = 0
        self.n_accepted = 0

    def attempt(self, u: npt.NDArray[np.double], t: float, h: float):
        """One attempted step; returns (accepted, u_new, err_ratio)."""
        k = np.empty((N_STAGES, self.n_ens, self.dim))
        for s in range(N_STAGES):
            u_stage = u.copy()
            for j, a in enumerate(_CK_A[s]):
                if a != 0.0:
                    u_stage += h * a * k[j]
            k[s] = self.drift(u_stage)
        self.n_rhs_evals += N_STAGES * self.n_ens
        self.n_attempted += 1

        u5 = u + h * np.tensordot(_CK_B5, k, axes=1)
        u4 = u + h * np.tensordot(_CK_B4, k, axes=1)
        err = u5 - u4
        scale = self.config.abs_tol + self.config.rel_tol * np.maximum(
            np.abs(u), np.abs(u5)
        )
        ratio = math.sqrt(float(np.mean((err / scale) ** 2)))
        accepted = ratio <= 1.0
        if accepted:
            self.n_accepted += 1
        return accepted, u5, ratio

    @staticmethod
    def next_step(h: float, ratio: float) -> float:
        if ratio == 0.0:
            return 5.0 * h
        return h * min(5.0, max(0.2, 0.9 * ratio ** -0.2))


def _integrate_core(
    particles: npt.NDArray[np.double],
    problem: InverseProblem,
    config: FlowConfig,
    drift_for_segment,
    segments: list[tuple[float, float, int | None]],
    workers: int,
) -> Trajectory:
    """Drive the stepper across segments, sampling diagnostics on the way.

    ``segments`` is a list of (t_start, t_end, payload); the payload (a
    subset index or None) is handed to ``drift_for_segment`` to build the
    drift for that stretch. Segment boundaries and diagnostic times are
    exact step boundaries.
    """
    n, d = particles.shape
    u = particles.copy()
    failure_log: list[tuple[float, int]] = []
    diag_times = _log_grid(config)

    times: list[float] = []
    states: list[npt.NDArray[np.double]] = []
    residuals: list[float] = []
    spreads_l: list[float] = []
    eigs: list[float] = []
    n_diag = 0

    def record(t: float) -> None:
        nonlocal n_diag
        total = 0.0
        for j in range(n):
            try:
                total += potential(problem, u[j])
            except (EvaluationError, SolverError):
                total += math.inf
            n_diag += 1
        times.append(t)
        states.append(u.copy())
        residuals.append(total / n)
        du = u - u.mean(axis=0)
        spreads_l.append(0.5 * float(np.mean(np.einsum("jd,jd->j", du, du))))
        eigs.append(span_restricted_min_eigenvalue(u))

    stepper = _CashKarpStepper(None, n, d, config)
    h = config.initial_step
    if h is None:
        h = min(config.first_sample / 8.0, 1e-4 * config.t_end)
    h = min(h, config.max_step)
    n_failures = 0

    record(0.0)
    next_diag = 1  # diag_times[0] is t = 0, already recorded

    for seg_start, seg_end, payload in segments:
        if seg_end <= seg_start:
            continue
        drift_fn = drift_for_segment(payload)

        def drift(u_stage):
            # With fewer than two evaluable particles the data statistics
            # cannot be formed and the drift degenerates to the pure
            # regulariser for the whole ensemble, which pulls it back
            # toward feasible territory.
            nonlocal n_failures
            preds, failed = _forward_all(
                problem, u_stage, config.failure_policy, workers
            )
            if failed.any():
                n_failures += int(failed.sum())
                if len(failure_log) < _FAILURE_LOG_CAP:
                    for j in np.flatnonzero(failed):
                        failure_log.append((t_now, int(j)))
                return drift_fn(u_stage, preds, failed)
            return drift_fn(u_stage, preds, None)

        stepper.drift = drift
        t_now = seg_start
        while t_now < seg_end - 1e-14 * max(1.0, seg_end):
            while next_diag < diag_times.size and diag_times[next_diag] <= t_now * (1 + 1e-14):
                next_diag += 1
            target = seg_end
            if next_diag < diag_times.size:
                target = min(target, diag_times[next_diag])
            gap = target - t_now
            h_try = min(h, gap, config.max_step)
            # Underflow counts only when the controller, not a nearby
            # sample boundary, forced the small step.
            if h_try < config.min_step and h_try < gap * (1.0 - 1e-12):
                raise StiffnessError(
                    f"step size {h_try:.3e} fell below min_step "
                    f"{config.min_step:.3e} at t={t_now:.6g}",
                    time=t_now,
                )
            accepted, u_new, ratio = stepper.attempt(u, t_now, h_try)
            if accepted:
                t_now = t_now + h_try
                u = u_new
                if abs(t_now - target) <= 1e-12 * max(1.0, target):
                    t_now = target
                hit_diag = (
                    next_diag < diag_times.size
                    and t_now >= diag_times[next_diag] * (1 - 1e-14)
                )
                if hit_diag:
                    record(t_now)
                    next_diag += 1
                h = min(stepper.next_step(h_try, ratio), config.max_step)
            else:
                h = stepper.next_step(h_try, ratio)
                if h < config.min_step:
                    raise StiffnessError(
                        f"step size {h:.3e} fell below min_step after rejection "
                        f"at t={t_now:.6g}",
                        time=t_now,
                    )

    if times[-1] < config.t_end:
        record(config.t_end)
    return Trajectory(
        times=np.asarray(times),
        states=np.asarray(states),
        mean_residuals=np.asarray(residuals),
        spreads=np.asarray(spreads_l),
        min_eigenvalues=np.asarray(eigs),
        n_rhs_evals=stepper.n_rhs_evals,
        n_diag_evals=n_diag,
        n_steps_accepted=stepper.n_accepted,
        n_steps_attempted=stepper.n_attempted,
        n_forward_failures=n_failures,
        failure_log=failure_log,
    )


def integrate(
    ensemble: Ensemble | npt.NDArray[np.double],
    problem: InverseProblem,
    config: FlowConfig,
    workers: int = 1,
) -> Trajectory:
    """Integrate the configured flow from t = 0 to ``config.t_end``.

    The problem is whitened once up front; all drifts then see identity
    noise. Diagnostics (mean regularised potential, spread, smallest
    span-restricted covariance eigenvalue) are recorded at t = 0 and on the
    logarithmic grid.
    """
    u0 = _as_particles(ensemble)
    white = whiten(problem)
    if config.variant in ("regularised", "variance_inflated") and white.prior is None:
        raise ConfigurationError(f"variant {config.variant!r} requires a prior")
    rho = config.rho if config.variant == "variance_inflated" else 0.0
    c0_inv = None
    if config.variant != "plain":
        c0_inv = white.prior.c0_inverse

    def drift_for_segment(_payload):
        def fn(u_stage, preds, failed):
            return _drift(u_stage, preds, white.noise, white.data, rho=rho,
                          c0_inverse=c0_inv, failed=failed)
        return fn

    return _integrate_core(
        u0, white, config, drift_for_segment,
        segments=[(0.0, config.t_end, None)], workers=workers,
    )
