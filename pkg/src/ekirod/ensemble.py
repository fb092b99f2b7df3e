"""Ensemble container and the empirical statistics driving the particle flows.

All covariances use the unbiased divisor ``n_ens - 1``; means use ``n_ens``.
Operations are pure: they never mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import numpy.typing as npt


@dataclass(frozen=True)
class Ensemble:
    """An interacting-particle ensemble at a single flow time.

    Parameters
    ----------
    particles : npt.NDArray[np.double]
        2D array of shape ``(n_ens, dim)``; row ``j`` is particle ``j``.
    time : float
        Flow time the ensemble belongs to. Non-negative.
    """

    particles: npt.NDArray[np.double]
    time: float = 0.0

    def __post_init__(self) -> None:
        p = np.asarray(self.particles, dtype=np.float64)
        if p.ndim != 2:
            raise ValueError(
                f"particles must be 2D (n_ens, dim), got ndim={p.ndim}"
            )
        if p.shape[0] < 2:
            raise ValueError(
                f"an ensemble needs at least 2 particles, got {p.shape[0]}"
            )
        if not np.all(np.isfinite(p)):
            raise ValueError("particles contain non-finite entries")
        if not (np.isfinite(self.time) and self.time >= 0.0):
            raise ValueError(f"time must be finite and >= 0, got {self.time}")
        object.__setattr__(self, "particles", p)

    @property
    def n_ens(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]


def _as_particles(ensemble: Ensemble | npt.NDArray[np.double]) -> npt.NDArray[np.double]:
    """Accept either an Ensemble or a raw ``(n_ens, dim)`` array."""
    if isinstance(ensemble, Ensemble):
        return ensemble.particles
    p = np.asarray(ensemble, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"expected 2D particle array, got ndim={p.ndim}")
    if p.shape[0] == 0:
        raise ValueError("empty ensemble has no statistics")
    return p


def ensemble_mean(ensemble: Ensemble | npt.NDArray[np.double]) -> npt.NDArray[np.double]:
    """Mean of the particles, shape ``(dim,)``."""
    return _as_particles(ensemble).mean(axis=0)


def observation_mean(predictions: npt.NDArray[np.double]) -> npt.NDArray[np.double]:
    """Mean of forward-map outputs.

    Parameters
    ----------
    predictions : npt.NDArray[np.double]
        Array of shape ``(n_ens, dim_obs)``; row ``j`` is ``G(u_j)``.
    """
    g = np.asarray(predictions, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] == 0:
        raise ValueError(f"predictions must be non-empty 2D, got shape {g.shape}")
    return g.mean(axis=0)


def cross_covariance(
    ensemble: Ensemble | npt.NDArray[np.double],
    predictions: npt.NDArray[np.double],
) -> npt.NDArray[np.double]:
    """Empirical parameter-observation cross-covariance.

    Computes ``sum_j (u_j - mean(u)) outer (G(u_j) - mean(G)) / (n_ens - 1)``,
    shape ``(dim, dim_obs)``.

    Raises
    ------
    ValueError
        If fewer than two particles are given, if shapes disagree, or if
        any prediction row is non-finite (the message names the particle).
    """
    u = _as_particles(ensemble)
    g = np.asarray(predictions, dtype=np.float64)
    if u.shape[0] < 2:
        raise ValueError("cross_covariance needs at least 2 particles")
    if g.ndim != 2 or g.shape[0] != u.shape[0]:
        raise ValueError(
            f"predictions shape {g.shape} does not match {u.shape[0]} particles"
        )
    bad = ~np.isfinite(g).all(axis=1)
    if bad.any():
        j = int(np.flatnonzero(bad)[0])
        raise ValueError(f"non-finite forward value for particle {j}")
    du = u - u.mean(axis=0)
    dg = g - g.mean(axis=0)
    return du.T @ dg / (u.shape[0] - 1)


def parameter_covariance(
    ensemble: Ensemble | npt.NDArray[np.double],
) -> npt.NDArray[np.double]:
    """Empirical covariance of the particles, shape ``(dim, dim)``.

    Symmetric positive semi-definite with rank at most ``n_ens - 1``.
    """
    u = _as_particles(ensemble)
    if u.shape[0] < 2:
        raise ValueError("parameter_covariance needs at least 2 particles")
    du = u - u.mean(axis=0)
    c = du.T @ du / (u.shape[0] - 1)
    return 0.5 * (c + c.T)


def ensemble_spread(ensemble: Ensemble | npt.NDArray[np.double]) -> float:
    """Mean squared deviation from the ensemble mean.

    Returns ``sum_j ||u_j - mean(u)||^2 / (2 n_ens)``, the spread quantity
    whose decay rate the collapse diagnostics fit.
    """
    u = _as_particles(ensemble)
    du = u - u.mean(axis=0)
    return float(0.5 * np.mean(np.einsum("jd,jd->j", du, du)))


def span_restricted_min_eigenvalue(
    ensemble: Ensemble | npt.NDArray[np.double],
    rel_floor: float = 1e-12,
) -> float:
    """Smallest eigenvalue of the particle covariance on the deviation span.

    Eigenvalues below ``rel_floor`` times the largest one are treated as
    numerically zero directions outside the span and ignored. Returns 0.0
    for a fully collapsed ensemble.
    """
    c = parameter_covariance(ensemble)
    w = np.linalg.eigvalsh(c)
    top = w[-1]
    if top <= 0.0:
        return 0.0
    w = w[w > rel_floor * top]
    return float(w[0]) if w.size else 0.0
