"""Inverse-problem containers: noise and prior models, potentials, whitening.

Weighted norms follow the precision convention ``||x||_M^2 = x^T M^{-1} x``
throughout, so the regularised potential reads

    Phi(u) = 0.5 ||y - G(u)||_Gamma^2 + 0.5 alpha ||u||_D0^2.

Augmenting the observation operator with the scaled prior root turns that
potential into a plain least-squares misfit; whitening turns any noise
covariance into the identity. Both transformations are exact, not
approximations, and the tests pin the corresponding identities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import numpy.typing as npt

from .errors import ConfigurationError


def _sym_inv_sqrt(matrix: npt.NDArray[np.double]) -> npt.NDArray[np.double]:
    """Inverse square root of an SPD matrix via symmetric eigendecomposition."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ConfigurationError(f"expected a square matrix, got shape {m.shape}")
    if not np.allclose(m, m.T, rtol=1e-10, atol=1e-12):
        raise ConfigurationError("matrix is not symmetric")
    w, v = np.linalg.eigh(m)
    if w[0] <= 0.0:
        raise ConfigurationError(
            f"matrix is not positive definite (min eigenvalue {w[0]:.3e})"
        )
    return (v / np.sqrt(w)) @ v.T


@dataclass(frozen=True)
class NoiseModel:
    """Observation-noise covariance, stored as a diagonal or a full matrix.

    Large image problems only ever need the identity / diagonal form; the
    full-matrix form exists for small benchmark problems.

    Parameters
    ----------
    covariance : npt.NDArray[np.double]
        Either shape ``(k,)`` holding a positive diagonal or shape
        ``(k, k)`` holding an SPD matrix.
    is_identity : bool
        Fast-path flag; when set, apply methods return their input.
    """

    covariance: npt.NDArray[np.double]
    is_identity: bool = False
    _inv_sqrt: npt.NDArray[np.double] | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        c = np.asarray(self.covariance, dtype=np.float64)
        if c.ndim == 1:
            if c.size == 0 or np.any(c <= 0.0) or not np.all(np.isfinite(c)):
                raise ConfigurationError("diagonal covariance must be positive and finite")
        elif c.ndim == 2:
            object.__setattr__(self, "_inv_sqrt", _sym_inv_sqrt(c))
        else:
            raise ConfigurationError(f"covariance must be 1D or 2D, got ndim={c.ndim}")
        object.__setattr__(self, "covariance", c)

    @classmethod
    def identity(cls, size: int) -> "NoiseModel":
        if size < 1:
            raise ConfigurationError(f"noise dimension must be >= 1, got {size}")
        return cls(np.ones(size), is_identity=True)

    @classmethod
    def from_diagonal(cls, diagonal: npt.NDArray[np.double]) -> "NoiseModel":
        d = np.asarray(diagonal, dtype=np.float64)
        return cls(d, is_identity=bool(np.all(d == 1.0)))

    @classmethod
    def from_matrix(cls, matrix: npt.NDArray[np.double]) -> "NoiseModel":
        return cls(np.asarray(matrix, dtype=np.float64))

    @property
    def size(self) -> int:
        return self.covariance.shape[0]

    @property
    def is_diagonal(self) -> bool:
        return self.covariance.ndim == 1

    def apply_inverse(self, v: npt.NDArray[np.double]) -> npt.NDArray[np.double]:
        """Gamma^{-1} v, acting on the last axis of ``v``."""
        if self.is_identity:
            return v
        if self.is_diagonal:
            return v / self.covariance
        w = self._inv_sqrt
        return (v @ w) @ w  # w symmetric, w @ w = Gamma^{-1}

    def apply_inverse_sqrt(self, v: npt.NDArray[np.double]) -> npt.NDArray[np.double]:
        """Gamma^{-1/2} v, acting on the last axis of ``v``."""
        if self.is_identity:
            return v
        if self.is_diagonal:
            return v / np.sqrt(self.covariance)
        return v @ self._inv_sqrt

    def weighted_norm_sq(self, v: npt.NDArray[np.double]) -> float:
        """v^T Gamma^{-1} v for a single vector ``v``."""
        v = np.asarray(v, dtype=np.float64)
        if self.is_identity:
            return float(v @ v)
        if self.is_diagonal:
            return float(v @ (v / self.covariance))
        half = v @ self._inv_sqrt
        return float(half @ half)

    def block(self, indices: slice) -> "NoiseModel":
        """Sub-covariance for a contiguous observation block (diagonal only)."""
        if not self.is_diagonal:
            raise ConfigurationError("blocks are only defined for diagonal noise")
        return NoiseModel.from_diagonal(self.covariance[indices])


@dataclass(frozen=True)
class PriorModel:
    """Tikhonov weight ``D0``, strength ``alpha``, and subset count scaling.

    The flow regulariser covariance is ``C0 = (n_subsets / alpha) * D0``;
    the full-data case is ``n_subsets = 1``. Inverses and the inverse root
    are precomputed once (the parameter dimension is always small).
    """

    weight_matrix: npt.NDArray[np.double]
    alpha: float
    n_subsets: int = 1
    _d0_inv: npt.NDArray[np.double] = field(init=False, repr=False)
    _c0_inv_sqrt: npt.NDArray[np.double] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        d0 = np.asarray(self.weight_matrix, dtype=np.float64)
        if not (np.isfinite(self.alpha) and self.alpha > 0.0):
            raise ConfigurationError(f"alpha must be positive, got {self.alpha}")
        if self.n_subsets < 1:
            raise ConfigurationError(f"n_subsets must be >= 1, got {self.n_subsets}")
        inv_sqrt_d0 = _sym_inv_sqrt(d0)  # also validates SPD
        object.__setattr__(self, "weight_matrix", d0)
        object.__setattr__(self, "_d0_inv", inv_sqrt_d0 @ inv_sqrt_d0)
        scale = np.sqrt(self.alpha / self.n_subsets)
        object.__setattr__(self, "_c0_inv_sqrt", scale * inv_sqrt_d0)

    @property
    def dim(self) -> int:
        return self.weight_matrix.shape[0]

    @property
    def c0(self) -> npt.NDArray[np.double]:
        """Regulariser covariance ``(n_subsets / alpha) * D0``."""
        return (self.n_subsets / self.alpha) * self.weight_matrix

    @property
    def c0_inverse(self) -> npt.NDArray[np.double]:
        return (self.alpha / self.n_subsets) * self._d0_inv

    @property
    def c0_inverse_sqrt(self) -> npt.NDArray[np.double]:
        return self._c0_inv_sqrt

    @property
    def d0_inverse(self) -> npt.NDArray[np.double]:
        return self._d0_inv

    def with_subsets(self, n_subsets: int) -> "PriorModel":
        return PriorModel(self.weight_matrix, self.alpha, n_subsets)

    def penalty(self, u: npt.NDArray[np.double]) -> float:
        """0.5 * alpha * u^T D0^{-1} u."""
        return float(0.5 * self.alpha * (u @ self._d0_inv @ u))


@dataclass(frozen=True)
class InverseProblem:
    """Forward map, data, noise, and (optionally) a prior.

    ``forward`` maps a parameter vector of length ``dim_input`` to an
    observation vector of length ``dim_output``. A ``None`` prior means the
    potential is the bare data misfit (used by augmented problems, whose
    regulariser already lives inside the forward map).
    """

    forward: Callable[[npt.NDArray[np.double]], npt.NDArray[np.double]]
    data: npt.NDArray[np.double]
    noise: NoiseModel
    prior: PriorModel | None
    dim_input: int
    dim_output: int

    def __post_init__(self) -> None:
        y = np.asarray(self.data, dtype=np.float64)
        if y.shape != (self.dim_output,):
            raise ConfigurationError(
                f"data shape {y.shape} does not match dim_output={self.dim_output}"
            )
        if not np.all(np.isfinite(y)):
            raise ConfigurationError("data contains non-finite entries")
        if self.noise.size != self.dim_output:
            raise ConfigurationError(
                f"noise dimension {self.noise.size} != dim_output {self.dim_output}"
            )
        if self.prior is not None and self.prior.dim != self.dim_input:
            raise ConfigurationError(
                f"prior dimension {self.prior.dim} != dim_input {self.dim_input}"
            )
        object.__setattr__(self, "data", y)


@dataclass(frozen=True)
class AugmentedProblem(InverseProblem):
    """An inverse problem whose forward map carries the prior root appended.

    ``base`` is the problem it was built from. The augmented potential
    (bare misfit, prior ``None``) equals the base regularised potential.
    """

    base: InverseProblem = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        super().__post_init__()
        if self.base is None:
            raise ConfigurationError("AugmentedProblem requires its base problem")


def potential(problem: InverseProblem, u: npt.NDArray[np.double]) -> float:
    """Regularised potential ``0.5||y - G(u)||_Gamma^2 + 0.5 alpha||u||_D0^2``.

    The prior term is dropped when the problem has no prior.
    """
    u = np.asarray(u, dtype=np.float64)
    residual = problem.data - np.asarray(problem.forward(u), dtype=np.float64)
    value = 0.5 * problem.noise.weighted_norm_sq(residual)
    if problem.prior is not None:
        value += problem.prior.penalty(u)
    return value


def augment(problem: InverseProblem) -> AugmentedProblem:
    """Fold the prior into the observation operator.

    Returns the problem with forward ``u -> (G(u), C0^{-1/2} u)``, data
    ``(y, 0)``, block noise ``diag(Gamma, I)``, and no prior, so that its
    bare misfit equals the regularised potential of ``problem``.
    """
    if problem.prior is None:
        raise ConfigurationError("cannot augment a problem without a prior")
    root = problem.prior.c0_inverse_sqrt
    d = problem.dim_input
    base_forward = problem.forward

    def forward_aug(u: npt.NDArray[np.double]) -> npt.NDArray[np.double]:
        return np.concatenate([np.asarray(base_forward(u), dtype=np.float64), root @ u])

    data_aug = np.concatenate([problem.data, np.zeros(d)])
    if problem.noise.is_identity:
        noise_aug = NoiseModel.identity(problem.dim_output + d)
    elif problem.noise.is_diagonal:
        noise_aug = NoiseModel.from_diagonal(
            np.concatenate([problem.noise.covariance, np.ones(d)])
        )
    else:
        full = np.eye(problem.dim_output + d)
        full[: problem.dim_output, : problem.dim_output] = problem.noise.covariance
        noise_aug = NoiseModel.from_matrix(full)
    return AugmentedProblem(
        forward=forward_aug,
        data=data_aug,
        noise=noise_aug,
        prior=None,
        dim_input=d,
        dim_output=problem.dim_output + d,
        base=problem,
    )


def whiten(problem: InverseProblem) -> InverseProblem:
    """Rescale data and forward map by ``Gamma^{-1/2}`` so the noise is identity.

    Weighted misfits are invariant under this change, and it is a no-op
    (returning the same object) when the noise already is the identity.
    """
    if problem.noise.is_identity:
        return problem
    noise = problem.noise
    base_forward = problem.forward

    def forward_white(u: npt.NDArray[np.double]) -> npt.NDArray[np.double]:
        return noise.apply_inverse_sqrt(np.asarray(base_forward(u), dtype=np.float64))

    return InverseProblem(
        forward=forward_white,
        data=noise.apply_inverse_sqrt(problem.data),
        noise=NoiseModel.identity(problem.dim_output),
        prior=problem.prior,
        dim_input=problem.dim_input,
        dim_output=problem.dim_output,
    )


def tikhonov_solution(
    problem: InverseProblem, operator: npt.NDArray[np.double]
) -> npt.NDArray[np.double]:
    """Minimiser of the regularised potential for a linear forward map.

    Parameters
    ----------
    problem : InverseProblem
        Must carry a prior; its forward map is assumed to equal
        ``u -> operator @ u`` (not checked).
    operator : npt.NDArray[np.double]
        Explicit matrix of shape ``(dim_output, dim_input)``.

    Returns
    -------
    npt.NDArray[np.double]
        ``(A^T Gamma^{-1} A + alpha D0^{-1})^{-1} A^T Gamma^{-1} y``.
    """
    if problem.prior is None:
        raise ConfigurationError("tikhonov_solution requires a prior")
    a = np.asarray(operator, dtype=np.float64)
    if a.shape != (problem.dim_output, problem.dim_input):
        raise ConfigurationError(
            f"operator shape {a.shape} does not match problem dimensions "
            f"({problem.dim_output}, {problem.dim_input})"
        )
    at_gi = problem.noise.apply_inverse(a.T)  # rows scaled by Gamma^{-1}
    lhs = at_gi @ a + problem.prior.alpha * problem.prior.d0_inverse
    rhs = at_gi @ problem.data
    return np.linalg.solve(lhs, rhs)


@dataclass(frozen=True)
class ParameterScaling:
    """Affine map between physical parameters and the O(1) internal units.

    ``physical = offset + scale * internal``, elementwise. The flows only
    ever see internal units; the CLI converts at the boundary.
    """

    offset: npt.NDArray[np.double]
    scale: npt.NDArray[np.double]

    def __post_init__(self) -> None:
        off = np.asarray(self.offset, dtype=np.float64)
        sc = np.asarray(self.scale, dtype=np.float64)
        if off.ndim != 1 or off.shape != sc.shape:
            raise ConfigurationError(
                f"offset {off.shape} and scale {sc.shape} must be matching 1D arrays"
            )
        if np.any(sc <= 0.0) or not np.all(np.isfinite(sc)) or not np.all(np.isfinite(off)):
            raise ConfigurationError("scales must be positive and finite")
        object.__setattr__(self, "offset", off)
        object.__setattr__(self, "scale", sc)

    def to_physical(self, u: npt.NDArray[np.double]) -> npt.NDArray[np.double]:
        return self.offset + self.scale * np.asarray(u, dtype=np.float64)

    def to_internal(self, physical: npt.NDArray[np.double]) -> npt.NDArray[np.double]:
        return (np.asarray(physical, dtype=np.float64) - self.offset) / self.scale
