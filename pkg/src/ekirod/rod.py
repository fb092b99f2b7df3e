"""Discrete Cosserat rod: nodes carry mass and translation, elements carry
directors and stiffness, time stepping is explicit position-Verlet.

Geometry and dynamics
---------------------
For ``n`` elements there are ``n + 1`` nodes with positions/velocities and
``n`` orthonormal director frames with material angular velocities. Director
matrices store the frame axes as rows (lab components of d1, d2, d3), so a
matrix maps lab vectors into the material frame. Strains are measured
against the straight rest configuration:

    shear/stretch   sigma_l = Q_l (e_l t_l) - e3,
    bend/twist      kappa_v = -log(Q_{v+1} Q_v^T) / Dhat   (interior nodes),

with ``e_l`` the element dilatation and ``t_l`` the unit tangent. Internal
force and couple follow the stretch-rescaled constitutive laws: element
stress ``Q^T S sigma / e`` spread onto nodes by differencing, voronoi couple
``B kappa / eps^3`` spread onto elements by differencing, plus the shear
coupling, gyroscopic, and dilatation-rate torques. Director updates use the
rotation exponential, so frames stay orthonormal up to roundoff (a periodic
re-orthonormalisation removes the residual drift).

One end is clamped (node 0 position and element 0 frame held fixed); a
constant point force acts on the tip node, gravity on every node. A
Rayleigh-type velocity damping ``nu`` (exact exponential decay per step)
lets loaded configurations settle to statics; damping does not alter the
equilibrium itself.

Units are SI throughout: density kg/m^3, moduli Pa, forces N.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import numpy.typing as npt
from numba import njit

from .errors import ConfigurationError, EvaluationError, SolverError

# Settling criterion: final kinetic energy below this fraction of the peak.
SETTLE_RATIO = 1.0e-6

_RENORM_EVERY = 256
_CHECK_EVERY = 64


@dataclass(frozen=True)
class RodConfig:
    """Geometry, material, loading, and integration settings for one rod."""

    rest_length: float
    radius: float
    n_elements: int
    density: float
    youngs_modulus: float
    poisson_ratio: float = 0.35
    shear_correction: float = 4.0 / 3.0
    gravity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    tip_force: tuple[float, float, float] = (0.0, 0.0, 0.0)
    damping: float = 0.0
    dt: float | None = None
    t_end: float = 1.0
    base_position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    axis: tuple[float, float, float] = (1.0, 0.0, 0.0)
    normal: tuple[float, float, float] = (0.0, 1.0, 0.0)

    def __post_init__(self) -> None:
        for name in ("rest_length", "radius", "density", "youngs_modulus", "t_end"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0.0):
                raise ConfigurationError(f"{name} must be positive, got {value}")
        if self.n_elements < 4:
            raise ConfigurationError(
                f"need at least 4 elements, got {self.n_elements}"
            )
        if self.rest_length / self.radius < 20.0:
            raise ConfigurationError(
                "slenderness L/r must be >= 20, got "
                f"{self.rest_length / self.radius:.2f}"
            )
        if not (0.0 <= self.poisson_ratio < 0.5):
            raise ConfigurationError(
                f"poisson_ratio must lie in [0, 0.5), got {self.poisson_ratio}"
            )
        if self.shear_correction <= 0.0:
            raise ConfigurationError("shear_correction must be positive")
        if self.damping < 0.0 or not np.isfinite(self.damping):
            raise ConfigurationError(f"damping must be >= 0, got {self.damping}")
        for name in ("gravity", "tip_force", "base_position", "axis", "normal"):
            vec = np.asarray(getattr(self, name), dtype=np.float64)
            if vec.shape != (3,) or not np.all(np.isfinite(vec)):
                raise ConfigurationError(f"{name} must be 3 finite components")
        ax = np.asarray(self.axis, dtype=np.float64)
        nm = np.asarray(self.normal, dtype=np.float64)
        if np.linalg.norm(ax) == 0.0 or np.linalg.norm(nm) == 0.0:
            raise ConfigurationError("axis and normal must be nonzero")
        if np.linalg.norm(np.cross(ax, nm)) < 1e-8 * np.linalg.norm(ax) * np.linalg.norm(nm):
            raise ConfigurationError("axis and normal must not be parallel")
        if self.dt is not None:
            bound = self.cfl_bound
            if not (0.0 < self.dt <= bound):
                raise ConfigurationError(
                    f"dt={self.dt:.3e} exceeds the stability bound "
                    f"0.3 (L/n) sqrt(rho/E) = {bound:.3e}"
                )

    @property
    def shear_modulus(self) -> float:
        return self.youngs_modulus / (2.0 * (1.0 + self.poisson_ratio))

    @property
    def cfl_bound(self) -> float:
        """Axial-wave step bound ``0.3 (L/n) sqrt(rho/E)``."""
        return (
            0.3
            * (self.rest_length / self.n_elements)
            * math.sqrt(self.density / self.youngs_modulus)
        )

    def stable_dt(self) -> float:
        """Automatic step: the CFL bound capped by the rotational-mode bound."""
        rot = 0.3 * self.radius * math.sqrt(
            self.density / (self.shear_correction * self.shear_modulus)
        )
        return min(self.cfl_bound, rot)


@dataclass(frozen=True)
class RodStiffness:
    """Rest-configuration stiffness, inertia, and mesh data."""

    shear_diag: npt.NDArray[np.double]      # (alpha_c G A, alpha_c G A, E A)
    bend_diag: npt.NDArray[np.double]       # (E I1, E I2, G I3)
    inertia_diag: npt.NDArray[np.double]    # rho * (I1, I2, I3) * lhat, per element
    node_mass: npt.NDArray[np.double]       # (n + 1,), half mass at the ends
    rest_element_length: float

    def __post_init__(self) -> None:
        for name in ("shear_diag", "bend_diag", "inertia_diag"):
            vec = np.asarray(getattr(self, name), dtype=np.float64)
            if vec.shape != (3,) or np.any(vec <= 0.0):
                raise ConfigurationError(f"{name} must be 3 positive entries")
            object.__setattr__(self, name, vec)
        mass = np.asarray(self.node_mass, dtype=np.float64)
        if mass.ndim != 1 or np.any(mass <= 0.0):
            raise ConfigurationError("node masses must be positive")
        object.__setattr__(self, "node_mass", mass)
        if self.rest_element_length <= 0.0:
            raise ConfigurationError("rest element length must be positive")


@dataclass(frozen=True)
class RodState:
    """Positions, velocities, director frames, and angular velocities."""

    positions: npt.NDArray[np.double]            # (n + 1, 3)
    velocities: npt.NDArray[np.double]           # (n + 1, 3)
    directors: npt.NDArray[np.double]            # (n, 3, 3), rows d1, d2, d3
    angular_velocities: npt.NDArray[np.double]   # (n, 3), material frame
    time: float = 0.0

    def __post_init__(self) -> None:
        r = np.asarray(self.positions, dtype=np.float64)
        v = np.asarray(self.velocities, dtype=np.float64)
        q = np.asarray(self.directors, dtype=np.float64)
        w = np.asarray(self.angular_velocities, dtype=np.float64)
        n = q.shape[0]
        if r.ndim != 2 or r.shape[1] != 3 or r.shape[0] != n + 1:
            raise ValueError("positions must have shape (n_elements + 1, 3)")
        if v.shape != r.shape:
            raise ValueError("velocities must match positions in shape")
        if q.shape != (n, 3, 3):
            raise ValueError("directors must have shape (n_elements, 3, 3)")
        if w.shape != (n, 3):
            raise ValueError("angular velocities must have shape (n_elements, 3)")
        for name, arr in (("positions", r), ("velocities", v),
                          ("directors", q), ("angular_velocities", w)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contain non-finite entries")
        object.__setattr__(self, "positions", r)
        object.__setattr__(self, "velocities", v)
        object.__setattr__(self, "directors", q)
        object.__setattr__(self, "angular_velocities", w)

    @property
    def n_elements(self) -> int:
        return self.directors.shape[0]


def build_rod(config: RodConfig) -> tuple[RodState, RodStiffness]:
    """Straight rest-state rod along ``config.axis`` plus its stiffness data."""
    n = config.n_elements
    lhat = config.rest_length / n
    axis = np.asarray(config.axis, dtype=np.float64)
    axis /= np.linalg.norm(axis)
    normal = np.asarray(config.normal, dtype=np.float64)
    normal = normal - (normal @ axis) * axis
    normal /= np.linalg.norm(normal)
    binormal = np.cross(axis, normal)

    base = np.asarray(config.base_position, dtype=np.float64)
    positions = base + np.outer(np.arange(n + 1, dtype=np.float64) * lhat, axis)
    directors = np.empty((n, 3, 3), dtype=np.float64)
    directors[:, 0, :] = normal     # d1
    directors[:, 1, :] = binormal   # d2 = d3 x d1
    directors[:, 2, :] = axis       # d3

    area = math.pi * config.radius ** 2
    i1 = math.pi * config.radius ** 4 / 4.0
    i3 = 2.0 * i1
    g_mod = config.shear_modulus
    shear_diag = np.array([
        config.shear_correction * g_mod * area,
        config.shear_correction * g_mod * area,
        config.youngs_modulus * area,
    ])
    bend_diag = np.array([
        config.youngs_modulus * i1,
        config.youngs_modulus * i1,
        g_mod * i3,
    ])
    inertia_diag = config.density * lhat * np.array([i1, i1, i3])
    node_mass = np.full(n + 1, config.density * area * lhat)
    node_mass[0] *= 0.5
    node_mass[-1] *= 0.5

    state = RodState(
        positions=positions,
        velocities=np.zeros((n + 1, 3)),
        directors=directors,
        angular_velocities=np.zeros((n, 3)),
        time=0.0,
    )
    stiffness = RodStiffness(
        shear_diag=shear_diag,
        bend_diag=bend_diag,
        inertia_diag=inertia_diag,
        node_mass=node_mass,
        rest_element_length=lhat,
    )
    return state, stiffness


@njit(cache=True, nogil=True)
def _rotate_frames(q, om, h):
    # q <- exp(-h [omega]_x) q per element, Rodrigues form.
    n = q.shape[0]
    for l in range(n):
        wx = -h * om[l, 0]
        wy = -h * om[l, 1]
        wz = -h * om[l, 2]
        theta = math.sqrt(wx * wx + wy * wy + wz * wz)
        if theta < 1e-14:
            continue
        kx = wx / theta
        ky = wy / theta
        kz = wz / theta
        c = math.cos(theta)
        s = math.sin(theta)
        omc = 1.0 - c
        r00 = c + kx * kx * omc
        r01 = kx * ky * omc - kz * s
        r02 = kx * kz * omc + ky * s
        r10 = ky * kx * omc + kz * s
        r11 = c + ky * ky * omc
        r12 = ky * kz * omc - kx * s
        r20 = kz * kx * omc - ky * s
        r21 = kz * ky * omc + kx * s
        r22 = c + kz * kz * omc
        for col in range(3):
            a = q[l, 0, col]
            b = q[l, 1, col]
            d = q[l, 2, col]
            q[l, 0, col] = r00 * a + r01 * b + r02 * d
            q[l, 1, col] = r10 * a + r11 * b + r12 * d
            q[l, 2, col] = r20 * a + r21 * b + r22 * d


@njit(cache=True, nogil=True)
def _orthonormalize(q):
    # Re-orthonormalise rows, keeping d3 then d1, rebuilding d2 = d3 x d1.
    n = q.shape[0]
    for l in range(n):
        nz = math.sqrt(q[l, 2, 0] ** 2 + q[l, 2, 1] ** 2 + q[l, 2, 2] ** 2)
        for c in range(3):
            q[l, 2, c] /= nz
        dot = (q[l, 0, 0] * q[l, 2, 0] + q[l, 0, 1] * q[l, 2, 1]
               + q[l, 0, 2] * q[l, 2, 2])
        for c in range(3):
            q[l, 0, c] -= dot * q[l, 2, c]
        nx = math.sqrt(q[l, 0, 0] ** 2 + q[l, 0, 1] ** 2 + q[l, 0, 2] ** 2)
        for c in range(3):
            q[l, 0, c] /= nx
        q[l, 1, 0] = q[l, 2, 1] * q[l, 0, 2] - q[l, 2, 2] * q[l, 0, 1]
        q[l, 1, 1] = q[l, 2, 2] * q[l, 0, 0] - q[l, 2, 0] * q[l, 0, 2]
        q[l, 1, 2] = q[l, 2, 0] * q[l, 0, 1] - q[l, 2, 1] * q[l, 0, 0]


@njit(cache=True, nogil=True)
def _accelerations(r, v, q, om, lhat, inv_mass, j0, s_diag, b_diag, ext,
                   accel, omdot, nlab, mt, ns, dil, dedt, couple, crossk):
    n = q.shape[0]
    # Element pass: strains, internal stress, dilatation rates.
    for l in range(n):
        dx = r[l + 1, 0] - r[l, 0]
        dy = r[l + 1, 1] - r[l, 1]
        dz = r[l + 1, 2] - r[l, 2]
        length = math.sqrt(dx * dx + dy * dy + dz * dz)
        e = length / lhat
        dil[l] = e
        tx = dx / length
        ty = dy / length
        tz = dz / length
        # Material tangent and shear strain sigma = e * (Q t) - e3.
        m0 = q[l, 0, 0] * tx + q[l, 0, 1] * ty + q[l, 0, 2] * tz
        m1 = q[l, 1, 0] * tx + q[l, 1, 1] * ty + q[l, 1, 2] * tz
        m2 = q[l, 2, 0] * tx + q[l, 2, 1] * ty + q[l, 2, 2] * tz
        mt[l, 0] = m0
        mt[l, 1] = m1
        mt[l, 2] = m2
        s0 = s_diag[0] * (e * m0)
        s1 = s_diag[1] * (e * m1)
        s2 = s_diag[2] * (e * m2 - 1.0)
        ns[l, 0] = s0
        ns[l, 1] = s1
        ns[l, 2] = s2
        # Lab-frame internal stress Q^T (S sigma) / e.
        nlab[l, 0] = (q[l, 0, 0] * s0 + q[l, 1, 0] * s1 + q[l, 2, 0] * s2) / e
        nlab[l, 1] = (q[l, 0, 1] * s0 + q[l, 1, 1] * s1 + q[l, 2, 1] * s2) / e
        nlab[l, 2] = (q[l, 0, 2] * s0 + q[l, 1, 2] * s1 + q[l, 2, 2] * s2) / e
        dvx = v[l + 1, 0] - v[l, 0]
        dvy = v[l + 1, 1] - v[l, 1]
        dvz = v[l + 1, 2] - v[l, 2]
        dedt[l] = (dvx * tx + dvy * ty + dvz * tz) / lhat

    # Node pass: difference of element stresses plus external forces.
    for i in range(r.shape[0]):
        fx = ext[i, 0]
        fy = ext[i, 1]
        fz = ext[i, 2]
        if i < n:
            fx += nlab[i, 0]
            fy += nlab[i, 1]
            fz += nlab[i, 2]
        if i > 0:
            fx -= nlab[i - 1, 0]
            fy -= nlab[i - 1, 1]
            fz -= nlab[i - 1, 2]
        accel[i, 0] = fx * inv_mass[i]
        accel[i, 1] = fy * inv_mass[i]
        accel[i, 2] = fz * inv_mass[i]

    # Voronoi pass: curvature from the relative rotation of adjacent frames.
    for w in range(n - 1):
        m00 = (q[w + 1, 0, 0] * q[w, 0, 0] + q[w + 1, 0, 1] * q[w, 0, 1]
               + q[w + 1, 0, 2] * q[w, 0, 2])
        m01 = (q[w + 1, 0, 0] * q[w, 1, 0] + q[w + 1, 0, 1] * q[w, 1, 1]
               + q[w + 1, 0, 2] * q[w, 1, 2])
        m02 = (q[w + 1, 0, 0] * q[w, 2, 0] + q[w + 1, 0, 1] * q[w, 2, 1]
               + q[w + 1, 0, 2] * q[w, 2, 2])
        m10 = (q[w + 1, 1, 0] * q[w, 0, 0] + q[w + 1, 1, 1] * q[w, 0, 1]
               + q[w + 1, 1, 2] * q[w, 0, 2])
        m11 = (q[w + 1, 1, 0] * q[w, 1, 0] + q[w + 1, 1, 1] * q[w, 1, 1]
               + q[w + 1, 1, 2] * q[w, 1, 2])
        m12 = (q[w + 1, 1, 0] * q[w, 2, 0] + q[w + 1, 1, 1] * q[w, 2, 1]
               + q[w + 1, 1, 2] * q[w, 2, 2])
        m20 = (q[w + 1, 2, 0] * q[w, 0, 0] + q[w + 1, 2, 1] * q[w, 0, 1]
               + q[w + 1, 2, 2] * q[w, 0, 2])
        m21 = (q[w + 1, 2, 0] * q[w, 1, 0] + q[w + 1, 2, 1] * q[w, 1, 1]
               + q[w + 1, 2, 2] * q[w, 1, 2])
        m22 = (q[w + 1, 2, 0] * q[w, 2, 0] + q[w + 1, 2, 1] * q[w, 2, 1]
               + q[w + 1, 2, 2] * q[w, 2, 2])
        a0 = m21 - m12
        a1 = m02 - m20
        a2 = m10 - m01
        tr = m00 + m11 + m22
        ct = 0.5 * (tr - 1.0)
        if ct > 1.0:
            ct = 1.0
        elif ct < -1.0:
            ct = -1.0
        theta = math.acos(ct)
        if theta < 1e-9:
            factor = 0.5
        else:
            factor = 0.5 * theta / math.sin(theta)
        # kappa = -log(M) / Dhat, Dhat = lhat on the uniform mesh.
        kx = -factor * a0 / lhat
        ky = -factor * a1 / lhat
        kz = -factor * a2 / lhat
        eps = 0.5 * (dil[w] + dil[w + 1])
        eps3 = eps * eps * eps
        bk0 = b_diag[0] * kx
        bk1 = b_diag[1] * ky
        bk2 = b_diag[2] * kz
        couple[w, 0] = bk0 / eps3
        couple[w, 1] = bk1 / eps3
        couple[w, 2] = bk2 / eps3
        crossk[w, 0] = (ky * bk2 - kz * bk1) * lhat / eps3
        crossk[w, 1] = (kz * bk0 - kx * bk2) * lhat / eps3
        crossk[w, 2] = (kx * bk1 - ky * bk0) * lhat / eps3

    # Element torque balance -> angular accelerations.
    for l in range(n):
        t0 = 0.0
        t1 = 0.0
        t2 = 0.0
        if l < n - 1:
            t0 += couple[l, 0] + 0.5 * crossk[l, 0]
            t1 += couple[l, 1] + 0.5 * crossk[l, 1]
            t2 += couple[l, 2] + 0.5 * crossk[l, 2]
        if l > 0:
            t0 += -couple[l - 1, 0] + 0.5 * crossk[l - 1, 0]
            t1 += -couple[l - 1, 1] + 0.5 * crossk[l - 1, 1]
            t2 += -couple[l - 1, 2] + 0.5 * crossk[l - 1, 2]
        e = dil[l]
        # Shear coupling (Q t x S sigma) lhat / e.
        t0 += (mt[l, 1] * ns[l, 2] - mt[l, 2] * ns[l, 1]) * lhat / e
        t1 += (mt[l, 2] * ns[l, 0] - mt[l, 0] * ns[l, 2]) * lhat / e
        t2 += (mt[l, 0] * ns[l, 1] - mt[l, 1] * ns[l, 0]) * lhat / e
        # Gyroscopic (J omega / e) x omega.
        h0 = j0[0] * om[l, 0] / e
        h1 = j0[1] * om[l, 1] / e
        h2 = j0[2] * om[l, 2] / e
        t0 += h1 * om[l, 2] - h2 * om[l, 1]
        t1 += h2 * om[l, 0] - h0 * om[l, 2]
        t2 += h0 * om[l, 1] - h1 * om[l, 0]
        # Dilatation-rate transport (J omega / e^2) de/dt.
        rate = dedt[l] / (e * e)
        t0 += j0[0] * om[l, 0] * rate
        t1 += j0[1] * om[l, 1] * rate
        t2 += j0[2] * om[l, 2] * rate
        omdot[l, 0] = e * t0 / j0[0]
        omdot[l, 1] = e * t1 / j0[1]
        omdot[l, 2] = e * t2 / j0[2]


@njit(cache=True, nogil=True)
def _advance(r, v, q, om, n_steps, dt, lhat, mass, inv_mass, j0,
             s_diag, b_diag, ext, damp_factor, stats):
    """Run ``n_steps`` position-Verlet steps in place.

    Returns -1 on success, else the step index at which the state went
    non-finite. stats[0] accumulates the peak kinetic energy, stats[1]
    holds the final kinetic energy.
    """
    n = q.shape[0]
    n_nodes = r.shape[0]
    accel = np.zeros((n_nodes, 3))
    omdot = np.zeros((n, 3))
    nlab = np.empty((n, 3))
    mt = np.empty((n, 3))
    ns = np.empty((n, 3))
    dil = np.empty(n)
    dedt = np.empty(n)
    couple = np.empty((max(n - 1, 1), 3))
    crossk = np.empty((max(n - 1, 1), 3))
    half = 0.5 * dt

    for s in range(n_steps):
        for i in range(1, n_nodes):
            r[i, 0] += half * v[i, 0]
            r[i, 1] += half * v[i, 1]
            r[i, 2] += half * v[i, 2]
        _rotate_frames(q, om, half)

        _accelerations(r, v, q, om, lhat, inv_mass, j0, s_diag, b_diag, ext,
                       accel, omdot, nlab, mt, ns, dil, dedt, couple, crossk)

        for i in range(1, n_nodes):
            v[i, 0] = (v[i, 0] + dt * accel[i, 0]) * damp_factor
            v[i, 1] = (v[i, 1] + dt * accel[i, 1]) * damp_factor
            v[i, 2] = (v[i, 2] + dt * accel[i, 2]) * damp_factor
        for l in range(1, n):
            om[l, 0] = (om[l, 0] + dt * omdot[l, 0]) * damp_factor
            om[l, 1] = (om[l, 1] + dt * omdot[l, 1]) * damp_factor
            om[l, 2] = (om[l, 2] + dt * omdot[l, 2]) * damp_factor
        # Clamp: node 0 and element 0 never move.
        v[0, 0] = 0.0
        v[0, 1] = 0.0
        v[0, 2] = 0.0
        om[0, 0] = 0.0
        om[0, 1] = 0.0
        om[0, 2] = 0.0

        for i in range(1, n_nodes):
            r[i, 0] += half * v[i, 0]
            r[i, 1] += half * v[i, 1]
            r[i, 2] += half * v[i, 2]
        _rotate_frames(q, om, half)

        if (s + 1) % _RENORM_EVERY == 0:
            _orthonormalize(q)

        if (s + 1) % _CHECK_EVERY == 0 or s == n_steps - 1:
            kin = 0.0
            for i in range(n_nodes):
                kin += 0.5 * mass[i] * (v[i, 0] ** 2 + v[i, 1] ** 2 + v[i, 2] ** 2)
            for l in range(n):
                kin += 0.5 * (j0[0] * om[l, 0] ** 2 + j0[1] * om[l, 1] ** 2
                              + j0[2] * om[l, 2] ** 2)
            if not math.isfinite(kin):
                return s
            if kin > stats[0]:
                stats[0] = kin
            stats[1] = kin
    return -1


def _external_forces(config: RodConfig, stiffness: RodStiffness) -> npt.NDArray[np.double]:
    ext = np.outer(stiffness.node_mass, np.asarray(config.gravity, dtype=np.float64))
    ext[-1] += np.asarray(config.tip_force, dtype=np.float64)
    return ext


def step(
    state: RodState,
    stiffness: RodStiffness,
    config: RodConfig,
    dt: float | None = None,
) -> RodState:
    """Advance one position-Verlet step and return the new state."""
    dt_eff = config.stable_dt() if dt is None else float(dt)
    if dt_eff <= 0.0:
        raise ConfigurationError(f"dt must be positive, got {dt_eff}")
    r = state.positions.copy()
    v = state.velocities.copy()
    q = state.directors.copy()
    om = state.angular_velocities.copy()
    stats = np.zeros(2)
    bad = _advance(
        r, v, q, om, 1, dt_eff, stiffness.rest_element_length,
        stiffness.node_mass, 1.0 / stiffness.node_mass, stiffness.inertia_diag,
        stiffness.shear_diag, stiffness.bend_diag,
        _external_forces(config, stiffness),
        math.exp(-config.damping * dt_eff), stats,
    )
    if bad >= 0:
        raise SolverError(f"rod state became non-finite during step at t={state.time}")
    return RodState(r, v, q, om, time=state.time + dt_eff)


def solve_rod(parameters: npt.NDArray[np.double], config: RodConfig) -> RodState:
    """Integrate the loaded rod to ``t_end`` and return the settled state.

    ``parameters`` is the pair (density, Young's modulus) in physical units;
    it overrides the corresponding config entries so ensemble members share
    one config. Raises ``EvaluationError`` for nonpositive parameters or a
    final state that has not settled (final kinetic energy above
    ``SETTLE_RATIO`` times the peak), and ``SolverError`` if the state
    diverges.
    """
    p = np.asarray(parameters, dtype=np.float64)
    if p.shape != (2,):
        raise EvaluationError(f"expected 2 parameters (density, E), got shape {p.shape}")
    if not np.all(np.isfinite(p)) or p[0] <= 0.0 or p[1] <= 0.0:
        raise EvaluationError(
            f"physical parameters must be positive, got density={p[0]!r}, E={p[1]!r}"
        )
    try:
        cfg = replace(config, density=float(p[0]), youngs_modulus=float(p[1]))
    except ConfigurationError as exc:
        raise EvaluationError(f"parameters violate rod constraints: {exc}") from exc

    state, stiffness = build_rod(cfg)
    dt = cfg.stable_dt() if cfg.dt is None else cfg.dt
    n_steps = max(1, math.ceil(cfg.t_end / dt))
    dt = cfg.t_end / n_steps

    r = state.positions.copy()
    v = state.velocities.copy()
    q = state.directors.copy()
    om = state.angular_velocities.copy()
    stats = np.zeros(2)
    bad = _advance(
        r, v, q, om, n_steps, dt, stiffness.rest_element_length,
        stiffness.node_mass, 1.0 / stiffness.node_mass, stiffness.inertia_diag,
        stiffness.shear_diag, stiffness.bend_diag,
        _external_forces(cfg, stiffness),
        math.exp(-cfg.damping * dt), stats,
    )
    if bad >= 0:
        raise SolverError(
            f"rod dynamics diverged at step {bad} of {n_steps} "
            f"(density={p[0]:.6g}, E={p[1]:.6g})"
        )
    if stats[0] > 0.0 and stats[1] > SETTLE_RATIO * stats[0]:
        raise EvaluationError(
            f"rod did not settle by t_end={cfg.t_end}: final kinetic energy "
            f"{stats[1]:.3e} exceeds {SETTLE_RATIO:.0e} x peak {stats[0]:.3e}"
        )
    return RodState(r, v, q, om, time=cfg.t_end)


def kinetic_energy(state: RodState, stiffness: RodStiffness) -> float:
    """Translational plus rotational kinetic energy."""
    v = state.velocities
    trans = 0.5 * float(stiffness.node_mass @ np.einsum("ij,ij->i", v, v))
    om = state.angular_velocities
    rot = 0.5 * float(np.sum(om * om * stiffness.inertia_diag, ))
    return trans + rot


def elastic_energy(state: RodState, stiffness: RodStiffness) -> float:
    """Shear/stretch plus bend/twist energy in rest-configuration measure."""
    lhat = stiffness.rest_element_length
    q = state.directors
    diff = np.diff(state.positions, axis=0)
    lengths = np.linalg.norm(diff, axis=1)
    tangents = diff / lengths[:, None]
    dil = lengths / lhat
    mat_tan = np.einsum("lab,lb->la", q, tangents)
    sigma = dil[:, None] * mat_tan
    sigma[:, 2] -= 1.0
    shear = 0.5 * lhat * float(np.sum(sigma * sigma * stiffness.shear_diag))
    bend = 0.0
    for w in range(q.shape[0] - 1):
        m = q[w + 1] @ q[w].T
        a = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
        ct = np.clip(0.5 * (np.trace(m) - 1.0), -1.0, 1.0)
        theta = math.acos(ct)
        factor = 0.5 if theta < 1e-9 else 0.5 * theta / math.sin(theta)
        kappa = -factor * a / lhat
        bend += 0.5 * lhat * float(kappa @ (stiffness.bend_diag * kappa))
    return shear + bend


def warmup_kernels() -> None:
    """Force JIT compilation of the rod kernels (used before timing)."""
    cfg = RodConfig(
        rest_length=1.0, radius=0.01, n_elements=4,
        density=1000.0, youngs_modulus=1e6, t_end=1.0,
    )
    state, stiffness = build_rod(cfg)
    step(state, stiffness, cfg)
