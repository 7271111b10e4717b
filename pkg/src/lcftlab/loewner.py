"""Reverse Loewner flow integration and half-plane-capacity bookkeeping.

The flow is dg_t(z)/dt = -2/(g_t(z) - W_t) for a given driving function W,
integrated pointwise by classical RK4 with W interpolated linearly inside a
step.  The spatial derivative is co-evolved through
d(g_t'(z))/dt = 2 g_t'(z)/(g_t(z) - W_t)^2, which is the z-derivative of the
flow equation (the slit-map solution g_t(z) = sqrt(z^2 - 4t) pins the sign).

Points approaching the driving value are sub-stepped and finally frozen with
a collision flag; nothing is ever continued past a collision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LoewnerEvolution",
    "TrackedPoint",
    "ExtrapolationError",
    "reverse_flow",
    "flow_final",
    "hcap_estimate",
    "slit_map",
    "slit_map_deriv",
    "slit_map_inverse",
]

# |g - W| < SUBSTEP_FACTOR * sqrt(dt) triggers sub-stepping,
# |g - W| < COLLISION_FACTOR * sqrt(dt) freezes the point.
SUBSTEP_FACTOR = 10.0
COLLISION_FACTOR = 1.0
_N_SUBSTEPS = 32


class ExtrapolationError(RuntimeError):
    """Richardson extrapolation did not settle; carries the observed spread."""

    def __init__(self, spread: float, tol: float):
        super().__init__(
            f"capacity extrapolation spread {spread:.3e} exceeds tolerance {tol:.3e}"
        )
        self.spread = spread
        self.tol = tol


@dataclass(frozen=True)
class LoewnerEvolution:
    """Driving function sampled on a uniform grid in capacity time.

    ``driving[k]`` is W at time k*dt; ``duration`` equals (len(driving)-1)*dt.
    """

    driving: np.ndarray
    dt: float

    def __post_init__(self):
        w = np.asarray(self.driving, dtype=float)
        object.__setattr__(self, "driving", w)
        if self.dt <= 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if w.ndim != 1 or w.size < 1:
            raise ValueError("driving must be a one-dimensional sample sequence")
        if not np.all(np.isfinite(w)):
            raise ValueError("driving contains non-finite values")

    @property
    def duration(self) -> float:
        return (self.driving.size - 1) * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.driving.size) * self.dt

    @classmethod
    def constant(cls, value: float, duration: float, dt: float) -> "LoewnerEvolution":
        n = int(round(duration / dt))
        return cls(driving=np.full(n + 1, float(value)), dt=dt)

    def index_of(self, t: float) -> int:
        k = int(round(t / self.dt))
        if abs(k * self.dt - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not on the driving grid (dt={self.dt})")
        if not 0 <= k < self.driving.size:
            raise ValueError(f"time {t} outside [0, {self.duration}]")
        return k


@dataclass
class TrackedPoint:
    """History of one point carried by the reverse flow."""

    start: complex
    trajectory: np.ndarray
    deriv: np.ndarray
    collided: bool = False
    collision_time: float | None = field(default=None)

    @property
    def final(self) -> complex:
        return complex(self.trajectory[-1])

    @property
    def final_deriv(self) -> complex:
        return complex(self.deriv[-1])


def _rk4(g, gp, w0, w1, h):
    """One RK4 step of the joint (g, g') system; W linear on [0, h]."""
    wh = 0.5 * (w0 + w1)

    k1 = -2.0 / (g - w0)
    l1 = 2.0 * gp / (g - w0) ** 2

    g2 = g + 0.5 * h * k1
    k2 = -2.0 / (g2 - wh)
    l2 = 2.0 * (gp + 0.5 * h * l1) / (g2 - wh) ** 2

    g3 = g + 0.5 * h * k2
    k3 = -2.0 / (g3 - wh)
    l3 = 2.0 * (gp + 0.5 * h * l2) / (g3 - wh) ** 2

    g4 = g + h * k3
    k4 = -2.0 / (g4 - w1)
    l4 = 2.0 * (gp + h * l3) / (g4 - w1) ** 2

    g_new = g + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    gp_new = gp + (h / 6.0) * (l1 + 2.0 * l2 + 2.0 * l3 + l4)
    return g_new, gp_new


def _flow_core(points, driving, k0, k1, dt, record=None):
    """Advance ``points`` from grid index k0 to k1 under ``driving``.

    Returns (g, gp, collided, collision_time).  ``record`` may be a pair of
    preallocated (n_steps+1, n_points) arrays receiving the trajectories.
    """
    w = driving
    g = np.array(points, dtype=complex)
    gp = np.ones_like(g)
    collided = np.zeros(g.shape, dtype=bool)
    coll_time = np.full(g.shape, np.nan)

    sq = math.sqrt(dt)
    r_coll = COLLISION_FACTOR * sq
    r_sub = SUBSTEP_FACTOR * sq

    hit0 = np.abs(g - w[k0]) < r_coll
    if np.any(hit0):
        collided[hit0] = True
        coll_time[hit0] = k0 * dt

    if record is not None:
        record[0][0] = g
        record[1][0] = gp

    for step, k in enumerate(range(k0, k1)):
        w0 = w[k]
        w1 = w[k + 1]
        live = ~collided
        if np.any(live):
            dist = np.abs(g[live] - w0)
            close = dist < r_sub
            if not np.any(close):
                g_new, gp_new = _rk4(g[live], gp[live], w0, w1, dt)
                g[live] = g_new
                gp[live] = gp_new
            else:
                idx_live = np.flatnonzero(live)
                far = idx_live[~close]
                if far.size:
                    g[far], gp[far] = _rk4(g[far], gp[far], w0, w1, dt)
                near = idx_live[close]
                gs = g[near]
                gps = gp[near]
                alive = np.ones(near.size, dtype=bool)
                h = dt / _N_SUBSTEPS
                for m in range(_N_SUBSTEPS):
                    if not np.any(alive):
                        break
                    wa = w0 + (w1 - w0) * (m / _N_SUBSTEPS)
                    wb = w0 + (w1 - w0) * ((m + 1) / _N_SUBSTEPS)
                    d = np.abs(gs[alive] - wa)
                    dead = d < r_coll
                    if np.any(dead):
                        ia = np.flatnonzero(alive)[dead]
                        alive[ia] = False
                        collided[near[ia]] = True
                        coll_time[near[ia]] = k * dt + m * h
                    if np.any(alive):
                        gn, gpn = _rk4(gs[alive], gps[alive], wa, wb, h)
                        gs[alive] = gn
                        gps[alive] = gpn
                g[near] = gs
                gp[near] = gps
        if record is not None:
            record[0][step + 1] = g
            record[1][step + 1] = gp

    if not np.all(np.isfinite(g)):
        bad = ~np.isfinite(g)
        collided[bad] = True
        coll_time[bad] = np.where(np.isnan(coll_time[bad]), k1 * dt, coll_time[bad])
    return g, gp, collided, coll_time


def reverse_flow(points, driving: LoewnerEvolution, t0: float = 0.0, t1: float | None = None):
    """Evolve ``points`` under the reverse flow from t0 to t1.

    Parameters
    ----------
    points : sequence of complex
        Starting positions in the closed upper half-plane.
    driving : LoewnerEvolution
    t0, t1 : float
        Grid-aligned times with t0 <= t1 <= driving.duration.

    Returns
    -------
    list of TrackedPoint with full trajectories on the driving grid.
    """
    pts = np.asarray(points, dtype=complex)
    if np.any(pts.imag < -1e-12):
        raise ValueError("points must lie in the closed upper half-plane")
    if t1 is None:
        t1 = driving.duration
    if not (0.0 <= t0 <= t1 <= driving.duration + 1e-12):
        raise ValueError(f"need 0 <= t0 <= t1 <= {driving.duration}")
    k0 = driving.index_of(t0)
    k1 = driving.index_of(t1)

    n_steps = k1 - k0
    rec_g = np.empty((n_steps + 1, pts.size), dtype=complex)
    rec_gp = np.empty((n_steps + 1, pts.size), dtype=complex)
    _, _, collided, coll_time = _flow_core(
        pts, driving.driving, k0, k1, driving.dt, record=(rec_g, rec_gp)
    )

    out = []
    for i in range(pts.size):
        ct = coll_time[i]
        out.append(
            TrackedPoint(
                start=complex(pts[i]),
                trajectory=rec_g[:, i].copy(),
                deriv=rec_gp[:, i].copy(),
                collided=bool(collided[i]),
                collision_time=None if np.isnan(ct) else float(ct),
            )
        )
    return out


def flow_final(points, driving: LoewnerEvolution, t0: float = 0.0, t1: float | None = None):
    """Endpoint-only variant of :func:`reverse_flow`.

    Returns (g, gprime, collided) arrays without storing trajectories.
    """
    pts = np.asarray(points, dtype=complex)
    if t1 is None:
        t1 = driving.duration
    k0 = driving.index_of(t0)
    k1 = driving.index_of(t1)
    g, gp, collided, _ = _flow_core(pts, driving.driving, k0, k1, driving.dt)
    return g, gp, collided


def hcap_estimate(evolution: LoewnerEvolution, tol: float = 1e-4) -> float:
    """Half-plane capacity of the hull generated by ``evolution``.

    Estimated from the Laurent coefficient of the flow map at three radii
    R, 2R, 4R and Richardson-extrapolated in 1/R.  The map g_T: H -> H\\hull
    expands as z + b/z + ..., and the capacity of the hull is -b (the inverse,
    hull-removing map has the opposite leading coefficient).

    Raises
    ------
    ExtrapolationError
        If the extrapolation tableau spread exceeds ``tol``.
    """
    sup_w = float(np.max(np.abs(evolution.driving))) if evolution.driving.size else 0.0
    R = 100.0 * (1.0 + sup_w)
    radii = np.array([R, 2.0 * R, 4.0 * R])
    starts = 1j * radii
    g, _, _ = flow_final(starts, evolution, 0.0, evolution.duration)
    m = starts * (g - starts)  # -> b as R -> infinity

    # Neville extrapolation of m(eps), eps = 1/R, to eps = 0.
    eps = 1.0 / radii
    p01 = m[0] + (m[1] - m[0]) * (0.0 - eps[0]) / (eps[1] - eps[0])
    p12 = m[1] + (m[2] - m[1]) * (0.0 - eps[1]) / (eps[2] - eps[1])
    p012 = p01 + (p12 - p01) * (0.0 - eps[0]) / (eps[2] - eps[0])

    spread = max(abs(p012 - p12), abs(p012.imag))
    if spread > tol:
        raise ExtrapolationError(spread, tol)
    return float(-p012.real)


# ---------------------------------------------------------------------------
# Zero-driving closed form: the slit map and its derivatives.
# ---------------------------------------------------------------------------

def _uhp_sqrt(v):
    """Branch of sqrt with values in the closed upper half-plane."""
    w = np.sqrt(v.astype(complex))
    flip = (w.imag < 0) | ((w.imag == 0) & (w.real < 0) & (v.imag == 0) & (v.real > 0))
    return np.where(flip, -w, w)


def slit_map(z, t: float):
    """g_t(z) = sqrt(z^2 - 4t) for W == 0, mapping iR+ into iR+.

    For real z this keeps the sign of z (valid for |z| >= 2 sqrt(t); points
    inside the swallowed interval have no image under the flow).
    """
    z = np.asarray(z, dtype=complex)
    w = _uhp_sqrt(z * z - 4.0 * t)
    real = np.abs(z.imag) == 0
    return np.where(real, np.sign(z.real) * np.abs(w.real) + 1j * w.imag * 0, w)


def slit_map_deriv(z, t: float):
    """d/dz sqrt(z^2 - 4t) = z / g_t(z)."""
    z = np.asarray(z, dtype=complex)
    return z / slit_map(z, t)


def slit_map_inverse(w, t: float):
    """Inverse of the slit map: sqrt(w^2 + 4t), H \\ slit -> H."""
    w = np.asarray(w, dtype=complex)
    v = _uhp_sqrt(w * w + 4.0 * t)
    real = np.abs(w.imag) == 0
    return np.where(real, np.sign(w.real) * np.abs(v.real), v)
