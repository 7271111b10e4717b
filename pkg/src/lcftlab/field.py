"""Half-plane Green kernels, insertion bookkeeping, and conformal-map plumbing.

Two covariance kernels appear throughout:

    G(z, w)   = -log|z - w| - log|z - conj(w)|                 (neutral kernel)
    G_H(z, w) = G(z, w) + 2 log|z|_+ + 2 log|w|_+,  |z|_+ = max(|z|, 1)

with G_H(z, infinity) = 2 log|z|_+.  G_H is the covariance of the free-boundary
field normalized to pair to zero with the uniform measure on the unit
half-circle; the neutral kernel is the mod-constant version.

The module also hosts the deterministic log-profile attached to a set of
insertions, the closed-form normalization constants, the partition function
over charge configurations, coordinate changes under conformal maps, the
zipper profile along a driving path, and contour averages of the kernels.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .loewner import LoewnerEvolution, flow_final, slit_map, slit_map_deriv, slit_map_inverse
from .params import Params

__all__ = [
    "green_H",
    "green_neutral",
    "InsertionSpec",
    "liouville_profile",
    "normalization_C",
    "partition_Z",
    "IdentityMap",
    "ScalingMap",
    "SlitMap",
    "coordinate_change",
    "zipper_profile",
    "Contour",
    "pushforward_average",
    "pushforward_log_deriv",
    "QuadratureError",
]


class QuadratureError(RuntimeError):
    """Contour quadrature failed to reach the requested tolerance."""

    def __init__(self, achieved: float, target: float):
        super().__init__(
            f"quadrature stalled at tolerance {achieved:.3e} (target {target:.3e})"
        )
        self.achieved = achieved
        self.target = target


# ---------------------------------------------------------------------------
# Green kernels
# ---------------------------------------------------------------------------

def _logplus(z):
    return np.log(np.maximum(np.abs(z), 1.0))


def green_neutral(z, w):
    """G(z, w) = -log|z-w| - log|z-conj(w)|, the mod-constant kernel."""
    z = np.asarray(z, dtype=complex)
    w = np.asarray(w, dtype=complex)
    d = np.abs(z - w)
    if np.any(d == 0.0):
        raise ValueError("green_neutral is singular at coincident points")
    return -np.log(d) - np.log(np.abs(z - np.conj(w)))


def green_H(z, w):
    """Normalized half-plane kernel; either argument may be (complex) infinity."""
    z_inf = np.isinf(z) if not isinstance(z, np.ndarray) else np.any(np.isinf(z))
    w_inf = np.isinf(w) if not isinstance(w, np.ndarray) else np.any(np.isinf(w))
    if z_inf and w_inf:
        raise ValueError("green_H(infinity, infinity) is not defined")
    if z_inf:
        return 2.0 * _logplus(np.asarray(w, dtype=complex))
    if w_inf:
        return 2.0 * _logplus(np.asarray(z, dtype=complex))
    z = np.asarray(z, dtype=complex)
    w = np.asarray(w, dtype=complex)
    return green_neutral(z, w) + 2.0 * _logplus(z) + 2.0 * _logplus(w)


# ---------------------------------------------------------------------------
# Insertions, profile, and closed-form constants
# ---------------------------------------------------------------------------

def _merge_points(pairs):
    """Combine (coefficient, point) pairs with exactly equal points."""
    merged: dict[complex, float] = {}
    order: list[complex] = []
    for a, p in pairs:
        p = complex(p)
        if p in merged:
            merged[p] += float(a)
        else:
            merged[p] = float(a)
            order.append(p)
    return [(merged[p], p) for p in order]


@dataclass(frozen=True)
class InsertionSpec:
    """Bulk and boundary log-insertions plus the charge at infinity.

    ``bulk`` holds (alpha, z) with Im z > 0; ``boundary`` holds (beta_half, x)
    with x real, where beta_half is the kernel coefficient (the field blows up
    like beta_half * G_H(., x) near x).  Coincident points are merged by
    summing their coefficients before any constant is computed.
    """

    bulk: tuple = ()
    boundary: tuple = ()
    delta_inf: float = 0.0

    def __post_init__(self):
        bulk = tuple((float(a), complex(z)) for a, z in self.bulk)
        boundary = tuple((float(b), float(x)) for b, x in self.boundary)
        for _, z in bulk:
            if z.imag <= 0:
                raise ValueError(f"bulk insertion {z} must have Im z > 0")
        object.__setattr__(self, "bulk", bulk)
        object.__setattr__(self, "boundary", boundary)

    def merged(self) -> "InsertionSpec":
        bulk = _merge_points(self.bulk)
        boundary = [(a, p.real) for a, p in _merge_points((b, complex(x)) for b, x in self.boundary)]
        return InsertionSpec(bulk=tuple((a, z) for a, z in bulk),
                             boundary=tuple(boundary),
                             delta_inf=self.delta_inf)

    def charges(self):
        """All finite (coefficient, point) pairs after merging."""
        m = self.merged()
        return [(a, z) for a, z in m.bulk] + [(b, complex(x)) for b, x in m.boundary]

    def total_charge(self) -> float:
        return sum(a for a, _ in self.charges()) + self.delta_inf


def liouville_profile(spec: InsertionSpec, params: Params, c: float = 0.0):
    """Deterministic log-profile of the field with the given insertions.

    Returns a callable evaluating

        sum_i a_i G_H(z, p_i) + (delta - Q) G_H(z, infinity) + c

    anywhere off the insertion points (evaluation at one raises ValueError).
    """
    charges = spec.charges()
    coefs = np.array([a for a, _ in charges])
    points = np.array([p for _, p in charges], dtype=complex)
    dq = spec.delta_inf - params.Q

    def profile(z):
        z = np.asarray(z, dtype=complex)
        out = 2.0 * dq * _logplus(z)
        if coefs.size:
            d = np.abs(z[..., None] - points)
            if np.any(d == 0.0):
                raise ValueError("profile evaluated at an insertion point")
            out = out + np.sum(
                coefs * (-np.log(d) - np.log(np.abs(z[..., None] - np.conj(points)))
                         + 2.0 * _logplus(points)), axis=-1)
            out = out + np.sum(coefs) * 2.0 * _logplus(z)
        return out + c

    return profile


def _c_single(a: float, p: complex, params: Params) -> float:
    lp = max(abs(p), 1.0)
    val = -2.0 * a * (params.Q - a) * math.log(lp)
    if p.imag > 0:
        val += -0.5 * a * a * math.log(2.0 * p.imag)
    return val


def normalization_C(spec: InsertionSpec, params: Params) -> float:
    """Closed-form normalization constant of the insertion configuration.

    Product of single-insertion factors, the pairwise e^{a_j a_k G_H} factors,
    and the couplings e^{a_j delta G_H(p_j, infinity)} to the charge at
    infinity.  Coincident insertions are merged first.
    """
    charges = spec.charges()
    log_c = 0.0
    for a, p in charges:
        log_c += _c_single(a, p, params)
        log_c += a * spec.delta_inf * 2.0 * math.log(max(abs(p), 1.0))
    for j in range(len(charges)):
        for k in range(j + 1, len(charges)):
            aj, pj = charges[j]
            ak, pk = charges[k]
            log_c += aj * ak * float(green_H(pj, pk))
    return math.exp(log_c)


def partition_Z(points) -> float:
    """Partition function over a charge configuration.

    ``points`` is a sequence of (a, p) with p in the closed upper half-plane.
    Bulk points contribute (2 Im p)^(-a^2/2); each pair contributes
    e^{a_j a_k G(p_j, p_k)} with the neutral kernel.  Coincident points are
    merged by summing their charges.
    """
    merged = _merge_points(points)
    log_z = 0.0
    for a, p in merged:
        if p.imag > 0:
            log_z += -0.5 * a * a * math.log(2.0 * p.imag)
        elif p.imag < 0:
            raise ValueError(f"point {p} lies outside the closed upper half-plane")
    for j in range(len(merged)):
        for k in range(j + 1, len(merged)):
            aj, pj = merged[j]
            ak, pk = merged[k]
            log_z += aj * ak * float(green_neutral(pj, pk))
    return math.exp(log_z)


# ---------------------------------------------------------------------------
# Conformal maps and the coordinate change
# ---------------------------------------------------------------------------

class IdentityMap:
    """The identity on H."""

    def forward(self, z):
        return np.asarray(z, dtype=complex)

    def inverse(self, w):
        return np.asarray(w, dtype=complex)

    def deriv(self, z):
        return np.ones_like(np.asarray(z, dtype=complex))

    def inverse_deriv(self, w):
        return np.ones_like(np.asarray(w, dtype=complex))

    def in_image(self, w):
        return np.full(np.shape(np.asarray(w)), True)


class ScalingMap:
    """g(z) = r z for r > 0."""

    def __init__(self, r: float):
        if r <= 0:
            raise ValueError("scaling factor must be positive")
        self.r = float(r)

    def forward(self, z):
        return self.r * np.asarray(z, dtype=complex)

    def inverse(self, w):
        return np.asarray(w, dtype=complex) / self.r

    def deriv(self, z):
        return np.full(np.shape(np.asarray(z)), complex(self.r))

    def inverse_deriv(self, w):
        return np.full(np.shape(np.asarray(w)), complex(1.0 / self.r))

    def in_image(self, w):
        return np.full(np.shape(np.asarray(w)), True)


class SlitMap:
    """g_t(z) = sqrt(z^2 - 4t): H onto H minus the vertical slit (0, 2i sqrt(t)]."""

    def __init__(self, t: float):
        if t < 0:
            raise ValueError("slit parameter t must be nonnegative")
        self.t = float(t)

    def forward(self, z):
        return slit_map(z, self.t)

    def inverse(self, w):
        return slit_map_inverse(w, self.t)

    def deriv(self, z):
        return slit_map_deriv(z, self.t)

    def inverse_deriv(self, w):
        w = np.asarray(w, dtype=complex)
        return w / self.inverse(w)

    def in_image(self, w):
        w = np.asarray(w, dtype=complex)
        on_slit = (np.abs(w.real) == 0.0) & (w.imag <= 2.0 * math.sqrt(self.t)) & (w.imag >= 0)
        return ~on_slit


def coordinate_change(field_fn, gmap, params: Params):
    """Push a field evaluation through a conformal map.

    Given values h on the source domain, returns the callable
    w -> h(g^{-1}(w)) + Q log|(g^{-1})'(w)| on the image of g.
    """

    def transformed(w):
        w = np.asarray(w, dtype=complex)
        ok = gmap.in_image(w)
        if not np.all(ok):
            raise ValueError("evaluation point outside the image of the map")
        z = gmap.inverse(w)
        return field_fn(z) + params.Q * np.log(np.abs(gmap.inverse_deriv(w)))

    return transformed


# ---------------------------------------------------------------------------
# Zipper profile along a driving path
# ---------------------------------------------------------------------------

def zipper_profile(t: float, state, params: Params):
    """Deterministic profile carried by the flow at time t.

    Built from the driving state of a reverse SLE run: with W = W_t, live
    force points (rho_j, z_j), their images Z_j = g_t(z_j), and the map
    derivative, the profile is

        -G(z, W)/sqrt(kappa) + sum_j rho_j G(g_t(z), Z_j)/(2 sqrt(kappa))
        + Q log|g_t'(z)|

    evaluated by flowing each requested z through the same driving path.
    Raises ValueError if the state has already hit its continuation threshold
    before t, or when evaluating at a singular point.
    """
    if state.threshold_hit and state.threshold_time is not None and state.threshold_time <= t:
        raise ValueError("profile requested at or past the continuation threshold")
    driving = state.driving
    k = driving.index_of(t)
    w_t = float(driving.driving[k])
    sk = params.sqrt_kappa

    rhos = np.array([fp.rho for fp in state.force_points]) if state.force_points else np.zeros(0)
    images = np.array(
        [tp.trajectory[k] for tp in state.force_trajectories], dtype=complex
    ) if state.force_trajectories else np.zeros(0, dtype=complex)

    def profile(z):
        z = np.asarray(z, dtype=complex)
        flat = z.ravel()
        g, gp, collided = flow_final(flat, driving, 0.0, t)
        if np.any(collided):
            raise ValueError("evaluation point swallowed by the flow before t")
        if np.any(np.abs(flat - w_t) == 0.0) or np.any(np.abs(g[:, None] - images) == 0.0):
            raise ValueError("profile evaluated at a singular point")
        out = -green_neutral(flat, w_t) / sk
        if rhos.size:
            out = out + np.sum(
                rhos * (-np.log(np.abs(g[:, None] - images))
                        - np.log(np.abs(g[:, None] - np.conj(images)))), axis=-1
            ) / (2.0 * sk)
        out = out + params.Q * np.log(np.abs(gp))
        return out.reshape(z.shape)

    return profile


# ---------------------------------------------------------------------------
# Contours and pushforward averages
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Contour:
    """A circle (or admissible arc) carrying the uniform measure.

    kind 'bulk': the part of the circle |u - center| = eps lying in the closed
    upper half-plane (the full circle when Im center >= eps).
    kind 'boundary': half-circle around a real center.
    kind 'infinity': the half-circle |u| = 1/eps in H (center is ignored).
    """

    center: complex
    eps: float
    kind: str = "bulk"

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("contour radius must be positive")
        if self.kind not in ("bulk", "boundary", "infinity"):
            raise ValueError(f"unknown contour kind {self.kind!r}")
        object.__setattr__(self, "center", complex(self.center))
        if self.kind == "boundary" and abs(self.center.imag) > 0:
            raise ValueError("boundary contour needs a real center")
        if self.kind == "bulk" and self.center.imag <= 0:
            raise ValueError("bulk contour needs Im center > 0")

    @property
    def is_full_circle(self) -> bool:
        return self.kind == "bulk" and self.center.imag >= self.eps

    def angle_window(self):
        """Parameter interval [a, b] of the arc."""
        if self.kind == "bulk":
            if self.center.imag >= self.eps:
                return -math.pi, math.pi
            th0 = math.asin(self.center.imag / self.eps)
            return -th0, math.pi + th0
        return 0.0, math.pi

    def nodes(self, n: int):
        """Midpoint nodes and uniform weights on the arc."""
        a, b = self.angle_window()
        th = a + (b - a) * (np.arange(n) + 0.5) / n
        if self.kind == "infinity":
            u = np.exp(1j * th) / self.eps
        else:
            u = self.center + self.eps * np.exp(1j * th)
        w = np.full(n, 1.0 / n)
        return u, w


def _refine(values):
    """Convergence from a doubling sequence of quadrature values."""
    diffs = [abs(values[i + 1] - values[i]) for i in range(len(values) - 1)]
    return diffs[-1] if diffs else math.inf


def _adaptive_contour_mean(fn, contour: Contour, tol: float, start: int = 64,
                           max_nodes: int = 1 << 17):
    n = start
    prev = None
    achieved = math.inf
    while n <= max_nodes:
        u, w = contour.nodes(n)
        val = np.sum(fn(u) * w)
        if prev is not None:
            achieved = abs(val - prev)
            if achieved < tol:
                return val
        prev = val
        n *= 2
    raise QuadratureError(achieved, tol)


def pushforward_average(u: complex, gmap, contour: Contour, tol: float = 1e-10) -> float:
    """Average of G(u, g(.)) against the uniform measure on a contour.

    The number of nodes is grown (starting from a singularity-distance guess)
    until two successive doublings agree within ``tol``.
    """
    u = complex(u)
    v0, _ = contour.nodes(256)
    gv0 = gmap.forward(v0)
    d = np.min(np.abs(gv0 - u))
    if d == 0.0:
        raise ValueError("target point lies on the mapped contour")
    start = 64
    if contour.kind != "infinity":
        # crude refinement guess: closer singularities need more nodes
        start = int(min(4096, max(64, 64 * contour.eps / max(d, 1e-12))))
        start = 1 << (start - 1).bit_length()

    def fn(v):
        return green_neutral(u, gmap.forward(v))

    val = _adaptive_contour_mean(fn, contour, tol, start=start)
    return float(np.real(val))


def pushforward_log_deriv(gmap, eps: float, tol: float = 1e-10) -> complex:
    """Average of log g'(.) over the at-infinity contour of radius 1/eps."""
    contour = Contour(center=0.0, eps=eps, kind="infinity")

    def fn(v):
        return np.log(gmap.deriv(v).astype(complex))

    return complex(_adaptive_contour_mean(fn, contour, tol))
