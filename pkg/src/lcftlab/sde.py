"""Driving-function SDEs: reverse SLE with force points, the correlated
Brownian pair encoding boundary lengths for kappa > 4, and the thick-wedge
average process.

The driving SDE is

    dW = sum_j Re(-rho_j / (Z_j - W)) dt + sqrt(kappa) dB,
    dZ_j = -2 / (Z_j - W) dt,

integrated by Euler-Maruyama for W; the force trajectories ride the same
reverse-flow stepper as module :mod:`lcftlab.loewner`.  A force point within
sqrt(dt) of W is tested against the continuation threshold and frozen; steps
where some |Z_j - W| < 10 sqrt(dt) are refined into sub-steps with their own
Brownian refinement.  Nothing is continued past a collision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .loewner import (COLLISION_FACTOR, SUBSTEP_FACTOR, LoewnerEvolution,
                      TrackedPoint)
from .params import Params

__all__ = [
    "ForcePointSpec",
    "DrivingState",
    "CrtPath",
    "WedgeAveragePath",
    "continuation_threshold",
    "simulate_reverse_sle",
    "ReverseSleBatch",
    "run_reverse_sle_batch",
    "crt_theta",
    "crt_a_sq",
    "sample_crt",
    "sample_crt_batch",
    "wedge_average_process",
    "make_rng",
]

_N_SUB = 16


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator; (seed, stream) fixes the draw sequence."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed) ^ (np.uint64(stream) << np.uint64(20))))


@dataclass(frozen=True)
class ForcePointSpec:
    """Weight and location of one force point."""

    rho: float
    z: complex

    def __post_init__(self):
        object.__setattr__(self, "z", complex(self.z))
        if not math.isfinite(self.rho):
            raise ValueError("force-point weight must be finite")
        if self.z.imag < 0:
            raise ValueError("force point must lie in the closed upper half-plane")


@dataclass
class DrivingState:
    """A sampled driving path with its force-point trajectories."""

    driving: LoewnerEvolution
    force_points: list
    force_trajectories: list
    threshold_hit: bool
    threshold_time: float | None
    rng_seed: int


def continuation_threshold(colliding_weights, params: Params) -> bool:
    """True iff the summed weights of colliding force points reach kappa/2 + 4."""
    return float(np.sum(colliding_weights)) >= params.kappa / 2.0 + 4.0


def _rk4_z(z, gp, w0, w1, h):
    wh = 0.5 * (w0 + w1)
    k1 = -2.0 / (z - w0)
    l1 = 2.0 * gp / (z - w0) ** 2
    z2 = z + 0.5 * h * k1
    k2 = -2.0 / (z2 - wh)
    l2 = 2.0 * (gp + 0.5 * h * l1) / (z2 - wh) ** 2
    z3 = z + 0.5 * h * k2
    k3 = -2.0 / (z3 - wh)
    l3 = 2.0 * (gp + 0.5 * h * l2) / (z3 - wh) ** 2
    z4 = z + h * k3
    k4 = -2.0 / (z4 - w1)
    l4 = 2.0 * (gp + h * l3) / (z4 - w1) ** 2
    return (z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4),
            gp + (h / 6.0) * (l1 + 2 * l2 + 2 * l3 + l4))


@dataclass
class ReverseSleBatch:
    """Endpoint state of a vectorized reverse SLE run."""

    w: np.ndarray
    z: np.ndarray
    gprime: np.ndarray
    frozen: np.ndarray
    threshold_hit: np.ndarray
    threshold_time: np.ndarray
    w_path: np.ndarray | None = None
    z_path: np.ndarray | None = None
    gprime_path: np.ndarray | None = None
    freeze_time: np.ndarray | None = None


def run_reverse_sle_batch(params: Params, force_points, T: float, dt: float,
                          n_paths: int, rng, *, keep_path: bool = False,
                          record_forces: bool = False, step_hook=None) -> ReverseSleBatch:
    """Simulate ``n_paths`` driving paths at once.

    ``step_hook(k, w, z, drift, dw, active)`` is called once per step with the
    pre-step state, the per-path drift actually applied, the realized
    increment, and the mask of paths still running.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    n_steps = int(round(T / dt))
    if abs(n_steps * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"T={T} must be a multiple of dt={dt}")
    n_fp = len(force_points)
    rhos = np.array([fp.rho for fp in force_points])
    sqdt = math.sqrt(dt)
    r_coll = COLLISION_FACTOR * sqdt
    r_sub = SUBSTEP_FACTOR * sqdt
    sig = math.sqrt(params.kappa * dt)
    thr = params.kappa / 2.0 + 4.0

    w = np.zeros(n_paths)
    z = np.tile(np.array([fp.z for fp in force_points], dtype=complex), (n_paths, 1))
    gp = np.ones((n_paths, n_fp), dtype=complex)
    frozen = np.zeros((n_paths, n_fp), dtype=bool)
    freeze_time = np.full((n_paths, n_fp), np.nan)
    hit = np.zeros(n_paths, dtype=bool)
    hit_time = np.full(n_paths, np.nan)

    w_path = np.zeros((n_paths, n_steps + 1)) if keep_path else None
    z_path = gp_path = None
    if record_forces:
        z_path = np.zeros((n_paths, n_steps + 1, n_fp), dtype=complex)
        gp_path = np.zeros((n_paths, n_steps + 1, n_fp), dtype=complex)
        z_path[:, 0] = z
        gp_path[:, 0] = gp

    def _freeze(mask, t_now):
        """Freeze flagged (path, fp) pairs and apply the threshold rule."""
        new = mask & ~frozen
        if not np.any(new):
            return
        frozen[new] = True
        freeze_time[new] = t_now
        swallowed = np.where(frozen, rhos, 0.0).sum(axis=1)
        newly_hit = ~hit & (swallowed >= thr - 1e-12)
        if np.any(newly_hit):
            hit[newly_hit] = True
            hit_time[newly_hit] = t_now

    if n_fp:
        _freeze(np.abs(z - w[:, None]) < r_coll, 0.0)

    for k in range(n_steps):
        active = ~hit
        live = ~frozen & active[:, None] if n_fp else np.zeros((n_paths, 0), dtype=bool)

        if n_fp:
            diffs = z - w[:, None]
            inv = np.zeros_like(diffs)
            np.divide(1.0, diffs, out=inv, where=live)
            drift = -(rhos * inv.real).sum(axis=1)
            need_sub = (live & (np.abs(diffs) < r_sub)).any(axis=1)
        else:
            drift = np.zeros(n_paths)
            need_sub = np.zeros(n_paths, dtype=bool)

        xi = rng.standard_normal(n_paths)
        dw = np.where(active, drift * dt + sig * xi, 0.0)

        if step_hook is not None:
            # pre-step state; sub-stepped paths are masked out since their
            # realized increment is refined below
            step_hook(k, w, z, drift, dw, active & ~need_sub)

        if np.any(need_sub):
            idx = np.flatnonzero(need_sub & active)
            if idx.size:
                h = dt / _N_SUB
                sub_sig = math.sqrt(params.kappa * h)
                ws = w[idx].copy()
                zs = z[idx].copy()
                gps = gp[idx].copy()
                frs = frozen[idx].copy()
                xis = rng.standard_normal((idx.size, _N_SUB))
                for m in range(_N_SUB):
                    d = zs - ws[:, None]
                    livs = ~frs
                    newly = livs & (np.abs(d) < r_coll)
                    if np.any(newly):
                        frs |= newly
                        fr_rows = np.flatnonzero(newly.any(axis=1))
                        frozen_rows = idx[fr_rows]
                        mask_full = np.zeros_like(frozen)
                        mask_full[frozen_rows] = newly[fr_rows]
                        _freeze(mask_full, k * dt + m * h)
                        livs = ~frs
                    dsub = zs - ws[:, None]
                    inv = np.zeros_like(dsub)
                    np.divide(1.0, dsub, out=inv, where=livs)
                    drift_s = -(rhos * inv.real).sum(axis=1)
                    w_new = ws + drift_s * h + sub_sig * xis[:, m]
                    zn, gn = _rk4_z(zs, gps, ws[:, None], w_new[:, None], h)
                    zs = np.where(livs, zn, zs)
                    gps = np.where(livs, gn, gps)
                    ws = w_new
                still = ~hit[idx]
                w[idx] = np.where(still, ws, w[idx])
                z[idx] = np.where(~frozen[idx] & still[:, None], zs, z[idx])
                gp[idx] = np.where(~frozen[idx] & still[:, None], gps, gp[idx])
                dw[idx] = 0.0  # already applied

        plain = active & ~need_sub
        if n_fp and np.any(plain):
            upd = live & plain[:, None]
            if np.any(upd):
                zn, gn = _rk4_z(z, gp, w[:, None], (w + dw)[:, None], dt)
                z = np.where(upd, zn, z)
                gp = np.where(upd, gn, gp)
        w = w + np.where(plain, dw, 0.0)

        if n_fp:
            _freeze((np.abs(z - w[:, None]) < r_coll) & active[:, None], (k + 1) * dt)

        if keep_path:
            w_path[:, k + 1] = w
        if record_forces:
            z_path[:, k + 1] = z
            gp_path[:, k + 1] = gp

    return ReverseSleBatch(w=w, z=z, gprime=gp, frozen=frozen, threshold_hit=hit,
                           threshold_time=hit_time, w_path=w_path, z_path=z_path,
                           gprime_path=gp_path, freeze_time=freeze_time)


def simulate_reverse_sle(params: Params, force_points, T: float, dt: float,
                         rng_seed: int = 0) -> DrivingState:
    """One driving path with full force-point trajectories.

    Stops bookkeeping (threshold_hit, threshold_time) when the summed weights
    of frozen force points reach kappa/2 + 4; the path itself is not evolved
    past that time.
    """
    rng = make_rng(rng_seed)
    res = run_reverse_sle_batch(params, force_points, T, dt, 1, rng,
                                keep_path=True, record_forces=True)
    driving = LoewnerEvolution(driving=res.w_path[0], dt=dt)
    trajectories = []
    for j, fp in enumerate(force_points):
        ft = res.freeze_time[0, j]
        trajectories.append(TrackedPoint(
            start=fp.z,
            trajectory=res.z_path[0, :, j].copy(),
            deriv=res.gprime_path[0, :, j].copy(),
            collided=bool(res.frozen[0, j]),
            collision_time=None if np.isnan(ft) else float(ft),
        ))
    ht = res.threshold_time[0]
    return DrivingState(
        driving=driving,
        force_points=list(force_points),
        force_trajectories=trajectories,
        threshold_hit=bool(res.threshold_hit[0]),
        threshold_time=None if np.isnan(ht) else float(ht),
        rng_seed=rng_seed,
    )


# ---------------------------------------------------------------------------
# Correlated Brownian pair (boundary-length processes for kappa > 4)
# ---------------------------------------------------------------------------

def crt_theta(kappa: float) -> float:
    if kappa <= 4.0:
        raise ValueError("correlated pair requires kappa > 4")
    return 4.0 * math.pi / kappa


def crt_a_sq(kappa: float) -> float:
    """Variance rate 2/sin(4 pi / kappa)."""
    return 2.0 / math.sin(crt_theta(kappa))


@dataclass
class CrtPath:
    """Correlated Brownian pair with Var rate a_sq and correlation -cos(theta)."""

    X: np.ndarray
    Y: np.ndarray
    dt: float
    a_sq: float
    theta: float


def sample_crt_batch(params: Params, T: float, dt: float, n_paths: int, rng):
    """(X, Y) paths of shape (n_paths, n_steps + 1) with exact increments."""
    theta = crt_theta(params.kappa)
    a2 = crt_a_sq(params.kappa)
    n = int(round(T / dt))
    s = math.sqrt(a2 * dt)
    xi = rng.standard_normal((2, n_paths, n))
    dx = s * xi[0]
    dy = s * (-math.cos(theta) * xi[0] + math.sin(theta) * xi[1])
    X = np.concatenate([np.zeros((n_paths, 1)), np.cumsum(dx, axis=1)], axis=1)
    Y = np.concatenate([np.zeros((n_paths, 1)), np.cumsum(dy, axis=1)], axis=1)
    return X, Y


def sample_crt(params: Params, T: float, dt: float, rng) -> CrtPath:
    """One correlated pair; per-step covariance a_sq dt [[1, -cos t], [-cos t, 1]]."""
    X, Y = sample_crt_batch(params, T, dt, 1, rng)
    return CrtPath(X=X[0], Y=Y[0], dt=dt, a_sq=crt_a_sq(params.kappa),
                   theta=crt_theta(params.kappa))


# ---------------------------------------------------------------------------
# Thick-wedge average process
# ---------------------------------------------------------------------------

@dataclass
class WedgeAveragePath:
    """Variance-2 drifted Brownian path, conditioned negative for t < 0."""

    times: np.ndarray
    values: np.ndarray
    alpha: float
    drift: float

    def occupation(self, lo: float, hi: float) -> float:
        dt = self.times[1] - self.times[0]
        return float(np.sum((self.values > lo) & (self.values < hi)) * dt)


def wedge_alpha(weight: float, params: Params) -> float:
    return 0.5 * (params.Q + params.gamma / 2.0 - weight / params.gamma)


def wedge_average_process(weight: float, params: Params, window, dt: float, rng,
                          max_tries: int = 10_000) -> WedgeAveragePath:
    """Average process of a thick wedge of the given weight.

    For t >= 0 the path is B_{2t} + (Q - 2 alpha) t with
    alpha = (Q + gamma/2 - weight/gamma)/2.  For t < 0 it is the same law
    conditioned to stay negative, realized by rejection sampling on the
    discretized window (at most ``max_tries`` candidate paths).

    ``window`` is (t_min, t_max) with t_min <= 0 <= t_max.
    """
    if weight < params.gamma**2 / 2.0:
        raise ValueError("thin regime (weight < gamma^2/2) not supported")
    t_min, t_max = window
    if not (t_min <= 0.0 <= t_max):
        raise ValueError("window must contain 0")
    alpha = wedge_alpha(weight, params)
    drift = params.Q - 2.0 * alpha

    n_pos = int(round(t_max / dt))
    n_neg = int(round(-t_min / dt))
    sig = math.sqrt(2.0 * dt)

    pos = np.cumsum(sig * rng.standard_normal(n_pos) + drift * dt) if n_pos else np.zeros(0)

    neg = np.zeros(0)
    if n_neg:
        s_grid = dt * np.arange(1, n_neg + 1)
        accepted = None
        tries = 0
        batch = 256
        while accepted is None and tries < max_tries:
            cand = np.cumsum(sig * rng.standard_normal((batch, n_neg)), axis=1) - drift * s_grid
            ok = np.flatnonzero((cand < 0.0).all(axis=1))
            tries += batch
            if ok.size:
                accepted = cand[ok[0]]
        if accepted is None:
            raise RuntimeError(
                f"negative-side conditioning not achieved in {max_tries} tries"
            )
        neg = accepted[::-1]  # index increasing in t: Y(t_min) first

    times = dt * np.arange(-n_neg, n_pos + 1)
    values = np.concatenate([neg, [0.0], pos])
    return WedgeAveragePath(times=times, values=values, alpha=alpha, drift=drift)
