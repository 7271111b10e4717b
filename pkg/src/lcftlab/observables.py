"""Closed-form observables and their martingale and drift diagnostics.

Collects the scaling weight Delta, the partition-function martingale along
reverse SLE, the boundary cosmological-constant coupling with its
trigonometric identity, the exponential martingale of the correlated
Brownian pair, and the Girsanov reweighting checks.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import kstwobign

from .field import InsertionSpec, partition_Z
from .loewner import flow_final
from .params import Params

__all__ = [
    "delta_weight",
    "martingale_M",
    "MartingaleTrace",
    "CosmologicalCoupling",
    "coupling_mu",
    "trig_residual",
    "crt_mtg_value",
    "crt_mtg_exponent",
    "girsanov_drift_check",
    "weighted_ks_test",
    "GirsanovReport",
]


def delta_weight(alpha: float, params: Params) -> float:
    """Scaling weight (alpha/2)(Q - alpha/2)."""
    return 0.5 * alpha * (params.Q - 0.5 * alpha)


def martingale_M(w: float, images, derivs, spec: InsertionSpec, params: Params) -> float:
    """Partition-function martingale observable at one flow snapshot.

    ``images`` are the flowed insertion points g_t(z_j) (bulk first, then
    boundary, matching ``spec``), ``derivs`` the tracked derivatives g_t'(z_j).
    Raises ValueError on a collided configuration (an image equal to w).
    """
    images = np.asarray(images, dtype=complex)
    derivs = np.asarray(derivs, dtype=complex)
    n_bulk = len(spec.bulk)
    coefs = [a for a, _ in spec.bulk] + [b for b, _ in spec.boundary]
    if images.size != len(coefs) or derivs.size != len(coefs):
        raise ValueError("images/derivs must match the insertion list")
    if np.any(np.abs(images - w) == 0.0):
        raise ValueError("collided configuration: image coincides with w")
    log_m = 0.0
    for j, a in enumerate(coefs):
        expo = 2.0 * delta_weight(a, params) if j < n_bulk \
            else delta_weight(2.0 * a, params)
        log_m += expo * math.log(abs(derivs[j]))
    points = [(-1.0 / params.sqrt_kappa, complex(w))]
    points += [(a, complex(images[j])) for j, a in enumerate(coefs)]
    return math.exp(log_m) * partition_Z(points)


@dataclass
class MartingaleTrace:
    """Martingale values along checkpoints for an ensemble of paths."""

    times: np.ndarray
    values: np.ndarray  # (n_paths, n_times)
    m0: float

    def flatness(self):
        """Per-checkpoint (mean/M0, standard error/M0)."""
        mean = self.values.mean(axis=0) / self.m0
        se = self.values.std(axis=0) / math.sqrt(self.values.shape[0]) / self.m0
        return mean, se


# ---------------------------------------------------------------------------
# Cosmological-constant coupling
# ---------------------------------------------------------------------------

def coupling_mu(sigma, params: Params):
    """Boundary cosmological constant cos(pi gamma (sigma - Q/2)) / sqrt(sin(pi gamma^2/4))."""
    if not 0.0 < params.gamma < 2.0:
        raise ValueError("coupling defined for gamma in (0, 2)")
    den = math.sqrt(math.sin(math.pi * params.gamma**2 / 4.0))
    sigma = np.asarray(sigma, dtype=complex)
    out = np.cos(math.pi * params.gamma * (sigma - params.Q / 2.0)) / den
    if out.ndim == 0:
        return complex(out)
    return out


@dataclass(frozen=True)
class CosmologicalCoupling:
    """Coupled pair (mu_L, mu_R) with its generating parameters."""

    sigma_L: complex
    sigma_R: complex
    mu_L: complex
    mu_R: complex
    theta: float
    x: complex

    @classmethod
    def from_sigma(cls, sigma_L: complex, beta_star: float, params: Params,
                   branch: int = 1) -> "CosmologicalCoupling":
        """Build from sigma_L with sigma_L - sigma_R = branch * beta_star / 2."""
        if branch not in (1, -1):
            raise ValueError("branch must be +1 or -1")
        sigma_L = complex(sigma_L)
        sigma_R = sigma_L - branch * beta_star / 2.0
        theta = math.pi * params.gamma * abs(beta_star) / 2.0
        x = math.pi * params.gamma * (sigma_L - params.Q / 2.0)
        return cls(sigma_L=sigma_L, sigma_R=sigma_R,
                   mu_L=complex(coupling_mu(sigma_L, params)),
                   mu_R=complex(coupling_mu(sigma_R, params)),
                   theta=theta, x=x)

    @classmethod
    def from_x(cls, x, kappa: float) -> "CosmologicalCoupling":
        """Direct parametrization mu_L = cos(x)/sqrt(sin t), mu_R = cos(x+t)/sqrt(sin t)."""
        if kappa <= 4.0:
            raise ValueError("requires kappa > 4")
        theta = 4.0 * math.pi / kappa
        x = complex(x)
        s = math.sqrt(1.0 / math.sin(theta))
        return cls(sigma_L=complex(np.nan), sigma_R=complex(np.nan),
                   mu_L=s * cmath.cos(x), mu_R=s * cmath.cos(x + theta),
                   theta=theta, x=x)


def trig_residual(x, theta):
    """cos^2 x + cos^2(x+t) - 2 cos x cos(x+t) cos t - sin^2 t, identically zero."""
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    cx = np.cos(x)
    cxt = np.cos(x + theta)
    return cx**2 + cxt**2 - 2.0 * cx * cxt * np.cos(theta) - np.sin(theta) ** 2


def crt_mtg_value(s, X_s, Y_s, coupling: CosmologicalCoupling):
    """exp(-s - mu_L X_s - mu_R Y_s); complex when the coupling is complex."""
    val = np.exp(-s - coupling.mu_L * np.asarray(X_s) - coupling.mu_R * np.asarray(Y_s))
    if np.iscomplexobj(val) and np.all(np.abs(np.imag(val)) == 0.0):
        return np.real(val)
    return val


def crt_mtg_exponent(coupling: CosmologicalCoupling, a_sq: float, s: float) -> complex:
    """Closed-form log of E[exp(-s - mu_L X_s - mu_R Y_s)]; zero for a coupled pair."""
    mu_l, mu_r, t = coupling.mu_L, coupling.mu_R, coupling.theta
    return (-s + 0.5 * (mu_l**2 + mu_r**2 - 2.0 * mu_l * mu_r * math.cos(t)) * a_sq * s)


# ---------------------------------------------------------------------------
# Girsanov reweighting diagnostics
# ---------------------------------------------------------------------------

@dataclass
class GirsanovReport:
    """Binned weighted-drift regression and effective sample size."""

    bin_edges: np.ndarray
    predicted: np.ndarray
    estimated: np.ndarray
    z_scores: np.ndarray
    ess: float
    n_paths: int

    @property
    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.z_scores))) if self.z_scores.size else 0.0


def weighted_ks_test(x_weighted, weights, x_plain):
    """Two-sample KS test between a weighted and an unweighted sample.

    Returns (statistic, approximate p-value); the weighted sample enters with
    its effective size (sum w)^2 / sum w^2.
    """
    xw = np.asarray(x_weighted, dtype=float)
    w = np.asarray(weights, dtype=float)
    xp = np.sort(np.asarray(x_plain, dtype=float))
    order = np.argsort(xw)
    xw = xw[order]
    cw = np.cumsum(w[order])
    cw /= cw[-1]
    grid = np.unique(np.concatenate([xw, xp]))
    fw = np.concatenate([[0.0], cw])[np.searchsorted(xw, grid, side="right")]
    fp = np.searchsorted(xp, grid, side="right") / xp.size
    d = float(np.max(np.abs(fw - fp)))
    n1 = float(np.sum(w)) ** 2 / float(np.sum(w**2))
    n2 = float(xp.size)
    n_eff = n1 * n2 / (n1 + n2)
    lam = (math.sqrt(n_eff) + 0.12 + 0.11 / math.sqrt(n_eff)) * d
    return d, float(kstwobign.sf(lam))


def girsanov_drift_check(paths, spec: InsertionSpec, params: Params, tau: float,
                         n_bins: int = 8, min_ess: float = 100.0) -> GirsanovReport:
    """Weighted drift regression along plain reverse SLE paths.

    ``paths`` are DrivingState objects simulated WITHOUT force points.  Each
    path is weighted by M_tau / M_0 built from ``spec``; the weighted mean of
    dW over bins of the predicted drift sum_j Re(-2 sqrt(kappa) a_j/(Z_j - W))
    is compared bin by bin against that prediction.

    Raises ValueError when the effective sample size drops below ``min_ess``.
    """
    charges = spec.charges()
    if any(len(getattr(p, "force_points", [])) for p in paths):
        raise ValueError("paths must be plain reverse SLE (no force points)")
    coefs = np.array([a for a, _ in charges])
    points = np.array([z for _, z in charges], dtype=complex)
    n_bulk = len(spec.merged().bulk)

    mu_all, dw_all, wt_all = [], [], []
    weights = np.empty(len(paths))
    for ip, st in enumerate(paths):
        ev = st.driving
        k_tau = ev.index_of(tau)
        if points.size:
            rec_g = np.empty((k_tau + 1, points.size), dtype=complex)
            rec_gp = np.empty_like(rec_g)
            from .loewner import _flow_core
            _, _, collided, _ = _flow_core(points, ev.driving, 0, k_tau, ev.dt,
                                           record=(rec_g, rec_gp))
            if np.any(collided):
                raise ValueError("an insertion point collided before tau")
            m_tau = martingale_M(ev.driving[k_tau], rec_g[-1], rec_gp[-1], spec, params)
            m_0 = martingale_M(ev.driving[0], points, np.ones_like(points), spec, params)
            weights[ip] = m_tau / m_0
            w_grid = ev.driving[: k_tau + 1]
            pred = np.sum(
                (-2.0 * params.sqrt_kappa * coefs)
                * (1.0 / (rec_g[:-1] - w_grid[:-1, None])).real, axis=1)
        else:
            weights[ip] = 1.0
            w_grid = ev.driving[: k_tau + 1]
            pred = np.zeros(k_tau)
        mu_all.append(pred)
        dw_all.append(np.diff(w_grid))
        wt_all.append(np.full(pred.size, weights[ip]))

    mu = np.concatenate(mu_all)
    dw = np.concatenate(dw_all)
    wt = np.concatenate(wt_all)
    dt = paths[0].driving.dt

    ess = float(np.sum(weights)) ** 2 / float(np.sum(weights**2))
    if ess < min_ess:
        raise ValueError(
            f"effective sample size {ess:.1f} < {min_ess}; "
            "increase the number of paths or decrease tau"
        )

    if np.ptp(mu) == 0.0:
        edges = np.array([mu.min() - 0.5, mu.max() + 0.5])
    else:
        qs = np.linspace(0.0, 1.0, n_bins + 1)
        edges = np.unique(np.quantile(mu, qs))
    idx = np.clip(np.digitize(mu, edges) - 1, 0, len(edges) - 2)
    nb = len(edges) - 1
    predicted = np.zeros(nb)
    estimated = np.zeros(nb)
    z_scores = np.zeros(nb)
    for b in range(nb):
        sel = idx == b
        wb = wt[sel]
        resid = wb * (dw[sel] - mu[sel] * dt)
        denom = math.sqrt(float(np.sum(resid**2)))
        predicted[b] = float(np.sum(wb * mu[sel]) / np.sum(wb))
        estimated[b] = float(np.sum(wb * dw[sel]) / np.sum(wb) / dt)
        z_scores[b] = float(np.sum(resid) / denom) if denom > 0 else 0.0
    return GirsanovReport(bin_edges=edges, predicted=predicted, estimated=estimated,
                          z_scores=z_scores, ess=ess, n_paths=len(paths))
