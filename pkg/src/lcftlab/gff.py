"""Two samplers for the free-boundary Gaussian field on the half-plane.

``StripGFF`` works in logarithmic coordinates, where the half-plane field
splits into independent sectors: the radial average, an exactly-sampled
variance-2 Brownian path pinned at |z| = 1, and the lateral sector, a
truncated cosine eigenfunction expansion.  The radial sector carries the
entire pairing with the unit-half-circle measure, so the normalization
"(field, m) = 0" holds by construction, and truncation error lives only in
the lateral modes.

``ContourField`` samples the joint Gaussian vector of circle averages over a
fixed family of contours from its exact covariance matrix, assembled
semi-analytically in :func:`contour_covariance`.  It cross-validates the mode
sampler and drives the regularized-measure estimates, where exact covariance
at every radius matters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.integrate import quad

from .field import Contour

__all__ = [
    "StripGFF",
    "FieldSample",
    "ContourField",
    "contour_covariance",
    "contour_variance",
]


# ---------------------------------------------------------------------------
# Mode sampler
# ---------------------------------------------------------------------------

class StripGFF:
    """Half-plane field sampler in log coordinates.

    Parameters
    ----------
    half_length : float
        Truncation L of the log-coordinate window [-L, L]; the field is
        usable for e^-L << |z| << e^L.
    n_modes : int
        Number of lateral eigenfunctions, taken in order of increasing
        frequency.
    x_step : float
        Grid step of the radial Brownian path.
    """

    def __init__(self, half_length: float = 4.0, n_modes: int = 2048, x_step: float = 0.005):
        self.L = float(half_length)
        self.n_modes = int(n_modes)
        n_half = int(round(self.L / x_step))
        self.xs = np.linspace(-self.L, self.L, 2 * n_half + 1)
        self.x_step = self.L / n_half
        self.i_zero = n_half

        # lateral modes (p >= 0, j >= 1) sorted by eigenvalue
        j_max = max(8, int(math.sqrt(self.n_modes)) + 8)
        p_max = max(8, int(math.sqrt(self.n_modes) * 2 * self.L / math.pi) + 8)
        while True:
            p = np.arange(p_max + 1)
            j = np.arange(1, j_max + 1)
            lam = (p[:, None] * math.pi / (2 * self.L)) ** 2 + j[None, :] ** 2.0
            order = np.argsort(lam.ravel(), kind="stable")
            if order.size >= self.n_modes:
                lam_cut = lam.ravel()[order[self.n_modes - 1]]
                if (p_max * math.pi / (2 * self.L)) ** 2 > lam_cut and j_max**2 > lam_cut:
                    break
            p_max *= 2
            j_max *= 2
        keep = order[: self.n_modes]
        self.mode_p = (keep // j_max).astype(int)
        self.mode_j = (keep % j_max + 1).astype(int)
        self.mode_lam = lam.ravel()[keep]
        self.mode_scale = np.sqrt(2.0 * math.pi / self.mode_lam)
        self._nx = np.where(self.mode_p == 0, 1.0 / math.sqrt(2 * self.L),
                            1.0 / math.sqrt(self.L))
        self._ny = math.sqrt(2.0 / math.pi)

    # -- geometry -----------------------------------------------------------

    def strip_coords(self, z):
        z = np.asarray(z, dtype=complex)
        r = np.abs(z)
        if np.any(r == 0):
            raise ValueError("field undefined at the origin")
        x = np.log(r)
        if np.any(np.abs(x) > self.L):
            raise ValueError("point outside the sampler window; increase half_length")
        return x, np.angle(z)

    def mode_matrix(self, z):
        """Normalized lateral eigenfunctions at the given half-plane points."""
        x, y = self.strip_coords(z)
        X = np.cos(np.multiply.outer(x + self.L, self.mode_p * math.pi / (2 * self.L)))
        Y = np.cos(np.multiply.outer(y, self.mode_j.astype(float)))
        return X * Y * (self._nx * self._ny)

    def radial_weights(self, z):
        """Linear-interpolation indices and fractions onto the radial grid."""
        x, _ = self.strip_coords(z)
        t = (x + self.L) / self.x_step
        idx = np.clip(t.astype(int), 0, self.xs.size - 2)
        frac = t - idx
        return idx, frac

    # -- sampling -----------------------------------------------------------

    def sample_radial(self, rng, n: int = 1):
        """Pinned variance-2 Brownian paths on the radial grid, shape (n, n_x)."""
        sigma = math.sqrt(2.0 * self.x_step)
        n_right = self.xs.size - 1 - self.i_zero
        n_left = self.i_zero
        right = np.cumsum(sigma * rng.standard_normal((n, n_right)), axis=1)
        left = np.cumsum(sigma * rng.standard_normal((n, n_left)), axis=1)[:, ::-1]
        zero = np.zeros((n, 1))
        return np.concatenate([left, zero, right], axis=1)

    def sample_coeffs(self, rng, n: int = 1):
        """Lateral coefficients with their 2 pi / lambda variances, shape (n, n_modes)."""
        return rng.standard_normal((n, self.n_modes)) * self.mode_scale

    def sample(self, rng) -> "FieldSample":
        return FieldSample(
            sampler=self,
            radial=self.sample_radial(rng, 1)[0],
            coeffs=self.sample_coeffs(rng, 1)[0],
        )

    # -- pairing machinery ---------------------------------------------------

    def pairing_vectors(self, nodes, wv):
        """Vectors so that (h, f) = radial @ vec_x + coeffs @ vec_mode.

        ``nodes`` are quadrature nodes in H and ``wv`` the products of
        quadrature weights and f values at those nodes.
        """
        nodes = np.asarray(nodes, dtype=complex).ravel()
        wv = np.asarray(wv, dtype=float).ravel()
        vec_mode = self.mode_matrix(nodes).T @ wv
        idx, frac = self.radial_weights(nodes)
        vec_x = np.zeros(self.xs.size)
        np.add.at(vec_x, idx, wv * (1.0 - frac))
        np.add.at(vec_x, idx + 1, wv * frac)
        return vec_x, vec_mode

    def pair_batch(self, radial, coeffs, vec_x, vec_mode):
        return radial @ vec_x + coeffs @ vec_mode

    def radial_kernel(self) -> np.ndarray:
        """Covariance of the pinned radial path at the grid points."""
        ax = np.abs(self.xs)
        same = np.sign(self.xs)[:, None] == np.sign(self.xs)[None, :]
        return 2.0 * np.minimum(ax[:, None], ax[None, :]) * same

    def pair_variance(self, vec_x, vec_mode) -> float:
        """Exact variance of the pairing under the truncated field."""
        return float(vec_x @ self.radial_kernel() @ vec_x
                     + np.sum((self.mode_scale * vec_mode) ** 2))


@dataclass
class FieldSample:
    """One field draw plus an optional deterministic profile and constant."""

    sampler: StripGFF
    radial: np.ndarray
    coeffs: np.ndarray
    profile: object = None
    c: float = 0.0

    def gaussian_at(self, z):
        z = np.asarray(z, dtype=complex)
        flat = z.ravel()
        idx, frac = self.sampler.radial_weights(flat)
        vals = self.radial[idx] * (1.0 - frac) + self.radial[idx + 1] * frac
        vals = vals + self.sampler.mode_matrix(flat) @ self.coeffs
        return vals.reshape(z.shape)

    def evaluate(self, z):
        out = self.gaussian_at(z)
        if self.profile is not None:
            out = out + self.profile(np.asarray(z, dtype=complex))
        return out + self.c

    def pair(self, nodes, wv) -> float:
        """Quadrature pairing of the full field against weighted values wv."""
        vals = self.evaluate(nodes)
        return float(np.sum(vals * wv))

    def circle_average(self, z, eps: float, n_nodes: int = 64) -> float:
        """Average of the field over the admissible circle around z."""
        kind = "boundary" if abs(complex(z).imag) == 0 else "bulk"
        contour = Contour(center=complex(z), eps=eps, kind=kind)
        u, w = contour.nodes(n_nodes)
        return float(np.sum(self.evaluate(u) * w))

    def shifted(self, dc: float) -> "FieldSample":
        return replace(self, c=self.c + dc)

    def with_profile(self, profile) -> "FieldSample":
        return replace(self, profile=profile)


# ---------------------------------------------------------------------------
# Exact covariance of circle averages
# ---------------------------------------------------------------------------
#
# Averages of the pair kernel -log|u-v| - log|u-conj(v)| over circles reduce
# to means of log max(|u - a|, s): the average of log|u - a| over a full
# circle of radius r about c equals log max(|c - a|, r) for every a, and a
# boundary half-circle plus its reflection is a full circle, collapsing both
# kernel terms into -2 log max(|u - x|, s).  Only partial arcs (bulk circles
# cut by the real axis) fall back to node quadrature; the integrand
# log max(., s) is bounded, so those node sums are never singular.

_K_NODES = 96


def _arc_self_const(arc_len: float) -> float:
    """Mean of -log(2|sin((a-b)/2)|) over a uniform arc of angle length L."""
    if arc_len <= 0:
        return 0.0

    def f(s):
        return (arc_len - s) * math.log(2.0 * abs(math.sin(s / 2.0)))

    val, _ = quad(f, 0.0, arc_len, limit=200)
    return -2.0 * val / arc_len**2


def _tplus(contour: Contour) -> float:
    """avg of 2 log|u|_+ over the contour."""
    c, r = contour.center, contour.eps
    if contour.is_full_circle or contour.kind == "boundary":
        d = abs(c)
        if d - r >= 1.0:
            return 2.0 * math.log(d)
        if d + r <= 1.0:
            return 0.0
    u, w = contour.nodes(256)
    return float(np.sum(2.0 * np.log(np.maximum(np.abs(u), 1.0)) * w))


def _pair_partial_self(ci: Contour, nodes: np.ndarray) -> float:
    """Pair-kernel average of an awkward arc against itself."""
    a, b = ci.angle_window()
    term1 = -math.log(ci.eps) + _arc_self_const(b - a)
    dubar = np.maximum(np.abs(nodes[:, None] - np.conj(nodes)[None, :]), 1e-14)
    return term1 - float(np.log(dubar).mean())


def _pair_partial_batch(nodes_i: np.ndarray, nodes_j: np.ndarray) -> np.ndarray:
    """Node averages of the pair kernel for stacked awkward pairs.

    ``nodes_i`` and ``nodes_j`` have shape (n_pairs, K); arcs may touch, the
    kernel singularity is integrable and clipped.
    """
    duv = np.maximum(np.abs(nodes_i[:, :, None] - nodes_j[:, None, :]), 1e-14)
    dbar = np.maximum(np.abs(nodes_i[:, :, None] - np.conj(nodes_j)[:, None, :]), 1e-14)
    return -(np.log(duv) + np.log(dbar)).mean(axis=(1, 2))


def contour_covariance(contours) -> np.ndarray:
    """Exact covariance matrix of contour averages of the normalized field.

    Entry (i, j) is the double average of G_H over contour_i x contour_j,
    built from closed-form circle means wherever the kernel is smooth and
    node quadrature on the geometrically awkward pairs.
    """
    contours = list(contours)
    n = len(contours)
    centers = np.array([c.center for c in contours], dtype=complex)
    radii = np.array([c.eps for c in contours])
    nice = np.array([c.is_full_circle or c.kind == "boundary" for c in contours])
    is_bdy = np.array([c.kind == "boundary" for c in contours])
    tplus = np.array([_tplus(c) for c in contours])

    node_cache = np.empty((n, _K_NODES), dtype=complex)
    for i, c in enumerate(contours):
        node_cache[i] = c.nodes(_K_NODES)[0]

    iu, ju = np.triu_indices(n)
    # orient each pair so the inner contour (jn) is nice when possible
    swap = ~nice[ju] & nice[iu]
    io = np.where(swap, ju, iu)
    jn = np.where(swap, iu, ju)
    pair_vals = np.zeros(iu.size)
    awkward = ~nice[jn]

    def term_means(io_t, a_t, s_t):
        """avg over contour io of -log max(|u - a|, s), exact where possible."""
        d = np.abs(centers[io_t] - a_t)
        r = radii[io_t]
        lo = np.abs(d - r)
        hi = d + r
        can = nice[io_t]
        exact_out = can & (lo >= s_t)
        exact_in = can & (hi <= s_t)
        val = np.where(exact_out, -np.log(np.maximum(d, r)),
                       np.where(exact_in, -np.log(s_t), np.nan))
        need = np.isnan(val)
        if np.any(need):
            u = node_cache[io_t[need]]
            dm = np.maximum(np.abs(u - a_t[need, None]), s_t[need, None])
            val[need] = -np.log(dm).mean(axis=1)
        return val

    ok = ~awkward
    if np.any(ok):
        io_o, jn_o = io[ok], jn[ok]
        vals = np.zeros(io_o.size)
        bdy = is_bdy[jn_o]
        if np.any(bdy):
            vals[bdy] = 2.0 * term_means(io_o[bdy], centers[jn_o[bdy]], radii[jn_o[bdy]])
        blk = ~bdy
        if np.any(blk):
            vals[blk] = (term_means(io_o[blk], centers[jn_o[blk]], radii[jn_o[blk]])
                         + term_means(io_o[blk], np.conj(centers[jn_o[blk]]), radii[jn_o[blk]]))
        pair_vals[ok] = vals

    awk = np.flatnonzero(awkward)
    if awk.size:
        diag = io[awk] == jn[awk]
        for k in awk[diag]:
            pair_vals[k] = _pair_partial_self(contours[io[k]], node_cache[io[k]])
        off = awk[~diag]
        chunk = max(1, (1 << 22) // (_K_NODES * _K_NODES))
        for s in range(0, off.size, chunk):
            sl = off[s:s + chunk]
            pair_vals[sl] = _pair_partial_batch(node_cache[io[sl]], node_cache[jn[sl]])

    sigma = np.zeros((n, n))
    sigma[iu, ju] = pair_vals
    sigma[ju, iu] = pair_vals
    sigma += tplus[:, None] + tplus[None, :]
    return sigma


def contour_variance(contour: Contour) -> float:
    """Variance of the field average over a single contour, by quadrature."""
    return float(contour_covariance([contour])[0, 0])


class ContourField:
    """Gaussian sampler for field averages over a fixed contour family."""

    def __init__(self, contours):
        self.contours = list(contours)
        self.cov = contour_covariance(self.contours)
        n = self.cov.shape[0]
        jitter = 1e-10 * float(np.trace(self.cov)) / max(n, 1)
        try:
            self._factor = np.linalg.cholesky(self.cov + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            # quadrature noise can push near-null directions slightly negative
            w, v = np.linalg.eigh(self.cov)
            floor = -1e-4 * max(float(w[-1]), 1.0)
            if float(w[0]) < floor:
                raise ValueError(
                    f"contour covariance far from PSD (min eigenvalue {w[0]:.3e})"
                )
            self._factor = v * np.sqrt(np.clip(w, 0.0, None))[None, :]

    @property
    def variances(self) -> np.ndarray:
        return np.diag(self.cov).copy()

    def sample_batch(self, n: int, rng) -> np.ndarray:
        """n joint draws of all contour averages, shape (n, n_contours)."""
        return rng.standard_normal((n, len(self.contours))) @ self._factor.T
