"""Boundary correlation functions and the degenerate-insertion residual check.

``estimate_F`` evaluates, by Monte Carlo over the Gaussian field plus 1-D
quadrature in the zero-mode variable c, the functional

    F = C * E[ integral e^{(s-Q)c} exp(-e^{gc} A - e^{gc/2} sum mu L) dc ]

where A is the regularized area of the truncated half-plane window, the L are
regularized lengths of the boundary intervals cut by the marked points, s is
the total charge, and C the closed-form insertion normalization.  The domain
is truncated to a half-disk window whose radius is chosen from the decay of
the area and length first-moment densities; a window-shrink diagnostic
reports the sensitivity.

``bpz_residual`` assembles second-order central differences of F on a stencil
around the degenerate insertion into the operator

    (1/b*^2) d_ww + sum_j [Re(1/(w-z_j)) d_xj + Im(1/(w-z_j)) d_yj]
    + sum_k 1/(w-x_k) d_xk + sum_j Re(2 D_aj/(w-z_j)^2) + sum_k D_bk/(w-x_k)^2

with common random numbers across the stencil nodes, so the residual is
estimated per sample and carries a propagated error bar.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .field import Contour, InsertionSpec, green_H, normalization_C
from .gff import ContourField
from .gmc import area_grid
from .observables import delta_weight
from .params import Params
from .sde import make_rng

__all__ = [
    "CorrelationConfig",
    "seiberg_check",
    "FEstimate",
    "estimate_F",
    "estimate_F_many",
    "stencil_labels",
    "stencil_configs",
    "assemble_residual",
    "bpz_residual",
    "bpz_residual_mc",
]


@dataclass(frozen=True)
class CorrelationConfig:
    """Insertion data, boundary cosmological constants, and MC geometry.

    ``boundary`` holds the full charges beta_k (the field coefficient is
    beta_k/2); ``mus[k]`` is the constant on the interval (x_k, x_{k+1}) for
    k != k_star, and the interval containing w is split at w with constants
    (mu_L, mu_R).  ``window`` is the half-disk truncation radius (None picks
    one from the tail decay).
    """

    params: Params
    beta_star: float
    w: float
    mu_L: complex
    mu_R: complex
    bulk: tuple = ()
    boundary: tuple = ()
    delta: float = 0.0
    k_star: int = 0
    mus: tuple = ()
    window: float | None = None

    def __post_init__(self):
        bulk = tuple(sorted(((float(a), complex(z)) for a, z in self.bulk),
                            key=lambda t: (t[1].real, t[1].imag, t[0])))
        boundary = tuple(sorted(((float(b), float(x)) for b, x in self.boundary),
                                key=lambda t: t[1]))
        object.__setattr__(self, "bulk", bulk)
        object.__setattr__(self, "boundary", boundary)
        n = len(boundary)
        mus = tuple(complex(m) for m in self.mus) if self.mus else tuple([0j] * (n + 1))
        if len(mus) != n + 1:
            raise ValueError(f"need {n + 1} interval constants, got {len(mus)}")
        object.__setattr__(self, "mus", mus)
        if not 0 <= self.k_star <= n:
            raise ValueError("k_star out of range")
        xs = [x for _, x in boundary]
        lo = xs[self.k_star - 1] if self.k_star >= 1 else -math.inf
        hi = xs[self.k_star] if self.k_star < n else math.inf
        if not lo < self.w < hi:
            raise ValueError(f"w={self.w} not inside interval {self.k_star}")
        g = self.params.gamma
        if not (math.isclose(self.beta_star, -g / 2.0, rel_tol=1e-9)
                or math.isclose(self.beta_star, -2.0 / g, rel_tol=1e-9)):
            raise ValueError("beta_star must be -gamma/2 or -2/gamma")
        if math.isclose(g, math.sqrt(2.0), rel_tol=1e-9) and \
                math.isclose(self.beta_star, -g / 2.0, rel_tol=1e-9):
            warnings.warn("(gamma, beta_star) = (sqrt(2), -gamma/2) is outside the "
                          "established range of the residual identity", stacklevel=2)
        for m in self.active_mus().values():
            if m.real < -1e-12:
                raise ValueError("boundary constants need Re mu >= 0")

    # -- derived quantities --------------------------------------------------

    def xs(self):
        return [x for _, x in self.boundary]

    def active_mus(self) -> dict:
        out = {("I", k): self.mus[k] for k in range(len(self.boundary) + 1)
               if k != self.k_star}
        out[("L",)] = complex(self.mu_L)
        out[("R",)] = complex(self.mu_R)
        return out

    def insertion_spec(self) -> InsertionSpec:
        bdy = tuple((b / 2.0, x) for b, x in self.boundary) + ((self.beta_star / 2.0, self.w),)
        return InsertionSpec(bulk=self.bulk, boundary=bdy, delta_inf=self.delta / 2.0)

    def total_charge(self) -> float:
        return (sum(a for a, _ in self.bulk) + sum(b / 2.0 for b, _ in self.boundary)
                + self.beta_star / 2.0 + self.delta / 2.0)

    def shift_w(self, dw: float) -> "CorrelationConfig":
        return replace(self, w=self.w + dw)

    def shift_boundary(self, k: int, dx: float) -> "CorrelationConfig":
        bdy = list(self.boundary)
        b, x = bdy[k]
        bdy[k] = (b, x + dx)
        return replace(self, boundary=tuple(bdy))

    def shift_bulk(self, j: int, dz: complex) -> "CorrelationConfig":
        blk = list(self.bulk)
        a, z = blk[j]
        blk[j] = (a, z + dz)
        return replace(self, bulk=tuple(blk))


def seiberg_check(config: CorrelationConfig):
    """Strict charge bounds; returns (ok, diagnostics)."""
    q = config.params.Q
    total = config.total_charge()
    singles = all(a < q for a, _ in config.bulk) and all(b < q for b, _ in config.boundary)
    delta_ok = config.delta < q
    diag = {
        "total_charge": total,
        "total_minus_Q": total - q,
        "charge_bound": total > q,
        "insertion_bounds": singles,
        "delta_bound": delta_ok,
    }
    return bool(diag["charge_bound"] and singles and delta_ok), diag


# ---------------------------------------------------------------------------
# Window geometry and tail selection
# ---------------------------------------------------------------------------

def _tail_exponents(config: CorrelationConfig):
    g = config.params.gamma
    q = config.params.Q
    area_pow = 2.0 * g * g - g * g / 2.0 + g * (config.delta - 2.0 * q) + 1.0
    len_pow = g * g / 2.0 + 0.5 * g * (config.delta - 2.0 * q)
    return area_pow, len_pow


def _needs_length_tail(config: CorrelationConfig) -> bool:
    """True when an unbounded boundary interval carries a nonzero constant."""
    n = len(config.boundary)
    for key, mu in config.active_mus().items():
        if mu == 0:
            continue
        if key == ("L",) and config.k_star == 0:
            return True
        if key == ("R",) and config.k_star == n:
            return True
        if key[0] == "I" and key[1] in (0, n):
            return True
    return False


def _auto_window(config: CorrelationConfig, rel_tail: float = 1e-2) -> float:
    """Radius where the closed-form first-moment tails fall below rel_tail."""
    area_pow, len_pow = _tail_exponents(config)
    check_len = _needs_length_tail(config)
    if area_pow >= -1.0 or (check_len and len_pow >= -1.0):
        raise ValueError(
            "first-moment tails decay too slowly for automatic truncation "
            f"(radial powers {area_pow:.2f}, {len_pow:.2f}); pass window explicitly"
        )
    pts = [abs(z) for _, z in config.bulk] + [abs(x) for _, x in config.boundary]
    pts.append(abs(config.w))
    base = max(1.5, 1.3 * max(pts))
    r = base
    while r < 64.0:
        # tail mass of r^p beyond radius r relative to its scale at base
        ok_a = (r / base) ** (area_pow + 1.0) <= rel_tail
        ok_l = (not check_len) or (r / base) ** (len_pow + 1.0) <= rel_tail
        if ok_a and ok_l:
            return r
        r *= 1.25
    return 64.0


@dataclass
class _WindowGrid:
    centers_bulk: np.ndarray
    cell_area: float
    centers_bdy: np.ndarray
    cell_len: float
    inner_bulk: np.ndarray  # mask of bulk cells in the shrunk window
    inner_bdy: np.ndarray


def _weighted_support(config: CorrelationConfig, R: float):
    """Union of boundary intervals carrying a nonzero constant, within [-R, R]."""
    marks = config.xs()
    n = len(marks)
    lo, hi = math.inf, -math.inf
    for key, mu in config.active_mus().items():
        if mu == 0:
            continue
        if key == ("L",):
            a = marks[config.k_star - 1] if config.k_star >= 1 else -R
            b = config.w
        elif key == ("R",):
            a = config.w
            b = marks[config.k_star] if config.k_star < n else R
        else:
            k = key[1]
            a = marks[k - 1] if k >= 1 else -R
            b = marks[k] if k < n else R
        lo, hi = min(lo, a), max(hi, b)
    if lo > hi:
        return None
    return max(lo, -R), min(hi, R)


def _build_grid(configs, spacing: float) -> _WindowGrid:
    """Shared cell geometry for a family of stencil-related configs."""
    base = configs[0]
    R = base.window if base.window is not None else _auto_window(base)
    centers, cell = area_grid((-R, R, 0.0, R), spacing)
    keep = np.abs(centers) <= R
    centers = centers[keep]
    lo, hi = math.inf, -math.inf
    for cfg in configs:
        sup = _weighted_support(cfg, R)
        if sup is not None:
            lo, hi = min(lo, sup[0]), max(hi, sup[1])
    if lo > hi:
        xs = np.zeros(0)
    else:
        lo = max(lo - spacing, -R)
        hi = min(hi + spacing, R)
        nb = max(1, int(round((hi - lo) / spacing)))
        xs = lo + (hi - lo) * (np.arange(nb) + 0.5) / nb
    inner_bulk = np.abs(centers) <= 0.8 * R
    inner_bdy = np.abs(xs) <= 0.8 * R if xs.size else np.zeros(0, dtype=bool)
    return _WindowGrid(centers_bulk=centers, cell_area=cell, centers_bdy=xs,
                       cell_len=spacing if lo > hi else (hi - lo) / max(1, xs.size),
                       inner_bulk=inner_bulk, inner_bdy=inner_bdy)


def _interval_weights(config: CorrelationConfig, grid: _WindowGrid) -> dict:
    """Fractional overlap of each boundary cell with each weighted interval.

    Fractional weighting keeps the interval masses smooth in the cut
    positions, which the stencil derivatives in x_k and w rely on.
    """
    marks = config.xs()
    n = len(marks)
    lo_edges = grid.centers_bdy - grid.cell_len / 2.0
    hi_edges = grid.centers_bdy + grid.cell_len / 2.0

    def overlap(a, b):
        return np.clip(np.minimum(b, hi_edges) - np.maximum(a, lo_edges),
                       0.0, grid.cell_len) / grid.cell_len

    out = {}
    for key in config.active_mus():
        if key == ("L",):
            a = marks[config.k_star - 1] if config.k_star >= 1 else -math.inf
            b = config.w
        elif key == ("R",):
            a = config.w
            b = marks[config.k_star] if config.k_star < n else math.inf
        else:
            k = key[1]
            a = marks[k - 1] if k >= 1 else -math.inf
            b = marks[k] if k < n else math.inf
        out[key] = overlap(a, b)
    return out


def _profile_terms(config: CorrelationConfig, nodes: np.ndarray) -> np.ndarray:
    """Deterministic c-free profile of the insertion configuration at nodes."""
    spec = config.insertion_spec()
    out = (config.delta / 2.0 - config.params.Q) * 2.0 * np.log(np.maximum(np.abs(nodes), 1.0))
    for a, p in spec.charges():
        out = out + a * green_H(nodes, p)
    return out


def _profile_contour_averages(config: CorrelationConfig, contours, n_nodes: int = 24):
    """Contour averages of the profile; finite even with an insertion inside."""
    if not contours:
        return np.zeros(0)
    nodes = np.stack([c.nodes(n_nodes)[0] for c in contours])
    return _profile_terms(config, nodes).mean(axis=1)


# ---------------------------------------------------------------------------
# The estimator
# ---------------------------------------------------------------------------

@dataclass
class FEstimate:
    """Monte Carlo estimate of the correlation functional."""

    mean: complex
    se: float
    n: int
    seed: int
    per_rung: dict
    window_drift: float
    eps: float

    @property
    def rung_drift(self) -> float:
        vals = [v for _, v in sorted(self.per_rung.items(), reverse=True)]
        if len(vals) < 2 or vals[-1] == 0:
            return 0.0
        return abs(vals[-1] - vals[-2]) / abs(vals[-1])


def _c_integral(s_minus_q: float, gamma: float, area: np.ndarray, mix: np.ndarray,
                n_grid: int = 2048, cutoff: float = 40.0) -> np.ndarray:
    """integral over c of e^{(s-Q)c} exp(-e^{gc} A - e^{gc/2} M) per sample.

    Normalized per sample by u = c + log(A)/gamma so a shared grid covers
    every draw; requires s > Q and Re(M)/sqrt(A) >= 0 (both hold under the
    charge bound and Re mu >= 0).
    """
    if s_minus_q <= 0:
        raise ValueError("total charge must exceed Q")
    u_hi = math.log(cutoff) / gamma
    u_lo = -cutoff / s_minus_q - 5.0
    n = n_grid | 1  # odd node count for Simpson
    u = np.linspace(u_lo, u_hi, n)
    du = u[1] - u[0]
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-2:2] = 2.0
    w *= du / 3.0
    env = np.exp(s_minus_q * u - np.exp(gamma * u))
    half = np.exp(0.5 * gamma * u)
    scaled = mix / np.sqrt(area)
    vals = env * np.exp(-np.multiply.outer(scaled, half))
    out = vals @ w
    return area ** (-(s_minus_q) / gamma) * out


def estimate_F_many(configs, n_samples: int, seed: int, eps_ladder=(0.4, 0.2, 0.1),
                    spacing: float | None = None, keep_samples: bool = False):
    """Estimate F for several configs sharing the same field draws.

    The configs must share geometry (same window, intervals, and k_star
    layout); only insertion positions and charges may differ, which is what
    the stencil needs.  Returns a list of FEstimate, and optionally the
    per-sample values at the finest rung for residual assembly.
    """
    base = configs[0]
    eps_ladder = tuple(sorted(eps_ladder, reverse=True))
    if spacing is None:
        spacing = eps_ladder[-1]
    g = base.params.gamma
    rng = make_rng(seed)
    per_rung = [dict() for _ in configs]
    sample_store = None
    window_drift = [0.0] * len(configs)

    grid = _build_grid(configs, spacing)
    for eps in eps_ladder:
        contours = [Contour(zc, eps) for zc in grid.centers_bulk]
        contours += [Contour(x, eps, "boundary") for x in grid.centers_bdy]
        field = ContourField(contours)
        gvals = field.sample_batch(n_samples, rng)
        nb = grid.centers_bulk.size
        bulk_g = gvals[:, :nb]
        bdy_g = gvals[:, nb:]
        for ic, cfg in enumerate(configs):
            prof_bulk = _profile_contour_averages(cfg, contours[:nb])
            prof_bdy = _profile_contour_averages(cfg, contours[nb:])
            dens = np.exp(g * (bulk_g + prof_bulk))
            area = eps ** (g * g / 2.0) * dens.sum(axis=1) * grid.cell_area
            area_in = eps ** (g * g / 2.0) * (dens[:, grid.inner_bulk]).sum(axis=1) * grid.cell_area
            ldens = np.exp(0.5 * g * (bdy_g + prof_bdy))
            weights = _interval_weights(cfg, grid)
            mix = np.zeros(n_samples, dtype=complex)
            mix_in = np.zeros(n_samples, dtype=complex)
            for key, mu in cfg.active_mus().items():
                if mu == 0:
                    continue
                wv = weights[key]
                lmass = eps ** (g * g / 4.0) * (ldens @ wv) * grid.cell_len
                mix += mu * lmass
                lmass_in = eps ** (g * g / 4.0) * (ldens @ (wv * grid.inner_bdy)) * grid.cell_len
                mix_in += mu * lmass_in
            s_minus_q = cfg.total_charge() - cfg.params.Q
            cnorm = normalization_C(cfg.insertion_spec(), cfg.params)
            vals = cnorm * _c_integral(s_minus_q, g, area, mix)
            per_rung[ic][eps] = complex(vals.mean())
            if eps == eps_ladder[-1]:
                vals_in = cnorm * _c_integral(s_minus_q, g, area_in, mix_in)
                full = complex(vals.mean())
                window_drift[ic] = abs(complex(vals_in.mean()) - full) / abs(full)
                if keep_samples:
                    if sample_store is None:
                        sample_store = np.empty((len(configs), n_samples), dtype=complex)
                    sample_store[ic] = vals

    out = []
    finest = eps_ladder[-1]
    for ic, cfg in enumerate(configs):
        if keep_samples:
            vals = sample_store[ic]
        m = per_rung[ic][finest]
        if keep_samples:
            se = float(np.sqrt(vals.real.var() + vals.imag.var()) / math.sqrt(n_samples))
        else:
            se = float("nan")
        out.append(FEstimate(mean=m, se=se, n=n_samples, seed=seed,
                             per_rung=per_rung[ic], window_drift=window_drift[ic],
                             eps=finest))
    if keep_samples:
        return out, sample_store
    return out


def estimate_F(config: CorrelationConfig, n_samples: int, seed: int,
               eps_ladder=(0.4, 0.2, 0.1), spacing: float | None = None,
               max_window_drift: float = 0.02) -> FEstimate:
    """Monte Carlo value of the correlation functional for one config.

    Requires the strict charge bounds to hold; raises if the window-shrink
    diagnostic indicates the truncation radius dominates the estimate.
    """
    ok, diag = seiberg_check(config)
    if not ok:
        raise ValueError(f"charge bounds violated: {diag}")
    res, samples = estimate_F_many([config], n_samples, seed, eps_ladder, spacing,
                                   keep_samples=True)
    est = res[0]
    if est.window_drift > max_window_drift:
        raise ValueError(
            f"window-shrink drift {est.window_drift:.2%} exceeds "
            f"{max_window_drift:.2%}; enlarge the window"
        )
    return est


# ---------------------------------------------------------------------------
# Stencil machinery
# ---------------------------------------------------------------------------

def stencil_labels(config: CorrelationConfig):
    labels = ["base", "w+", "w-"]
    for j in range(len(config.bulk)):
        labels += [f"z{j}x+", f"z{j}x-", f"z{j}y+", f"z{j}y-"]
    for k in range(len(config.boundary)):
        labels += [f"x{k}+", f"x{k}-"]
    return labels


def stencil_configs(config: CorrelationConfig, h: float):
    """Shifted copies of the config for every stencil node."""
    out = {"base": config, "w+": config.shift_w(h), "w-": config.shift_w(-h)}
    for j in range(len(config.bulk)):
        out[f"z{j}x+"] = config.shift_bulk(j, h)
        out[f"z{j}x-"] = config.shift_bulk(j, -h)
        out[f"z{j}y+"] = config.shift_bulk(j, 1j * h)
        out[f"z{j}y-"] = config.shift_bulk(j, -1j * h)
    for k in range(len(config.boundary)):
        out[f"x{k}+"] = config.shift_boundary(k, h)
        out[f"x{k}-"] = config.shift_boundary(k, -h)
    return out


def assemble_residual(values: dict, config: CorrelationConfig, h: float):
    """Central-difference assembly of the residual operator.

    ``values[label]`` may be scalars or per-sample arrays; the return type
    matches.  Collisions inside the stencil raise ValueError.
    """
    w = config.w
    for _, z in config.bulk:
        if min(abs(z - w), abs(z.real - w)) < 2 * h:
            raise ValueError("stencil too wide: bulk insertion near w")
    for _, x in config.boundary:
        if abs(x - w) < 2 * h:
            raise ValueError("stencil too wide: boundary insertion near w")

    res = (values["w+"] - 2.0 * np.asarray(values["base"]) + values["w-"]) \
        / (h * h * config.beta_star**2)
    for j, (a, z) in enumerate(config.bulk):
        inv = 1.0 / (w - z)
        dx = (values[f"z{j}x+"] - values[f"z{j}x-"]) / (2.0 * h)
        dy = (values[f"z{j}y+"] - values[f"z{j}y-"]) / (2.0 * h)
        res = res + inv.real * dx + inv.imag * dy
        res = res + (2.0 * delta_weight(a, config.params) * inv * inv).real \
            * np.asarray(values["base"])
    for k, (b, x) in enumerate(config.boundary):
        dk = (values[f"x{k}+"] - values[f"x{k}-"]) / (2.0 * h)
        res = res + dk / (w - x)
        res = res + delta_weight(b, config.params) / (w - x) ** 2 \
            * np.asarray(values["base"])
    return res


def bpz_residual(values: dict, config: CorrelationConfig, h: float):
    """Residual from precomputed stencil values of F (scalar path)."""
    return assemble_residual(values, config, h)


def bpz_residual_mc(config: CorrelationConfig, h: float, n_samples: int, seed: int,
                    eps_ladder=(0.4, 0.2, 0.1), spacing: float | None = None):
    """Monte Carlo residual with common random numbers across the stencil.

    Returns (residual, se, report) where the residual is assembled per sample
    and se is its propagated standard error (real and imaginary parts summed
    in quadrature).
    """
    ok, diag = seiberg_check(config)
    if not ok:
        raise ValueError(f"charge bounds violated: {diag}")
    labels = stencil_labels(config)
    cfgs = stencil_configs(config, h)
    ordered = [cfgs[lb] for lb in labels]
    ests, samples = estimate_F_many(ordered, n_samples, seed, eps_ladder, spacing,
                                    keep_samples=True)
    per_label = {lb: samples[i] for i, lb in enumerate(labels)}
    resid = assemble_residual(per_label, config, h)
    mean = complex(resid.mean())
    se = float(math.sqrt(resid.real.var() / n_samples + resid.imag.var() / n_samples))
    report = {
        "estimates": {lb: ests[i].mean for i, lb in enumerate(labels)},
        "rung_drift": ests[0].rung_drift,
        "window_drift": ests[0].window_drift,
        "scale": float(np.mean(np.abs(resid))),
    }
    return mean, se, report
