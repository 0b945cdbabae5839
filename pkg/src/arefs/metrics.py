"""Divergences and transport distances on grid fields and particle clouds.

Total variation follows the unhalved convention ``TV(mu, nu) = int |mu - nu|``,
so it ranges over [0, 2] and Pinsker reads ``TV <= sqrt(2 KL)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment, minimize_scalar
from scipy.special import logsumexp

from .grid import GridField

ABS_CONT_FLOOR = 1e-300
EXACT_MAX = 2048


# -- grid mode ---------------------------------------------------------------------------

def _check_density(rho: GridField):
    if np.any(rho.values < 0):
        raise ValueError("density must be nonnegative")
    m = rho.integral()
    if abs(m - 1.0) > 1e-6:
        raise ValueError(f"density integrates to {m:.8f}, not 1")


def kl_grid(rho: GridField, pi) -> float:
    """``int rho log(rho/pi)``; +inf when rho charges a region where pi vanishes."""
    _check_density(rho)
    p = pi.density(rho.grid.points())
    r = rho.values
    pos = r > 0
    if np.any(pos & (p < ABS_CONT_FLOOR)):
        return math.inf
    val = np.where(pos, r * (np.log(np.where(pos, r, 1.0)) - np.log(np.maximum(p, ABS_CONT_FLOOR))), 0.0)
    return float(val.sum() * rho.grid.cell_area)


def tv_grid(rho: GridField, pi) -> float:
    _check_density(rho)
    p = pi.density(rho.grid.points())
    return float(np.abs(rho.values - p).sum() * rho.grid.cell_area)


# -- particle clouds -------------------------------------------------------------------------

@dataclass
class Cloud:
    positions: np.ndarray
    domain: str = "Rd"          # "Rd" or "T2"
    side: float = 1.0           # torus side

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, float))
        if self.positions.shape[0] == 1 and self.positions.shape[1] > 1 and self.domain == "Rd":
            pass


def _as_cloud(c):
    return c if isinstance(c, Cloud) else Cloud(np.asarray(c, float).reshape(len(c), -1))


def _bin_masses(pi, edges):
    """pi-mass of each histogram cell by 8-point Gauss rule per axis and cell."""
    g, w = np.polynomial.legendre.leggauss(8)
    axes, wts = [], []
    for e in edges:
        a, b = e[:-1, None], e[1:, None]
        axes.append(((a + b) / 2 + (b - a) / 2 * g).ravel())
        wts.append(((b - a) / 2 * w).ravel())
    X, Y = np.meshgrid(axes[0], axes[1], indexing="ij")
    dens = pi.density(np.stack([X, Y], axis=-1)) * np.outer(wts[0], wts[1])
    nb = [len(e) - 1 for e in edges]
    return dens.reshape(nb[0], 8, nb[1], 8).sum(axis=(1, 3))


def _binning(pi, bins, box):
    if pi.is_torus:
        x0, y0, L1, L2 = pi.torus_box
        lo, hi = np.array([x0, y0]), np.array([x0 + L1, y0 + L2])
    elif box is not None:
        lo, hi = np.broadcast_to(np.asarray(box[0], float), (2,)), np.broadcast_to(np.asarray(box[1], float), (2,))
    else:
        lo, hi = pi.box()
    return [np.linspace(lo[k], hi[k], bins + 1) for k in range(2)]


def histogram(cloud, pi, bins=16, box=None):
    """Counts and pi-masses on a bins x bins histogram; off-box mass goes to an extra cell."""
    x = _as_cloud(cloud).positions
    if x.shape[1] != 2:
        raise ValueError("binned estimators are planar")
    edges = _binning(pi, bins, box)
    H, _, _ = np.histogram2d(x[:, 0], x[:, 1], bins=edges)
    mass = _bin_masses(pi, edges)
    outside = len(x) - H.sum()
    out_mass = max(0.0, 1.0 - mass.sum()) if not pi.is_torus else 0.0
    return (np.append(H.ravel(), outside), np.append(mass.ravel(), out_mass))


def kl_empirical(cloud, pi, bins=16, box=None, details=False):
    """Histogram plug-in KL(cloud | pi) minus the ``(B - 1)/(2N)`` first-order bias.

    With ``details=True`` returns ``(value, info)`` where info lists warnings
    (empty bins carrying pi-mass above 10/N, samples in cells pi does not charge).
    """
    counts, mass = histogram(cloud, pi, bins, box)
    N = counts.sum()
    B = bins * bins
    warnings = []
    if N < 100 * B:
        raise ValueError(f"need N >= {100 * B} samples for {bins}x{bins} bins, got {int(N)}")
    phat = counts / N
    empty = (counts == 0) & (mass > 10 / N)
    if empty.any():
        warnings.append(f"{int(empty.sum())} empty bins with pi-mass > 10/N")
    off = (counts > 0) & (mass < ABS_CONT_FLOOR)
    if off.any():
        warnings.append("samples where pi has no mass: absolute continuity fails")
    pos = phat > 0
    terms = phat[pos] * (np.log(phat[pos]) - np.log(np.maximum(mass[pos], ABS_CONT_FLOOR)))
    value = float(terms.sum() - (B - 1) / (2 * N))
    info = {"bias_corrected": True, "bins": B, "N": int(N), "warnings": warnings}
    return (value, info) if details else value


def tv_empirical(cloud, pi, bins=16, box=None) -> float:
    counts, mass = histogram(cloud, pi, bins, box)
    return float(np.abs(counts / counts.sum() - mass).sum())


def _pairwise(a, b, domain, side):
    diff = a[:, None, :] - b[None, :, :]
    if domain == "T2":
        diff = diff - side * np.round(diff / side)
    return np.sqrt(np.sum(diff * diff, axis=-1))


def wasserstein_empirical(cloud_a, cloud_b, p: int = 1, exact_max=EXACT_MAX, directions=128, seed=0,
                          details=False):
    """Empirical W_p between equal-size clouds.

    Exact optimal assignment up to ``exact_max`` points (periodic metric on the
    torus); beyond that the sliced approximation is used and tagged.
    """
    A, B = _as_cloud(cloud_a), _as_cloud(cloud_b)
    if A.domain != B.domain or (A.domain == "T2" and A.side != B.side):
        raise ValueError("clouds live on different domains")
    a, b = A.positions, B.positions
    if a.shape != b.shape:
        raise ValueError("clouds must have the same size and dimension")
    if p not in (1, 2):
        raise ValueError("order p must be 1 or 2")
    n = len(a)
    if n <= exact_max:
        C = _pairwise(a, b, A.domain, A.side) ** p
        r, c = linear_sum_assignment(C)
        val = float(C[r, c].mean() ** (1.0 / p))
        method = "exact-assignment"
    else:
        rng = np.random.Generator(np.random.Philox(seed))
        d = a.shape[1]
        dirs = rng.standard_normal((directions, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pa = np.sort(a @ dirs.T, axis=0)
        pb = np.sort(b @ dirs.T, axis=0)
        val = float(np.mean(np.abs(pa - pb) ** p) ** (1.0 / p))
        method = "sliced-approximate" + ("-nonperiodic" if A.domain == "T2" else "")
    return (val, {"method": method}) if details else val


# -- functional inequalities -----------------------------------------------------------------

def _log_moment(U, alpha, R, n=801):
    """``log int exp(alpha|x|^2 - U) dx`` on [-R, R]^2 (trapezoid in log space)."""
    ax = np.linspace(-R, R, n)
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    pts = np.stack([X, Y], axis=-1)
    w = np.ones(n)
    w[0] = w[-1] = 0.5
    lw = np.log(np.outer(w, w) * (2 * R / (n - 1)) ** 2)
    return float(logsumexp(alpha * (X * X + Y * Y) - U.value(pts) + lw))


def ckp_constant(pi, alphas=None, radius=None, tol=1e-6):
    """``2 inf_alpha sqrt((1 + log int e^{alpha|x|^2} dpi) / (2 alpha))`` and the minimiser.

    Convergence of the exponential moment is judged by doubling the
    integration box; a moment that keeps growing counts as divergent.  Returns
    ``(inf, None)`` with the heavy-tail sentinel when every alpha diverges.
    """
    from .targets import heavy_tail
    U = pi.potential
    if pi.is_torus:
        raise ValueError("the weighted CKP constant is for full-space targets")
    if U.dim != 2:
        raise ValueError("moment quadrature is planar")
    if heavy_tail(U):
        return math.inf, None
    lo, hi = pi.box()
    R = radius or float(np.max(np.abs(np.concatenate([lo, hi]))))
    logZ = pi.log_normalizer
    alphas = np.geomspace(1e-3, 2.0, 40) if alphas is None else np.asarray(alphas, float)

    def moment(a):
        # a convergent moment settles once the box clears its effective width;
        # a divergent one keeps growing with every doubling
        prev = _log_moment(U, a, R, n=401)
        for k, n in ((2, 801), (4, 1601)):
            cur = _log_moment(U, a, k * R, n=n)
            if np.isfinite(cur) and abs(cur - prev) <= tol * max(1.0, abs(cur)):
                return cur - logZ
            prev = cur
        return math.inf

    def objective(a):
        m = moment(a)
        return math.inf if not math.isfinite(m) else 2 * math.sqrt((1 + m) / (2 * a))

    vals = np.array([objective(a) for a in alphas])
    if not np.isfinite(vals).any():
        return math.inf, None
    k = int(np.argmin(vals))
    if 0 < k < len(alphas) - 1 and np.isfinite(vals[k + 1]):
        res = minimize_scalar(objective, bracket=(alphas[k - 1], alphas[k], alphas[k + 1]),
                              method="golden", tol=1e-8)
        if res.fun <= vals[k]:
            return float(res.fun), float(res.x)
    return float(vals[k]), float(alphas[k])


def talagrand_check(kl: float, w2: float, lsi_lambda: float, tol: float = 0.0):
    if lsi_lambda <= 0:
        raise ValueError("log-Sobolev constant must be positive")
    slack = math.sqrt(2 * max(kl, 0.0) / lsi_lambda) - w2
    return {"slack": slack, "pass": bool(slack >= -tol), "tol": tol}


@dataclass
class DistanceReport:
    kl: float
    tv: float
    w1: Optional[float] = None
    w2: Optional[float] = None
    talagrand_slack: Optional[float] = None
    ckp: Optional[float] = None
    t: Optional[float] = None
    methods: dict = field(default_factory=dict)

    @property
    def pinsker_slack(self):
        return math.sqrt(2 * max(self.kl, 0.0)) - self.tv

    def check(self):
        ok = self.kl >= -1e-12 and 0 <= self.tv <= 2 + 1e-12 and self.pinsker_slack >= -1e-6
        if self.w1 is not None and self.w2 is not None:
            ok &= self.w1 <= self.w2 + 1e-9
        return bool(ok)

    def to_dict(self):
        d = {"kl": self.kl, "tv": self.tv, "w1": self.w1, "w2": self.w2,
             "pinsker_slack": self.pinsker_slack, "talagrand_slack": self.talagrand_slack,
             "ckp_constant": self.ckp, "methods": self.methods}
        if self.t is not None:
            d["t"] = self.t
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def csv_row(self):
        cells = [self.t, self.kl, self.tv, self.w1, self.w2, self.pinsker_slack, self.talagrand_slack]
        return ",".join("" if c is None else repr(float(c)) for c in cells)


CSV_HEADER = "t,kl,tv,w1,w2,pinsker_slack,talagrand_slack"


def reports_csv(reports) -> str:
    return CSV_HEADER + "\n" + "\n".join(r.csv_row() for r in reports) + "\n"
