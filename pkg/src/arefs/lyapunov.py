"""Lyapunov certificates ``W = M exp(delta U)`` for full-space targets.

With ``L0 = Lap - gradU . grad`` one has ``L0 W = -F W`` where
``F = (delta - delta^2)|gradU|^2 - delta LapU``.  Outside a ball of radius r
the drift condition ``L0 W <= -lambda W`` holds with ``lambda = inf_{|x|>=r} F``,
and inside the ball the excess is absorbed by the constant b.

W grows like ``exp(delta U)`` and overflows quickly, so b and the drift
residuals are carried in log space and reported relative to ``max W``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .targets import Potential, confining_report, shell_infimum

B_INFLATION = 1.05


def lyapunov_rate(U: Potential, delta: float, x):
    """``F(x) = (delta - delta^2)|gradU|^2 - delta LapU``."""
    _, g, lap = U.evaluate(x)
    return (delta - delta * delta) * np.sum(g * g, axis=-1) - delta * lap


def _analytic_lambda(U: Potential, delta: float, r: float):
    """Closed-form ``inf_{|x|>=r} F`` for centred Gaussians, else None."""
    if U.family != "gaussian":
        return None
    d = U.dim
    mean = np.asarray(U.parameters[:d])
    var = np.asarray(U.parameters[d:])
    if np.any(mean != 0):
        return None
    # |gradU|^2 = sum x_k^2/var_k^2 is smallest along the widest axis
    return (delta - delta ** 2) * r * r / float(var.max()) ** 2 - delta * float(np.sum(1 / var))


def _ball_grid(d, r, per_axis):
    axes = [np.linspace(-r, r, per_axis)] * d
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    return pts[np.sum(pts * pts, axis=1) <= r * r]


@dataclass
class LyapunovCertificate:
    potential: Potential
    delta: float
    log_M: float
    radii: List[float]
    lambdas: List[float]
    log_b: List[float]  # log of b_n (-inf when b_n = 0)
    methods: List[str] = field(default_factory=list)

    @property
    def M(self):
        return math.exp(self.log_M)

    @property
    def b(self):
        return [math.exp(lb) if lb > -math.inf else 0.0 for lb in self.log_b]

    def log_W(self, x):
        return self.log_M + self.delta * self.potential.value(x)

    def F(self, x):
        return lyapunov_rate(self.potential, self.delta, x)

    def generator_W(self, x):
        """``(L0 W)/W`` assembled from the derivatives of W (independent of F)."""
        _, g, lap = self.potential.evaluate(x)
        d = self.delta
        grad_sq = np.sum(g * g, axis=-1)
        lapW = d * lap + d * d * grad_sq   # Lap W / W
        drift = d * grad_sq                # gradU . grad W / W
        return lapW - drift

    def to_dict(self):
        return {"delta": self.delta, "M": self.M,
                "entries": [{"r": r, "lambda": lam, "b": b}
                            for r, lam, b in zip(self.radii, self.lambdas, self.b)],
                "potential": self.potential.to_dict()}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def build_certificate(U: Potential, delta: float = 0.5, radii=(2.0, 4.0, 6.0), per_axis=401,
                      n_dirs=512, analytic=True) -> LyapunovCertificate:
    """Certificate ``W = M exp(delta U)`` with ``lambda_n = inf_{|x|>=r_n} F``.

    ``b_n`` is the sampled sup over the ball of ``L0 W + lambda_n W``, inflated
    by 5%; M makes ``min W = 1`` over the sampled region.
    """
    if U.domain.is_torus:
        raise ValueError("certificates are built for full-space targets")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    radii = [float(r) for r in radii]
    if not confining_report(U, radii)["satisfied"]:
        raise ValueError("the confining condition fails on the supplied radii")
    d = U.dim
    rmax = max(radii)
    lams, methods = [], []
    for r in radii:
        lam = _analytic_lambda(U, delta, r) if analytic else None
        if lam is None:
            outer = max(3 * r, r + 10.0)
            lam, _ = shell_infimum(lambda p: lyapunov_rate(U, delta, p), d, r, outer, n_dirs=n_dirs)
            # the sampled shell is finite; F must keep growing past it
            far, _ = shell_infimum(lambda p: lyapunov_rate(U, delta, p), d, outer, 2 * outer,
                                   n_radii=8, n_dirs=n_dirs)
            if far < lam:
                raise ValueError(f"F is not eventually increasing beyond r={outer:g}")
            methods.append("shell")
        else:
            methods.append("analytic")
        lams.append(float(lam))
    if lams[-1] <= 0:
        raise ValueError("F is not eventually positive; no Lyapunov function of this form")
    if any(b < a - 1e-12 for a, b in zip(lams, lams[1:])):
        raise ValueError("lambda_n is not monotone in r_n")
    pts = _ball_grid(d, rmax, per_axis if d <= 2 else 41)
    Uv = U.value(pts)
    log_M = -delta * float(Uv.min())
    Fv = lyapunov_rate(U, delta, pts)
    rr = np.sqrt(np.sum(pts * pts, axis=1))
    log_b = []
    for r, lam in zip(radii, lams):
        inside = (rr <= r) & (lam - Fv > 0)
        if inside.any():
            vals = log_M + delta * Uv[inside] + np.log(lam - Fv[inside])
            log_b.append(float(vals.max()) + math.log(B_INFLATION))
        else:
            log_b.append(-math.inf)
    log_b = list(np.maximum.accumulate(log_b))
    return LyapunovCertificate(U, float(delta), log_M, radii, lams, [float(x) for x in log_b], methods)


def verify_drift(cert: LyapunovCertificate, U: Optional[Potential] = None, box=(-10.0, 10.0),
                 resolution=512, lambdas=None):
    """Max over a grid of ``(L0 W + lambda_n W - b_n 1_B) / max W`` for every n."""
    U = U or cert.potential
    lo, hi = float(box[0]), float(box[1])
    rmax = max(cert.radii)
    if min(-lo, hi) < 1.5 * rmax:
        raise ValueError(f"box must cover B(0, {1.5 * rmax:g})")
    if U.dim != 2:
        raise ValueError("drift verification runs on planar grids")
    ax = np.linspace(lo, hi, resolution)
    pts = np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1)
    logW = cert.log_M + cert.delta * U.value(pts)
    logWmax = float(logW.max())
    scaled = np.exp(logW - logWmax)
    gen = cert.generator_W(pts)
    rr = np.sqrt(np.sum(pts * pts, axis=-1))
    lambdas = cert.lambdas if lambdas is None else lambdas
    rows = []
    for r, lam, lb in zip(cert.radii, lambdas, cert.log_b):
        res = scaled * (gen + lam)
        b_rel = math.exp(lb - logWmax) if lb > -math.inf else 0.0
        res = res - b_rel * (rr <= r)
        k = np.unravel_index(np.argmax(res), res.shape)
        worst = float(res[k])
        rows.append({"r": r, "lambda": lam, "b": math.exp(lb) if lb > -math.inf else 0.0,
                     "max_residual": worst, "argmax": pts[k].tolist(),
                     "pass": bool(worst <= 1e-8)})
    return {"rows": rows, "pass": all(r["pass"] for r in rows), "log_max_W": logWmax}


def drift_csv(report) -> str:
    lines = ["r,lambda,b,max_residual,pass"]
    for r in report["rows"]:
        lines.append(f"{r['r']!r},{r['lambda']!r},{r['b']!r},{r['max_residual']!r},{str(r['pass']).lower()}")
    return "\n".join(lines) + "\n"


def certificate_identity(cert: LyapunovCertificate, pts):
    """Relative size of ``L0 W + F W`` (as multiples of W) at the given points."""
    gen = cert.generator_W(pts)
    F = cert.F(pts)
    return float(np.max(np.abs(gen + F) / np.maximum(1.0, np.abs(F))))


# -- tail Poincare trials ------------------------------------------------------------------

def _smooth_bump(t):
    """C^inf bump on (0, 1) with value and derivative."""
    t = np.asarray(t, float)
    inside = (t > 0) & (t < 1)
    s = np.where(inside, t, 0.5)
    a = 1.0 / (s * (1 - s))
    val = np.where(inside, np.exp(4.0 - a), 0.0)
    dval = np.where(inside, val * (1 - 2 * s) / (s * (1 - s)) ** 2, 0.0)
    return val, dval


class AnnularTrial:
    """``phi(x) = bump(|x|) * (c0 + sum_k a_k cos(w_k . x + p_k))``."""

    def __init__(self, r_in, r_out, c0, amps, freqs, phases):
        self.r_in, self.r_out = r_in, r_out
        self.c0 = c0
        self.amps = np.asarray(amps, float)
        self.freqs = np.asarray(freqs, float).reshape(-1, 2)
        self.phases = np.asarray(phases, float)

    def __call__(self, x):
        r = np.sqrt(np.sum(x * x, axis=-1))
        t = (r - self.r_in) / (self.r_out - self.r_in)
        b, db = _smooth_bump(t)
        db = db / (self.r_out - self.r_in)
        arg = x @ self.freqs.T + self.phases
        S = self.c0 + np.cos(arg) @ self.amps
        gS = -(np.sin(arg) * self.amps) @ self.freqs
        unit = x / np.maximum(r, 1e-300)[..., None]
        grad = (db * S)[..., None] * unit + b[..., None] * gS
        return b * S, grad


def _polar_quadrature(r_in, r_out, nr=160, nt=256):
    g, w = np.polynomial.legendre.leggauss(nr)
    r = r_in + (g + 1) * (r_out - r_in) / 2
    wr = w * (r_out - r_in) / 2 * r
    th = 2 * np.pi * np.arange(nt) / nt
    pts = np.stack([r[:, None] * np.cos(th), r[:, None] * np.sin(th)], axis=-1)
    wts = wr[:, None] * np.full(nt, 2 * np.pi / nt)
    return pts.reshape(-1, 2), wts.ravel()


def tail_poincare_check(cert: LyapunovCertificate, pi=None, n_index=0, trials=200, seed=0,
                        r_max=None, max_freq=3.0, extra_trials: Optional[List[Callable]] = None):
    """Rayleigh quotients of random trial functions supported in ``r_n <= |x| <= r_max``.

    Every quotient must be at least ``lambda_n``.  Also reports the minimal
    quotient over the span of all trials (generalised eigenproblem).
    """
    U = cert.potential if pi is None else pi.potential
    if U.dim != 2:
        raise ValueError("tail trials use planar polar quadrature")
    r_n = cert.radii[n_index]
    lam = cert.lambdas[n_index]
    r_max = r_max or r_n + 3.0
    rng = np.random.Generator(np.random.Philox(seed))
    fns = [AnnularTrial(r_n, r_max, 1.0, [], np.zeros((0, 2)), [])]
    while len(fns) < trials:
        k = int(rng.integers(1, 6))
        fns.append(AnnularTrial(r_n, r_max, float(rng.normal()), rng.normal(size=k),
                                rng.uniform(-max_freq, max_freq, size=(k, 2)),
                                rng.uniform(0, 2 * np.pi, size=k)))
    fns += list(extra_trials or [])
    # quadrature covers the whole disc out to r_max so leaks into the ball are visible
    pin, win = _polar_quadrature(1e-9, r_n, nr=80)
    pout, wout = _polar_quadrature(r_n, r_max)
    ulog_in = -U.value(pin)
    ulog = -U.value(pout)
    shift = float(ulog.max())
    wts = wout * np.exp(ulog - shift)
    wts_in = win * np.exp(ulog_in - shift)
    vals, grads, quot = [], [], []
    discarded = 0
    for f in fns:
        phi, gphi = f(pout)
        phi_in, _ = f(pin)
        mass = float(np.sum(phi * phi * wts))
        if mass == 0 or float(np.sum(phi_in ** 2 * wts_in)) > 1e-12 * mass:
            discarded += 1
            continue
        scale = 1 / math.sqrt(mass)
        phi, gphi = phi * scale, gphi * scale
        vals.append(phi)
        grads.append(gphi)
        quot.append(float(np.sum(np.sum(gphi * gphi, axis=-1) * wts)))
    V = np.array(vals)
    Gx = np.array([g[:, 0] for g in grads])
    Gy = np.array([g[:, 1] for g in grads])
    Mm = (V * wts) @ V.T
    Dm = (Gx * wts) @ Gx.T + (Gy * wts) @ Gy.T
    # restrict to the numerically independent part of the span
    ev, evec = linalg.eigh(Mm)
    keep = ev > 1e-10 * ev.max()
    T = evec[:, keep] / np.sqrt(ev[keep])
    span_min = float(linalg.eigvalsh(T.T @ Dm @ T)[0])
    qmin = float(min(quot))
    return {"r": r_n, "lambda": lam, "trials": len(quot), "discarded": discarded,
            "min_quotient": qmin, "span_min_quotient": span_min,
            "pass": bool(qmin >= lam - 1e-6 and span_min >= lam - 1e-6),
            "quotients": quot}
