"""Marginal/conditional CDF machinery for periodic 2D densities.

Densities are sampled at 8-point Gauss-Legendre nodes on uniform panels and
represented panel-wise by their degree-7 Legendre interpolants.  CDFs are the
exact integrals of those interpolants, so tabulated maps are accurate far
beyond the output grid spacing; inverse CDFs use a bracketed Newton iteration
inside the panel that contains the root.
"""

from __future__ import annotations

import numpy as np
from numpy.polynomial import legendre as leg

_GX, _GW = np.polynomial.legendre.leggauss(8)
_GX01 = 0.5 * (_GX + 1.0)
_GW01 = 0.5 * _GW
# values at Gauss nodes -> Legendre coefficients on [-1, 1]
_VAND = leg.legvander(_GX, 7)
_TO_COEF = (_VAND * _GW[:, None]).T * ((2 * np.arange(8) + 1) / 2.0)[:, None]


class PanelCDF:
    """Piecewise-polynomial density on uniform panels with batched CDF queries.

    ``vals`` has shape ``(..., P, 8)``: density at the Gauss nodes of each of
    the P panels of ``[a, a+L]`` (leading axes are independent batches).
    """

    def __init__(self, a, L, vals):
        self.a = float(a)
        self.L = float(L)
        self.P = vals.shape[-2]
        self.w = self.L / self.P
        self.coef = np.einsum("kg,...pg->...pk", _TO_COEF, vals)
        # antiderivative from the panel's left end, scaled to x units
        ic = leg.legint(np.moveaxis(self.coef, -1, 0), lbnd=-1) * (self.w / 2)
        self.icoef = np.moveaxis(ic, 0, -1)
        seg = np.sum(vals * _GW01, axis=-1) * self.w
        self.C = np.concatenate([np.zeros(vals.shape[:-2] + (1,)), np.cumsum(seg, axis=-1)], axis=-1)
        self.total = self.C[..., -1]

    def _locate(self, x, batch):
        k = np.clip(np.floor((x - self.a) / self.w).astype(int), 0, self.P - 1)
        s = 2.0 * (x - (self.a + k * self.w)) / self.w - 1.0
        return k, s

    def _gather(self, arr, k, batch):
        if batch is None:
            return arr[k]
        return arr[batch, k]

    def pdf(self, x, batch=None):
        k, s = self._locate(x, batch)
        c = self._gather(self.coef, k, batch)
        return leg.legval(s, np.moveaxis(c, -1, 0), tensor=False)

    def cdf(self, x, batch=None):
        k, s = self._locate(x, batch)
        c = self._gather(self.icoef, k, batch)
        return self._gather(self.C, k, batch) + leg.legval(s, np.moveaxis(c, -1, 0), tensor=False)

    def inv(self, target, batch=None, tol=1e-15, maxit=50):
        """Solve cdf(x) = target (unnormalised); ``batch`` selects the row per target."""
        target = np.asarray(target, float)
        if batch is None:
            k = np.searchsorted(self.C, target, side="right") - 1
        else:
            m = self.C.shape[0]
            span = 2.0 * np.abs(self.C).max() + 1.0
            off = np.arange(m) * span
            flat = (self.C + off[:, None]).ravel()
            k = np.searchsorted(flat, target + off[batch], side="right") - 1 - batch * (self.P + 1)
        k = np.clip(k, 0, self.P - 1)
        lo = self.a + k * self.w
        hi = lo + self.w
        c0 = self._gather(self.C, k, batch)
        c1 = self._gather(self.C, k + 1, batch)
        x = lo + np.clip((target - c0) / np.maximum(c1 - c0, 1e-300), 0, 1) * self.w
        for _ in range(maxit):
            F = self.cdf(x, batch) - target
            hi = np.where(F > 0, x, hi)
            lo = np.where(F <= 0, x, lo)
            xn = x - F / self.pdf(x, batch)
            bad = (xn <= lo) | (xn >= hi) | ~np.isfinite(xn)
            xn = np.where(bad, 0.5 * (lo + hi), xn)
            step = np.max(np.abs(xn - x)) if xn.size else 0.0
            x = xn
            if step <= tol * self.L:
                break
        return x


class PeriodicDensity2D:
    """Wraps ``f(X, Y)`` on the box ``[x0, x0+Lx) x [y0, y0+Ly)``.

    ``flat=True`` marks the uniform density, for which every CDF is linear.
    """

    def __init__(self, f, box, flat=False, panels=128):
        self.f = f
        self.x0, self.y0, self.Lx, self.Ly = (float(b) for b in box)
        self.flat = flat
        self.panels = int(panels)
        if not flat:
            self._build_marginal()

    def _ynodes(self, P):
        w = self.Ly / P
        return (self.y0 + w * np.arange(P)[:, None] + w * _GX01)  # (P, 8)

    def _column_vals(self, xs, P):
        t = self._ynodes(P)
        vals = self.f(np.asarray(xs, float)[:, None, None], t[None, :, :])
        if not np.all(np.isfinite(vals)) or not np.all(vals > 0):
            raise RuntimeError("density must be finite and strictly positive for CDF inversion")
        return vals

    def marginal(self, x):
        """Exact-quadrature marginal density at x."""
        x = np.atleast_1d(np.asarray(x, float))
        vals = self._column_vals(x.ravel(), self.panels)
        w = self.Ly / self.panels
        return (np.sum(vals * _GW01, axis=(-1, -2)) * w).reshape(x.shape)

    def _build_marginal(self):
        P = self.panels
        w = self.Lx / P
        xn = (self.x0 + w * np.arange(P)[:, None] + w * _GX01).ravel()
        vals = self.marginal(xn).reshape(P, 8)
        self.mcdf = PanelCDF(self.x0, self.Lx, vals)
        self.total = float(self.mcdf.total)

    def marginal_cdf(self, x):
        """Normalised marginal CDF in [0, 1]."""
        x = np.asarray(x, float)
        if self.flat:
            return (x - self.x0) / self.Lx
        return self.mcdf.cdf(x) / self.total

    def marginal_pdf(self, x):
        x = np.asarray(x, float)
        if self.flat:
            return np.full(x.shape, 1.0 / self.Lx)
        return self.mcdf.pdf(x) / self.total

    def marginal_inv(self, u):
        u = np.asarray(u, float)
        if self.flat:
            return self.x0 + self.Lx * u
        return self.mcdf.inv(u * self.total)

    def conditional(self, xs, panels=None):
        """Per-column conditional CDF objects for the columns ``xs``."""
        P = max(self.panels, panels or 0)
        return PanelCDF(self.y0, self.Ly, self._column_vals(xs, P))

    def cond_cdf_tensor(self, xs, ys):
        """Normalised conditional CDF of y given x at every (xs[i], ys[j])."""
        xs = np.asarray(xs, float)
        ys = np.asarray(ys, float)
        if self.flat:
            return np.broadcast_to((ys - self.y0) / self.Ly, (xs.size, ys.size)).copy()
        pc = self.conditional(xs, ys.size)
        rows = np.broadcast_to(np.arange(xs.size)[:, None], (xs.size, ys.size))
        yy = np.broadcast_to(ys[None, :], rows.shape)
        return pc.cdf(yy, rows) / pc.total[:, None]

    def cond_inv_tensor(self, ps, targets):
        """Solve ``H(q | ps[i]) = targets[i, j]`` for q; targets in [0, 1]."""
        ps = np.asarray(ps, float)
        targets = np.asarray(targets, float)
        if self.flat:
            return self.y0 + self.Ly * targets
        pc = self.conditional(ps, targets.shape[1])
        rows = np.broadcast_to(np.arange(ps.size)[:, None], targets.shape)
        return pc.inv(targets * pc.total[:, None], rows)


def kr_tensor(src: PeriodicDensity2D, dst: PeriodicDensity2D, xs, ys):
    """Knothe-Rosenblatt map src -> dst at the tensor nodes (xs[i], ys[j]).

    Returns ``(P, Q)`` with P of shape (len(xs),) and Q of shape (len(xs), len(ys)).
    """
    u = src.marginal_cdf(xs)
    P = dst.marginal_inv(u)
    G = src.cond_cdf_tensor(xs, ys)
    Q = dst.cond_inv_tensor(P, G)
    return P, Q
