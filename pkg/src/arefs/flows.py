"""Velocity fields with grad.(pi v) = 0: cellular, pushforward and compactly supported flows.

In two dimensions every such field is ``pi v = perp grad psi`` for a flux
stream function psi, with ``perp grad = (-d_y, d_x)``.  Flows built from
tabulated maps carry psi as a procedure evaluated on whole grids; their
velocities come from 4th-order differences of psi divided by pi.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import stats

from ._kr import PeriodicDensity2D, kr_tensor
from .grid import Grid2D, GridField
from .targets import TargetDensity, TorusDensity, _bilinear, heavy_tail


# -- finite differences -----------------------------------------------------------

def d2(f, h, axis):
    return (np.roll(f, -1, axis) - np.roll(f, 1, axis)) / (2 * h)


def d4(f, h, axis):
    return (-np.roll(f, -2, axis) + 8 * np.roll(f, -1, axis)
            - 8 * np.roll(f, 1, axis) + np.roll(f, 2, axis)) / (12 * h)


def perp_grad4(psi, grid: Grid2D):
    """``(-d_y psi, d_x psi)`` by 4th-order central differences."""
    return -d4(psi, grid.hy, 1), d4(psi, grid.hx, 0)


# -- stream functions -------------------------------------------------------------

@dataclass(frozen=True)
class StreamFunction:
    """Cellular ``sin(2 pi n x/L) cos(2 pi n y/L)`` or a tabulated grid field."""

    kind: str
    n: int = 1
    side: float = 1.0
    table: Optional[GridField] = None

    def value(self, x):
        x = np.asarray(x, float)
        if self.kind == "cellular":
            k = 2 * math.pi * self.n / self.side
            return np.sin(k * x[..., 0]) * np.cos(k * x[..., 1])
        g = self.table.grid
        return _bilinear(self.table.values, x, g.origin[0], g.origin[1], g.hx, g.hy, True)

    def gradient(self, x):
        x = np.asarray(x, float)
        if self.kind == "cellular":
            k = 2 * math.pi * self.n / self.side
            sx, cx = np.sin(k * x[..., 0]), np.cos(k * x[..., 0])
            sy, cy = np.sin(k * x[..., 1]), np.cos(k * x[..., 1])
            return np.stack([k * cx * cy, -k * sx * sy], axis=-1)
        g = self.table.grid
        gx = d4(self.table.values, g.hx, 0)
        gy = d4(self.table.values, g.hy, 1)
        return np.stack([_bilinear(t, x, g.origin[0], g.origin[1], g.hx, g.hy, True) for t in (gx, gy)],
                        axis=-1)


# -- flows --------------------------------------------------------------------------

@dataclass
class Flow:
    """A drift v together with the weight pi it preserves.

    Exactly one of ``velocity_fn`` (pointwise v) or ``stream_grid`` (flux
    stream psi on a grid, ``pi v = perp grad psi``) drives evaluation.
    ``stream_points`` is the pointwise flux stream when available.
    """

    weight: object
    kind: str
    velocity_fn: Optional[Callable] = None
    stream_grid: Optional[Callable] = None
    stream_points: Optional[Callable] = None
    streamfunction: Optional[StreamFunction] = None
    support: tuple = ("whole-domain",)
    meta: dict = field(default_factory=dict)
    table_grid: Optional[Grid2D] = None
    _table: Optional[tuple] = field(default=None, repr=False)
    _energy: Optional[float] = field(default=None, repr=False)

    def flux_on_grid(self, grid: Grid2D):
        """``pi v`` at the grid nodes."""
        if self.stream_grid is not None:
            return perp_grad4(self.stream_grid(grid), grid)
        pts = grid.points()
        v = self.velocity_fn(pts)
        w = self.weight.density(pts)
        return w * v[..., 0], w * v[..., 1]

    def velocity_on_grid(self, grid: Grid2D):
        if self.velocity_fn is not None:
            v = self.velocity_fn(grid.points())
            return v[..., 0], v[..., 1]
        fx, fy = self.flux_on_grid(grid)
        w = self.weight.density(grid.points())
        return fx / w, fy / w

    def stream_on_grid(self, grid: Grid2D):
        if self.stream_grid is not None:
            return self.stream_grid(grid)
        if self.stream_points is not None:
            return self.stream_points(grid.points())
        raise ValueError("flow carries no stream function")

    def velocity(self, x):
        """Velocity at arbitrary points (bilinear lookup for tabulated flows)."""
        x = np.asarray(x, float)
        if self.velocity_fn is not None:
            return self.velocity_fn(x)
        if self._table is None:
            g = self.table_grid
            vx, vy = self.velocity_on_grid(g)
            self._table = (g, vx, vy)
        g, vx, vy = self._table
        out = np.stack([_bilinear(t, x, g.origin[0], g.origin[1], g.hx, g.hy, True) for t in (vx, vy)],
                       axis=-1)
        if self.support[0] == "ball":
            out[np.linalg.norm(x, axis=-1) >= self.support[1]] = 0.0
        return out

    def max_speed(self, grid: Optional[Grid2D] = None) -> float:
        g = grid or self.table_grid or Grid2D.square(128, _side(self.weight))
        vx, vy = self.velocity_on_grid(g)
        return float(np.sqrt(vx ** 2 + vy ** 2).max())

    def lipschitz(self, grid: Optional[Grid2D] = None) -> float:
        g = grid or self.table_grid or Grid2D.square(128, _side(self.weight))
        vx, vy = self.velocity_on_grid(g)
        J = [d2(vx, g.hx, 0), d2(vx, g.hy, 1), d2(vy, g.hx, 0), d2(vy, g.hy, 1)]
        return float(np.sqrt(sum(j ** 2 for j in J)).max())

    @property
    def energy(self):
        if self._energy is None:
            self._energy = flow_energy(self)
        return self._energy

    def to_dict(self):
        d = {"kind": self.kind, "support": list(self.support),
             "weight": self.weight.to_dict() if hasattr(self.weight, "to_dict") else None}
        d.update(self.meta)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _side(weight):
    return weight.torus_box[2] if getattr(weight, "is_torus", False) else 1.0


def _weight_grid(weight, n=256):
    x0, y0, Lx, Ly = weight.torus_box
    return Grid2D(n, n, (x0, y0), (Lx, Ly), True)


def cellular_flow(n: int, weight: TargetDensity) -> Flow:
    """``v_n = perp grad Psi_n`` on the flat torus."""
    if not getattr(weight, "is_flat", False):
        raise ValueError("cellular flows require the flat torus weight; use pushforward_flow")
    if int(n) < 1:
        raise ValueError("cell index must be a positive integer")
    n = int(n)
    L = weight.torus_box[2]
    sf = StreamFunction("cellular", n, L)
    dens = math.exp(-weight.log_normalizer)

    def vel(x):
        g = sf.gradient(x)
        return np.stack([-g[..., 1], g[..., 0]], axis=-1)

    return Flow(weight, "cellular", velocity_fn=vel, stream_points=lambda x: dens * sf.value(x),
                streamfunction=sf, meta={"n": n}, table_grid=_weight_grid(weight))


def constant_flow(vec, weight) -> Flow:
    """Uniform drift (not weighted divergence-free unless pi is flat)."""
    vec = np.asarray(vec, float)
    return Flow(weight, "constant", velocity_fn=lambda x: np.broadcast_to(vec, np.shape(x)).copy(),
                meta={"vector": vec.tolist()})


# -- diagnostics ----------------------------------------------------------------------

@dataclass
class DivergenceResidual:
    field: GridField
    max_norm: float
    l2_norm: float


def weighted_divergence(v: Flow, grid: Grid2D) -> DivergenceResidual:
    """Central-difference residual of ``div(pi v)`` on ``grid`` (>= 32^2)."""
    if grid.nx < 32 or grid.ny < 32:
        raise ValueError("divergence audit needs at least 32x32 nodes")
    fx, fy = v.flux_on_grid(grid)
    res = d2(fx, grid.hx, 0) + d2(fy, grid.hy, 1)
    gf = GridField(grid, res)
    return DivergenceResidual(gf, gf.max_norm(), gf.l2_norm())


def refinement_factor(v: Flow, grid: Grid2D, floor=1e-9):
    """Residual ratio between ``grid`` and its 2x refinement.

    Returns ``(coarse, fine, factor)``; ``factor`` is None when the coarse
    residual is already at rounding level (below ``floor``).
    """
    c = weighted_divergence(v, grid).max_norm
    f = weighted_divergence(v, grid.refined(2)).max_norm
    return c, f, (c / f if c > floor else None)


def flow_energy(v: Flow, grid: Optional[Grid2D] = None) -> float:
    """``int |v|^2 pi`` by grid quadrature (periodic trapezoid)."""
    if grid is None:
        grid = v.table_grid or _weight_grid(v.weight)
    if v.velocity_fn is not None:
        pts = grid.points()
        vel = v.velocity_fn(pts)
        integrand = np.sum(vel * vel, axis=-1) * v.weight.density(pts)
    else:
        fx, fy = v.flux_on_grid(grid)
        w = v.weight.density(grid.points())
        integrand = np.where(fx ** 2 + fy ** 2 > 0, (fx ** 2 + fy ** 2) / np.maximum(w, 1e-300), 0.0)
    bad = ~np.isfinite(integrand)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        X, Y = grid.mesh()
        raise RuntimeError(f"non-finite energy integrand at ({X[i, j]:.6g}, {Y[i, j]:.6g})")
    return float(integrand.sum() * grid.cell_area)


# -- transport maps ---------------------------------------------------------------------

def _engine(density, panels=128):
    box = density.torus_box
    if getattr(density, "is_flat", False):
        return PeriodicDensity2D(None, box, flat=True)
    return PeriodicDensity2D(lambda X, Y: density.density(np.stack(np.broadcast_arrays(X, Y), -1)),
                             box, panels=panels)


@dataclass
class TransportMap:
    """Tabulated ``Z = (P, Q)`` pushing ``source`` onto ``target``.

    ``P[i] = P(x_i)`` and ``Q[i, j] = Q(x_i, y_j)`` at the source grid nodes.
    """

    source: object
    target: object
    P: np.ndarray
    Q: np.ndarray
    resolution: tuple
    _src: Optional[PeriodicDensity2D] = field(default=None, repr=False)
    _dst: Optional[PeriodicDensity2D] = field(default=None, repr=False)

    @property
    def source_grid(self):
        x0, y0, Lx, Ly = self.source.torus_box
        return Grid2D(self.resolution[0], self.resolution[1], (x0, y0), (Lx, Ly), True)

    def engines(self):
        if self._src is None:
            self._src = _engine(self.source)
            self._dst = _engine(self.target)
        return self._src, self._dst

    # forward / inverse by table interpolation -------------------------------------
    def _ext_P(self):
        sx0, _, sLx, _ = self.source.torus_box
        tx0, _, tLx, _ = self.target.torus_box
        nx = self.resolution[0]
        xs = sx0 + sLx * np.arange(nx + 1) / nx
        Ps = np.concatenate([self.P, [self.P[0] + tLx]])
        return xs, Ps

    def forward(self, pts):
        """Z at arbitrary source points (linear interpolation of the tables)."""
        pts = np.asarray(pts, float)
        sx0, sy0, sLx, sLy = self.source.torus_box
        tx0, ty0, tLx, tLy = self.target.torus_box
        nx, ny = self.resolution
        u = np.mod(pts[..., 0] - sx0, sLx) / sLx * nx
        w = np.mod(pts[..., 1] - sy0, sLy) / sLy * ny
        i = np.minimum(np.floor(u).astype(int), nx - 1)
        j = np.minimum(np.floor(w).astype(int), ny - 1)
        tx, ty = u - i, w - j
        xs, Ps = self._ext_P()
        p = Ps[i] + tx * (Ps[i + 1] - Ps[i])
        Qe = np.concatenate([self.Q, self.Q[:, :1] + tLy], axis=1)
        Qe = np.concatenate([Qe, Qe[:1]], axis=0)
        q0 = Qe[i, j] + ty * (Qe[i, j + 1] - Qe[i, j])
        q1 = Qe[i + 1, j] + ty * (Qe[i + 1, j + 1] - Qe[i + 1, j])
        q = q0 + tx * (q1 - q0)
        return np.stack([p, q], axis=-1)

    def inverse(self, pts):
        """Z^{-1} by binary search and linear interpolation of the monotone tables."""
        pts = np.asarray(pts, float)
        sx0, sy0, sLx, sLy = self.source.torus_box
        tx0, ty0, tLx, tLy = self.target.torus_box
        nx, ny = self.resolution
        p = tx0 + np.mod(pts[..., 0] - tx0, tLx)
        q = ty0 + np.mod(pts[..., 1] - ty0, tLy)
        xs, Ps = self._ext_P()
        k = np.clip(np.searchsorted(Ps, p, side="right") - 1, 0, nx - 1)
        t = (p - Ps[k]) / (Ps[k + 1] - Ps[k])
        x = xs[k] + t * (xs[k + 1] - xs[k])
        ys = sy0 + sLy * np.arange(ny + 1) / ny
        Qe = np.concatenate([self.Q, self.Q[:, :1] + tLy], axis=1)
        Qe = np.concatenate([Qe, Qe[:1]], axis=0)
        # forward is bilinear, so at fixed t the blended column is piecewise linear
        # on the same y nodes; bisect it for an exact inverse of the interpolant
        def blend(j):
            return (1 - t) * Qe[k, j] + t * Qe[k + 1, j]

        base = blend(np.zeros_like(k))
        q = np.where(q < base, q + tLy, q)
        lo = np.zeros_like(k)
        hi = np.full_like(k, ny)
        while np.any(hi - lo > 1):
            mid = (lo + hi) // 2
            below = blend(mid) <= q
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        a, b = blend(lo), blend(lo + 1)
        y = ys[lo] + (q - a) / (b - a) * (ys[lo + 1] - ys[lo])
        y = sy0 + np.mod(y - sy0, sLy)
        return np.stack([x, y], axis=-1)

    # accurate evaluation on tensor grids -------------------------------------------
    def forward_nodes(self, xs, ys):
        src, dst = self.engines()
        return kr_tensor(src, dst, xs, ys)

    def inverse_nodes(self, ps, qs):
        src, dst = self.engines()
        return kr_tensor(dst, src, ps, qs)

    def jacobian_residual(self):
        """Max-norm of ``det DZ * pi(Z) - F`` at the source nodes (4th-order differences)."""
        g = self.source_grid
        sx0, sy0, sLx, sLy = self.source.torus_box
        tLx, tLy = self.target.torus_box[2], self.target.torus_box[3]
        X, Y = g.mesh()
        Pp = self.P - (tLx / sLx) * (g.axes()[0] - sx0)
        dP = d4(Pp, g.hx, 0) + tLx / sLx
        Qp = self.Q - (tLy / sLy) * (Y - sy0)
        dQ = d4(Qp, g.hy, 1) + tLy / sLy
        det = dP[:, None] * dQ
        Z = np.stack([np.broadcast_to(self.P[:, None], self.Q.shape), self.Q], axis=-1)
        res = det * self.target.density(Z) - self.source.density(np.stack([X, Y], -1))
        return float(np.abs(res).max())

    def to_bytes(self) -> bytes:
        header = {"nx": int(self.resolution[0]), "ny": int(self.resolution[1]),
                  "source": self.source.to_dict(), "target": self.target.to_dict()}
        return ((json.dumps(header, sort_keys=True) + "\n").encode()
                + np.ascontiguousarray(self.P, "<f8").tobytes()
                + np.ascontiguousarray(self.Q, "<f8").tobytes())

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode())
            raw = fh.read()
        nx, ny = header["nx"], header["ny"]
        arr = np.frombuffer(raw, "<f8")
        P = arr[:nx].copy()
        Q = arr[nx:nx + nx * ny].reshape(nx, ny).copy()
        src = TargetDensity.from_dict(header["source"])
        dst = TargetDensity.from_dict(header["target"])
        return cls(src, dst, P, Q, (nx, ny))


def build_transport_map(F, pi, resolution=(256, 256)) -> TransportMap:
    """Conditional-CDF diffeomorphism pushing ``F`` onto ``pi`` on the same torus."""
    if tuple(np.round(F.torus_box, 12)) != tuple(np.round(pi.torus_box, 12)):
        raise ValueError("source and target must live on the same torus")
    nx, ny = (resolution, resolution) if np.isscalar(resolution) else resolution
    tm = TransportMap(F, pi, None, None, (int(nx), int(ny)))
    g = tm.source_grid
    xs, ys = g.axes()
    P, Q = tm.forward_nodes(xs, ys)
    if not (np.all(np.diff(P) > 0) and np.all(np.diff(Q, axis=1) > 0)):
        raise RuntimeError("transport tables lost monotonicity")
    tm.P, tm.Q = P, Q
    return tm


def pushforward_chi2(Z: TransportMap, n_samples=100_000, bins=16, seed=0):
    """Push uniform samples through Z and compare 16x16 bin counts with pi."""
    if not getattr(Z.source, "is_flat", False):
        raise ValueError("Monte Carlo check draws uniform source samples")
    rng = np.random.Generator(np.random.Philox(seed))
    sx0, sy0, sLx, sLy = Z.source.torus_box
    tx0, ty0, tLx, tLy = Z.target.torus_box
    u = rng.random((n_samples, 2)) * [sLx, sLy] + [sx0, sy0]
    z = Z.forward(u)
    H, _, _ = np.histogram2d(z[:, 0], z[:, 1], bins=bins,
                             range=[[tx0, tx0 + tLx], [ty0, ty0 + tLy]])
    fine = Grid2D(bins * 32, bins * 32, (tx0, ty0), (tLx, tLy), True)
    # cell-centred midpoint quadrature of pi per bin
    dens = Z.target.density(fine.points(offset=(0.5, 0.5))) * fine.cell_area
    mass = dens.reshape(bins, 32, bins, 32).sum(axis=(1, 3))
    expected = mass / mass.sum() * n_samples
    chi2, p = stats.chisquare(H.ravel(), expected.ravel())
    return float(chi2), float(p)


# -- pushforward flows ----------------------------------------------------------------

def _same_weight(a, b):
    return a is b or (hasattr(a, "to_dict") and hasattr(b, "to_dict") and a.to_dict() == b.to_dict())


def pushforward_flow(v: Flow, Z: TransportMap, n: Optional[int] = None) -> Flow:
    """``Z_# v``; the flux stream is carried as ``psi o Z^{-1}``."""
    if not _same_weight(v.weight, Z.source):
        raise ValueError("flow weight differs from the transport map's source density")
    if v.stream_points is None:
        raise ValueError("pushforward needs a pointwise stream function")
    base = v.stream_points
    tx0, ty0, tLx, tLy = Z.target.torus_box
    cache = {}

    def stream_grid(grid: Grid2D):
        key = grid
        if key not in cache:
            ps, qs = grid.axes()
            ps = tx0 + np.mod(ps - tx0, tLx)
            qs_w = ty0 + np.mod(qs - ty0, tLy)
            order = np.argsort(qs_w)
            X, Yo = Z.inverse_nodes(ps, qs_w[order])
            Y = np.empty_like(Yo)
            Y[:, order] = Yo
            pts = np.stack([np.broadcast_to(X[:, None], Y.shape), Y], axis=-1)
            cache[key] = base(pts)
        return cache[key]

    meta = dict(v.meta)
    meta["pushforward_of"] = v.kind
    return Flow(Z.target, "pushforward", stream_grid=stream_grid, meta=meta,
                table_grid=Grid2D(*Z.resolution, (tx0, ty0), (tLx, tLy), True))


# -- compactly supported full-space flows -------------------------------------------------

def smooth_step(t):
    """C-infinity step: 0 for t <= 0, 1 for t >= 1."""
    t = np.asarray(t, float)
    a = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
    b = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1.0 - t, 1.0)), 0.0)
    return a / (a + b)


def cutoff(r, n):
    """Radial cutoff: 1 on ``r <= 3n/2``, 0 on ``r >= 7n/4``."""
    return smooth_step((1.75 * n - np.asarray(r, float)) / (0.25 * n))


@dataclass
class CompactFlowSpec:
    n: int
    phi_n: int
    inner_radius: float
    outer_radius: float
    delta_n: float
    M_n: float
    m0: int
    lipschitz: float

    def to_dict(self):
        return {"n": self.n, "phi_n": self.phi_n, "delta_n": self.delta_n, "M_n": self.M_n,
                "radii": [self.inner_radius, self.outer_radius], "m0": self.m0,
                "lipschitz": self.lipschitz}


def _fullspace_engine(pi: TargetDensity, n: int, res=513, panels=256):
    a = 2.0 * n
    s = np.linspace(-a, a, res)
    X, Y = np.meshgrid(s, s, indexing="ij")
    delta = 0.5 * float(pi.density(np.stack([X, Y], -1)).min())

    def raw(X, Y):
        X, Y = np.broadcast_arrays(X, Y)
        p = pi.density(np.stack([X, Y], -1))
        return (p - delta) * cutoff(np.hypot(X, Y), n) + delta

    eng = PeriodicDensity2D(raw, (-a, -a, 2 * a, 2 * a), panels=panels)
    return eng, delta, eng.total, raw


def _inverse_jacobian(eng, ps, qs, eps):
    """Entries of D(Z^{-1}) for the map onto the unit torus at tensor nodes."""
    cols = np.concatenate([ps + k * eps for k in (-2, -1, 1, 2)])
    H = eng.cond_cdf_tensor(cols, qs).reshape(4, ps.size, qs.size)
    dy_dp = (H[0] - 8 * H[1] + 8 * H[2] - H[3]) / (12 * eps)
    dx_dp = eng.marginal_pdf(ps)
    pc = eng.conditional(ps, qs.size)
    rows = np.broadcast_to(np.arange(ps.size)[:, None], (ps.size, qs.size))
    dy_dq = pc.pdf(np.broadcast_to(qs[None, :], rows.shape), rows) / pc.total[:, None]
    return dx_dp, dy_dp, dy_dq


def map_lipschitz(eng, n, samples=97):
    """Largest stretch of Z_n over the pullback of B(0, 3n/2)."""
    s = np.linspace(-1.5 * n, 1.5 * n, samples)
    dx_dp, dy_dp, dy_dq = _inverse_jacobian(eng, s, s, 1e-4 * n)
    inside = np.hypot(*np.meshgrid(s, s, indexing="ij")) <= 1.5 * n
    # D Z = inverse of [[dx_dp, 0], [dy_dp, dy_dq]]
    a = 1.0 / dx_dp[:, None]
    d = 1.0 / dy_dq
    c = -dy_dp * a * d
    # spectral norm of [[a, 0], [c, d]]
    fro2 = a ** 2 + c ** 2 + d ** 2
    det = np.abs(a * d)
    smax = np.sqrt(0.5 * (fro2 + np.sqrt(np.maximum(fro2 ** 2 - 4 * det ** 2, 0.0))))
    return float(smax[inside].max())


def minimal_cell_count(lip, n):
    """Smallest m with sqrt(2)/(2m) < n/(2 lip)."""
    return int(math.floor(math.sqrt(2.0) * lip / n)) + 1


def build_fullspace_flow(pi: TargetDensity, n: int, phi="auto", lipschitz_samples=97,
                         enforce_covering=True):
    """Compactly supported flow on R^2 conjugate to a cellular flow on B(0, n).

    The cell count is raised to the covering threshold ``m0`` unless
    ``enforce_covering`` is False (a diagnostic mode for studying the
    construction at resolvable cell counts).
    """
    if pi.is_torus or pi.potential.dim != 2:
        raise ValueError("full-space construction needs a target on R^2")
    if heavy_tail(pi.potential):
        raise ValueError("target tails too heavy for the full-space construction")
    n = int(n)
    eng, delta, M, raw = _fullspace_engine(pi, n)
    lip = map_lipschitz(eng, n, lipschitz_samples)
    m0 = minimal_cell_count(lip, n)
    if phi == "auto" or phi is None:
        phi_n = m0
    else:
        phi_n = int(phi)
        if phi_n < m0 and enforce_covering:
            warnings.warn(f"cell count {phi_n} below covering threshold {m0}; raised to {m0}")
            phi_n = m0
    spec = CompactFlowSpec(n, phi_n, 1.5 * n, 1.75 * n, delta, M, m0, lip)
    unit = PeriodicDensity2D(None, (-0.5, -0.5, 1.0, 1.0), flat=True)
    kcell = 2 * math.pi * phi_n
    R = 1.75 * n
    cache = {}

    def stream_grid(grid: Grid2D):
        if grid in cache:
            return cache[grid]
        xs, ys = grid.axes()
        out = np.zeros(grid.shape)
        ix = np.nonzero(np.abs(xs) < R)[0]
        iy = np.nonzero(np.abs(ys) < R)[0]
        if ix.size and iy.size:
            ps, qs = xs[ix], ys[iy]
            U, V = kr_tensor(eng, unit, ps, qs)
            psi = np.sin(kcell * U)[:, None] * np.cos(kcell * V)
            chi = cutoff(np.hypot(ps[:, None], qs[None, :]), n)
            out[np.ix_(ix, iy)] = M * chi * psi
        cache[grid] = out
        return out

    # pi v = M_n perp grad (chi Psi'), so the flux stream is M_n chi Psi'
    flow = Flow(pi, "fullspace", stream_grid=stream_grid, support=("ball", 2.0 * n),
                meta={"spec": spec.to_dict()},
                table_grid=Grid2D(512, 512, (-2.0 * n, -2.0 * n), (4.0 * n, 4.0 * n), True))
    return flow, spec
