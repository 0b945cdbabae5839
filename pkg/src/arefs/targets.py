"""Potentials U and target densities pi = exp(-U)/Z on the torus or on R^d."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize
from scipy.special import logsumexp, ndtri
from scipy.stats import qmc

from .grid import Grid2D, GridField

FAMILIES = ("flat-torus", "trig-torus", "gaussian", "double-well", "tabulated")

# e^{-U} below this fraction of its peak is treated as outside the support
SUPPORT_CUTOFF = 1e-16


@dataclass(frozen=True)
class Domain:
    kind: str  # "T2" or "Rd"
    side: float = 1.0
    dim: int = 2

    def __post_init__(self):
        if self.kind not in ("T2", "Rd"):
            raise ValueError(f"unknown domain {self.kind!r}")
        if self.kind == "T2":
            object.__setattr__(self, "dim", 2)
            if self.side <= 0:
                raise ValueError("torus side must be positive")

    @classmethod
    def torus(cls, side: float = 1.0):
        return cls("T2", float(side), 2)

    @classmethod
    def rd(cls, d: int):
        return cls("Rd", 1.0, int(d))

    @property
    def is_torus(self):
        return self.kind == "T2"

    def to_dict(self):
        if self.is_torus:
            return {"kind": "T2", "side": self.side}
        return {"kind": "Rd", "dim": self.dim}

    @classmethod
    def from_dict(cls, d):
        if d["kind"] == "T2":
            return cls.torus(d["side"])
        return cls.rd(d["dim"])


@dataclass(frozen=True)
class Potential:
    """Parametric potential with analytic value, gradient and Laplacian.

    Parameter layouts
    -----------------
    flat-torus   : ()
    trig-torus   : groups of (amplitude, kx, ky, phase); each group adds
                   ``a*cos(2*pi*(kx*x + ky*y)/L + phase)`` on a torus of side L
    gaussian     : (mean_1..mean_d, var_1..var_d)
    double-well  : (barrier height h, well separation s);
                   ``h*((x1/s)^2 - 1)^2 + sum_{k>1} x_k^2/2``
    tabulated    : (nx, ny, x0, y0, Lx, Ly, U values row-major); bilinear
                   interpolation, periodic on T2 and clamped outside the table on R^2
    """

    family: str
    domain: Domain
    parameters: tuple = ()

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown potential family {self.family!r}")
        params = tuple(float(p) for p in self.parameters)
        object.__setattr__(self, "parameters", params)
        d = self.domain.dim
        if self.family in ("flat-torus", "trig-torus") and not self.domain.is_torus:
            raise ValueError(f"{self.family} lives on T2")
        if self.family in ("gaussian", "double-well") and self.domain.is_torus:
            raise ValueError(f"{self.family} lives on R^d")
        if self.family == "flat-torus" and params:
            raise ValueError("flat-torus takes no parameters")
        if self.family == "trig-torus" and len(params) % 4:
            raise ValueError("trig-torus parameters come in groups of 4")
        if self.family == "gaussian":
            if len(params) != 2 * d or min(params[d:]) <= 0:
                raise ValueError("gaussian needs d means and d positive variances")
        if self.family == "double-well":
            if len(params) != 2 or params[0] <= 0 or params[1] <= 0:
                raise ValueError("double-well needs positive (height, separation)")
        if self.family == "tabulated":
            if d != 2:
                raise ValueError("tabulated potentials are two-dimensional")
            nx, ny = int(params[0]), int(params[1])
            if len(params) != 6 + nx * ny:
                raise ValueError("tabulated table size mismatch")

    # convenience constructors -------------------------------------------------
    @classmethod
    def flat(cls, side=1.0):
        return cls("flat-torus", Domain.torus(side), ())

    @classmethod
    def trig(cls, terms, side=1.0):
        flat = []
        for t in terms:
            a, kx, ky = t[0], t[1], t[2]
            ph = t[3] if len(t) > 3 else 0.0
            flat += [a, kx, ky, ph]
        return cls("trig-torus", Domain.torus(side), tuple(flat))

    @classmethod
    def gaussian(cls, mean, var):
        mean = np.atleast_1d(np.asarray(mean, float))
        var = np.broadcast_to(np.asarray(var, float), mean.shape)
        return cls("gaussian", Domain.rd(mean.size), tuple(mean) + tuple(var))

    @classmethod
    def double_well(cls, height=1.0, separation=1.0, d=2):
        return cls("double-well", Domain.rd(d), (height, separation))

    @classmethod
    def tabulated(cls, values, origin, lengths, torus=False):
        values = np.asarray(values, float)
        nx, ny = values.shape
        dom = Domain.torus(lengths[0]) if torus else Domain.rd(2)
        return cls("tabulated", dom,
                   (nx, ny, origin[0], origin[1], lengths[0], lengths[1]) + tuple(values.ravel()))

    @property
    def dim(self):
        return self.domain.dim

    # evaluation --------------------------------------------------------------
    def _coerce(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"point dimension {x.shape[-1]} does not match domain dimension {self.dim}")
        return x

    def value(self, x):
        return self.evaluate(x)[0]

    def grad(self, x):
        return self.evaluate(x)[1]

    def laplacian(self, x):
        return self.evaluate(x)[2]

    def evaluate(self, x):
        """Return ``(U, gradU, lapU)`` at points ``x`` of shape ``(..., d)``."""
        x = self._coerce(x)
        fam = self.family
        p = self.parameters
        if fam == "flat-torus":
            z = np.zeros(x.shape[:-1])
            return z, np.zeros_like(x), z.copy()
        if fam == "trig-torus":
            L = self.domain.side
            U = np.zeros(x.shape[:-1])
            G = np.zeros_like(x)
            lap = np.zeros(x.shape[:-1])
            w = 2 * math.pi / L
            for a, kx, ky, ph in zip(p[0::4], p[1::4], p[2::4], p[3::4]):
                th = w * (kx * x[..., 0] + ky * x[..., 1]) + ph
                c, s = np.cos(th), np.sin(th)
                U += a * c
                G[..., 0] -= a * w * kx * s
                G[..., 1] -= a * w * ky * s
                lap -= a * w * w * (kx * kx + ky * ky) * c
            return U, G, lap
        if fam == "gaussian":
            d = self.dim
            m = np.asarray(p[:d])
            var = np.asarray(p[d:])
            dx = x - m
            U = 0.5 * np.sum(dx * dx / var, axis=-1)
            return U, dx / var, np.full(x.shape[:-1], np.sum(1.0 / var))
        if fam == "double-well":
            h, s = p
            x1 = x[..., 0]
            t = (x1 / s) ** 2 - 1.0
            rest = x[..., 1:]
            U = h * t * t + 0.5 * np.sum(rest * rest, axis=-1)
            G = np.empty_like(x)
            G[..., 0] = 4 * h * x1 * t / s ** 2
            G[..., 1:] = rest
            lap = 4 * h / s ** 2 * (3 * x1 ** 2 / s ** 2 - 1.0) + (self.dim - 1)
            return U, G, lap
        return self._tabulated(x)

    def _table(self):
        p = self.parameters
        nx, ny = int(p[0]), int(p[1])
        x0, y0, Lx, Ly = p[2:6]
        vals = np.asarray(p[6:]).reshape(nx, ny)
        return nx, ny, x0, y0, Lx, Ly, vals

    def _tabulated(self, x):
        nx, ny, x0, y0, Lx, Ly, T = self._table()
        hx, hy = Lx / nx, Ly / ny
        periodic = self.domain.is_torus
        # derivative tables by central differences
        if periodic:
            Tx = (np.roll(T, -1, 0) - np.roll(T, 1, 0)) / (2 * hx)
            Ty = (np.roll(T, -1, 1) - np.roll(T, 1, 1)) / (2 * hy)
            lapT = ((np.roll(T, -1, 0) - 2 * T + np.roll(T, 1, 0)) / hx ** 2
                    + (np.roll(T, -1, 1) - 2 * T + np.roll(T, 1, 1)) / hy ** 2)
        else:
            Tx = np.gradient(T, hx, axis=0)
            Ty = np.gradient(T, hy, axis=1)
            lapT = np.gradient(Tx, hx, axis=0) + np.gradient(Ty, hy, axis=1)
        out = [_bilinear(tab, x, x0, y0, hx, hy, periodic) for tab in (T, Tx, Ty, lapT)]
        G = np.stack([out[1], out[2]], axis=-1)
        return out[0], G, out[3]

    def to_dict(self):
        return {"family": self.family, "domain": self.domain.to_dict(),
                "parameters": list(self.parameters)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["family"], Domain.from_dict(d["domain"]), tuple(d["parameters"]))


def _bilinear(T, x, x0, y0, hx, hy, periodic):
    nx, ny = T.shape
    fx = (x[..., 0] - x0) / hx
    fy = (x[..., 1] - y0) / hy
    if not periodic:
        fx = np.clip(fx, 0, nx - 1)
        fy = np.clip(fy, 0, ny - 1)
    i0 = np.floor(fx).astype(int)
    j0 = np.floor(fy).astype(int)
    tx = fx - i0
    ty = fy - j0
    if periodic:
        i0 %= nx
        j0 %= ny
        i1 = (i0 + 1) % nx
        j1 = (j0 + 1) % ny
    else:
        i0 = np.minimum(i0, nx - 2)
        j0 = np.minimum(j0, ny - 2)
        tx = fx - i0
        ty = fy - j0
        i1, j1 = i0 + 1, j0 + 1
    return ((1 - tx) * (1 - ty) * T[i0, j0] + tx * (1 - ty) * T[i1, j0]
            + (1 - tx) * ty * T[i0, j1] + tx * ty * T[i1, j1])


def eval_potential(U: Potential, x):
    """Analytic ``(U(x), gradU(x), lapU(x))`` at a single point."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size != U.dim:
        raise ValueError(f"point {x.tolist()} does not live in a {U.dim}-dimensional domain")
    u, g, lap = U.evaluate(x)
    return float(u), g.copy(), float(lap)


@dataclass
class TargetDensity:
    potential: Potential
    log_normalizer: float
    grid: Optional[Grid2D] = None
    quadrature: dict = field(default_factory=dict)

    @property
    def domain(self):
        return self.potential.domain

    @property
    def is_torus(self):
        return self.potential.domain.is_torus

    @property
    def is_flat(self):
        return self.potential.family == "flat-torus"

    def log_density(self, x):
        return -self.potential.value(x) - self.log_normalizer

    def density(self, x):
        return np.exp(self.log_density(x))

    def on_grid(self, grid: Grid2D) -> GridField:
        return GridField(grid, self.density(grid.points()))

    @property
    def torus_box(self):
        """``(x0, y0, Lx, Ly)`` of the periodic domain."""
        if not self.is_torus:
            raise ValueError("not a torus target")
        L = self.potential.domain.side
        return (0.0, 0.0, L, L)

    def box(self):
        """Quadrature box as ``(lo, hi)`` arrays."""
        b = self.quadrature.get("box")
        return np.asarray(b[0], float), np.asarray(b[1], float)

    def to_dict(self):
        d = self.potential.to_dict()
        d["log_normalizer"] = self.log_normalizer
        d["quadrature"] = self.quadrature
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        pot = Potential.from_dict(d)
        q = d.get("quadrature", {})
        grid = None
        if pot.domain.is_torus and q.get("resolution"):
            nx, ny = q["resolution"]
            lo, hi = q["box"]
            grid = Grid2D(nx, ny, tuple(lo), (hi[0] - lo[0], hi[1] - lo[1]), True)
        return cls(pot, float(d["log_normalizer"]), grid, q)

    @classmethod
    def from_json(cls, s: str):
        return cls.from_dict(json.loads(s))


def _support_radius(U: Potential, centre: np.ndarray, umin: float) -> np.ndarray:
    """Per-axis half-width beyond which exp(-(U - umin)) < SUPPORT_CUTOFF."""
    d = U.dim
    thresh = -math.log(SUPPORT_CUTOFF)
    half = np.zeros(d)
    for k in range(d):
        for sgn in (-1.0, 1.0):
            t = 1.0
            for _ in range(60):
                x = centre.copy()
                x[k] += sgn * t
                if U.value(x) - umin > thresh:
                    break
                t *= 1.25
            else:
                raise RuntimeError("potential does not grow fast enough to truncate its support")
            half[k] = max(half[k], t)
    return half


def normalize(U: Potential, resolution=None, box=None) -> TargetDensity:
    """Compute log Z by grid quadrature.

    On the torus ``resolution`` is a :class:`Grid2D` or an integer n (n x n
    grid, default 256); the periodic trapezoid rule is used.  On R^d the
    tensor trapezoid rule runs on ``box`` (``(lo, hi)`` scalars or arrays),
    which defaults to the region where ``exp(-U)`` exceeds 1e-16 of its peak;
    ``resolution`` is the number of nodes per axis (default 401).
    """
    if U.domain.is_torus:
        if resolution is None:
            resolution = 256
        if isinstance(resolution, Grid2D):
            grid = resolution
        else:
            grid = Grid2D.square(int(resolution), U.domain.side)
        vals = -U.value(grid.points())
        if not np.all(np.isfinite(vals)):
            raise RuntimeError("non-finite potential values on the quadrature grid")
        logZ = float(logsumexp(vals) + math.log(grid.cell_area))
        quad = {"type": "periodic-trapezoid", "resolution": [grid.nx, grid.ny],
                "box": [list(grid.origin),
                        [grid.origin[0] + grid.lengths[0], grid.origin[1] + grid.lengths[1]]]}
        return TargetDensity(U, logZ, grid, quad)

    d = U.dim
    n = 401 if resolution is None else int(resolution)
    if box is None:
        centre = np.zeros(d)
        if U.family == "gaussian":
            centre = np.asarray(U.parameters[:d])
        # coarse scan for the minimum along the axes
        umin = float(U.value(centre))
        for k in range(d):
            s = np.linspace(-10, 10, 2001)
            pts = np.tile(centre, (s.size, 1))
            pts[:, k] += s
            umin = min(umin, float(U.value(pts).min()))
        half = _support_radius(U, centre, umin)
        lo, hi = centre - half, centre + half
    else:
        lo = np.broadcast_to(np.asarray(box[0], float), (d,)).copy()
        hi = np.broadcast_to(np.asarray(box[1], float), (d,)).copy()
    if d > 3:
        raise ValueError("tensor quadrature is limited to d <= 3")
    axes = [np.linspace(lo[k], hi[k], n) for k in range(d)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    vals = -U.value(mesh)
    if not np.all(np.isfinite(vals)):
        raise RuntimeError("non-finite potential on the truncation box; U may be unbounded below")
    w = np.ones(n)
    w[0] = w[-1] = 0.5
    logw = np.zeros(vals.shape)
    for k in range(d):
        shape = [1] * d
        shape[k] = n
        logw = logw + np.log(w * (hi[k] - lo[k]) / (n - 1)).reshape(shape)
    logZ = float(logsumexp(vals + logw))
    if not math.isfinite(logZ):
        raise RuntimeError("quadrature produced a non-finite normalizer")
    quad = {"type": "tensor-trapezoid", "resolution": [n] * d, "box": [lo.tolist(), hi.tolist()]}
    return TargetDensity(U, logZ, None, quad)


def confining_function(U: Potential, x):
    _, g, lap = U.evaluate(x)
    return 0.5 * np.sum(g * g, axis=-1) - lap


def shell_infimum(fun, d: int, r: float, r_out: float, n_radii=64, n_dirs=256, seed=0, polish=8):
    """Infimum of ``fun`` over the shell ``r <= |x| <= r_out``.

    A radius x direction sweep (quasi-random directions for d > 2) seeds
    ``polish`` bounded local searches; narrow valleys between sampled
    directions are otherwise missed.
    """
    radii = np.linspace(r, r_out, n_radii)
    if d == 1:
        dirs = np.array([[1.0], [-1.0]])
    elif d == 2:
        th = 2 * np.pi * (np.arange(n_dirs) + 0.5) / n_dirs
        dirs = np.stack([np.cos(th), np.sin(th)], axis=1)
    else:
        # Sobol points pushed to the sphere through normal quantiles
        sob = qmc.Sobol(d, scramble=True, seed=seed).random(n_dirs)
        g = ndtri(np.clip(sob, 1e-12, 1 - 1e-12))
        dirs = g / np.linalg.norm(g, axis=1, keepdims=True)
    pts = radii[:, None, None] * dirs[None, :, :]
    vals = fun(pts)
    k = np.unravel_index(np.argmin(vals), vals.shape)
    best_val, best_pt = float(vals[k]), pts[k]
    if polish and d > 1:
        # seeds: best radius per direction, then the lowest directions
        per_dir = vals.min(axis=0)
        seeds = np.argsort(per_dir)[:polish]

        def obj(z):
            rho, u = z[0], z[1:]
            nu = np.linalg.norm(u)
            if nu == 0:
                return np.inf
            return float(fun((rho * u / nu)[None, :])[0])

        for j in seeds:
            i = int(np.argmin(vals[:, j]))
            z0 = np.concatenate([[radii[i]], dirs[j]])
            res = optimize.minimize(obj, z0, method="L-BFGS-B",
                                    bounds=[(r, r_out)] + [(None, None)] * d)
            if res.fun < best_val:
                best_val = float(res.fun)
                best_pt = res.x[0] * res.x[1:] / np.linalg.norm(res.x[1:])
    return best_val, best_pt


def confining_report(U: Potential, radii: Sequence[float], r_out_factor=3.0):
    """Table of ``inf_{|x|>=r} (|gradU|^2/2 - lapU)`` over the supplied radii."""
    if U.domain.is_torus:
        raise ValueError("the confinement condition is vacuous on the torus")
    radii = [float(r) for r in radii]
    if any(b <= a for a, b in zip(radii, radii[1:])):
        raise ValueError("radii must be increasing")
    rows = []
    for r in radii:
        inf, where = shell_infimum(lambda p: confining_function(U, p), U.dim, r,
                                   max(r_out_factor * r, r + 10.0))
        rows.append({"r": r, "inf": inf, "argmin": where.tolist()})
    vals = [row["inf"] for row in rows]
    inc = all(b > a for a, b in zip(vals, vals[1:]))
    return {"rows": rows, "satisfied": bool(inc and vals[-1] > 0)}


def heavy_tail(U: Potential, r_probe=(10.0, 20.0, 40.0)) -> bool:
    """True when ``|gradU|^2/2 - lapU`` fails to grow at large radius."""
    vals = [confining_report(U, [r])["rows"][0]["inf"] for r in r_probe]
    return not (vals[0] > 0 and vals[1] > vals[0] and vals[2] > vals[1])


def default_trig_potential():
    """Built-in non-separable trigonometric potential on the unit torus."""
    return Potential.trig([(0.5, 1, 0, 0.0), (0.3, 1, 1, 0.4)])


class TorusDensity:
    """Ad-hoc strictly positive density on a periodic box, given as a callable.

    Used for densities outside the potential families (for example the
    cut-off and floored densities of the full-space construction).
    """

    def __init__(self, fn, box, description=None):
        self.fn = fn
        self.torus_box = tuple(float(b) for b in box)
        self.description = description or {"kind": "callable"}

    is_torus = True
    is_flat = False

    def density(self, x):
        x = np.asarray(x, float)
        return self.fn(x[..., 0], x[..., 1])

    def on_grid(self, grid: Grid2D) -> GridField:
        return GridField(grid, self.density(grid.points()))

    def to_dict(self):
        return dict(self.description)
