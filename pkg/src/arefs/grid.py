"""Uniform 2D grids and scalar fields sampled on them."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np


@dataclass(frozen=True)
class Grid2D:
    """Uniform node-centred grid on a rectangle.

    Nodes sit at ``origin + (i*hx, j*hy)`` for ``i < nx``, ``j < ny``.  Arrays
    sampled on the grid have shape ``(nx, ny)`` with the first index running
    along x (row-major storage).
    """

    nx: int
    ny: int
    origin: Tuple[float, float] = (0.0, 0.0)
    lengths: Tuple[float, float] = (1.0, 1.0)
    periodic: bool = True

    def __post_init__(self):
        if int(self.nx) < 8 or int(self.ny) < 8:
            raise ValueError(f"grid needs nx, ny >= 8, got {self.nx}x{self.ny}")
        if min(self.lengths) <= 0:
            raise ValueError("side lengths must be positive")
        object.__setattr__(self, "nx", int(self.nx))
        object.__setattr__(self, "ny", int(self.ny))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "lengths", (float(self.lengths[0]), float(self.lengths[1])))

    @classmethod
    def square(cls, n: int, side: float = 1.0, origin=(0.0, 0.0), periodic=True) -> "Grid2D":
        return cls(n, n, origin, (side, side), periodic)

    @classmethod
    def box(cls, n: int, lo: float, hi: float) -> "Grid2D":
        """Periodic-indexed grid covering ``[lo, hi)^2`` (used for truncated R^2 work)."""
        return cls(n, n, (lo, lo), (hi - lo, hi - lo), True)

    @property
    def shape(self):
        return (self.nx, self.ny)

    @property
    def hx(self) -> float:
        return self.lengths[0] / self.nx

    @property
    def hy(self) -> float:
        return self.lengths[1] / self.ny

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    def axes(self, offset=(0.0, 0.0)):
        x = self.origin[0] + (np.arange(self.nx) + offset[0]) * self.hx
        y = self.origin[1] + (np.arange(self.ny) + offset[1]) * self.hy
        return x, y

    def mesh(self, offset=(0.0, 0.0)):
        x, y = self.axes(offset)
        return np.meshgrid(x, y, indexing="ij")

    def points(self, offset=(0.0, 0.0)) -> np.ndarray:
        X, Y = self.mesh(offset)
        return np.stack([X, Y], axis=-1)

    def refined(self, factor: int = 2) -> "Grid2D":
        return Grid2D(self.nx * factor, self.ny * factor, self.origin, self.lengths, self.periodic)

    def wrap(self, pts: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.origin)
        L = np.asarray(self.lengths)
        return lo + np.mod(np.asarray(pts) - lo, L)

    def to_dict(self):
        return {"nx": self.nx, "ny": self.ny, "origin": list(self.origin),
                "lengths": list(self.lengths), "periodic": self.periodic}

    @classmethod
    def from_dict(cls, d):
        return cls(d["nx"], d["ny"], tuple(d.get("origin", (0.0, 0.0))),
                   tuple(d.get("lengths", (1.0, 1.0))), bool(d.get("periodic", True)))


@dataclass
class GridField:
    """Scalar field on a :class:`Grid2D`; ``values`` has shape ``(nx, ny)``."""

    grid: Grid2D
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.size != self.grid.nx * self.grid.ny:
            raise ValueError("value count does not match grid")
        v = v.reshape(self.grid.shape)
        if not np.all(np.isfinite(v)):
            raise ValueError("grid field contains non-finite values")
        self.values = v

    def _check(self, other):
        if isinstance(other, GridField):
            if other.grid != self.grid:
                raise ValueError("fields live on different grids")
            return other.values
        return other

    def __add__(self, other):
        return GridField(self.grid, self.values + self._check(other))

    def __sub__(self, other):
        return GridField(self.grid, self.values - self._check(other))

    def __mul__(self, other):
        return GridField(self.grid, self.values * self._check(other))

    __radd__ = __add__
    __rmul__ = __mul__

    def integral(self) -> float:
        return float(self.values.sum() * self.grid.cell_area)

    def max_norm(self) -> float:
        return float(np.abs(self.values).max())

    def l2_norm(self) -> float:
        return float(np.sqrt((self.values ** 2).sum() * self.grid.cell_area))


def _domain_tag(grid: Grid2D):
    return {"origin": list(grid.origin), "lengths": list(grid.lengths), "periodic": grid.periodic}


def write_grid_field(path, gf: GridField):
    """JSON header line ``{nx, ny, domain}`` followed by raw little-endian float64."""
    header = {"nx": gf.grid.nx, "ny": gf.grid.ny, "domain": _domain_tag(gf.grid)}
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(np.ascontiguousarray(gf.values, dtype="<f8").tobytes())


def read_grid_field(path) -> GridField:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        raw = fh.read()
    dom = header["domain"]
    grid = Grid2D(header["nx"], header["ny"], tuple(dom["origin"]), tuple(dom["lengths"]),
                  bool(dom["periodic"]))
    vals = np.frombuffer(raw, dtype="<f8").reshape(grid.shape).copy()
    return GridField(grid, vals)
