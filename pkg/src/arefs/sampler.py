"""Euler-Maruyama ensembles for ``dX = (A v(X) - gradU(X)) dt + sqrt(2) dW``."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import ndtri

from .grid import Grid2D

_MASK64 = (1 << 64) - 1


def counter_uniforms(seed: int, step: int, count: int, offset: int = 0) -> np.ndarray:
    """Uniforms in (0, 1) at positions ``offset .. offset+count`` of the stream (seed, step).

    Philox is counter based, so any slice of any step can be regenerated
    without touching the others; draw j of step s depends on (seed, s, j) only.
    """
    bg = np.random.Philox(key=int(seed) & _MASK64, counter=[0, 0, 0, int(step)])
    if offset:
        # each counter increment yields four 64-bit words
        bg.advance(offset // 4)
        skip = offset % 4
    else:
        skip = 0
    raw = bg.random_raw(count + skip)[skip:]
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def counter_normals(seed, step, count, offset=0):
    return ndtri(counter_uniforms(seed, step, count, offset))


@dataclass
class TrajectoryEnsemble:
    N: int
    d: int
    seed: int
    snapshots: List[Tuple[float, np.ndarray]] = field(default_factory=list)
    params: dict = field(default_factory=dict)

    @property
    def times(self):
        return [t for t, _ in self.snapshots]

    def at(self, t):
        for s, x in self.snapshots:
            if abs(s - t) <= 1e-12 * max(1.0, abs(t)):
                return x
        raise KeyError(f"no snapshot at t={t}")

    def final(self):
        return self.snapshots[-1][1]

    def to_bytes(self) -> bytes:
        header = {"N": self.N, "d": self.d, "times": self.times, "seed": self.seed,
                  "params": self.params}
        body = b"".join(np.ascontiguousarray(x, dtype="<f8").tobytes() for _, x in self.snapshots)
        return (json.dumps(header, sort_keys=True) + "\n").encode() + body

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode())
            raw = np.frombuffer(fh.read(), dtype="<f8")
        N, d = header["N"], header["d"]
        snaps = []
        for k, t in enumerate(header["times"]):
            snaps.append((t, raw[k * N * d:(k + 1) * N * d].reshape(N, d).copy()))
        return cls(N, d, header["seed"], snaps, header["params"])

    def snapshot_csv(self, k) -> str:
        x = self.snapshots[k][1]
        cols = ",".join(f"x{i}" for i in range(self.d))
        return cols + "\n" + "\n".join(",".join(repr(float(c)) for c in row) for row in x) + "\n"


def _hessian_bound(U, pts, eps=1e-4):
    """Largest Hessian spectral norm over sample points (central differences of gradU)."""
    d = pts.shape[-1]
    H = np.empty(pts.shape[:-1] + (d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = eps
        H[..., :, k] = (U.grad(pts + e) - U.grad(pts - e)) / (2 * eps)
    H = 0.5 * (H + np.swapaxes(H, -1, -2))
    return float(np.abs(np.linalg.eigvalsh(H)).max())


def _sample_points(pi, n=64):
    if pi.is_torus:
        x0, y0, L1, L2 = pi.torus_box
        return Grid2D(n, n, (x0, y0), (L1, L2)).points()
    lo, hi = pi.box()
    d = lo.size
    axes = [np.linspace(lo[k], hi[k], n if d <= 2 else 17) for k in range(d)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def stable_dt(pi, v=None, A=0.0):
    """``0.5 / (A Lip(v) + Lip(gradU))`` with both constants estimated on a grid."""
    lipU = _hessian_bound(pi.potential, _sample_points(pi))
    lipv = 0.0
    if v is not None and A:
        if pi.is_torus:
            x0, y0, L1, L2 = pi.torus_box
            g = Grid2D(128, 128, (x0, y0), (L1, L2))
        else:
            lo, hi = pi.box()
            g = Grid2D(128, 128, (lo[0], lo[1]), (hi[0] - lo[0], hi[1] - lo[1]))
        lipv = v.lipschitz(g)
    rate = A * lipv + lipU
    return math.inf if rate == 0 else 0.5 / rate


class BlowUpError(RuntimeError):
    pass


def simulate(pi, v=None, A: float = 0.0, N: int = 1000, dt: float = 1e-3, T: float = 1.0,
             seed: int = 0, cadence: Optional[float] = None, x0=None, check_dt=True) -> TrajectoryEnsemble:
    """Euler-Maruyama ensemble; ``x0`` is an (N, d) array or a single point (default: sample pi)."""
    if N < 1:
        raise ValueError("need at least one particle")
    if A < 0:
        raise ValueError("A must be nonnegative")
    U = pi.potential
    d = U.dim
    if check_dt:
        bound = stable_dt(pi, v, A)
        if dt > bound * (1 + 1e-12):
            raise ValueError(f"dt={dt:.3e} exceeds the stability bound {bound:.3e}")
    if x0 is None:
        x = sample_target(pi, N, seed=seed + 1)
    else:
        x = np.array(np.broadcast_to(np.asarray(x0, float), (N, d)))
    steps = max(1, int(round(T / dt)))
    every = steps if cadence is None else max(1, int(round(cadence / dt)))
    torus = pi.is_torus
    if torus:
        x0b, y0b, L1, L2 = pi.torus_box
        lo, L = np.array([x0b, y0b]), np.array([L1, L2])
        x = lo + np.mod(x - lo, L)
    else:
        qlo, qhi = pi.box()
        safety = 10 * float(np.max(np.abs(np.concatenate([qlo, qhi]))))
    noise = math.sqrt(2 * dt)
    ens = TrajectoryEnsemble(N, d, int(seed), [(0.0, x.copy())],
                             {"dt": dt, "A": A, "T": steps * dt, "scheme": "euler-maruyama",
                              "flow": None if v is None else v.kind,
                              "potential": U.to_dict()})
    for s in range(1, steps + 1):
        drift = -U.grad(x)
        if v is not None and A:
            drift = drift + A * v.velocity(x)
        xi = counter_normals(seed, s, N * d).reshape(N, d)
        x = x + dt * drift + noise * xi
        if torus:
            x = lo + np.mod(x - lo, L)
        else:
            rad = np.sqrt(np.sum(x * x, axis=1))
            if not np.all(np.isfinite(rad)) or rad.max() > safety:
                i = int(np.nanargmax(np.where(np.isfinite(rad), rad, np.inf)))
                raise BlowUpError(f"particle {i} left the safety box |x| <= {safety:g} at step {s}; "
                                  "reduce dt")
        if s % every == 0 or s == steps:
            ens.snapshots.append((s * dt, x.copy()))
    return ens


def sample_target(pi, N: int, seed: int = 0, transport_map=None) -> np.ndarray:
    """N i.i.d. draws from pi (uniform, transport map for torus targets, Gaussian closed form)."""
    U = pi.potential
    if pi.is_torus:
        x0, y0, L1, L2 = pi.torus_box
        u = counter_uniforms(seed, 0, 2 * N).reshape(N, 2)
        base = np.array([x0, y0]) + u * np.array([L1, L2])
        if pi.is_flat:
            return base
        if transport_map is None:
            from .flows import build_transport_map
            from .targets import normalize, Potential
            flat = normalize(Potential.flat(L1), 64)
            transport_map = build_transport_map(flat, pi, 512)
        return transport_map.forward(base)
    if U.family == "gaussian":
        d = U.dim
        m = np.asarray(U.parameters[:d])
        s = np.sqrt(np.asarray(U.parameters[d:]))
        return m + s * counter_normals(seed, 0, N * d).reshape(N, d)
    raise ValueError(f"no exact sampler for the {U.family} family")
