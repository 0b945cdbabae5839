import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from arefs.flows import cellular_flow, constant_flow
from arefs.grid import Grid2D, GridField
from arefs.pde import Stepper
from arefs.spectral import (asymptotic_re_check, discretize, poincare_constant, principal_gap, psi_A,
                            r_of_v, spectral_report)
from arefs.targets import Potential, default_trig_potential, normalize

# r(v_1) on the flat torus, dense SVD kernel + dense eigensolver at 32x32
R_DENSE_32 = 70.20415835901157


def _dense_mean_zero(disc, A):
    """Dense -L_A restricted to the orthogonal complement of the constant mode."""
    M = -disc.dense(A)
    u = disc.u
    B = np.linalg.qr(np.column_stack([u, np.eye(disc.n)[:, : disc.n - 1]]))[0][:, 1:]
    return B.T @ M @ B


def _dense_gap(disc, A):
    return float(np.linalg.eigvals(_dense_mean_zero(disc, A)).real.min())


def _dense_psi(disc, A, lams):
    M = _dense_mean_zero(disc, A)
    eye = np.eye(M.shape[0])
    return min(np.linalg.svd(M - 1j * l * eye, compute_uv=False)[-1] for l in lams)


def test_kappa_discrete_exact(flat):
    g = Grid2D.square(32)
    h = 1 / 32
    assert poincare_constant(flat, g) == pytest.approx(4 / h ** 2 * math.sin(math.pi * h) ** 2, rel=1e-10)


def test_kappa_close_to_continuum(flat):
    assert poincare_constant(flat, Grid2D.square(64)) == pytest.approx(4 * math.pi ** 2, rel=0.01)


def test_operator_matches_pde_stepper(trig):
    # two independent assemblies of L_A: face-flux stepper vs conjugated sparse matrix
    from arefs.flows import build_transport_map, pushforward_flow
    flat = normalize(Potential.flat(), 16)
    Z = build_transport_map(flat, trig, 128)
    v = pushforward_flow(cellular_flow(1, flat), Z)
    g = Grid2D.square(32)
    disc = discretize(trig, g, v, A=8.0)
    X, Y = g.mesh()
    f = np.cos(2 * np.pi * X) + 0.3 * np.sin(2 * np.pi * (X + 2 * Y))
    w = trig.density(g.points())
    f = f - np.sum(f * w) / np.sum(w)
    a = disc.apply(GridField(g, f)).values
    b = Stepper(g, trig, trig.potential, v, 8.0).apply(f)
    b = b - np.sum(b * w) / np.sum(w)
    assert np.abs(a - b).max() < 1e-9 * np.abs(b).max()


@pytest.mark.parametrize("A", [0.0, 8.0, 64.0])
def test_gap_matches_dense(flat, A):
    g = Grid2D.square(16)
    disc = discretize(flat, g, cellular_flow(1, flat), A=A)
    m, pair = principal_gap(disc)
    assert m == pytest.approx(_dense_gap(disc, A), rel=1e-8)
    assert pair.dirichlet_quotient == pytest.approx(m, rel=0.01)


def test_gap_zero_amplitude_is_kappa(flat):
    g = Grid2D.square(32)
    disc = discretize(flat, g, cellular_flow(1, flat))
    assert principal_gap(disc)[0] == pytest.approx(poincare_constant(flat, g, disc), rel=1e-9)


def test_psi_matches_dense(flat):
    g = Grid2D.square(12)
    disc = discretize(flat, g, cellular_flow(1, flat), A=8.0)
    psi, lam, info = psi_A(disc)
    dense = _dense_psi(disc, 8.0, np.linspace(lam - 1, lam + 1, 21))
    assert psi == pytest.approx(dense, rel=1e-4)


def test_r_dense_oracle_small(flat):
    g = Grid2D.square(32)
    r = r_of_v(cellular_flow(1, flat), flat, g, method="kernel")
    assert r["value"] == pytest.approx(R_DENSE_32, rel=1e-8)


def test_r_penalty_agrees_with_kernel(flat):
    g = Grid2D.square(32)
    v = cellular_flow(2, flat)
    a = r_of_v(v, flat, g, method="kernel")["value"]
    b = r_of_v(v, flat, g, method="penalty")["value"]
    assert b == pytest.approx(a, rel=1e-6)


def test_shear_has_no_resolvable_first_integral(flat):
    v = constant_flow([1.0, math.sqrt(2.0)], flat)
    r = r_of_v(v, flat, Grid2D.square(32), method="kernel")
    assert math.isinf(r["value"]) and "relaxation-enhancing" in r["tag"]


def test_unknown_method(flat):
    with pytest.raises(ValueError):
        r_of_v(cellular_flow(1, flat), flat, Grid2D.square(16), method="bogus")


def test_single_flow_ladder_is_insufficient(flat):
    rep = asymptotic_re_check([cellular_flow(1, flat)], flat, Grid2D.square(16))
    assert rep["verdict"] == "insufficient ladder" and not rep["pass"]


def test_spectral_report_serialises(flat):
    rep = spectral_report(cellular_flow(1, flat), flat, Grid2D.square(16), amplitudes=(0, 8))
    d = json.loads(rep.to_json())
    assert set(d) == {"kappa", "mA", "psiA", "rv", "grid"}
    assert rep.to_csv().startswith("series,x,y\nkappa,0,")
    assert rep.ordering_ok()


def test_needs_torus(gauss):
    with pytest.raises(ValueError):
        discretize(gauss, Grid2D.square(16))


@given(st.integers(8, 20), st.integers(1, 3))
def test_conjugated_operators_structure(n, k):
    pi = normalize(default_trig_potential(), 64)
    flat = normalize(Potential.flat(), 16)
    from arefs.flows import build_transport_map, pushforward_flow
    g = Grid2D.square(n)
    v = pushforward_flow(cellular_flow(k, flat), _map(pi))
    d = discretize(pi, g, v)
    S, K = d.S0.toarray(), d.Ks.toarray()
    assert np.abs(S - S.T).max() < 1e-12 * np.abs(S).max()
    assert np.abs(K + K.T).max() < 1e-12 * np.abs(K).max()
    assert np.linalg.eigvalsh(S).max() < 1e-9 * np.abs(S).max()
    # constants span an invariant subspace
    assert np.abs(S @ d.u).max() < 1e-10 * np.abs(S).max()
    assert np.abs(K @ d.u).max() < 1e-10 * np.abs(K).max()


_M = {}


def _map(pi):
    if "z" not in _M:
        from arefs.flows import build_transport_map
        _M["z"] = build_transport_map(normalize(Potential.flat(), 16), pi, 128)
    return _M["z"]


@given(st.floats(0, 200))
def test_kappa_below_psi_below_gap(A):
    flat = normalize(Potential.flat(), 16)
    g = Grid2D.square(12)
    disc = discretize(flat, g, cellular_flow(1, flat), A=A)
    kappa = poincare_constant(flat, g, disc)
    m, _ = principal_gap(disc)
    psi, _, _ = psi_A(disc, kappa=kappa)
    assert kappa * (1 - 1e-8) <= psi <= m * (1 + 1e-8)
