import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from spin7cayley.spin7_algebra import (
    KForm, algebra_identity_residuals, basis_form, cross2, cross2_array, cross3,
    cross3_array, cross_table_residuals, hodge_star, inner, lambda2_project,
    lambda4_projectors, lambda4_project, phi0, phi0_eval_array, star_wedge_matrix,
    tau4, tau4_array, wedge, wedge11,
)

E = np.eye(8)
vec8 = arrays(np.float64, 8, elements=st.floats(-1, 1, allow_nan=False))


def test_phi0_coefficients():
    P = phi0()
    assert P.coeff(1, 2, 3, 4) == 1.0
    assert P.coeff(3, 4, 5, 6) == -1.0
    assert P.coeff(1, 2, 7, 8) == -1.0
    assert np.count_nonzero(P.coeffs) == 14
    assert inner(P, P) == pytest.approx(14.0)


def test_phi0_self_dual():
    assert hodge_star(phi0()).allclose(phi0())


def test_cross2_e1_e5():
    want = 0.5 * (basis_form(1, 5) + basis_form(2, 6) + basis_form(3, 7) + basis_form(4, 8))
    assert cross2(E[0], E[4]).allclose(want)


def test_cross2_table_entry():
    assert cross2(E[0], E[5]).allclose(-cross2(E[1], E[4]))


def test_cross_table_all_sixteen():
    r = cross_table_residuals()
    assert r.shape == (16,)
    assert np.max(r) < 1e-14


def test_cross3_examples():
    assert np.allclose(cross3(E[1], E[2], E[3]), E[0])
    assert np.allclose(cross3(E[0], E[1], E[2]), -E[3])


def test_tau_examples():
    assert np.allclose(tau4_array(*E[:4]), 0)
    assert tau4(E[4], E[1], E[2], E[3]).allclose(cross2(E[0], E[4]))


def test_star_wedge_spectrum():
    ev = np.sort(np.linalg.eigvalsh(star_wedge_matrix(phi0())))
    assert np.allclose(ev[:7], -3, atol=1e-8)
    assert np.allclose(ev[7:], 1, atol=1e-8)


def test_lambda4_splitting():
    P = lambda4_projectors()
    assert P["rank7"] == 7
    dims = [round(np.trace(P[k])) for k in ("1", "7", "27", "35")]
    assert dims == [1, 7, 27, 35]
    split = lambda4_project(phi0())
    assert split.part1.allclose(phi0())
    for part in (split.part7, split.part27, split.part35):
        assert part.norm() < 1e-10


def test_lambda4_projectors_orthogonal():
    P = lambda4_projectors()
    keys = ("1", "7", "27", "35")
    for a in keys:
        assert np.max(np.abs(P[a] @ P[a] - P[a])) < 1e-10
        for b in keys:
            if a < b:
                assert np.max(np.abs(P[a] @ P[b])) < 1e-10


def test_wedge_degree_overflow():
    with pytest.raises(ValueError):
        wedge(phi0(), KForm(5, np.zeros(56)))


def test_kform_rejects_bad_size():
    with pytest.raises(ValueError):
        KForm(2, np.zeros(27))


@settings(max_examples=200, deadline=None)
@given(vec8, vec8)
def test_cross2_in_lambda2_7_and_norm(v, w):
    c = cross2(v, w)
    assert lambda2_project(c).part21.norm() < 1e-12
    vw = wedge11(v, w)
    assert inner(c, c) == pytest.approx(vw @ vw, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(vec8, vec8, vec8)
def test_cross3_alternating(u, v, w):
    assert np.allclose(cross3_array(u, u, w), 0, atol=1e-12)
    assert np.allclose(cross3_array(u, v, w), -cross3_array(v, u, w), atol=1e-12)
    assert np.allclose(cross3_array(u, v, w), cross3_array(v, w, u), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(vec8, vec8, vec8, vec8)
def test_inner_cross2_identity(a, b, c, d):
    lhs = cross2_array(a, b) @ cross2_array(c, d)
    rhs = -phi0_eval_array(a, b, c, d) + (a @ c) * (b @ d) - (a @ d) * (b @ c)
    assert lhs == pytest.approx(rhs, abs=1e-12)


def test_identity_suite(rng):
    res = algebra_identity_residuals(rng, 2000)
    assert set(res) >= {"inner_cross2", "inner_tau", "cross2_norm", "tau_alternating", "cross_table"}
    assert max(res.values()) < 1e-10
