import numpy as np
import pytest

from spin7cayley.calibration_structures import (
    G2Data, SU4Data, WarpedMetricModel, associative_coassociative_test, bs_warping,
    christoffel_fiber_check, restrict_to_5plane, restrict_to_6plane, restrict_to_7plane,
    six_plane_residuals, special_lagrangian_test, spin7_from_g2, spin7_from_su4,
    standard_g2_data, standard_su4_data, validate_spin7_form,
)
from spin7cayley.spin7_algebra import KForm, basis_form, hodge_star, inner, phi0, wedge

E = np.eye(8)


def test_su4_construction_is_spin7():
    Phi = spin7_from_su4(standard_su4_data())
    rep = validate_spin7_form(Phi)
    assert rep.passed
    assert hodge_star(Phi).allclose(Phi)


def test_su4_zero_real_part_fails_validation():
    d = standard_su4_data()
    w = d.omega
    bad = -0.5 * wedge(w, w)
    rep = validate_spin7_form(bad)
    # six unit monomials: |w^w/2|^2 = 6, and ReOmega adds the other eight of 14
    assert rep.norm_sq == pytest.approx(6.0)
    assert not rep.passed


def test_su4_unnormalised_rejected():
    d = standard_su4_data()
    with pytest.raises(ValueError):
        spin7_from_su4(SU4Data(2 * d.omega, d.re_omega4, d.im_omega4))


def test_g2_construction():
    Phi = spin7_from_g2(standard_g2_data())
    assert Phi.allclose(phi0())
    assert inner(Phi, Phi) == pytest.approx(14.0)
    assert validate_spin7_form(Phi).spectrum_ok


def test_g2_mismatched_dual_rejected():
    d = standard_g2_data()
    with pytest.raises(ValueError):
        spin7_from_g2(G2Data(d.phi3, -d.psi4))


def test_validator_negative_cases():
    assert not validate_spin7_form(basis_form(1, 2, 3, 4) + basis_form(5, 6, 7, 8)).norm_ok
    rep = validate_spin7_form(2 * phi0())
    assert not rep.norm_ok and not rep.spectrum_ok


def test_restrict_to_7plane():
    phi = restrict_to_7plane(phi0(), E[1:])
    assert inner(phi, phi) == pytest.approx(7.0)
    assert restrict_to_7plane(KForm.zero(4), E[1:]).norm() == 0.0


def test_restrict_to_6plane_standard():
    om = restrict_to_6plane(phi0(), E[:6])
    want = basis_form(1, 2, dim=6) - basis_form(3, 4, dim=6) - basis_form(5, 6, dim=6)
    assert om.allclose(want)
    r1, r2 = six_plane_residuals(phi0(), E[:6])
    assert r1 < 1e-12 and r2 < 1e-12


def test_restrict_to_5plane():
    n = restrict_to_5plane(phi0(), E[:5]) @ E[:5]
    assert np.allclose(np.abs(n), E[4])
    assert np.allclose(restrict_to_5plane(KForm.zero(4), E[:5]), 0)


def test_non_orthonormal_frame_rejected():
    with pytest.raises(ValueError):
        restrict_to_6plane(phi0(), 2 * E[:6])


def test_special_lagrangian():
    d = standard_su4_data()
    real = E[[0, 2, 4, 6]]
    rep = special_lagrangian_test(real, d)
    assert rep.calibrated and rep.vanishing
    cplx = E[[0, 1, 2, 3]]
    rep = special_lagrangian_test(cplx, d)
    assert not rep.calibrated and rep.omega_norm > 0.5


def test_special_lagrangian_agreement(rng):
    d = standard_su4_data()
    for _ in range(300):
        F = np.linalg.qr(rng.normal(size=(8, 4)))[0].T
        assert special_lagrangian_test(F, d).agree


def test_associative_and_coassociative():
    d = standard_g2_data()
    E7 = np.eye(7)
    # phi = e1 -| Phi_0 on x2..x8 has +1 on (x2, x3, x4)
    assert associative_coassociative_test(E7[:3], d).associative
    rep = associative_coassociative_test(E7[3:], d)
    assert rep.coassociative and rep.phi_vanishes
    with pytest.raises(ValueError):
        associative_coassociative_test(E7[:2], d)


def test_coassociative_agreement(rng):
    d = standard_g2_data()
    for _ in range(300):
        F = np.linalg.qr(rng.normal(size=(7, 4)))[0].T
        assert associative_coassociative_test(F, d).agree


def test_bs_warping_values():
    assert bs_warping(0.0) == (5.0, 4.0)
    fs, fn = bs_warping(1.0)
    assert fs == pytest.approx(5 * 2**0.6) and fn == pytest.approx(4 * 2**-0.4)
    fs, fn = bs_warping(0.5, "incomplete")
    assert fs == pytest.approx(-5 * 0.75**0.6) and fn == pytest.approx(4 * 0.75**-0.4)
    with pytest.raises(ValueError):
        bs_warping(1.0, "incomplete")


def _anti(M):
    return M - np.swapaxes(M, -1, -2)


def test_christoffel_untwisted_is_zero():
    m = WarpedMetricModel(np.zeros((4, 4, 4)))
    assert christoffel_fiber_check(m, 1e-3) < 1e-13


def test_christoffel_twisted_second_order(rng):
    m = WarpedMetricModel(_anti(rng.normal(size=(4, 4, 4))), _anti(rng.normal(size=(4, 4, 4, 4))),
                          0.3 * rng.normal(size=(4, 4, 4)))
    x0 = 0.1 * rng.normal(size=4)
    a, b = (christoffel_fiber_check(m, h, x0) for h in (2e-3, 1e-3))
    assert b < 1e-5
    assert np.log2(a / b) > 1.9


def test_christoffel_negative_control(rng):
    S = rng.normal(size=(4, 4, 4))
    S = S + np.swapaxes(S, -1, -2)
    with pytest.raises(ValueError):
        WarpedMetricModel(S)
    m = WarpedMetricModel(S, strict=False)
    vals = [christoffel_fiber_check(m, h) for h in (1e-2, 1e-3)]
    assert min(vals) > 1e-2
