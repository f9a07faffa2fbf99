import numpy as np
import pytest

from conftest import random_rotation
from spin7cayley.cli_experiments import smooth_start, translation_perturbation
from spin7cayley.deformation_bvp import BCSpec, FlatCayleyDomain
from spin7cayley.nonlinear_cayley import (
    AffineScaffoldField, GraphField, NewtonError, QuadraticField, ScaffoldPerturbation,
    SlopeBoundError, bump_field, cayley_residual, extend_scaffold_field,
    h_linearisation_identity, lie_variation_check, linearisation_errors, newton_solve,
    nonlinear_B, nonlinear_H, quadratic_rate, random_bumps, scaffold_variation_linearization,
    second_order_residual, volume_and_flux,
)


def _field(dom, amp=1.0):
    X = dom.coords()
    p = 2 * np.pi
    return amp * np.stack([np.sin(p * X[0]) * X[3], np.cos(p * X[1]) * (1 + X[3] ** 2),
                           np.sin(p * (X[0] + X[2])) + X[3], X[3] * np.cos(p * X[2])], -1)


def _rotation(rng):
    R = random_rotation(rng, 4)
    if np.linalg.det(R) < 0:
        R[0] *= -1
    return R


def test_F_vanishes_on_flat_graphs():
    dom = FlatCayleyDomain(5)
    assert np.max(np.abs(cayley_residual(GraphField(dom, np.zeros(dom.shape + (4,)))))) == 0
    c = np.broadcast_to([0.5, -1.0, 2.0, 0.1], dom.shape + (4,))
    assert np.max(np.abs(cayley_residual(GraphField(dom, c)))) < 1e-13


def test_F_translation_equivariant(rng):
    dom = FlatCayleyDomain(6)
    s = smooth_start(dom, 0.05)
    a = rng.normal(size=4)
    F0 = cayley_residual(GraphField(dom, s))
    F1 = cayley_residual(GraphField(dom, s + a))
    assert np.max(np.abs(F0 - F1)) < 1e-13
    assert np.max(np.abs(F0)) > 1e-4


def test_slope_bound():
    dom = FlatCayleyDomain(6)
    with pytest.raises(SlopeBoundError):
        cayley_residual(GraphField(dom, _field(dom, 5.0)))
    with pytest.raises(ValueError):
        GraphField(dom, np.zeros((2, 2)))


@pytest.mark.parametrize("k", [0, 1, 2, 3, 4])
def test_linearisation_errors(k, rng):
    dom = FlatCayleyDomain(6)
    err = linearisation_errors(dom, BCSpec(k, _rotation(rng)), _field(dom))
    assert max(err.values()) < 1e-6


def test_H_linearisation(rng):
    dom = FlatCayleyDomain(6)
    for k in range(5):
        bc = BCSpec(k, _rotation(rng))
        coarse = h_linearisation_identity(dom, bc, _field(dom), eps=1e-4)
        fine = h_linearisation_identity(dom, bc, _field(dom), eps=1e-6)
        # central differences: the error is pure O(eps^2) truncation
        assert fine < 1e-9
        assert fine < 1e-3 * coarse or coarse < 1e-12


def test_H_on_simple_traces():
    dom = FlatCayleyDomain(5)
    bc = BCSpec(2)
    zero = np.zeros(dom.shape + (4,))
    assert np.max(np.abs(nonlinear_H(dom, bc, zero))) == 0
    s = np.broadcast_to([0.3, -0.4, 0.0, 0.0], dom.shape + (4,))
    assert np.max(np.abs(nonlinear_H(dom, bc, s))) < 1e-14


def test_B_strict_rejects_trace_leaving_W():
    dom = FlatCayleyDomain(5)
    s = GraphField(dom, np.broadcast_to([0.0, 0.0, 0.0, 0.2], dom.shape + (4,)))
    with pytest.raises(ValueError, match="leaves W"):
        nonlinear_B(s, BCSpec(2))
    assert nonlinear_B(s, BCSpec(2), strict=False).shape == (2,) + dom.shape[:3] + (4,)


@pytest.mark.parametrize("k", [0, 2, 4])
def test_lie_variation(k, rng):
    dom = FlatCayleyDomain(8)
    for _ in range(3):
        v = QuadraticField.random(rng)
        rep = lie_variation_check(dom, BCSpec(k, _rotation(rng)), v)
        assert rep.f_residual < 1e-6 * max(rep.f_scale, 1)
        assert rep.b_residual < 1e-6 * max(rep.b_scale, 1)


def test_scaffold_extension_properties(rng):
    bc = BCSpec(2, _rotation(rng))
    tf = [AffineScaffoldField(rng.normal(size=8), rng.normal(size=(8, 8))) for _ in range(2)]
    sigma = extend_scaffold_field(tf, bc)
    from spin7cayley.nonlinear_cayley import _W_frame
    W = _W_frame(bc)
    PN = np.eye(8) - W.T @ W
    pts = rng.uniform(0, 1, size=(50, 8)) @ W.T @ W
    pts[:, 3] = 0.0
    want = (tf[0].c + pts @ tf[0].M.T) @ PN
    assert np.allclose(sigma(pts), want, atol=1e-12)
    # constant along the normal directions near W
    n = (rng.normal(size=(50, 8)) @ PN) * 0.01
    assert np.allclose(sigma(pts + n), want, atol=1e-12)
    zero = [AffineScaffoldField(np.zeros(8), np.zeros((8, 8)))] * 2
    assert np.max(np.abs(extend_scaffold_field(zero, bc)(pts + n))) == 0
    with pytest.raises(ValueError):
        extend_scaffold_field(tf, bc, collar=0.5)


def test_scaffold_linearisation(rng):
    dom = FlatCayleyDomain(5)
    for k in (1, 2, 3):
        bc = BCSpec(k, _rotation(rng))
        tf = [AffineScaffoldField(rng.normal(size=8), rng.normal(size=(8, 8))) for _ in range(2)]
        assert scaffold_variation_linearization(dom, bc, tf) < 1e-6


def test_newton_zero_perturbation():
    dom = FlatCayleyDomain(5)
    pert = ScaffoldPerturbation(np.zeros((2,) + dom.shape[:3] + (4,)))
    res = newton_solve(dom, BCSpec(0), pert)
    assert res.converged and res.trace == [0.0] and res.iterations == 0


def test_newton_translation():
    dom = FlatCayleyDomain(5)
    pert, shift = translation_perturbation(dom, 0.05)
    res = newton_solve(dom, BCSpec(0), pert)
    assert res.converged and res.iterations <= 2
    assert np.max(np.abs(res.solution - shift)) < 1e-10


def test_newton_quadratic_convergence():
    dom = FlatCayleyDomain(6)
    pert, shift = translation_perturbation(dom, 0.05)
    res = newton_solve(dom, BCSpec(0), pert, s0=shift + smooth_start(dom, 0.03))
    assert res.converged and 2 <= res.iterations <= 6
    assert np.max(np.abs(res.solution - shift)) < 1e-8
    assert quadratic_rate(res.trace) < 100


def test_newton_errors():
    dom = FlatCayleyDomain(5)
    with pytest.raises(ValueError, match="non-generic"):
        newton_solve(dom, BCSpec(2), ScaffoldPerturbation(np.zeros((2,) + dom.shape[:3] + (4,))))
    X = dom.coords()
    v = np.sin(2 * np.pi * X[1][..., 0])[..., None] * np.array([1.0, 0.5, -0.3, 0.2])
    pert = ScaffoldPerturbation(np.stack([v, -v]) * 100)
    with pytest.raises(NewtonError) as info:
        newton_solve(dom, BCSpec(0), pert)
    assert len(info.value.trace) >= 1


def test_quadratic_rate():
    assert quadratic_rate([1e-1, 1e-2, 1e-4, 1e-8]) == pytest.approx(1.0)
    assert quadratic_rate([1e-1, 1e-20]) == 0.0


def test_volume_flux(rng):
    dom = FlatCayleyDomain(8)
    flat = volume_and_flux(GraphField(dom, np.zeros(dom.shape + (4,))))
    assert flat.volume == pytest.approx(1.0) and flat.flux == pytest.approx(1.0)
    for _ in range(5):
        s = random_bumps(dom, rng, count=8, amplitude=0.02, radius=0.35)
        vf = volume_and_flux(s)
        assert np.min(vf.margin) >= -1e-12
        assert vf.volume >= vf.flux - 1e-12
        assert abs(vf.flux - 1.0) < 1e-6
    single = bump_field(dom, (0.5, 0.5, 0.5, 0.5), 0.3, [0.05, 0, 0, 0])
    assert volume_and_flux(single).volume > 1.0


def test_second_order_residual_zero_for_constants():
    dom = FlatCayleyDomain(5)
    c = np.broadcast_to([0.1, 0.2, 0.3, 0.4], dom.shape + (4,))
    assert np.max(np.abs(second_order_residual(GraphField(dom, c)))) < 1e-12
