import numpy as np
import pytest

from conftest import random_rotation
from spin7cayley.cayley_geometry import (
    adapted_plane, b_tilde_cancellation, calibration_value, complete_spin7_frame,
    frame_pattern_residual, gram_schmidt, is_cayley, orthogonality_char_dim5,
    orthogonality_char_dim6, pi_E, random_cayley_plane, random_spin7_frame,
    restriction_law_residuals, rho, rho_inv, scaffold_fiber, scaffold_projections,
    standard_plane, structure_variation_identity, tau_norm,
)
from spin7cayley.spin7_algebra import cross2_array, pi7_matrix

E = np.eye(8)


def test_calibration_value_examples():
    assert calibration_value(E[:4]) == pytest.approx(1.0)
    assert calibration_value(E[[0, 1, 6, 7]]) == pytest.approx(-1.0)
    assert calibration_value(E[[1, 0, 6, 7]]) == pytest.approx(1.0)


def test_calibration_inequality_and_cayley_equivalence(rng):
    for i in range(2000):
        V = random_cayley_plane(rng).tangent if i % 2 else rng.normal(size=(4, 8))
        lam = calibration_value(V)
        assert abs(lam) <= 1 + 1e-12
        assert (abs(abs(lam) - 1) < 1e-10) == is_cayley(V)


def test_is_cayley_examples(rng):
    assert is_cayley(E[:4])
    A = 5 * rng.normal(size=(4, 4))
    graph = np.hstack([np.eye(4), A])
    assert not is_cayley(graph)
    assert tau_norm(graph) > 1e-3


def test_degenerate_span_rejected():
    with pytest.raises(ValueError):
        calibration_value(np.vstack([E[:3], E[0]]))


def test_complete_standard_frame():
    F = complete_spin7_frame(E[0], E[1], E[2], E[4]).vectors
    assert np.allclose(F, E)


def test_complete_random_frames(rng):
    for _ in range(1000):
        assert frame_pattern_residual(random_spin7_frame(rng)) < 1e-10


def test_complete_frame_errors():
    with pytest.raises(ValueError, match="e5 is not orthogonal to e1"):
        complete_spin7_frame(E[0], E[1], E[2], E[0])
    with pytest.raises(ValueError, match="e1 x e2 x e3"):
        complete_spin7_frame(E[0], E[1], E[2], E[3])
    with pytest.raises(ValueError, match="not orthogonal"):
        complete_spin7_frame(E[0], E[0], E[2], E[4])


def test_gram_schmidt_degenerate():
    with pytest.raises(ValueError):
        gram_schmidt(np.vstack([E[0], 2 * E[0]]))


def test_adapted_plane(rng):
    P = standard_plane()
    assert np.allclose(P.frame, E)
    Q = random_cayley_plane(rng)
    A = adapted_plane(Q.tangent)
    assert frame_pattern_residual(A.frame) < 1e-10
    with pytest.raises(ValueError):
        adapted_plane(E[[0, 1, 2, 4]])


def test_pi_E_examples(rng):
    P = standard_plane()
    assert np.allclose(pi_E(P.e_basis[0], P), [1, 0, 0, 0])
    # anti-self-dual tangent form e12 - e34, embedded by 2 pi_7
    asd = np.zeros(28)
    asd[0], asd[13] = 1.0, -1.0     # e^{12}, e^{34} in lexicographic order
    emb = 2 * pi7_matrix() @ asd
    assert np.allclose(pi_E(emb, P), 0, atol=1e-14)
    for _ in range(100):
        c = cross2_array(rng.normal(size=4) @ P.tangent, rng.normal(size=4) @ P.normal)
        assert np.allclose(pi_E(c, P) @ P.e_basis, c, atol=1e-12)


def test_rho(rng):
    P = standard_plane()
    assert np.allclose(rho(E[0], E[4], P), [1, 0, 0, 0])
    for _ in range(200):
        Q = random_cayley_plane(rng)
        u = gram_schmidt(rng.normal(size=(1, 4)))[0] @ Q.tangent
        s = rng.normal(size=4) @ Q.normal
        r = rho(u, s, Q)
        assert np.linalg.norm(r) == pytest.approx(np.linalg.norm(s))
        assert np.allclose(rho_inv(u, r, Q), s)
    with pytest.raises(ValueError):
        rho(E[4], E[5], P)


def test_scaffold_projections(rng):
    P = standard_plane()
    N = P.normal.T @ P.normal
    for k in range(5):
        S = scaffold_fiber(P, k, random_rotation(rng))
        x = rng.normal(size=8)
        pk, pn, pw = scaffold_projections(x, P, S)
        assert np.allclose(pk + pn, N @ x)
        if k == 0:
            assert np.allclose(pn, 0) and np.allclose(pk, N @ x)
        if k == 4:
            assert np.allclose(pk, 0)


def test_orthogonality_dim5():
    P, B = standard_plane(), E[1:4]
    assert orthogonality_char_dim5(P, B, E[[1, 2, 3, 4, 5]]) == (True, True)
    W = E[[1, 2, 3, 4, 5]].copy()
    W[3] = np.cos(0.1) * E[4] + np.sin(0.1) * E[0]
    assert orthogonality_char_dim5(P, B, W) == (False, False)
    with pytest.raises(ValueError):
        orthogonality_char_dim5(P, B, E[[1, 2, 4, 5, 6]])


def test_orthogonality_dim6():
    P, B = standard_plane(), E[1:4]
    assert orthogonality_char_dim6(P, B, E[[1, 5, 2, 6, 3, 7]]) == (True, True)
    W = E[[1, 5, 2, 6, 3, 7]].copy()
    W[1] = np.cos(0.1) * E[5] + np.sin(0.1) * E[0]
    assert orthogonality_char_dim6(P, B, W) == (False, False)


def test_orthogonality_fuzz(rng):
    P, B = standard_plane(), E[1:4]
    for _ in range(200):
        N = random_rotation(rng) @ E[4:]
        a5 = orthogonality_char_dim5(P, B, np.vstack([B, N[:2]]))
        a6 = orthogonality_char_dim6(P, B, np.vstack([B, N[:3]]))
        assert a5 == (True, True) and a6 == (True, True)
        M = rng.normal(size=(2, 8))
        M = M - M @ B.T @ B
        extra = np.linalg.qr(M.T)[0].T
        a, b = orthogonality_char_dim5(P, B, np.vstack([B, extra]))
        assert a == b


def test_structure_variation_examples(rng):
    P = standard_plane()
    for a in range(4):
        assert structure_variation_identity(P.e_basis[a], P) < 1e-12
    for _ in range(1000):
        Q = random_cayley_plane(rng)
        S = scaffold_fiber(Q, int(rng.integers(0, 5)), random_rotation(rng))
        e = rng.normal(size=28)
        assert structure_variation_identity(e, Q, S) < 1e-10
        assert b_tilde_cancellation(e, Q, S) < 1e-10


def test_restriction_laws(rng):
    res = restriction_law_residuals(random_cayley_plane(rng), rng, 10_000)
    assert max(res.values()) < 1e-10
