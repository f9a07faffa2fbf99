"""Cayley planes, Spin(7)-frames, the bundle E and the pointwise identities
behind the deformation theory with boundary."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration_structures import check_orthonormal, restrict_to_5plane, restrict_to_6plane
from .spin7_algebra import (
    ALGEBRA_TOL,
    KForm,
    cross2_array,
    cross3_array,
    phi0,
    phi0_eval_array,
    pi7_matrix,
    restrict,
    tau4_array,
)

PIVOT_TOL = 1e-12


def gram_schmidt(vectors, pivot_tol: float = PIVOT_TOL) -> np.ndarray:
    """Modified Gram-Schmidt; rejects (does not regularise) degenerate input."""
    V = np.array(vectors, dtype=float, copy=True)
    scale = max(np.max(np.linalg.norm(V, axis=1)), 1.0)
    for i in range(V.shape[0]):
        for j in range(i):
            V[i] -= (V[j] @ V[i]) * V[j]
        nrm = np.linalg.norm(V[i])
        if nrm < pivot_tol * scale:
            raise ValueError(f"degenerate span: pivot {i} has norm {nrm:.2e}")
        V[i] /= nrm
    return V


def _unit(v):
    return np.asarray(v, float) / np.linalg.norm(v)


# ---------------------------------------------------------------------------
# frames and planes

@dataclass(frozen=True)
class Spin7Frame:
    vectors: np.ndarray            # rows e1..e8

    def pattern_residual(self) -> float:
        return frame_pattern_residual(self.vectors)


def frame_pattern_residual(F: np.ndarray) -> float:
    """Orthonormality defect and deviation of the pulled-back Phi_0 from its pattern."""
    F = np.asarray(F, float)
    orth = np.max(np.abs(F @ F.T - np.eye(8)))
    patt = np.max(np.abs(restrict(phi0(), F).coeffs - phi0().coeffs))
    return float(max(orth, patt))


def calibration_value(V) -> float:
    F = gram_schmidt(V)
    if F.shape != (4, 8):
        raise ValueError("need four vectors in R^8")
    return float(phi0_eval_array(*F))


def tau_norm(V) -> float:
    F = gram_schmidt(V)
    return float(np.linalg.norm(tau4_array(*F)))


def is_cayley(V, tol: float = 1e-8) -> bool:
    return tau_norm(V) < tol


def complete_spin7_frame(e1, e2, e3, e5, tol: float = ALGEBRA_TOL) -> Spin7Frame:
    e1, e2, e3, e5 = (np.asarray(v, float) for v in (e1, e2, e3, e5))
    named = {"e1": e1, "e2": e2, "e3": e3}
    for a, va in named.items():
        if abs(va @ va - 1.0) > tol:
            raise ValueError(f"{a} is not a unit vector")
        for b, vb in named.items():
            if a < b and abs(va @ vb) > tol:
                raise ValueError(f"{a} and {b} are not orthogonal")
    if abs(e5 @ e5 - 1.0) > tol:
        raise ValueError("e5 is not a unit vector")
    e123 = cross3_array(e1, e2, e3)
    for a, va in (("e1", e1), ("e2", e2), ("e3", e3), ("e1 x e2 x e3", e123)):
        if abs(va @ e5) > tol:
            raise ValueError(f"e5 is not orthogonal to {a}")
    e4 = -e123
    e6 = -cross3_array(e1, e2, e5)
    e7 = -cross3_array(e1, e3, e5)
    e8 = cross3_array(e2, e3, e5)
    return Spin7Frame(np.array([e1, e2, e3, e4, e5, e6, e7, e8]))


_E5_CANDIDATES = np.eye(8)[[4, 5, 6, 7, 0, 1, 2, 3]]


@dataclass(frozen=True)
class CayleyPlane:
    tangent: np.ndarray        # 4 x 8, positive orthonormal frame
    normal: np.ndarray         # 4 x 8, completes tangent to a Spin(7)-frame
    e_basis: np.ndarray        # 4 x 28, e1 x normal[a]

    @property
    def frame(self) -> np.ndarray:
        return np.vstack([self.tangent, self.normal])


def standard_plane() -> CayleyPlane:
    return adapted_plane(np.eye(8)[:4])


def adapted_plane(V, tol: float = 1e-8) -> CayleyPlane:
    T = gram_schmidt(V)
    lam = float(phi0_eval_array(*T))
    if np.linalg.norm(tau4_array(*T)) > tol or lam < 0:
        raise ValueError("plane is not a positively oriented Cayley plane")
    e5 = None
    for c in _E5_CANDIDATES:
        r = c - T.T @ (T @ c)
        if np.linalg.norm(r) > 0.5:
            e5 = _unit(r)
            break
    if e5 is None:  # cannot happen for a 4-plane in R^8, kept for clarity
        raise ValueError("no admissible e5")
    fr = complete_spin7_frame(T[0], T[1], T[2], e5).vectors
    if np.max(np.abs(fr[3] - T[3])) > 1e-8:
        raise ValueError("fourth tangent vector disagrees with the completion")
    tangent, normal = fr[:4], fr[4:]
    return CayleyPlane(tangent, normal, cross2_array(tangent[0], normal))


def random_spin7_frame(rng: np.random.Generator) -> np.ndarray:
    """A Spin(7)-frame obtained by completing random admissible data."""
    e1, e2, e3 = gram_schmidt(rng.normal(size=(3, 8)))
    e4 = -cross3_array(e1, e2, e3)
    Q = np.array([e1, e2, e3, e4])
    r = rng.normal(size=8)
    e5 = _unit(r - Q.T @ (Q @ r))
    return complete_spin7_frame(e1, e2, e3, e5).vectors


def random_cayley_plane(rng: np.random.Generator) -> CayleyPlane:
    F = random_spin7_frame(rng)
    return CayleyPlane(F[:4], F[4:], cross2_array(F[0], F[4:]))


# ---------------------------------------------------------------------------
# the bundle E and the boundary maps

def pi_E(alpha, P: CayleyPlane) -> np.ndarray:
    a = alpha.coeffs if isinstance(alpha, KForm) else np.asarray(alpha, float)
    return a @ P.e_basis.T


def rho(u, s, P: CayleyPlane, tol: float = ALGEBRA_TOL) -> np.ndarray:
    """E-coordinates of u x s for u a unit tangent vector."""
    u = _tangent_unit(u, P, tol)
    return pi_E(cross2_array(u, s), P)


def rho_matrix(u, P: CayleyPlane, tol: float = ALGEBRA_TOL) -> np.ndarray:
    """M[a, b] = <u x normal[a], e_basis[b]>, so rho(s) = s_normal @ M."""
    u = _tangent_unit(u, P, tol)
    return cross2_array(u, P.normal) @ P.e_basis.T


def rho_inv(u, coords, P: CayleyPlane, tol: float = ALGEBRA_TOL) -> np.ndarray:
    R = rho_matrix(u, P, tol)
    return np.linalg.solve(R.T, np.asarray(coords, float)) @ P.normal


def _tangent_unit(u, P, tol):
    u = np.asarray(u, float)
    if abs(u @ u - 1.0) > tol or np.linalg.norm(u - P.tangent.T @ (P.tangent @ u)) > tol:
        raise ValueError("u must be a unit tangent vector")
    return u


@dataclass(frozen=True)
class ScaffoldFiber:
    k: int
    w_tangent_normals: np.ndarray   # k x 8
    k_basis: np.ndarray             # (4-k) x 8
    boundary_tangent: np.ndarray    # 3 x 8, tangent to the boundary of X


def scaffold_fiber(P: CayleyPlane, k: int, rotation=None, u_index: int = 0) -> ScaffoldFiber:
    """Split the normal space: first k rotated normals lie in W, the rest span K."""
    if not 0 <= k <= 4:
        raise ValueError("k must be in 0..4")
    R = np.eye(4) if rotation is None else np.asarray(rotation, float)
    check_orthonormal(R, 1e-10, "rotation")
    N = R @ P.normal
    bt = np.delete(P.tangent, u_index, axis=0)
    return ScaffoldFiber(k, N[:k], N[k:], bt)


def scaffold_projections(x, P: CayleyPlane, S: ScaffoldFiber):
    x = np.asarray(x, float)
    pk = S.k_basis.T @ (S.k_basis @ x)
    pn = S.w_tangent_normals.T @ (S.w_tangent_normals @ x)
    TW = np.vstack([S.boundary_tangent, S.w_tangent_normals])
    pw = TW.T @ (TW @ x)
    return pk, pn, pw


# ---------------------------------------------------------------------------
# meeting the scaffold orthogonally

def _inward_conormal(P: CayleyPlane, boundary):
    B = gram_schmidt(boundary)
    r = P.tangent.T @ (P.tangent @ B.T)
    if np.max(np.abs(r - B.T)) > 1e-10:
        raise ValueError("boundary 3-plane is not inside the Cayley plane")
    for t in P.tangent:
        c = t - B.T @ (B @ t)
        if np.linalg.norm(c) > 0.5:
            return B, _unit(c)
    raise ValueError("no conormal found")


def _check_contains(Wf, B):
    r = Wf.T @ (Wf @ B.T)
    if np.max(np.abs(r - B.T)) > 1e-10:
        raise ValueError("boundary is not contained in W")


def orthogonality_char_dim5(P: CayleyPlane, boundary, W, tol: float = 1e-9):
    """(u orthogonal to W, n tangent to the boundary), which must agree."""
    B, u = _inward_conormal(P, boundary)
    Wf = check_orthonormal(W, what="5-frame")
    _check_contains(Wf, B)
    n = restrict_to_5plane(phi0(), Wf) @ Wf
    flag_a = bool(np.linalg.norm(Wf @ u) < tol)
    flag_b = bool(np.linalg.norm(n - B.T @ (B @ n)) < tol)
    return flag_a, flag_b


def orthogonality_char_dim6(P: CayleyPlane, boundary, W, tol: float = 1e-9):
    """(u orthogonal to W, omega vanishes on the boundary), which must agree."""
    B, u = _inward_conormal(P, boundary)
    Wf = check_orthonormal(W, what="6-frame")
    _check_contains(Wf, B)
    om = restrict_to_6plane(phi0(), Wf)
    Bw = B @ Wf.T                     # boundary in W-coordinates
    flag_a = bool(np.linalg.norm(Wf @ u) < tol)
    flag_b = bool(restrict(om, Bw).norm() < tol)
    return flag_a, flag_b


# ---------------------------------------------------------------------------
# pointwise linearisation identities

def chi_eval(e_coeffs, a, b, c, d) -> np.ndarray:
    """chi(a, b, c, d) = <tau(a, b, c, d), e>."""
    return tau4_array(a, b, c, d) @ np.asarray(e_coeffs, float)


def structure_variation_identity(e, P: CayleyPlane, S: ScaffoldFiber | None = None) -> float:
    """Max deviation of the two structure-variation formulas from their closed forms.

    The boundary identity uses e1 = u and (e2, e3, e4) as boundary frame.
    """
    ec = e.coeffs if isinstance(e, KForm) else np.asarray(e, float)
    ec = pi7_matrix() @ ec
    t = P.tangent
    # F side: -sum_i chi(e_i, e2, e3, e4) e1 x e_i, read in E-coordinates
    chis = np.array([chi_eval(ec, n, t[1], t[2], t[3]) for n in P.normal])
    lhs_f = -chis
    rhs_f = -pi_E(ec, P)
    res = float(np.max(np.abs(lhs_f - rhs_f)))
    if S is not None and S.k > 0:
        Wframe = np.vstack([S.boundary_tangent, S.w_tangent_normals])
        lhs_h = np.zeros(8)
        for w in Wframe:
            val = chi_eval(ec, w, t[1], t[2], t[3])
            lhs_h += val * (S.w_tangent_normals.T @ (S.w_tangent_normals @ w))
        rhs_h = _pi_nu(rho_inv(t[0], pi_E(ec, P), P), S)
        res = max(res, float(np.max(np.abs(lhs_h - rhs_h))))
    return res


def _pi_nu(x, S: ScaffoldFiber):
    return S.w_tangent_normals.T @ (S.w_tangent_normals @ x)


def b_tilde_cancellation(e, P: CayleyPlane, S: ScaffoldFiber) -> float:
    ec = e.coeffs if isinstance(e, KForm) else np.asarray(e, float)
    ec = pi7_matrix() @ ec
    t = P.tangent
    dF = -np.array([chi_eval(ec, n, t[1], t[2], t[3]) for n in P.normal])
    part_f = _pi_nu(rho_inv(t[0], dF, P), S)
    part_h = np.zeros(8)
    for w in np.vstack([S.boundary_tangent, S.w_tangent_normals]):
        part_h += chi_eval(ec, w, t[1], t[2], t[3]) * _pi_nu(w, S)
    return float(np.max(np.abs(part_f + part_h)))


def restriction_law_residuals(P: CayleyPlane, rng: np.random.Generator, samples: int) -> dict:
    """Projection norms that must vanish for cross products on a Cayley plane."""
    T, N = P.tangent, P.normal
    tv = lambda: rng.normal(size=(samples, 4)) @ T
    nv = lambda: rng.normal(size=(samples, 4)) @ N
    on_T = lambda x: x @ T.T @ T
    on_N = lambda x: x @ N.T @ N
    out = {}
    out["TxT in E"] = np.max(np.abs(pi_E(cross2_array(tv(), tv()), P)))
    # Lambda^2_- of the tangent plane embedded through 2*pi_7
    c = cross2_array(tv(), nv())
    resid = c - pi_E(c, P) @ P.e_basis
    out["TxN outside E"] = np.max(np.abs(resid))
    a, b, d = tv(), tv(), tv()
    out["TTT"] = np.max(np.abs(on_N(cross3_array(a, b, d))))
    out["TTN"] = np.max(np.abs(on_T(cross3_array(a, b, nv()))))
    out["TNN"] = np.max(np.abs(on_N(cross3_array(a, nv(), nv()))))
    out["NNN"] = np.max(np.abs(on_T(cross3_array(nv(), nv(), nv()))))
    return {k: float(v) for k, v in out.items()}
