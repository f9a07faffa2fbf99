"""Nonlinear deformation maps for graphs over the flat Cayley plane, their
finite-difference linearisations, a Newton solver for the boundary problem
and the calibration quadrature experiments.

A graph is x -> (x, s(x)) with s a normal field on FlatCayleyDomain nodes;
in flat space the exponential map is translation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cayley_geometry import standard_plane
from .deformation_bvp import (
    BCSpec,
    FlatCayleyDomain,
    apply_D,
    apply_Dstar,
    apply_P,
    apply_partial,
    assemble_bvp,
    assemble_Dstar,
    boundary_slices,
    d_coefficients,
    kernel_dim,
    normal_derivative,
    partial,
    rho_coefficients,
    _periodic_first,
)
from .spin7_algebra import cross3_array, phi0_eval_array, tau4_array, two_form_matrix

SLOPE_BOUND = 1.0
NEWTON_MAX_ITER = 25


class SlopeBoundError(ValueError):
    pass


class NewtonError(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


# ---------------------------------------------------------------------------
# graphs

@dataclass(frozen=True)
class GraphField:
    domain: FlatCayleyDomain
    values: np.ndarray            # shape domain.shape + (4,)

    def __post_init__(self):
        v = np.asarray(self.values, float)
        if v.shape != self.domain.shape + (4,):
            raise ValueError(f"values must have shape {self.domain.shape + (4,)}")
        object.__setattr__(self, "values", v)

    def jacobian(self) -> np.ndarray:
        """J[..., i, a] = d_i s_a by the grid stencils."""
        return np.stack([apply_partial(self.domain, self.values, i) for i in range(4)], axis=-2)

    def slope(self) -> float:
        return float(np.max(np.linalg.norm(self.jacobian(), ord=2, axis=(-2, -1))))

    def check_slope(self, bound: float = SLOPE_BOUND) -> np.ndarray:
        J = self.jacobian()
        m = float(np.max(np.linalg.norm(J, ord=2, axis=(-2, -1))))
        if not m < bound:
            raise SlopeBoundError(f"slope {m:.3g} violates the bound {bound}")
        return J


def _tangents(J: np.ndarray) -> list:
    """Graph tangent vectors t_i = e_i + sum_a J_ia e_{4+a}."""
    E = np.eye(8)
    out = []
    for i in range(4):
        t = np.zeros(J.shape[:-2] + (8,))
        t[..., :] = E[i]
        t[..., 4:] += J[..., i, :]
        out.append(t)
    return out


def _pi_E_coords(tau: np.ndarray) -> np.ndarray:
    return tau @ standard_plane().e_basis.T


def cayley_residual(s: GraphField) -> np.ndarray:
    """F(s): E-coordinates of tau evaluated on the graph tangent frame."""
    J = s.check_slope()
    return _pi_E_coords(tau4_array(*_tangents(J)))


def second_order_residual(s: GraphField) -> np.ndarray:
    """G(s) = D*_h F(s)."""
    return apply_Dstar(s.domain, cayley_residual(s))


def _trace_checks(dom, bc, trace, strict, tol):
    if strict and np.max(np.abs(trace @ bc.pi_K), initial=0.0) > tol:
        raise ValueError("boundary trace leaves W: pi_K(s) does not vanish")


def _boundary_frames():
    """Boundary tangent frames with f1 x f2 x f3 = u (inward) on each component."""
    E = np.eye(8)
    return {0: E[[1, 0, 2]], -1: E[[0, 1, 2]]}


def nonlinear_H(dom: FlatCayleyDomain, bc: BCSpec, s: np.ndarray, strict: bool = True,
                tol: float = 1e-10) -> np.ndarray:
    """H(s|_boundary) = pi_nu(gamma(b1, b2, b3)) for the graph of pi_nu(s) over the boundary.

    Returns shape (2, n1, n2, n3, 4) in normal coordinates.
    """
    s = np.asarray(s, float).reshape(dom.shape + (4,))
    frames = _boundary_frames()
    out = []
    for side, (idx4, u) in enumerate(boundary_slices(dom)):
        trace = s[..., idx4, :]
        _trace_checks(dom, bc, trace, strict, tol)
        sig = trace @ bc.pi_nu
        d = [_periodic_diff(dom, sig, i) for i in range(3)]
        f = frames[0 if idx4 == 0 else -1]
        b = []
        for fj in f:
            j = int(np.argmax(np.abs(fj)))
            v = np.zeros(sig.shape[:-1] + (8,))
            v[..., :] = fj
            v[..., 4:] += fj[j] * d[j]
            b.append(v)
        c = cross3_array(*b)
        # pi_W then pi_nu: nu directions lie in W
        out.append(c[..., 4:] @ bc.pi_nu)
    return np.array(out)


def _periodic_diff(dom, f, axis):
    M = _periodic_first(dom.n[axis], dom.h[axis])
    g = np.moveaxis(f, axis, 0)
    return np.moveaxis((M @ g.reshape(g.shape[0], -1)).reshape(g.shape), 0, axis)


def nonlinear_B(s: GraphField, bc: BCSpec, strict: bool = True, tol: float = 1e-10) -> np.ndarray:
    """B(s) = pi_nu(rho^{-1}(F(s)|_boundary)) + H(s|_boundary)."""
    dom = s.domain
    F = cayley_residual(s)
    H = nonlinear_H(dom, bc, s.values, strict, tol)
    out = []
    for side, (idx4, u) in enumerate(boundary_slices(dom)):
        Rinv = np.linalg.inv(rho_coefficients(u))
        out.append(F[..., idx4, :] @ Rinv.T @ bc.pi_nu + H[side])
    return np.array(out)


def linearised_B(dom: FlatCayleyDomain, bc: BCSpec, s: np.ndarray) -> np.ndarray:
    """pi_nu(d_u s + P(pi_K s)) on both boundary components (flat model)."""
    s = np.asarray(s, float).reshape(dom.shape + (4,))
    out = []
    for idx4, u in boundary_slices(dom):
        v = normal_derivative(dom, s, idx4) + apply_P(dom, s[..., idx4, :] @ bc.pi_K, u)
        out.append(v @ bc.pi_nu)
    return np.array(out)


def h_linearisation_identity(dom: FlatCayleyDomain, bc: BCSpec, s: np.ndarray,
                             eps: float = 1e-5) -> float:
    """max |dH_0(s) + pi_nu(P pi_nu s)|, the boundary half of the B linearisation."""
    s = np.asarray(s, float).reshape(dom.shape + (4,))
    dH = (nonlinear_H(dom, bc, eps * s, strict=False)
          - nonlinear_H(dom, bc, -eps * s, strict=False)) / (2 * eps)
    res = 0.0
    for side, (idx4, u) in enumerate(boundary_slices(dom)):
        rhs = -apply_P(dom, s[..., idx4, :] @ bc.pi_nu, u) @ bc.pi_nu
        res = max(res, float(np.max(np.abs(dH[side] - rhs))))
    return res


def linearisation_errors(dom: FlatCayleyDomain, bc: BCSpec, s: np.ndarray,
                         eps: float = 1e-5) -> dict:
    """Relative errors of central differences of F, G, B at 0 against D, D*D, dB."""
    s = np.asarray(s, float).reshape(dom.shape + (4,))
    gp, gm = GraphField(dom, eps * s), GraphField(dom, -eps * s)
    dF = (cayley_residual(gp) - cayley_residual(gm)) / (2 * eps)
    dG = (second_order_residual(gp) - second_order_residual(gm)) / (2 * eps)
    dB = (nonlinear_B(gp, bc, strict=False) - nonlinear_B(gm, bc, strict=False)) / (2 * eps)
    Ds = apply_D(dom, s)
    DDs = apply_Dstar(dom, Ds)
    Bs = linearised_B(dom, bc, s)
    rel = lambda a, b: float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))
    return {"F": rel(dF, Ds), "G": rel(dG, DDs), "B": rel(dB, Bs) if bc.k else 0.0}


# ---------------------------------------------------------------------------
# structure variations along a flow

@dataclass(frozen=True)
class QuadraticField:
    """v(x) = b + B x + 0.5 Q(x, x) on R^8, Q symmetric in its last two slots."""
    b: np.ndarray
    B: np.ndarray
    Q: np.ndarray | None = None

    def __call__(self, x):
        x = np.asarray(x, float)
        v = self.b + x @ self.B.T
        if self.Q is not None:
            v = v + 0.5 * np.einsum("ijk,...j,...k->...i", self.Q, x, x)
        return v

    def jacobian(self, x):
        x = np.asarray(x, float)
        J = np.broadcast_to(self.B, x.shape[:-1] + (8, 8)).copy()
        if self.Q is not None:
            J += np.einsum("ijk,...k->...ij", self.Q, x)
        return J

    @classmethod
    def random(cls, rng: np.random.Generator, scale: float = 1.0, quadratic: bool = True):
        Q = None
        if quadratic:
            Q = rng.normal(size=(8, 8, 8)) * scale
            Q = 0.5 * (Q + Q.transpose(0, 2, 1))
        return cls(rng.normal(size=8) * scale, rng.normal(size=(8, 8)) * scale, Q)


def _embed(dom: FlatCayleyDomain) -> np.ndarray:
    X = dom.coords()
    p = np.zeros(dom.shape + (8,))
    for i in range(4):
        p[..., i] = X[i]
    return p


def _pulled_back_F(A: np.ndarray) -> np.ndarray:
    """pi_E of the pullback of tau along a map with differential A (per node)."""
    cols = [A[..., :, i] for i in range(4)]
    M = two_form_matrix(tau4_array(*cols))
    Mp = np.swapaxes(A, -1, -2) @ M @ A
    i, j = np.triu_indices(8, 1)
    return _pi_E_coords(Mp[..., i, j])


def _pulled_back_H(A: np.ndarray, frame: np.ndarray, W: np.ndarray, bc: BCSpec) -> np.ndarray:
    """pi_nu of gamma for the pulled-back structure: g = A^T A, cross product A^{-1}(Ax x Ay x Az)."""
    c = cross3_array(*(A @ f for f in frame))
    c = np.linalg.solve(A, c[..., None])[..., 0]
    G = np.swapaxes(A, -1, -2) @ A
    Wt = W.T                                          # 8 x dim W
    GW = G @ Wt
    coef = np.linalg.solve(Wt.T @ GW, np.swapaxes(GW, -1, -2) @ c[..., None])[..., 0]
    pw = coef @ W
    return pw[..., 4:] @ bc.pi_nu


def _W_frame(bc: BCSpec) -> np.ndarray:
    E = np.eye(8)
    nu8 = np.zeros((bc.k, 8))
    nu8[:, 4:] = bc.nu
    return np.vstack([E[:3], nu8])


@dataclass
class LieReport:
    f_residual: float
    b_residual: float
    f_scale: float
    b_scale: float


def lie_variation_check(dom: FlatCayleyDomain, bc: BCSpec, v: QuadraticField,
                        eps: float = 1e-4) -> LieReport:
    """Variation of F and B when the structure is pulled back by x -> x + eps v(x).

    Returns the residuals against D(v^perp) and pi_nu((J_v + J_v^T) u).
    """
    p = _embed(dom)
    Jv = v.jacobian(p)
    I8 = np.eye(8)
    Fp = _pulled_back_F(I8 + eps * Jv)
    Fm = _pulled_back_F(I8 - eps * Jv)
    lhs_f = (Fp - Fm) / (2 * eps)
    # v is not periodic on the torus, so D(v^perp) uses the exact derivatives of v
    C = d_coefficients()
    rhs_f = sum(Jv[..., 4:, i] @ C[i].T for i in range(4))
    res_f = float(np.max(np.abs(lhs_f - rhs_f)))

    W = _W_frame(bc)
    frames = _boundary_frames()
    res_b, scale_b = 0.0, 0.0
    for idx4, u in boundary_slices(dom):
        f = frames[0 if idx4 == 0 else -1]
        J = Jv[..., idx4, :, :]
        Rinv = np.linalg.inv(rho_coefficients(u))
        parts = []
        for sgn in (1, -1):
            A = I8 + sgn * eps * J
            Fb = _pulled_back_F(A) @ Rinv.T @ bc.pi_nu
            parts.append(Fb + _pulled_back_H(A, f, W, bc))
        lhs = (parts[0] - parts[1]) / (2 * eps)
        w = J @ u + np.swapaxes(J, -1, -2) @ u
        rhs = w[..., 4:] @ bc.pi_nu
        res_b = max(res_b, float(np.max(np.abs(lhs - rhs))))
        scale_b = max(scale_b, float(np.max(np.abs(rhs))))
    return LieReport(res_f, res_b, float(np.max(np.abs(rhs_f))), scale_b)


# ---------------------------------------------------------------------------
# moving the scaffold

def _cutoff(r, width):
    """Smooth, equal to 1 on [0, width/2], 0 beyond width."""
    x = np.clip((np.asarray(r, float) - 0.5 * width) / (0.5 * width), 0.0, 1.0)
    f = lambda y: np.where(y > 0, np.exp(-1.0 / np.maximum(y, 1e-300)), 0.0)
    return f(1 - x) / (f(1 - x) + f(x))


@dataclass(frozen=True)
class AffineScaffoldField:
    """t(p) = pi_N(c + M p) on W, with pi_N the projection normal to W."""
    c: np.ndarray
    M: np.ndarray


@dataclass(frozen=True)
class ScaffoldPerturbation:
    values: np.ndarray           # (2, n1, n2, n3, 4): normal components on each boundary
    collar: float = 0.25


def extend_scaffold_field(t_fields, bc: BCSpec, collar: float = 0.25, x4_levels=(0.0, 1.0)):
    """sigma(t): constant along the normal directions of W near W, cut off outside a collar.

    ``t_fields`` is one AffineScaffoldField per boundary component.  Returns a
    callable on points of R^8 (batch).
    """
    if not 0 < collar < 0.5:
        raise ValueError("collar must lie in (0, 1/2) so the two components stay apart")
    W = _W_frame(bc)
    PW = W.T @ W
    PN = np.eye(8) - PW

    def sigma(x):
        x = np.asarray(x, float)
        out = np.zeros_like(x)
        for tf, lev in zip(t_fields, x4_levels):
            base = np.zeros(8)
            base[3] = lev
            rel = x - base
            foot = rel @ PW                 # nearest point of W
            dist = np.linalg.norm(rel @ PN, axis=-1)
            t = (tf.c + foot @ tf.M.T) @ PN
            out += _cutoff(dist, collar)[..., None] * t
        return out

    return sigma


def _fd_jacobian(fun, x, h=1e-5):
    cols = []
    for j in range(8):
        e = np.zeros(8)
        e[j] = h
        cols.append((fun(x + e) - fun(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def scaffold_variation_linearization(dom: FlatCayleyDomain, bc: BCSpec, t_fields,
                                     eps: float = 1e-4, collar: float = 0.25) -> float:
    """max |(dB_hat)(0, t) - pi_nu(g(nabla t, u))| over the boundary nodes."""
    sigma = extend_scaffold_field(t_fields, bc, collar)
    p = _embed(dom)
    W = _W_frame(bc)
    frames = _boundary_frames()
    I8 = np.eye(8)
    nu8 = W[3:]
    res = 0.0
    for side, (idx4, u) in enumerate(boundary_slices(dom)):
        x = p[..., idx4, :]
        Js = _fd_jacobian(sigma, x)
        f = frames[0 if idx4 == 0 else -1]
        Rinv = np.linalg.inv(rho_coefficients(u))
        vals = []
        for sgn in (1, -1):
            A = I8 + sgn * eps * Js
            Fb = _pulled_back_F(A) @ Rinv.T @ bc.pi_nu
            c = cross3_array(*(A @ fj for fj in f))
            Hh = np.zeros_like(Fb)
            for a8, a4 in zip(nu8, bc.nu):
                Hh += np.sum(c * (A @ a8), axis=-1)[..., None] * a4
            vals.append(Fb + Hh)
        lhs = (vals[0] - vals[1]) / (2 * eps)
        tf = t_fields[side]
        PN = I8 - W.T @ W
        rhs = np.zeros_like(lhs)
        for a8, a4 in zip(nu8, bc.nu):
            rhs += float((PN @ (tf.M @ a8)) @ u) * a4
        res = max(res, float(np.max(np.abs(lhs - rhs))))
    return res


# ---------------------------------------------------------------------------
# Newton

@dataclass
class NewtonResult:
    solution: np.ndarray
    trace: list = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.trace) - 1


def _dF_matrix(dom: FlatCayleyDomain, J: np.ndarray) -> sp.csr_matrix:
    """Exact derivative of s -> F(s) at a graph with Jacobian J (tau is 4-linear)."""
    T = _tangents(J)
    N = dom.num_nodes
    E = np.eye(8)
    eb = standard_plane().e_basis
    out = sp.csr_matrix((4 * N, 4 * N))
    for i in range(4):
        blocks = np.zeros((N, 4, 4))
        for a in range(4):
            args = list(T)
            args[i] = np.broadcast_to(E[4 + a], T[i].shape)
            blocks[:, :, a] = (tau4_array(*args) @ eb.T).reshape(N, 4)
        Bd = sp.bsr_matrix((blocks, np.arange(N), np.arange(N + 1)), shape=(4 * N, 4 * N))
        out = out + Bd @ sp.kron(partial(dom, i), sp.identity(4), format="csr")
    return out.tocsr()


def newton_solve(dom: FlatCayleyDomain, bc: BCSpec, perturbation: ScaffoldPerturbation,
                 s0: np.ndarray | None = None, tol: float = 1e-10,
                 max_iter: int = NEWTON_MAX_ITER) -> NewtonResult:
    """Undamped Newton for G(s) = 0 inside and pi_K(s - t) = 0 on the boundary.

    The residual uses the row scaling of assemble_bvp (interior rows times h^2).
    Only configurations whose linearisation is injective are accepted.
    """
    # the Jacobian at s = 0 is D*D through the product stencil
    lin = kernel_dim(assemble_bvp(dom, bc, interior="product"), method="fourier")
    if lin.dim != 0:
        raise ValueError("non-generic configuration: the linearised problem has a kernel")
    if bc.k != 0:
        raise ValueError("non-generic configuration")
    shape = dom.shape
    N = dom.num_nodes
    tvals = np.asarray(perturbation.values, float)
    mask = dom.boundary_mask().reshape(-1)
    interior = np.nonzero(~mask)[0]
    hmin = float(np.min(dom.h))
    target = np.zeros(shape + (4,))
    for side, (idx4, _) in enumerate(boundary_slices(dom)):
        target[..., idx4, :] = tvals[side]
    target = target.reshape(N, 4)
    bnodes = np.nonzero(mask)[0]

    int_rows = (4 * interior[:, None] + np.arange(4)).reshape(-1)
    bnd_rows = (4 * bnodes[:, None] + np.arange(4)).reshape(-1)
    Dstar = assemble_Dstar(dom)

    def residual(s):
        g = second_order_residual(GraphField(dom, s.reshape(shape + (4,)))).reshape(N, 4)
        r = np.zeros((N, 4))
        r[interior] = hmin**2 * g[interior]
        r[bnodes] = ((s.reshape(N, 4) - target) @ bc.pi_K)[bnodes]
        return r.reshape(-1)

    rows = np.concatenate([int_rows, bnd_rows])
    perm = np.argsort(rows)
    Bc = sp.kron(sp.identity(N), sp.csr_matrix(bc.pi_K), format="csr")[bnd_rows]

    def jacobian(J):
        Jac = (hmin**2 * (Dstar @ _dF_matrix(dom, J))).tocsr()[int_rows]
        return sp.vstack([Jac, Bc], format="csr")[perm]

    # the flat Jacobian is sparse enough to factor; away from s = 0 the mixed
    # second differences fill in, so steps are solved by preconditioned GMRES
    lu0 = spla.splu(jacobian(np.zeros(shape + (4, 4))).tocsc())
    M0 = spla.LinearOperator((4 * N, 4 * N), matvec=lu0.solve)

    s = np.zeros(4 * N) if s0 is None else np.asarray(s0, float).reshape(-1).copy()
    trace = []
    for it in range(max_iter + 1):
        try:
            r = residual(s)
        except SlopeBoundError as exc:
            raise NewtonError(f"slope bound violated at iteration {it}: {exc}", trace) from exc
        rn = float(np.max(np.abs(r)))
        trace.append(rn)
        if rn < tol:
            return NewtonResult(s.reshape(shape + (4,)), trace, True)
        if it == max_iter or not np.isfinite(rn):
            break
        A = jacobian(GraphField(dom, s.reshape(shape + (4,))).jacobian())
        step, info = spla.gmres(A, r, M=M0, rtol=1e-14, atol=0.0, restart=50, maxiter=20)
        if info != 0:
            step = spla.spsolve(A.tocsc(), r)
        s = s - step
    raise NewtonError(f"no convergence after {max_iter} iterations", trace)


def quadratic_rate(trace, floor: float = 1e-13) -> float:
    """max r_{n+1} / r_n^2 over steps whose result is above the rounding floor."""
    rates = [b / a**2 for a, b in zip(trace, trace[1:]) if b > floor and a > 0]
    return max(rates, default=0.0)


# ---------------------------------------------------------------------------
# volume versus calibrated flux

@dataclass
class VolumeFlux:
    volume: float
    flux: float
    margin: np.ndarray


def volume_and_flux(s: GraphField) -> VolumeFlux:
    J = s.check_slope()
    dom = s.domain
    w = dom.weights()
    G = np.eye(4) + J @ np.swapaxes(J, -1, -2)
    area = np.sqrt(np.linalg.det(G))
    phi = phi0_eval_array(*_tangents(J))
    return VolumeFlux(float(np.sum(w * area)), float(np.sum(w * phi)), 1.0 - phi / area)


def bump_field(dom: FlatCayleyDomain, center, radius: float, amplitude) -> GraphField:
    """Compactly supported smooth bump with a vector amplitude in the normal directions."""
    X = dom.coords()
    r2 = sum((x - c) ** 2 for x, c in zip(X, center)) / radius**2
    b = np.where(r2 < 1, np.exp(1.0 - 1.0 / np.maximum(1 - r2, 1e-300)), 0.0)
    return GraphField(dom, b[..., None] * np.asarray(amplitude, float))


def random_bumps(dom: FlatCayleyDomain, rng: np.random.Generator, count: int = 3,
                 amplitude: float = 0.03, radius: float = 0.3) -> GraphField:
    """Sum of bumps with independent centres and amplitude vectors, supported away from x4 = 0, 1."""
    vals = np.zeros(dom.shape + (4,))
    L4 = dom.lengths[3]
    for _ in range(count):
        c = np.r_[rng.uniform(0, 1, 3) * np.asarray(dom.lengths[:3]),
                  rng.uniform(radius + 0.05, L4 - radius - 0.05)]
        vals += bump_field(dom, c, radius, rng.normal(size=4) * amplitude).values
    return GraphField(dom, vals)
