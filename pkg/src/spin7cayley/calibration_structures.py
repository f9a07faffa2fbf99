"""Spin(7)-structures built from SU(4) and G2 data, restrictions to scaffold
planes, calibration detectors and the warped-metric local model."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import expm, expm_frechet

from .spin7_algebra import (
    ALGEBRA_TOL,
    KForm,
    basis_form,
    hodge_star,
    index_sets,
    inner,
    interior,
    minors,
    phi0,
    restrict,
    star_wedge_matrix,
    wedge,
)

SPECTRUM_TOL = 1e-8


def check_orthonormal(frame, tol: float = ALGEBRA_TOL, what: str = "frame") -> np.ndarray:
    F = np.atleast_2d(np.asarray(frame, dtype=float))
    dev = np.max(np.abs(F @ F.T - np.eye(F.shape[0])))
    if dev > tol:
        raise ValueError(f"{what} is not orthonormal (deviation {dev:.2e})")
    return F


def extend_form(a: KForm, frame: np.ndarray) -> KForm:
    """Push a form on R^m forward along an orthonormal m-frame in R^n.

    The coordinate covector e^a of R^m is sent to the covector dual to row a
    of ``frame``.
    """
    F = np.asarray(frame, dtype=float)
    m, n = F.shape
    k = a.degree
    if m != a.dim:
        raise ValueError("frame size does not match form dimension")
    out = np.zeros(len(index_sets(k, n)))
    for c, I in zip(a.coeffs, index_sets(k, m)):
        if c != 0.0:
            out += c * minors(F[list(I)], k)
    return KForm(k, out, n)


# ---------------------------------------------------------------------------
# SU(4) and G2 data

@dataclass(frozen=True)
class SU4Data:
    omega: KForm
    re_omega4: KForm
    im_omega4: KForm

    def normalisation_residual(self) -> float:
        """max |w^4 - 3/2 (ReO^ReO + ImO^ImO)| with O^Obar expanded in real parts."""
        w2 = wedge(self.omega, self.omega)
        lhs = wedge(w2, w2)
        rhs = 1.5 * (wedge(self.re_omega4, self.re_omega4)
                     + wedge(self.im_omega4, self.im_omega4))
        return float(np.max(np.abs(lhs.coeffs - rhs.coeffs)))


def standard_su4_data() -> SU4Data:
    """C^4 with z_j = x_{2j-1} + i x_{2j}, omega = sum dx^dy, Omega = dz1^...^dz4."""
    omega = basis_form(1, 2) + basis_form(3, 4) + basis_form(5, 6) + basis_form(7, 8)
    re = KForm.zero(4)
    im = KForm.zero(4)
    for choice in itertools.product((0, 1), repeat=4):
        idx = [2 * j + 1 + c for j, c in enumerate(choice)]
        phase = 1j ** sum(choice)
        e = basis_form(*idx)
        re = re + phase.real * e
        im = im + phase.imag * e
    return SU4Data(omega, re, im)


@dataclass(frozen=True)
class G2Data:
    """3-form and its 7-dimensional Hodge dual on R^7 (the slots 2..8 of R^8)."""
    phi3: KForm
    psi4: KForm

    def __post_init__(self):
        if (self.phi3.degree, self.phi3.dim) != (3, 7) or (self.psi4.degree, self.psi4.dim) != (4, 7):
            raise ValueError("G2 data must be a 3-form and a 4-form on R^7")


def standard_g2_data() -> G2Data:
    """phi = e_1 -| Phi_0 read in the coordinates (x2, ..., x8)."""
    W = np.eye(8)[1:]
    phi = restrict(interior(np.eye(8)[0], phi0()), W)
    return G2Data(phi, hodge_star(phi))


def spin7_from_su4(d: SU4Data, tol: float = ALGEBRA_TOL) -> KForm:
    res = d.normalisation_residual()
    if res > tol:
        raise ValueError(f"SU(4) data not normalised (residual {res:.2e})")
    return -0.5 * wedge(d.omega, d.omega) + d.re_omega4


def spin7_from_g2(d: G2Data, tol: float = ALGEBRA_TOL) -> KForm:
    dual = hodge_star(d.phi3)
    if not dual.allclose(d.psi4, tol):
        raise ValueError("psi4 is not the Hodge dual of phi3")
    W = np.eye(8)[1:]
    dt = basis_form(1)
    return wedge(dt, extend_form(d.phi3, W)) + extend_form(d.psi4, W)


# ---------------------------------------------------------------------------
# restrictions to scaffold planes

def restrict_to_7plane(Phi: KForm, frame) -> KForm:
    F = check_orthonormal(frame, what="7-frame")
    if F.shape[0] != 7:
        raise ValueError("need 7 vectors")
    return hodge_star(restrict(Phi, F))


def restrict_to_6plane(Phi: KForm, frame) -> KForm:
    F = check_orthonormal(frame, what="6-frame")
    if F.shape[0] != 6:
        raise ValueError("need 6 vectors")
    return -hodge_star(restrict(Phi, F))


def six_plane_residuals(Phi: KForm, frame) -> tuple[float, float]:
    """Residuals of  w^w/2 = -Phi|_W  and  w^3/6 = vol_W."""
    F = check_orthonormal(frame, what="6-frame")
    om = restrict_to_6plane(Phi, F)
    w2 = wedge(om, om)
    r1 = np.max(np.abs(0.5 * w2.coeffs + restrict(Phi, F).coeffs))
    w3 = wedge(w2, om)
    r2 = abs(w3.coeffs[0] / 6.0 - 1.0)
    return float(r1), float(r2)


def restrict_to_5plane(Phi: KForm, frame) -> np.ndarray:
    F = check_orthonormal(frame, what="5-frame")
    if F.shape[0] != 5:
        raise ValueError("need 5 vectors")
    return hodge_star(restrict(Phi, F)).coeffs.copy()


# ---------------------------------------------------------------------------
# detectors

@dataclass(frozen=True)
class ValidationReport:
    self_dual: bool
    norm_ok: bool
    spectrum_ok: bool
    norm_sq: float
    eigenvalues: np.ndarray = field(repr=False)

    @property
    def passed(self) -> bool:
        return self.self_dual and self.norm_ok and self.spectrum_ok


def validate_spin7_form(Phi: KForm, tol: float = ALGEBRA_TOL,
                        spectrum_tol: float = SPECTRUM_TOL) -> ValidationReport:
    """Necessary conditions only: self-duality, |Phi|^2 = 14, spectrum of alpha -> *(alpha^Phi)."""
    sd = bool(np.max(np.abs(hodge_star(Phi).coeffs - Phi.coeffs)) < tol)
    nsq = inner(Phi, Phi)
    M = star_wedge_matrix(Phi)
    ev = np.sort(np.linalg.eigvalsh(0.5 * (M + M.T)))
    asym = np.max(np.abs(M - M.T))
    target = np.array([-3.0] * 7 + [1.0] * 21)
    spectrum_ok = bool(asym < tol and np.max(np.abs(ev - target)) < spectrum_tol)
    return ValidationReport(sd, abs(nsq - 14.0) < tol, spectrum_ok, nsq, ev)


@dataclass(frozen=True)
class SLReport:
    re_value: float
    im_value: float
    omega_norm: float
    calibrated: bool           # Re Omega|_V = vol_V for the given orientation
    vanishing: bool            # omega|_V = 0 and Im Omega|_V = 0

    @property
    def agree(self) -> bool:
        # the vanishing criterion cannot see orientation
        return (abs(abs(self.re_value) - 1.0) < ALGEBRA_TOL) == self.vanishing


def special_lagrangian_test(frame, d: SU4Data, tol: float = ALGEBRA_TOL) -> SLReport:
    F = check_orthonormal(frame, what="4-frame")
    if F.shape != (4, 8):
        raise ValueError("need an orthonormal 4-frame in R^8")
    re = float(d.re_omega4.coeffs @ minors(F, 4))
    im = float(d.im_omega4.coeffs @ minors(F, 4))
    om = restrict(d.omega, F).norm()
    return SLReport(re, im, om, abs(re - 1.0) < tol, om < tol and abs(im) < tol)


@dataclass(frozen=True)
class G2PlaneReport:
    dim: int
    value: float               # phi(V) for 3-planes, psi(V) for 4-planes
    associative: bool | None = None
    coassociative: bool | None = None
    phi_vanishes: bool | None = None

    @property
    def agree(self) -> bool:
        if self.dim == 3:
            return True
        return (abs(abs(self.value) - 1.0) < ALGEBRA_TOL) == self.phi_vanishes


def associative_coassociative_test(frame, d: G2Data, tol: float = ALGEBRA_TOL) -> G2PlaneReport:
    F = check_orthonormal(frame, what="frame")
    if F.shape[1] != 7:
        raise ValueError("frame must live in R^7")
    if F.shape[0] == 3:
        val = float(d.phi3.coeffs @ minors(F, 3))
        return G2PlaneReport(3, val, associative=abs(val - 1.0) < tol)
    if F.shape[0] == 4:
        val = float(d.psi4.coeffs @ minors(F, 4))
        pv = restrict(d.phi3, F).norm() < tol
        return G2PlaneReport(4, val, coassociative=abs(val - 1.0) < tol, phi_vanishes=pv)
    raise ValueError("expected a 3- or 4-plane")


# ---------------------------------------------------------------------------
# warped metric near the zero section

def bs_warping(r: float, branch: str = "complete") -> tuple[float, float]:
    if r < 0:
        raise ValueError("r must be nonnegative")
    if branch == "complete":
        q = 1.0 + r * r
        return 5.0 * q ** 0.6, 4.0 * q ** -0.4
    if branch == "incomplete":
        if r >= 1.0:
            raise ValueError("incomplete branch needs r < 1")
        q = 1.0 - r * r
        return -5.0 * q ** 0.6, 4.0 * q ** -0.4
    raise ValueError(f"unknown branch {branch!r}")


@dataclass(frozen=True)
class WarpedMetricModel:
    """g = f_s(r) |dx|^2 + f_nu(r) |dz + A(x) z dx|^2 with z = M(x) y.

    A_i(x) = connection[i] + sum_j x_j connection_slope[i, j] are the
    connection matrices of an orthonormal fibre frame; M(x) = expm(sum_j x_j
    gauge[j]) is a change of fibre coordinates: the metric is the same, but
    finite-difference errors become visible.
    """
    connection: np.ndarray
    connection_slope: np.ndarray | None = None
    gauge: np.ndarray | None = None
    branch: str = "complete"
    strict: bool = True

    def __post_init__(self):
        A = np.asarray(self.connection, float)
        if A.shape != (4, 4, 4):
            raise ValueError("connection must have shape (4, 4, 4)")
        S = np.zeros((4, 4, 4, 4)) if self.connection_slope is None else np.asarray(self.connection_slope, float)
        G = np.zeros((4, 4, 4)) if self.gauge is None else np.asarray(self.gauge, float)
        object.__setattr__(self, "connection", A)
        object.__setattr__(self, "connection_slope", S)
        object.__setattr__(self, "gauge", G)
        if self.strict and not self.is_compatible():
            raise ValueError("connection matrices must be antisymmetric")

    def is_compatible(self, tol: float = 1e-12) -> bool:
        A, S = self.connection, self.connection_slope
        return bool(np.max(np.abs(A + np.swapaxes(A, -1, -2))) < tol
                    and np.max(np.abs(S + np.swapaxes(S, -1, -2))) < tol)

    def A(self, x) -> np.ndarray:
        return self.connection + np.einsum("ijab,j->iab", self.connection_slope, x)

    def warping(self, r2: float) -> tuple[float, float]:
        # in terms of r^2 so the metric is smooth across the zero section
        if self.branch == "complete":
            q = 1.0 + r2
            return 5.0 * q ** 0.6, 4.0 * q ** -0.4
        q = 1.0 - r2
        if q <= 0:
            raise ValueError("outside the incomplete branch")
        return -5.0 * q ** 0.6, 4.0 * q ** -0.4

    def metric(self, p) -> np.ndarray:
        p = np.asarray(p, float)
        x, y = p[:4], p[4:]
        X = np.einsum("jab,j->ab", self.gauge, x)
        M = expm(X)
        z = M @ y
        fs, fn = self.warping(float(z @ z))
        A = self.A(x)
        Theta = np.zeros((4, 8))
        Theta[:, 4:] = M
        for k in range(4):
            dM = expm_frechet(X, self.gauge[k], compute_expm=False)
            Theta[:, k] = dM @ y + A[k] @ z
        g = fn * Theta.T @ Theta
        g[:4, :4] += fs * np.eye(4)
        return g


def christoffel_fiber_check(m: WarpedMetricModel, h: float, x0=None) -> float:
    """max |Gamma_{ij,k}| at y = 0 over fibre i, j and base k, by central differences."""
    if h <= 0:
        raise ValueError("step must be positive")
    p0 = np.zeros(8)
    if x0 is not None:
        p0[:4] = x0
    g0 = m.metric(p0)
    if np.linalg.cond(g0) > 1e12:
        raise ValueError("metric is singular at the base point")
    dg = np.zeros((8, 8, 8))   # dg[m, i, j] = d_m g_ij
    for a in range(8):
        e = np.zeros(8)
        e[a] = h
        dg[a] = (m.metric(p0 + e) - m.metric(p0 - e)) / (2 * h)
    worst = 0.0
    for i in range(4, 8):
        for j in range(4, 8):
            for k in range(4):
                gam = 0.5 * (dg[i, j, k] + dg[j, i, k] - dg[k, i, j])
                worst = max(worst, abs(gam))
    return worst
