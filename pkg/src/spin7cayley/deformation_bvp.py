"""Finite-difference discretisation of the linear Cayley deformation problem in
the flat model X = T^3 x [0, 1] inside R^8.

Normal fields carry components (s5, s6, s7, s8) in the standard adapted frame
and E-valued fields carry coordinates in the frame (e1 x e5, ..., e1 x e8).
Node arrays have shape (n1, n2, n3, m4, 4) and are flattened in C order, so the
unknown index of (node, component) is node * 4 + component.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .cayley_geometry import standard_plane
from .calibration_structures import check_orthonormal
from .spin7_algebra import cross2_array, cross3_array

MIN_NODES = 4
ROW_INTERIOR, ROW_DIRICHLET, ROW_NEUMANN = 0, 1, 2


# ---------------------------------------------------------------------------
# coefficient tables

def d_coefficients() -> np.ndarray:
    """C[i, b, a] = <e_i x e_{4+a}, e_1 x e_{4+b}>, so (D s)_b = sum C[i, b, a] d_i s_a."""
    P = standard_plane()
    E = np.eye(8)
    C = np.zeros((4, 4, 4))
    for i in range(4):
        C[i] = P.e_basis @ cross2_array(E[i], P.normal).T
    return C


def p_coefficients(u: np.ndarray) -> np.ndarray:
    """Q[i, c, a] = <u x e_i x e_{4+a}, e_{4+c}> for the boundary tangents e_1, e_2, e_3."""
    E = np.eye(8)
    Q = np.zeros((3, 4, 4))
    for i in range(3):
        Q[i] = cross3_array(u, E[i], E[4:]) [:, 4:].T
    return Q


def rho_coefficients(u: np.ndarray) -> np.ndarray:
    """E-coordinates of u x e_{4+a}, as a 4 x 4 matrix acting on normal components."""
    P = standard_plane()
    return P.e_basis @ cross2_array(u, P.normal).T


# ---------------------------------------------------------------------------
# domain and 1D stencils

@dataclass(frozen=True)
class FlatCayleyDomain:
    n: tuple = (8, 8, 8, 8)
    lengths: tuple = (1.0, 1.0, 1.0, 1.0)
    periodic4: bool = False

    def __post_init__(self):
        n = tuple(int(v) for v in (self.n if np.ndim(self.n) else (self.n,) * 4))
        if len(n) != 4 or min(n) < MIN_NODES:
            raise ValueError(f"grid needs four sizes >= {MIN_NODES}, got {n}")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "lengths", tuple(float(v) for v in self.lengths))

    @property
    def h(self) -> np.ndarray:
        return np.array(self.lengths) / np.array(self.n)

    @property
    def shape(self) -> tuple:
        m4 = self.n[3] if self.periodic4 else self.n[3] + 1
        return self.n[:3] + (m4,)

    @property
    def num_nodes(self) -> int:
        return int(np.prod(self.shape))

    def coords(self):
        axes = [np.arange(m) * h for m, h in zip(self.shape, self.h)]
        return np.meshgrid(*axes, indexing="ij")

    def weights(self) -> np.ndarray:
        """Quadrature weights: periodic rectangle rule, trapezoid in x4."""
        w4 = np.full(self.shape[3], self.h[3])
        if not self.periodic4:
            w4[[0, -1]] *= 0.5
        cell = np.prod(self.h[:3])
        return np.broadcast_to(cell * w4, self.shape).copy()

    def boundary_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, bool)
        if not self.periodic4:
            m[..., 0] = m[..., -1] = True
        return m


def _periodic_first(n, h):
    D = sp.diags([np.full(n - 1, 0.5), np.full(n - 1, -0.5)], [1, -1], (n, n), "lil")
    D[0, n - 1] = -0.5
    D[n - 1, 0] = 0.5
    return D.tocsr() / h


def _periodic_second(n, h):
    L = sp.diags([np.ones(n - 1), np.full(n, -2.0), np.ones(n - 1)], [1, 0, -1], (n, n), "lil")
    L[0, n - 1] = L[n - 1, 0] = 1.0
    return L.tocsr() / h**2


def _interval_first(m, h):
    """Central differences with second-order one-sided stencils at the ends."""
    D = sp.diags([np.full(m - 1, 0.5), np.full(m - 1, -0.5)], [1, -1], (m, m), "lil")
    D[0, :3] = [-1.5, 2.0, -0.5]
    D[m - 1, m - 3:] = [0.5, -2.0, 1.5]
    return D.tocsr() / h


def _interval_second(m, h):
    # end rows are placeholders; boundary rows of the BVP replace them
    L = sp.diags([np.ones(m - 1), np.full(m, -2.0), np.ones(m - 1)], [1, 0, -1], (m, m), "lil")
    L[0, :] = 0
    L[m - 1, :] = 0
    return L.tocsr() / h**2


def _first_1d(dom, axis):
    m, h = dom.shape[axis], dom.h[axis]
    if axis < 3 or dom.periodic4:
        return _periodic_first(m, h)
    return _interval_first(m, h)


def _second_1d(dom, axis):
    m, h = dom.shape[axis], dom.h[axis]
    if axis < 3 or dom.periodic4:
        return _periodic_second(m, h)
    return _interval_second(m, h)


def _along(dom, axis, M1):
    """Lift a 1D node operator to the full node grid (scalar fields)."""
    mats = [sp.identity(m, format="csr") for m in dom.shape]
    mats[axis] = M1
    out = mats[0]
    for M in mats[1:]:
        out = sp.kron(out, M, format="csr")
    return out


def partial(dom: FlatCayleyDomain, axis: int) -> sp.csr_matrix:
    """Scalar difference operator d/dx_axis on the node grid."""
    return _along(dom, axis, _first_1d(dom, axis))


def apply_partial(dom: FlatCayleyDomain, f: np.ndarray, axis: int) -> np.ndarray:
    """Matrix-free d/dx_axis on a node array with arbitrary trailing axes."""
    M = _first_1d(dom, axis)
    g = np.moveaxis(f, axis, 0)
    out = (M @ g.reshape(g.shape[0], -1)).reshape(g.shape)
    return np.moveaxis(out, 0, axis)


# ---------------------------------------------------------------------------
# operators

def assemble_D(dom: FlatCayleyDomain) -> sp.csr_matrix:
    """D s = sum_i e_i x d_i s, at every node (one-sided at the interval ends)."""
    C = d_coefficients()
    return sum(sp.kron(partial(dom, i), sp.csr_matrix(C[i]), format="csr") for i in range(4))


def assemble_Dstar(dom: FlatCayleyDomain) -> sp.csr_matrix:
    """Formal adjoint D* t = -sum_i C_i^T d_i t, built from the continuous formula."""
    C = d_coefficients()
    return -sum(sp.kron(partial(dom, i), sp.csr_matrix(C[i].T), format="csr")
                for i in range(4))


def assemble_DstarD(dom: FlatCayleyDomain, product: bool = False) -> sp.csr_matrix:
    """D*D = -Laplacian per component: compact 9-point stencil, or the product D* D."""
    if product:
        return (assemble_Dstar(dom) @ assemble_D(dom)).tocsr()
    lap = sum(_along(dom, i, _second_1d(dom, i)) for i in range(4))
    return sp.kron(-lap, sp.identity(4), format="csr")


def boundary_slices(dom: FlatCayleyDomain):
    """(x4 index, inward normal u in R^8) for the two boundary components."""
    if dom.periodic4:
        return []
    E = np.eye(8)
    return [(0, E[3]), (dom.shape[3] - 1, -E[3])]


def _surface_partials(dom):
    n1, n2, n3 = dom.n[:3]
    mats = []
    for axis in range(3):
        parts = [sp.identity(m, format="csr") for m in (n1, n2, n3)]
        parts[axis] = _periodic_first(dom.n[axis], dom.h[axis])
        M = parts[0]
        for q in parts[1:]:
            M = sp.kron(M, q, format="csr")
        mats.append(M)
    return mats


def assemble_P(dom: FlatCayleyDomain, u: np.ndarray) -> sp.csr_matrix:
    """P s = sum_{i<=3} u x e_i x d_i s on one boundary 3-torus (traces in C order)."""
    Q = p_coefficients(u)
    return sum(sp.kron(Di, sp.csr_matrix(Q[i]), format="csr")
               for i, Di in enumerate(_surface_partials(dom)))


def _normal_derivative_rows(dom, idx4):
    """Second-order one-sided inward derivative, as (offsets, weights) along x4."""
    h = dom.h[3]
    if idx4 == 0:
        return [0, 1, 2], np.array([-1.5, 2.0, -0.5]) / h
    m = dom.shape[3]
    return [m - 1, m - 2, m - 3], np.array([-1.5, 2.0, -0.5]) / h


# ---------------------------------------------------------------------------
# the boundary value problem

@dataclass(frozen=True)
class BCSpec:
    k: int
    rotation: np.ndarray | None = None

    def __post_init__(self):
        if not 0 <= int(self.k) <= 4:
            raise ValueError("k must lie in 0..4")
        if self.rotation is not None:
            R = check_orthonormal(np.asarray(self.rotation, float), 1e-10, "rotation")
            if np.linalg.det(R) < 0:
                raise ValueError("rotation must lie in SO(4)")

    @property
    def frame(self) -> np.ndarray:
        """Rows: rotated normal directions; the first k span nu_W, the rest K."""
        return np.eye(4) if self.rotation is None else np.asarray(self.rotation, float)

    @property
    def nu(self) -> np.ndarray:
        return self.frame[: self.k]

    @property
    def kappa(self) -> np.ndarray:
        return self.frame[self.k:]

    @property
    def pi_K(self) -> np.ndarray:
        return self.kappa.T @ self.kappa

    @property
    def pi_nu(self) -> np.ndarray:
        return self.nu.T @ self.nu


@dataclass(frozen=True)
class LinearSystem:
    matrix: sp.csr_matrix
    unknown_node: np.ndarray      # node (flat) of each column
    unknown_comp: np.ndarray      # component of each column
    row_node: np.ndarray
    row_kind: np.ndarray          # ROW_INTERIOR / ROW_DIRICHLET / ROW_NEUMANN
    row_dir: np.ndarray           # component (interior) or frame direction (boundary)
    row_scale: np.ndarray         # equilibration factor applied to each row
    domain: FlatCayleyDomain
    bc: BCSpec | None = None

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def is_square(self) -> bool:
        return self.shape[0] == self.shape[1]

    def triplets(self) -> str:
        """Plain-text (row, col, value) dump."""
        M = self.matrix.tocoo()
        order = np.lexsort((M.col, M.row))
        buf = io.StringIO()
        for r, c, v in zip(M.row[order], M.col[order], M.data[order]):
            buf.write(f"{r} {c} {v:.17g}\n")
        return buf.getvalue()


def assemble_bvp(dom: FlatCayleyDomain, bc: BCSpec, equilibrate: bool = True,
                 interior: str = "compact") -> LinearSystem:
    """Square system: D*D inside, pi_K s = 0 and pi_nu(d_u s + P pi_K s) = 0 on the boundary.

    ``interior="product"`` uses the product D*_h D_h instead of the compact stencil.
    """
    if dom.periodic4:
        raise ValueError("the boundary problem needs the interval in x4")
    shape = dom.shape
    N = dom.num_nodes
    nodes = np.arange(N).reshape(shape)
    G = assemble_DstarD(dom, product=(interior == "product"))
    hmin = float(np.min(dom.h))
    s_int = hmin**2 if equilibrate else 1.0
    s_neu = hmin if equilibrate else 1.0

    rows = sp.lil_matrix((4 * N, 4 * N))
    kind = np.zeros(4 * N, int)
    rdir = np.tile(np.arange(4), N)
    scale = np.full(4 * N, s_int)

    interior = ~dom.boundary_mask().reshape(-1)
    int_rows = (4 * np.nonzero(interior)[0][:, None] + np.arange(4)).reshape(-1)
    Gi = G.tocsr()[int_rows] * s_int

    bsurf = _surface_partials(dom)
    blocks = [Gi]
    brows = []
    piK = bc.pi_K
    for idx4, u in boundary_slices(dom):
        bnodes = nodes[..., idx4].reshape(-1)
        nb = bnodes.size
        # Dirichlet rows: <kappa_j, s> at each boundary node
        Dir = sp.kron(sp.identity(nb), sp.csr_matrix(bc.kappa), format="csr")
        Sel = sp.csr_matrix((np.ones(nb), (np.arange(nb), bnodes)), shape=(nb, N))
        Sel4 = sp.kron(Sel, sp.identity(4), format="csr")
        # Neumann rows: nu_l . (d_u s + P pi_K s)
        offs, wts = _normal_derivative_rows(dom, idx4)
        Du = sum(w * sp.kron(sp.csr_matrix((np.ones(nb), (np.arange(nb), nodes[..., o].reshape(-1))),
                                           shape=(nb, N)), sp.identity(4), format="csr")
                 for o, w in zip(offs, wts))
        Pm = assemble_P(dom, u) @ sp.kron(sp.identity(nb), sp.csr_matrix(piK), format="csr")
        nu_rows = sp.kron(sp.identity(nb), sp.csr_matrix(bc.nu), format="csr")
        Neu = nu_rows @ (Du + Pm @ Sel4) * s_neu
        blocks += [Dir @ Sel4, Neu]
        brows.append((bnodes, idx4))

    A = sp.vstack(blocks, format="csr")
    nint = int(interior.sum())
    rn = [np.repeat(np.nonzero(interior)[0], 4)]
    rk = [np.zeros(4 * nint, int)]
    rd = [np.tile(np.arange(4), nint)]
    rs = [np.full(4 * nint, s_int)]
    kk = bc.k
    for bnodes, _ in brows:
        nb = bnodes.size
        rn += [np.repeat(bnodes, 4 - kk), np.repeat(bnodes, kk)]
        rk += [np.full(nb * (4 - kk), ROW_DIRICHLET), np.full(nb * kk, ROW_NEUMANN)]
        rd += [np.tile(np.arange(kk, 4), nb), np.tile(np.arange(kk), nb)]
        rs += [np.ones(nb * (4 - kk)), np.full(nb * kk, s_neu)]
    return LinearSystem(
        matrix=A,
        unknown_node=np.repeat(np.arange(N), 4),
        unknown_comp=np.tile(np.arange(4), N),
        row_node=np.concatenate(rn),
        row_kind=np.concatenate(rk),
        row_dir=np.concatenate(rd),
        row_scale=np.concatenate(rs),
        domain=dom,
        bc=bc,
    )


# ---------------------------------------------------------------------------
# rank detection

@dataclass
class KernelReport:
    dim: int | None                 # None when no clear gap exists
    sigma: np.ndarray               # singular values, descending
    gap_ratio: float
    threshold: float
    basis: np.ndarray | None = None         # right null vectors, columns
    left_basis: np.ndarray | None = None    # left null vectors, columns

    @property
    def determinate(self) -> bool:
        return self.dim is not None


def kernel_dim(sys: LinearSystem, gap: float = 1e6, threshold: float = 1e-8,
               vectors: bool = False, method: str = "dense") -> KernelReport:
    """Count singular values below sigma_max * threshold, requiring a spectral gap.

    ``method="fourier"`` block-diagonalises a system that is invariant under
    the periodic translations (exact unitary similarity, same singular values).
    """
    if not sys.is_square:
        raise ValueError("kernel_dim needs a square system")
    if method == "dense":
        A = sys.matrix.toarray()
        if vectors:
            U, s, Vt = scipy.linalg.svd(A, lapack_driver="gesdd")
            null_r, null_l = (lambda d: Vt[len(s) - d:].T), (lambda d: U[:, len(s) - d:])
        else:
            s = scipy.linalg.svd(A, compute_uv=False, lapack_driver="gesdd")
    elif method == "fourier":
        s, null_r, null_l = _fourier_svd(sys, vectors)
    else:
        raise ValueError(f"unknown method {method!r}")
    cut = s[0] * threshold
    r = int(np.sum(s < cut))
    # ratio between the smallest retained and the largest discarded value;
    # with nothing discarded, compare against the rounding floor
    if r == 0:
        ratio = s[-1] / (s[0] * np.finfo(float).eps * len(s))
    elif r == len(s):
        ratio = 0.0
    else:
        ratio = s[-r - 1] / max(s[-r], np.finfo(float).tiny)
    dim = r if ratio > gap else None
    rep = KernelReport(dim, s, float(ratio), float(cut))
    if vectors and dim is not None:
        rep.basis = null_r(dim)
        rep.left_basis = null_l(dim)
    return rep


def _translation_classes(sys: LinearSystem):
    """Split rows and columns into (base position, class) under periodic shifts."""
    dom = sys.domain
    n1, n2, n3, m4 = dom.shape
    pos_c = sys.unknown_node // m4                     # flat (i1, i2, i3)
    cls_c = (sys.unknown_node % m4) * 4 + sys.unknown_comp
    rkey = (sys.row_node % m4) * 16 + sys.row_kind * 4 + sys.row_dir
    keys, cls_r = np.unique(rkey, return_inverse=True)
    pos_r = sys.row_node // m4
    return pos_r, cls_r, len(keys), pos_c, cls_c, 4 * m4


def _fourier_svd(sys: LinearSystem, vectors: bool):
    dom = sys.domain
    n = np.array(dom.shape[:3])
    pos_r, cls_r, nr, pos_c, cls_c, nc = _translation_classes(sys)
    if nr != nc:
        raise ValueError("row and column classes differ; system is not shift-invariant")
    P = int(np.prod(n))
    if np.any(np.bincount(pos_r, minlength=P) != nr):
        raise ValueError("rows are not distributed uniformly over periodic positions")
    A = sys.matrix.tocoo()
    # use the rows sitting at base position 0 and record column offsets
    base = pos_r[A.row] == 0
    rc, cc, val = cls_r[A.row[base]], cls_c[A.col[base]], A.data[base]
    q = np.stack(np.unravel_index(pos_c[A.col[base]], tuple(n)), axis=1)
    # shift-invariance: every row must reproduce its base-row pattern
    _check_shift_invariance(sys, pos_r, cls_r, pos_c, cls_c, n)
    modes = np.stack(np.meshgrid(*[np.arange(v) for v in n], indexing="ij"), -1).reshape(-1, 3)
    sig, blocks = [], []
    for m in modes:
        ph = np.exp(2j * np.pi * (q @ (m / n)))
        B = np.zeros((nr, nc), complex)
        np.add.at(B, (rc, cc), val * ph)
        if vectors:
            U, sv, Vh = np.linalg.svd(B)
            blocks.append((m, U, sv, Vh))
        else:
            sv = np.linalg.svd(B, compute_uv=False)
        sig.append(sv)
    sig_all = np.concatenate(sig)
    order = np.argsort(sig_all)[::-1]
    s = sig_all[order]
    if not vectors:
        return s, None, None

    grid = np.stack(np.unravel_index(np.arange(P), tuple(n)), axis=1)

    def lift(d, left):
        out = []
        for flat in order[len(order) - d:]:
            b, j = divmod(int(flat), nr)
            m, U, _, Vh = blocks[b]
            wave = np.exp(2j * np.pi * (grid @ (m / n))) / np.sqrt(P)
            if left:
                vec = U[:, j][cls_r] * wave[pos_r]
            else:
                vec = Vh[j].conj()[cls_c] * wave[pos_c]
            out.append(vec)
        M = np.array(out).T if out else np.zeros((sys.shape[0], 0), complex)
        return _realify(M)

    return s, (lambda d: lift(d, False)), (lambda d: lift(d, True))


def _check_shift_invariance(sys, pos_r, cls_r, pos_c, cls_c, n, samples: int = 3):
    A = sys.matrix.tocsr()
    rows_by = {}
    for p in (0, int(np.prod(n)) // 2, int(np.prod(n)) - 1)[:samples]:
        sel = np.nonzero(pos_r == p)[0]
        pat = []
        for r in sel:
            lo, hi = A.indptr[r], A.indptr[r + 1]
            cols = A.indices[lo:hi]
            off = (np.array(np.unravel_index(pos_c[cols], tuple(n))).T
                   - np.array(np.unravel_index(p, tuple(n)))) % n
            pat.append(sorted(zip([cls_r[r]] * len(cols), cls_c[cols], map(tuple, off),
                                  np.round(A.data[lo:hi], 12))))
        rows_by[p] = sorted(pat)
    ref = rows_by[0]
    for p, pat in rows_by.items():
        if pat != ref:
            raise ValueError("system is not invariant under periodic translations")


def _realify(M: np.ndarray) -> np.ndarray:
    """Real orthonormal basis of the span of complex vectors closed under conjugation."""
    if M.shape[1] == 0:
        return M.real
    R = np.hstack([M.real, M.imag])
    U, sv, _ = np.linalg.svd(R, full_matrices=False)
    return U[:, : M.shape[1]]


def singular_value_csv(rows) -> str:
    """CSV lines (k, n, index, sigma) from an iterable of (k, n, sigma array)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "n", "index", "sigma"])
    for k, n, s in rows:
        for i, v in enumerate(s):
            w.writerow([k, n, i, f"{v:.12e}"])
    return buf.getvalue()


def constant_kernel_deviation(sys: LinearSystem, basis: np.ndarray) -> float:
    """Max deviation of each kernel vector from a per-component constant field."""
    if basis.size == 0:
        return 0.0
    dev = 0.0
    for v in basis.T:
        f = v.reshape(-1, 4)
        f = f / np.max(np.abs(f))
        dev = max(dev, float(np.max(np.abs(f - f.mean(axis=0)))))
    return dev


# ---------------------------------------------------------------------------
# symbols

def interior_symbol(xi: np.ndarray) -> np.ndarray:
    """Matrix of s -> xi x s from normal components to E-coordinates."""
    C = d_coefficients()
    return np.einsum("i,iba->ba", np.asarray(xi, float), C)


def boundary_symbol_check(xi, k: int, rotation=None) -> float:
    """Condition number of the boundary symbol matrix of the linearised problem.

    Frame: u = e1, xi = (xi2, xi3, xi4) tangential, nu = first k rotated normals.
    """
    xi = np.asarray(xi, float)
    if xi.shape != (3,):
        raise ValueError("xi must be a tangential covector with three components")
    nx = np.linalg.norm(xi)
    if nx == 0.0:
        raise ValueError("xi must be nonzero")
    R = np.eye(4) if rotation is None else np.asarray(rotation, float)
    E = np.eye(8)
    N = R @ E[4:]
    nu, kap = N[:k], N[k:]
    A = np.zeros((k, 4 - k), complex)
    for i in range(3):
        c = cross3_array(E[0], E[i + 1], kap)        # (4-k) x 8
        A += 1j * xi[i] * (nu @ c.T)
    M = np.zeros((4, 4), complex)
    M[:k, :k] = 1j * nx * np.eye(k)
    M[:k, k:] = A
    M[k:, k:] = np.eye(4 - k)
    return float(np.linalg.cond(M))


# ---------------------------------------------------------------------------
# Green's formula

def greens_residual(dom: FlatCayleyDomain, s: np.ndarray, t: np.ndarray) -> float:
    """|<Ds,t> - <s,D*t> + <u x s, t>_boundary| with trapezoid quadrature."""
    s = np.asarray(s, float).reshape(dom.shape + (4,))
    t = np.asarray(t, float).reshape(dom.shape + (4,))
    C = d_coefficients()
    w = dom.weights()[..., None]
    Ds = sum(np.einsum("ba,...a->...b", C[i], apply_partial(dom, s, i)) for i in range(4))
    Dt = -sum(np.einsum("ba,...b->...a", C[i], apply_partial(dom, t, i)) for i in range(4))
    lhs = np.sum(w * Ds * t) - np.sum(w * s * Dt)
    bd = 0.0
    dA = np.prod(dom.h[:3])
    for idx4, u in boundary_slices(dom):
        Ru = rho_coefficients(u)
        bd += dA * np.sum(np.einsum("ba,...a->...b", Ru, s[..., idx4, :]) * t[..., idx4, :])
    return float(abs(lhs + bd))


# ---------------------------------------------------------------------------
# boundary relation and adjoint kernel

def apply_D(dom: FlatCayleyDomain, s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, float).reshape(dom.shape + (4,))
    C = d_coefficients()
    return sum(np.einsum("ba,...a->...b", C[i], apply_partial(dom, s, i)) for i in range(4))


def apply_Dstar(dom: FlatCayleyDomain, t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, float).reshape(dom.shape + (4,))
    C = d_coefficients()
    return -sum(np.einsum("ba,...b->...a", C[i], apply_partial(dom, t, i)) for i in range(4))


def apply_P(dom: FlatCayleyDomain, trace: np.ndarray, u: np.ndarray) -> np.ndarray:
    """P applied to a boundary trace of shape (n1, n2, n3, 4)."""
    Q = p_coefficients(u)
    out = np.zeros_like(trace)
    for i in range(3):
        D1 = _periodic_first(dom.n[i], dom.h[i])
        g = np.moveaxis(trace, i, 0)
        d = np.moveaxis((D1 @ g.reshape(g.shape[0], -1)).reshape(g.shape), 0, i)
        out += np.einsum("ca,...a->...c", Q[i], d)
    return out


def normal_derivative(dom: FlatCayleyDomain, s: np.ndarray, idx4: int) -> np.ndarray:
    s = np.asarray(s, float).reshape(dom.shape + (4,))
    offs, wts = _normal_derivative_rows(dom, idx4)
    return sum(w * s[..., o, :] for o, w in zip(offs, wts))


def relation_DP_residual(dom: FlatCayleyDomain, s: np.ndarray) -> float:
    """max |rho^{-1}((Ds)|_boundary) - d_u s - P(s|_boundary)| over both components."""
    Ds = apply_D(dom, s)
    s = np.asarray(s, float).reshape(dom.shape + (4,))
    res = 0.0
    for idx4, u in boundary_slices(dom):
        Rinv = np.linalg.inv(rho_coefficients(u))
        lhs = np.einsum("ab,...b->...a", Rinv, Ds[..., idx4, :])
        rhs = normal_derivative(dom, s, idx4) + apply_P(dom, s[..., idx4, :], u)
        res = max(res, float(np.max(np.abs(lhs - rhs))))
    return res


def p_antisymmetry_defect(dom: FlatCayleyDomain, u: np.ndarray) -> float:
    """Max entry of P - P^T; P is symmetric in the flat torsion-free model."""
    Pm = assemble_P(dom, u)
    d = (Pm - Pm.T).tocoo()
    return float(np.max(np.abs(d.data), initial=0.0))


@dataclass
class AdjointKernelReport:
    dim: int | None
    transpose_dim: int | None
    laplace_residual: float        # interior D*D t, relative to |t|
    dirichlet_residual: float      # pi_K t extrapolated to the boundary
    neumann_residual: float        # pi_nu d_u t at the boundary
    fields: list = field(default_factory=list)

    @property
    def consistent(self) -> bool:
        return self.dim is not None and self.dim == self.transpose_dim

    @property
    def residual(self) -> float:
        return max(self.laplace_residual, self.dirichlet_residual, self.neumann_residual)


def _transpose_system(sys: LinearSystem) -> LinearSystem:
    # each node carries exactly one row per direction index, so row_dir can
    # serve as the component label of the transposed unknowns
    A = sys.matrix.T.tocsr()
    nrow = A.shape[0]
    return LinearSystem(A, sys.row_node, sys.row_dir, sys.unknown_node,
                        np.full(nrow, ROW_INTERIOR), sys.unknown_comp, np.ones(nrow),
                        sys.domain, sys.bc)


def adjoint_kernel_characterization(sys: LinearSystem, gap: float = 1e6,
                                    method: str = "dense") -> AdjointKernelReport:
    """Left null space of the square system and its interior field t."""
    rep = kernel_dim(sys, gap, vectors=True, method=method)
    rep_t = kernel_dim(_transpose_system(sys), gap, method=method)
    if rep.dim is None:
        return AdjointKernelReport(None, rep_t.dim, np.nan, np.nan, np.nan)
    dom, bc = sys.domain, sys.bc
    shape = dom.shape
    m4 = shape[3]
    interior_rows = sys.row_kind == ROW_INTERIOR
    # the layer next to each boundary carries the adjoint of the one-sided
    # closure stencil, so t is read from layers 2 .. m4-3 only
    keep = np.arange(2, m4 - 2)
    if keep.size == 0:
        raise ValueError("grid too coarse to recover the adjoint field")
    x4 = np.arange(m4) * dom.h[3]
    L9 = assemble_DstarD(dom)
    lap_r = dir_r = neu_r = 0.0
    fields = []
    for y in rep.left_basis.T:
        t = np.zeros(shape + (4,))
        t.reshape(-1, 4)[sys.row_node[interior_rows], sys.row_dir[interior_rows]] = y[interior_rows]
        t /= np.max(np.abs(t[..., keep, :]))
        fields.append(t[..., keep, :])
        if keep.size >= 3:
            g = (L9 @ t.reshape(-1)).reshape(shape + (4,))
            lap_r = max(lap_r, float(np.max(np.abs(g[..., keep[1:-1], :]))))
        for idx4, _ in boundary_slices(dom):
            near = keep[:3] if idx4 == 0 else keep[::-1][:3]
            deg = min(2, near.size - 1)
            vals = np.moveaxis(t[..., near, :], 3, 0).reshape(near.size, -1)
            coef = np.polynomial.polynomial.polyfit(x4[near] - x4[idx4], vals, deg)
            tr = coef[0].reshape(shape[:3] + (4,))
            sign = 1.0 if idx4 == 0 else -1.0
            du = sign * (coef[1] if deg >= 1 else np.zeros_like(coef[0])).reshape(shape[:3] + (4,))
            dir_r = max(dir_r, float(np.max(np.abs(tr @ bc.pi_K))))
            neu_r = max(neu_r, float(np.max(np.abs(du @ bc.pi_nu))))
    return AdjointKernelReport(rep.dim, rep_t.dim, lap_r, dir_r, neu_r, fields)
