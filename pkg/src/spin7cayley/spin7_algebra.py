"""Exterior algebra on R^n (default n = 8) with the Spin(7) structure constants.

Forms are stored as coefficient vectors over strictly increasing index tuples
in lexicographic order.  The inner product is the orthonormal multi-index one,
<e^I, e^J> = delta_IJ, and the metric on vectors is the identity, so the
musical isomorphisms are trivial.

Indices are 0-based internally; the public helpers ``basis_form`` and
``KForm.coeff`` take the 1-based labels used in the literature.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations, permutations
from math import comb

import numpy as np

ALGEBRA_TOL = 1e-10

# (indices, sign) of the 14 monomials of the Cayley form, 1-based.
_PHI0_TERMS = (
    ((1, 2, 3, 4), +1), ((1, 2, 5, 6), +1), ((1, 2, 7, 8), -1),
    ((1, 3, 5, 7), +1), ((1, 3, 6, 8), +1), ((1, 4, 5, 8), +1),
    ((1, 4, 6, 7), -1), ((2, 3, 5, 8), -1), ((2, 3, 6, 7), +1),
    ((2, 4, 5, 7), +1), ((2, 4, 6, 8), +1), ((3, 4, 5, 6), -1),
    ((3, 4, 7, 8), +1), ((5, 6, 7, 8), +1),
)


# ---------------------------------------------------------------------------
# index bookkeeping

@lru_cache(maxsize=None)
def index_sets(k: int, n: int = 8) -> tuple:
    """Lexicographic list of strictly increasing k-tuples of range(n)."""
    return tuple(combinations(range(n), k))


@lru_cache(maxsize=None)
def index_lookup(k: int, n: int = 8) -> dict:
    return {I: p for p, I in enumerate(index_sets(k, n))}


def perm_sign(seq) -> int:
    """Sign of the permutation sorting ``seq``; 0 if an entry repeats."""
    seq = list(seq)
    if len(set(seq)) != len(seq):
        return 0
    sign = 1
    for i in range(len(seq)):
        for j in range(i + 1, len(seq)):
            if seq[i] > seq[j]:
                sign = -sign
    return sign


# ---------------------------------------------------------------------------
# the form type

@dataclass(frozen=True)
class KForm:
    degree: int
    coeffs: np.ndarray
    dim: int = 8

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float).reshape(-1)
        if not 0 <= self.degree <= self.dim:
            raise ValueError(f"degree {self.degree} outside 0..{self.dim}")
        if c.size != comb(self.dim, self.degree):
            raise ValueError(
                f"expected {comb(self.dim, self.degree)} coefficients, got {c.size}")
        if not np.all(np.isfinite(c)):
            raise ValueError("non-finite coefficient")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zero(cls, degree: int, dim: int = 8) -> "KForm":
        return cls(degree, np.zeros(comb(dim, degree)), dim)

    def coeff(self, *idx: int) -> float:
        """Coefficient at a 1-based index tuple, with permutation sign."""
        z = tuple(i - 1 for i in idx)
        sgn = perm_sign(z)
        if sgn == 0:
            return 0.0
        return sgn * self.coeffs[index_lookup(self.degree, self.dim)[tuple(sorted(z))]]

    def _check(self, other: "KForm"):
        if not isinstance(other, KForm):
            return NotImplemented
        if (other.degree, other.dim) != (self.degree, self.dim):
            raise ValueError("degree/dimension mismatch")
        return True

    def __add__(self, other):
        if self._check(other) is NotImplemented:
            return NotImplemented
        return KForm(self.degree, self.coeffs + other.coeffs, self.dim)

    def __sub__(self, other):
        if self._check(other) is NotImplemented:
            return NotImplemented
        return KForm(self.degree, self.coeffs - other.coeffs, self.dim)

    def __neg__(self):
        return KForm(self.degree, -self.coeffs, self.dim)

    def __mul__(self, scalar):
        return KForm(self.degree, float(scalar) * self.coeffs, self.dim)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return KForm(self.degree, self.coeffs / float(scalar), self.dim)

    def norm(self) -> float:
        return float(np.linalg.norm(self.coeffs))

    def allclose(self, other: "KForm", tol: float = ALGEBRA_TOL) -> bool:
        self._check(other)
        return bool(np.max(np.abs(self.coeffs - other.coeffs), initial=0.0) < tol)

    def __repr__(self):
        terms = []
        for I, c in zip(index_sets(self.degree, self.dim), self.coeffs):
            if abs(c) > 1e-14:
                terms.append(f"{c:+.6g}*e^{''.join(str(i + 1) for i in I)}")
        return f"KForm({self.degree}: {' '.join(terms) or '0'})"


def basis_form(*idx: int, dim: int = 8) -> KForm:
    """e^{i1...ik} from 1-based labels (any order; sign applied)."""
    k = len(idx)
    out = np.zeros(comb(dim, k))
    z = tuple(i - 1 for i in idx)
    sgn = perm_sign(z)
    if sgn:
        out[index_lookup(k, dim)[tuple(sorted(z))]] = sgn
    return KForm(k, out, dim)


def inner(a: KForm, b: KForm) -> float:
    a._check(b)
    return float(a.coeffs @ b.coeffs)


# ---------------------------------------------------------------------------
# linear-algebra tables

@lru_cache(maxsize=None)
def _wedge_tensor(k: int, l: int, n: int) -> np.ndarray:
    """W[r, p, q]: coefficient of e^R in e^P ^ e^Q."""
    out_lookup = index_lookup(k + l, n)
    W = np.zeros((comb(n, k + l), comb(n, k), comb(n, l)))
    for p, P in enumerate(index_sets(k, n)):
        for q, Q in enumerate(index_sets(l, n)):
            if set(P) & set(Q):
                continue
            sgn = perm_sign(P + Q)
            W[out_lookup[tuple(sorted(P + Q))], p, q] = sgn
    W.setflags(write=False)
    return W


def wedge(a: KForm, b: KForm) -> KForm:
    if a.dim != b.dim:
        raise ValueError("dimension mismatch")
    if a.degree + b.degree > a.dim:
        raise ValueError(f"degree overflow: {a.degree} + {b.degree} > {a.dim}")
    W = _wedge_tensor(a.degree, b.degree, a.dim)
    return KForm(a.degree + b.degree, np.einsum("rpq,p,q->r", W, a.coeffs, b.coeffs), a.dim)


@lru_cache(maxsize=None)
def hodge_matrix(k: int, n: int = 8) -> np.ndarray:
    """Matrix of the Hodge star Lambda^k -> Lambda^(n-k) for the standard orientation."""
    lookup = index_lookup(n - k, n)
    H = np.zeros((comb(n, n - k), comb(n, k)))
    for p, I in enumerate(index_sets(k, n)):
        Ic = tuple(i for i in range(n) if i not in I)
        H[lookup[Ic], p] = perm_sign(I + Ic)
    H.setflags(write=False)
    return H


def hodge_star(a: KForm) -> KForm:
    return KForm(a.dim - a.degree, hodge_matrix(a.degree, a.dim) @ a.coeffs, a.dim)


def to_tensor(a: KForm) -> np.ndarray:
    """Fully antisymmetric array T with T[I] = a(e_I)."""
    k, n = a.degree, a.dim
    T = np.zeros((n,) * k)
    for c, I in zip(a.coeffs, index_sets(k, n)):
        if c == 0.0:
            continue
        for perm in permutations(range(k)):
            T[tuple(I[p] for p in perm)] = perm_sign(perm) * c
    return T


def from_tensor(T: np.ndarray) -> KForm:
    """Read off coefficients of an antisymmetric tensor (no symmetrisation)."""
    k, n = T.ndim, T.shape[0]
    sets = index_sets(k, n)
    if k == 0:
        return KForm(0, np.array([float(T)]), n)
    idx = tuple(np.array(col) for col in zip(*sets))
    return KForm(k, T[idx], n)


def evaluate(a: KForm, *vectors) -> float:
    """a(v1, ..., vk) via the determinant expansion."""
    V = np.array(vectors, dtype=float)
    if V.shape != (a.degree, a.dim):
        raise ValueError("need degree-many vectors of the ambient dimension")
    return float(a.coeffs @ minors(V, a.degree))


def minors(V: np.ndarray, k: int) -> np.ndarray:
    """All k x k column minors of the k x n matrix V (lexicographic columns).

    Accepts a stack of shape (..., k, n).
    """
    n = V.shape[-1]
    sets = np.array(index_sets(k, n))
    sub = V[..., :, sets]              # (..., k, m, k)
    sub = np.moveaxis(sub, -2, -3)     # (..., m, k, k)
    return np.linalg.det(sub)


def restrict(a: KForm, frame: np.ndarray) -> KForm:
    """Pull back to the span of the rows of ``frame``, in frame coordinates."""
    F = np.asarray(frame, dtype=float)
    m = F.shape[0]
    if a.degree > m:
        raise ValueError(f"cannot restrict a {a.degree}-form to a {m}-dimensional subspace")
    coeffs = np.array([a.coeffs @ minors(F[list(I)], a.degree)
                       for I in index_sets(a.degree, m)])
    return KForm(a.degree, coeffs, m)


def interior(v: np.ndarray, a: KForm) -> KForm:
    """Contraction v -| a in the first slot."""
    T = to_tensor(a)
    return from_tensor(np.tensordot(np.asarray(v, float), T, axes=(0, 0)))


def vec_to_1form(v) -> KForm:
    v = np.asarray(v, dtype=float)
    return KForm(1, v, v.size)


# ---------------------------------------------------------------------------
# the Cayley form and its operators

@lru_cache(maxsize=None)
def _phi0_coeffs() -> np.ndarray:
    c = np.zeros(70)
    lookup = index_lookup(4)
    for idx, sgn in _PHI0_TERMS:
        c[lookup[tuple(i - 1 for i in idx)]] = sgn
    c.setflags(write=False)
    return c


def phi0() -> KForm:
    return KForm(4, _phi0_coeffs())


@lru_cache(maxsize=None)
def phi0_tensor() -> np.ndarray:
    T = to_tensor(phi0())
    T.setflags(write=False)
    return T


def star_wedge_matrix(phi: KForm) -> np.ndarray:
    """28 x 28 matrix of alpha -> *(alpha ^ phi) on 2-forms."""
    W = _wedge_tensor(2, 4, 8)
    return hodge_matrix(6) @ np.einsum("rpq,q->rp", W, phi.coeffs)


@lru_cache(maxsize=None)
def _phi0_star_wedge() -> np.ndarray:
    M = star_wedge_matrix(phi0())
    M.setflags(write=False)
    return M


def pi7_matrix() -> np.ndarray:
    """Orthogonal projection onto the (-3)-eigenspace: (alpha - *(alpha^Phi))/4."""
    return 0.25 * (np.eye(28) - _phi0_star_wedge())


@lru_cache(maxsize=None)
def _pair_index():
    sets = np.array(index_sets(2))
    return sets[:, 0], sets[:, 1]


def wedge11(v: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Coefficients of v ^ w; broadcasts over leading axes."""
    i, j = _pair_index()
    return v[..., i] * w[..., j] - v[..., j] * w[..., i]


def two_form_matrix(alpha: np.ndarray) -> np.ndarray:
    """Antisymmetric 8 x 8 matrix of 2-form coefficients (batch aware)."""
    i, j = _pair_index()
    M = np.zeros(alpha.shape[:-1] + (8, 8))
    M[..., i, j] = alpha
    M[..., j, i] = -alpha
    return M


def cross2_array(v: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Batch 2-fold cross product, returned as 28 coefficients."""
    M = 0.5 * (np.eye(28) - _phi0_star_wedge())
    return wedge11(np.asarray(v, float), np.asarray(w, float)) @ M.T


def cross3_array(u: np.ndarray, v: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Batch 3-fold cross product (u -| (v -| (w -| Phi)))^#."""
    u, v, w = np.broadcast_arrays(*(np.asarray(x, float) for x in (u, v, w)))
    lead = u.shape[:-1]
    A = (w.reshape(-1, 8) @ phi0_tensor().reshape(8, -1)).reshape(-1, 8, 64)
    A = np.einsum("nj,njm->nm", v.reshape(-1, 8), A).reshape(-1, 8, 8)
    return np.einsum("nk,nkl->nl", u.reshape(-1, 8), A).reshape(lead + (8,))


def tau4_array(a, b, c, d) -> np.ndarray:
    a, b, c, d = (np.asarray(x, float) for x in (a, b, c, d))
    g = lambda x, y: np.sum(x * y, axis=-1)[..., None]
    return (-cross2_array(a, cross3_array(b, c, d))
            + g(a, b) * cross2_array(c, d)
            + g(a, c) * cross2_array(d, b)
            + g(a, d) * cross2_array(b, c))


def phi0_eval_array(a, b, c, d) -> np.ndarray:
    return np.sum(cross3_array(c, b, a) * np.asarray(d, float), axis=-1)


def cross2(v, w) -> KForm:
    return KForm(2, cross2_array(v, w))


def cross3(u, v, w) -> np.ndarray:
    return cross3_array(u, v, w)


def tau4(a, b, c, d) -> KForm:
    return KForm(2, tau4_array(a, b, c, d))


# ---------------------------------------------------------------------------
# irreducible splittings

@dataclass(frozen=True)
class Lambda2Split:
    part7: KForm
    part21: KForm


@dataclass(frozen=True)
class Lambda4Split:
    part1: KForm
    part7: KForm
    part27: KForm
    part35: KForm


def lambda2_project(alpha: KForm) -> Lambda2Split:
    if alpha.degree != 2 or alpha.dim != 8:
        raise ValueError("expected a 2-form on R^8")
    p7 = pi7_matrix() @ alpha.coeffs
    return Lambda2Split(KForm(2, p7), KForm(2, alpha.coeffs - p7))


@lru_cache(maxsize=None)
def lambda4_7_generators() -> np.ndarray:
    """Rows: w ^ (v -| Phi) - v ^ (w -| Phi) for basis pairs v < w."""
    P = phi0()
    E = np.eye(8)
    rows = []
    for i, j in index_sets(2):
        a = wedge(vec_to_1form(E[j]), interior(E[i], P))
        b = wedge(vec_to_1form(E[i]), interior(E[j], P))
        rows.append((a - b).coeffs)
    G = np.array(rows)
    G.setflags(write=False)
    return G


@lru_cache(maxsize=None)
def lambda4_projectors() -> dict:
    """Orthogonal projectors (70 x 70) onto the four summands of Lambda^4."""
    H = hodge_matrix(4)
    sd = 0.5 * (np.eye(70) + H)
    asd = 0.5 * (np.eye(70) - H)
    p = _phi0_coeffs()
    P1 = np.outer(p, p) / (p @ p)
    G = lambda4_7_generators()
    U, s, _ = np.linalg.svd(G.T, full_matrices=False)
    rank = int(np.sum(s > s[0] * 1e-10))
    Q = U[:, :rank]
    P7 = Q @ Q.T
    P27 = sd - P1 - P7
    out = {"1": P1, "7": P7, "27": P27, "35": asd, "rank7": rank}
    for v in out.values():
        if isinstance(v, np.ndarray):
            v.setflags(write=False)
    return out


def lambda4_project(xi: KForm) -> Lambda4Split:
    if xi.degree != 4 or xi.dim != 8:
        raise ValueError("expected a 4-form on R^8")
    P = lambda4_projectors()
    c = xi.coeffs
    return Lambda4Split(*(KForm(4, P[key] @ c) for key in ("1", "7", "27", "35")))


# ---------------------------------------------------------------------------
# identity suite

# e_i x e_j = sign * e_1 x e_ref (1-based indices)
CROSS_TABLE = (
    (1, 5, +1, 5), (2, 6, +1, 5), (3, 7, +1, 5), (4, 8, +1, 5),
    (1, 6, +1, 6), (2, 5, -1, 6), (3, 8, +1, 6), (4, 7, -1, 6),
    (1, 7, +1, 7), (2, 8, -1, 7), (3, 5, -1, 7), (4, 6, +1, 7),
    (1, 8, +1, 8), (2, 7, +1, 8), (3, 6, -1, 8), (4, 5, -1, 8),
)


def cross_table_residuals() -> np.ndarray:
    E = np.eye(8)
    return np.array([np.max(np.abs(cross2_array(E[i - 1], E[j - 1])
                                   - sgn * cross2_array(E[0], E[r - 1])))
                     for i, j, sgn, r in CROSS_TABLE])


@lru_cache(maxsize=None)
def _tau_on_basis() -> np.ndarray:
    """tau(e_i, e_j, e_k, e_l) for the 70 increasing index sets, as rows."""
    E = np.eye(8)
    T = np.array([tau4_array(*(E[i] for i in I)) for I in index_sets(4)])
    T.setflags(write=False)
    return T


@lru_cache(maxsize=None)
def _forms_4_7_tensor() -> np.ndarray:
    """B[:, p, q] = coefficients of e^q ^ (e_p -| Phi) - e^p ^ (e_q -| Phi)."""
    E = np.eye(8)
    P = phi0()
    B = np.zeros((70, 8, 8))
    for p in range(8):
        for q in range(8):
            B[:, p, q] = (wedge(vec_to_1form(E[q]), interior(E[p], P))
                          - wedge(vec_to_1form(E[p]), interior(E[q], P))).coeffs
    B.setflags(write=False)
    return B


def algebra_identity_residuals(rng: np.random.Generator, samples: int) -> dict:
    """Max residuals of the pointwise cross-product identities on random unit vectors."""
    unit = lambda x: x / np.linalg.norm(x, axis=-1, keepdims=True)
    a, b, c, d = (unit(rng.normal(size=(samples, 8))) for _ in range(4))
    g = lambda x, y: np.sum(x * y, axis=-1)
    out = {}
    lhs = g(cross2_array(a, b), cross2_array(c, d))
    rhs = -phi0_eval_array(a, b, c, d) + g(a, c) * g(b, d) - g(a, d) * g(b, c)
    out["inner_cross2"] = np.max(np.abs(lhs - rhs))
    ab = wedge11(a, b)
    out["cross2_norm"] = np.max(np.abs(g(cross2_array(a, b), cross2_array(a, b)) - g(ab, ab)))
    # |a x b x c|^2 = |a ^ b ^ c|^2 = det of the Gram matrix
    V = np.stack([a, b, c], axis=1)
    gram = np.linalg.det(V @ np.swapaxes(V, 1, 2))
    out["cross3_norm"] = np.max(np.abs(g(cross3_array(a, b, c), cross3_array(a, b, c)) - gram))
    lhs = cross2_array(a, b) @ _tau_on_basis().T
    rhs = np.einsum("rpq,np,nq->nr", _forms_4_7_tensor(), a, b)
    out["inner_tau"] = np.max(np.abs(lhs - rhs))
    P = lambda4_projectors()
    out["inner_tau_in_L4_7"] = np.max(np.abs(lhs @ (np.eye(70) - P["7"]).T))
    t = tau4_array(a, b, c, d)
    alt = 0.0
    for perm, sgn in ((("b", "a", "c", "d"), -1), (("a", "c", "b", "d"), -1),
                      (("a", "b", "d", "c"), -1), (("b", "c", "d", "a"), -1)):
        vec = dict(a=a, b=b, c=c, d=d)
        alt = max(alt, np.max(np.abs(tau4_array(*(vec[k] for k in perm)) - sgn * t)))
    out["tau_alternating"] = alt
    out["tau_repeated"] = np.max(np.abs(tau4_array(a, b, b, d)))
    out["cross_table"] = np.max(cross_table_residuals())
    return {k: float(v) for k, v in out.items()}
