"""Sparse linear solvers: direct LU and restarted GMRES with ILU(0)."""
from __future__ import annotations

from typing import NamedTuple

import numba
import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee, structural_rank
from scipy.sparse.linalg import splu

PIVOT_SHIFT = 1e-8


class StructurallySingularError(ArithmeticError):
    """The matrix has no nonzero transversal; no ordering can factor it."""


class LinearSolution(NamedTuple):
    x: np.ndarray
    iterations: int
    failed: bool
    work: float = 0.0  # floating-point operation estimate
    memory_bytes: float = 0.0


@numba.njit(cache=True)
def _ilu0(indptr, indices, data, diag):
    """In-place ILU(0) on a CSR matrix with sorted column indices.

    Returns the first row with a zero pivot, or -1.
    """
    n = indptr.size - 1
    pos = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        for jj in range(indptr[i], indptr[i + 1]):
            pos[indices[jj]] = jj
        for kk in range(indptr[i], diag[i]):
            k = indices[kk]
            piv = data[diag[k]]
            if piv == 0.0:
                return k
            data[kk] /= piv
            lik = data[kk]
            for jj in range(diag[k] + 1, indptr[k + 1]):
                p = pos[indices[jj]]
                if p >= 0:
                    data[p] -= lik * data[jj]
        for jj in range(indptr[i], indptr[i + 1]):
            pos[indices[jj]] = -1
        if data[diag[i]] == 0.0:
            return i
    return -1


@numba.njit(cache=True)
def _ilu_apply(indptr, indices, data, diag, r):
    n = indptr.size - 1
    z = r.copy()
    for i in range(n):
        s = z[i]
        for jj in range(indptr[i], diag[i]):
            s -= data[jj] * z[indices[jj]]
        z[i] = s
    for i in range(n - 1, -1, -1):
        s = z[i]
        for jj in range(diag[i] + 1, indptr[i + 1]):
            s -= data[jj] * z[indices[jj]]
        z[i] = s / data[diag[i]]
    return z


@numba.njit(cache=True)
def _diag_positions(indptr, indices):
    n = indptr.size - 1
    diag = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        for jj in range(indptr[i], indptr[i + 1]):
            if indices[jj] == i:
                diag[i] = jj
                break
    return diag


class _CSR(NamedTuple):
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    @property
    def nnz(self) -> int:
        return self.data.size


def _as_csr(A) -> _CSR:
    if not (sp.issparse(A) and A.format == "csr"):
        A = sp.csr_matrix(A)
    return _CSR(np.asarray(A.indptr, dtype=np.int64), np.asarray(A.indices, dtype=np.int64),
                np.asarray(A.data, dtype=float))


class ILU0:
    """Zero-fill incomplete LU factors sharing the sparsity of ``A``."""

    def __init__(self, A, pivot_stab: bool = False):
        # internal callers hand over sorted CSR arrays that already store the diagonal
        m = A if isinstance(A, _CSR) else _as_csr(_with_diagonal(A))
        diag = _diag_positions(m.indptr, m.indices)
        if np.any(diag < 0):
            n = m.indptr.size - 1
            m = _as_csr(_with_diagonal(sp.csr_matrix((m.data, m.indices, m.indptr), shape=(n, n))))
            diag = _diag_positions(m.indptr, m.indices)
        self.indptr = m.indptr
        self.indices = m.indices
        data = m.data.copy()
        if pivot_stab:
            rowmax = np.maximum.reduceat(np.abs(data), self.indptr[:-1]) if data.size else np.zeros(diag.size)
            d = data[diag]
            sign = np.where(d < 0, -1.0, 1.0)
            data[diag] = d + sign * PIVOT_SHIFT * rowmax
        self.diag = diag
        self.data = data
        self.zero_pivot = int(_ilu0(self.indptr, self.indices, self.data, self.diag))
        row_nnz = np.diff(self.indptr)
        self.setup_work = float(np.sum(row_nnz * row_nnz))

    def solve(self, r: np.ndarray) -> np.ndarray:
        return _ilu_apply(self.indptr, self.indices, self.data, self.diag, r)


def _with_diagonal(A: sp.csr_matrix) -> sp.csr_matrix:
    """Return ``A`` in sorted CSR form with every diagonal entry stored."""
    A = sp.csr_matrix(A)
    n = A.shape[0]
    if A.diagonal().size == n and np.all(_stored_diag(A)):
        A.sort_indices()
        return A
    coo = A.tocoo()
    rows = np.concatenate([coo.row, np.arange(n)])
    cols = np.concatenate([coo.col, np.arange(n)])
    vals = np.concatenate([coo.data, np.zeros(n)])
    out = sp.coo_matrix((vals, (rows, cols)), shape=A.shape).tocsr()
    out.sort_indices()
    return out


def _stored_diag(A: sp.csr_matrix) -> np.ndarray:
    n = A.shape[0]
    found = np.zeros(n, dtype=bool)
    rows = np.repeat(np.arange(n), np.diff(A.indptr))
    found[rows[A.indices == rows]] = True
    return found


def ordering_permutation(A: sp.spmatrix, ordering: str, block_size: int = 1) -> np.ndarray:
    """Unknown permutation for ``natural``, ``red-black`` or ``rcm`` ordering.

    The ordering is computed on the block graph (one node per cell) and then
    expanded so the unknowns of one block stay contiguous.
    """
    n = A.shape[0]
    if n % block_size:
        raise ValueError("matrix size is not a multiple of the block size")
    nb = n // block_size
    if ordering == "natural":
        return np.arange(n)
    A = sp.csr_matrix(A)
    if block_size > 1:
        coo = A.tocoo()
        graph = sp.coo_matrix(
            (np.ones(coo.nnz), (coo.row // block_size, coo.col // block_size)), shape=(nb, nb)
        ).tocsr()
    else:
        graph = A
    graph = (abs(graph) + abs(graph).T).tocsr()
    if ordering == "rcm":
        blocks = reverse_cuthill_mckee(graph, symmetric_mode=True).astype(np.int64)
    elif ordering == "red-black":
        blocks = _multicolor_order(graph.indptr, graph.indices.astype(np.int64))
    else:
        raise ValueError(f"unknown ordering {ordering!r}")
    return (blocks[:, None] * block_size + np.arange(block_size)[None, :]).ravel()


@numba.njit(cache=True)
def _greedy_colors(indptr, indices):
    n = indptr.size - 1
    color = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        used = np.zeros(n + 1, dtype=np.bool_)
        for jj in range(indptr[i], indptr[i + 1]):
            j = indices[jj]
            if j != i and color[j] >= 0:
                used[color[j]] = True
        c = 0
        while used[c]:
            c += 1
        color[i] = c
    return color


def _multicolor_order(indptr, indices) -> np.ndarray:
    # on a bipartite stencil (5-point grid) greedy coloring is the checkerboard
    color = _greedy_colors(indptr.astype(np.int64), indices)
    return np.argsort(color, kind="stable").astype(np.int64)


@numba.njit(cache=True)
def _has_empty_line(indptr, indices):
    n = indptr.size - 1
    seen = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        if indptr[i + 1] == indptr[i]:
            return True
    for j in indices:
        seen[j] = True
    for i in range(n):
        if not seen[i]:
            return True
    return False


def _check_structure(m: _CSR):
    if _has_empty_line(m.indptr, m.indices):
        raise StructurallySingularError("matrix has an empty row or column")


@numba.njit(cache=True)
def _csr_matvec(indptr, indices, data, x):
    n = indptr.size - 1
    y = np.zeros(n)
    for i in range(n):
        s = 0.0
        for jj in range(indptr[i], indptr[i + 1]):
            s += data[jj] * x[indices[jj]]
        y[i] = s
    return y


@numba.njit(cache=True)
def _permute_csr(indptr, indices, data, perm):
    """Symmetric permutation ``A[perm][:, perm]`` with sorted rows."""
    n = indptr.size - 1
    inv = np.empty(n, dtype=np.int64)
    for i in range(n):
        inv[perm[i]] = i
    new_ptr = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        old = perm[i]
        new_ptr[i + 1] = new_ptr[i] + indptr[old + 1] - indptr[old]
    new_idx = np.empty(new_ptr[n], dtype=np.int64)
    new_dat = np.empty(new_ptr[n])
    for i in range(n):
        old = perm[i]
        pos = new_ptr[i]
        for jj in range(indptr[old], indptr[old + 1]):
            c = inv[indices[jj]]
            v = data[jj]
            # insertion sort; rows hold only a handful of entries
            q = pos
            while q > new_ptr[i] and new_idx[q - 1] > c:
                new_idx[q] = new_idx[q - 1]
                new_dat[q] = new_dat[q - 1]
                q -= 1
            new_idx[q] = c
            new_dat[q] = v
            pos += 1
    return new_ptr, new_idx, new_dat


@numba.njit(cache=True)
def _gmres_kernel(indptr, indices, data, b, use_m, mp, mi, md, mdiag, restart, tol, maxiter):
    n = b.size
    x = np.zeros(n)
    bnorm = np.sqrt(np.dot(b, b))
    if bnorm == 0.0:
        return x, 0, True, 0.0
    nnz = data.size
    work = 0.0
    total = 0
    r = b.copy()
    beta = bnorm
    V = np.zeros((restart + 1, n))
    Z = np.zeros((restart, n))
    H = np.zeros((restart + 1, restart))
    cs = np.zeros(restart)
    sn = np.zeros(restart)
    g = np.zeros(restart + 1)
    h = np.zeros(restart + 1)
    while True:
        g[:] = 0.0
        g[0] = beta
        V[0] = r / beta
        k_done = 0
        for k in range(restart):
            if total >= maxiter:
                break
            if use_m:
                Z[k] = _ilu_apply(mp, mi, md, mdiag, V[k])
            else:
                Z[k] = V[k]
            w = _csr_matvec(indptr, indices, data, Z[k])
            # classical Gram-Schmidt, applied twice for stability
            for i in range(k + 1):
                h[i] = 0.0
            for sweep in range(2):
                proj = np.zeros(k + 1)
                for i in range(k + 1):
                    proj[i] = np.dot(V[i], w)
                for i in range(k + 1):
                    w -= proj[i] * V[i]
                    h[i] += proj[i]
            hnext = np.sqrt(np.dot(w, w))
            for i in range(k + 1):
                H[i, k] = h[i]
            H[k + 1, k] = hnext
            total += 1
            k_done = k + 1
            work += 4.0 * nnz + 8.0 * n * (k + 1) + 4.0 * n
            for i in range(k):
                t = cs[i] * H[i, k] + sn[i] * H[i + 1, k]
                H[i + 1, k] = -sn[i] * H[i, k] + cs[i] * H[i + 1, k]
                H[i, k] = t
            denom = np.hypot(H[k, k], H[k + 1, k])
            if denom == 0.0:
                cs[k] = 1.0
                sn[k] = 0.0
            else:
                cs[k] = H[k, k] / denom
                sn[k] = H[k + 1, k] / denom
            H[k, k] = denom
            H[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            if abs(g[k + 1]) <= tol * bnorm or hnext == 0.0:
                break
            V[k + 1] = w / hnext
        if k_done > 0:
            y = np.zeros(k_done)
            for i in range(k_done - 1, -1, -1):
                s = g[i]
                for j in range(i + 1, k_done):
                    s -= H[i, j] * y[j]
                y[i] = s / H[i, i] if H[i, i] != 0.0 else 0.0
            for i in range(k_done):
                x += y[i] * Z[i]
            work += 2.0 * n * k_done
        r = b - _csr_matvec(indptr, indices, data, x)
        beta = np.sqrt(np.dot(r, r))
        work += 2.0 * nnz
        if beta <= tol * bnorm:
            return x, total, True, work
        if total >= maxiter or k_done == 0 or not np.isfinite(beta):
            return x, total, False, work


def gmres(A, b, M: ILU0 | None = None, restart=30, tol=1e-4, maxiter=100):
    """Right-preconditioned restarted GMRES.

    ``maxiter`` caps the total number of Arnoldi steps across restarts.
    Returns ``(x, iterations, converged, work)``.
    """
    m = A if isinstance(A, _CSR) else _as_csr(A)
    b = np.ascontiguousarray(b, dtype=float)
    restart = max(1, min(int(restart), b.size))
    if M is None:
        empty_i, empty_f = np.zeros(1, dtype=np.int64), np.zeros(0)
        pre = (False, empty_i, empty_i, empty_f, empty_i)
    else:
        pre = (True, M.indptr, M.indices, M.data, M.diag)
    x, its, ok, work = _gmres_kernel(
        m.indptr, m.indices, m.data, b, *pre, restart, float(tol), int(maxiter),
    )
    return x, int(its), bool(ok), float(work)


def linear_solve(A, b, controls, block_size: int = 1, perm: np.ndarray | None = None) -> LinearSolution:
    """Solve ``A x = b`` according to the solver controls.

    ``A`` is a sparse matrix or a sorted ``(indptr, indices, data)`` CSR triple.

    ``direct`` uses sparse LU in the requested unknown ordering and reports a
    single iteration. ``iterative`` runs restarted GMRES (restart length
    ``north_restart``, tolerance ``lin_tol``, cap ``lin_iter_max``) with an
    ILU(0) preconditioner built on the reordered matrix.
    """
    if isinstance(A, tuple):
        m = _CSR(*A)
        n = m.indptr.size - 1
    else:
        if A.shape[0] != A.shape[1]:
            raise ValueError("matrix must be square")
        n = A.shape[0]
        m = _as_csr(A)
    b = np.asarray(b, dtype=float)
    if b.shape != (n,):
        raise ValueError("right-hand side does not match the matrix")
    _check_structure(m)
    if perm is None:
        perm = ordering_permutation(sp.csr_matrix((m.data, m.indices, m.indptr), shape=(n, n)),
                                    controls.ordering, block_size)
    mp = _CSR(*_permute_csr(m.indptr, m.indices, m.data, np.asarray(perm, dtype=np.int64)))
    bp = b[perm]
    x = np.empty(n)

    if controls.solver_kind == "direct":
        Ap = sp.csr_matrix((mp.data, mp.indices, mp.indptr), shape=(n, n))
        try:
            lu = splu(Ap.tocsc(), permc_spec="NATURAL", diag_pivot_thresh=1.0,
                      options={"SymmetricMode": False})
        except RuntimeError:
            if structural_rank(Ap) < n:
                raise StructurallySingularError("matrix is structurally singular") from None
            return LinearSolution(np.zeros(n), 1, True, 0.0, 0.0)
        xp = lu.solve(bp)
        lcol = np.diff(lu.L.tocsc().indptr).astype(float)
        urow = np.diff(lu.U.tocsr().indptr).astype(float)
        fill = lu.L.nnz + lu.U.nnz
        work = float(np.sum(lcol * urow)) + 4.0 * fill
        x[perm] = xp
        failed = not np.all(np.isfinite(x))
        return LinearSolution(x, 1, failed, work, 12.0 * fill)

    ilu = ILU0(mp, pivot_stab=controls.pivot_stab == "on")
    mem = 12.0 * mp.nnz + 8.0 * n * (2 * controls.north_restart + 2)
    if ilu.zero_pivot >= 0:
        if structural_rank(sp.csr_matrix((mp.data, mp.indices, mp.indptr), shape=(n, n))) < n:
            raise StructurallySingularError("matrix is structurally singular")
        return LinearSolution(np.zeros(n), 0, True, ilu.setup_work, mem)
    xp, its, ok, work = gmres(
        mp, bp, M=ilu, restart=controls.north_restart,
        tol=controls.lin_tol, maxiter=controls.lin_iter_max,
    )
    work += ilu.setup_work + 4.0 * mp.nnz * its
    x[perm] = xp
    if not np.all(np.isfinite(x)):
        return LinearSolution(np.zeros(n), its, True, work, mem)
    return LinearSolution(x, its, not ok, work, mem)
