"""Sparse CSR matrices and Jacobi-preconditioned iterative solvers.

Everything here is deterministic: triplet assembly canonicalizes the input
order before reduction, and the solvers are plain sequential recurrences, so
identical inputs give bit-identical outputs.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels


class ConvergenceError(RuntimeError):
    """Iterative solve did not reach the requested tolerance."""

    def __init__(self, method, iterations, residual):
        super().__init__(
            f"{method} failed to converge after {iterations} iterations "
            f"(relative residual {residual:.3e})"
        )
        self.method = method
        self.iterations = iterations
        self.residual = residual


@dataclass(frozen=True)
class CsrMatrix:
    nrows: int
    ncols: int
    row_offsets: np.ndarray  # int64, len nrows+1, nondecreasing
    col_indices: np.ndarray  # int64, strictly increasing within each row
    values: np.ndarray  # float64

    @property
    def nnz(self):
        return len(self.values)

    def toarray(self):
        """Dense copy, for tests and small diagnostics only."""
        out = np.zeros((self.nrows, self.ncols))
        for i in range(self.nrows):
            sl = slice(self.row_offsets[i], self.row_offsets[i + 1])
            out[i, self.col_indices[sl]] = self.values[sl]
        return out


def csr_from_triplets(nrows, ncols, rows, cols, values):
    """Build a CSR matrix from COO triplets, summing duplicates.

    The triplets are sorted by (row, col, value) before reduction, so the
    result is bit-identical for any permutation of the input.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    if not (rows.shape == cols.shape == values.shape):
        raise ValueError("rows, cols, values must have equal length")
    if rows.size:
        if rows.min() < 0 or rows.max() >= nrows:
            raise ValueError("row index out of range")
        if cols.min() < 0 or cols.max() >= ncols:
            raise ValueError("col index out of range")

    order = np.lexsort((values, cols, rows))
    rows, cols, values = rows[order], cols[order], values[order]

    if rows.size:
        first = np.ones(rows.size, dtype=bool)
        first[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
        group = np.cumsum(first) - 1
        out_vals = np.zeros(int(first.sum()))
        np.add.at(out_vals, group, values)
        out_rows = rows[first]
        out_cols = cols[first]
    else:
        out_vals = values
        out_rows = rows
        out_cols = cols

    offsets = np.zeros(nrows + 1, dtype=np.int64)
    np.cumsum(np.bincount(out_rows, minlength=nrows), out=offsets[1:])
    return CsrMatrix(nrows, ncols, offsets, out_cols.astype(np.int64), out_vals)


def spmv(a, x):
    """y = A @ x with deterministic in-row accumulation."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (a.ncols,):
        raise ValueError(f"spmv: x has shape {x.shape}, expected ({a.ncols},)")
    out = np.empty(a.nrows)
    return _kernels.spmv_into(a.row_offsets, a.col_indices, a.values, x, out)


def transpose(a):
    return csr_from_triplets(
        a.ncols,
        a.nrows,
        a.col_indices,
        _expand_rows(a),
        a.values,
    )


def _expand_rows(a):
    return np.repeat(np.arange(a.nrows, dtype=np.int64), np.diff(a.row_offsets))


def submatrix(a, row_ids, col_ids):
    """Rows/columns of ``a`` restricted to the given (ascending) index sets."""
    row_ids = np.asarray(row_ids, dtype=np.int64)
    col_ids = np.asarray(col_ids, dtype=np.int64)
    row_map = np.full(a.nrows, -1, dtype=np.int64)
    row_map[row_ids] = np.arange(len(row_ids))
    col_map = np.full(a.ncols, -1, dtype=np.int64)
    col_map[col_ids] = np.arange(len(col_ids))

    rows = row_map[_expand_rows(a)]
    cols = col_map[a.col_indices]
    keep = (rows >= 0) & (cols >= 0)
    return csr_from_triplets(
        len(row_ids), len(col_ids), rows[keep], cols[keep], a.values[keep]
    )


def diagonal(a):
    d = np.zeros(min(a.nrows, a.ncols))
    for i in range(len(d)):
        sl = slice(a.row_offsets[i], a.row_offsets[i + 1])
        hit = np.searchsorted(a.col_indices[sl], i)
        if hit < sl.stop - sl.start and a.col_indices[sl.start + hit] == i:
            d[i] = a.values[sl.start + hit]
    return d


def solve(a, b, method="cg", tol=1e-10, max_iter=None):
    """Solve A x = b iteratively. Returns (x, iterations).

    ``cg`` assumes A symmetric positive definite; ``bicgstab`` handles
    indefinite systems.  Both use Jacobi preconditioning and verify the true
    relative residual before returning.
    """
    if a.nrows != a.ncols:
        raise ValueError("solve requires a square matrix")
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (a.nrows,):
        raise ValueError("right-hand side length mismatch")
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(a.nrows), 0
    if max_iter is None:
        max_iter = max(1000, 20 * a.nrows)

    d = diagonal(a)
    inv_d = np.where(d != 0.0, 1.0 / np.where(d != 0.0, d, 1.0), 1.0)

    if method == "cg":
        return _cg(a, b, inv_d, tol, max_iter, bnorm)
    if method == "bicgstab":
        return _bicgstab(a, b, inv_d, tol, max_iter, bnorm)
    raise ValueError(f"unknown method {method!r}")


def _cg(a, b, inv_d, tol, max_iter, bnorm):
    x = np.zeros(a.nrows)
    r = b.copy()
    z = inv_d * r
    p = z.copy()
    rz = r @ z
    for k in range(1, max_iter + 1):
        ap = spmv(a, p)
        pap = p @ ap
        if pap == 0.0:
            raise ConvergenceError("cg", k, np.linalg.norm(r) / bnorm)
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        if np.linalg.norm(r) <= tol * bnorm:
            true_res = np.linalg.norm(b - spmv(a, x)) / bnorm
            if true_res <= tol:
                return x, k
        z = inv_d * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceError("cg", max_iter, np.linalg.norm(r) / bnorm)


def _bicgstab(a, b, inv_d, tol, max_iter, bnorm):
    x = np.zeros(a.nrows)
    r = b.copy()
    r_hat = r.copy()
    rho = alpha = omega = 1.0
    v = np.zeros(a.nrows)
    p = np.zeros(a.nrows)
    for k in range(1, max_iter + 1):
        rho_new = r_hat @ r
        if rho_new == 0.0:
            raise ConvergenceError("bicgstab", k, np.linalg.norm(r) / bnorm)
        beta = (rho_new / rho) * (alpha / omega)
        p = r + beta * (p - omega * v)
        p_hat = inv_d * p
        v = spmv(a, p_hat)
        denom = r_hat @ v
        if denom == 0.0:
            raise ConvergenceError("bicgstab", k, np.linalg.norm(r) / bnorm)
        alpha = rho_new / denom
        s = r - alpha * v
        if np.linalg.norm(s) <= tol * bnorm:
            x += alpha * p_hat
            true_res = np.linalg.norm(b - spmv(a, x)) / bnorm
            if true_res <= tol:
                return x, k
            s_full = b - spmv(a, x)
            r = s_full
            rho = rho_new
            continue
        s_hat = inv_d * s
        t = spmv(a, s_hat)
        tt = t @ t
        if tt == 0.0:
            raise ConvergenceError("bicgstab", k, np.linalg.norm(s) / bnorm)
        omega = (t @ s) / tt
        if omega == 0.0:
            raise ConvergenceError("bicgstab", k, np.linalg.norm(s) / bnorm)
        x += alpha * p_hat + omega * s_hat
        r = s - omega * t
        if np.linalg.norm(r) <= tol * bnorm:
            true_res = np.linalg.norm(b - spmv(a, x)) / bnorm
            if true_res <= tol:
                return x, k
        rho = rho_new
    raise ConvergenceError("bicgstab", max_iter, np.linalg.norm(r) / bnorm)
