"""Sparse triplet assembly and direct solves (scipy/SuperLU backend)."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

RESIDUAL_TOL = 1e-10


class SolveFailed(RuntimeError):
    def __init__(self, msg: str, residual: float = float("nan")):
        super().__init__(f"{msg} (relative residual {residual:.3e})")
        self.residual = residual


class TripletBuilder:
    """Accumulates (row, col, value) entries; duplicates sum on compression."""

    def __init__(self, nrows: int, ncols: int):
        self.nrows = int(nrows)
        self.ncols = int(ncols)
        self._rows: list[np.ndarray] = []
        self._cols: list[np.ndarray] = []
        self._vals: list[np.ndarray] = []

    def add(self, rows, cols, vals) -> None:
        r = np.atleast_1d(np.asarray(rows, dtype=np.int64)).ravel()
        c = np.atleast_1d(np.asarray(cols, dtype=np.int64)).ravel()
        v = np.atleast_1d(np.asarray(vals, dtype=float)).ravel()
        if not (len(r) == len(c) == len(v)):
            raise ValueError("triplet arrays must have equal length")
        self._rows.append(r)
        self._cols.append(c)
        self._vals.append(v)

    def compress(self) -> "SparseMatrix":
        if self._rows:
            r = np.concatenate(self._rows)
            c = np.concatenate(self._cols)
            v = np.concatenate(self._vals)
        else:
            r = c = np.zeros(0, dtype=np.int64)
            v = np.zeros(0)
        if len(r) and (r.min() < 0 or r.max() >= self.nrows
                       or c.min() < 0 or c.max() >= self.ncols):
            raise IndexError("triplet index out of range")
        m = sp.coo_matrix((v, (r, c)), shape=(self.nrows, self.ncols)).tocsr()
        m.sum_duplicates()
        m.sort_indices()
        return SparseMatrix(m)


def compress(builder: TripletBuilder) -> "SparseMatrix":
    return builder.compress()


class SparseMatrix:
    """Compressed-row matrix wrapper."""

    def __init__(self, csr: sp.csr_matrix):
        self._csr = csr

    @property
    def shape(self):
        return self._csr.shape

    @property
    def row_offsets(self) -> np.ndarray:
        return self._csr.indptr

    @property
    def col_indices(self) -> np.ndarray:
        return self._csr.indices

    @property
    def values(self) -> np.ndarray:
        return self._csr.data

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self._csr @ x

    def to_scipy(self) -> sp.csr_matrix:
        return self._csr

    def copy(self) -> "SparseMatrix":
        return SparseMatrix(self._csr.copy())


def solve(A: SparseMatrix, b: np.ndarray) -> np.ndarray:
    """Direct sparse LU solve with a relative-residual check."""
    return LuSolver(A).solve(b)


class LuSolver:
    """Cached LU factorization for systems solved many times per run."""

    def __init__(self, A: SparseMatrix):
        m = A.to_scipy() if isinstance(A, SparseMatrix) else A
        if m.shape[0] != m.shape[1]:
            raise ValueError("matrix must be square")
        self._csr = m.tocsr()
        try:
            self._lu = spla.splu(m.tocsc())
        except RuntimeError as exc:
            raise SolveFailed(f"factorization failed: {exc}") from exc

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        x = self._lu.solve(b)
        nb = np.linalg.norm(b)
        if nb == 0.0:
            return np.zeros_like(b)
        res = np.linalg.norm(self._csr @ x - b) / nb
        if not res <= RESIDUAL_TOL:
            raise SolveFailed("linear solve did not reach tolerance", res)
        return x
