"""Banded matrix storage, products, Cholesky factorisation and triangular solves.

Storage is row oriented: row ``i`` keeps ``width`` consecutive entries starting
at column ``offsets[i]``.  A classic (lower, upper) band is the special case
``offsets[i] = i - lower``; selection and aggregation matrices, whose nonzeros
drift across columns at a rate other than one per row, use the same container
with their own offsets.  Offsets must be nondecreasing, which keeps every
column's nonzeros in a contiguous run of rows.

Factorisation and triangular solves go through LAPACK (``dpbtrf``/``dtbtrs``)
on the lower symmetric band layout ``ab[i - j, j] = A[i, j]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import lapack

from .errors import DimensionMismatch, NotPositiveDefinite

# Pivots below PD_FLOOR * max(diag(A)) are treated as rank deficiency.
PD_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class BandMatrix:
    """Matrix whose row ``i`` is nonzero only on ``offsets[i] .. offsets[i]+width-1``."""

    shape: tuple[int, int]
    offsets: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        rows, cols = self.shape
        offsets = np.asarray(self.offsets, dtype=np.int64)
        data = np.array(self.data, dtype=float)
        if data.ndim != 2 or data.shape[0] != rows or offsets.shape != (rows,):
            raise DimensionMismatch(
                f"band data {data.shape} / offsets {offsets.shape} do not fit shape {self.shape}"
            )
        if rows > 1 and np.any(np.diff(offsets) < 0):
            raise ValueError("row offsets must be nondecreasing")
        # Stored slots that fall outside the matrix are kept at exactly zero.
        cidx = offsets[:, None] + np.arange(data.shape[1])[None, :]
        data[(cidx < 0) | (cidx >= cols)] = 0.0
        data.setflags(write=False)
        offsets.setflags(write=False)
        object.__setattr__(self, "shape", (int(rows), int(cols)))
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "data", data)

    # -- construction -------------------------------------------------------

    @classmethod
    def zeros(cls, shape, lower, upper):
        rows = shape[0]
        return cls(shape, np.arange(rows) - lower, np.zeros((rows, lower + upper + 1)))

    @classmethod
    def identity(cls, n):
        return cls((n, n), np.arange(n), np.ones((n, 1)))

    @classmethod
    def from_dense(cls, A, lower=None, upper=None):
        """Pack a dense matrix; bandwidths default to the tightest ones that fit."""
        A = np.asarray(A, dtype=float)
        rows, cols = A.shape
        nz_i, nz_j = np.nonzero(A)
        if lower is None:
            lower = int(max(0, (nz_i - nz_j).max())) if nz_i.size else 0
        if upper is None:
            upper = int(max(0, (nz_j - nz_i).max())) if nz_i.size else 0
        if nz_i.size and ((nz_i - nz_j).max() > lower or (nz_j - nz_i).max() > upper):
            raise ValueError("matrix has entries outside the declared band")
        offsets = np.arange(rows) - lower
        width = lower + upper + 1
        cidx = offsets[:, None] + np.arange(width)[None, :]
        valid = (cidx >= 0) & (cidx < cols)
        data = np.zeros((rows, width))
        r = np.broadcast_to(np.arange(rows)[:, None], cidx.shape)
        data[valid] = A[r[valid], cidx[valid]]
        return cls((rows, cols), offsets, data)

    @classmethod
    def from_lapack_lower(cls, ab):
        """Build a lower-triangular band from LAPACK lower storage ``ab[i-j, j]``."""
        kd = ab.shape[0] - 1
        n = ab.shape[1]
        i = np.arange(n)[:, None]
        k = np.arange(kd + 1)[None, :]
        j = i - kd + k
        valid = j >= 0
        d = np.broadcast_to(kd - k, valid.shape)
        data = np.zeros((n, kd + 1))
        data[valid] = ab[d[valid], j[valid]]
        return cls((n, n), np.arange(n) - kd, data)

    # -- structure ----------------------------------------------------------

    @property
    def rows(self):
        return self.shape[0]

    @property
    def cols(self):
        return self.shape[1]

    @property
    def width(self):
        return self.data.shape[1]

    def _nonzero_cols(self):
        """Per-row first/last column that actually holds a nonzero (or -1 if none)."""
        nz = self.data != 0.0
        any_nz = nz.any(axis=1)
        first = np.where(any_nz, nz.argmax(axis=1), 0) + self.offsets
        last = np.where(any_nz, self.width - 1 - nz[:, ::-1].argmax(axis=1), 0) + self.offsets
        return any_nz, first, last

    @property
    def lower_bw(self):
        any_nz, first, _ = self._nonzero_cols()
        if not any_nz.any():
            return 0
        return int(max(0, (np.arange(self.rows) - first)[any_nz].max()))

    @property
    def upper_bw(self):
        any_nz, _, last = self._nonzero_cols()
        if not any_nz.any():
            return 0
        return int(max(0, (last - np.arange(self.rows))[any_nz].max()))

    @property
    def bandwidth(self):
        return max(self.lower_bw, self.upper_bw)

    def _col_index(self):
        return self.offsets[:, None] + np.arange(self.width)[None, :]

    # -- conversion ---------------------------------------------------------

    def todense(self):
        rows, cols = self.shape
        out = np.zeros((rows, cols))
        cidx = self._col_index()
        valid = (cidx >= 0) & (cidx < cols)
        r = np.broadcast_to(np.arange(rows)[:, None], cidx.shape)
        out[r[valid], cidx[valid]] = self.data[valid]
        return out

    def diagonal(self):
        n = min(self.shape)
        k = np.arange(n) - self.offsets[:n]
        ok = (k >= 0) & (k < self.width)
        out = np.zeros(n)
        out[ok] = self.data[np.arange(n)[ok], k[ok]]
        return out

    def entries(self, i, j):
        """Vectorised element lookup ``A[i, j]`` (zero outside the stored band)."""
        i = np.asarray(i)
        j = np.asarray(j)
        k = j - self.offsets[i]
        ok = (k >= 0) & (k < self.width) & (j >= 0) & (j < self.cols)
        out = np.zeros(np.broadcast(i, j).shape)
        out[ok] = self.data[np.broadcast_to(i, ok.shape)[ok], k[ok]]
        return out

    def to_lapack_lower(self, kd=None):
        """Lower symmetric band layout ``ab[d, j] = A[j + d, j]`` for ``d <= kd``."""
        if self.rows != self.cols:
            raise DimensionMismatch(f"square matrix required, got {self.shape}")
        n = self.rows
        kd = self.lower_bw if kd is None else kd
        ab = np.zeros((kd + 1, n))
        j = np.arange(n)
        for d in range(kd + 1):
            ab[d, : n - d] = self.entries(j[d:], j[: n - d])
        return ab

    def to_lapack_upper_as_lower(self, kd):
        """Upper band read in lower layout: ``ab[d, j] = A[j, j + d]``."""
        n = self.rows
        ab = np.zeros((kd + 1, n))
        j = np.arange(n)
        for d in range(kd + 1):
            ab[d, : n - d] = self.entries(j[: n - d], j[d:])
        return ab

    @classmethod
    def from_symmetric_lower(cls, ab):
        """Full symmetric band from lower layout ``ab[d, j] = A[j + d, j]``."""
        kd = ab.shape[0] - 1
        n = ab.shape[1]
        data = np.zeros((n, 2 * kd + 1))
        i = np.arange(n)
        for d in range(kd + 1):
            # below the diagonal: A[i, i-d] = ab[d, i-d]
            data[d:, kd - d] = ab[d, : n - d]
            # above the diagonal: A[i, i+d] = ab[d, i]
            data[: n - d, kd + d] = ab[d, : n - d]
        return cls((n, n), i - kd, data)

    # -- arithmetic ---------------------------------------------------------

    @cached_property
    def T(self):
        rows, cols = self.shape
        cidx = self._col_index()
        valid = (cidx >= 0) & (cidx < cols)
        # Column j is covered by rows first[j] .. last[j] (contiguous, offsets sorted).
        starts = self.offsets
        ends = self.offsets + self.width - 1
        j = np.arange(cols)
        first = np.searchsorted(ends, j, side="left")
        last = np.searchsorted(starts, j, side="right") - 1
        first = np.minimum(first, max(rows - 1, 0))
        width = int(max(1, (last - first + 1).max())) if cols else 1
        data = np.zeros((cols, width))
        r = np.broadcast_to(np.arange(rows)[:, None], cidx.shape)
        cc = cidx[valid]
        data[cc, r[valid] - first[cc]] = self.data[valid]
        return BandMatrix((cols, rows), first, data)

    def matvec(self, x):
        """``A @ x`` for a vector or a 2-D block of column vectors."""
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.cols:
            raise DimensionMismatch(f"cannot multiply {self.shape} by {x.shape}")
        if self.cols == 0:
            return np.zeros((self.rows,) + x.shape[1:])
        cidx = np.clip(self._col_index(), 0, self.cols - 1)
        if x.ndim == 1:
            return np.einsum("ik,ik->i", self.data, x[cidx])
        return np.einsum("ik,ik...->i...", self.data, x[cidx])

    def __matmul__(self, other):
        if isinstance(other, BandMatrix):
            return band_matmul(self, other)
        return self.matvec(other)

    def scale_rows(self, w):
        w = np.asarray(w, dtype=float)
        return BandMatrix(self.shape, self.offsets, self.data * w[:, None])

    def __add__(self, other):
        if not isinstance(other, BandMatrix):
            return NotImplemented
        if self.shape != other.shape:
            raise DimensionMismatch(f"cannot add {self.shape} and {other.shape}")
        off = np.minimum(self.offsets, other.offsets)
        end = np.maximum(self.offsets + self.width, other.offsets + other.width)
        width = int((end - off).max()) if self.rows else 1
        data = np.zeros((self.rows, width))
        r = np.arange(self.rows)[:, None]
        for m in (self, other):
            shift = (m.offsets - off)[:, None] + np.arange(m.width)[None, :]
            data[r, shift] += m.data
        return BandMatrix(self.shape, off, data)


def band_matmul(A: BandMatrix, B: BandMatrix) -> BandMatrix:
    """Exact product of two band matrices, returned in band form."""
    if A.cols != B.rows:
        raise DimensionMismatch(f"cannot multiply {A.shape} by {B.shape}")
    shape = (A.rows, B.cols)
    if A.rows == 0 or B.rows == 0:
        return BandMatrix(shape, np.zeros(A.rows, dtype=np.int64), np.zeros((A.rows, 1)))
    last_row = B.rows - 1
    rows_k = np.clip(A._col_index(), 0, last_row)  # B row reached by A[i, k]
    off = B.offsets[rows_k[:, 0]]
    end = B.offsets[rows_k[:, -1]] + B.width
    width = int((end - off).max())
    C = np.zeros((A.rows, width))
    r = np.arange(A.rows)
    for k in range(A.width):
        a = A.data[:, k]
        if not a.any():
            continue
        bk = rows_k[:, k]
        base = B.offsets[bk] - off
        Bk = B.data[bk]
        for l in range(B.width):
            C[r, base + l] += a * Bk[:, l]
    return BandMatrix(shape, off, C)


@dataclass(frozen=True, eq=False)
class CholeskyFactor:
    """Lower band Cholesky factor ``L`` with ``A = L L'``; ``ab`` is its LAPACK layout."""

    ab: np.ndarray

    @property
    def n(self):
        return self.ab.shape[1]

    @cached_property
    def L(self) -> BandMatrix:
        return BandMatrix.from_lapack_lower(self.ab)

    def logdet(self):
        return 2.0 * np.log(self.ab[0]).sum()

    @classmethod
    def from_lower(cls, L: BandMatrix):
        return cls(np.ascontiguousarray(L.to_lapack_lower()))


def band_cholesky(A: BandMatrix, sym_tol=1e-10) -> CholeskyFactor:
    """Factor a symmetric positive definite band matrix.

    Raises :class:`NotPositiveDefinite` if LAPACK meets a nonpositive pivot or any
    squared pivot falls below ``PD_FLOOR`` times the largest diagonal entry.
    """
    if A.rows != A.cols:
        raise DimensionMismatch(f"square matrix required, got {A.shape}")
    n = A.rows
    if n == 0:
        return CholeskyFactor(np.zeros((1, 0)))
    kd = max(A.lower_bw, A.upper_bw)
    ab = A.to_lapack_lower(kd)
    up = A.to_lapack_upper_as_lower(kd)
    scale = max(np.abs(ab).max(), 1e-300)
    if np.abs(ab - up).max() > sym_tol * scale:
        raise ValueError("matrix is not symmetric")
    return _factor_lower(ab)


def _factor_lower(ab):
    diag = ab[0]
    dmax = diag.max() if diag.size else 0.0
    if dmax <= 0 or not np.all(np.isfinite(ab)):
        raise NotPositiveDefinite("precision matrix has no positive diagonal")
    c, info = lapack.dpbtrf(ab, lower=1)
    if info > 0:
        raise NotPositiveDefinite(f"leading minor of order {info} is not positive definite")
    if info < 0:
        raise ValueError(f"dpbtrf: illegal argument {-info}")
    piv = c[0] ** 2
    bad = np.flatnonzero(piv <= PD_FLOOR * dmax)
    if bad.size:
        raise NotPositiveDefinite(
            f"pivot {bad[0]} is {piv[bad[0]]:.3e}, below {PD_FLOOR:g} x max diagonal"
        )
    return CholeskyFactor(c)


def cholesky_symmetric_lower(ab) -> CholeskyFactor:
    """Factor from an already-assembled lower symmetric layout (no symmetry check needed)."""
    return _factor_lower(np.asarray(ab, dtype=float))


def _tbtrs(factor, b, trans):
    b = np.asarray(b, dtype=float)
    if b.shape[0] != factor.n:
        raise DimensionMismatch(f"factor is {factor.n}x{factor.n}, right-hand side {b.shape}")
    vec = b.ndim == 1
    rhs = b[:, None] if vec else b
    if factor.n == 0 or rhs.shape[1] == 0:
        return b.copy()
    x, info = lapack.dtbtrs(factor.ab, rhs, uplo="L", trans=trans, diag="N")
    if info != 0:
        raise NotPositiveDefinite(f"dtbtrs failed with info={info}")
    return x[:, 0] if vec else x


def solve_lower(factor: CholeskyFactor, b):
    """Solve ``L x = b`` by forward substitution."""
    return _tbtrs(factor, b, "N")


def solve_upper(factor: CholeskyFactor, b):
    """Solve ``L' x = b`` by backward substitution."""
    return _tbtrs(factor, b, "T")


def cho_solve(factor: CholeskyFactor, b):
    """Solve ``A x = b`` given ``A = L L'``."""
    return solve_upper(factor, solve_lower(factor, b))
