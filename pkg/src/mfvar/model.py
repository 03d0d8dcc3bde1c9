"""Stacked mixed-frequency VAR and the Gaussian conditional of its missing cells.

Periods are 0-based throughout: the VAR equation holds for ``t = p, ..., T-1`` and
rows ``0 .. p-1`` are the initial conditions.  Every missing cell of the panel,
initial periods included, is an element of the latent vector ``Y^u``; cells are
ordered time-major (period, then column), which is exactly the order they take in
the stacked vector ``Y = (y_0', ..., y_{T-1}')'``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .band import BandMatrix, CholeskyFactor, cho_solve, cholesky_symmetric_lower
from .errors import DimensionMismatch, MaskInconsistent


def _check_spd(S, what):
    S = np.asarray(S, dtype=float)
    if not np.allclose(S, np.swapaxes(S, -1, -2), rtol=1e-10, atol=1e-14):
        raise ValueError(f"{what} is not symmetric")
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise ValueError(f"{what} is not positive definite") from None
    return S


@dataclass(frozen=True, eq=False)
class VarParams:
    """VAR(p) parameters: ``y_t = b0 + sum_j B[j-1] y_{t-j} + e_t``.

    ``sigma`` is either one ``(n, n)`` covariance or a ``(T - p, n, n)`` stack
    holding ``Sigma_t`` for ``t = p, ..., T-1``.
    """

    b0: np.ndarray
    B: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        b0 = np.asarray(self.b0, dtype=float).reshape(-1)
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 2:
            B = B[None]
        n = b0.size
        if B.ndim != 3 or B.shape[1:] != (n, n) or B.shape[0] < 1:
            raise DimensionMismatch(f"lag matrices must be (p, {n}, {n}), got {B.shape}")
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.shape[-2:] != (n, n) or sigma.ndim not in (2, 3):
            raise DimensionMismatch(f"covariance must be ({n}, {n}) or (T-p, {n}, {n})")
        _check_spd(sigma, "innovation covariance")
        object.__setattr__(self, "b0", b0)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "sigma", sigma)

    @property
    def n(self):
        return self.b0.size

    @property
    def p(self):
        return self.B.shape[0]

    @property
    def time_varying(self):
        return self.sigma.ndim == 3

    def sigma_at(self, T):
        """``(T - p, n, n)`` stack of per-equation covariances."""
        if self.time_varying:
            if self.sigma.shape[0] != T - self.p:
                raise DimensionMismatch(
                    f"{self.sigma.shape[0]} covariances supplied for {T - self.p} equations"
                )
            return self.sigma
        return np.broadcast_to(self.sigma, (T - self.p, self.n, self.n))

    def coef_matrix(self):
        """Regression-form coefficients ``[b0'; B1'; ...; Bp']`` of shape ``(1 + n p, n)``."""
        return np.vstack([self.b0[None, :]] + [Bj.T for Bj in self.B])

    @classmethod
    def from_coef_matrix(cls, A, sigma):
        A = np.asarray(A, dtype=float)
        n = A.shape[1]
        p = (A.shape[0] - 1) // n
        B = A[1:].reshape(p, n, n).transpose(0, 2, 1)
        return cls(A[0], B, sigma)


@dataclass(frozen=True, eq=False)
class MixedPanel:
    """``T x n`` panel with its missingness mask and observed low-frequency aggregates.

    Columns ``0 .. n_o-1`` hold the high-frequency block and ``n_o .. n-1`` the
    low-frequency block.  ``agg_time[k]``, ``agg_var[k]`` and ``agg_value[k]`` give
    the period stamp, column and value of the ``k``-th observed aggregate.
    """

    values: np.ndarray
    n_o: int
    agg_time: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    agg_var: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    agg_value: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mask: np.ndarray | None = None
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise MaskInconsistent(f"panel must be 2-D, got shape {values.shape}")
        T, n = values.shape
        mask = ~np.isnan(values) if self.mask is None else np.array(self.mask, dtype=bool)
        if mask.shape != values.shape:
            raise MaskInconsistent(f"mask shape {mask.shape} != panel shape {values.shape}")
        if not np.all(np.isfinite(values[mask])):
            raise MaskInconsistent("cells marked observed hold non-finite values")
        if not 0 <= self.n_o <= n:
            raise MaskInconsistent(f"n_o={self.n_o} outside 0..{n}")
        values[~mask] = np.nan
        agg_time = np.asarray(self.agg_time, dtype=np.int64).reshape(-1)
        agg_var = np.asarray(self.agg_var, dtype=np.int64).reshape(-1)
        agg_value = np.asarray(self.agg_value, dtype=float).reshape(-1)
        if not (agg_time.size == agg_var.size == agg_value.size):
            raise MaskInconsistent("aggregate stamp/variable/value arrays differ in length")
        if agg_time.size and (agg_time.min() < 0 or agg_time.max() >= T):
            raise MaskInconsistent("aggregate stamp outside the sample")
        if agg_var.size and (agg_var.min() < 0 or agg_var.max() >= n):
            raise MaskInconsistent("aggregate refers to an unknown column")
        if not np.all(np.isfinite(agg_value)):
            raise MaskInconsistent("aggregate values must be finite")
        if self.names is not None and len(self.names) != n:
            raise MaskInconsistent(f"{len(self.names)} names for {n} columns")
        for name, arr in (("values", values), ("mask", mask), ("agg_time", agg_time),
                          ("agg_var", agg_var), ("agg_value", agg_value)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def T(self):
        return self.values.shape[0]

    @property
    def n(self):
        return self.values.shape[1]

    @property
    def n_u(self):
        return self.n - self.n_o

    @cached_property
    def missing_index(self):
        """Positions of the missing cells in the stacked ``Tn`` vector."""
        return np.flatnonzero(~self.mask.ravel())

    @cached_property
    def observed_index(self):
        return np.flatnonzero(self.mask.ravel())

    @cached_property
    def cell_lookup(self):
        """``(T, n)`` array mapping each missing cell to its ``Y^u`` index (-1 if observed)."""
        out = np.full(self.T * self.n, -1, dtype=np.int64)
        out[self.missing_index] = np.arange(self.missing_index.size)
        return out.reshape(self.T, self.n)

    @property
    def n_missing(self):
        return self.missing_index.size

    def complete(self, yu):
        """Panel with the missing cells filled from ``yu``."""
        out = np.array(self.values)
        flat = out.reshape(-1)
        flat[self.missing_index] = yu
        return out


def build_stacked_H(params: VarParams, T: int):
    """Stacked regression ``H Y = c + e``.

    Returns the ``(T-p)n x Tn`` band matrix ``H`` whose block row for period ``t``
    is ``(-B_p, ..., -B_1, I_n)`` ending at column block ``t``, and
    ``c = 1_{T-p} kron b0``.
    """
    n, p = params.n, params.p
    if T <= p:
        raise DimensionMismatch(f"need T > p, got T={T}, p={p}")
    blocks = np.concatenate([-params.B[::-1], np.eye(n)[None]], axis=0)  # (p+1, n, n)
    row_block = blocks.transpose(1, 0, 2).reshape(n, (p + 1) * n)
    rows = (T - p) * n
    data = np.tile(row_block, (T - p, 1))
    offsets = np.repeat(np.arange(T - p) * n, n)
    H = BandMatrix((rows, T * n), offsets, data)
    c = np.tile(params.b0, T - p)
    return H, c


def build_xi_inverse(params: VarParams, T: int) -> BandMatrix:
    """Block-diagonal ``Xi^{-1}`` from per-period ``Sigma_t^{-1}``."""
    n = params.n
    sig = params.sigma_at(T)
    chol = np.linalg.cholesky(sig)
    eye = np.broadcast_to(np.eye(n), sig.shape)
    Linv = np.linalg.solve(chol, eye)
    prec = np.einsum("tki,tkj->tij", Linv, Linv)
    rows = (T - params.p) * n
    offsets = np.repeat(np.arange(T - params.p) * n, n)
    return BandMatrix((rows, rows), offsets, prec.reshape(rows, n))


def build_selection(panel: MixedPanel):
    """Selection matrices with ``Y = M_o Y^o + M_u Y^u``."""
    Tn = panel.T * panel.n
    out = []
    for idx in (panel.observed_index, panel.missing_index):
        is_sel = np.zeros(Tn, dtype=bool)
        is_sel[idx] = True
        offsets = np.cumsum(is_sel) - is_sel
        out.append(BandMatrix((Tn, idx.size), offsets, is_sel[:, None].astype(float)))
    return tuple(out)


@dataclass(frozen=True)
class PresamplePrior:
    """Independent ``N(mean[v], var[v])`` prior on missing cells of the first ``p`` periods."""

    mean: np.ndarray
    var: np.ndarray


@dataclass(frozen=True, eq=False)
class ConditionalGaussian:
    """``N(mu, K^{-1})`` stored as the band precision and ``K mu``.

    ``ab`` is the lower band layout of ``K``; the factor and the mean are computed
    on first use and never as a dense inverse.
    """

    ab: np.ndarray
    rhs: np.ndarray

    @property
    def dim(self):
        return self.rhs.size

    @cached_property
    def precision(self) -> BandMatrix:
        return BandMatrix.from_symmetric_lower(self.ab)

    @property
    def scaled_mean_rhs(self):
        return self.rhs

    @cached_property
    def chol(self) -> CholeskyFactor:
        return cholesky_symmetric_lower(self.ab)

    @cached_property
    def mean(self):
        return cho_solve(self.chol, self.rhs)


def _lag_blocks(params):
    # C_0 = I, C_j = -B_j: coefficient on y_{t-j} in equation t.
    return np.concatenate([np.eye(params.n)[None], -params.B], axis=0)


def build_conditional(params: VarParams, panel: MixedPanel,
                      presample: PresamplePrior | None = None) -> ConditionalGaussian:
    """Precision and scaled mean of ``Y^u | Y^o, B, Sigma``.

    ``K = M_u' H' Xi^{-1} H M_u`` and ``K mu = M_u' H' Xi^{-1} (c - H M_o Y^o)``,
    assembled directly in band form.  Without ``presample`` the missing cells of
    the first ``p`` periods are informed only through the lags; with it they also
    receive an independent Gaussian prior.
    """
    n, p, T = params.n, params.p, panel.T
    if panel.n != n:
        raise DimensionMismatch(f"panel has {panel.n} columns, parameters {n}")
    if T <= p:
        raise DimensionMismatch(f"need T > p, got T={T}, p={p}")
    sig = params.sigma_at(T)
    chol = np.linalg.cholesky(sig)
    Linv = np.linalg.solve(chol, np.broadcast_to(np.eye(n), sig.shape))
    prec = np.einsum("tki,tkj->tij", Linv, Linv)  # Sigma_t^{-1}

    # K mu = M_u' H' Xi^{-1} (c - H Y0), Y0 = panel with missing cells zeroed
    Y0 = np.nan_to_num(panel.values, nan=0.0)
    resid = params.b0 - Y0[p:]
    for j in range(1, p + 1):
        resid = resid + Y0[p - j:T - j] @ params.B[j - 1].T
    q = np.einsum("tij,tj->ti", prec, resid)
    g = np.zeros((T, n))
    g[p:] += q
    for j in range(1, p + 1):
        g[p - j:T - j] -= q @ params.B[j - 1]

    pos = panel.missing_index
    m = pos.size
    rhs = g.reshape(-1)[pos]
    ct, cv = pos // n, pos % n

    # partner cells b >= a with period gap <= p
    end = np.searchsorted(ct, ct + p, side="right") - 1
    kd = int((end - np.arange(m)).max()) if m else 0
    ab = np.zeros((kd + 1, m))
    C = _lag_blocks(params)
    if params.time_varying:
        _assemble_time_varying(ab, C, prec, ct, cv, p, T, panel)
    else:
        D = np.einsum("iba,bc,kcd->ikad", C, prec[0], C)  # C_i' S^-1 C_k
        # prefix sums over j of D[j+h, j] for each period gap h
        P = np.zeros((p + 1, p + 2, n, n))
        for h in range(p + 1):
            seq = D[np.arange(h, p + 1), np.arange(0, p + 1 - h)]
            P[h, 1:p + 2 - h] = np.cumsum(seq, axis=0)
            P[h, p + 2 - h:] = P[h, p + 1 - h]
        a = np.arange(m)
        for d in range(kd + 1):
            ok = a + d <= end
            ia = a[ok]
            ib = ia + d
            h = ct[ib] - ct[ia]
            s2 = ct[ib]
            lo = np.maximum(0, p - s2)
            hi = np.minimum(p - h, T - 1 - s2)
            hi = np.maximum(hi, lo - 1)
            ab[d, ia] = (P[h, hi + 1, cv[ia], cv[ib]] - P[h, lo, cv[ia], cv[ib]])

    if presample is not None:
        early = ct < p
        var = np.asarray(presample.var, dtype=float)[cv[early]]
        ab[0, early] += 1.0 / var
        rhs = rhs.copy()
        rhs[early] += np.asarray(presample.mean, dtype=float)[cv[early]] / var
    return ConditionalGaussian(ab, rhs)


def _assemble_time_varying(ab, C, prec, ct, cv, p, T, panel):
    # Equation t touches periods t-p..t; add A_t' Sigma_t^{-1} A_t on that window.
    lookup = panel.cell_lookup
    for k, t in enumerate(range(p, T)):
        cells = lookup[t - p:t + 1]  # (p+1, n), row 0 is period t-p
        sel = cells >= 0
        if not sel.any():
            continue
        per, var = np.nonzero(sel)
        idx = cells[per, var]
        A = C[t - (t - p + per), :, var].T  # (n, w): column for cell (t-p+per, var)
        blk = A.T @ prec[k] @ A
        ii, jj = np.meshgrid(np.arange(idx.size), np.arange(idx.size), indexing="ij")
        low = idx[ii] >= idx[jj]
        np.add.at(ab, (idx[ii][low] - idx[jj][low], idx[jj][low]), blk[low])


def dense_conditional(params: VarParams, panel: MixedPanel,
                      presample: PresamplePrior | None = None):
    """Dense reference of :func:`build_conditional` via ``H``, ``Xi^{-1}`` and band products."""
    from .band import band_matmul

    H, c = build_stacked_H(params, panel.T)
    Q = band_matmul(H.T, band_matmul(build_xi_inverse(params, panel.T), H)).todense()
    Xc = band_matmul(H.T, build_xi_inverse(params, panel.T)).matvec(c)
    yo = np.nan_to_num(panel.values, nan=0.0).reshape(-1)
    pos = panel.missing_index
    K = Q[np.ix_(pos, pos)]
    rhs = Xc[pos] - Q[pos] @ yo
    if presample is not None:
        ct, cv = pos // panel.n, pos % panel.n
        early = ct < params.p
        var = np.asarray(presample.var, dtype=float)[cv[early]]
        K[np.flatnonzero(early), np.flatnonzero(early)] += 1.0 / var
        rhs[early] += np.asarray(presample.mean, dtype=float)[cv[early]] / var
    return K, rhs
