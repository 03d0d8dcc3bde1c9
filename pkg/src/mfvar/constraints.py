"""Inter-temporal aggregation constraints and samplers for the missing cells."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .band import BandMatrix, solve_lower, solve_upper
from .errors import SingularW
from .model import ConditionalGaussian, MixedPanel

log = logging.getLogger(__name__)

DEFAULT_O_DIAG = 1e-8


@dataclass(frozen=True)
class AggregationScheme:
    """Weights ``w[l]`` on lag ``l`` of the high-frequency series, ``l = 0..span-1``."""

    kind: str
    weights: tuple[float, ...]

    @property
    def span(self):
        return len(self.weights)

    @property
    def weight_sum(self):
        return float(sum(self.weights))

    @classmethod
    def from_name(cls, name):
        try:
            return SCHEMES[name]
        except KeyError:
            raise ValueError(f"unknown aggregation scheme {name!r}; "
                             f"choose from {sorted(SCHEMES)}") from None


LOG_DIFF_TRIANGLE = AggregationScheme("log_diff_triangle", (1 / 3, 2 / 3, 1.0, 2 / 3, 1 / 3))
LEVEL_AVERAGE = AggregationScheme("level_average", (1 / 3, 1 / 3, 1 / 3))
SCHEMES = {s.kind: s for s in (LOG_DIFF_TRIANGLE, LEVEL_AVERAGE)}


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    """``y_tilde = M_a Y^u (+ u)``, ``u ~ N(0, diag(o_diag))`` in the soft case.

    Contributions of observed cells inside an aggregation window have already
    been moved into ``y_tilde``.  ``n_dropped`` counts aggregates whose window
    reaches before the sample.
    """

    M_a: BandMatrix
    y_tilde: np.ndarray
    o_diag: np.ndarray
    n_dropped: int = 0

    @property
    def k(self):
        return self.y_tilde.size

    def residual(self, yu):
        """``y_tilde - M_a Y^u`` for one draw or a ``(draws, m)`` block."""
        yu = np.asarray(yu)
        if yu.ndim == 1:
            return self.y_tilde - self.M_a.matvec(yu)
        return self.y_tilde[None, :] - self.M_a.matvec(yu.T).T

    def with_o_diag(self, o_diag):
        o = np.broadcast_to(np.asarray(o_diag, dtype=float), self.y_tilde.shape).copy()
        return ConstraintSet(self.M_a, self.y_tilde, o, self.n_dropped)


def build_Ma(panel: MixedPanel, scheme: AggregationScheme, o_diag=DEFAULT_O_DIAG) -> ConstraintSet:
    """One constraint row per observed aggregate whose window lies inside the sample."""
    w = np.asarray(scheme.weights)
    span = scheme.span
    m = panel.n_missing
    t = panel.agg_time
    keep = t >= span - 1
    n_dropped = int((~keep).sum())
    if n_dropped:
        log.warning("dropped %d aggregate(s) whose window precedes the sample", n_dropped)
    t, v, y = t[keep], panel.agg_var[keep], panel.agg_value[keep]

    lags = np.arange(span)
    periods = t[:, None] - lags[None, :]  # (k, span)
    cols = np.broadcast_to(v[:, None], periods.shape)
    idx = panel.cell_lookup[periods, cols]
    known = idx < 0
    # observed cells in a window are data, not unknowns
    y = y - (np.where(known, np.nan_to_num(panel.values[periods, cols]), 0.0) * w).sum(axis=1)
    live = ~known.all(axis=1)
    idx, known, y = idx[live], known[live], y[live]

    k = idx.shape[0]
    if k == 0:
        M = BandMatrix((0, m), np.zeros(0, dtype=np.int64), np.zeros((0, 1)))
        return ConstraintSet(M, np.zeros(0), np.zeros(0), n_dropped)
    first = np.where(known, np.iinfo(np.int64).max, idx).min(axis=1)
    last = np.where(known, -1, idx).max(axis=1)
    order = np.argsort(first, kind="stable")
    idx, known, y, first, last = idx[order], known[order], y[order], first[order], last[order]
    width = int((last - first).max()) + 1
    data = np.zeros((k, width))
    rr = np.broadcast_to(np.arange(k)[:, None], idx.shape)
    wb = np.broadcast_to(w, idx.shape)
    data[rr[~known], (idx - first[:, None])[~known]] = wb[~known]
    M = BandMatrix((k, m), first, data)
    o = np.broadcast_to(np.asarray(o_diag, dtype=float), (k,)).copy()
    return ConstraintSet(M, y, o, n_dropped)


def _normals(rng, m, size):
    if size is None:
        return rng.standard_normal(m)
    return rng.standard_normal((size, m)).T


def _finish(x, size):
    return x if size is None else x.T


def sample_unconstrained(cg: ConditionalGaussian, rng, size=None):
    """Draw from ``N(mu, K^{-1})``: ``mu + C'^{-1} x`` with ``K = C C'``.

    ``size=None`` returns one vector, otherwise a ``(size, m)`` array.
    """
    x = _normals(rng, cg.dim, size)
    v = solve_upper(cg.chol, x)
    mu = cg.mean if size is None else cg.mean[:, None]
    return _finish(mu + v, size)


def sample_hard(cg: ConditionalGaussian, cs: ConstraintSet, rng, size=None):
    """Draw from ``N(mu, K^{-1})`` conditioned on ``M_a Y^u = y_tilde`` exactly.

    Follows the conditioning-by-kriging recipe:

    1. factor ``K = C C'``;
    2. solve ``C' v = x`` with ``x ~ N(0, I)``;
    3. ``Z = mu + v``;
    4. solve ``C C' V = M_a'``;
    5. solve ``W U = V'`` with ``W = M_a V``;
    6. return ``Z + U'(y_tilde - M_a Z)``.

    With ``G = C^{-1} M_a'`` one has ``V = C'^{-1} G`` and ``W = G'G``, and step 6
    is applied as ``U'r = C'^{-1} G W^{-1} r``, so only one multi-column solve is needed.
    """
    C = cg.chol
    x = _normals(rng, cg.dim, size)
    Z = (cg.mean if size is None else cg.mean[:, None]) + solve_upper(C, x)
    if cs.k == 0:
        return _finish(Z, size)
    # with G = C^{-1} M_a': V = C'^{-1} G and W = M_a V = G'G
    G = solve_lower(C, cs.M_a.T.todense())
    W = G.T @ G
    try:
        cW = sla.cho_factor(W, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise SingularW("M_a K^{-1} M_a' is not positive definite (redundant constraints?)") from None
    d = np.diag(cW[0])
    if d.min() ** 2 <= 1e-12 * np.diag(W).max():
        raise SingularW("M_a K^{-1} M_a' is numerically singular (redundant constraints?)")
    gap = cs.y_tilde[:, None] - cs.M_a.matvec(Z if Z.ndim == 2 else Z[:, None])
    # U'gap with U = W^{-1} V' equals V (W^{-1} gap); neither V nor U is formed
    Y = Z + solve_upper(C, G @ sla.cho_solve(cW, gap, check_finite=False)).reshape(Z.shape)
    return _finish(Y, size)


def soft_posterior(cg: ConditionalGaussian, cs: ConstraintSet) -> ConditionalGaussian:
    """``N(mu_bar, K_bar^{-1})`` with ``K_bar = M_a' O^{-1} M_a + K``.

    Returned in the same precision/scaled-mean form, so the band layout is kept.
    """
    if cs.k == 0:
        return cg
    if np.any(cs.o_diag <= 0):
        raise ValueError("soft-constraint variances must be positive")
    M = cs.M_a
    winv = 1.0 / cs.o_diag
    nzr, nzk = np.nonzero(M.data)
    cols = M.offsets[nzr] + nzk
    vals = M.data[nzr, nzk]
    # every ordered pair of nonzeros in the same row
    starts = np.searchsorted(nzr, np.arange(M.rows))
    ends = np.searchsorted(nzr, np.arange(M.rows), side="right")
    per_row = ends - starts
    w = int(per_row.max())
    a = starts[:, None] + np.arange(w)[None, :]
    okr = np.arange(w)[None, :] < per_row[:, None]
    ii = np.broadcast_to(a[:, :, None], (M.rows, w, w))
    jj = np.broadcast_to(a[:, None, :], (M.rows, w, w))
    ok = okr[:, :, None] & okr[:, None, :]
    ii, jj = ii[ok], jj[ok]
    rows = nzr[ii]
    ci, cj = cols[ii], cols[jj]
    low = ci >= cj
    ci, cj, contrib = ci[low], cj[low], (vals[ii] * vals[jj] * winv[rows])[low]
    kd = max(cg.ab.shape[0] - 1, int((ci - cj).max()))
    ab = np.zeros((kd + 1, cg.dim))
    ab[: cg.ab.shape[0]] = cg.ab
    np.add.at(ab, (ci - cj, cj), contrib)
    rhs = cg.rhs + M.T.matvec(winv * cs.y_tilde)
    return ConditionalGaussian(ab, rhs)


def sample_soft(cg: ConditionalGaussian, cs: ConstraintSet, rng, size=None):
    """Draw from the posterior that treats the aggregates as noisy measurements."""
    return sample_unconstrained(soft_posterior(cg, cs), rng, size)


def dense_constrained_moments(mean, cov, Ma, y_tilde, o_diag=None):
    """Dense reference moments: exact conditioning (``o_diag=None``) or Gaussian regression."""
    Ma = np.asarray(Ma)
    S = Ma @ cov @ Ma.T
    if o_diag is not None:
        S = S + np.diag(np.broadcast_to(o_diag, (Ma.shape[0],)))
    G = np.linalg.solve(S, Ma @ cov).T
    m = mean + G @ (y_tilde - Ma @ mean)
    c = cov - G @ Ma @ cov
    return m, 0.5 * (c + c.T)
