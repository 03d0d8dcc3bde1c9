"""Kalman filter and Carter-Kohn simulation smoother for the same missing-data problem.

The state stacks ``s = max(p, span)`` periods, ``x_t = (y_t', ..., y_{t-s+1}')'``, so
that every aggregate is a function of the current state.  The filter starts at
``t0 = p - 1`` with an independent Gaussian prior on the initial cells; all
observations dated ``0 .. p-1`` are absorbed in that first update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .constraints import AggregationScheme
from .errors import DimensionMismatch, FilterDivergence
from .model import MixedPanel, PresamplePrior, VarParams

DIFFUSE_VAR = 1e6
OBS_FLOOR = 1e-12
PSD_TOL = 1e-8
LOG_2PI = np.log(2.0 * np.pi)

_potrf = sla.lapack.dpotrf
_trtrs = sla.lapack.dtrtrs


@dataclass(frozen=True, eq=False)
class StateSpaceForm:
    """Time-varying observation system around a companion-form transition.

    ``obs[t - t0]`` is ``(Z, d, h)``: loadings on the state, observed values and
    observation noise variances for period ``t`` (empty arrays when nothing is
    observed).
    """

    n: int
    p: int
    s: int
    T: int
    F: np.ndarray
    c: np.ndarray
    sigma: np.ndarray  # (T - p, n, n)
    a0: np.ndarray
    P0: np.ndarray
    obs: list
    missing_index: np.ndarray

    @property
    def t0(self):
        return self.p - 1

    @property
    def dim(self):
        return self.n * self.s


def companion(B, s=None):
    """Companion transition for lag matrices ``B`` (``(p, n, n)``), padded to ``s`` lags."""
    p, n, _ = B.shape
    s = p if s is None else s
    F = np.zeros((n * s, n * s))
    F[:n, : n * p] = np.concatenate(list(B), axis=1)
    F[n:, :-n] = np.eye(n * (s - 1))
    return F


def to_state_space(params: VarParams, panel: MixedPanel, scheme: AggregationScheme,
                   o_diag=None, presample: PresamplePrior | None = None,
                   obs=None) -> StateSpaceForm:
    """Cast the panel into state-space form.

    ``o_diag=None`` treats aggregates as exact (noise ``OBS_FLOOR``); a scalar or
    per-aggregate array gives the soft-constraint noise.  Initial cells default
    to ``N(0, DIFFUSE_VAR)``.  ``obs`` may carry a precomputed
    :func:`build_observations` result, which does not depend on the parameters.
    """
    n, p, T = params.n, params.p, panel.T
    if panel.n != n:
        raise DimensionMismatch(f"panel has {panel.n} columns, parameters {n}")
    span = scheme.span
    s = max(p, span)
    t0 = p - 1
    F = companion(params.B, s)
    c = np.zeros(n * s)
    c[:n] = params.b0

    a0 = np.zeros(n * s)
    P0 = np.ones(n * s)  # pre-sample slots (periods < 0) never enter any equation
    m0 = np.zeros(n) if presample is None else np.asarray(presample.mean, dtype=float)
    v0 = np.full(n, DIFFUSE_VAR) if presample is None else np.asarray(presample.var, dtype=float)
    for blk in range(p):
        a0[blk * n:(blk + 1) * n] = m0
        P0[blk * n:(blk + 1) * n] = v0
    P0 = np.diag(P0)

    if obs is None:
        obs = build_observations(panel, scheme, p, o_diag)
    return StateSpaceForm(n, p, s, T, F, c, params.sigma_at(T), a0, P0, obs,
                          panel.missing_index)


def build_observations(panel: MixedPanel, scheme: AggregationScheme, p: int, o_diag=None):
    """Per-period ``(Z, d, h)`` observation blocks for ``t = p-1, ..., T-1``."""
    n, T = panel.n, panel.T
    span = scheme.span
    s = max(p, span)
    t0 = p - 1
    w = np.asarray(scheme.weights)
    keep = panel.agg_time >= span - 1
    at, av, ay = panel.agg_time[keep], panel.agg_var[keep], panel.agg_value[keep]
    if o_diag is None:
        ao = np.zeros(at.size)
    else:
        ao = np.broadcast_to(np.asarray(o_diag, dtype=float), panel.agg_time.shape)[keep]

    obs = []
    for t in range(t0, T):
        periods = range(0, p) if t == t0 else (t,)
        rows, vals, noise = [], [], []
        for tau in periods:
            for v in np.flatnonzero(panel.mask[tau]):
                z = np.zeros(n * s)
                z[(t - tau) * n + v] = 1.0
                rows.append(z)
                vals.append(panel.values[tau, v])
                noise.append(0.0)
            for k in np.flatnonzero(at == tau):
                z = np.zeros(n * s)
                for lag, wl in enumerate(w):
                    z[(t - tau + lag) * n + av[k]] = wl
                rows.append(z)
                vals.append(ay[k])
                noise.append(ao[k])
        Z = np.array(rows).reshape(len(rows), n * s)
        obs.append((Z, np.array(vals), np.array(noise) + OBS_FLOOR))
    return obs


@dataclass(frozen=True, eq=False)
class FilterResult:
    a: np.ndarray  # filtered means, (T - t0, dim)
    P: np.ndarray  # filtered covariances
    P_pred: np.ndarray  # P_pred[k] = Var(x_{t0+k} | data up to t0+k-1); entry 0 unused
    loglik: float


def _check_psd(P, t):
    d = P.diagonal()
    if d.min() < -PSD_TOL * max(d.max(), 1.0):
        raise FilterDivergence(f"predicted covariance lost positive semi-definiteness at t={t}")


def kalman_filter(ssf: StateSpaceForm) -> FilterResult:
    n, dim = ssf.n, ssf.dim
    steps = ssf.T - ssf.t0
    A = np.zeros((steps, dim))
    Ps = np.zeros((steps, dim, dim))
    Pp = np.zeros((steps, dim, dim))
    F, c = ssf.F, ssf.c
    a, P = ssf.a0.copy(), ssf.P0.copy()
    loglik = 0.0
    for k in range(steps):
        t = ssf.t0 + k
        if k > 0:
            a = c + F @ a
            P = F @ P @ F.T
            P[:n, :n] += ssf.sigma[t - ssf.p]
            P = 0.5 * (P + P.T)
            _check_psd(P, t)
            Pp[k] = P
        Z, d, h = ssf.obs[k]
        if d.size:
            PZ = P @ Z.T
            S = Z @ PZ
            S.flat[:: d.size + 1] += h
            L, info = _potrf(S, lower=1, clean=1)
            if info != 0:
                raise FilterDivergence(f"innovation covariance not positive definite at t={t}")
            # one triangular solve for the gain factor and the standardized innovation
            R, _ = _trtrs(L, np.column_stack([PZ.T, d - Z @ a]), lower=1)
            Lg, e = R[:, :-1], R[:, -1]
            a = a + Lg.T @ e
            P = P - Lg.T @ Lg
            P = 0.5 * (P + P.T)
            loglik -= 0.5 * (2.0 * np.log(L.diagonal()).sum() + e @ e + d.size * LOG_2PI)
        A[k], Ps[k] = a, P
    return FilterResult(A, Ps, Pp, loglik)


def _psd_factor(S, rcond=1e-13):
    """Return ``(U, w)`` with ``S ~= U diag(w) U'``; negligible modes get ``w = 0``.

    Works on a single matrix or a stack.
    """
    w, U = np.linalg.eigh(0.5 * (S + np.swapaxes(S, -1, -2)))
    cut = rcond * np.maximum(w.max(axis=-1, keepdims=True), 0.0)
    return U, np.where(w > cut, w, 0.0)


def _gain_rows(Pp, PFt):
    """``PFt @ pinv(Pp)`` for stacks; plain solves unless some ``Pp`` is singular."""
    try:
        J = np.swapaxes(np.linalg.solve(Pp, np.swapaxes(PFt, 1, 2)), 1, 2)
        if np.all(np.isfinite(J)):
            return J
    except np.linalg.LinAlgError:
        pass
    U, w = _psd_factor(Pp)
    winv = np.divide(1.0, w, out=np.zeros_like(w), where=w > 0)
    return ((PFt @ U) * winv[:, None, :]) @ np.swapaxes(U, 1, 2)


def simulation_smoother(ssf: StateSpaceForm, rng, size=None, filtered: FilterResult | None = None):
    """Joint draws of the missing cells given all observations (forward filter, backward sample).

    Returns one vector over ``ssf.missing_index`` or a ``(size, m)`` array.
    """
    fr = kalman_filter(ssf) if filtered is None else filtered
    n, s, T, t0 = ssf.n, ssf.s, ssf.T, ssf.t0
    S = 1 if size is None else size
    steps = T - t0
    Y = np.zeros((S, T, n))

    U, w = _psd_factor(fr.P[-1])
    x = fr.a[-1][None, :] + (rng.standard_normal((S, w.size)) * np.sqrt(w)) @ U.T
    _store(Y, x, T - 1, n, s)
    if steps > 1:
        # moments of the block leaving the window, for all steps at once
        PFt = fr.P[:-1, -n:, :] @ ssf.F.T
        J = _gain_rows(fr.P_pred[1:], PFt)
        Uw, ww = _psd_factor(fr.P[:-1, -n:, -n:] - J @ np.swapaxes(PFt, 1, 2))
        root = Uw * np.sqrt(ww)[:, None, :]
        pred = ssf.c + fr.a[:-1] @ ssf.F.T
        z = rng.standard_normal((steps - 1, S, n))
        for k in range(steps - 2, -1, -1):
            t = t0 + k
            new = fr.a[k, -n:] + (x - pred[k]) @ J[k].T + z[k] @ root[k].T
            x = np.concatenate([x[:, n:], new], axis=1)
            if t - s + 1 >= 0:
                Y[:, t - s + 1] = new
    flat = Y.reshape(S, T * n)[:, ssf.missing_index]
    return flat[0] if size is None else flat


def _store(Y, x, t, n, s):
    for blk in range(s):
        tau = t - blk
        if tau >= 0:
            Y[:, tau] = x[:, blk * n:(blk + 1) * n]
