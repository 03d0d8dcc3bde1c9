"""Simulation study, benchmark harness and Beveridge-Nelson decomposition."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .constraints import LOG_DIFF_TRIANGLE, AggregationScheme
from .errors import MFVarError, NonStationary
from .gibbs import GibbsConfig, NIWPrior, YuStep, default_presample, run_gibbs
from .kalman import companion
from .model import MixedPanel, VarParams

log = logging.getLogger(__name__)

LAG_PROFILE = (0.5, 0.05, 0.001, 0.0001)
METHOD_SETTINGS = {
    "precision_hard": dict(method="precision", constraint_mode="hard"),
    "precision_soft": dict(method="precision", constraint_mode="soft"),
    "kf": dict(method="kf", constraint_mode="hard"),
}
STATIONARITY_MARGIN = 1e-8


@dataclass(frozen=True)
class DgpSpec:
    """Simulation design: ``n_o`` observed and ``n_u`` aggregated series, VAR(``p``)."""

    n_o: int = 4
    n_u: int = 1
    T: int = 500
    p: int = 4
    intercept: float = 0.01
    lag_profile: tuple[float, ...] = LAG_PROFILE  # own-lag coefficient for lags 1, 2, ...
    sigma_scale: float = 0.01
    scheme: AggregationScheme = LOG_DIFF_TRIANGLE
    burn: int = 200
    seed: int = 0

    @property
    def n(self):
        return self.n_o + self.n_u

    def params(self) -> VarParams:
        n, p = self.n, self.p
        B = np.zeros((p, n, n))
        for j in range(min(p, len(self.lag_profile))):
            B[j] = self.lag_profile[j] * np.eye(n)
        return VarParams(np.full(n, self.intercept), B, self.sigma_scale * np.eye(n))


@dataclass(frozen=True, eq=False)
class SimulatedData:
    panel: MixedPanel
    truth: np.ndarray  # full T x n panel
    params: VarParams

    @property
    def truth_yu(self):
        return self.truth.reshape(-1)[self.panel.missing_index]


def simulate_var(params: VarParams, T, rng, burn=200, y0=None):
    """Simulate ``T`` periods after ``burn`` discarded ones, starting from ``y0`` (default: mean)."""
    n, p = params.n, params.p
    B = params.B
    if y0 is None:
        S = B.sum(axis=0)
        try:
            mu = np.linalg.solve(np.eye(n) - S, params.b0)
        except np.linalg.LinAlgError:
            mu = np.zeros(n)
        y0 = np.tile(mu, (p, 1))
    total = burn + T
    Y = np.zeros((p + total, n))
    Y[:p] = y0
    sig = np.asarray(params.sigma)
    if sig.ndim == 2:
        L = np.linalg.cholesky(sig) if np.any(sig) else np.zeros_like(sig)
        eps = rng.standard_normal((total, n)) @ L.T
    else:
        eps = np.einsum("tij,tj->ti", np.linalg.cholesky(sig[-total:]),
                        rng.standard_normal((total, n)))
    for t in range(total):
        y = params.b0.copy()
        for j in range(p):
            y += B[j] @ Y[p + t - 1 - j]
        Y[p + t] = y + eps[t]
    return Y[p + burn:]


def aggregate(truth, cols, scheme: AggregationScheme, every=3):
    """Aggregates of ``truth[:, cols]`` stamped at periods ``every-1, 2*every-1, ...``.

    Only stamps whose whole window lies inside the sample are produced.
    """
    T = truth.shape[0]
    w = np.asarray(scheme.weights)
    stamps = np.arange(every - 1, T, every)
    stamps = stamps[stamps >= scheme.span - 1]
    at, av, ay = [], [], []
    for v in cols:
        for t in stamps:
            at.append(t)
            av.append(v)
            ay.append(float(w @ truth[t - np.arange(scheme.span), v]))
    return (np.array(at, dtype=np.int64), np.array(av, dtype=np.int64), np.array(ay))


def simulate_dgp(spec: DgpSpec, rng=None) -> SimulatedData:
    """Simulate the design and mask the last ``n_u`` columns, keeping quarterly aggregates."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    params = spec.params()
    truth = simulate_var(params, spec.T, rng, burn=spec.burn)
    values = truth.copy()
    values[:, spec.n_o:] = np.nan
    at, av, ay = aggregate(truth, range(spec.n_o, spec.n), spec.scheme)
    names = tuple(f"x{i + 1}" for i in range(spec.n_o)) + tuple(f"q{i + 1}" for i in range(spec.n_u))
    panel = MixedPanel(values, spec.n_o, at, av, ay, names=names)
    return SimulatedData(panel, truth, params)


@dataclass(frozen=True)
class BenchmarkRow:
    n_o: int
    n_u: int
    T: int
    p: int
    R: int
    method: str
    mse: float
    seconds_full: float
    seconds_per10: float
    failures: int = 0
    error: str = ""


@dataclass
class BenchmarkResult:
    rows: list[BenchmarkRow] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def lookup(self, method, **coords):
        for r in self.rows:
            if r.method == method and all(getattr(r, k) == v for k, v in coords.items()):
                return r
        raise KeyError((method, coords))

    def to_csv(self, path):
        cols = list(BenchmarkRow.__dataclass_fields__)
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for r in self.rows:
                fh.write(",".join(_fmt(getattr(r, c)) for c in cols) + "\n")


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return str(x).replace(",", ";")


def run_benchmark(grid, R, cfg: GibbsConfig, methods=tuple(METHOD_SETTINGS), scheme=LOG_DIFF_TRIANGLE,
                  prior=None) -> BenchmarkResult:
    """MSE of the posterior-median missing cells and timings for each grid cell and method.

    ``grid`` holds ``(n_o, n_u, T, p)`` tuples.  Replication ``r`` of cell ``g``
    simulates with seed ``(cfg.seed, g, r)`` so every method sees the same data
    and the table is reproducible.  A replication that raises is counted in
    ``failures`` and excluded from the averages.
    """
    result = BenchmarkResult()
    if R <= 0:
        return result
    for g, (n_o, n_u, T, p) in enumerate(grid):
        sims = []
        for r in range(R):
            rng = np.random.default_rng([cfg.seed, g, r])
            sims.append(simulate_dgp(DgpSpec(n_o=n_o, n_u=n_u, T=T, p=p, scheme=scheme), rng))
        for method in methods:
            mses, full, per10, errors = [], [], [], []
            for r, sim in enumerate(sims):
                mcfg = replace(cfg, lags=p, chain_id=r, **METHOD_SETTINGS[method])
                try:
                    store = run_gibbs(sim.panel, scheme, prior, mcfg)
                except MFVarError as err:
                    log.warning("cell %s method %s rep %d failed: %s", (n_o, n_u, T, p), method, r, err)
                    errors.append(str(err))
                    continue
                med = np.median(store.yu_draws, axis=0)
                mses.append(float(np.mean((med - sim.truth_yu) ** 2)))
                full.append(store.meta["seconds_total"])
                per10.append(10.0 * float(np.mean(store.yu_seconds)))
            nan = float("nan")
            result.rows.append(BenchmarkRow(
                n_o, n_u, T, p, R, method,
                float(np.mean(mses)) if mses else nan,
                float(np.mean(full)) if full else nan,
                float(np.mean(per10)) if per10 else nan,
                len(errors), errors[0] if errors else "",
            ))
    return result


def time_yu_draws(sim: SimulatedData, method, scheme=LOG_DIFF_TRIANGLE, n_draws=10, seed=0):
    """Wall time of ``n_draws`` consecutive missing-cell draws at the true parameters.

    Includes the per-draw setup (precision assembly or filtering), as inside a
    Gibbs sweep.
    """
    cfg = GibbsConfig(n_draws=1, n_burn=0, lags=sim.params.p, seed=seed, **METHOD_SETTINGS[method])
    step = YuStep(sim.panel, scheme, cfg, default_presample(sim.panel, scheme))
    rng = cfg.rng()
    step(sim.params, rng)  # warm caches outside the timed region
    start = time.perf_counter()
    for _ in range(n_draws):
        step(sim.params, rng)
    return time.perf_counter() - start


def timing_study(T_values, n_o=4, n_u=1, p=4, methods=("precision_soft",), scheme=LOG_DIFF_TRIANGLE,
                 seed=0, repeats=3):
    """Best-of-``repeats`` time per 10 draws for each ``T``; returns ``{method: array}``."""
    out = {m: np.zeros(len(T_values)) for m in methods}
    for i, T in enumerate(T_values):
        sim = simulate_dgp(DgpSpec(n_o=n_o, n_u=n_u, T=T, p=p, scheme=scheme, seed=seed))
        for m in methods:
            out[m][i] = min(time_yu_draws(sim, m, scheme) for _ in range(repeats))
    return out


def loglog_slope(x, y):
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


@dataclass(frozen=True, eq=False)
class CompanionForm:
    """``X_t = (I - F) mu_X + F X_{t-1} + G eps_t`` with ``X_t = (y_t', ..., y_{t-p+1}')'``."""

    F: np.ndarray
    G: np.ndarray
    mu: np.ndarray

    @property
    def spectral_radius(self):
        return float(np.max(np.abs(np.linalg.eigvals(self.F)))) if self.F.size else 0.0


def companion_form(params: VarParams) -> CompanionForm:
    n, p = params.n, params.p
    F = companion(params.B)
    G = np.zeros((n * p, n))
    G[:n] = np.eye(n)
    try:
        mu = np.linalg.solve(np.eye(n) - params.B.sum(axis=0), params.b0)
    except np.linalg.LinAlgError:
        raise NonStationary("I - sum(B_j) is singular (unit root)") from None
    return CompanionForm(F, G, mu)


def bn_cycle(params: VarParams, completed) -> np.ndarray:
    """Beveridge-Nelson cycle ``-F (I - F)^{-1} (X_t - mu)``, first ``n`` entries per period.

    Periods ``t < p - 1`` lack a full lag vector and are returned as NaN.
    """
    cf = companion_form(params)
    rho = cf.spectral_radius
    if rho >= 1.0 - STATIONARITY_MARGIN:
        raise NonStationary(f"companion spectral radius {rho:.10f} is not below 1")
    Y = np.asarray(completed, dtype=float)
    T, n = Y.shape
    p = params.p
    k = n * p
    # only the first n rows of -F (I - F)^{-1} are needed
    A = -np.linalg.solve((np.eye(k) - cf.F).T, cf.F.T).T[:n]
    out = np.full((T, n), np.nan)
    if T >= p:
        X = np.hstack([Y[p - 1 - j:T - j] for j in range(p)]) - np.tile(cf.mu, p)
        out[p - 1:] = X @ A.T
    return out


def bn_cycle_forecast_sum(params: VarParams, completed, horizon=10_000):
    """Reference cycle: ``-sum_{h=1}^{H} (E_t y_{t+h} - mu)`` by direct iteration."""
    cf = companion_form(params)
    Y = np.asarray(completed, dtype=float)
    T, n = Y.shape
    p = params.p
    out = np.full((T, n), np.nan)
    for t in range(p - 1, T):
        x = np.concatenate([Y[t - j] for j in range(p)]) - np.tile(cf.mu, p)
        acc = np.zeros(n)
        for _ in range(horizon):
            x = cf.F @ x
            acc += x[:n]
        out[t] = -acc
    return out


def bn_cycle_bands(store, panel: MixedPanel, levels=(0.68, 0.90)):
    """Per-draw cycles summarised by their median and central bands."""
    p = (store.b_draws.shape[1] - 1) // panel.n
    cycles = []
    for yu, A, S in zip(store.yu_draws, store.b_draws, store.sigma_draws):
        try:
            cycles.append(bn_cycle(VarParams.from_coef_matrix(A, S), panel.complete(yu)))
        except NonStationary:
            continue
    if not cycles:
        raise NonStationary("every retained draw is non-stationary")
    c = np.stack(cycles)
    bands = {lev: tuple(np.quantile(c, [(1 - lev) / 2, (1 + lev) / 2], axis=0)) for lev in levels}
    return np.median(c, axis=0), bands, len(cycles)


def default_noninformative(n, p):
    return NIWPrior.noninformative(n, p)
