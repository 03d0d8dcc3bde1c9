"""Gibbs sampler alternating missing cells and normal-inverse-Wishart VAR parameters."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg as sla
from scipy import stats

from .constraints import AggregationScheme, build_Ma, sample_hard, sample_soft
from .errors import EmptyStore, NumericalError, SingularDesign
from .kalman import build_observations, simulation_smoother, to_state_space
from .model import MixedPanel, PresamplePrior, VarParams, build_conditional

METHODS = ("precision", "kf")
CONSTRAINT_MODES = ("soft", "hard")


@dataclass(frozen=True, eq=False)
class NIWPrior:
    """``A | Sigma ~ MN(mean, Sigma kron precision_scale^{-1})``, ``Sigma ~ IW(iw_scale, iw_dof)``.

    ``A`` is the ``(1 + n p) x n`` regression-form coefficient matrix (intercept row first).
    """

    mean: np.ndarray
    precision_scale: np.ndarray
    iw_scale: np.ndarray
    iw_dof: float

    def __post_init__(self):
        n = self.iw_scale.shape[0]
        if self.iw_dof <= n - 1:
            raise ValueError(f"iw_dof must exceed n - 1 = {n - 1}")

    @classmethod
    def noninformative(cls, n, p):
        k = 1 + n * p
        return cls(np.zeros((k, n)), 1e-6 * np.eye(k), np.eye(n), n + 2.0)


@dataclass
class GibbsConfig:
    n_draws: int
    n_burn: int | None = None  # default: half of n_draws
    thin: int = 1
    seed: int = 0
    chain_id: int = 0
    lags: int = 1
    constraint_mode: str = "soft"
    o_diag: float = 1e-8
    method: str = "precision"
    presample: str = "auto"  # "auto" (data-based prior on initial missing cells) or "none"
    fixed_params: VarParams | None = None
    init_yu: np.ndarray | None = None

    def __post_init__(self):
        if self.n_draws <= 0:
            raise ValueError("n_draws must be positive")
        if self.n_burn is None:
            self.n_burn = self.n_draws // 2
        if not 0 <= self.n_burn < self.n_draws:
            raise ValueError("n_burn must lie in [0, n_draws)")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.constraint_mode not in CONSTRAINT_MODES:
            raise ValueError(f"constraint_mode must be one of {CONSTRAINT_MODES}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.presample not in ("auto", "none"):
            raise ValueError("presample must be 'auto' or 'none'")
        if self.o_diag <= 0:
            raise ValueError("o_diag must be positive")

    @property
    def n_kept(self):
        return len(range(self.n_burn, self.n_draws, self.thin))

    def rng(self):
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(self.chain_id,)))

    def echo(self):
        return {k: v for k, v in asdict(self).items() if k not in ("fixed_params", "init_yu")}


@dataclass(eq=False)
class DrawStore:
    yu_draws: np.ndarray  # (kept, m)
    b_draws: np.ndarray  # (kept, 1 + n p, n)
    sigma_draws: np.ndarray  # (kept, n, n)
    meta: dict = field(default_factory=dict)
    yu_seconds: np.ndarray | None = None
    param_seconds: np.ndarray | None = None

    def __len__(self):
        return self.yu_draws.shape[0]

    def save(self, directory):
        """Write ``yu_draws.csv``, ``b_draws.csv``, ``sigma_draws.csv`` and ``meta.txt``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        kept = len(self)
        m = self.yu_draws.shape[1]
        cells = self.meta.get("yu_cells") or [f"cell{j}" for j in range(m)]
        _write_csv(d / "yu_draws.csv", cells, self.yu_draws)
        k, n = self.b_draws.shape[1:]
        bcols = [f"A[{i},{j}]" for i in range(k) for j in range(n)]
        _write_csv(d / "b_draws.csv", bcols, self.b_draws.reshape(kept, -1))
        scols = [f"Sigma[{i},{j}]" for i in range(n) for j in range(n)]
        _write_csv(d / "sigma_draws.csv", scols, self.sigma_draws.reshape(kept, -1))
        with open(d / "meta.txt", "w") as fh:
            for key, val in self.meta.items():
                if key == "yu_cells":
                    continue
                fh.write(f"{key}={val}\n")

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        cells, yu = _read_csv(d / "yu_draws.csv")
        bcols, b = _read_csv(d / "b_draws.csv")
        _, sig = _read_csv(d / "sigma_draws.csv")
        n = int(round(np.sqrt(sig.shape[1])))
        meta = {}
        for line in (d / "meta.txt").read_text().splitlines():
            if "=" in line:
                key, val = line.split("=", 1)
                meta[key] = val
        meta["yu_cells"] = cells
        kept = yu.shape[0]
        return cls(yu, b.reshape(kept, -1, n), sig.reshape(kept, n, n), meta)


def _write_csv(path, header, rows):
    np.savetxt(path, np.atleast_2d(rows), delimiter=",", header=",".join(header),
               comments="", fmt="%.17g")


def _read_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


def lag_design(Y, p):
    """Regressors ``[1, y_{t-1}', ..., y_{t-p}']`` and targets for ``t = p..T-1``."""
    T = Y.shape[0]
    X = np.hstack([np.ones((T - p, 1))] + [Y[p - j:T - j] for j in range(1, p + 1)])
    return X, Y[p:]


def niw_posterior(Y, p, prior: NIWPrior):
    """Posterior hyperparameters ``(mean, precision, iw_scale, iw_dof)`` given a completed panel."""
    X, Yt = lag_design(Y, p)
    Kn = prior.precision_scale + X.T @ X
    try:
        ck = sla.cho_factor(Kn, lower=True)
    except np.linalg.LinAlgError:
        raise SingularDesign("X'X + prior precision is not positive definite") from None
    Mn = sla.cho_solve(ck, prior.precision_scale @ prior.mean + X.T @ Yt)
    E = Yt - X @ Mn
    dM = Mn - prior.mean
    Sn = prior.iw_scale + E.T @ E + dM.T @ prior.precision_scale @ dM
    return Mn, Kn, 0.5 * (Sn + Sn.T), prior.iw_dof + Yt.shape[0], ck


def draw_var_params(completed, prior: NIWPrior, p, rng) -> VarParams:
    """One exact draw of ``(B, Sigma)`` from the conjugate posterior.

    The first ``p`` rows of ``completed`` act as initial conditions.
    """
    completed = np.asarray(completed, dtype=float)
    T, n = completed.shape
    if T <= p + n:
        raise SingularDesign(f"T={T} too short for a VAR({p}) in {n} variables")
    Mn, Kn, Sn, dof, ck = niw_posterior(completed, p, prior)
    sigma = np.atleast_2d(stats.invwishart.rvs(df=dof, scale=Sn, random_state=rng))
    sigma = 0.5 * (sigma + sigma.T)
    Lk = ck[0]
    Z = rng.standard_normal(Mn.shape)
    # Kn^{-1} = Lk^{-T} Lk^{-1}
    A = Mn + sla.solve_triangular(Lk, Z, lower=True, trans="T") @ np.linalg.cholesky(sigma).T
    return VarParams.from_coef_matrix(A, sigma)


def _aggregate_stats(panel, scheme, v):
    sel = panel.agg_var == v
    vals = panel.agg_value[sel] / scheme.weight_sum
    if vals.size == 0:
        obs = panel.values[panel.mask[:, v], v]
        vals = obs
    return vals


def initial_fill(panel: MixedPanel, scheme: AggregationScheme):
    """Starting values for the missing cells.

    Each missing cell carries the value of the next aggregate of its variable
    (the last one beyond the final stamp) divided by the weight sum.  Variables
    without aggregates use the mean of their observed cells, or 0.
    """
    T, n = panel.T, panel.n
    fill = np.zeros((T, n))
    for v in range(n):
        sel = panel.agg_var == v
        if sel.any():
            order = np.argsort(panel.agg_time[sel])
            stamps = panel.agg_time[sel][order]
            vals = panel.agg_value[sel][order] / scheme.weight_sum
            pos = np.minimum(np.searchsorted(stamps, np.arange(T)), stamps.size - 1)
            fill[:, v] = vals[pos]
        else:
            obs = panel.values[panel.mask[:, v], v]
            fill[:, v] = obs.mean() if obs.size else 0.0
    return fill.reshape(-1)[panel.missing_index]


def default_presample(panel: MixedPanel, scheme: AggregationScheme) -> PresamplePrior:
    """Data-based prior for missing cells of the initial periods.

    Centred on the same per-variable level as :func:`initial_fill`; the variance is
    ``span`` times the variance of the rescaled aggregates, which roughly undoes
    the smoothing of temporal aggregation.
    """
    mean = np.zeros(panel.n)
    var = np.ones(panel.n)
    for v in range(panel.n):
        vals = _aggregate_stats(panel, scheme, v)
        if vals.size:
            mean[v] = vals.mean()
        if vals.size > 1:
            var[v] = max(scheme.span * vals.var(ddof=1), 1e-8 * (1.0 + mean[v] ** 2))
    return PresamplePrior(mean, var)


def cell_labels(panel: MixedPanel):
    names = panel.names or tuple(f"y{v}" for v in range(panel.n))
    pos = panel.missing_index
    return [f"{names[v]}@{t}" for t, v in zip(pos // panel.n, pos % panel.n)]


class YuStep:
    """Draws the missing cells given parameters with the configured method."""

    def __init__(self, panel, scheme, cfg: GibbsConfig, presample):
        self.panel, self.scheme, self.cfg, self.presample = panel, scheme, cfg, presample
        soft = cfg.constraint_mode == "soft"
        if cfg.method == "precision":
            self.cs = build_Ma(panel, scheme, o_diag=cfg.o_diag)
        else:
            self.obs = build_observations(panel, scheme, cfg.lags, cfg.o_diag if soft else None)

    def __call__(self, params, rng):
        cfg = self.cfg
        if cfg.method == "precision":
            cg = build_conditional(params, self.panel, self.presample)
            if cfg.constraint_mode == "soft":
                return sample_soft(cg, self.cs, rng)
            return sample_hard(cg, self.cs, rng)
        ssf = to_state_space(params, self.panel, self.scheme, presample=self.presample,
                             obs=self.obs)
        return simulation_smoother(ssf, rng)


def run_gibbs(panel: MixedPanel, scheme: AggregationScheme, prior: NIWPrior | None,
              cfg: GibbsConfig) -> DrawStore:
    """Alternate ``Y^u | B, Sigma`` and ``B, Sigma | Y`` for ``cfg.n_draws`` iterations."""
    p = cfg.lags
    if prior is None:
        prior = NIWPrior.noninformative(panel.n, p)
    rng = cfg.rng()
    presample = default_presample(panel, scheme) if cfg.presample == "auto" else None
    step = YuStep(panel, scheme, cfg, presample)
    yu = initial_fill(panel, scheme) if cfg.init_yu is None else np.asarray(cfg.init_yu, float)

    kept = cfg.n_kept
    k = 1 + panel.n * p
    out_yu = np.zeros((kept, panel.n_missing))
    out_b = np.zeros((kept, k, panel.n))
    out_s = np.zeros((kept, panel.n, panel.n))
    t_yu = np.zeros(cfg.n_draws)
    t_par = np.zeros(cfg.n_draws)
    j = 0
    start = time.perf_counter()
    for i in range(cfg.n_draws):
        try:
            t0 = time.perf_counter()
            if cfg.fixed_params is None:
                params = draw_var_params(panel.complete(yu), prior, p, rng)
            else:
                params = cfg.fixed_params
            t1 = time.perf_counter()
            yu = step(params, rng)
            t2 = time.perf_counter()
        except NumericalError as err:
            err.draw_index = i
            err.args = (f"draw {i}: {err}",)
            raise
        t_par[i], t_yu[i] = t1 - t0, t2 - t1
        if i >= cfg.n_burn and (i - cfg.n_burn) % cfg.thin == 0:
            out_yu[j] = yu
            out_b[j] = params.coef_matrix()
            out_s[j] = params.sigma if params.sigma.ndim == 2 else params.sigma[-1]
            j += 1
    total = time.perf_counter() - start
    meta = cfg.echo()
    meta.update(
        scheme=scheme.kind,
        T=panel.T,
        n=panel.n,
        n_o=panel.n_o,
        n_missing=panel.n_missing,
        kept=kept,
        seconds_total=round(total, 6),
        seconds_yu=round(float(t_yu.sum()), 6),
        seconds_params=round(float(t_par.sum()), 6),
        yu_cells=cell_labels(panel),
    )
    return DrawStore(out_yu, out_b, out_s, meta, t_yu, t_par)


@dataclass(frozen=True, eq=False)
class PosteriorSummary:
    yu_median: np.ndarray
    yu_bands: dict  # level -> (lower, upper)
    coef_mean: np.ndarray
    sigma_mean: np.ndarray


def posterior_summary(store: DrawStore, levels=(0.68, 0.90)) -> PosteriorSummary:
    if len(store) == 0:
        raise EmptyStore("no retained draws")
    med = np.median(store.yu_draws, axis=0)
    bands = {}
    for lev in levels:
        lo, hi = np.quantile(store.yu_draws, [(1 - lev) / 2, (1 + lev) / 2], axis=0)
        bands[lev] = (lo, hi)
    return PosteriorSummary(med, bands, store.b_draws.mean(axis=0), store.sigma_draws.mean(axis=0))
