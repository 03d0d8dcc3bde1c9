"""Command line entry point: ``mfvar {simulate,benchmark,estimate,bn}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .analysis import METHOD_SETTINGS, DgpSpec, bn_cycle, bn_cycle_bands, run_benchmark, simulate_dgp
from .constraints import SCHEMES
from .errors import InputError, NumericalError
from .gibbs import DrawStore, GibbsConfig, posterior_summary, run_gibbs
from .model import VarParams

log = logging.getLogger("mfvar")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


def _write_table(path, header, rows, index=None):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for i, r in enumerate(rows):
            lead = [str(index[i])] if index is not None else []
            fh.write(",".join(lead + [repr(float(x)) for x in r]) + "\n")


def median_params(store: DrawStore) -> VarParams:
    A = np.median(store.b_draws, axis=0)
    S = np.median(store.sigma_draws, axis=0)
    return VarParams.from_coef_matrix(A, 0.5 * (S + S.T))


def write_summary(out_dir, store: DrawStore, panel, stamps, levels=(0.68, 0.90)):
    """Per-cell posterior median and bands, plus posterior means of the coefficients."""
    out = Path(out_dir)
    summ = posterior_summary(store, levels)
    cells = store.meta.get("yu_cells") or [str(j) for j in range(len(summ.yu_median))]
    pos = panel.missing_index
    header = ["cell", "period", "median"]
    cols = [summ.yu_median]
    for lev in levels:
        lo, hi = summ.yu_bands[lev]
        tag = int(round(100 * lev))
        header += [f"lo{tag}", f"hi{tag}"]
        cols += [lo, hi]
    with open(out / "yu_summary.csv", "w") as fh:
        fh.write(",".join(header) + "\n")
        for j, cell in enumerate(cells):
            vals = ",".join(repr(float(c[j])) for c in cols)
            fh.write(f"{cell},{stamps[pos[j] // panel.n]},{vals}\n")
    k, n = summ.coef_mean.shape
    names = panel.names or tuple(f"y{v}" for v in range(n))
    rows = ["const"] + [f"{names[v]}_lag{j}" for j in range(1, (k - 1) // n + 1) for v in range(n)]
    _write_table(out / "coef_mean.csv", ["regressor", *names], summ.coef_mean, rows)
    return summ


def estimate_cmd(panel_csv, config, out_dir, bn=True):
    """Run the sampler on a CSV panel and write draws, summaries and the BN cycle.

    ``config`` is a path or an already-parsed dict.  Returns ``(store, summary)``.
    """
    cfg = io.read_config(config) if isinstance(config, (str, Path)) else io.validate_config(dict(config))
    panel, stamps = io.read_panel_csv(panel_csv)
    scheme = io.scheme_of(cfg)
    gcfg = GibbsConfig(
        n_draws=cfg["n_draws"], n_burn=cfg["n_burn"], thin=cfg["thin"], seed=cfg["seed"],
        lags=cfg["lags"], constraint_mode=cfg["constraint_mode"], o_diag=cfg["o_diag"],
        method=cfg["method"],
    )
    store = run_gibbs(panel, scheme, None, gcfg)
    out = Path(out_dir)
    store.save(out)
    summ = write_summary(out, store, panel, stamps)
    if bn:
        params = median_params(store)
        cyc = bn_cycle(params, panel.complete(summ.yu_median))
        _write_table(out / "bn_cycle.csv", ["period", *(panel.names or [])], cyc, stamps)
    return store, summ


def _cmd_simulate(a):
    spec = DgpSpec(n_o=a.n_o, n_u=a.n_u, T=a.T, p=a.p, scheme=SCHEMES[a.scheme], seed=a.seed)
    sim = simulate_dgp(spec)
    io.write_panel_csv(a.out, sim.panel)
    if a.truth:
        _write_table(a.truth, ["period", *sim.panel.names], sim.truth, io.monthly_stamps(spec.T))
    print(f"simulated T={spec.T} n_o={spec.n_o} n_u={spec.n_u} p={spec.p}: "
          f"{sim.panel.n_missing} missing cells, {sim.panel.agg_time.size} aggregates -> {a.out}")


def _parse_cell(s):
    try:
        n_o, n_u, T, p = (int(x) for x in s.split(","))
    except ValueError:
        raise InputError(f"grid cell {s!r} is not n_o,n_u,T,p") from None
    return n_o, n_u, T, p


def _cmd_benchmark(a):
    grid = [_parse_cell(s) for s in a.cell] or [(4, 1, 500, 4)]
    cfg = GibbsConfig(n_draws=a.n_draws, n_burn=a.n_burn, seed=a.seed, o_diag=a.o_diag)
    res = run_benchmark(grid, a.R, cfg, methods=tuple(a.methods), scheme=SCHEMES[a.scheme])
    res.to_csv(a.out)
    print(f"{'n_o':>4} {'n_u':>4} {'T':>5} {'p':>3} {'method':>15} {'mse':>10} {'s/10draws':>10} {'fail':>4}")
    for r in res.rows:
        print(f"{r.n_o:4d} {r.n_u:4d} {r.T:5d} {r.p:3d} {r.method:>15} {r.mse:10.4g} "
              f"{r.seconds_per10:10.4g} {r.failures:4d}")
    print(f"-> {a.out}")


def _cmd_estimate(a):
    cfg = io.read_config(a.config) if a.config else {}
    for key in io.CONFIG_KEYS:
        val = getattr(a, key, None)
        if val is not None:
            cfg[key] = val
    _, summ = estimate_cmd(a.panel, cfg, a.out, bn=not a.no_bn)
    print(f"{len(summ.yu_median)} missing cells; draws and summaries written to {a.out}")


def _cmd_bn(a):
    store = DrawStore.load(a.draws)
    panel, stamps = io.read_panel_csv(a.panel)
    if store.yu_draws.shape[1] != panel.n_missing:
        raise InputError(f"draws hold {store.yu_draws.shape[1]} cells, panel has {panel.n_missing}")
    names = list(panel.names)
    if a.bands:
        med, bands, used = bn_cycle_bands(store, panel)
        header = ["period"] + [f"{nm}_{q}" for q in ("median", "lo68", "hi68", "lo90", "hi90") for nm in names]
        table = np.hstack([med, *bands[0.68], *bands[0.90]])
        print(f"per-draw cycles from {used} stationary draws")
    else:
        params = median_params(store)
        table = bn_cycle(params, panel.complete(np.median(store.yu_draws, axis=0)))
        header = ["period", *names]
    _write_table(a.out, header, table, stamps)
    print(f"BN cycle for {len(names)} variables over {panel.T} periods -> {a.out}")


def build_parser():
    ap = argparse.ArgumentParser(prog="mfvar", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a mixed-frequency panel")
    s.add_argument("--n-o", type=int, default=4)
    s.add_argument("--n-u", type=int, default=1)
    s.add_argument("--T", type=int, default=500)
    s.add_argument("--p", type=int, default=4)
    s.add_argument("--scheme", choices=sorted(SCHEMES), default="log_diff_triangle")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--truth", help="also write the complete panel here")
    s.set_defaults(func=_cmd_simulate)

    b = sub.add_parser("benchmark", help="MSE and timing table over a grid")
    b.add_argument("--cell", action="append", default=[], metavar="N_O,N_U,T,P")
    b.add_argument("--R", type=int, default=3)
    b.add_argument("--n-draws", type=int, default=4000)
    b.add_argument("--n-burn", type=int, default=None)
    b.add_argument("--o-diag", type=float, default=1e-8)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--scheme", choices=sorted(SCHEMES), default="log_diff_triangle")
    b.add_argument("--methods", nargs="+", choices=list(METHOD_SETTINGS), default=list(METHOD_SETTINGS))
    b.add_argument("--out", required=True)
    b.set_defaults(func=_cmd_benchmark)

    e = sub.add_parser("estimate", help="run the Gibbs sampler on a CSV panel")
    e.add_argument("panel")
    e.add_argument("--config")
    e.add_argument("--out", required=True)
    e.add_argument("--no-bn", action="store_true")
    for key, kind in io.CONFIG_KEYS.items():
        e.add_argument("--" + key.replace("_", "-"), dest=key, type=kind, default=None)
    e.set_defaults(func=_cmd_estimate)

    c = sub.add_parser("bn", help="BN cycle from saved draws")
    c.add_argument("--draws", required=True, help="directory written by estimate")
    c.add_argument("--panel", required=True)
    c.add_argument("--bands", action="store_true", help="per-draw cycles with 68/90%% bands")
    c.add_argument("--out", required=True)
    c.set_defaults(func=_cmd_bn)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (InputError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
