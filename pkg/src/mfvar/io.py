"""CSV panels and key=value run configurations."""

from __future__ import annotations

import csv
import datetime as dt
import re

import numpy as np

from .constraints import SCHEMES, AggregationScheme
from .errors import ConfigError, ParseError
from .model import MixedPanel

_STAMP = re.compile(r"^\d{4}-\d{2}(-\d{2})?$")


def _check_stamp(s, row):
    if not _STAMP.match(s):
        raise ParseError(f"bad period stamp {s!r}", row, 1)
    try:
        dt.date.fromisoformat(s if len(s) == 10 else s + "-01")
    except ValueError:
        raise ParseError(f"bad period stamp {s!r}", row, 1) from None


def read_panel_csv(path):
    """Read a panel: first column an ISO period stamp, one column per variable.

    A column with any empty cell is low frequency: its non-empty cells are
    aggregates stamped at their row.  Low-frequency columns are moved after the
    high-frequency ones, keeping their relative order.  ``row``/``col`` in a
    :class:`ParseError` are 1-based file line and column numbers.

    Returns ``(panel, stamps)``.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty file", 1, 1)
    header = [h.strip() for h in rows[0]]
    if len(header) < 2:
        raise ParseError("need a stamp column and at least one variable", 1, len(header))
    names = header[1:]
    body = [(k + 2, r) for k, r in enumerate(rows[1:]) if any(c.strip() for c in r)]
    if not body:
        raise ParseError("no data rows", 2, 1)
    T, n = len(body), len(names)
    raw = np.full((T, n), np.nan)
    stamps = []
    for i, (line, r) in enumerate(body):
        if len(r) != n + 1:
            raise ParseError(f"expected {n + 1} fields, found {len(r)}", line, min(len(r), n + 1))
        stamp = r[0].strip()
        _check_stamp(stamp, line)
        stamps.append(stamp)
        for j, cell in enumerate(r[1:]):
            cell = cell.strip()
            if not cell:
                continue
            try:
                raw[i, j] = float(cell)
            except ValueError:
                raise ParseError(f"non-numeric value {cell!r}", line, j + 2) from None
            if not np.isfinite(raw[i, j]):
                raise ParseError(f"non-finite value {cell!r}", line, j + 2)
    low = np.isnan(raw).any(axis=0)
    order = np.concatenate([np.flatnonzero(~low), np.flatnonzero(low)])
    raw = raw[:, order]
    names = tuple(names[j] for j in order)
    n_o = int((~low).sum())
    values = raw.copy()
    values[:, n_o:] = np.nan
    t_idx, v_idx = np.nonzero(~np.isnan(raw[:, n_o:]))
    order_k = np.lexsort((t_idx, v_idx))
    at, av = t_idx[order_k], v_idx[order_k] + n_o
    panel = MixedPanel(values, n_o, at, av, raw[at, av], names=names)
    return panel, stamps


def monthly_stamps(T, start=(2000, 1)):
    y, m = start
    out = []
    for _ in range(T):
        out.append(f"{y:04d}-{m:02d}")
        m += 1
        if m > 12:
            y, m = y + 1, 1
    return out


def write_panel_csv(path, panel: MixedPanel, stamps=None):
    """Inverse of :func:`read_panel_csv` (aggregates written in their variable's column)."""
    stamps = monthly_stamps(panel.T) if stamps is None else stamps
    names = panel.names or tuple(f"y{v}" for v in range(panel.n))
    grid = np.array(panel.values)
    grid[:, panel.n_o:] = np.nan
    grid[panel.agg_time, panel.agg_var] = panel.agg_value
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["period", *names])
        for s, row in zip(stamps, grid):
            w.writerow([s, *("" if np.isnan(x) else repr(float(x)) for x in row)])


CONFIG_KEYS = {
    "lags": int,
    "scheme": str,
    "constraint_mode": str,
    "o_diag": float,
    "n_draws": int,
    "n_burn": int,
    "thin": int,
    "seed": int,
    "method": str,
}
REQUIRED_KEYS = ("lags",)
CONFIG_DEFAULTS = {
    "scheme": "log_diff_triangle",
    "constraint_mode": "soft",
    "o_diag": 1e-8,
    "n_draws": 20_000,
    "thin": 1,
    "seed": 0,
    "method": "precision",
}
_CHOICES = {
    "scheme": tuple(SCHEMES),
    "constraint_mode": ("soft", "hard"),
    "method": ("precision", "kf"),
}


def parse_config_text(text):
    """Parse ``key=value`` lines; ``#`` starts a comment.  Returns a dict with defaults filled."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"line {lineno} is not key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(key, "unknown key")
        if key in out:
            raise ConfigError(key, "given twice")
        out[key] = _convert(key, val)
    return validate_config(out)


def _convert(key, val):
    kind = CONFIG_KEYS[key]
    try:
        if kind is int:
            f = float(val)
            if not f.is_integer():
                raise ValueError
            return int(f)
        return kind(val)
    except ValueError:
        raise ConfigError(key, f"cannot read {val!r} as {kind.__name__}") from None


def validate_config(cfg):
    for key in REQUIRED_KEYS:
        if key not in cfg:
            raise ConfigError(key, "required key missing")
    unknown = set(cfg) - set(CONFIG_KEYS)
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown key")
    out = {**CONFIG_DEFAULTS, **{k: v for k, v in cfg.items() if v is not None}}
    for key, choices in _CHOICES.items():
        if out[key] not in choices:
            raise ConfigError(key, f"must be one of {choices}")
    if out["lags"] < 1:
        raise ConfigError("lags", "must be >= 1")
    if out["n_draws"] < 1:
        raise ConfigError("n_draws", "must be >= 1")
    out.setdefault("n_burn", out["n_draws"] // 2)
    if not 0 <= out["n_burn"] < out["n_draws"]:
        raise ConfigError("n_burn", "must lie in [0, n_draws)")
    if out["thin"] < 1:
        raise ConfigError("thin", "must be >= 1")
    if not out["o_diag"] > 0:
        raise ConfigError("o_diag", "must be positive")
    return out


def read_config(path):
    with open(path) as fh:
        return parse_config_text(fh.read())


def scheme_of(cfg) -> AggregationScheme:
    return SCHEMES[cfg["scheme"]]
