"""Evaluation suite: climate-extremes indices, percentage-bias maps,
box-counting fractal dimension of thresholded fields, and trend bias.

A fixed 365-day calendar is used (month lengths 31,28,31,...); series are
chunked into consecutive 365-day years from their first day and any trailing
partial year is dropped. Counts use >= for wet thresholds except the
percentile-total indices, whose days must strictly exceed the reference
wet-day percentile.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import InvariantError
from .gridio import GridField, TAU_WET

DAYS_PER_YEAR = 365
MONTH_LENGTHS = (31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31)
MONTH_STARTS = tuple(np.cumsum((0,) + MONTH_LENGTHS[:-1]))
INDEX_NAMES = ("r10mm", "r20mm", "rx1day", "rx5day", "sdii",
               "cdd", "cwd", "r95ptot", "r99ptot")


def quantile_linear(values: np.ndarray, q) -> np.ndarray:
    """Order-statistic quantile with linear interpolation at q*(n-1)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise InvariantError("quantile of an empty sample")
    return np.quantile(values, q)


def wet_day_quantiles(base_series: np.ndarray, qs=(0.95, 0.99),
                      tau_wet: float = TAU_WET) -> dict[float, float]:
    """Reference-period wet-day percentiles used by the percentile-total
    indices."""
    base = np.asarray(base_series, dtype=np.float64)
    wet = base[np.isfinite(base) & (base >= tau_wet)]
    if wet.size == 0:
        return {q: np.nan for q in qs}
    return {q: float(quantile_linear(wet, q)) for q in qs}


@dataclass(frozen=True)
class EtccdiEntry:
    index: str
    freq: str               # "annual" or "monthly"
    values: np.ndarray      # one entry per year or per month
    period_mean: float


def _years(series: np.ndarray) -> np.ndarray:
    s = np.asarray(series, dtype=np.float64)
    n_years = s.size // DAYS_PER_YEAR
    if n_years < 1:
        raise InvariantError("index computation requires at least one whole year")
    return s[:n_years * DAYS_PER_YEAR].reshape(n_years, DAYS_PER_YEAR)


def _monthly(yr: np.ndarray):
    for m, (s, ln) in enumerate(zip(MONTH_STARTS, MONTH_LENGTHS)):
        yield yr[:, s:s + ln]


def etccdi_index(series: np.ndarray, index: str,
                 base_wet_quantiles: dict[float, float] | None = None,
                 tau_wet: float = TAU_WET) -> EtccdiEntry:
    """One index for one cell's daily series. Percentile-total indices need
    base_wet_quantiles (see wet_day_quantiles)."""
    yr = _years(series)

    if index == "r10mm":
        vals = (yr >= 10.0).sum(axis=1).astype(np.float64)
        freq = "annual"
    elif index == "r20mm":
        vals = (yr >= 20.0).sum(axis=1).astype(np.float64)
        freq = "annual"
    elif index == "rx1day":
        vals = np.concatenate([m.max(axis=1) for m in _monthly(yr)])
        freq = "monthly"
    elif index == "rx5day":
        cols = []
        for m in _monthly(yr):
            c = np.cumsum(np.concatenate([np.zeros((m.shape[0], 1)), m], axis=1), axis=1)
            win = c[:, 5:] - c[:, :-5]
            cols.append(win.max(axis=1))
        vals = np.concatenate(cols)
        freq = "monthly"
    elif index == "sdii":
        cols = []
        for m in _monthly(yr):
            wet = m >= tau_wet
            n_wet = wet.sum(axis=1)
            tot = np.where(wet, m, 0.0).sum(axis=1)
            cols.append(np.where(n_wet > 0, tot / np.maximum(n_wet, 1), np.nan))
        vals = np.concatenate(cols)
        freq = "monthly"
    elif index == "cdd":
        vals = _kernels.run_length_max(yr < tau_wet).astype(np.float64)
        freq = "annual"
    elif index == "cwd":
        vals = _kernels.run_length_max(yr >= tau_wet).astype(np.float64)
        freq = "annual"
    elif index in ("r95ptot", "r99ptot"):
        if base_wet_quantiles is None:
            raise InvariantError(f"{index} requires reference-period wet-day quantiles")
        thr = base_wet_quantiles[0.95 if index == "r95ptot" else 0.99]
        vals = np.where(yr > thr, yr, 0.0).sum(axis=1)
        freq = "annual"
    else:
        raise InvariantError(f"unknown index {index!r}")

    with np.errstate(invalid="ignore"):
        mean = float(np.nanmean(vals)) if np.any(np.isfinite(vals)) else np.nan
    return EtccdiEntry(index=index, freq=freq, values=vals, period_mean=mean)


def etccdi_all_cells(fld: GridField, window: tuple[int, int],
                     base_fld: GridField, base_window: tuple[int, int],
                     tau_wet: float = TAU_WET) -> dict[str, np.ndarray]:
    """Period-mean value of every index for every cell. The percentile
    thresholds come from the base field over the base window."""
    t0, t1 = window
    b0, b1 = base_window
    N = fld.n_cells
    out = {name: np.empty(N) for name in INDEX_NAMES}
    for i in range(N):
        s = fld.series(i)[t0:t1]
        base = wet_day_quantiles(base_fld.series(i)[b0:b1], tau_wet=tau_wet)
        for name in INDEX_NAMES:
            out[name][i] = etccdi_index(s, name, base, tau_wet).period_mean
    return out


def mean_percentage_bias(model: np.ndarray, ref: np.ndarray,
                         guard: float = 1e-9) -> np.ndarray:
    """100 * (model - ref) / ref elementwise; NaN where |ref| < guard."""
    model = np.asarray(model, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    out = np.full(np.broadcast(model, ref).shape, np.nan)
    ok = np.abs(ref) >= guard
    out[ok] = 100.0 * (model - ref)[ok] / ref[ok]
    return out


# ---------------------------------------------------------------------------
# fractal dimension
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FdCurve:
    levels: np.ndarray      # quantile thresholds h
    fd: np.ndarray          # fractal dimension per level (NaN = undefined)
    box_sizes: np.ndarray
    n_defined: np.ndarray   # snapshots contributing per level


def binarize_at_quantile(field: np.ndarray, h: float) -> np.ndarray:
    """Mask of cells at or above the field's h-quantile."""
    field = np.asarray(field, dtype=np.float64)
    if not np.all(np.isfinite(field)):
        raise InvariantError("binarize requires a finite field")
    thr = quantile_linear(field.ravel(), h)
    return (field >= thr).astype(np.uint8)


def box_count(mask: np.ndarray, box: int) -> int:
    """Number of box x box cells (origin anchored, ragged edges included)
    containing both a zero and a one."""
    if box < 2:
        raise InvariantError("box side must be at least 2")
    mask = np.ascontiguousarray(np.asarray(mask, dtype=np.uint8))
    return int(_kernels.box_partial_count(mask, int(box)))


def fd_fit(counts) -> float:
    """Least-squares slope of log N versus log(1/box); NaN when fewer than
    three sizes have positive counts."""
    pts = [(b, n) for b, n in counts if n > 0]
    if len(pts) < 3:
        return float("nan")
    x = np.log(1.0 / np.asarray([b for b, _ in pts], dtype=np.float64))
    y = np.log(np.asarray([n for _, n in pts], dtype=np.float64))
    xc = x - x.mean()
    return float((xc * (y - y.mean())).sum() / (xc * xc).sum())


def default_box_sizes(H: int, W: int) -> np.ndarray:
    top = min(H, W) // 4
    sizes = []
    b = 2
    while b <= top:
        sizes.append(b)
        b *= 2
    return np.asarray(sizes, dtype=np.int64)


def fd_snapshot(field: np.ndarray, h: float, box_sizes) -> float:
    mask = binarize_at_quantile(field, h)
    return fd_fit([(b, box_count(mask, b)) for b in box_sizes])


def fd_curve(fields: np.ndarray, levels=None, box_sizes=None) -> FdCurve:
    """Fractal dimension per quantile level: computed per daily snapshot and
    averaged over snapshots where defined."""
    fields = np.asarray(fields, dtype=np.float64)
    if fields.ndim == 2:
        fields = fields[None]
    if levels is None:
        levels = np.arange(1, 100, dtype=np.float64) / 100.0
    levels = np.asarray(levels, dtype=np.float64)
    if box_sizes is None:
        box_sizes = default_box_sizes(fields.shape[1], fields.shape[2])
    box_sizes = np.asarray(box_sizes, dtype=np.int64)
    per = np.full((fields.shape[0], levels.size), np.nan)
    for t in range(fields.shape[0]):
        for j, h in enumerate(levels):
            per[t, j] = fd_snapshot(fields[t], h, box_sizes)
    defined = np.isfinite(per)
    with np.errstate(invalid="ignore"):
        fd = np.where(defined.any(axis=0), np.nansum(per, axis=0) /
                      np.maximum(defined.sum(axis=0), 1), np.nan)
    return FdCurve(levels=levels, fd=fd, box_sizes=box_sizes,
                   n_defined=defined.sum(axis=0))


def fd_mae(curve: FdCurve, ref_curve: FdCurve) -> float:
    """Mean absolute deviation between two curves over levels where both are
    defined."""
    if curve.levels.shape != ref_curve.levels.shape or \
            not np.allclose(curve.levels, ref_curve.levels):
        raise InvariantError("curves must share the same quantile levels")
    both = np.isfinite(curve.fd) & np.isfinite(ref_curve.fd)
    if not both.any():
        return float("nan")
    return float(np.mean(np.abs(curve.fd[both] - ref_curve.fd[both])))


# ---------------------------------------------------------------------------
# trend bias
# ---------------------------------------------------------------------------

TREND_STATISTICS = ("mean", "q95", "wet_days", "very_wet_days")


@dataclass(frozen=True)
class TrendBiasEntry:
    statistic: str
    t_raw: float
    t_debiased: float
    tb_percent: float  # NaN when |t_raw| is below the guard


def _trend_statistic(series: np.ndarray, statistic: str) -> float:
    s = np.asarray(series, dtype=np.float64)
    s = s[np.isfinite(s)]
    years = max(s.size / DAYS_PER_YEAR, 1e-12)
    if statistic == "mean":
        return float(s.mean())
    if statistic == "q95":
        return float(quantile_linear(s, 0.95))
    if statistic == "wet_days":
        return float((s > 1.0).sum() / years)       # days per year above 1 mm
    if statistic == "very_wet_days":
        return float((s > 10.0).sum() / years)
    raise InvariantError(f"unknown trend statistic {statistic!r}")


def trend_bias(raw_hist, raw_future, deb_hist, deb_future, statistic: str,
               guard: float = 1e-6) -> TrendBiasEntry:
    """Percentage change of the future-minus-historical statistic induced by
    the bias correction."""
    t_raw = _trend_statistic(raw_future, statistic) - _trend_statistic(raw_hist, statistic)
    t_deb = _trend_statistic(deb_future, statistic) - _trend_statistic(deb_hist, statistic)
    if abs(t_raw) < guard:
        return TrendBiasEntry(statistic, t_raw, t_deb, float("nan"))
    return TrendBiasEntry(statistic, t_raw, t_deb, 100.0 * (t_deb - t_raw) / t_raw)


# ---------------------------------------------------------------------------
# quantile comparison curves
# ---------------------------------------------------------------------------

def quantile_curves(series_by_name: dict[str, np.ndarray],
                    n_levels: int = 99) -> list[tuple[str, float, float, float]]:
    """Rows of (name, q, q**5 plotting coordinate, value) per series; the
    fifth-power coordinate expands the upper tail."""
    q = np.arange(1, n_levels + 1, dtype=np.float64) / (n_levels + 1)
    rows = []
    for name, series in series_by_name.items():
        s = np.asarray(series, dtype=np.float64)
        s = s[np.isfinite(s)]
        vals = quantile_linear(s, q)
        rows.extend((name, float(qi), float(qi ** 5), float(v))
                    for qi, v in zip(q, vals))
    return rows
