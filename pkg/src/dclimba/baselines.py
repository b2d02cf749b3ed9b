"""Classical quantile-based corrections: quantile mapping (QM), empirical-CDF
matching with an additive or multiplicative distance (ECDFM), and quantile
delta mapping (QDM), fitted per cell by default.

All forms share the same order-statistic conventions as the rest of the
package. Multiplicative denominators are floored at a trace threshold so
near-zero precipitation cannot blow up ratios; values beyond the fitted range
extrapolate with the constant ratio at the nearest extreme quantile.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvariantError
from .gridio import GridField

TRACE_MM = 0.05


@dataclass(frozen=True)
class EcdfPair:
    """Sorted model-historical and observed samples for one cell (or pooled)."""

    model_hist: np.ndarray
    obs: np.ndarray
    trace: float = TRACE_MM

    def __post_init__(self):
        for name in ("model_hist", "obs"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.size == 0:
                raise InvariantError(f"{name} must be non-empty")
            object.__setattr__(self, name, arr)


def _cdf_position(sorted_vals: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Empirical CDF position in [0, 1] by linear interpolation through the
    order statistics; clipped outside the fitted range."""
    n = sorted_vals.size
    if n == 1:
        return np.zeros_like(np.asarray(x, dtype=np.float64))
    return np.interp(x, sorted_vals, np.linspace(0.0, 1.0, n))


def _quantile_at(sorted_vals: np.ndarray, tau: np.ndarray) -> np.ndarray:
    n = sorted_vals.size
    if n == 1:
        return np.full_like(np.asarray(tau, dtype=np.float64), sorted_vals[0])
    return np.interp(tau, np.linspace(0.0, 1.0, n), sorted_vals)


def _monotonize(x: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Running maximum over the input ranks: a correction is a quantile map
    and must be order preserving, but empirical-CDF ratio corrections wiggle
    at sampling-noise scale; this flattens those wiggles and is the identity
    on already monotone outputs."""
    order = np.argsort(x, kind="stable")
    fixed = out.copy()
    fixed[order] = np.maximum.accumulate(out[order])
    return fixed


def qm_fit(model_hist, obs, trace: float = TRACE_MM) -> EcdfPair:
    """Sort the calibration samples; non-finite values are dropped."""
    mh = np.asarray(model_hist, dtype=np.float64)
    ob = np.asarray(obs, dtype=np.float64)
    mh = np.sort(mh[np.isfinite(mh)])
    ob = np.sort(ob[np.isfinite(ob)])
    return EcdfPair(model_hist=mh, obs=ob, trace=trace)


def qm_apply(pair: EcdfPair, x) -> np.ndarray:
    """Map x through the model-to-observed quantile relation. Outside the
    fitted model range the constant multiplicative ratio at the nearest
    extreme quantile applies."""
    x = np.asarray(x, dtype=np.float64)
    tau = _cdf_position(pair.model_hist, x)
    out = _quantile_at(pair.obs, tau)
    mh, ob = pair.model_hist, pair.obs
    hi = x > mh[-1]
    if hi.any():
        out[hi] = x[hi] * (ob[-1] / max(mh[-1], pair.trace))
    lo = x < mh[0]
    if lo.any():
        out[lo] = x[lo] * (ob[0] / max(mh[0], pair.trace))
    return out


def ecdfm_apply(pair: EcdfPair, x_future, mode: str = "multiplicative") -> np.ndarray:
    """Correct the future series by the per-quantile observed-vs-historical
    distance, ranked within the future series itself."""
    x = np.asarray(x_future, dtype=np.float64)
    tau = _cdf_position(np.sort(x[np.isfinite(x)]), x)
    obs_q = _quantile_at(pair.obs, tau)
    hist_q = _quantile_at(pair.model_hist, tau)
    if mode == "multiplicative":
        out = x * (obs_q / np.maximum(hist_q, pair.trace))
    elif mode == "additive":
        out = x + (obs_q - hist_q)
    else:
        raise InvariantError(f"unknown ECDFM mode {mode!r}")
    return _monotonize(x, out)


def qdm_apply(pair: EcdfPair, future_series, x) -> np.ndarray:
    """Quantile delta mapping: preserve the modeled relative change at each
    quantile. x is ranked within the full future series; values below the
    trace threshold are set to zero."""
    x = np.asarray(x, dtype=np.float64)
    fut = np.asarray(future_series, dtype=np.float64)
    tau = _cdf_position(np.sort(fut[np.isfinite(fut)]), x)
    hist_q = _quantile_at(pair.model_hist, tau)
    delta = x / np.maximum(hist_q, pair.trace)
    out = _quantile_at(pair.obs, tau) * delta
    out[x < pair.trace] = 0.0
    return _monotonize(x, out)


def correct_field(method: str, ref: GridField, gcm_hist: GridField,
                  gcm_apply: GridField, mode: str = "multiplicative",
                  pooled: bool = False) -> GridField:
    """Apply one baseline cell by cell (or with one pooled fit)."""
    if gcm_hist.values.shape[1:] != ref.values.shape[1:] or \
            gcm_apply.values.shape[1:] != ref.values.shape[1:]:
        raise InvariantError("baseline grids must share the same lat/lon shape")
    N = ref.n_cells
    T = gcm_apply.values.shape[0]
    out = np.full((T, N), np.nan, dtype=np.float64)
    pooled_pair = None
    if pooled:
        pooled_pair = qm_fit(gcm_hist.values.ravel(), ref.values.ravel())
    for i in range(N):
        pair = pooled_pair or qm_fit(gcm_hist.series(i), ref.series(i))
        x = gcm_apply.series(i)
        ok = np.isfinite(x)
        if method == "qm":
            out[ok, i] = qm_apply(pair, x[ok])
        elif method == "ecdfm":
            out[ok, i] = ecdfm_apply(pair, x[ok], mode=mode)
        elif method == "qdm":
            out[ok, i] = qdm_apply(pair, x[ok], x[ok])
        else:
            raise InvariantError(f"unknown baseline method {method!r}")
    vals = np.maximum(out, 0.0, where=np.isfinite(out), out=out)
    H, W = ref.values.shape[1:]
    return GridField(start_date=gcm_apply.start_date, lats=ref.lats, lons=ref.lons,
                     values=vals.reshape(T, H, W).astype(np.float32))
