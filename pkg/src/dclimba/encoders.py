"""Parameter network: temporal 1-D convolutional encoder, geodesic-attention
spatial encoder, and the linear head producing raw transform coefficients
per cell per day.

Node order inside a patch is [target, neighbor_1, ..., neighbor_k]; the
coefficients are read off the target node only. Attention runs independently
at each time step over the patch nodes, with a per-head learned offset on the
pre-softmax logits computed from pairwise geodesic features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import transform
from .autodiff import Tensor
from .errors import InvariantError
from .gridio import (AttributeField, GridField, NeighborGraph, TAU_WET,
                     geodesic_features_arrays, grid_cell_coords)

GEO_SCALE_KM = 100.0  # node/pair displacement channels are expressed in units of this
SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class EncoderConfig:
    kernel_size: int = 3
    hidden_width: int = 64
    heads: int = 2
    model_dim: int = 64
    lags: int = 3
    n_basis: int = transform.N_BASIS
    neighbors: int = 16
    pair_hidden: int = 16

    def __post_init__(self):
        if self.kernel_size % 2 != 1:
            raise InvariantError("kernel size must be odd for length-preserving padding")
        if self.model_dim % self.heads != 0:
            raise InvariantError("model dim must be divisible by the head count")

    @property
    def nodes(self) -> int:
        return 1 + self.neighbors

    @property
    def n_raw(self) -> int:
        return 3 * self.n_basis + 2


@dataclass(frozen=True)
class NormalizationStats:
    """Channel normalization fitted on the training window only."""

    precip_mean: np.ndarray  # (N,) per-cell mean of log1p precip
    precip_std: np.ndarray   # (N,) per-cell std, floored
    attr_mean: np.ndarray    # (4,) elevation, slope, aspect_sin, aspect_cos
    attr_std: np.ndarray     # (4,)
    landcover_codes: tuple
    precip_q999: float       # spread of the initial basis knots, mm/day

    def as_arrays(self) -> dict:
        return {
            "norm_precip_mean": self.precip_mean,
            "norm_precip_std": self.precip_std,
            "norm_attr_mean": self.attr_mean,
            "norm_attr_std": self.attr_std,
            "norm_landcover_codes": np.asarray(self.landcover_codes, dtype=np.float64),
            "norm_precip_q999": np.asarray([self.precip_q999]),
        }

    @classmethod
    def from_arrays(cls, arrs: dict) -> "NormalizationStats":
        return cls(precip_mean=arrs["norm_precip_mean"],
                   precip_std=arrs["norm_precip_std"],
                   attr_mean=arrs["norm_attr_mean"],
                   attr_std=arrs["norm_attr_std"],
                   landcover_codes=tuple(int(c) for c in arrs["norm_landcover_codes"]),
                   precip_q999=float(arrs["norm_precip_q999"][0]))


def fit_normalization(gcm: GridField, attrs: AttributeField,
                      window: tuple[int, int]) -> NormalizationStats:
    """Per-cell log1p precipitation statistics over the training window and
    global statistics of the static attributes."""
    t0, t1 = window
    sub = gcm.values[t0:t1].astype(np.float64)
    N = gcm.n_cells
    logv = np.log1p(sub.reshape(sub.shape[0], N))
    mean = np.nanmean(logv, axis=0)
    std = np.maximum(np.nanstd(logv, axis=0), SIGMA_FLOOR)
    asp = np.radians(attrs.aspect.ravel())
    stat = np.stack([attrs.elevation.ravel(), attrs.slope.ravel(),
                     np.sin(asp), np.cos(asp)], axis=1)
    attr_mean = stat.mean(axis=0)
    attr_std = np.maximum(stat.std(axis=0), SIGMA_FLOOR)
    finite = sub[np.isfinite(sub)]
    q999 = float(np.quantile(finite, 0.999)) if finite.size else 1.0
    codes = tuple(sorted(set(int(c) for c in np.unique(attrs.landcover))))
    return NormalizationStats(precip_mean=mean, precip_std=std,
                              attr_mean=attr_mean, attr_std=attr_std,
                              landcover_codes=codes, precip_q999=q999)


@dataclass(frozen=True)
class InputBatch:
    channels: np.ndarray    # (B, nodes, T, C)
    node_mask: np.ndarray   # (B, nodes) bool
    pair_feats: np.ndarray  # (B, nodes, nodes, 5)
    target_raw: np.ndarray  # (B, T) raw target precipitation, mm/day
    cells: np.ndarray       # (B,) flat target cell indices
    day0: int = 0


class FeaturePack:
    """Precomputed full-series input channels for one model field, from which
    patch batches are gathered. Channel layout:

    [x_t, x_t-1, x_t-2, x_t-3] log1p z-scored per cell | wet-day indicator |
    [elev, slope, aspect_sin, aspect_cos] z-scored | landcover one-hot |
    [dnorth, deast, dist] / 100 km, sin(bearing), cos(bearing) of the node
    relative to the patch target.
    """

    def __init__(self, gcm: GridField, attrs: AttributeField, graph: NeighborGraph,
                 stats: NormalizationStats, config: EncoderConfig,
                 tau_wet: float = TAU_WET):
        if attrs.lats.size != gcm.lats.size or attrs.lons.size != gcm.lons.size:
            raise InvariantError("attribute grid does not match the precipitation grid")
        if graph.indices.shape[1] < config.neighbors:
            raise InvariantError("neighbor graph holds fewer neighbors than configured")
        self.config = config
        self.gcm = gcm
        T, H, W = gcm.values.shape
        N = H * W
        vals = gcm.values.reshape(T, N).astype(np.float64)
        logn = (np.log1p(vals) - stats.precip_mean) / stats.precip_std
        # missing days enter the network as neutral zeros; the loss side
        # drops them pairwise and corrected outputs stay NaN on those days
        logn = np.nan_to_num(logn, nan=0.0, posinf=0.0, neginf=0.0)
        lagged = [logn]
        for _ in range(config.lags):
            prev = lagged[-1]
            lagged.append(np.concatenate([prev[:1], prev[:-1]], axis=0))
        self.precip_ch = np.stack(lagged, axis=0)          # (1+lags, T, N)
        self.indicator = (vals >= tau_wet).astype(np.float64)  # (T, N)
        self.raw = vals                                    # (T, N)

        asp = np.radians(attrs.aspect.ravel())
        stat = np.stack([attrs.elevation.ravel(), attrs.slope.ravel(),
                         np.sin(asp), np.cos(asp)], axis=1)
        stat = (stat - stats.attr_mean) / stats.attr_std
        onehot = (attrs.landcover.ravel()[:, None] ==
                  np.asarray(stats.landcover_codes)[None, :]).astype(np.float64)
        self.static_ch = np.concatenate([stat, onehot], axis=1)  # (N, 4 + codes)

        nodes = config.nodes
        k = config.neighbors
        self.node_idx = np.empty((N, nodes), dtype=np.intp)
        self.node_mask = np.empty((N, nodes), dtype=bool)
        for i in range(N):
            idx, valid = graph.patch_nodes(i)
            self.node_idx[i] = idx[:nodes]
            self.node_mask[i] = valid[:nodes]
        clat, clon = grid_cell_coords(gcm.lats, gcm.lons)
        nlat = clat[self.node_idx]                         # (N, nodes)
        nlon = clon[self.node_idx]
        pair = geodesic_features_arrays(nlat[:, :, None], nlon[:, :, None],
                                        nlat[:, None, :], nlon[:, None, :])
        self.pair_feats = self._encode_geo(pair)           # (N, nodes, nodes, 5)
        self.node_geo = self.pair_feats[:, 0, :, :]        # node relative to target

        self.n_channels = (self.precip_ch.shape[0] + 1 + self.static_ch.shape[1]
                           + self.node_geo.shape[-1])
        self.n_cells = N
        self.n_days = T

    @staticmethod
    def _encode_geo(feat: np.ndarray) -> np.ndarray:
        """(dn, de, dist, bearing deg) -> scaled displacements + bearing circle."""
        br = np.radians(feat[..., 3])
        return np.stack([feat[..., 0] / GEO_SCALE_KM, feat[..., 1] / GEO_SCALE_KM,
                         feat[..., 2] / GEO_SCALE_KM, np.sin(br), np.cos(br)], axis=-1)

    def batch(self, cells, day0: int, n_days: int) -> InputBatch:
        """Gather patch inputs for the given target cells and day window."""
        cells = np.asarray(cells, dtype=np.intp)
        idx = self.node_idx[cells]        # (B, nodes)
        mask = self.node_mask[cells]      # (B, nodes)
        sl = slice(day0, day0 + n_days)
        pre = self.precip_ch[:, sl][:, :, idx]             # (L, T, B, nodes)
        pre = pre.transpose(2, 3, 1, 0)                    # (B, nodes, T, L)
        ind = self.indicator[sl][:, idx].transpose(1, 2, 0)[..., None]
        stat = np.broadcast_to(self.static_ch[idx][:, :, None, :],
                               idx.shape + (n_days, self.static_ch.shape[1]))
        geo = np.broadcast_to(self.node_geo[cells][:, :, None, :],
                              idx.shape + (n_days, self.node_geo.shape[-1]))
        ch = np.concatenate([pre, ind, stat, geo], axis=-1)
        ch = ch * mask[:, :, None, None]
        return InputBatch(channels=np.ascontiguousarray(ch), node_mask=mask,
                          pair_feats=self.pair_feats[cells],
                          target_raw=self.raw[sl][:, cells].T.copy(),
                          cells=cells, day0=day0)


# ---------------------------------------------------------------------------
# weights and forward passes
# ---------------------------------------------------------------------------

def _xavier(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_weights(config: EncoderConfig, n_channels: int, stats: NormalizationStats,
                 seed: int) -> dict[str, np.ndarray]:
    """Near-identity initialization: the head bias is chosen so the
    constrained transform starts close to alpha=1, w=0.05, s=1, c=0 with
    knots spread over the observed precipitation range."""
    rng = np.random.default_rng(seed)
    d = config.model_dim
    k = config.kernel_size
    z = config.n_basis
    w = {
        "in_proj_w": _xavier(rng, (n_channels, d), n_channels, d),
        "in_proj_b": np.zeros(d),
        "conv1_w": _xavier(rng, (d, d, k), d * k, d * k),
        "conv1_b": np.zeros(d),
        "conv2_w": _xavier(rng, (d, d, k), d * k, d * k),
        "conv2_b": np.zeros(d),
        "attn_wq": _xavier(rng, (d, d), d, d),
        "attn_bq": np.zeros(d),
        "attn_wk": _xavier(rng, (d, d), d, d),
        "attn_bk": np.zeros(d),
        "attn_wv": _xavier(rng, (d, d), d, d),
        "attn_bv": np.zeros(d),
        "attn_wo": _xavier(rng, (d, d), d, d),
        "attn_bo": np.zeros(d),
        "pair_w1": _xavier(rng, (config.heads, 5, config.pair_hidden), 5, config.pair_hidden),
        "pair_b1": np.zeros((config.heads, config.pair_hidden)),
        "pair_w2": _xavier(rng, (config.heads, config.pair_hidden, 1), config.pair_hidden, 1),
        "pair_b2": np.zeros((config.heads, 1)),
        # the head starts almost flat so the constrained transform sits at
        # the bias vector below: training begins from "no correction"
        "head_w": 1e-2 * _xavier(rng, (d, config.n_raw), d, config.n_raw),
        "head_b": np.concatenate([
            [transform.softplus_inverse(1.0)],
            np.full(z, transform.softplus_inverse(0.05)),
            np.full(z, transform.softplus_inverse(1.0)),
            np.linspace(0.0, stats.precip_q999, z),
            [0.0],
        ]),
    }
    return w


def _linear(x2d: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.linear(x2d, w, b)


def temporal_encode(p: dict, x: Tensor) -> Tensor:
    """Per-node temporal encoding: input projection, then two convolution
    layers (odd kernel, zero padding, softplus). x is (nodes, channels, T);
    the result is (nodes, model_dim, T) with length preserved."""
    BN, C, T = x.shape
    d = p["in_proj_w"].shape[1]
    h = _linear(ad.reshape(ad.transpose(x, (0, 2, 1)), (BN * T, C)),
                p["in_proj_w"], p["in_proj_b"])
    h = ad.transpose(ad.reshape(h, (BN, T, d)), (0, 2, 1))
    h = ad.softplus(ad.conv1d(h, p["conv1_w"], p["conv1_b"]))
    h = ad.softplus(ad.conv1d(h, p["conv2_w"], p["conv2_b"]))
    return h


ATTN_TIME_CHUNK = 64  # bounds transient array sizes; exact either way


def spatial_attend(p: dict, emb: Tensor, pair_feats: np.ndarray,
                   node_mask: np.ndarray, heads: int,
                   return_weights: bool = False):
    """Multi-head attention over patch nodes, independently at each time
    step. Per head, a two-layer perceptron maps each pair's geodesic
    features to a scalar added to the pre-softmax logit; masked keys get a
    large negative logit; a residual connection wraps the block.

    emb is (B, T, nodes, D); pair_feats (B, nodes, nodes, 5); node_mask
    (B, nodes) with the target node always valid. Time steps are processed
    in chunks purely to bound intermediate sizes.
    """
    B, T, N, D = emb.shape
    if not node_mask[:, 0].all():
        raise InvariantError("target node must be unmasked in every patch")
    dh = D // heads

    pf = Tensor(pair_feats.reshape(B * N * N, 5))
    offs = []
    for h in range(heads):
        hid = ad.softplus(_linear(pf, p["pair_w1"][h], p["pair_b1"][h]))
        offs.append(ad.reshape(_linear(hid, p["pair_w2"][h], p["pair_b2"][h]),
                               (B, 1, N, N)))
    off = ad.reshape(ad.concat(offs, axis=1), (B, heads, 1, N, N))
    neg = None
    if not node_mask.all():
        neg = Tensor(np.where(node_mask[:, None, None, None, :], 0.0, -1e30))

    outs = []
    weights = [] if return_weights else None
    for lo in range(0, T, ATTN_TIME_CHUNK):
        hi = min(lo + ATTN_TIME_CHUNK, T)
        tc = hi - lo
        chunk = emb[:, lo:hi]
        flat = ad.reshape(chunk, (B * tc * N, D))

        def split(t):
            return ad.transpose(ad.reshape(t, (B, tc, N, heads, dh)),
                                (0, 3, 1, 2, 4))

        q = split(_linear(flat, p["attn_wq"], p["attn_bq"]))
        k = split(_linear(flat, p["attn_wk"], p["attn_bk"]))
        v = split(_linear(flat, p["attn_wv"], p["attn_bv"]))
        logits = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 2, 4, 3))),
                        1.0 / np.sqrt(dh))
        logits = ad.add_expand(logits, off)
        if neg is not None:
            logits = ad.add_expand(logits, neg)
        att = ad.softmax(logits, axis=-1)
        if return_weights:
            weights.append(att.data.copy())
        ctx = ad.matmul(att, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 3, 1, 4)), (B * tc * N, D))
        outs.append(ad.reshape(_linear(ctx, p["attn_wo"], p["attn_bo"]),
                               (B, tc, N, D)))
    out = outs[0] if len(outs) == 1 else ad.concat(outs, axis=1)
    result = ad.add(emb, out)
    if return_weights:
        return result, np.concatenate(weights, axis=2)
    return result


def predict_theta(p: dict, attended: Tensor) -> Tensor:
    """Read the target-node embedding and map it to the raw coefficient
    vector, one per day."""
    B, T, N, D = attended.shape
    n_raw = p["head_w"].shape[1]
    tgt = attended[:, :, 0, :]
    raw = _linear(ad.reshape(tgt, (B * T, D)), p["head_w"], p["head_b"])
    return ad.reshape(raw, (B, T, n_raw))


class BiasCorrector:
    """Bundles the encoder weights with the forward pass producing raw
    transform coefficients for each target cell and day of a batch."""

    def __init__(self, config: EncoderConfig, stats: NormalizationStats,
                 n_channels: int, seed: int = 0,
                 weights: dict[str, np.ndarray] | None = None):
        self.config = config
        self.stats = stats
        self.n_channels = n_channels
        self.weights = (weights if weights is not None
                        else init_weights(config, n_channels, stats, seed))

    def wrap(self, requires_grad: bool) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad)
                for k, v in self.weights.items()}

    def forward(self, params: dict[str, Tensor], batch: InputBatch) -> Tensor:
        B, N, T, C = batch.channels.shape
        x = Tensor(np.ascontiguousarray(
            batch.channels.reshape(B * N, T, C).transpose(0, 2, 1)))
        emb = temporal_encode(params, x)                       # (B*N, D, T)
        d = self.config.model_dim
        emb = ad.transpose(ad.reshape(ad.transpose(emb, (0, 2, 1)), (B, N, T, d)),
                           (0, 2, 1, 3))                       # (B, T, N, D)
        att = spatial_attend(params, emb, batch.pair_feats, batch.node_mask,
                             self.config.heads)
        return predict_theta(params, att)

    def theta_for(self, batch: InputBatch, params: dict[str, Tensor] | None = None):
        """Constrained transform parameters for a batch (inference path when
        params is omitted)."""
        if params is None:
            params = self.wrap(requires_grad=False)
        raw = self.forward(params, batch)
        return transform.constrain(raw)
