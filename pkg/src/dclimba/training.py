"""Adam training of the encoder/transform stack against the composite loss,
checkpointing, validation scoring, and hyperparameter selection.

Each optimizer step samples a batch of target cells plus one 365-day window
start inside the training window; all losses see only those windows.
Normalization statistics and the neighbor graph are fitted strictly inside
the training window.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import _kernels
from . import autodiff as ad
from . import losses as losses_mod
from . import metrics
from . import transform
from .autodiff import Tensor
from .encoders import (BiasCorrector, EncoderConfig, FeaturePack,
                       NormalizationStats, fit_normalization)
from .errors import FormatError, InvariantError, LengthError, NumericalError
from .gridio import AttributeField, GridField, NeighborGraph

DCKP_MAGIC = b"DCKP"
DCKP_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    train_window: tuple[int, int]
    val_window: tuple[int, int]
    lr: float = 1e-4
    batch_size: int = 5
    seq_len: int = 365
    epochs: int = 100
    q_star: float | None = None
    seed: int = 0
    steps_per_epoch: int | None = None
    train_region: tuple | None = None   # flat cell indices; None = whole grid
    val_region: tuple | None = None
    n_levels: int = 1000
    p1: float = 0.99
    p2: float = 0.01
    p3: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvariantError("batch size must be at least 1")
        t0, t1 = self.train_window
        v0, v1 = self.val_window
        if t1 - t0 < self.seq_len:
            raise InvariantError("training window shorter than the sequence length")
        windows_overlap = not (t1 <= v0 or v1 <= t0)
        if windows_overlap and not self._regions_disjoint():
            raise InvariantError(
                "train and validation windows overlap; either separate the "
                "windows or hold out disjoint cell regions")

    def _regions_disjoint(self) -> bool:
        if self.train_region is None or self.val_region is None:
            return False
        a = np.asarray(self.train_region)
        b = np.asarray(self.val_region)
        return np.intersect1d(a, b).size == 0

    def loss_weights(self) -> losses_mod.LossWeights:
        return losses_mod.LossWeights(p1=self.p1, p2=self.p2, p3=self.p3,
                                      q_star=self.q_star, n_levels=self.n_levels)


@dataclass
class Checkpoint:
    weights: dict
    stats: NormalizationStats
    encoder_config: EncoderConfig
    train_config: TrainConfig
    epoch: int
    loss_history: np.ndarray  # rows of (epoch, Q, R, S, L)
    graph: NeighborGraph


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def adam_init(params: dict) -> AdamState:
    return AdamState(m={k: np.zeros_like(v) for k, v in params.items()},
                     v={k: np.zeros_like(v) for k, v in params.items()},
                     t=0)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict, AdamState]:
    """Bias-corrected first/second-moment update, in place."""
    state.t += 1
    t = state.t
    for k, p in params.items():
        g = grads[k]
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g
        m_hat = state.m[k] / (1.0 - beta1 ** t)
        v_hat = state.v[k] / (1.0 - beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _check_aligned(ref: GridField, gcm: GridField) -> None:
    if ref.values.shape != gcm.values.shape:
        raise InvariantError("reference and model fields must share a shape")
    if not (np.array_equal(ref.lats, gcm.lats) and np.array_equal(ref.lons, gcm.lons)):
        raise InvariantError("reference and model fields must share a grid")
    if ref.start_date != gcm.start_date:
        raise InvariantError("reference and model fields must share a start date")


def batch_loss(model: BiasCorrector, params: dict, batch, ref_rows: np.ndarray,
               weights: losses_mod.LossWeights):
    """Forward pass and composite loss for one batch of target cells.

    The spatial term treats the batch's corrected target cells as the node
    vector at each time step; neighbor nodes provide context only and
    receive no loss."""
    raw = model.forward(params, batch)
    theta = transform.constrain(raw)
    corrected = transform.apply(theta, Tensor(batch.target_raw))
    valid = np.isfinite(batch.target_raw).all(axis=0) & np.isfinite(ref_rows).all(axis=0)
    y = ref_rows
    if not valid.all():
        if valid.sum() < 30:
            raise InvariantError("fewer than 30 jointly valid days in batch window")
        corrected = ad.take(corrected, np.where(valid)[0], axis=-1)
        y = ref_rows[:, valid]
    Q = losses_mod.quantile_loss(corrected, y, weights)
    R = losses_mod.rainy_day_loss(corrected, y, weights)
    S = losses_mod.spatial_corr_loss(
        ad.reshape(corrected, (1,) + corrected.shape), y[None], weights)
    return losses_mod.composite_loss(Q, R, S, weights)


def train(ref: GridField, gcm: GridField, attrs: AttributeField,
          graph: NeighborGraph, config: TrainConfig,
          encoder_config: EncoderConfig | None = None,
          log_path=None, verbose: bool = False) -> Checkpoint:
    """Full optimization run; reproducible from config.seed."""
    _kernels.tune_allocator()
    _check_aligned(ref, gcm)
    enc = encoder_config or EncoderConfig()
    t0, t1 = config.train_window
    stats = fit_normalization(gcm, attrs, config.train_window)
    pack = FeaturePack(gcm, attrs, graph, stats, enc)
    model = BiasCorrector(enc, stats, pack.n_channels, seed=config.seed)
    state = adam_init(model.weights)
    weights = config.loss_weights()

    N = gcm.n_cells
    pool = (np.arange(N) if config.train_region is None
            else np.asarray(config.train_region, dtype=np.intp))
    steps = config.steps_per_epoch or math.ceil(pool.size / config.batch_size)
    rng = np.random.default_rng([config.seed, 0x5EED])
    ref_flat = ref.values.reshape(ref.values.shape[0], N).astype(np.float64)

    history = np.zeros((config.epochs, 5))
    log_rows = []
    for epoch in range(config.epochs):
        comps = np.zeros(4)
        for step in range(steps):
            cells = rng.choice(pool, size=min(config.batch_size, pool.size),
                               replace=False)
            day0 = int(rng.integers(t0, t1 - config.seq_len + 1))
            batch = pack.batch(cells, day0, config.seq_len)
            y = ref_flat[day0:day0 + config.seq_len, cells].T
            with ad.tape_scope():
                params = {k: Tensor(v, requires_grad=True)
                          for k, v in model.weights.items()}
                L, rep = batch_loss(model, params, batch, y, weights)
                if not np.isfinite(rep.L):
                    raise NumericalError(
                        f"non-finite loss at epoch {epoch} step {step}, "
                        f"cells {cells.tolist()}, day0 {day0}")
                ad.backward(L, free_graph=True)
                grads = {k: (params[k].grad if params[k].grad is not None
                             else np.zeros_like(model.weights[k]))
                         for k in model.weights}
            adam_step(model.weights, grads, state, config.lr,
                      config.beta1, config.beta2, config.adam_eps)
            comps += (rep.Q, rep.R, rep.S, rep.L)
        comps /= steps
        history[epoch] = (epoch, *comps)
        log_rows.append(",".join([str(epoch)] + [repr(float(c)) for c in comps]))
        if verbose:
            print(f"epoch {epoch}: Q={comps[0]:.5f} R={comps[1]:.5f} "
                  f"S={comps[2]:.5f} L={comps[3]:.5f}", flush=True)
    if log_path is not None:
        with open(log_path, "w") as f:
            f.write("epoch,Q,R,S,L\n")
            f.write("\n".join(log_rows) + ("\n" if log_rows else ""))
    return Checkpoint(weights=model.weights, stats=stats, encoder_config=enc,
                      train_config=config, epoch=config.epochs,
                      loss_history=history, graph=graph)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def correct_field(ckpt: Checkpoint, gcm: GridField, attrs: AttributeField,
                  window: tuple[int, int] | None = None,
                  clamp: bool = True) -> GridField:
    """Bias-correct a model field with a trained checkpoint. Missing input
    days stay missing; valid outputs are clamped at zero when requested."""
    enc = ckpt.encoder_config
    if gcm.n_cells != ckpt.graph.indices.shape[0]:
        raise InvariantError("field grid does not match the checkpoint's graph")
    window = window or (0, gcm.values.shape[0])
    t0, t1 = window
    Tw = t1 - t0
    if Tw < 1 or t1 > gcm.values.shape[0]:
        raise InvariantError("correction window outside the field")
    pack = FeaturePack(gcm, attrs, ckpt.graph, ckpt.stats, enc)
    model = BiasCorrector(enc, ckpt.stats, pack.n_channels, weights=ckpt.weights)
    params = model.wrap(requires_grad=False)
    N = gcm.n_cells
    out = np.full((Tw, N), np.nan)
    # cell chunking bounds the peak size of attention intermediates
    chunk = max(1, int(4.0e6 / (enc.nodes * max(Tw, 1) * enc.model_dim)))
    for lo in range(0, N, chunk):
        cells = np.arange(lo, min(lo + chunk, N))
        batch = pack.batch(cells, t0, Tw)
        theta = transform.constrain(model.forward(params, batch))
        corr = transform.apply(theta, Tensor(batch.target_raw)).data
        out[:, cells] = corr.T
    if clamp:
        out = np.where(np.isfinite(out), transform.clamp_output(out), out)
    H, W = gcm.values.shape[1:]
    return GridField(start_date=gcm.start_date + t0, lats=gcm.lats, lons=gcm.lons,
                     values=out.reshape(Tw, H, W).astype(np.float32))


def composite_score_from_fields(sim: GridField, ref: GridField,
                                sim_window: tuple[int, int],
                                ref_window: tuple[int, int],
                                base_window: tuple[int, int],
                                region=None) -> float:
    """Mean over indices of the spatial mean absolute percentage bias of a
    simulated field against the reference; percentile thresholds come from
    the reference over the base window."""
    sim_idx = metrics.etccdi_all_cells(sim, sim_window, ref, base_window)
    ref_idx = metrics.etccdi_all_cells(ref, ref_window, ref, base_window)
    cells = (np.arange(ref.n_cells) if region is None
             else np.asarray(region, dtype=np.intp))
    per_index = []
    for name in metrics.INDEX_NAMES:
        pb = metrics.mean_percentage_bias(sim_idx[name][cells], ref_idx[name][cells])
        if np.any(np.isfinite(pb)):
            per_index.append(np.nanmean(np.abs(pb)))
    if not per_index:
        raise InvariantError("no index produced a defined percentage bias")
    return float(np.mean(per_index))


def validate_composite_score(ckpt: Checkpoint, ref: GridField, gcm: GridField,
                             attrs: AttributeField,
                             window: tuple[int, int] | None = None,
                             region=None,
                             base_window: tuple[int, int] | None = None) -> float:
    """Composite score of the checkpoint-corrected model field on the
    validation window/region."""
    _check_aligned(ref, gcm)
    cfg = ckpt.train_config
    window = window or cfg.val_window
    base_window = base_window or cfg.train_window
    if region is None:
        region = cfg.val_region
    corrected = correct_field(ckpt, gcm, attrs, window=window)
    t0, t1 = window
    return composite_score_from_fields(corrected, ref, (0, t1 - t0), window,
                                       base_window, region)


# ---------------------------------------------------------------------------
# hyperparameter selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CandidateResult:
    config: TrainConfig
    checkpoint: Checkpoint
    screening_pass: bool
    score: float
    order: int


def monotone_after_smoothing(q_series: np.ndarray, window: int = 5,
                             slack: float = 0.0) -> bool:
    """Screening rule: the moving average of the quantile loss must be
    non-increasing (within slack) across epochs."""
    q = np.asarray(q_series, dtype=np.float64)
    if q.size <= window:
        sm = np.array([q.mean()])
    else:
        kernel = np.ones(window) / window
        sm = np.convolve(q, kernel, mode="valid")
    return bool(np.all(np.diff(sm) <= slack))


def train_candidates(candidates, ref, gcm, attrs, graph,
                     encoder_config: EncoderConfig | None = None,
                     verbose: bool = False) -> list[CandidateResult]:
    results = []
    for order, cfg in enumerate(candidates):
        ckpt = train(ref, gcm, attrs, graph, cfg, encoder_config, verbose=verbose)
        passed = monotone_after_smoothing(ckpt.loss_history[:, 1])
        score = validate_composite_score(ckpt, ref, gcm, attrs)
        results.append(CandidateResult(config=cfg, checkpoint=ckpt,
                                       screening_pass=passed, score=score,
                                       order=order))
    return results


def select_best(results: list[CandidateResult]) -> CandidateResult:
    """Lowest validation score among screening survivors, ties by candidate
    order; when nothing survives screening, all candidates compete."""
    if not results:
        raise InvariantError("no candidates to select from")
    if len(results) == 1:
        return results[0]
    pool = [r for r in results if r.screening_pass] or list(results)
    return min(pool, key=lambda r: (r.score, r.order))


def select_hyperparameters(candidates, ref, gcm, attrs, graph,
                           encoder_config: EncoderConfig | None = None) -> Checkpoint:
    results = train_candidates(candidates, ref, gcm, attrs, graph, encoder_config)
    return select_best(results).checkpoint


# ---------------------------------------------------------------------------
# checkpoint container (DCKP)
# ---------------------------------------------------------------------------

def _config_json(ckpt: Checkpoint) -> str:
    enc = asdict(ckpt.encoder_config)
    tc = asdict(ckpt.train_config)
    for key in ("train_region", "val_region"):
        if tc[key] is not None:
            tc[key] = [int(c) for c in tc[key]]
    tc["train_window"] = list(tc["train_window"])
    tc["val_window"] = list(tc["val_window"])
    return json.dumps({"encoder": enc, "train": tc, "epoch": ckpt.epoch,
                       "graph_k": ckpt.graph.k}, sort_keys=True)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Single-file checkpoint: magic, version, a JSON config blob, then a
    length-prefixed list of named float64 arrays."""
    arrays: dict[str, np.ndarray] = {}
    arrays.update({f"w::{k}": v for k, v in ckpt.weights.items()})
    arrays.update(ckpt.stats.as_arrays())
    arrays["loss_history"] = ckpt.loss_history
    arrays["graph_indices"] = ckpt.graph.indices.astype(np.float64)
    arrays["graph_features"] = ckpt.graph.features.reshape(
        ckpt.graph.features.shape[0], -1)
    arrays["graph_mask"] = ckpt.graph.mask.astype(np.float64)
    arrays["graph_lats"] = ckpt.graph.lats
    arrays["graph_lons"] = ckpt.graph.lons
    blob = _config_json(ckpt).encode("utf-8")
    with open(path, "wb") as f:
        f.write(DCKP_MAGIC)
        f.write(struct.pack("<I", DCKP_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if f.read(4) != DCKP_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != DCKP_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<Q", f.read(8))
        meta = json.loads(f.read(blob_len).decode("utf-8"))
        (n_arrays,) = struct.unpack("<I", f.read(4))
        arrays = {}
        for _ in range(n_arrays):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(f.read(8 * n), dtype="<f8")
            if data.size != n:
                raise LengthError(f"{path}: truncated array {name}")
            arrays[name] = data.reshape(shape).copy()

    enc = EncoderConfig(**meta["encoder"])
    tc = dict(meta["train"])
    tc["train_window"] = tuple(tc["train_window"])
    tc["val_window"] = tuple(tc["val_window"])
    for key in ("train_region", "val_region"):
        if tc[key] is not None:
            tc[key] = tuple(tc[key])
    train_config = TrainConfig(**tc)
    stats = NormalizationStats.from_arrays(arrays)
    k = int(meta["graph_k"])
    n_cells = arrays["graph_indices"].shape[0]
    graph = NeighborGraph(
        lats=arrays["graph_lats"], lons=arrays["graph_lons"], k=k,
        indices=arrays["graph_indices"].astype(np.int32),
        features=arrays["graph_features"].reshape(n_cells, k, 4),
        mask=arrays["graph_mask"].astype(bool))
    weights = {name[3:]: arr for name, arr in arrays.items() if name.startswith("w::")}
    return Checkpoint(weights=weights, stats=stats, encoder_config=enc,
                      train_config=train_config, epoch=int(meta["epoch"]),
                      loss_history=arrays["loss_history"], graph=graph)
