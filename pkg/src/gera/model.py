"""The registration network, its losses, training loop, and evaluation.

Architecture: a shared MLP encodes each cloud's per-point descriptors,
max-pooling collapses them to one global vector per cloud, and a decoder
maps [point coordinates, pooled source vector, pooled target vector] to
one displacement per source point. The blended loss combines a
correspondence RMSE with a correspondence-free Chamfer distance computed
over descriptor rows; the blend weight alpha selects the training
variant (alpha = 0 is the coordinate-only one).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .descriptors import descriptors_from_neighbors, edge_index_pairs, encode_cloud
from .io import DatasetManifest, DescriptorSet, Points, RegistrationConfig, as_points, pair_count
from .neighbors import knn_fast
from .nn import (
    Mlp,
    Tape,
    adam_init,
    adam_step,
    load_network,
    maxpool_points,
    mlp_forward,
    mlp_init,
    save_network,
)

DisplacementField = NDArray[np.float64]  # (M, 3), mm


class TrainingDivergence(RuntimeError):
    """Raised when the loss goes non-finite; parameters are still finite."""


@dataclass
class GeraModel:
    encoder: Mlp
    decoder: Mlp
    config: RegistrationConfig

    def __post_init__(self):
        d = self.config.descriptor_dim
        if self.encoder.in_width != d:
            raise ValueError(
                f"encoder input width {self.encoder.in_width} != C(n_desc,2) = {d}"
            )
        feat = self.encoder.out_width
        if self.decoder.in_width != 3 + 2 * feat:
            raise ValueError(
                f"decoder input width {self.decoder.in_width} != 3 + 2*{feat}"
            )
        if self.decoder.out_width != 3:
            raise ValueError(f"decoder output width {self.decoder.out_width} != 3")

    @property
    def feature_width(self) -> int:
        return self.encoder.out_width


def build_model(config: RegistrationConfig) -> GeraModel:
    """Seeded He-uniform initialization of encoder and decoder."""
    rng = np.random.default_rng(config.seed)
    encoder = mlp_init((config.descriptor_dim, *config.encoder_widths), rng, final_relu=True)
    decoder = mlp_init(
        (3 + 2 * config.encoder_widths[-1], *config.decoder_widths, 3), rng
    )
    return GeraModel(encoder=encoder, decoder=decoder, config=config)


def model_params(model: GeraModel) -> list[NDArray[np.float64]]:
    """Flat parameter list: encoder then decoder, weights before biases."""
    params = []
    for layer in model.encoder.layers + model.decoder.layers:
        params.append(layer.weights)
        params.append(layer.biases)
    return params


def save_model(model: GeraModel, path: str | Path) -> None:
    save_network(path, model.encoder, model.decoder)


def n_desc_from_dim(d: int) -> int:
    n = int(round((1 + math.isqrt(1 + 8 * d)) / 2))
    if pair_count(n) != d:
        raise ValueError(f"{d} is not a pairwise-distance count C(n,2)")
    return n


def load_model(path: str | Path, config: RegistrationConfig | None = None) -> GeraModel:
    """Rebuild a model from a checkpoint; n_desc and widths come from the
    stored layer shapes."""
    encoder, decoder = load_network(path)
    n_desc = n_desc_from_dim(encoder.in_width)
    base = config or RegistrationConfig()
    cfg = RegistrationConfig(
        n_desc=n_desc,
        alpha_loss=base.alpha_loss,
        epsilon_mode=base.epsilon_mode,
        seed=base.seed,
        encoder_widths=tuple(l.out_width for l in encoder.layers),
        decoder_widths=tuple(l.out_width for l in decoder.layers[:-1]),
    )
    return GeraModel(encoder=encoder, decoder=decoder, config=cfg)


@dataclass
class GeraTape:
    """Recorded forward pass of the full network for one cloud pair."""

    enc_src: Tape
    enc_tgt: Tape
    dec: Tape
    rows: int
    feat: int


def _check_pair(src: Points, tgt: Points, desc_src: DescriptorSet, desc_tgt: DescriptorSet, model: GeraModel) -> None:
    if desc_src.count != src.shape[0] or desc_tgt.count != tgt.shape[0]:
        raise ValueError("descriptor row counts do not match the clouds")
    if desc_src.dim != model.encoder.in_width or desc_tgt.dim != model.encoder.in_width:
        raise ValueError(
            f"descriptor width {desc_src.dim} does not match encoder input "
            f"{model.encoder.in_width}"
        )


def _forward(
    src: Points,
    tgt: Points,
    desc_src: DescriptorSet,
    desc_tgt: DescriptorSet,
    model: GeraModel,
    record: bool = False,
) -> tuple[DisplacementField, GeraTape | None]:
    src = as_points(src, "source cloud")
    tgt = as_points(tgt, "target cloud")
    _check_pair(src, tgt, desc_src, desc_tgt, model)

    t_src = Tape() if record else None
    t_tgt = Tape() if record else None
    t_dec = Tape() if record else None

    g_src = maxpool_points(mlp_forward(model.encoder, desc_src.vectors, t_src), t_src)
    g_tgt = maxpool_points(mlp_forward(model.encoder, desc_tgt.vectors, t_tgt), t_tgt)

    m = src.shape[0]
    pooled = np.concatenate((g_src, g_tgt))
    packed = np.concatenate((src, np.broadcast_to(pooled, (m, pooled.shape[0]))), axis=1)
    pred = mlp_forward(model.decoder, packed, t_dec)

    tape = None
    if record:
        tape = GeraTape(
            enc_src=t_src, enc_tgt=t_tgt, dec=t_dec, rows=m, feat=model.feature_width
        )
    return pred, tape


def gera_forward(
    src: Points,
    tgt: Points,
    desc_src: DescriptorSet,
    desc_tgt: DescriptorSet,
    model: GeraModel,
) -> DisplacementField:
    """Predict one displacement per source point."""
    pred, _ = _forward(src, tgt, desc_src, desc_tgt, model)
    return pred


def gera_forward_training(src, tgt, desc_src, desc_tgt, model) -> tuple[DisplacementField, GeraTape]:
    pred, tape = _forward(src, tgt, desc_src, desc_tgt, model, record=True)
    return pred, tape


def backward(model: GeraModel, tape: GeraTape, dfield: NDArray[np.float64]) -> list[NDArray[np.float64]]:
    """Gradients of a scalar loss w.r.t. model_params(model), given the
    loss gradient w.r.t. the predicted displacement field."""
    dpacked, dec_grads = tape.dec.backward(dfield)
    f = tape.feat
    d_gsrc = dpacked[:, 3 : 3 + f].sum(axis=0)
    d_gtgt = dpacked[:, 3 + f :].sum(axis=0)
    _, enc_grads_src = tape.enc_src.backward(d_gsrc)
    _, enc_grads_tgt = tape.enc_tgt.backward(d_gtgt)

    grads = []
    for layer in model.encoder.layers:
        dw = np.zeros_like(layer.weights)
        db = np.zeros_like(layer.biases)
        for source in (enc_grads_src, enc_grads_tgt):
            if layer in source:
                dw += source[layer][0]
                db += source[layer][1]
        grads.append(dw)
        grads.append(db)
    for layer in model.decoder.layers:
        dw, db = dec_grads[layer]
        grads.append(dw)
        grads.append(db)
    return grads


def apply_displacement(
    src: Points, displacement: DisplacementField, config: RegistrationConfig
) -> Points:
    """x' = x + d + epsilon(x); the only defined epsilon mode is zero."""
    src = as_points(src, "source cloud")
    disp = np.asarray(displacement, dtype=np.float64)
    if disp.shape != src.shape:
        raise ValueError(f"displacement shape {disp.shape} != cloud shape {src.shape}")
    if config.epsilon_mode != "zero":
        raise ValueError(f"unknown epsilon_mode {config.epsilon_mode!r}")
    return src + disp


def loss_xyz(deformed: Points, tgt: Points) -> float:
    """Root mean square residual over matched rows (mm)."""
    deformed = as_points(deformed, "deformed cloud")
    tgt = as_points(tgt, "target cloud")
    if deformed.shape != tgt.shape:
        raise ValueError(f"cloud shapes differ: {deformed.shape} vs {tgt.shape}")
    resid = deformed - tgt
    return float(np.sqrt(np.einsum("ij,ij->", resid, resid) / deformed.shape[0]))


def loss_xyz_grad(deformed: Points, tgt: Points) -> tuple[float, NDArray[np.float64]]:
    value = loss_xyz(deformed, tgt)
    if value == 0.0:
        return value, np.zeros_like(np.asarray(deformed, dtype=np.float64))
    grad = (np.asarray(deformed, dtype=np.float64) - tgt) / (deformed.shape[0] * value)
    return value, grad


def _argmin_cross(a: NDArray, b: NDArray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise and column-wise nearest neighbors of a against b.

    The distance matrix uses the expansion |a|^2 + |b|^2 - 2ab for speed;
    matched values are always recomputed exactly by the callers.
    """
    d2 = (
        np.einsum("ij,ij->i", a, a)[:, None]
        + np.einsum("ij,ij->i", b, b)[None, :]
        - 2.0 * (a @ b.T)
    )
    return d2.argmin(axis=1), d2.argmin(axis=0)


def _matched_sqdist(a: NDArray, b: NDArray) -> NDArray[np.float64]:
    diff = a - b
    return np.einsum("ij,ij->i", diff, diff)


def _geo_descriptor_state(cloud: Points, n_desc: int):
    """Descriptors plus the vertex index table needed for gradients."""
    pts = as_points(cloud)
    if pts.shape[0] <= n_desc:
        raise ValueError(f"cloud of {pts.shape[0]} points is too small for n_desc = {n_desc}")
    neighbors = knn_fast(pts, n_desc - 1)
    verts = np.concatenate(
        (np.arange(pts.shape[0], dtype=np.int64)[:, None], neighbors), axis=1
    )
    vectors = descriptors_from_neighbors(pts, neighbors, n_desc)
    return vectors, verts


def loss_geo(deformed: Points, tgt: Points, n_desc: int) -> float:
    """Symmetric Chamfer distance over descriptor rows (sum form).

    Both clouds are re-encoded, then each row is matched to its nearest
    row of the other set and the squared descriptor distances are summed
    over both directions.
    """
    desc_a, _ = _geo_descriptor_state(deformed, n_desc)
    desc_b, _ = _geo_descriptor_state(tgt, n_desc)
    fwd, bwd = _argmin_cross(desc_a, desc_b)
    return float(
        _matched_sqdist(desc_a, desc_b[fwd]).sum()
        + _matched_sqdist(desc_b, desc_a[bwd]).sum()
    )


def loss_geo_grad(
    deformed: Points,
    tgt: Points,
    n_desc: int,
    tgt_descriptors: NDArray[np.float64] | None = None,
) -> tuple[float, NDArray[np.float64]]:
    """Value plus gradient w.r.t. the deformed coordinates.

    Neighbor graphs and nearest-row matches are treated as locally
    constant; the gradient flows through the edge lengths. The target's
    descriptors never change during training, so callers may pass them in
    to skip re-encoding.
    """
    pts = as_points(deformed, "deformed cloud")
    desc_a, verts = _geo_descriptor_state(pts, n_desc)
    if tgt_descriptors is None:
        desc_b, _ = _geo_descriptor_state(tgt, n_desc)
    else:
        desc_b = tgt_descriptors
    fwd, bwd = _argmin_cross(desc_a, desc_b)

    value = float(
        _matched_sqdist(desc_a, desc_b[fwd]).sum()
        + _matched_sqdist(desc_b, desc_a[bwd]).sum()
    )

    # d(loss)/d(desc_a): 2(a_i - b_match) from the forward direction plus
    # 2(a_i - b_j) for every target row j matched to i in the reverse one
    ddesc = 2.0 * (desc_a - desc_b[fwd])
    np.add.at(ddesc, bwd, 2.0 * (desc_a[bwd] - desc_b))

    a_pos, b_pos = edge_index_pairs(n_desc)
    coords = pts[verts]  # (M, n, 3)
    diff = coords[:, a_pos, :] - coords[:, b_pos, :]  # (M, d, 3)
    lengths = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    safe = np.where(lengths > 0, lengths, 1.0)
    units = diff / safe[:, :, None]
    units[lengths == 0] = 0.0  # coincident points: zero subgradient

    contrib = (ddesc[:, :, None] * units).reshape(-1, 3)
    idx = np.concatenate((verts[:, a_pos].ravel(), verts[:, b_pos].ravel()))
    signed = np.concatenate((contrib, -contrib))
    grad = np.stack(
        [np.bincount(idx, weights=signed[:, c], minlength=pts.shape[0]) for c in range(3)],
        axis=1,
    )
    return value, grad


def loss_total(deformed: Points, tgt: Points, config: RegistrationConfig) -> float:
    """alpha * geometric loss + (1 - alpha) * coordinate RMSE.

    The endpoints are exact: alpha = 0 skips the geometric branch
    entirely and alpha = 1 skips the coordinate branch.
    """
    alpha = config.alpha_loss
    if alpha == 0.0:
        return loss_xyz(deformed, tgt)
    if alpha == 1.0:
        return loss_geo(deformed, tgt, config.n_desc)
    return alpha * loss_geo(deformed, tgt, config.n_desc) + (1.0 - alpha) * loss_xyz(
        deformed, tgt
    )


def loss_total_grad(
    deformed: Points,
    tgt: Points,
    config: RegistrationConfig,
    tgt_descriptors: NDArray[np.float64] | None = None,
) -> tuple[float, NDArray[np.float64]]:
    alpha = config.alpha_loss
    if alpha == 0.0:
        return loss_xyz_grad(deformed, tgt)
    if alpha == 1.0:
        return loss_geo_grad(deformed, tgt, config.n_desc, tgt_descriptors)
    geo_val, geo_grad = loss_geo_grad(deformed, tgt, config.n_desc, tgt_descriptors)
    xyz_val, xyz_grad = loss_xyz_grad(deformed, tgt)
    return alpha * geo_val + (1.0 - alpha) * xyz_val, alpha * geo_grad + (1.0 - alpha) * xyz_grad


def chamfer_distance(a: Points, b: Points) -> float:
    """Symmetric coordinate Chamfer distance in mm.

    Mean-over-points convention: the two directional means of nearest
    neighbor distances are averaged.
    """
    a = as_points(a)
    b = as_points(b)
    fwd, bwd = _argmin_cross(a, b)
    d_fwd = np.sqrt(_matched_sqdist(a, b[fwd]))
    d_bwd = np.sqrt(_matched_sqdist(b, a[bwd]))
    return float(0.5 * (d_fwd.mean() + d_bwd.mean()))


class DescriptorStore:
    """Per-cloud descriptor lookup: disk cache first, else encode once.

    Tracks how many encodings actually ran so the offline-construction
    property is observable.
    """

    def __init__(self, manifest: DatasetManifest, n_desc: int, cache_dir: Path | None = None):
        self.manifest = manifest
        self.n_desc = n_desc
        self.cache_dir = cache_dir if cache_dir is not None else manifest.root / "desc"
        self._memo: dict[str, DescriptorSet] = {}
        self._clouds: dict[str, Points] = {}
        self.encodings_run = 0

    def cloud(self, relpath: str) -> Points:
        if relpath not in self._clouds:
            from .io import load_cloud

            self._clouds[relpath] = load_cloud(self.manifest.resolve(relpath))
        return self._clouds[relpath]

    def descriptors(self, relpath: str) -> DescriptorSet:
        if relpath in self._memo:
            return self._memo[relpath]
        desc = self._load_cached(relpath)
        if desc is None:
            desc = encode_cloud(self.cloud(relpath), self.n_desc)
            self.encodings_run += 1
        self._memo[relpath] = desc
        return desc

    def _load_cached(self, relpath: str) -> DescriptorSet | None:
        from .io import load_descriptors

        path = self.cache_dir / (Path(relpath).name + f".n{self.n_desc}.gdesc")
        if not path.exists():
            return None
        try:
            desc = load_descriptors(path)
        except (OSError, ValueError):
            return None
        if desc.n_desc != self.n_desc or desc.count != self.cloud(relpath).shape[0]:
            return None
        return desc


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_rmse: float
    seconds: float


@dataclass
class TrainResult:
    model: GeraModel
    history: list[EpochStats]
    best_val_rmse: float
    best_params: list[NDArray[np.float64]] = field(repr=False, default_factory=list)


def _pair_rmse(store: DescriptorStore, rec, model: GeraModel) -> float:
    src = store.cloud(rec.source)
    tgt = store.cloud(rec.target)
    pred = gera_forward(src, tgt, store.descriptors(rec.source), store.descriptors(rec.target), model)
    if not np.isfinite(pred).all():
        return float("inf")
    return loss_xyz(apply_displacement(src, pred, model.config), tgt)


def validation_rmse(store: DescriptorStore, records, model: GeraModel) -> float:
    if not records:
        return float("nan")
    return float(np.mean([_pair_rmse(store, rec, model) for rec in records]))


def train(
    manifest: DatasetManifest,
    model: GeraModel,
    epochs: int,
    lr: float,
    seed: int,
    store: DescriptorStore | None = None,
) -> TrainResult:
    """Adam training at batch size one over the train split.

    Per-epoch history records the mean train loss and validation RMSE;
    the parameters with the best validation RMSE are kept. Fully seeded:
    identical inputs reproduce identical parameters.
    """
    train_recs = manifest.split("train")
    if not train_recs:
        raise ValueError("empty train split")
    val_recs = manifest.split("val")
    if store is None:
        store = DescriptorStore(manifest, model.config.n_desc)

    params = model_params(model)
    state = adam_init(params, lr)
    rng = np.random.default_rng(seed)
    history: list[EpochStats] = []
    best_rmse = float("inf")
    best_params = [p.copy() for p in params]

    for epoch in range(epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_recs))
        losses = np.empty(len(train_recs))
        for pos, rec_idx in enumerate(order):
            rec = train_recs[rec_idx]
            src = store.cloud(rec.source)
            tgt = store.cloud(rec.target)
            desc_tgt = store.descriptors(rec.target)
            pred, tape = gera_forward_training(
                src, tgt, store.descriptors(rec.source), desc_tgt, model
            )
            if not np.isfinite(pred).all():
                raise TrainingDivergence(
                    f"non-finite prediction at epoch {epoch}, pair {rec.source}"
                )
            deformed = apply_displacement(src, pred, model.config)
            # the cached target descriptors double as the geometric loss
            # reference when n_desc matches the training config
            tgt_desc_vecs = desc_tgt.vectors if desc_tgt.n_desc == model.config.n_desc else None
            value, dfield = loss_total_grad(deformed, tgt, model.config, tgt_desc_vecs)
            if not math.isfinite(value):
                raise TrainingDivergence(
                    f"non-finite loss {value} at epoch {epoch}, pair {rec.source}"
                )
            grads = backward(model, tape, dfield)
            adam_step(params, grads, state)
            losses[pos] = value
        val_rmse = validation_rmse(store, val_recs, model)
        history.append(
            EpochStats(
                epoch=epoch,
                train_loss=float(losses.mean()),
                val_rmse=val_rmse,
                seconds=time.perf_counter() - t0,
            )
        )
        if val_recs and val_rmse < best_rmse:
            best_rmse = val_rmse
            best_params = [p.copy() for p in params]

    if val_recs:
        for p, best in zip(params, best_params):
            p[...] = best
    else:
        best_rmse = float("nan")
    return TrainResult(model=model, history=history, best_val_rmse=best_rmse, best_params=best_params)


@dataclass(frozen=True)
class EvalReport:
    rmse_mm: float
    cd_mm: float
    it_ms: float
    tt_s: float

    def __post_init__(self):
        for name in ("rmse_mm", "cd_mm", "it_ms", "tt_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def evaluate(
    manifest: DatasetManifest,
    model: GeraModel,
    split: str = "test",
    store: DescriptorStore | None = None,
    timing_runs: int = 20,
    train_epoch_seconds: float = 0.0,
) -> EvalReport:
    """Mean RMSE and coordinate Chamfer distance over a split, plus the
    median per-cloud inference time (descriptor lookup + forward pass,
    no file IO)."""
    records = manifest.split(split)
    if not records:
        raise ValueError(f"empty {split} split")
    if store is None:
        store = DescriptorStore(manifest, model.config.n_desc)

    rmses = []
    chamfers = []
    for rec in records:
        src = store.cloud(rec.source)
        tgt = store.cloud(rec.target)
        pred = gera_forward(
            src, tgt, store.descriptors(rec.source), store.descriptors(rec.target), model
        )
        deformed = apply_displacement(src, pred, model.config)
        rmses.append(loss_xyz(deformed, tgt))
        chamfers.append(chamfer_distance(deformed, tgt))

    samples = []
    for _ in range(max(1, timing_runs)):
        for rec in records:
            t0 = time.perf_counter()
            src = store.cloud(rec.source)
            tgt = store.cloud(rec.target)
            gera_forward(
                src, tgt, store.descriptors(rec.source), store.descriptors(rec.target), model
            )
            samples.append(time.perf_counter() - t0)

    return EvalReport(
        rmse_mm=float(np.mean(rmses)),
        cd_mm=float(np.mean(chamfers)),
        it_ms=float(np.median(samples) * 1e3),
        tt_s=float(train_epoch_seconds),
    )
