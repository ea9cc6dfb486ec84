"""Gaussian-kernel maximum mean discrepancy between embedding samples.

Used to compare how stable two cloud encodings are: clouds are embedded
once per encoding, embeddings are split into fixed-size batches, and
MMD^2 is computed for every batch pair. Lower values mean the encoding
varies less across samples.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np
from numpy.typing import NDArray

from .descriptors import encode_cloud
from .io import load_cloud
from .nn import maxpool_points, mlp_forward


@dataclass(frozen=True)
class MmdConfig:
    """Kernel bandwidth (or the "median" sentinel) plus estimator choice."""

    sigma: float | str = "median"
    estimator: str = "biased"

    def __post_init__(self):
        if isinstance(self.sigma, str):
            if self.sigma != "median":
                raise ValueError(f"sigma must be positive or 'median', got {self.sigma!r}")
        elif not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.estimator not in ("biased", "unbiased"):
            raise ValueError(f"unknown estimator {self.estimator!r}")


@dataclass(frozen=True)
class MmdReport:
    """Per-batch-pair MMD^2 values for one encoding."""

    encoding: str
    pairs: tuple[tuple[int, int], ...]
    values: NDArray[np.float64]
    sigma: float

    @property
    def min(self) -> float:
        return float(self.values.min())

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    @property
    def max(self) -> float:
        return float(self.values.max())


def gaussian_kernel(x: NDArray, y: NDArray, sigma: float) -> float:
    """k(x, y) = exp(-|x - y|^2 / (2 sigma^2))."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    d2 = float(np.einsum("i,i->", x - y, x - y))
    return float(np.exp(-d2 / (2.0 * sigma * sigma)))


def _cross_sqdist(a: NDArray, b: NDArray) -> NDArray[np.float64]:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def median_heuristic(x: NDArray, y: NDArray) -> float:
    """Median pairwise distance over the pooled sample (self-pairs excluded).

    Falls back to 1.0 when the median is zero (all points coincide).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    pooled = np.concatenate((x, y), axis=0)
    n = pooled.shape[0]
    if n < 2:
        raise ValueError("need at least 2 pooled samples")
    d2 = _cross_sqdist(pooled, pooled)
    iu = np.triu_indices(n, k=1)
    med = float(np.median(np.sqrt(d2[iu])))
    return med if med > 0 else 1.0


def mmd2(x: NDArray, y: NDArray, config: MmdConfig = MmdConfig()) -> float:
    """Squared MMD between two samples under a Gaussian kernel.

    The biased estimator averages kernel values over all pairs including
    the diagonal and is exactly zero for identical samples; the unbiased
    one excludes i == j in the within-sample terms.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    m, n = x.shape[0], y.shape[0]
    minimum = 1 if config.estimator == "biased" else 2
    if m < minimum or n < minimum:
        raise ValueError(f"{config.estimator} estimator needs >= {minimum} samples per side")

    sigma = median_heuristic(x, y) if config.sigma == "median" else float(config.sigma)
    gamma = -1.0 / (2.0 * sigma * sigma)
    kxx = np.exp(gamma * _cross_sqdist(x, x))
    kyy = np.exp(gamma * _cross_sqdist(y, y))
    kxy = np.exp(gamma * _cross_sqdist(x, y))

    if config.estimator == "biased":
        return float(kxx.mean() + kyy.mean() - 2.0 * kxy.mean())
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


def batch_pair_report(
    encoding: str,
    embeddings: NDArray[np.float64],
    batch_size: int,
    sigma: float,
    estimator: str = "biased",
) -> MmdReport:
    """MMD^2 for every pair of consecutive embedding batches."""
    n_batches = embeddings.shape[0] // batch_size
    if n_batches < 2:
        raise ValueError(
            f"{embeddings.shape[0]} embeddings form {n_batches} batches of "
            f"{batch_size}; need at least 2"
        )
    config = MmdConfig(sigma=sigma, estimator=estimator)
    batches = [
        embeddings[i * batch_size : (i + 1) * batch_size] for i in range(n_batches)
    ]
    pairs = tuple(combinations(range(n_batches), 2))
    values = np.array([mmd2(batches[a], batches[b], config) for a, b in pairs])
    return MmdReport(encoding=encoding, pairs=pairs, values=values, sigma=sigma)


def pooled_embedding(encoder, per_point_features: NDArray[np.float64]) -> NDArray[np.float64]:
    """One vector per cloud: encode every point, then max-pool."""
    return maxpool_points(mlp_forward(encoder, per_point_features))


def stability_study(
    manifest,
    encoder_coord,
    encoder_geo,
    batch_size: int = 32,
    config: MmdConfig = MmdConfig(),
    n_desc: int = 10,
) -> tuple[MmdReport, MmdReport]:
    """Compare encoding stability across the manifest's clouds.

    Every source and target cloud is embedded twice: once from raw
    coordinates and once from geometric descriptors, through encoders of
    identical architecture. Embeddings are batched in manifest order and
    MMD^2 is computed for every batch pair. One bandwidth, taken from the
    coordinate embeddings by the median heuristic unless given
    explicitly, is shared by both encodings so neither is favored.

    Returns (coordinate report, geometric report).
    """
    paths = manifest.cloud_paths()
    if len(paths) < 2 * batch_size:
        raise ValueError(
            f"{len(paths)} clouds form fewer than 2 batches of {batch_size}"
        )
    coord_emb = []
    geo_emb = []
    for path in paths:
        cloud = load_cloud(path)
        coord_emb.append(pooled_embedding(encoder_coord, cloud))
        geo_emb.append(pooled_embedding(encoder_geo, encode_cloud(cloud, n_desc).vectors))
    coord_emb = np.array(coord_emb)
    geo_emb = np.array(geo_emb)

    if config.sigma == "median":
        # pooled coordinate embeddings, each exactly once
        sigma = median_heuristic(coord_emb[:1], coord_emb[1:])
    else:
        sigma = float(config.sigma)
    coord_report = batch_pair_report("coordinate", coord_emb, batch_size, sigma, config.estimator)
    geo_report = batch_pair_report("geometric", geo_emb, batch_size, sigma, config.estimator)
    return coord_report, geo_report
