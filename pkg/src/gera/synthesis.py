"""Synthetic registration pairs: TPS-deformed clouds with bounded noise.

A base cloud is downsampled, warped by a thin plate spline whose control
displacements are rescaled so the peak point displacement hits the
requested magnitude, then per-point noise with magnitude drawn from a
range is added to the target. Ground truth is stored separately from the
noise, and every generator draws all randomness from an explicit seed.

Base shapes are procedural stand-ins for organ scans at desk scale:
ellipsoids, spheres, and bent tubes, all in millimeters.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .io import (
    DatasetManifest,
    ManifestRecord,
    Points,
    as_points,
    save_cloud,
    save_displacements,
    save_manifest,
)
from .tps import tps_apply, tps_fit

BASE_KINDS = ("ellipsoid", "sphere", "tube")


@dataclass(frozen=True)
class PairRecord:
    """An in-memory registration pair with its generation provenance.

    target == (source + gt) + noise holds bit-exactly by construction.
    """

    source: Points
    target: Points
    gt: NDArray[np.float64]
    noise: NDArray[np.float64]
    deform_mm: float
    noise_mm: tuple[float, float]
    seed: int


def _unit_rows(rng: np.random.Generator, n: int) -> NDArray[np.float64]:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def make_base_cloud(kind: str, n_points: int, seed: int) -> Points:
    """Procedural organ-scale surface cloud, centered at the origin."""
    rng = np.random.default_rng(seed)
    if kind == "ellipsoid":
        radii = rng.uniform(28.0, 55.0, size=3)
        pts = _unit_rows(rng, n_points) * radii
    elif kind == "sphere":
        radius = rng.uniform(30.0, 55.0)
        pts = _unit_rows(rng, n_points) * radius
    elif kind == "tube":
        # bent tube: quadratic arc centerline with a circular cross-section
        length = rng.uniform(120.0, 180.0)
        radius = rng.uniform(8.0, 14.0)
        bend = rng.uniform(0.15, 0.45) * length
        t = rng.uniform(0.0, 1.0, size=n_points)
        theta = rng.uniform(0.0, 2 * np.pi, size=n_points)
        center = np.stack(
            (
                (t - 0.5) * length,
                bend * 4.0 * t * (1.0 - t),
                np.zeros_like(t),
            ),
            axis=1,
        )
        # cross-section frame: normal/binormal of the arc, approximated
        tangent = np.stack(
            (np.full_like(t, length), bend * (4.0 - 8.0 * t), np.zeros_like(t)), axis=1
        )
        tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
        normal = np.stack((-tangent[:, 1], tangent[:, 0], np.zeros_like(t)), axis=1)
        binormal = np.array([0.0, 0.0, 1.0])
        pts = center + radius * (
            np.cos(theta)[:, None] * normal + np.sin(theta)[:, None] * binormal
        )
    else:
        raise ValueError(f"unknown base kind {kind!r}, expected one of {BASE_KINDS}")
    return pts - pts.mean(axis=0)


def downsample(cloud: Points, target_count: int = 1024, seed: int = 0) -> Points:
    """Seeded uniform subset without replacement, original order preserved."""
    pts = as_points(cloud)
    m = pts.shape[0]
    if m < target_count:
        raise ValueError(f"cannot downsample {m} points to {target_count}")
    if m == target_count:
        return pts.copy()
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(m, size=target_count, replace=False))
    return pts[keep]


def farthest_point_indices(cloud: Points, count: int, start: int = 0) -> NDArray[np.int64]:
    """Greedy farthest-point sampling; ties go to the lowest index."""
    pts = as_points(cloud)
    m = pts.shape[0]
    if not 1 <= count <= m:
        raise ValueError(f"cannot sample {count} of {m} points")
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = start
    d2 = np.einsum("ij,ij->i", pts - pts[start], pts - pts[start])
    for i in range(1, count):
        nxt = int(np.argmax(d2))
        chosen[i] = nxt
        cand = np.einsum("ij,ij->i", pts - pts[nxt], pts - pts[nxt])
        np.minimum(d2, cand, out=d2)
    return chosen


def generate_pair(
    base: Points,
    deform_mag: float,
    noise_range: tuple[float, float],
    seed: int,
    control_count: int = 8,
) -> PairRecord:
    """Deform a base cloud so the peak displacement matches deform_mag.

    Control points are farthest-point sampled, displaced along random
    directions, and rescaled until the maximum point displacement is
    within 5% of the requested magnitude (the spline is linear in the
    control displacements, so one rescale normally lands exactly).
    """
    pts = as_points(base)
    if deform_mag <= 0:
        raise ValueError(f"deform_mag must be positive, got {deform_mag}")
    lo, hi = float(noise_range[0]), float(noise_range[1])
    if lo < 0 or hi < lo:
        raise ValueError(f"bad noise range {noise_range}")
    if np.ptp(pts, axis=0).max() == 0:
        raise ValueError("degenerate base cloud: all points coincide")

    rng = np.random.default_rng(seed)
    start = int(rng.integers(pts.shape[0]))
    ctrl_idx = farthest_point_indices(pts, control_count, start=start)
    control_src = pts[ctrl_idx]
    delta = _unit_rows(rng, control_count) * deform_mag

    gt = None
    for _ in range(10):
        model = tps_fit(control_src, control_src + delta)
        gt = tps_apply(model, pts) - pts
        peak = np.linalg.norm(gt, axis=1).max()
        if abs(peak - deform_mag) <= 0.05 * deform_mag:
            break
        delta *= deform_mag / peak
    else:
        raise RuntimeError("deformation magnitude did not converge")

    magnitudes = rng.uniform(lo, hi, size=pts.shape[0])
    noise = _unit_rows(rng, pts.shape[0]) * magnitudes[:, None]
    target = (pts + gt) + noise
    return PairRecord(
        source=pts,
        target=target,
        gt=gt,
        noise=noise,
        deform_mm=float(deform_mag),
        noise_mm=(lo, hi),
        seed=int(seed),
    )


def split_counts(n_bases: int, ratio: tuple[int, int, int]) -> tuple[int, int, int]:
    """Train/val/test sizes; val and test are never empty."""
    if n_bases < 3:
        raise ValueError(f"need at least 3 base clouds, got {n_bases}")
    total = sum(ratio)
    n_val = max(1, round(n_bases * ratio[1] / total))
    n_test = max(1, round(n_bases * ratio[2] / total))
    n_train = n_bases - n_val - n_test
    if n_train < 1:
        raise ValueError(f"{n_bases} bases cannot populate all three splits")
    return n_train, n_val, n_test


def build_dataset(
    bases: list[Points],
    out_dir: str | Path,
    split_ratio: tuple[int, int, int] = (8, 1, 1),
    deform_mag: float = 19.0,
    noise_range: tuple[float, float] = (1.0, 3.0),
    points: int = 1024,
    seed: int = 0,
    reps: int = 1,
) -> DatasetManifest:
    """Write one generated pair per base per repetition plus a manifest.

    Splits are assigned by a seeded shuffle of the bases, so no base
    contributes pairs to more than one split.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n = len(bases)
    n_train, n_val, _ = split_counts(n, split_ratio)
    order = rng.permutation(n)
    split_of = {}
    for pos, base_idx in enumerate(order):
        split_of[int(base_idx)] = (
            "train" if pos < n_train else "val" if pos < n_train + n_val else "test"
        )

    down_seeds = rng.integers(0, 2**63 - 1, size=n)
    pair_seeds = rng.integers(0, 2**63 - 1, size=(n, reps))

    records = []
    pair_id = 0
    for base_idx, base in enumerate(bases):
        cloud = base if base.shape[0] <= points else downsample(
            base, points, seed=int(down_seeds[base_idx])
        )
        for rep in range(reps):
            pair = generate_pair(
                cloud, deform_mag, noise_range, seed=int(pair_seeds[base_idx, rep])
            )
            stem = f"pair{pair_id:04d}"
            save_cloud(pair.source, out_dir / f"{stem}.src.xyz")
            save_cloud(pair.target, out_dir / f"{stem}.tgt.xyz")
            save_displacements(pair.gt, out_dir / f"{stem}.gt.xyz")
            records.append(
                ManifestRecord(
                    source=f"{stem}.src.xyz",
                    target=f"{stem}.tgt.xyz",
                    gt=f"{stem}.gt.xyz",
                    deform_mm=pair.deform_mm,
                    noise_mm=pair.noise_mm,
                    seed=pair.seed,
                    split=split_of[base_idx],
                )
            )
            pair_id += 1

    manifest = DatasetManifest(records=records, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
