import numpy as np
import pytest

from gera.io import load_cloud, load_displacements
from gera.synthesis import (
    build_dataset,
    downsample,
    farthest_point_indices,
    generate_pair,
    make_base_cloud,
    split_counts,
)


@pytest.fixture(scope="module")
def base():
    return downsample(make_base_cloud("ellipsoid", 4000, seed=3), 1024, seed=3)


def test_deformation_and_noise_magnitudes(base):
    pair = generate_pair(base, 19.0, (1.0, 3.0), seed=5)
    gt_norm = np.linalg.norm(pair.gt, axis=1)
    assert 18.05 <= gt_norm.max() <= 19.95
    noise_norm = np.linalg.norm(pair.noise, axis=1)
    assert noise_norm.min() >= 1.0 and noise_norm.max() <= 3.0


def test_tiny_deformation_limit(base):
    pair = generate_pair(base, 1e-6, (1.0, 3.0), seed=6)
    # target is essentially base + noise
    assert np.abs(pair.target - base - pair.noise).max() <= 1e-5


def test_pair_determinism(base):
    a = generate_pair(base, 19.0, (1.0, 3.0), seed=7)
    b = generate_pair(base, 19.0, (1.0, 3.0), seed=7)
    np.testing.assert_array_equal(a.target, b.target)
    np.testing.assert_array_equal(a.gt, b.gt)
    c = generate_pair(base, 19.0, (1.0, 3.0), seed=8)
    assert not np.array_equal(a.target, c.target)


def test_ground_truth_consistency(base):
    pair = generate_pair(base, 19.0, (1.0, 3.0), seed=9)
    np.testing.assert_array_equal(pair.target, (pair.source + pair.gt) + pair.noise)


def test_degenerate_base_rejected():
    with pytest.raises(ValueError, match="degenerate"):
        generate_pair(np.zeros((100, 3)), 19.0, (1.0, 3.0), seed=0)


def test_bad_magnitudes_rejected(base):
    with pytest.raises(ValueError, match="positive"):
        generate_pair(base, 0.0, (1.0, 3.0), seed=0)
    with pytest.raises(ValueError, match="noise"):
        generate_pair(base, 19.0, (3.0, 1.0), seed=0)


def test_downsample_subset_and_count():
    rng = np.random.default_rng(0)
    cloud = rng.normal(size=(10_000, 3))
    down = downsample(cloud, 1024, seed=1)
    assert down.shape == (1024, 3)
    rows = {tuple(r) for r in cloud}
    assert all(tuple(r) in rows for r in down)


def test_downsample_identity_when_exact():
    rng = np.random.default_rng(1)
    cloud = rng.normal(size=(64, 3))
    np.testing.assert_array_equal(downsample(cloud, 64, seed=5), cloud)


def test_downsample_deterministic():
    rng = np.random.default_rng(2)
    cloud = rng.normal(size=(500, 3))
    np.testing.assert_array_equal(downsample(cloud, 100, seed=3), downsample(cloud, 100, seed=3))


def test_downsample_too_small():
    with pytest.raises(ValueError, match="downsample"):
        downsample(np.zeros((10, 3)), 11)


def test_farthest_point_sampling_spreads():
    line = np.zeros((11, 3))
    line[:, 0] = np.arange(11.0)
    idx = farthest_point_indices(line, 3, start=0)
    assert idx.tolist() == [0, 10, 5]


def test_split_counts():
    assert split_counts(10, (8, 1, 1)) == (8, 1, 1)
    assert split_counts(3, (8, 1, 1)) == (1, 1, 1)
    assert split_counts(30, (8, 1, 1)) == (24, 3, 3)
    with pytest.raises(ValueError, match="at least 3"):
        split_counts(2, (8, 1, 1))


def test_base_kinds_shapes():
    for kind in ("ellipsoid", "sphere", "tube"):
        cloud = make_base_cloud(kind, 500, seed=11)
        assert cloud.shape == (500, 3)
        assert np.isfinite(cloud).all()
        # centered, organ scale in mm
        assert np.abs(cloud.mean(axis=0)).max() < 1e-9
        extent = np.ptp(cloud, axis=0).max()
        assert 20.0 < extent < 400.0
    with pytest.raises(ValueError, match="unknown base kind"):
        make_base_cloud("torus", 10, seed=0)


def test_build_dataset_layout(tmp_path):
    bases = [make_base_cloud("sphere", 2000, seed=s) for s in range(3)]
    manifest = build_dataset(bases, tmp_path / "ds", points=256, seed=4)
    assert len(manifest.records) == 3
    assert {r.split for r in manifest.records} == {"train", "val", "test"}
    manifest.validate_files()
    rec = manifest.records[0]
    src = load_cloud(manifest.resolve(rec.source))
    tgt = load_cloud(manifest.resolve(rec.target))
    gt = load_displacements(manifest.resolve(rec.gt))
    assert src.shape == tgt.shape == gt.shape == (256, 3)


def test_build_dataset_deterministic(tmp_path):
    bases = [make_base_cloud("tube", 2000, seed=s) for s in range(4)]
    m1 = build_dataset(bases, tmp_path / "a", points=256, seed=9)
    m2 = build_dataset(bases, tmp_path / "b", points=256, seed=9)
    assert m1.records == m2.records
    for rec in m1.records:
        a = (tmp_path / "a" / rec.source).read_bytes()
        b = (tmp_path / "b" / rec.source).read_bytes()
        assert a == b
    assert (tmp_path / "a" / "manifest.jsonl").read_bytes() == (
        tmp_path / "b" / "manifest.jsonl"
    ).read_bytes()
