import numpy as np
import pytest

from gera.descriptors import encode_cloud
from gera.io import (
    DatasetManifest,
    ManifestRecord,
    RegistrationConfig,
    save_cloud,
    save_displacements,
    save_manifest,
)
from gera.model import (
    DescriptorStore,
    EvalReport,
    apply_displacement,
    backward,
    build_model,
    chamfer_distance,
    evaluate,
    gera_forward,
    gera_forward_training,
    load_model,
    loss_geo,
    loss_total,
    loss_total_grad,
    loss_xyz,
    model_params,
    n_desc_from_dim,
    save_model,
    train,
)
from gera.synthesis import downsample, generate_pair, make_base_cloud

from test_neighbors import random_rotation

TOY_CFG = RegistrationConfig(
    n_desc=4, alpha_loss=0.5, seed=11, encoder_widths=(6, 8), decoder_widths=(8, 6)
)


def toy_pair(seed=3, m=16, spread=3.0):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(m, 3)) * 20
    tgt = src + rng.normal(size=(m, 3)) * spread
    return src, tgt


def test_forward_output_shape():
    src, tgt = toy_pair()
    model = build_model(TOY_CFG)
    pred = gera_forward(src, tgt, encode_cloud(src, 4), encode_cloud(tgt, 4), model)
    assert pred.shape == (16, 3)
    assert np.isfinite(pred).all()


def test_forward_target_permutation_invariance():
    src, tgt = toy_pair(seed=5, m=32)
    model = build_model(TOY_CFG)
    base = gera_forward(src, tgt, encode_cloud(src, 4), encode_cloud(tgt, 4), model)
    perm = np.random.default_rng(0).permutation(32)
    moved = gera_forward(src, tgt[perm], encode_cloud(src, 4), encode_cloud(tgt[perm], 4), model)
    np.testing.assert_allclose(moved, base, atol=1e-12)


def test_forward_source_permutation_equivariance():
    src, tgt = toy_pair(seed=6, m=32)
    model = build_model(TOY_CFG)
    base = gera_forward(src, tgt, encode_cloud(src, 4), encode_cloud(tgt, 4), model)
    perm = np.random.default_rng(1).permutation(32)
    moved = gera_forward(src[perm], tgt, encode_cloud(src[perm], 4), encode_cloud(tgt, 4), model)
    np.testing.assert_allclose(moved, base[perm], atol=1e-12)


def test_forward_validates_descriptor_match():
    src, tgt = toy_pair()
    model = build_model(TOY_CFG)
    with pytest.raises(ValueError, match="row counts"):
        gera_forward(src, tgt, encode_cloud(src[:-1], 4), encode_cloud(tgt, 4), model)
    with pytest.raises(ValueError, match="encoder input"):
        gera_forward(src, tgt, encode_cloud(src, 5), encode_cloud(tgt, 5), model)


def test_apply_displacement_zero_identity():
    src, _ = toy_pair()
    out = apply_displacement(src, np.zeros_like(src), TOY_CFG)
    np.testing.assert_array_equal(out, src)


def test_apply_displacement_exact_field():
    src, tgt = toy_pair()
    out = apply_displacement(src, tgt - src, TOY_CFG)
    np.testing.assert_allclose(out, tgt, atol=1e-12)


def test_apply_displacement_additive():
    src, _ = toy_pair()
    rng = np.random.default_rng(2)
    f = rng.normal(size=src.shape)
    g = rng.normal(size=src.shape)
    once = apply_displacement(apply_displacement(src, f, TOY_CFG), g, TOY_CFG)
    combined = apply_displacement(src, f + g, TOY_CFG)
    np.testing.assert_allclose(once, combined, atol=1e-12)


def test_loss_xyz_zero_for_identical():
    src, _ = toy_pair()
    assert loss_xyz(src, src) == 0.0


def test_loss_xyz_uniform_offset():
    src, _ = toy_pair()
    shifted = src + np.array([0.0, 3.0, 0.0])
    assert loss_xyz(shifted, src) == pytest.approx(3.0, abs=1e-12)


def test_loss_xyz_matches_loop_oracle():
    src, tgt = toy_pair(seed=9)
    acc = 0.0
    for a, b in zip(src, tgt):
        acc += float(sum((x - y) ** 2 for x, y in zip(a, b)))
    expected = np.sqrt(acc / len(src))
    assert loss_xyz(src, tgt) == pytest.approx(expected, abs=1e-12)


def loss_geo_oracle(a, b, n_desc):
    """Brute-force Chamfer over descriptor rows, nested loops throughout."""
    da = encode_cloud(a, n_desc).vectors
    db = encode_cloud(b, n_desc).vectors
    total = 0.0
    for row in da:
        total += min(float(((row - other) ** 2).sum()) for other in db)
    for row in db:
        total += min(float(((row - other) ** 2).sum()) for other in da)
    return total


def test_loss_geo_zero_for_identical():
    src, _ = toy_pair(m=12)
    assert loss_geo(src, src, 3) == pytest.approx(0.0, abs=1e-12)


def test_loss_geo_rigid_invariance():
    rng = np.random.default_rng(14)
    cloud = rng.normal(size=(24, 3)) * 18
    rot = random_rotation(rng)
    moved = cloud @ rot.T + rng.normal(size=3) * 40
    assert loss_geo(cloud, moved, 4) <= 1e-12


def test_loss_geo_matches_brute_force_oracle():
    rng = np.random.default_rng(15)
    for _ in range(10):
        a = rng.normal(size=(rng.integers(5, 9), 3)) * 10
        b = rng.normal(size=(rng.integers(5, 9), 3)) * 10
        assert loss_geo(a, b, 3) == pytest.approx(loss_geo_oracle(a, b, 3), abs=1e-10)


def test_loss_geo_requires_enough_points():
    with pytest.raises(ValueError, match="too small"):
        loss_geo(np.zeros((3, 3)), np.zeros((3, 3)), 3)


def test_loss_total_endpoints_exact():
    src, tgt = toy_pair(seed=16)
    cfg0 = RegistrationConfig(n_desc=4, alpha_loss=0.0)
    cfg1 = RegistrationConfig(n_desc=4, alpha_loss=1.0)
    assert loss_total(src, tgt, cfg0) == loss_xyz(src, tgt)
    assert loss_total(src, tgt, cfg1) == loss_geo(src, tgt, 4)


def test_loss_total_midpoint_blend():
    src, tgt = toy_pair(seed=17)
    cfg = RegistrationConfig(n_desc=4, alpha_loss=0.5)
    blend = loss_total(src, tgt, cfg)
    expected = 0.5 * loss_geo(src, tgt, 4) + 0.5 * loss_xyz(src, tgt)
    assert blend == pytest.approx(expected, abs=1e-12)


def test_full_model_gradient_matches_finite_differences():
    """End-to-end check: d(loss_total)/d(params) vs central differences."""
    src, tgt = toy_pair(seed=3, m=16)
    model = build_model(TOY_CFG)
    ds, dt = encode_cloud(src, 4), encode_cloud(tgt, 4)

    def full_loss():
        pred = gera_forward(src, tgt, ds, dt, model)
        return loss_total(apply_displacement(src, pred, TOY_CFG), tgt, TOY_CFG)

    pred, tape = gera_forward_training(src, tgt, ds, dt, model)
    _, dfield = loss_total_grad(apply_displacement(src, pred, TOY_CFG), tgt, TOY_CFG)
    grads = backward(model, tape, dfield)

    h = 1e-5
    for p, g in zip(model_params(model), grads):
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            lp = full_loss()
            p[idx] = orig - h
            lm = full_loss()
            p[idx] = orig
            fd = (lp - lm) / (2 * h)
            if abs(fd) < 1e-8 and abs(g[idx]) < 1e-8:
                continue
            rel = abs(fd - g[idx]) / max(abs(fd), abs(g[idx]))
            assert rel < 1e-4, f"param idx {idx}: fd {fd} vs analytic {g[idx]}"


def test_chamfer_identical_clouds_zero():
    src, _ = toy_pair()
    assert chamfer_distance(src, src) == 0.0


def test_chamfer_matches_loop_oracle():
    rng = np.random.default_rng(18)
    a = rng.normal(size=(7, 3)) * 5
    b = rng.normal(size=(9, 3)) * 5
    fwd = np.mean([min(np.linalg.norm(p - q) for q in b) for p in a])
    bwd = np.mean([min(np.linalg.norm(q - p) for p in a) for q in b])
    assert chamfer_distance(a, b) == pytest.approx(0.5 * (fwd + bwd), abs=1e-12)


def _toy_manifest(tmp_path, n_pairs=10, m=48, seed=0):
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_pairs):
        base = downsample(make_base_cloud("ellipsoid", 400, seed=100 + i), m, seed=i)
        pair = generate_pair(base, 8.0, (0.5, 1.0), seed=200 + i)
        save_cloud(pair.source, tmp_path / f"p{i}.src.xyz")
        save_cloud(pair.target, tmp_path / f"p{i}.tgt.xyz")
        save_displacements(pair.gt, tmp_path / f"p{i}.gt.xyz")
        split = "train" if i < n_pairs - 2 else ("val" if i == n_pairs - 2 else "test")
        records.append(
            ManifestRecord(
                f"p{i}.src.xyz", f"p{i}.tgt.xyz", f"p{i}.gt.xyz", 8.0, (0.5, 1.0), i, split
            )
        )
    manifest = DatasetManifest(records=records, root=tmp_path)
    save_manifest(manifest, tmp_path / "manifest.jsonl")
    return manifest


def test_train_smoke_loss_halves(tmp_path):
    manifest = _toy_manifest(tmp_path)
    cfg = RegistrationConfig(n_desc=10, alpha_loss=0.0, seed=1)
    model = build_model(cfg)
    result = train(manifest, model, epochs=200, lr=1e-3, seed=1)
    assert len(result.history) == 200
    first = result.history[0].train_loss
    last = min(h.train_loss for h in result.history[-10:])
    assert last <= 0.5 * first, f"loss {first} -> {last}"


def test_train_deterministic(tmp_path):
    manifest = _toy_manifest(tmp_path, n_pairs=5)

    def run():
        cfg = RegistrationConfig(n_desc=10, alpha_loss=0.5, seed=2)
        model = build_model(cfg)
        train(manifest, model, epochs=3, lr=1e-3, seed=2)
        return model_params(model)

    for a, b in zip(run(), run()):
        np.testing.assert_array_equal(a, b)


def test_alpha_changes_training(tmp_path):
    manifest = _toy_manifest(tmp_path, n_pairs=5)

    def run(alpha):
        cfg = RegistrationConfig(n_desc=10, alpha_loss=alpha, seed=3)
        model = build_model(cfg)
        return train(manifest, model, epochs=3, lr=1e-3, seed=3).history

    h0 = run(0.0)
    h5 = run(0.5)
    assert any(a.train_loss != b.train_loss for a, b in zip(h0, h5))


def test_train_requires_train_split(tmp_path):
    manifest = _toy_manifest(tmp_path, n_pairs=3)
    manifest.records = [r for r in manifest.records if r.split != "train"]
    model = build_model(RegistrationConfig(seed=0))
    with pytest.raises(ValueError, match="train split"):
        train(manifest, model, epochs=1, lr=1e-3, seed=0)


def test_evaluate_oracle_displacements_bounded_by_noise(tmp_path):
    """A model stub that returns the ground truth leaves only the noise."""
    manifest = _toy_manifest(tmp_path)
    store = DescriptorStore(manifest, 10)
    for rec in manifest.split("test"):
        src = store.cloud(rec.source)
        tgt = store.cloud(rec.target)
        from gera.io import load_displacements

        gt = load_displacements(manifest.resolve(rec.gt))
        deformed = apply_displacement(src, gt, RegistrationConfig())
        assert loss_xyz(deformed, tgt) <= rec.noise_mm[1]


def test_evaluate_report_fields(tmp_path):
    manifest = _toy_manifest(tmp_path, n_pairs=4)
    model = build_model(RegistrationConfig(seed=4))
    report = evaluate(manifest, model, timing_runs=2, train_epoch_seconds=1.5)
    assert report.rmse_mm >= 0 and report.cd_mm >= 0
    assert report.it_ms > 0 and report.tt_s == 1.5


def test_eval_report_rejects_negative():
    with pytest.raises(ValueError, match="nonnegative"):
        EvalReport(rmse_mm=-1.0, cd_mm=0.0, it_ms=0.0, tt_s=0.0)


def test_model_checkpoint_round_trip(tmp_path):
    model = build_model(TOY_CFG)
    path = tmp_path / "m.gnet"
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.config.n_desc == 4
    assert loaded.config.encoder_widths == (6, 8)
    src, tgt = toy_pair()
    ds, dt = encode_cloud(src, 4), encode_cloud(tgt, 4)
    np.testing.assert_array_equal(
        gera_forward(src, tgt, ds, dt, model), gera_forward(src, tgt, ds, dt, loaded)
    )


def test_n_desc_from_dim():
    assert n_desc_from_dim(45) == 10
    assert n_desc_from_dim(3) == 3
    with pytest.raises(ValueError, match="not a pairwise"):
        n_desc_from_dim(44)


def test_descriptor_store_counts_encodings(tmp_path):
    manifest = _toy_manifest(tmp_path, n_pairs=3)
    store = DescriptorStore(manifest, 10)
    for rec in manifest.records:
        store.descriptors(rec.source)
        store.descriptors(rec.target)
        store.descriptors(rec.source)  # memoized, no extra encode
    assert store.encodings_run == 6
