import numpy as np
import pytest

from meshtomo.core import FormatError, Grid, Image, Seed
from meshtomo.estimate import (Estimator, TrainConfig, basis_fingerprint,
                               build_oblique, estimate_coeffs, load_estimator,
                               oblique_coeffs, oracle_coeffs, pooled_features,
                               save_estimator, train_ensemble, train_estimator)
from meshtomo.mesh import StackedBasis, mesh_with_k_triangles, rasterize
from meshtomo.solve import nnls
from meshtomo.tomo import Measurement, build_ray_matrix, forward, place_sensors


def find_identifiable(rm, grid, k, seed0, tries=200):
    """First mesh seed whose subspace is identifiable from the rays."""
    for s in range(seed0, seed0 + tries):
        basis = rasterize(mesh_with_k_triangles(k, Seed(s)), grid)
        try:
            return basis, build_oblique(rm, basis)
        except ValueError:
            continue
    raise RuntimeError("no identifiable mesh found")


def random_images(grid, count, seed):
    rng = Seed(seed).rng()
    return [Image(grid, rng.uniform(0, 1, grid.n_pixels)) for _ in range(count)]


def test_oracle_coeffs_is_analysis():
    grid = Grid(10)
    basis = rasterize(mesh_with_k_triangles(9, Seed(1)), grid)
    x = Image(grid, Seed(2).rng().uniform(0, 1, grid.n_pixels))
    assert np.array_equal(oracle_coeffs(basis, x), basis.coeffs(x))


def test_build_oblique_toy_exact():
    # one ray seeing only the first cell, subspace = span of (1,1)/sqrt(2):
    # F must send y to (y, y) so that the measured cell is reproduced
    a = np.array([[1.0, 0.0]])
    b = np.array([[1.0], [1.0]]) / np.sqrt(2.0)
    op = build_oblique(a, b)
    assert np.allclose(op.operator, [[1.0], [1.0]], atol=1e-12)
    assert np.allclose(oblique_coeffs(op, [3.0]), [3.0 * np.sqrt(2.0)], atol=1e-12)


def test_build_oblique_subspace_consistency_and_idempotence():
    grid = Grid(16)
    rm = build_ray_matrix(place_sensors(25), grid)
    basis, op = find_identifiable(rm, grid, 8, 7000)
    rng = Seed(3).rng()
    for _ in range(5):
        coeff = rng.standard_normal(basis.k)
        x = basis.synthesize(coeff)
        recon = op.operator @ (rm.matrix @ x.values)
        assert np.linalg.norm(recon - x.values) <= 1e-8 * max(1.0, np.linalg.norm(x.values))
    p = op.operator @ rm.matrix.toarray()
    assert np.allclose(p @ p, p, atol=1e-8)


def test_oblique_never_beats_orthogonal_projection():
    # F A x lies in the subspace; the projection is the L2-closest point there
    grid = Grid(16)
    rm = build_ray_matrix(place_sensors(25), grid)
    basis, op = find_identifiable(rm, grid, 10, 7300)
    rng = Seed(4).rng()
    for _ in range(10):
        x = Image(grid, rng.uniform(0, 1, grid.n_pixels))
        proj_err = np.linalg.norm(basis.project(x).values - x.values)
        obl_err = np.linalg.norm(op.operator @ (rm.matrix @ x.values) - x.values)
        assert obl_err >= proj_err - 1e-10


def test_build_oblique_rank_deficient_names_k():
    a = np.eye(3)
    b = np.array([[1.0, 1.0], [0.0, 0.0], [1.0, 1.0]])
    with pytest.raises(ValueError, match="K = 2"):
        build_oblique(a, b)


def test_build_oblique_unseen_direction_is_rank_zero():
    # the only basis direction is invisible to the rays
    a = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    b = np.array([[0.0], [0.0], [1.0]])
    with pytest.raises(ValueError, match="rank deficient"):
        build_oblique(a, b)


def test_build_oblique_shape_mismatch():
    with pytest.raises(ValueError, match="columns"):
        build_oblique(np.ones((2, 3)), np.ones((4, 1)))


def test_oblique_coeffs_accepts_measurement():
    grid = Grid(12)
    rm = build_ray_matrix(place_sensors(12), grid)
    basis, op = find_identifiable(rm, grid, 6, 7600)
    x = Image(grid, Seed(5).rng().uniform(0, 1, grid.n_pixels))
    y = forward(rm, x)
    assert np.array_equal(oblique_coeffs(op, y), oblique_coeffs(op, y.values))
    with pytest.raises(ValueError, match="measurements"):
        oblique_coeffs(op, y.values[:-1])


def test_pooled_features_second_column_is_oracle():
    grid = Grid(12)
    basis = rasterize(mesh_with_k_triangles(9, Seed(6)), grid)
    x = Image(grid, Seed(7).rng().uniform(0, 1, grid.n_pixels))
    feats = pooled_features(basis, x.values)
    assert feats.shape == (basis.k, 5)
    assert np.allclose(feats[:, 1], oracle_coeffs(basis, x), atol=1e-12)
    assert feats[:, 2].sum() == pytest.approx(1.0)          # area fractions
    assert np.all((feats[:, 3] > 0) & (feats[:, 3] < 1))    # centroids inside
    assert np.all((feats[:, 4] > 0) & (feats[:, 4] < 1))


def test_zero_estimators_predict_zero():
    grid = Grid(8)
    basis = rasterize(mesh_with_k_triangles(5, Seed(8)), grid)
    x = Image(grid, np.full(grid.n_pixels, 0.7))
    za = Estimator.zero_affine(basis)
    zp = Estimator.zero_pooled()
    assert np.array_equal(estimate_coeffs(za, basis, x), np.zeros(basis.k))
    assert np.array_equal(estimate_coeffs(zp, basis, x), np.zeros(basis.k))


def test_estimator_validation_and_binding():
    grid = Grid(8)
    basis_a = rasterize(mesh_with_k_triangles(5, Seed(9)), grid)
    basis_b = rasterize(mesh_with_k_triangles(5, Seed(10)), grid)
    x = Image(grid, np.full(grid.n_pixels, 0.5))
    with pytest.raises(ValueError, match="kind"):
        Estimator("quadratic", np.zeros(5), np.zeros(1))
    est = Estimator.zero_affine(basis_a)
    with pytest.raises(ValueError, match="bound"):
        estimate_coeffs(est, basis_b, x)
    with pytest.raises(ValueError, match="grid"):
        estimate_coeffs(est, basis_a, Image.zeros(Grid(9)))
    bad = Estimator("per-mesh-affine", np.zeros((3, grid.n_pixels)), np.zeros(3))
    if bad.weight.shape[0] != basis_a.k:
        with pytest.raises(ValueError, match="shape"):
            estimate_coeffs(bad, basis_a, x)


def test_train_config_validation():
    for kwargs in ({"epochs": 0}, {"batch_size": 0}, {"lr": 0.0},
                   {"optimizer": "rmsprop"}, {"validation_fraction": 1.0},
                   {"weight_decay": -1.0}):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)
    with pytest.raises(ValueError, match="non-empty"):
        train_estimator([], None, TrainConfig())
    grid = Grid(8)
    stack = StackedBasis([rasterize(mesh_with_k_triangles(5, Seed(11)), grid)])
    pair = (Image.zeros(grid), Image.zeros(grid))
    with pytest.raises(ValueError, match="train_ensemble"):
        train_estimator([pair], stack, TrainConfig(), "per-mesh-affine")
    with pytest.raises(ValueError, match="kind"):
        train_estimator([pair], stack.bases[0], TrainConfig(), "per-mesh-quadratic")


def test_per_mesh_affine_learns_gain_correction():
    # warm start is the truth at half gain, so the ideal map doubles the
    # warm start's subspace projection: the residual above the projection
    # anchor is exactly representable and training should drive it to ~zero
    grid = Grid(8)
    basis = rasterize(mesh_with_k_triangles(6, Seed(12)), grid)
    images = random_images(grid, 240, 13)
    dataset = [(x, Image(grid, 0.5 * x.values)) for x in images]
    cfg = TrainConfig(epochs=300, batch_size=32, lr=1e-2, seed=Seed(14))
    est = train_estimator(dataset, basis, cfg)
    hist = est.history
    assert hist.train_loss.shape == (300,)
    assert hist.val_loss.shape == (300,)
    target_var = np.var(np.stack([oracle_coeffs(basis, x) for x in images]))
    assert hist.val_loss[-1] <= 1e-3 * target_var
    assert hist.train_loss[-1] < hist.train_loss[0] / 100
    fresh = random_images(grid, 10, 15)
    errs = [np.linalg.norm(
        estimate_coeffs(est, basis, Image(grid, 0.5 * x.values))
        - oracle_coeffs(basis, x)) / np.linalg.norm(oracle_coeffs(basis, x))
        for x in fresh]
    assert max(errs) <= 0.05


def test_shared_pooled_learns_identity_map():
    grid = Grid(8)
    stack = StackedBasis([rasterize(mesh_with_k_triangles(k, Seed(20 + k)), grid)
                          for k in (5, 7)])
    images = random_images(grid, 150, 16)
    dataset = [(x, x) for x in images]
    cfg = TrainConfig(epochs=200, batch_size=64, lr=1e-2, seed=Seed(17))
    est = train_estimator(dataset, stack, cfg, kind="shared-pooled")
    assert est.weight.shape == (5,)
    assert est.fingerprint == ""  # reusable across meshes
    # transfers to a mesh never seen in training
    unseen = rasterize(mesh_with_k_triangles(6, Seed(18)), grid)
    x = random_images(grid, 1, 19)[0]
    q = estimate_coeffs(est, unseen, x)
    rel = np.linalg.norm(q - oracle_coeffs(unseen, x)) / np.linalg.norm(oracle_coeffs(unseen, x))
    assert rel <= 0.1


def test_training_is_deterministic():
    grid = Grid(8)
    basis = rasterize(mesh_with_k_triangles(5, Seed(30)), grid)
    dataset = [(x, Image(grid, 0.5 * x.values)) for x in random_images(grid, 60, 31)]
    cfg = TrainConfig(epochs=25, batch_size=16, lr=5e-3, seed=Seed(32))
    a = train_estimator(dataset, basis, cfg)
    b = train_estimator(dataset, basis, cfg)
    assert np.array_equal(a.weight, b.weight)
    assert np.array_equal(a.bias, b.bias)
    assert np.array_equal(a.history.train_loss, b.history.train_loss)


def test_sgd_and_weight_decay_paths():
    grid = Grid(8)
    basis = rasterize(mesh_with_k_triangles(5, Seed(33)), grid)
    dataset = [(x, Image(grid, 0.5 * x.values)) for x in random_images(grid, 80, 34)]
    cfg = TrainConfig(epochs=40, batch_size=16, lr=1e-2, optimizer="sgd",
                      weight_decay=1e-4, seed=Seed(35))
    est = train_estimator(dataset, basis, cfg)
    assert est.history.train_loss[-1] < est.history.train_loss[0]


def test_train_ensemble_per_mesh_and_deterministic():
    grid = Grid(8)
    stack = StackedBasis([rasterize(mesh_with_k_triangles(k, Seed(40 + k)), grid)
                          for k in (4, 5, 6)])
    dataset = [(x, x) for x in random_images(grid, 50, 41)]
    cfg = TrainConfig(epochs=15, batch_size=16, seed=Seed(42))
    ests = train_ensemble(dataset, stack, cfg)
    assert len(ests) == 3
    assert [e.fingerprint for e in ests] == [basis_fingerprint(b) for b in stack.bases]
    again = train_ensemble(dataset, stack, cfg)
    for e1, e2 in zip(ests, again):
        assert np.array_equal(e1.weight, e2.weight)


def test_fingerprint_stability_and_distinctness():
    grid = Grid(10)
    mesh = mesh_with_k_triangles(7, Seed(50))
    f1 = basis_fingerprint(rasterize(mesh, grid))
    f2 = basis_fingerprint(rasterize(mesh, grid))
    assert f1 == f2
    other_mesh = basis_fingerprint(rasterize(mesh_with_k_triangles(7, Seed(51)), grid))
    other_grid = basis_fingerprint(rasterize(mesh, Grid(12)))
    assert len({f1, other_mesh, other_grid}) == 3


def test_estimator_save_load_round_trip(tmp_path):
    grid = Grid(8)
    basis = rasterize(mesh_with_k_triangles(5, Seed(60)), grid)
    dataset = [(x, x) for x in random_images(grid, 40, 61)]
    est = train_estimator(dataset, basis, TrainConfig(epochs=10, seed=Seed(62)))
    path = tmp_path / "est.est"
    save_estimator(est, path)
    back = load_estimator(path)
    assert back.kind == est.kind
    assert back.fingerprint == est.fingerprint
    # parameters persist as little-endian float32
    assert np.array_equal(back.weight, est.weight.astype("<f4").astype(np.float64))
    assert np.array_equal(back.bias, est.bias.astype("<f4").astype(np.float64))
    zp = Estimator.zero_pooled()
    save_estimator(zp, tmp_path / "zp.est")
    back2 = load_estimator(tmp_path / "zp.est")
    assert back2.kind == "shared-pooled"
    assert np.array_equal(back2.weight, np.zeros(5))


def test_load_estimator_rejects_malformed(tmp_path):
    good = tmp_path / "good.est"
    save_estimator(Estimator.zero_pooled(), good)
    data = good.read_bytes()

    trunc = tmp_path / "trunc.est"
    trunc.write_bytes(data[:-4])
    with pytest.raises(FormatError, match="bytes"):
        load_estimator(trunc)

    noheader = tmp_path / "nohdr.est"
    noheader.write_bytes(data.split(b"\n", 1)[1])
    with pytest.raises(FormatError):
        load_estimator(noheader)

    badkind = tmp_path / "badkind.est"
    badkind.write_bytes(data.replace(b"shared-pooled", b"shared-nonlin"))
    with pytest.raises(FormatError, match="kind"):
        load_estimator(badkind)


def test_warm_start_pipeline_beats_zero_estimator():
    # end-to-end sanity at miniature scale: nnls warm start -> trained coeffs
    grid = Grid(12)
    rm = build_ray_matrix(place_sensors(12), grid)
    basis = rasterize(mesh_with_k_triangles(6, Seed(70)), grid)
    images = random_images(grid, 60, 71)
    pairs = []
    for x in images:
        warm = nnls(rm, forward(rm, x))
        pairs.append((x, warm))
    cfg = TrainConfig(epochs=150, batch_size=16, lr=1e-2, seed=Seed(72))
    est = train_estimator(pairs, basis, cfg)
    x, warm = pairs[0]
    q_true = oracle_coeffs(basis, x)
    err_trained = np.linalg.norm(estimate_coeffs(est, basis, warm) - q_true)
    err_zero = np.linalg.norm(q_true)
    assert err_trained < 0.5 * err_zero
