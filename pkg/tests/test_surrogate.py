import numpy as np
import pytest

from dragdiff.imageops import resize_adjoint, resize_bilinear
from dragdiff.rng import generator
from dragdiff.surrogate import (
    PrecomputedFeatureTable,
    RandomConvExtractor,
    extract_batch,
    extract_features,
    fit_from_precomputed,
    fit_ridge,
    head_predict,
    init_random_features,
    load_feature_table,
    load_model,
    make_model,
    save_feature_table,
    save_model,
    evaluate,
)


def toy_extractor(channels=2, seed=3):
    """Tiny extractor for dense-oracle checks: 8x8 input, 2x2 pooling."""
    return RandomConvExtractor(
        seed=seed, out_channels=channels, input_side=8, pool_window=2, pool_stride=2
    )


def small_model(channels=8, seed=7, lam=1e-2, n=12):
    ex = init_random_features(seed, out_channels=channels)
    rng = generator(100, seed)
    imgs = rng.random((n, 3, 64, 64))
    F = np.stack([extract_features(ex, resize_bilinear(im, 224, 224)) for im in imgs])
    y = rng.random(n)
    return make_model(ex, fit_ridge(F, y, lam), lam), imgs, F, y


def test_feature_dimension_default_geometry():
    ex = init_random_features(0, out_channels=160)
    assert ex.conv_side == 220
    assert ex.grid_side == 4
    assert ex.feature_dim == 2560
    assert init_random_features(0, out_channels=1).feature_dim == 16


def test_weights_deterministic_by_seed():
    a = init_random_features(5, out_channels=4)
    b = init_random_features(5, out_channels=4)
    c = init_random_features(6, out_channels=4)
    assert np.array_equal(a.weights, b.weights)
    assert not np.array_equal(a.weights, c.weights)
    with pytest.raises(ValueError):
        init_random_features(0, out_channels=0)


def test_zero_image_feature_is_bias():
    ex = init_random_features(1, out_channels=3)
    f = extract_features(ex, np.zeros((3, 224, 224)))
    assert np.all(f == 2.0)


def test_extract_rejects_wrong_shape():
    ex = init_random_features(1, out_channels=2)
    with pytest.raises(ValueError):
        extract_features(ex, np.zeros((3, 64, 64)))
    with pytest.raises(ValueError):
        extract_features(ex, np.zeros((1, 224, 224)))


def dense_conv_oracle(ex, image):
    """Brute-force loops over the same conv/bias/ReLU/pool definition."""
    k, m, g, p = ex.kernel, ex.conv_side, ex.grid_side, ex.pool_window
    C = ex.out_channels
    resp = np.zeros((C, m, m))
    for c in range(C):
        for i in range(m):
            for j in range(m):
                patch = image[:, i : i + k, j : j + k]
                resp[c, i, j] = float(np.sum(patch * ex.weights[c])) + ex.bias
    resp = np.maximum(resp, 0)
    feat = np.zeros((C, g, g))
    for c in range(C):
        for a in range(g):
            for b in range(g):
                feat[c, a, b] = resp[c, a * p : (a + 1) * p, b * p : (b + 1) * p].mean()
    return feat.reshape(-1)


def test_extraction_matches_dense_oracle():
    ex = toy_extractor()
    rng = generator(101, 0)
    img = rng.random((3, 8, 8))
    fast = extract_features(ex, img)
    slow = dense_conv_oracle(ex, img)
    np.testing.assert_allclose(fast, slow, atol=1e-13)
    # negated image with all-positive preactivations flips pre-bias sign
    neg = extract_features(ex, -img)
    slow_neg = dense_conv_oracle(ex, -img)
    np.testing.assert_allclose(neg, slow_neg, atol=1e-13)


def test_single_pixel_matches_kernel():
    ex = toy_extractor(channels=1)
    img = np.zeros((3, 8, 8))
    img[1, 4, 4] = 1.0
    np.testing.assert_allclose(
        extract_features(ex, img), dense_conv_oracle(ex, img), atol=1e-13
    )


def test_extract_batch_close_to_double_path():
    ex = init_random_features(2, out_channels=4)
    rng = generator(102, 0)
    imgs = [rng.random((3, 224, 224)) for _ in range(3)]
    F32 = extract_batch(ex, imgs)
    F64 = np.stack([extract_features(ex, im) for im in imgs])
    rel = np.max(np.abs(F32 - F64) / np.maximum(np.abs(F64), 1e-12))
    assert rel < 1e-4


def test_fit_ridge_interpolates_unregularized():
    # X=[1,2], y=[1,2], lam=0, raw coordinates: w=1 exactly
    fit = fit_ridge(np.array([[1.0], [2.0]]), np.array([1.0, 2.0]), 0.0, standardize=False)
    assert fit.b == 0.0
    assert abs(fit.w[0] - 1.0) < 1e-12


def test_fit_ridge_hand_value():
    # sum xy = 5, sum x^2 = 5, lam = 5 -> w = 0.5
    fit = fit_ridge(np.array([[1.0], [2.0]]), np.array([1.0, 2.0]), 5.0, standardize=False)
    assert abs(fit.w[0] - 0.5) < 1e-12


def test_fit_ridge_standardized_head():
    rng = generator(103, 0)
    X = rng.random((40, 3))
    w_true = np.array([0.5, -1.0, 2.0])
    y = X @ w_true + 0.7
    fit = fit_ridge(X, y, 0.0)
    assert fit.b == pytest.approx(float(y.mean()), rel=1e-12)
    np.testing.assert_allclose(head_predict(fit, X), y, atol=1e-9)
    # constant columns pass through as zero weight
    Xc = np.hstack([X, np.full((40, 1), 3.3)])
    fitc = fit_ridge(Xc, y, 1.0)
    assert abs(fitc.w[3]) <= 1e-12


def test_fit_ridge_duplication_with_doubled_lambda():
    rng = generator(104, 0)
    X = rng.random((9, 4))
    y = rng.random(9)
    base = fit_ridge(X, y, 3.0)
    doubled = fit_ridge(np.vstack([X, X]), np.concatenate([y, y]), 6.0)
    np.testing.assert_allclose(base.w, doubled.w, atol=1e-10)
    assert base.b == pytest.approx(doubled.b, rel=1e-12)


def test_fit_ridge_dual_and_primal_agree():
    rng = generator(105, 0)
    Xwide = rng.random((6, 40))  # n < d: dual path
    y = rng.random(6)
    fit = fit_ridge(Xwide, y, 2.0)
    Xs = (Xwide - fit.feature_mean) / np.where(fit.feature_std > 0, fit.feature_std, 1)
    # normal equations residual of the primal system
    lhs = Xs.T @ (Xs @ fit.w) + 2.0 * fit.w
    rhs = Xs.T @ (y - fit.b)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_fit_ridge_validation():
    with pytest.raises(ValueError):
        fit_ridge(np.zeros((3,)), np.zeros(3), 1.0)
    with pytest.raises(ValueError):
        fit_ridge(np.zeros((3, 2)), np.zeros(4), 1.0)
    with pytest.raises(ValueError):
        fit_ridge(np.full((3, 2), np.nan), np.zeros(3), 1.0)
    with pytest.raises(ValueError):
        fit_ridge(np.zeros((3, 2)), np.zeros(3), -1.0)


def test_predict_constant_head():
    ex = init_random_features(3, out_channels=2)
    fit = fit_ridge(np.ones((4, ex.feature_dim)), np.full(4, 0.3), 1.0)
    model = make_model(ex, fit, 1.0)
    assert model.predict(generator(106, 0).random((3, 50, 50))) == 0.3


def test_training_set_interpolation():
    """lam=0 with n < d reproduces training labels at training images."""
    model, imgs, F, y = small_model(channels=8, lam=0.0, n=6)
    for img, label in zip(imgs, y):
        assert abs(model.predict(img) - label) < 1e-8


def test_gradient_matches_finite_differences():
    model, imgs, F, y = small_model(channels=4)
    rng = generator(107, 0)
    x = rng.random((3, 64, 64))
    g = model.grad(x)
    h = 1e-4
    for _ in range(20):
        c = int(rng.integers(0, 3))
        i = int(rng.integers(0, 64))
        j = int(rng.integers(0, 64))
        xp = x.copy()
        xp[c, i, j] += h
        xm = x.copy()
        xm[c, i, j] -= h
        fd = (model.predict(xp) - model.predict(xm)) / (2 * h)
        denom = max(abs(fd), abs(g[c, i, j]), 1e-8)
        assert abs(fd - g[c, i, j]) / denom <= 1e-4


def test_zero_head_zero_gradient():
    ex = init_random_features(4, out_channels=2)
    fit = fit_ridge(np.ones((4, ex.feature_dim)), np.full(4, 0.5), 1.0)
    model = make_model(ex, fit, 1.0)
    assert np.all(model.grad(generator(108, 0).random((3, 64, 64))) == 0.0)


def test_value_and_grad_matches_separate_calls():
    model, imgs, F, y = small_model(channels=4)
    x = generator(109, 0).random((3, 64, 64))
    phi, g = model.value_and_grad(x)
    assert phi == model.predict(x)
    assert np.array_equal(g, model.grad(x))


def test_resize_adjoint_identity_via_gradient_path():
    rng = generator(110, 0)
    x = rng.random((3, 31, 57))
    y = rng.random((3, 224, 224))
    lhs = float(np.sum(resize_bilinear(x, 224, 224) * y))
    rhs = float(np.sum(x * resize_adjoint(y, 31, 57)))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_evaluate_degenerate_labels():
    model, imgs, F, y = small_model(channels=2, n=4)
    r2, mse = evaluate(model, [(imgs[0], model.predict(imgs[0]))])
    assert np.isnan(r2)  # single label: SS_tot = 0
    assert mse == 0.0


def test_evaluate_against_known_predictions():
    class Doubler:
        def predict(self, img):
            return 2.0 * float(img)

    data = [(0.0, 0.0), (0.25, 1.0)]
    r2, mse = evaluate(Doubler(), data)
    # predictions [0, 0.5] on labels [0, 1]: R^2 = 0.5, MSE = 0.125
    assert r2 == 0.5
    assert mse == 0.125
    with pytest.raises(ValueError):
        evaluate(Doubler(), [])


def test_model_round_trip(tmp_path):
    model, imgs, F, y = small_model(channels=3)
    path = tmp_path / "model.json"
    save_model(model, str(path))
    back = load_model(str(path))
    assert back.guidable
    x = generator(111, 0).random((3, 64, 64))
    assert back.predict(x) == model.predict(x)
    assert np.array_equal(back.grad(x), model.grad(x))
    assert back.lam == model.lam


def test_precomputed_table_round_trip(tmp_path):
    rng = generator(112, 0)
    rows = {f"img_{i:03d}": rng.random(5) for i in range(6)}
    table = PrecomputedFeatureTable(rows=rows, dim=5)
    path = tmp_path / "feats.csv"
    save_feature_table(table, str(path))
    back = load_feature_table(str(path))
    assert back.dim == 5
    assert set(back.rows) == set(rows)
    for rid in rows:
        np.testing.assert_allclose(back.rows[rid], rows[rid], atol=0)
    with pytest.raises(ValueError):
        PrecomputedFeatureTable(rows={"a": np.zeros(3)}, dim=5)


def test_fit_from_precomputed_not_guidable(tmp_path):
    rng = generator(113, 0)
    ids = [f"r{i}" for i in range(8)]
    table = PrecomputedFeatureTable(
        rows={rid: rng.random(8) for rid in ids}, dim=8
    )
    labels = {rid: float(k) for k, rid in enumerate(ids)}
    model = fit_from_precomputed(table, labels, 0.0)
    assert not model.guidable
    for k, rid in enumerate(ids):
        assert abs(model.predict_id(rid) - float(k)) < 1e-7
    with pytest.raises(ValueError):
        model.grad(np.zeros((3, 8, 8)))
    with pytest.raises(ValueError):
        model.predict(np.zeros((3, 8, 8)))
    path = tmp_path / "pre.json"
    save_model(model, str(path))
    back = load_model(str(path))
    assert not back.guidable
    assert back.predict_id(ids[2]) == model.predict_id(ids[2])


def test_fit_from_precomputed_single_row_convention():
    table = PrecomputedFeatureTable(rows={"a": np.array([1.0])}, dim=1)
    model = fit_from_precomputed(table, {"a": 0.5}, 1.0, standardize=False)
    # w = (x y) / (x^2 + lam) = 0.5 / 2
    assert abs(model.w[0] - 0.25) < 1e-12


def test_fit_from_precomputed_missing_id():
    table = PrecomputedFeatureTable(
        rows={"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0])}, dim=2
    )
    with pytest.raises(ValueError):
        fit_from_precomputed(table, {"a": 1.0, "zz": 2.0}, 0.0)
