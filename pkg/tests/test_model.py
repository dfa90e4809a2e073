import numpy as np
import pytest

from hybrid_al.model import (
    N_FEATURES,
    Classifier,
    TrainConfig,
    TrainingError,
    dropout_masks,
    extract_features,
    focal_loss,
    forward_backward,
    init_params,
    predict_deterministic,
    predict_mc,
    softmax,
    train,
)
from hybrid_al.oracles import focal_gradient_check
from hybrid_al.uncertainty import class_uncertainty


def test_features_constant_image():
    f = extract_features(np.full((16, 20), 0.3))
    assert f.shape == (320, N_FEATURES)
    np.testing.assert_allclose(f[:, [1, 3, 5]], 0.3, atol=1e-6)
    np.testing.assert_allclose(f[:, [2, 4]], 0.0, atol=1e-3)


def test_features_coordinate_endpoints():
    f = extract_features(np.zeros((64, 64))).reshape(64, 64, N_FEATURES)
    np.testing.assert_array_equal(f[0, 0, 6:], [0, 0])
    np.testing.assert_array_equal(f[63, 63, 6:], [1, 1])
    assert f[..., 6:].min() >= 0 and f[..., 6:].max() <= 1


def test_features_box_mean_stencil():
    img = np.full((16, 16), 0.1)
    img[8, 8] = 0.9
    f = extract_features(img).reshape(16, 16, N_FEATURES)
    np.testing.assert_allclose(f[8, 8, 1], (0.9 + 8 * 0.1) / 9, rtol=1e-6)


def test_features_edge_replication():
    img = np.zeros((16, 16))
    img[0, :] = 1.0
    f = extract_features(img).reshape(16, 16, N_FEATURES)
    # replicated top row makes two of three stencil rows bright at the edge
    np.testing.assert_allclose(f[0, 5, 1], 2 / 3, rtol=1e-6)


def test_features_stack_matches_slices(rng):
    stack = rng.uniform(0, 1, (3, 16, 16))
    per_slice = np.concatenate([extract_features(s) for s in stack])
    np.testing.assert_array_equal(extract_features(stack), per_slice)


def test_focal_loss_values():
    p = np.array([[0.5, 0.5], [1.0, 0.0]])
    loss, _ = focal_loss(p[:1], np.array([0]), 0.67, 2.0)
    np.testing.assert_allclose(loss, 0.67 * 0.25 * np.log(2), rtol=1e-12)
    # 0.1675 * ln 2 evaluated to 30 digits
    np.testing.assert_allclose(loss, 0.116102152743791, rtol=1e-13)
    loss, grad = focal_loss(p[1:], np.array([0]), 0.67, 2.0)
    assert loss == 0.0 and np.all(grad == 0)


def test_focal_reduces_to_cross_entropy(rng):
    p = softmax(rng.normal(size=(20, 4)))
    y = rng.integers(0, 4, 20)
    loss, grad = focal_loss(p, y, 1.0, 0.0)
    np.testing.assert_allclose(loss, -np.mean(np.log(p[np.arange(20), y])), rtol=1e-12)
    onehot = np.eye(4)[y]
    np.testing.assert_allclose(grad, (p - onehot) / 20, rtol=1e-12)


def test_focal_clamps_zero_probability():
    loss, grad = focal_loss(np.array([[1.0, 0.0]]), np.array([1]), 0.5, 2.0)
    np.testing.assert_allclose(loss, -0.5 * np.log(1e-12))
    assert np.all(np.isfinite(grad))


@pytest.mark.parametrize("gamma", [0.0, 0.5, 2.0, 3.5])
def test_focal_strictly_decreasing_in_pt(gamma):
    pts = np.linspace(1e-4, 1 - 1e-4, 500)
    probs = np.stack([pts, 1 - pts], axis=1)
    losses = [focal_loss(probs[i : i + 1], np.array([0]), 0.67, gamma)[0] for i in range(len(pts))]
    assert np.all(np.diff(losses) < 0)


def test_gradient_matches_finite_differences():
    assert focal_gradient_check(np.random.default_rng(0), n_configs=30) < 1e-4


def test_gradient_check_detects_wrong_gradient():
    def scaled(*args):
        loss, g = forward_backward(*args)
        g["W2"] = g["W2"] * 1.01
        return loss, g

    assert focal_gradient_check(np.random.default_rng(0), n_configs=10, grad_fn=scaled) > 1e-4


def test_dropout_mask_rates():
    rng = np.random.default_rng(0)
    for d in (0.25, 0.5, 0.75):
        m = dropout_masks(rng, (200, 500), int(round(256 * d)))
        np.testing.assert_allclose(m.mean(), 1 - d, atol=0.01)
    assert dropout_masks(rng, (3, 4), 0).all()


def test_param_count_formula(rng):
    for F, H, C in [(8, 64, 4), (3, 5, 1)]:
        m = Classifier(init_params(F, H, C, rng), C)
        assert m.n_params == (F + 1) * H + (H + 1) * H + (H + 1) * (C + 1)
        assert m.n_params == Classifier.expected_n_params(F, H, C)


def test_deterministic_prediction_is_valid_softmax(trained_model, small_volumes):
    f = extract_features(small_volumes[2].image)
    p = predict_deterministic(trained_model, f)
    assert p.shape == (5, f.shape[0])
    np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-6)
    assert p.min() >= 0 and p.max() <= 1
    np.testing.assert_array_equal(p, predict_deterministic(trained_model, f))


def test_mc_samples_valid_and_seeded(trained_model, small_volumes):
    f = extract_features(small_volumes[2].image)
    s = predict_mc(trained_model, f, 5, seed=11)
    assert s.probs.shape == (5, 5, f.shape[0]) and s.n_passes == 5
    np.testing.assert_allclose(s.probs.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_array_equal(s.probs, predict_mc(trained_model, f, 5, seed=11).probs)
    np.testing.assert_allclose(s.mean, s.probs.astype(np.float64).mean(axis=0), atol=1e-12)
    assert class_uncertainty(s).max() > 0
    # each pass has its own substream, so a prefix of passes is unchanged
    np.testing.assert_array_equal(predict_mc(trained_model, f, 3, seed=11).probs, s.probs[:3])


def test_zero_dropout_collapses(trained_model, small_volumes):
    f = extract_features(small_volumes[3].image)
    m0 = Classifier(trained_model.params, trained_model.n_classes, dropout=0.0)
    s = predict_mc(m0, f, 6, seed=2)
    for t in range(1, 6):
        np.testing.assert_array_equal(s.probs[t], s.probs[0])
    assert np.all(class_uncertainty(s) == 0.0)
    np.testing.assert_allclose(s.probs[0], predict_deterministic(m0, f), atol=1e-6)


def test_train_is_deterministic(small_volumes):
    v = small_volumes[0]
    X, y = extract_features(v.image), v.labels.ravel()
    cfg = TrainConfig(steps=30, eval_every=10)
    val = [(extract_features(small_volumes[1].image), small_volumes[1].labels)]
    a = train(X, y, cfg, 4, val, seed=5)
    b = train(X, y, cfg, 4, val, seed=5)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    c = train(X, y, cfg, 4, val, seed=6)
    assert not np.array_equal(a.params["W1"], c.params["W1"])
    assert [s for s, _ in a.history] == [10, 20, 30]


def test_train_keeps_best_checkpoint(trained_model):
    best = max(score for _, score in trained_model.history)
    assert best >= 0.6


def test_train_rejects_empty_pool_and_nan():
    with pytest.raises(TrainingError):
        train(np.zeros((0, 8)), np.zeros(0, int), TrainConfig(steps=1), 4)
    X = np.full((10, 8), np.nan)
    with pytest.raises(TrainingError, match="non-finite"):
        train(X, np.zeros(10, int), TrainConfig(steps=2), 4)


@pytest.mark.parametrize(
    "kw", [dict(alpha=0), dict(alpha=1.5), dict(gamma=-1), dict(dropout=1.0), dict(mc_passes=0), dict(lr=0)]
)
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_train_config_defaults():
    c = TrainConfig()
    assert (c.alpha, c.gamma, c.lr, c.weight_decay, c.dropout, c.mc_passes) == (0.67, 2.0, 4e-4, 1e-5, 0.5, 10)
    assert (c.steps, c.batch_size, c.eval_every) == (2000, 512, 200)


def test_checkpoint_round_trip(tmp_path, trained_model):
    path = tmp_path / "m.ckpt"
    trained_model.save(path)
    back = Classifier.load(path)
    assert back.n_classes == trained_model.n_classes and back.dropout == trained_model.dropout
    for k in trained_model.params:
        np.testing.assert_array_equal(back.params[k], trained_model.params[k])
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(ValueError):
        Classifier.load(path)


def test_one_volume_reaches_validation_dice():
    from hybrid_al.data import generate_phantom

    vols = generate_phantom(7)
    X, y = extract_features(vols[0].image), vols[0].labels.ravel()
    val = [(extract_features(vols[1].image), vols[1].labels)]
    model = train(X, y, TrainConfig(lr=2e-3), 4, val, seed=0)
    assert max(score for _, score in model.history) >= 0.6
