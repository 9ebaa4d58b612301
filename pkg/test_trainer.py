import numpy as np
import pytest

from core import DataValidationError, ParseError, RngStream, SampleTable, UsageError
from trainer import (
    GroupDROWeights, Model, ModelConfig, TrainConfig, balanced_subset, dfr_retrain, evaluate_utility, extract_embeddings,
    fit_logistic_head, init_model, loss_and_gradient, read_model, train_model, true_class_confidence, write_model,
)


def test_gradient_matches_finite_differences():
    cfg = ModelConfig(arch='mlp', hidden=(4,), activation='tanh')
    model = init_model(cfg, 3, 3, RngStream.derive(0, "grad"))
    gen = np.random.default_rng(0)
    X = gen.normal(size=(10, 3))
    y = gen.integers(0, 3, size=10)
    w = gen.random(10)
    theta = np.array(model.weights)

    _, grad = loss_and_gradient(theta, model.dims, 'tanh', X, y, w, weight_decay=0.01)
    numeric = np.zeros_like(theta)
    eps = 1e-6
    for i in range(len(theta)):
        up, down = theta.copy(), theta.copy()
        up[i] += eps
        down[i] -= eps
        numeric[i] = (loss_and_gradient(up, model.dims, 'tanh', X, y, w, 0.01)[0]
                      - loss_and_gradient(down, model.dims, 'tanh', X, y, w, 0.01)[0]) / (2 * eps)
    assert np.allclose(grad, numeric, rtol=1e-5, atol=1e-7)


def test_erm_training_lowers_loss_and_is_deterministic(small_dataset):
    _, train, _ = small_dataset
    cfg = ModelConfig(arch='mlp', hidden=(8,))
    train_cfg = TrainConfig(lr=0.1, epochs=5, batch_size=32)
    a = train_model(cfg, train, train_cfg, RngStream.derive(1, "t"))
    b = train_model(cfg, train, train_cfg, RngStream.derive(1, "t"))
    assert a.history[-1] < a.history[0]
    assert np.array_equal(a.weights, b.weights)
    assert evaluate_utility(a, train).accuracy > 0.7


def test_dro_on_a_single_group_equals_erm(small_dataset):
    _, train, _ = small_dataset
    one_group = SampleTable(train.sample_ids, train.features, train.labels,
                            np.zeros(len(train), dtype=np.int64), train.attributes)
    cfg = ModelConfig(arch='linear')
    erm = train_model(cfg, one_group, TrainConfig(lr=0.1, epochs=3, batch_size=32), RngStream.derive(2, "t"))
    dro = train_model(cfg, one_group, TrainConfig.for_method('dro', lr=0.1, epochs=3, batch_size=32, dro_adjust_C=0.0),
                      RngStream.derive(2, "t"))
    assert np.allclose(erm.weights, dro.weights)


def test_dro_weights_shift_toward_the_worse_group():
    groups = np.array([0, 0, 1, 1])
    weighting = GroupDROWeights(groups, eta=1.0, adjust_C=0.0, initial_losses=np.array([0.5, 0.5]))
    w = weighting(np.arange(4), np.array([0.1, 0.1, 2.0, 2.0]))
    assert weighting.q[1] > weighting.q[0]
    assert weighting.q.sum() == pytest.approx(1.0)
    assert w.sum() == pytest.approx(1.0)
    assert w[2] > w[0]


def test_dro_size_adjustment_favours_small_groups():
    groups = np.array([0] * 90 + [1] * 10)
    weighting = GroupDROWeights(groups, eta=1.0, adjust_C=1.0, initial_losses=np.zeros(2))
    weighting(np.arange(100), np.ones(100))
    assert weighting.q[1] > weighting.q[0]


def test_logistic_head_fits_separable_data():
    gen = np.random.default_rng(4)
    X = np.vstack([gen.normal(-2, 0.5, size=(50, 2)), gen.normal(2, 0.5, size=(50, 2))])
    y = np.array([0] * 50 + [1] * 50)
    for reg in ('l1', 'l2'):
        W, b = fit_logistic_head(X, y, 2, reg, 1e-3)
        assert np.mean((X @ W + b).argmax(axis=1) == y) > 0.95


def test_l1_head_is_sparse_under_strong_penalty():
    gen = np.random.default_rng(5)
    X = gen.normal(size=(100, 5))
    y = (X[:, 0] > 0).astype(int)
    W, _ = fit_logistic_head(X, y, 2, 'l1', 0.2)
    # binary heads carry their weights in the class-1 column
    assert not W[:, 0].any()
    assert W[0, 1] > 0
    assert np.count_nonzero(W[1:, 1]) < 4


def _overlapping_groups(n_per_group=25, seed=6):
    gen = np.random.default_rng(seed)
    n = 4 * n_per_group
    groups = np.repeat(np.arange(4), n_per_group)
    labels, attributes = groups // 2, groups % 2
    features = gen.normal(size=(n, 3)) + 0.8 * labels[:, None]
    return SampleTable(np.arange(n), features, labels, groups, attributes)


def test_unregularized_head_is_the_maximum_likelihood_fit():
    samples = _overlapping_groups()
    X, y = samples.features, samples.labels
    for reg in ('l1', 'l2'):
        W, b = fit_logistic_head(X, y, 2, reg, 0.0)
        p = 1.0 / (1.0 + np.exp(-(X @ (W[:, 1] - W[:, 0]) + b[1] - b[0])))
        # the mean cross-entropy gradient vanishes at the unpenalized optimum
        assert np.abs(X.T @ (p - y) / len(y)).max() < 1e-4
        assert abs(np.mean(p - y)) < 1e-4


def test_dfr_with_zero_lambda_on_balanced_data_is_a_plain_refit():
    samples = _overlapping_groups()
    base = init_model(ModelConfig(arch='linear'), 3, 2, RngStream.derive(1, "base"))
    cfg = TrainConfig.for_method('dfr', dfr_reg='l2', dfr_lambda=0.0, dfr_subsets=1)
    retrained = dfr_retrain(base, samples, cfg, RngStream.derive(1, "dfr"), [0, 1, 2, 3])
    W, b = fit_logistic_head(samples.features, samples.labels, 2, 'l2', 0.0)
    assert retrained.weights[base.head_slice()] == pytest.approx(np.concatenate([W.ravel(), b]), abs=1e-4)


def test_balanced_subset_matches_smallest_group():
    groups = np.array([0] * 10 + [1] * 3 + [2] * 6)
    idx = balanced_subset(groups, [0, 1, 2], np.random.default_rng(0))
    assert np.bincount(groups[idx]).tolist() == [3, 3, 3]
    assert len(set(idx)) == len(idx)


def test_dfr_only_replaces_the_head(small_dataset):
    manifest, train, _ = small_dataset
    cfg = ModelConfig(arch='mlp', hidden=(8,))
    base = train_model(cfg, train, TrainConfig(lr=0.1, epochs=2, batch_size=32), RngStream.derive(3, "t"))
    dfr_cfg = TrainConfig.for_method('dfr', lr=0.1, epochs=2, batch_size=32, dfr_subsets=3)
    retrained = dfr_retrain(base, train, dfr_cfg, RngStream.derive(3, "dfr"), manifest.group_ids())
    head = base.head_slice()
    body = np.ones(len(base.weights), dtype=bool)
    body[head] = False
    assert np.array_equal(retrained.weights[body], base.weights[body])
    assert not np.array_equal(retrained.weights[head], base.weights[head])


def test_dfr_needs_every_group(small_dataset):
    _, train, _ = small_dataset
    model = init_model(ModelConfig(), train.n_features, 2, RngStream.derive(0, "x"))
    with pytest.raises(DataValidationError, match="group-balanced"):
        dfr_retrain(model, train, TrainConfig.for_method('dfr'), RngStream.derive(0, "y"), [0, 1, 2, 3, 7])


def test_train_config_validation():
    with pytest.raises(UsageError):
        TrainConfig(method='erm', dro_eta=0.1)
    with pytest.raises(UsageError):
        TrainConfig(method='dro')
    with pytest.raises(UsageError):
        TrainConfig.for_method('dfr', dfr_reg='l3')
    with pytest.raises(UsageError):
        ModelConfig(arch='linear', hidden=(4,))
    assert TrainConfig.for_method('dfr').base_config().method == 'erm'


def test_confidence_and_embeddings(small_dataset):
    _, train, _ = small_dataset
    linear = init_model(ModelConfig(), train.n_features, 2, RngStream.derive(0, "x"))
    conf, correct = true_class_confidence(linear, train)
    assert np.all((conf > 0) & (conf < 1))
    assert correct.dtype == bool
    assert np.array_equal(extract_embeddings(linear, train).matrix, train.features)

    mlp = init_model(ModelConfig(arch='mlp', hidden=(5,)), train.n_features, 2, RngStream.derive(0, "x"))
    assert extract_embeddings(mlp, train).shape == (len(train), 5)


def test_utility_reports_worst_group():
    features = np.array([[1.0], [1.0], [-1.0], [-1.0]])
    samples = SampleTable([0, 1, 2, 3], features, [1, 1, 0, 1], [3, 3, 0, 2], [1, 1, 0, 0])
    # x = 1 predicts class 1, x = -1 predicts class 0
    model = Model(config=ModelConfig(), dims=(1, 2), weights=[-1.0, 1.0, 0.0, 0.0])
    report = evaluate_utility(model, samples)
    assert report.accuracy == pytest.approx(0.75)
    assert report.worst_group == 2
    assert report.worst_group_accuracy == 0.0


def test_model_file_roundtrip_and_bad_magic(tmp_path, small_dataset):
    _, train, _ = small_dataset
    model = init_model(ModelConfig(arch='mlp', hidden=(6, 3), activation='tanh'), train.n_features, 2,
                       RngStream.derive(0, "m"))
    path = str(tmp_path / "m.spml")
    write_model(model, path)
    again = read_model(path)
    assert again.dims == model.dims
    assert again.config.activation == 'tanh'
    assert np.array_equal(again.weights, model.weights)

    (tmp_path / "bad.spml").write_bytes(b"NOPE" + b"\0" * 16)
    with pytest.raises(ParseError, match="magic"):
        read_model(str(tmp_path / "bad.spml"))
