import math

import numpy as np
import pytest

from analysis import (
    cross_config_attack_matrix, embedding_cka_profile, feature_complexity, hsic, kde_density, label_memorization,
    linear_cka, memorization_disparity_test, memorization_report, privacy_score_d,
)
from attack import GaussianStats, attack_targets
from attack_factory import get_attack
from conftest import make_scores
from core import DataValidationError, DegenerateInputError, EmbeddingMatrix, UsageError
from metrics import TOTAL, report_from_results
from shadows import audit_scores


def test_privacy_score_d():
    stats = GaussianStats(np.arange(2), np.array([2.0, 1.0]), np.array([1.0, 1.0]), np.array([0.0, 1.0]),
                          np.array([1.0, 1.0]), np.array([2, 0]), np.array([2, 2]), "per_example")
    d = privacy_score_d(stats)
    assert d[0] == pytest.approx(1.0)
    assert math.isnan(d[1])


def test_label_memorization():
    correct = np.array([[1, 1], [1, 0], [0, 1], [0, 0]], dtype=bool)
    membership = np.array([[1, 1], [1, 0], [0, 1], [0, 0]], dtype=bool)
    mem = label_memorization(correct, membership)
    # always right when IN, always wrong when OUT
    assert list(mem) == [1.0, 1.0]
    mem = label_memorization(correct, np.ones_like(membership))
    assert np.isnan(mem).all()


def test_kde_integrates_to_one():
    values = np.random.default_rng(0).normal(size=300)
    for rule in ("scott", "silverman", 0.3):
        curve = kde_density(values, bandwidth_rule=rule)
        assert len(curve.grid) == 512
        assert curve.integral() == pytest.approx(1.0, abs=1e-2)
    assert kde_density(values, bandwidth_rule=0.3).bandwidth == pytest.approx(0.3)


def test_kde_zero_variance_and_errors():
    curve = kde_density(np.full(10, 2.0))
    assert curve.bandwidth == 1e-3
    assert curve.integral() == pytest.approx(1.0, abs=1e-2)
    with pytest.raises(DataValidationError):
        kde_density([1.0])
    with pytest.raises(UsageError):
        kde_density([1.0, 2.0, 3.0], bandwidth_rule="wide")


def test_linear_cka_invariances():
    gen = np.random.default_rng(1)
    X = gen.normal(size=(200, 6))
    Q, _ = np.linalg.qr(gen.normal(size=(6, 6)))
    assert linear_cka(X, X) == pytest.approx(1.0)
    assert linear_cka(X, 3.0 * X @ Q + 5.0) == pytest.approx(1.0)
    assert linear_cka(X, gen.normal(size=(200, 6))) < 0.2
    Y = gen.normal(size=(200, 3))
    assert hsic(X, Y) == pytest.approx(hsic(Y, X))


def test_linear_cka_errors():
    X = np.random.default_rng(2).normal(size=(10, 3))
    with pytest.raises(DegenerateInputError):
        linear_cka(X, np.ones((10, 2)))
    with pytest.raises(DataValidationError):
        linear_cka(X, X[:9])
    with pytest.raises(DataValidationError):
        linear_cka(EmbeddingMatrix(np.arange(10), X), EmbeddingMatrix(np.arange(10)[::-1], X))


def test_feature_complexity_finds_the_rank():
    gen = np.random.default_rng(3)
    X = gen.normal(size=(100, 2)) @ gen.normal(size=(2, 10))
    fc = feature_complexity(X, tau=1.0)
    assert fc.k == 2
    assert fc.evr[-1] == 1.0
    assert np.all(np.diff(fc.evr) >= 0)
    # more dimensions than rows decomposes the smaller Gram matrix
    wide = gen.normal(size=(5, 20))
    assert len(feature_complexity(wide, 0.5).eigenvalues) == 5
    with pytest.raises(UsageError):
        feature_complexity(X, tau=0.0)


def test_feature_complexity_grows_with_spread():
    gen = np.random.default_rng(4)
    concentrated = gen.normal(size=(300, 8)) * np.array([10, 1, 1, 1, 1, 1, 1, 1])
    isotropic = gen.normal(size=(300, 8))
    assert feature_complexity(concentrated, 0.9).k < feature_complexity(isotropic, 0.9).k


def test_cka_profile_skips_tiny_groups():
    gen = np.random.default_rng(5)
    A = EmbeddingMatrix(np.arange(12), gen.normal(size=(12, 3)))
    groups = np.array([0] * 6 + [1] * 5 + [2])
    profile = embedding_cka_profile(A, A, groups)
    assert list(profile['group']) == [TOTAL, "0", "1"]
    assert np.allclose(profile['cka'], 1.0)


def test_memorization_report_and_disparity_test():
    gen = np.random.default_rng(6)
    n_models, n_samples = 8, 40
    membership = (np.indices((n_models, n_samples)).sum(axis=0) % 2) == 0
    groups = np.array([1] * 10 + [0] * 30)
    # group 1 samples gain far more confidence from being IN than group 0 samples
    gap = np.where(groups == 1, 0.5, 0.05)
    confidence = np.clip(0.4 + membership * gap + gen.normal(0, 0.02, membership.shape), 0.01, 0.99)
    scores = make_scores(confidence, membership, groups=groups)
    report = memorization_report(scores, "per_example")
    assert len(report.samples) == n_samples
    assert set(report.densities) == {0, 1}
    means = report.groups.set_index('group_id')['d_mean']
    assert means[1] > means[0]
    t, p = memorization_disparity_test(report, [1])
    assert t > 0 and p < 0.01


def test_memorization_report_lists_excluded_samples():
    confidence = np.array([[0.9, 0.8], [0.7, 0.6], [0.3, 0.5]])
    membership = np.array([[1, 1], [0, 1], [1, 1]], dtype=bool)
    report = memorization_report(make_scores(confidence, membership))
    assert report.excluded == (1,)
    assert list(report.samples['sample_id']) == [0]


def test_one_by_one_matrix_equals_a_plain_audit(small_dataset, linear_model, fast_erm):
    manifest, train, _ = small_dataset
    matrix = cross_config_attack_matrix({'lin': linear_model}, {'lin': linear_model}, manifest, train, fast_erm,
                                        fpr=0.1, n_shadows=4, n_targets=2, seed=8)
    scores = audit_scores(manifest, train, linear_model, fast_erm, n_shadows=4, n_targets=2, seed=8)
    report = report_from_results(attack_targets(scores, get_attack("lira_online")), [0.1], per_group=False)
    assert matrix.tpr.loc['lin', 'lin'] == pytest.approx(report.value(TOTAL, 0.1))
    assert matrix.diagonal_best == {'lin': True}
