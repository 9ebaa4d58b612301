import os

import numpy as np
import pytest
import yaml

import experiments
from core import UsageError
from experiments import (
    EXPERIMENT_NAMES, ExperimentSpec, RunConfig, experiment_output, run_attacks, run_cka_profile, run_complexity,
    run_disparity, run_experiment, run_matrix, run_memorization, run_robust,
)
from metrics import TOTAL
from trainer import METHODS


def small_config(**sections):
    data = {
        'run': {'seed': 1},
        'synthetic': {'n_train': 200, 'n_test': 100, 'd_core': 4, 'd_spur': 2, 'd_noise': 2,
                      'spur_strength': 0.9, 'seed': 2},
        'model': {'arch': 'mlp', 'hidden': [8]},
        'train': {'erm': {'epochs': 3, 'batch_size': 32}, 'dfr': {'dfr_subsets': 2}},
        'attack': {'n_shadows': 8, 'n_targets': 2},
        'report': {'fprs': [0.1, 0.5]},
        'experiment': {'complexity_ks': [4, 2], 'matrix_fpr': 0.1},
        'matrix': {'linear': {'arch': 'linear'}, 'mlp-4': {'arch': 'mlp', 'hidden': [4]}},
    }
    data.update(sections)
    return RunConfig.from_dict(data)


def _spec(name, tmp_path, **sections):
    return ExperimentSpec.from_config(small_config(**sections), name, str(tmp_path / name))


def _assert_finished(out_dir, *files):
    assert not os.path.exists(out_dir + ".partial")
    for name in files:
        assert os.path.exists(os.path.join(out_dir, name)), name


def test_spec_validation(tmp_path):
    with pytest.raises(UsageError):
        _spec('disparity', tmp_path, attack={'n_shadows': 4, 'n_targets': 2})
    with pytest.raises(UsageError):
        _spec('complexity', tmp_path, experiment={'complexity_ks': [4, 1]})
    with pytest.raises(UsageError):
        _spec('tables', tmp_path)
    spec = ExperimentSpec.from_config(small_config(), 'memorization')
    assert spec.out_dir == os.path.join("runs", "memorization")


def test_run_config_sections_and_env():
    cfg = RunConfig.from_dict({'train': {'erm': {'epochs': 7}, 'dro': {'dro_eta': 0.5}}}, env={'SPAUDIT_THREADS': '3'})
    assert cfg.run.threads == 3
    assert cfg.train['dro'].epochs == 7
    assert cfg.train['dro'].dro_eta == 0.5
    assert RunConfig.from_dict({'run': {'threads': 2}}, env={'SPAUDIT_THREADS': '3'}).run.threads == 2
    with pytest.raises(UsageError):
        RunConfig.from_dict({'plots': {}})
    with pytest.raises(UsageError):
        RunConfig.from_dict({'attack': {'n_shadow': 8}})
    with pytest.raises(UsageError):
        RunConfig.from_dict({}, env={'SPAUDIT_THREADS': 'many'})


def test_shipped_config_loads():
    cfg = RunConfig.load(os.path.join(os.path.dirname(__file__), "config.yaml"))
    assert set(cfg.train) == set(METHODS)
    assert list(cfg.matrix) == ['linear', 'mlp-16', 'mlp-64']
    assert cfg.report.fprs == (0.001, 0.01, 0.1)


def test_failed_experiment_leaves_no_partial_directory(tmp_path):
    out = str(tmp_path / "run")
    with pytest.raises(RuntimeError):
        with experiment_output(out) as partial:
            open(os.path.join(partial, "half.csv"), 'w').close()
            raise RuntimeError("boom")
    assert not os.path.exists(out)
    assert not os.path.exists(out + ".partial")


def test_disparity(tmp_path):
    spec = _spec('disparity', tmp_path)
    outcome = run_disparity(spec)
    _assert_finished(spec.out_dir, "data/manifest.yaml", "scores.csv", "attack_results.csv", "report.yaml",
                     "roc.svg", "disparity.csv", "report.md", "report.html")
    assert list(outcome.disparity['requested_fpr']) == [0.1, 0.5]
    assert outcome.report.target_ids == (8, 9)
    assert TOTAL in outcome.report.groups()


def test_disparity_is_reproducible(tmp_path):
    a = run_disparity(_spec('disparity', tmp_path / "a"))
    b = run_disparity(_spec('disparity', tmp_path / "b"))
    assert a.report.table.equals(b.report.table)


def test_complexity(tmp_path):
    spec = _spec('complexity', tmp_path)
    outcome = run_complexity(spec)
    _assert_finished(spec.out_dir, "complexity.csv", "cka.csv", "k4/report.yaml", "k2/embeddings.csv", "report.md")
    assert list(outcome.table['k']) == [4, 2]
    assert set(outcome.reports) == {4, 2}
    assert (outcome.table['feature_complexity'] >= 1).all()
    assert set(outcome.cka['k']) == {2}


def test_robust(tmp_path):
    spec = _spec('robust', tmp_path)
    outcome = run_robust(spec)
    _assert_finished(spec.out_dir, "robust.csv", "utility.csv", "utility_summary.csv", "shadow_scores.csv",
                     "erm_report.yaml", "dro_report.yaml", "dfr_report.yaml", "dfr_roc.svg")
    assert set(outcome.reports) == set(METHODS)
    assert list(outcome.utility['method']) == list(METHODS)
    # every method trains on the same target splits
    assert np.array_equal(outcome.target_membership['erm'], outcome.target_membership['dro'])
    assert np.array_equal(outcome.target_membership['erm'], outcome.target_membership['dfr'])
    assert 'dfr_tpr' in outcome.comparison.columns


def test_memorization(tmp_path):
    spec = _spec('memorization', tmp_path)
    outcome = run_memorization(spec)
    _assert_finished(spec.out_dir, "memorization.csv", "memorization_groups.csv", "densities.csv", "summary.yaml")
    assert list(outcome.groups['group_id']) == [0, 1, 2, 3]
    assert (outcome.samples['d_score'] >= 0).all()
    with open(os.path.join(spec.out_dir, "summary.yaml")) as f:
        assert set(yaml.safe_load(f)) == {'t_statistic', 'p_value', 'excluded_samples'}


def test_cka_profile(tmp_path):
    spec = _spec('cka_profile', tmp_path)
    outcome = run_cka_profile(spec)
    _assert_finished(spec.out_dir, "cka_profile.csv", "report.html")
    profile = outcome.profile
    assert list(profile.columns) == ['group', 'n', 'erm_vs_dro', 'erm_vs_erm_seed', 'erm_vs_unrelated']
    assert profile['group'].iloc[0] == TOTAL
    total = profile.iloc[0]
    assert 0.0 <= total['erm_vs_unrelated'] <= 1.0
    assert total['erm_vs_dro'] > total['erm_vs_unrelated']


def test_matrix(tmp_path):
    spec = _spec('matrix', tmp_path)
    outcome = run_matrix(spec)
    _assert_finished(spec.out_dir, "matrix.csv", "matrix_achieved_fpr.csv", "summary.yaml")
    assert list(outcome.tpr.index) == ['linear', 'mlp-4']
    assert list(outcome.tpr.columns) == ['linear', 'mlp-4']
    assert set(outcome.diagonal_best) == {'linear', 'mlp-4'}


def test_attacks(tmp_path):
    spec = _spec('attacks', tmp_path)
    outcome = run_attacks(spec)
    _assert_finished(spec.out_dir, "attacks.csv", "report.yaml", "threshold_roc.svg")
    assert outcome.report.attacks() == ['lira_online', 'lira_offline', 'threshold']


def test_run_experiment_dispatches_and_cleans_up_on_failure(tmp_path, monkeypatch):
    def broken(spec, out):
        raise UsageError("broken")

    monkeypatch.setattr(experiments, "_attacks", broken)
    spec = _spec('attacks', tmp_path)
    with pytest.raises(UsageError):
        run_experiment(spec)
    assert not os.path.exists(spec.out_dir)
    assert not os.path.exists(spec.out_dir + ".partial")
    assert set(experiments.EXPERIMENTS) == set(EXPERIMENT_NAMES)
