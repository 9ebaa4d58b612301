import glob
import os

import numpy as np
import pandas as pd
import pytest
import yaml

import main as spaudit_main
from main import main

SMALL_CONFIG = {
    'synthetic': {'n_train': 120, 'n_test': 60, 'd_core': 4, 'd_spur': 2, 'd_noise': 2, 'spur_strength': 0.9, 'seed': 4},
    'model': {'arch': 'mlp', 'hidden': [4]},
    'train': {'erm': {'epochs': 2, 'batch_size': 32}},
    'report': {'fprs': [0.1]},
}


@pytest.fixture
def cli(tmp_path):
    """Runs the CLI against a small config, logging under tmp_path/logs."""
    config = tmp_path / "config.yaml"
    config.write_text(yaml.safe_dump(SMALL_CONFIG))

    def run(*argv, config_path=str(config)):
        prefix = ["--log-dir", str(tmp_path / "logs")]
        if config_path:
            prefix += ["--config", config_path]
        return main(prefix + [str(a) for a in argv])
    return run


def test_full_audit_pipeline(cli, tmp_path):
    data, models = tmp_path / "data", tmp_path / "models"
    scores, results, report = tmp_path / "scores.csv", tmp_path / "results.csv", tmp_path / "report"

    assert cli("synth", "--out", data) == 0
    assert (data / "manifest.yaml").exists() and (data / "groups.csv").exists()

    assert cli("shadows", "--data", data, "--n", 4, "--targets", 2, "--out", scores, "--models-dir", models) == 0
    assert len(glob.glob(str(models / "model_*.spml"))) == 6

    assert cli("attack", "--scores", scores, "--attack", "lira_online", "--attack", "threshold", "--out", results) == 0
    frame = pd.read_csv(results)
    assert set(frame['attack']) == {'lira_online', 'threshold'}
    assert set(frame['target_id']) == {4, 5}

    assert cli("report", "--results", results, "--data", data, "--out", report) == 0
    for name in ("report.yaml", "report.md", "report.html", "roc_lira_online.svg", "roc_threshold.svg"):
        assert (report / name).exists(), name
    assert "(spurious)" in (report / "report.md").read_text()

    assert cli("mem", "--scores", scores, "--data", data, "--out", tmp_path / "mem") == 0
    assert (tmp_path / "mem" / "densities.csv").exists()


def test_embedding_commands(cli, tmp_path, capsys):
    data, models = tmp_path / "data", tmp_path / "models"
    assert cli("synth", "--out", data) == 0
    assert cli("shadows", "--data", data, "--n", 2, "--out", tmp_path / "s.csv", "--models-dir", models) == 0
    model_a, model_b = models / "model_0000.spml", models / "model_0001.spml"

    emb = tmp_path / "emb.csv"
    assert cli("embed", "--model", model_a, "--data", data, "--out", emb) == 0
    capsys.readouterr()
    assert cli("complexity", "--embeddings", emb, "--tau", 0.9, "--out", tmp_path / "evr.csv") == 0
    k = int(capsys.readouterr().out.strip())
    assert 1 <= k <= 4
    assert pd.read_csv(tmp_path / "evr.csv")['evr'].iloc[-1] == 1.0

    assert cli("cka", "--model-a", model_a, "--model-b", model_b, "--data", data, "--out", tmp_path / "cka.csv") == 0
    profile = pd.read_csv(tmp_path / "cka.csv", dtype={'group': str})
    assert profile['group'].iloc[0] == "total"
    assert profile['cka'].between(0.0, 1.0).all()

    assert cli("cka", "--a", emb, "--b", emb, "--out", tmp_path / "self.csv") == 0
    assert pd.read_csv(tmp_path / "self.csv")['cka'].iloc[0] == pytest.approx(1.0)


def test_usage_errors_exit_one(cli, tmp_path):
    assert cli("frobnicate") == 1
    assert cli("synth") == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({'attack': {'n_shadow': 3}}))
    assert cli("synth", "--out", tmp_path / "d", config_path=str(bad)) == 1
    assert cli("synth", "--out", tmp_path / "d", config_path=str(tmp_path / "missing.yaml")) == 1
    assert cli("cka", "--out", tmp_path / "c.csv") == 1


def test_malformed_input_exits_two(cli, tmp_path):
    scores = tmp_path / "scores.csv"
    scores.write_text("model_id,sample_id\n0,0\n")
    assert cli("attack", "--scores", scores, "--out", tmp_path / "r.csv") == 2
    assert cli("attack", "--scores", tmp_path / "nope.csv", "--out", tmp_path / "r.csv") == 2


def test_threads_from_environment(cli, tmp_path, monkeypatch):
    monkeypatch.setenv("SPAUDIT_THREADS", "3")
    assert cli("synth", "--out", tmp_path / "d") == 0
    log = open(glob.glob(str(tmp_path / "logs" / "spaudit_synth_*.log"))[0]).read()
    assert "threads 3" in log
    assert cli("--threads", 0, "synth", "--out", tmp_path / "d") == 1


def test_rerun_with_the_same_seed_is_byte_identical(cli, tmp_path):
    for run in ("a", "b"):
        assert cli("--seed", 7, "synth", "--out", tmp_path / run / "data") == 0
        assert cli("--threads", 2, "shadows", "--data", tmp_path / run / "data", "--n", 2, "--targets", 1,
                   "--out", tmp_path / run / "scores.csv") == 0
    for name in ("data/train.csv", "data/manifest.yaml", "scores.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_matrix_writes_achieved_fpr_next_to_tpr(cli, tmp_path):
    configs = tmp_path / "archs"
    configs.mkdir()
    (configs / "linear.yaml").write_text(yaml.safe_dump({'arch': 'linear'}))
    (configs / "mlp.yaml").write_text(yaml.safe_dump({'arch': 'mlp', 'hidden': [4]}))
    small = tmp_path / "small.yaml"
    small.write_text(yaml.safe_dump(dict(SMALL_CONFIG, attack={'n_shadows': 4, 'n_targets': 1})))

    out = tmp_path / "matrix.csv"
    assert cli("matrix", "--config-dir", configs, "--fpr", 0.1, "--out", out, config_path=str(small)) == 0
    tpr = pd.read_csv(out)
    achieved = pd.read_csv(tmp_path / "matrix_achieved_fpr.csv")
    assert list(achieved['shadow']) == list(tpr['shadow']) == ['linear', 'mlp']
    assert list(achieved.columns) == list(tpr.columns)
    assert ((achieved[['linear', 'mlp']] > 0) & (achieved[['linear', 'mlp']] <= 1)).all().all()
    assert (tmp_path / "matrix_summary.yaml").exists()


def test_numeric_library_failures_exit_three(cli, tmp_path, monkeypatch):
    def singular(args, cfg):
        raise np.linalg.LinAlgError("Singular matrix")

    def overflow(args, cfg):
        raise FloatingPointError("overflow encountered in exp")

    monkeypatch.setitem(spaudit_main.COMMANDS, 'synth', singular)
    assert cli("synth", "--out", tmp_path / "d") == 3
    monkeypatch.setitem(spaudit_main.COMMANDS, 'synth', overflow)
    assert cli("synth", "--out", tmp_path / "d") == 3
