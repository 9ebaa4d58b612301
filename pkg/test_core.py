import os

import numpy as np
import pytest

from core import (
    RngStream, SampleTable, DatasetManifest, GroupSpec, EmbeddingMatrix,
    SpauditError, UsageError, DataValidationError, ParseError, CapacityError, NumericError, DegenerateInputError,
    atomic_write, dataclass_from_dict, read_dataset, read_samples, validate_manifest, write_dataset,
    write_embeddings, read_embeddings,
)
from trainer import TrainConfig


def test_rng_stream_is_reproducible():
    a = RngStream.derive(7, "shadow", "split", 3).generator().random(5)
    b = RngStream.derive(7, "shadow", "split", 3).generator().random(5)
    c = RngStream.derive(7, "shadow", "split", 4).generator().random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_rng_child_streams_differ_from_parent():
    parent = RngStream.derive(1, "train", 0)
    assert parent.child("init").stream_id != parent.stream_id
    assert parent.child("init").stream_id == parent.child("init").stream_id


def test_rng_rejects_unknown_algorithm():
    with pytest.raises(UsageError):
        RngStream(seed=1, algorithm_id="mt19937")


def test_exit_codes():
    assert UsageError("x").exit_code == 1
    assert DataValidationError("x").exit_code == 2
    assert CapacityError("x").exit_code == 2
    assert NumericError("x").exit_code == 3
    assert issubclass(DegenerateInputError, NumericError)
    assert issubclass(ParseError, SpauditError)


def test_parse_error_carries_location():
    err = ParseError("bad value", path="scores.csv", line=12)
    assert err.line == 12
    assert str(err) == "scores.csv:12: bad value"


def test_sample_table_is_read_only_and_aligned():
    table = SampleTable([0, 1], [[0.0, 1.0], [1.0, 0.0]], [0, 1], [0, 3], [0, 1])
    with pytest.raises(ValueError):
        table.features[0, 0] = 5.0
    with pytest.raises(DataValidationError):
        SampleTable([0, 1], [[0.0, 1.0]], [0, 1], [0, 3], [0, 1])


def test_sample_table_records_roundtrip():
    table = SampleTable([4, 9], [[0.5, 1.0], [1.5, 0.0]], [0, 1], [1, 2], [1, 0])
    again = SampleTable.from_records(list(table.records()))
    assert np.array_equal(again.features, table.features)
    assert np.array_equal(again.sample_ids, [4, 9])


def test_validate_manifest_reports_violations(small_dataset):
    manifest, train, _ = small_dataset
    assert validate_manifest(manifest, train).ok

    groups = tuple(GroupSpec(g.group_id, g.class_id, g.attribute_id, g.count + (1 if g.group_id == 0 else 0), g.is_spurious)
                   for g in manifest.groups)
    broken = DatasetManifest(manifest.name, manifest.n_samples + 1, manifest.n_classes, groups,
                             manifest.generator_config, manifest.seed)
    report = validate_manifest(broken, train)
    assert not report.ok
    assert any(v.startswith("count mismatch") for v in report.violations)


def test_validate_manifest_flags_unknown_group(small_dataset):
    manifest, train, _ = small_dataset
    groups = train.groups.copy()
    groups[0] = 99
    bad = SampleTable(train.sample_ids, train.features, train.labels, groups, train.attributes)
    assert any(v.startswith("unknown group") for v in validate_manifest(manifest, bad).violations)


def test_dataset_directory_roundtrip(tmp_path, small_dataset):
    manifest, train, test = small_dataset
    write_dataset(str(tmp_path / "data"), manifest, train, test)
    manifest2, train2, test2 = read_dataset(str(tmp_path / "data"))
    assert manifest2 == manifest
    assert np.array_equal(train2.features, train.features)
    assert np.array_equal(test2.groups, test.groups)


def test_read_samples_reports_line_of_missing_feature(tmp_path):
    path = tmp_path / "train.csv"
    path.write_text("sample_id,group_id,class_id,attribute_id,f0,f1\n0,0,0,0,1.0,2.0\n1,0,0,0,,2.0\n")
    with pytest.raises(ParseError) as info:
        read_samples(str(path))
    assert info.value.line == 3


def test_atomic_write_leaves_nothing_on_failure(tmp_path):
    target = tmp_path / "out.txt"
    with pytest.raises(RuntimeError):
        with atomic_write(str(target)) as f:
            f.write("partial")
            raise RuntimeError("boom")
    assert not target.exists()
    assert os.listdir(tmp_path) == []


def test_embeddings_roundtrip_and_finite_check(tmp_path):
    emb = EmbeddingMatrix([3, 1], [[0.1, 0.2], [0.3, 0.4]])
    write_embeddings(emb, str(tmp_path / "e.csv"))
    again = read_embeddings(str(tmp_path / "e.csv"))
    assert np.array_equal(again.sample_ids, [3, 1])
    assert np.array_equal(again.matrix, emb.matrix)
    with pytest.raises(NumericError):
        EmbeddingMatrix([0], [[np.nan]])


def test_dataclass_from_dict_rejects_unknown_keys():
    cfg = dataclass_from_dict(TrainConfig, {'lr': 0.05}, 'train.erm')
    assert cfg.lr == 0.05
    with pytest.raises(UsageError, match="train.erm"):
        dataclass_from_dict(TrainConfig, {'learning_rate': 0.05}, 'train.erm')
