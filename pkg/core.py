"""
Core value types shared by every stage of the audit pipeline.

Holds the dataset manifest, sample tables, embedding matrices, the seeded
random streams, the error hierarchy and the small file helpers (manifest,
dataset CSVs, atomic writes) that everything else builds on.
"""
import os
import hashlib
import logging
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field, asdict
from typing import List, Dict, Any, Optional, Sequence, Tuple, Union, Iterator

import numpy as np
import pandas as pd
import yaml

# --- Logging Setup ---
logger = logging.getLogger('spaudit.core')

PRNG_ALGORITHM = "philox4x64-10"
EXTERNAL_GENERATOR = "external"


# --- Error hierarchy (exit codes are read by main.py) ---
class SpauditError(Exception):
    """Base class for every error the toolkit raises on purpose."""
    exit_code = 1


class UsageError(SpauditError):
    """Bad flags, unknown config keys, inconsistent arguments."""
    exit_code = 1


class DataValidationError(SpauditError):
    """Input data that does not satisfy a documented contract."""
    exit_code = 2


class ParseError(DataValidationError):
    """Malformed input file; carries the offending line number when known."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = ""
        if path:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")


class CapacityError(DataValidationError):
    """A configuration asks for more structure than the feature space can hold."""


class NumericError(SpauditError):
    """Training diverged or a numeric routine had nothing to work with."""
    exit_code = 3


class DegenerateInputError(NumericError):
    """Input without the variance/classes a statistic needs (e.g. single-class ROC)."""


# --- Deterministic randomness ---
def purpose_stream_id(*purpose: Any) -> int:
    """Maps a purpose tag such as ("split", 3) to a stable 64-bit stream id."""
    tag = "/".join(str(p) for p in purpose).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(tag, digest_size=8).digest(), "little")


@dataclass(frozen=True)
class RngStream:
    """
    A named, reproducible random stream.

    The same (algorithm_id, seed, stream_id) always yields the same sequence:
    numpy's Philox counter-based generator keyed through a SeedSequence whose
    spawn key is the stream id.
    """
    seed: int
    stream_id: int = 0
    algorithm_id: str = PRNG_ALGORITHM

    def __post_init__(self):
        if self.algorithm_id != PRNG_ALGORITHM:
            raise UsageError(f"Unsupported PRNG algorithm '{self.algorithm_id}', only {PRNG_ALGORITHM} is available.")
        if not (0 <= self.seed < 2 ** 64) or not (0 <= self.stream_id < 2 ** 64):
            raise UsageError("RngStream seed and stream_id must be 64-bit unsigned integers.")

    @classmethod
    def derive(cls, run_seed: int, *purpose: Any) -> "RngStream":
        return cls(seed=int(run_seed), stream_id=purpose_stream_id(*purpose))

    def child(self, *purpose: Any) -> "RngStream":
        return RngStream(seed=self.seed, stream_id=purpose_stream_id(self.stream_id, *purpose))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.Philox(seq))


# --- Dataset description ---
@dataclass(frozen=True)
class GroupSpec:
    group_id: int
    class_id: int
    attribute_id: int
    count: int
    is_spurious: bool


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    n_samples: int
    n_classes: int
    groups: Tuple[GroupSpec, ...]
    generator_config: Union[Dict[str, Any], str]
    seed: int

    def group_ids(self) -> List[int]:
        return [g.group_id for g in self.groups]

    def spurious_groups(self) -> List[int]:
        return [g.group_id for g in self.groups if g.is_spurious]

    def group(self, group_id: int) -> GroupSpec:
        for g in self.groups:
            if g.group_id == group_id:
                return g
        raise KeyError(group_id)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'name': self.name,
            'n_samples': int(self.n_samples),
            'n_classes': int(self.n_classes),
            'groups': [
                {
                    'group_id': int(g.group_id),
                    'class_id': int(g.class_id),
                    'attribute_id': int(g.attribute_id),
                    'count': int(g.count),
                    'is_spurious': bool(g.is_spurious),
                }
                for g in self.groups
            ],
            'generator_config': self.generator_config if isinstance(self.generator_config, str) else dict(self.generator_config),
            'seed': int(self.seed),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetManifest":
        expected = {'name', 'n_samples', 'n_classes', 'groups', 'generator_config', 'seed'}
        if not isinstance(data, dict):
            raise ParseError("manifest must be a mapping")
        missing = expected - set(data)
        unknown = set(data) - expected
        if missing:
            raise ParseError(f"manifest is missing fields: {sorted(missing)}")
        if unknown:
            raise ParseError(f"manifest has unknown fields: {sorted(unknown)}")
        try:
            groups = tuple(GroupSpec(**g) for g in data['groups'])
        except TypeError as e:
            raise ParseError(f"malformed group entry: {e}")
        return cls(
            name=str(data['name']),
            n_samples=int(data['n_samples']),
            n_classes=int(data['n_classes']),
            groups=groups,
            generator_config=data['generator_config'],
            seed=int(data['seed']),
        )


@dataclass(frozen=True)
class SampleRecord:
    sample_id: int
    features: Tuple[float, ...]
    label: int
    group: int
    attribute: int


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class SampleTable:
    """
    Column-oriented, read-only view of a list of SampleRecords.

    Row order is meaningful: every model output, bitmap and embedding matrix is
    aligned with it.
    """
    sample_ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    attributes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'sample_ids', _frozen(np.asarray(self.sample_ids, dtype=np.int64)))
        object.__setattr__(self, 'features', _frozen(np.asarray(self.features, dtype=np.float64)))
        object.__setattr__(self, 'labels', _frozen(np.asarray(self.labels, dtype=np.int64)))
        object.__setattr__(self, 'groups', _frozen(np.asarray(self.groups, dtype=np.int64)))
        object.__setattr__(self, 'attributes', _frozen(np.asarray(self.attributes, dtype=np.int64)))
        n = len(self.sample_ids)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise DataValidationError(f"features must be an n x d matrix with n={n}, got shape {self.features.shape}")
        for name in ('labels', 'groups', 'attributes'):
            if len(getattr(self, name)) != n:
                raise DataValidationError(f"column '{name}' has {len(getattr(self, name))} entries, expected {n}")

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def records(self) -> Iterator[SampleRecord]:
        for i in range(len(self)):
            yield SampleRecord(
                sample_id=int(self.sample_ids[i]),
                features=tuple(float(v) for v in self.features[i]),
                label=int(self.labels[i]),
                group=int(self.groups[i]),
                attribute=int(self.attributes[i]),
            )

    @classmethod
    def from_records(cls, records: Sequence[SampleRecord]) -> "SampleTable":
        if not records:
            raise DataValidationError("cannot build a sample table from zero records")
        dims = {len(r.features) for r in records}
        if len(dims) != 1:
            raise DataValidationError(f"dimension mismatch: feature lengths {sorted(dims)}")
        return cls(
            sample_ids=[r.sample_id for r in records],
            features=[list(r.features) for r in records],
            labels=[r.label for r in records],
            groups=[r.group for r in records],
            attributes=[r.attribute for r in records],
        )

    def subset(self, index: Union[np.ndarray, Sequence[int]]) -> "SampleTable":
        index = np.asarray(index)
        return SampleTable(
            sample_ids=self.sample_ids[index],
            features=self.features[index],
            labels=self.labels[index],
            groups=self.groups[index],
            attributes=self.attributes[index],
        )

    def permuted(self, order: np.ndarray) -> "SampleTable":
        return self.subset(order)


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """n x d penultimate-layer features, rows aligned with sample_ids."""
    sample_ids: np.ndarray
    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'sample_ids', _frozen(np.asarray(self.sample_ids, dtype=np.int64)))
        object.__setattr__(self, 'matrix', _frozen(np.asarray(self.matrix, dtype=np.float64)))
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.sample_ids):
            raise DataValidationError(
                f"embedding matrix shape {self.matrix.shape} does not match {len(self.sample_ids)} sample ids")
        if not np.all(np.isfinite(self.matrix)):
            raise NumericError("embedding matrix contains non-finite entries")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.matrix.shape

    def restrict(self, mask: np.ndarray) -> "EmbeddingMatrix":
        return EmbeddingMatrix(self.sample_ids[mask], self.matrix[mask])


# --- Validation ---
@dataclass
class ValidationReport:
    violations: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, kind: str, detail: str):
        self.violations.append(f"{kind}: {detail}")

    def raise_if_failed(self, what: str = "dataset"):
        if not self.ok:
            raise DataValidationError(f"{what} failed validation: " + "; ".join(self.violations))


def validate_manifest(manifest: DatasetManifest, samples: Union[SampleTable, Sequence[SampleRecord]]) -> ValidationReport:
    """Checks a manifest against its samples. Violations are returned, never raised."""
    report = ValidationReport()

    if isinstance(samples, SampleTable):
        table = samples
    else:
        if len(samples) == 0:
            report.add("count mismatch", f"manifest declares {manifest.n_samples} samples, none supplied")
            return report
        dims = {len(r.features) for r in samples}
        if len(dims) != 1:
            report.add("dimension mismatch", f"feature lengths {sorted(dims)}")
            return report
        table = SampleTable.from_records(samples)

    if manifest.n_classes < 2:
        report.add("invalid manifest", f"n_classes={manifest.n_classes} must be at least 2")

    n_groups = len(manifest.groups)
    seen_ids = set()
    seen_pairs = set()
    for g in manifest.groups:
        if not 0 <= g.group_id < n_groups:
            report.add("invalid manifest", f"group id {g.group_id} outside [0, {n_groups})")
        if g.group_id in seen_ids:
            report.add("invalid manifest", f"duplicate group id {g.group_id}")
        seen_ids.add(g.group_id)
        if (g.class_id, g.attribute_id) in seen_pairs:
            report.add("invalid manifest", f"duplicate (class, attribute) pair ({g.class_id}, {g.attribute_id})")
        seen_pairs.add((g.class_id, g.attribute_id))
        if not 0 <= g.class_id < manifest.n_classes:
            report.add("invalid manifest", f"group {g.group_id} has class {g.class_id} outside [0, {manifest.n_classes})")
        if g.count < 0:
            report.add("invalid manifest", f"group {g.group_id} has negative count {g.count}")

    declared_total = sum(g.count for g in manifest.groups)
    if declared_total != manifest.n_samples:
        report.add("count mismatch", f"group counts sum to {declared_total}, manifest declares {manifest.n_samples}")
    if len(table) != manifest.n_samples:
        report.add("count mismatch", f"manifest declares {manifest.n_samples} samples, {len(table)} supplied")

    if len(np.unique(table.sample_ids)) != len(table):
        report.add("duplicate sample id", "sample ids are not unique")

    specs = {g.group_id: g for g in manifest.groups}
    unknown = sorted(set(int(g) for g in np.unique(table.groups)) - set(specs))
    for gid in unknown:
        report.add("unknown group", f"group id {gid} is not declared in the manifest")

    bad_labels = table.labels[(table.labels < 0) | (table.labels >= manifest.n_classes)]
    if len(bad_labels):
        report.add("unknown class", f"labels {sorted(set(int(v) for v in bad_labels))} outside [0, {manifest.n_classes})")

    for gid, spec in specs.items():
        in_group = table.groups == gid
        count = int(in_group.sum())
        if count != spec.count:
            report.add("count mismatch", f"group {gid} declares {spec.count} samples, {count} supplied")
        if count and (np.any(table.labels[in_group] != spec.class_id) or np.any(table.attributes[in_group] != spec.attribute_id)):
            report.add("group inconsistency", f"samples in group {gid} disagree with its (class, attribute) = ({spec.class_id}, {spec.attribute_id})")

    if report.ok:
        logger.debug(f"Manifest '{manifest.name}' validated against {len(table)} samples.")
    return report


# --- File helpers ---
@contextmanager
def atomic_write(path: str, mode: str = 'w', encoding: Optional[str] = 'utf-8'):
    """Writes through a temp file in the target directory, then renames into place."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        kwargs = {} if 'b' in mode else {'encoding': encoding, 'newline': ''}
        with os.fdopen(fd, mode, **kwargs) as handle:
            yield handle
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def write_dataframe(frame: pd.DataFrame, path: str):
    with atomic_write(path) as handle:
        frame.to_csv(handle, index=False, lineterminator="\n")


def read_csv_checked(path: str, required: Sequence[str]) -> pd.DataFrame:
    """Reads a CSV losslessly and checks the header carries the required columns."""
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except FileNotFoundError:
        raise ParseError("file not found", path=path)
    except pd.errors.EmptyDataError:
        raise ParseError("file is empty", path=path, line=1)
    except pd.errors.ParserError as e:
        raise ParseError(f"malformed CSV ({e})", path=path)
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise ParseError(f"missing column(s) {missing}", path=path, line=1)
    return frame


def manifest_to_yaml(manifest: DatasetManifest) -> str:
    return yaml.safe_dump(manifest.to_dict(), sort_keys=False, default_flow_style=False, allow_unicode=True)


def write_manifest(manifest: DatasetManifest, path: str):
    with atomic_write(path) as handle:
        handle.write(manifest_to_yaml(manifest))


def read_manifest(path: str) -> DatasetManifest:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = yaml.safe_load(f)
    except FileNotFoundError:
        raise ParseError("manifest not found", path=path)
    except yaml.YAMLError as e:
        line = e.problem_mark.line + 1 if getattr(e, 'problem_mark', None) else None
        raise ParseError(f"invalid YAML: {e}", path=path, line=line)
    return DatasetManifest.from_dict(data)


def sample_table_to_frame(table: SampleTable) -> pd.DataFrame:
    frame = pd.DataFrame({
        'sample_id': table.sample_ids,
        'group_id': table.groups,
        'class_id': table.labels,
        'attribute_id': table.attributes,
    })
    features = pd.DataFrame(table.features, columns=[f"f{j}" for j in range(table.n_features)])
    return pd.concat([frame, features], axis=1)


def write_samples(table: SampleTable, path: str):
    write_dataframe(sample_table_to_frame(table), path)


def read_samples(path: str) -> SampleTable:
    frame = read_csv_checked(path, ['sample_id', 'group_id', 'class_id', 'attribute_id'])
    feature_cols = [c for c in frame.columns if c.startswith('f') and c[1:].isdigit()]
    feature_cols.sort(key=lambda c: int(c[1:]))
    if not feature_cols:
        raise ParseError("no feature columns f0, f1, ...", path=path, line=1)
    if frame[feature_cols].isna().any().any():
        row = int(frame[feature_cols].isna().any(axis=1).to_numpy().argmax())
        raise ParseError("missing feature value", path=path, line=row + 2)
    return SampleTable(
        sample_ids=frame['sample_id'].to_numpy(),
        features=frame[feature_cols].to_numpy(dtype=np.float64),
        labels=frame['class_id'].to_numpy(),
        groups=frame['group_id'].to_numpy(),
        attributes=frame['attribute_id'].to_numpy(),
    )


def write_dataset(directory: str, manifest: DatasetManifest, train: SampleTable, test: Optional[SampleTable] = None):
    """Writes manifest.yaml, train.csv and (optionally) test.csv into a dataset directory."""
    write_manifest(manifest, os.path.join(directory, "manifest.yaml"))
    write_samples(train, os.path.join(directory, "train.csv"))
    if test is not None:
        write_samples(test, os.path.join(directory, "test.csv"))
    logger.info(f"Dataset '{manifest.name}' written to {directory}")


def read_dataset(directory: str, validate: bool = True) -> Tuple[DatasetManifest, SampleTable, Optional[SampleTable]]:
    manifest = read_manifest(os.path.join(directory, "manifest.yaml"))
    train = read_samples(os.path.join(directory, "train.csv"))
    test_path = os.path.join(directory, "test.csv")
    test = read_samples(test_path) if os.path.exists(test_path) else None
    if validate:
        validate_manifest(manifest, train).raise_if_failed(f"dataset '{directory}'")
    return manifest, train, test


def embeddings_to_frame(embeddings: EmbeddingMatrix) -> pd.DataFrame:
    frame = pd.DataFrame(embeddings.matrix, columns=[f"e{j}" for j in range(embeddings.shape[1])])
    frame.insert(0, 'sample_id', embeddings.sample_ids)
    return frame


def write_embeddings(embeddings: EmbeddingMatrix, path: str):
    write_dataframe(embeddings_to_frame(embeddings), path)


def read_embeddings(path: str) -> EmbeddingMatrix:
    frame = read_csv_checked(path, ['sample_id'])
    cols = [c for c in frame.columns if c.startswith('e') and c[1:].isdigit()]
    cols.sort(key=lambda c: int(c[1:]))
    if not cols:
        raise ParseError("no embedding columns e0, e1, ...", path=path, line=1)
    return EmbeddingMatrix(frame['sample_id'].to_numpy(), frame[cols].to_numpy(dtype=np.float64))


def dataclass_from_dict(cls, data: Optional[Dict[str, Any]], section: str):
    """Builds a config dataclass from a mapping, rejecting keys it does not declare."""
    data = dict(data or {})
    known = set(cls.__dataclass_fields__)
    unknown = sorted(set(data) - known)
    if unknown:
        raise UsageError(f"Unknown key(s) in config section '{section}': {unknown}")
    for key, value in list(data.items()):
        if isinstance(value, list):
            data[key] = tuple(value)
    try:
        return cls(**data)
    except TypeError as e:
        raise UsageError(f"Invalid config section '{section}': {e}")


def dataclass_to_dict(obj) -> Dict[str, Any]:
    out = asdict(obj)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}
