"""
Desk-scale datasets with a controllable spurious correlation.

Each sample has a core block whose mean points along its class direction, a
spurious block whose mean points along its attribute direction, and a pure
noise block. In the training split the attribute follows the class pattern
with probability p_maj; in the test split it is drawn independently of the
label, so the shortcut only pays off in training.
"""
import math
import logging
from dataclasses import dataclass, asdict, replace
from typing import Dict, List, Tuple, Optional

import numpy as np
import pandas as pd
from sklearn.metrics import mutual_info_score

from core import (
    DatasetManifest, GroupSpec, SampleTable, RngStream,
    CapacityError, UsageError,
)

logger = logging.getLogger('spaudit.synthdata')


@dataclass(frozen=True)
class SyntheticConfig:
    n_classes: int = 2
    n_attributes: int = 2
    d_core: int = 10
    d_spur: int = 5
    d_noise: int = 5
    core_sep: float = 1.0
    spur_sep: float = 2.0
    core_std: float = 1.0
    spur_std: float = 1.0
    noise_std: float = 1.0
    spur_strength: float = 0.95
    n_train: int = 2000
    n_test: int = 2000
    seed: int = 0
    name: str = "synthetic"
    pattern_block: int = 1

    def validate(self):
        if self.n_classes < 2:
            raise UsageError(f"n_classes must be at least 2, got {self.n_classes}")
        if self.n_attributes < 2:
            raise UsageError(f"n_attributes must be at least 2, got {self.n_attributes}")
        if self.d_core < 1 or self.d_spur < 1 or self.d_noise < 0:
            raise UsageError("d_core and d_spur must be >= 1 and d_noise >= 0")
        if not 0.0 <= self.spur_strength <= 1.0:
            raise UsageError(f"spur_strength must lie in [0, 1], got {self.spur_strength}")
        if min(self.core_std, self.spur_std, self.noise_std) < 0:
            raise UsageError("standard deviations must be non-negative")
        minimum = 2 * self.n_classes
        if self.n_train < minimum or self.n_test < minimum:
            raise UsageError(f"n_train and n_test must be at least 2*K = {minimum}")
        # One-hot directions: a block of width d holds at most d distinct directions.
        if self.pattern_block < 1:
            raise UsageError(f"pattern_block must be >= 1, got {self.pattern_block}")
        if self.n_classes > self.d_core:
            raise CapacityError(f"{self.n_classes} classes need d_core >= {self.n_classes}, got {self.d_core}")
        if self.n_attributes > self.d_spur:
            raise CapacityError(f"{self.n_attributes} attributes need d_spur >= {self.n_attributes}, got {self.d_spur}")

    @property
    def d_total(self) -> int:
        return self.d_core + self.d_spur + self.d_noise

    def spurious_block(self) -> Tuple[int, int]:
        """Column range [start, stop) of the spurious block."""
        return self.d_core, self.d_core + self.d_spur


def pattern(label: np.ndarray, n_attributes: int, block: int = 1) -> np.ndarray:
    """
    The majority attribute of each class: y mod A, or (y // block) mod A so that
    runs of `block` consecutive classes share one attribute and survive merging.
    """
    return (np.asarray(label) // block) % n_attributes


def enumerate_groups(n_classes: int, n_attributes: int) -> List[Tuple[int, int, int]]:
    """(group_id, class_id, attribute_id) for every (y, a) pair, class-major."""
    return [(y * n_attributes + a, y, a) for y in range(n_classes) for a in range(n_attributes)]


def _build_manifest(name: str, labels: np.ndarray, attributes: np.ndarray, n_classes: int,
                    n_attributes: int, patterns: np.ndarray, generator_config, seed: int) -> DatasetManifest:
    groups = []
    for gid, y, a in enumerate_groups(n_classes, n_attributes):
        count = int(np.sum((labels == y) & (attributes == a)))
        groups.append(GroupSpec(
            group_id=gid, class_id=y, attribute_id=a, count=count,
            is_spurious=bool(a != patterns[y]),
        ))
    return DatasetManifest(
        name=name, n_samples=int(len(labels)), n_classes=n_classes, groups=tuple(groups),
        generator_config=generator_config, seed=int(seed),
    )


def _draw_split(config: SyntheticConfig, n: int, train: bool, gen: np.random.Generator,
                first_id: int) -> SampleTable:
    K, A = config.n_classes, config.n_attributes
    labels = gen.integers(0, K, size=n)
    if train:
        majority = gen.random(n) < config.spur_strength
        # Minority samples take one of the other A-1 attributes uniformly.
        shift = gen.integers(1, A, size=n)
        natural = pattern(labels, A, config.pattern_block)
        attributes = np.where(majority, natural, (natural + shift) % A)
    else:
        attributes = gen.integers(0, A, size=n)

    core = gen.normal(0.0, 1.0, size=(n, config.d_core)) * config.core_std
    core[np.arange(n), labels] += config.core_sep
    spur = gen.normal(0.0, 1.0, size=(n, config.d_spur)) * config.spur_std
    spur[np.arange(n), attributes] += config.spur_sep
    noise = gen.normal(0.0, 1.0, size=(n, config.d_noise)) * config.noise_std

    return SampleTable(
        sample_ids=np.arange(first_id, first_id + n),
        features=np.hstack([core, spur, noise]),
        labels=labels,
        groups=labels * A + attributes,
        attributes=attributes,
    )


def generate_spurious_dataset(config: SyntheticConfig) -> Tuple[DatasetManifest, SampleTable, SampleTable]:
    """Returns (manifest of the train split, train samples, test samples)."""
    config.validate()
    train = _draw_split(config, config.n_train, True, RngStream.derive(config.seed, "synth", "train").generator(), 0)
    test = _draw_split(config, config.n_test, False, RngStream.derive(config.seed, "synth", "test").generator(), config.n_train)
    patterns = pattern(np.arange(config.n_classes), config.n_attributes, config.pattern_block)
    manifest = _build_manifest(config.name, train.labels, train.attributes, config.n_classes,
                               config.n_attributes, patterns, asdict(config), config.seed)
    logger.info(f"Generated '{config.name}': K={config.n_classes}, p_maj={config.spur_strength}, "
                f"{config.n_train} train / {config.n_test} test samples, d={config.d_total}")
    return manifest, train, test


def merge_classes(manifest: DatasetManifest, samples: SampleTable, k_new: int,
                  n_attributes: Optional[int] = None) -> Tuple[DatasetManifest, SampleTable]:
    """
    Collapses K classes into k_new contiguous blocks of size ceil(K / k_new).

    Features, sample ids and row order are untouched; groups and spurious flags
    are re-derived over (new class, attribute). A merged class takes the most
    common pattern among the classes it absorbs.
    """
    K = manifest.n_classes
    if k_new > K or k_new < 2:
        raise UsageError(f"k_new must lie in [2, {K}], got {k_new}")
    block = math.ceil(K / k_new)
    if math.ceil(K / block) != k_new:
        raise UsageError(f"{K} classes do not split into {k_new} contiguous blocks of size {block}")

    if n_attributes is None:
        if isinstance(manifest.generator_config, dict) and 'n_attributes' in manifest.generator_config:
            n_attributes = int(manifest.generator_config['n_attributes'])
        else:
            n_attributes = max(g.attribute_id for g in manifest.groups) + 1

    labels = samples.labels // block
    merged = SampleTable(
        sample_ids=samples.sample_ids,
        features=samples.features,
        labels=labels,
        groups=labels * n_attributes + samples.attributes,
        attributes=samples.attributes,
    )
    old_patterns = class_patterns(manifest, samples, n_attributes)
    patterns = np.zeros(k_new, dtype=np.int64)
    for c in range(k_new):
        counts = np.bincount(old_patterns[c * block:(c + 1) * block], minlength=n_attributes)
        patterns[c] = int(counts.argmax())
        tied = np.flatnonzero(counts == counts.max())
        if len(tied) > 1:
            logger.warning(f"Merged class {c} absorbs a tie between attributes {tied.tolist()}; "
                           f"using attribute {patterns[c]} as its majority pattern")
    generator_config = manifest.generator_config
    if isinstance(generator_config, dict):
        generator_config = dict(generator_config, merged_from=K, n_classes=k_new,
                                class_patterns=[int(p) for p in patterns])
    new_manifest = _build_manifest(f"{manifest.name}-k{k_new}", merged.labels, merged.attributes,
                                   k_new, n_attributes, patterns, generator_config, manifest.seed)
    logger.info(f"Merged {K} classes into {k_new} (block size {block})")
    return new_manifest, merged


def class_patterns(manifest: DatasetManifest, samples: SampleTable, n_attributes: int) -> np.ndarray:
    """
    The majority attribute of every class: recorded patterns or generator
    settings when present, otherwise the non-spurious group of each class in
    the manifest, otherwise the most frequent attribute in `samples`.
    """
    K = manifest.n_classes
    config = manifest.generator_config if isinstance(manifest.generator_config, dict) else {}
    if 'class_patterns' in config:
        return np.asarray(config['class_patterns'], dtype=np.int64)
    if 'n_attributes' in config:
        return pattern(np.arange(K), n_attributes, int(config.get('pattern_block', 1)))
    patterns = np.zeros(K, dtype=np.int64)
    for y in range(K):
        natural = [g.attribute_id for g in manifest.groups if g.class_id == y and not g.is_spurious]
        if len(natural) == 1:
            patterns[y] = natural[0]
        else:
            patterns[y] = int(np.bincount(samples.attributes[samples.labels == y], minlength=n_attributes).argmax())
    return patterns


def relabel_manifest(manifest: DatasetManifest, samples: SampleTable) -> DatasetManifest:
    """Manifest describing `samples` with the group structure of `manifest` (used for test splits)."""
    groups = tuple(replace(g, count=int(np.sum(samples.groups == g.group_id))) for g in manifest.groups)
    return replace(manifest, n_samples=len(samples), groups=groups)


@dataclass
class GroupStats:
    groups: pd.DataFrame
    label_marginal: pd.Series
    attribute_marginal: pd.Series


def group_stats(manifest: DatasetManifest, samples: SampleTable) -> GroupStats:
    """Per-group counts plus label and attribute marginals. Empty groups are kept."""
    counts = pd.Series(samples.groups).value_counts()
    n = max(len(samples), 1)
    rows = []
    for g in manifest.groups:
        count = int(counts.get(g.group_id, 0))
        rows.append({
            'group_id': g.group_id,
            'class_id': g.class_id,
            'attribute_id': g.attribute_id,
            'is_spurious': g.is_spurious,
            'count': count,
            'fraction': count / n,
        })
    table = pd.DataFrame(rows, columns=['group_id', 'class_id', 'attribute_id', 'is_spurious', 'count', 'fraction'])
    label_marginal = pd.Series(samples.labels).value_counts().reindex(range(manifest.n_classes), fill_value=0) / n
    n_attr = max(g.attribute_id for g in manifest.groups) + 1
    attribute_marginal = pd.Series(samples.attributes).value_counts().reindex(range(n_attr), fill_value=0) / n
    label_marginal.name = 'label_fraction'
    attribute_marginal.name = 'attribute_fraction'
    return GroupStats(groups=table, label_marginal=label_marginal, attribute_marginal=attribute_marginal)


def attribute_label_mutual_information(samples: SampleTable) -> float:
    """Empirical mutual information (nats) between attribute and label."""
    return float(mutual_info_score(samples.labels, samples.attributes))
