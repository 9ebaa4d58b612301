"""
Shadow-model orchestration: group-stratified IN/OUT splits, training one model
per split, and collecting every model's true-class confidence on every sample
into a ScoreSet.

Splits and training order are drawn in sample-id space, so permuting the rows
of the input table permutes the resulting ScoreSet columns and nothing else.
"""
import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core import (
    DatasetManifest, SampleTable, RngStream,
    UsageError, DataValidationError, ParseError,
    read_csv_checked, write_dataframe,
)
from trainer import Model, ModelConfig, TrainConfig, train_model, true_class_confidence

logger = logging.getLogger('spaudit.shadows')

ROLES = ('shadow', 'target')
SCORE_COLUMNS = ['model_id', 'sample_id', 'role', 'method', 'is_member', 'group_id', 'class_id', 'confidence', 'correct']
PROTOCOLS = ('separate', 'loo')


@dataclass(frozen=True, eq=False)
class SplitPlan:
    n_models: int
    sample_ids: np.ndarray
    membership: np.ndarray
    stratified: bool
    frac: float
    seed: int
    purpose: str = "shadow"
    coverage_violations: Tuple[int, ...] = ()

    def __post_init__(self):
        membership = np.array(self.membership, dtype=bool, copy=True)
        membership.setflags(write=False)
        object.__setattr__(self, 'membership', membership)
        if membership.shape != (self.n_models, len(self.sample_ids)):
            raise DataValidationError(f"membership shape {membership.shape} != ({self.n_models}, {len(self.sample_ids)})")


def _id_order(positions: np.ndarray, sample_ids: np.ndarray) -> np.ndarray:
    return positions[np.argsort(sample_ids[positions], kind='stable')]


def _draw_plan(manifest: DatasetManifest, samples: SampleTable, n_models: int, frac: float,
               stratified: bool, seed: int, purpose: str) -> SplitPlan:
    n = len(samples)
    membership = np.zeros((n_models, n), dtype=bool)
    if stratified:
        pools = []
        for g in manifest.groups:
            positions = np.flatnonzero(samples.groups == g.group_id)
            if len(positions) == 0:
                logger.warning(f"Group {g.group_id} has no samples; skipped in the {purpose} split plan.")
                continue
            pools.append(_id_order(positions, samples.sample_ids))
    else:
        pools = [_id_order(np.arange(n), samples.sample_ids)]

    for k in range(n_models):
        gen = RngStream.derive(seed, purpose, "split", k).generator()
        for pool in pools:
            # str() keeps the decimal the user wrote, so 0.07 * 100 is exactly 7
            exact = Fraction(str(frac)) * len(pool)
            # ceil on even models, floor on odd ones keeps the average at frac * n_g
            n_in = math.ceil(exact) if k % 2 == 0 else math.floor(exact)
            membership[k, gen.choice(pool, n_in, replace=False)] = True

    violations: Tuple[int, ...] = ()
    if n_models >= 4:
        in_counts = membership.sum(axis=0)
        bad = (in_counts == 0) | (in_counts == n_models)
        violations = tuple(int(s) for s in samples.sample_ids[bad])
        if violations:
            logger.warning(f"{len(violations)} sample(s) are IN for none or all of the {n_models} {purpose} models.")

    return SplitPlan(n_models=n_models, sample_ids=samples.sample_ids, membership=membership,
                     stratified=stratified, frac=frac, seed=seed, purpose=purpose,
                     coverage_violations=violations)


def plan_splits(manifest: DatasetManifest, samples: SampleTable, n_models: int, frac: float = 0.5,
                stratified: bool = True, seed: int = 0, purpose: str = "shadow") -> SplitPlan:
    """Independent per-model IN halves; stratified plans sample each group separately."""
    if n_models < 2:
        raise UsageError(f"A split plan needs at least 2 models, got {n_models}")
    if not 0.0 < frac < 1.0:
        raise UsageError(f"frac must lie in (0, 1), got {frac}")
    return _draw_plan(manifest, samples, n_models, frac, stratified, seed, purpose)


@dataclass(frozen=True, eq=False)
class ScoreSet:
    """Per-(model, sample) true-class confidence, correctness and membership."""
    model_ids: np.ndarray
    sample_ids: np.ndarray
    confidence: np.ndarray
    correct: np.ndarray
    membership: np.ndarray
    groups: np.ndarray
    classes: np.ndarray
    roles: Tuple[str, ...]
    methods: Tuple[str, ...]

    def __post_init__(self):
        for name, dtype in (('model_ids', np.int64), ('sample_ids', np.int64), ('confidence', np.float64),
                            ('correct', bool), ('membership', bool), ('groups', np.int64), ('classes', np.int64)):
            array = np.array(getattr(self, name), dtype=dtype, copy=True)
            array.setflags(write=False)
            object.__setattr__(self, name, array)
        object.__setattr__(self, 'roles', tuple(self.roles))
        object.__setattr__(self, 'methods', tuple(self.methods))
        shape = (len(self.model_ids), len(self.sample_ids))
        for name in ('confidence', 'correct', 'membership'):
            if getattr(self, name).shape != shape:
                raise DataValidationError(f"ScoreSet.{name} has shape {getattr(self, name).shape}, expected {shape}")
        if len(self.groups) != shape[1] or len(self.classes) != shape[1]:
            raise DataValidationError("ScoreSet sample metadata is not aligned with the sample ids")
        if len(self.roles) != shape[0] or len(self.methods) != shape[0]:
            raise DataValidationError("ScoreSet roles/methods are not aligned with the model ids")
        if any(r not in ROLES for r in self.roles):
            raise DataValidationError(f"unknown role(s) {sorted(set(self.roles) - set(ROLES))}")
        if np.any(~((self.confidence > 0.0) & (self.confidence < 1.0))):
            raise DataValidationError("confidences must lie in the open unit interval")

    @property
    def n_models(self) -> int:
        return len(self.model_ids)

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    def role_mask(self, role: str) -> np.ndarray:
        return np.array([r == role for r in self.roles], dtype=bool)

    def row(self, model_id: int) -> int:
        hits = np.flatnonzero(self.model_ids == model_id)
        if len(hits) == 0:
            raise DataValidationError(f"model {model_id} is not in the score set")
        return int(hits[0])

    def select(self, rows: Sequence[int]) -> "ScoreSet":
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return ScoreSet(
            model_ids=self.model_ids[rows], sample_ids=self.sample_ids,
            confidence=self.confidence[rows], correct=self.correct[rows], membership=self.membership[rows],
            groups=self.groups, classes=self.classes,
            roles=tuple(self.roles[i] for i in rows), methods=tuple(self.methods[i] for i in rows),
        )

    def with_role(self, role: str) -> "ScoreSet":
        return ScoreSet(
            model_ids=self.model_ids, sample_ids=self.sample_ids, confidence=self.confidence,
            correct=self.correct, membership=self.membership, groups=self.groups, classes=self.classes,
            roles=(role,) * self.n_models, methods=self.methods,
        )

    @classmethod
    def concat(cls, sets: Sequence["ScoreSet"]) -> "ScoreSet":
        first = sets[0]
        for other in sets[1:]:
            if not np.array_equal(other.sample_ids, first.sample_ids):
                raise DataValidationError("cannot concatenate score sets over different samples")
        model_ids = np.concatenate([s.model_ids for s in sets])
        if len(np.unique(model_ids)) != len(model_ids):
            raise DataValidationError("duplicate model ids across concatenated score sets")
        return cls(
            model_ids=model_ids, sample_ids=first.sample_ids,
            confidence=np.vstack([s.confidence for s in sets]),
            correct=np.vstack([s.correct for s in sets]),
            membership=np.vstack([s.membership for s in sets]),
            groups=first.groups, classes=first.classes,
            roles=tuple(r for s in sets for r in s.roles),
            methods=tuple(m for s in sets for m in s.methods),
        )


def _check_alignment(plan: SplitPlan, samples: SampleTable):
    if not np.array_equal(plan.sample_ids, samples.sample_ids):
        raise DataValidationError("split plan and dataset disagree on sample ids or their order")


def train_planned_models(plan: SplitPlan, samples: SampleTable, model_cfg: ModelConfig, train_cfg: TrainConfig,
                         n_classes: Optional[int] = None, group_ids: Optional[Sequence[int]] = None,
                         threads: int = 1) -> List[Model]:
    """One model per plan row, trained on its IN half. Any failure aborts the whole batch."""
    _check_alignment(plan, samples)

    def train_one(k: int) -> Model:
        positions = _id_order(np.flatnonzero(plan.membership[k]), samples.sample_ids)
        rng = RngStream.derive(plan.seed, plan.purpose, "train", k)
        model = train_model(model_cfg, samples.subset(positions), train_cfg, rng, n_classes, group_ids)
        logger.info(f"Trained {plan.purpose} model {k + 1}/{plan.n_models} ({train_cfg.method}, {model_cfg.label})")
        return model

    if threads <= 1:
        return [train_one(k) for k in range(plan.n_models)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(train_one, k) for k in range(plan.n_models)]
        models = []
        for k, future in enumerate(futures):
            try:
                models.append(future.result())
            except Exception:
                logger.error(f"{plan.purpose} model {k} failed; no partial score set is produced.")
                raise
        return models


def score_models(models: Sequence[Model], plan: SplitPlan, samples: SampleTable, role: str, method: str,
                 first_model_id: int = 0) -> ScoreSet:
    """Queries every model on every sample, members and non-members alike."""
    _check_alignment(plan, samples)
    if len(models) != plan.n_models:
        raise DataValidationError(f"{len(models)} models for a plan of {plan.n_models}")
    confidence = np.empty((plan.n_models, len(samples)))
    correct = np.empty((plan.n_models, len(samples)), dtype=bool)
    for k, model in enumerate(models):
        confidence[k], correct[k] = true_class_confidence(model, samples)
    return ScoreSet(
        model_ids=np.arange(first_model_id, first_model_id + plan.n_models), sample_ids=samples.sample_ids,
        confidence=confidence, correct=correct, membership=plan.membership,
        groups=samples.groups, classes=samples.labels,
        roles=(role,) * plan.n_models, methods=(method,) * plan.n_models,
    )


def run_shadows(plan: SplitPlan, samples: SampleTable, model_cfg: ModelConfig, train_cfg: TrainConfig,
                role: str = "shadow", first_model_id: int = 0, n_classes: Optional[int] = None,
                group_ids: Optional[Sequence[int]] = None, threads: int = 1) -> ScoreSet:
    models = train_planned_models(plan, samples, model_cfg, train_cfg, n_classes, group_ids, threads)
    return score_models(models, plan, samples, role, train_cfg.method, first_model_id)


def audit_scores(manifest: DatasetManifest, samples: SampleTable, model_cfg: ModelConfig,
                 shadow_cfg: TrainConfig, target_cfg: Optional[TrainConfig] = None,
                 n_shadows: int = 16, n_targets: int = 8, seed: int = 0, protocol: str = "separate",
                 frac: float = 0.5, stratified: bool = True, threads: int = 1,
                 target_model_cfg: Optional[ModelConfig] = None) -> ScoreSet:
    """
    Shadow and target scores for one audit.

    "separate": n_shadows shadows plus n_targets targets drawn from an
    independent target plan. "loo": n_shadows models only, every one of which
    later serves as a target against the others.
    """
    if protocol not in PROTOCOLS:
        raise UsageError(f"Unknown protocol '{protocol}', expected one of {PROTOCOLS}")
    n_classes, group_ids = manifest.n_classes, manifest.group_ids()
    shadow_plan = plan_splits(manifest, samples, n_shadows, frac, stratified, seed, purpose="shadow")
    shadows = run_shadows(shadow_plan, samples, model_cfg, shadow_cfg, "shadow", 0, n_classes, group_ids, threads)
    if protocol == "loo":
        return shadows
    if n_targets < 1:
        raise UsageError("The separate-target protocol needs at least one target")
    target_plan = _draw_plan(manifest, samples, n_targets, frac, stratified, seed, purpose="target")
    targets = run_shadows(target_plan, samples, target_model_cfg or model_cfg, target_cfg or shadow_cfg,
                          "target", n_shadows, n_classes, group_ids, threads)
    return ScoreSet.concat([shadows, targets])


def target_plan(manifest: DatasetManifest, samples: SampleTable, n_targets: int, frac: float = 0.5,
                stratified: bool = True, seed: int = 0) -> SplitPlan:
    """The plan audit_scores draws its targets from (shared across training methods)."""
    return _draw_plan(manifest, samples, n_targets, frac, stratified, seed, purpose="target")


# --- Score file ---
def scores_to_frame(scores: ScoreSet) -> pd.DataFrame:
    N, n = scores.n_models, scores.n_samples
    return pd.DataFrame({
        'model_id': np.repeat(scores.model_ids, n),
        'sample_id': np.tile(scores.sample_ids, N),
        'role': np.repeat(np.array(scores.roles, dtype=object), n),
        'method': np.repeat(np.array(scores.methods, dtype=object), n),
        'is_member': scores.membership.ravel().astype(np.int64),
        'group_id': np.tile(scores.groups, N),
        'class_id': np.tile(scores.classes, N),
        'confidence': scores.confidence.ravel(),
        'correct': scores.correct.ravel().astype(np.int64),
    }, columns=SCORE_COLUMNS)


def write_scores(scores: ScoreSet, path: str):
    write_dataframe(scores_to_frame(scores), path)
    logger.info(f"Wrote {scores.n_models} x {scores.n_samples} scores to {path}")


def _first_bad_line(mask: np.ndarray) -> int:
    return int(np.flatnonzero(mask)[0]) + 2


def read_scores(path: str) -> ScoreSet:
    frame = read_csv_checked(path, SCORE_COLUMNS)
    if frame.empty:
        raise ParseError("score file has no rows", path=path, line=2)
    if frame[SCORE_COLUMNS].isna().any().any():
        raise ParseError("missing value", path=path, line=_first_bad_line(frame[SCORE_COLUMNS].isna().any(axis=1).to_numpy()))

    confidence = pd.to_numeric(frame['confidence'], errors='coerce').to_numpy(dtype=np.float64)
    bad = ~((confidence > 0.0) & (confidence < 1.0))
    if bad.any():
        line = _first_bad_line(bad)
        raise ParseError(f"confidence {frame['confidence'].iloc[line - 2]} outside the open unit interval", path=path, line=line)
    for column in ('is_member', 'correct'):
        values = frame[column].to_numpy()
        bad = ~np.isin(values, [0, 1])
        if bad.any():
            raise ParseError(f"{column} must be 0 or 1", path=path, line=_first_bad_line(bad))
    bad = ~frame['role'].isin(ROLES).to_numpy()
    if bad.any():
        raise ParseError(f"role must be one of {ROLES}", path=path, line=_first_bad_line(bad))
    dup = frame.duplicated(['model_id', 'sample_id']).to_numpy()
    if dup.any():
        raise ParseError("duplicate (model_id, sample_id) row", path=path, line=_first_bad_line(dup))

    model_ids = pd.unique(frame['model_id'])
    sample_ids = pd.unique(frame['sample_id'])
    if len(frame) != len(model_ids) * len(sample_ids):
        raise ParseError(f"expected one row per (model, sample): {len(model_ids)} x {len(sample_ids)} rows, "
                         f"found {len(frame)}", path=path)

    per_model = frame.groupby('model_id', sort=False)[['role', 'method']].nunique()
    if (per_model > 1).any().any():
        raise ParseError("role or method varies within a model", path=path)
    per_sample = frame.groupby('sample_id', sort=False)[['group_id', 'class_id']].nunique()
    if (per_sample > 1).any().any():
        raise ParseError("group or class varies across models for one sample", path=path)

    def grid(column: str) -> np.ndarray:
        return frame.pivot(index='model_id', columns='sample_id', values=column).reindex(
            index=model_ids, columns=sample_ids).to_numpy()

    model_meta = frame.drop_duplicates('model_id').set_index('model_id').reindex(model_ids)
    sample_meta = frame.drop_duplicates('sample_id').set_index('sample_id').reindex(sample_ids)
    return ScoreSet(
        model_ids=model_ids, sample_ids=sample_ids,
        confidence=grid('confidence').astype(np.float64),
        correct=grid('correct').astype(bool), membership=grid('is_member').astype(bool),
        groups=sample_meta['group_id'].to_numpy(), classes=sample_meta['class_id'].to_numpy(),
        roles=tuple(model_meta['role']), methods=tuple(str(m) for m in model_meta['method']),
    )
