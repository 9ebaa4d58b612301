"""
Per-sample memorization scores, kernel density curves, representation
similarity (linear CKA), PCA feature complexity and the shadow x target
architecture matrix.
"""
import os
import math
import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid
from scipy.linalg import eigh
from scipy.stats import gaussian_kde, norm, ttest_ind

from attack import GaussianStats, fit_gaussians, attack_targets
from attack_factory import get_attack
from core import (
    DatasetManifest, SampleTable, EmbeddingMatrix,
    DataValidationError, DegenerateInputError, UsageError,
    write_dataframe,
)
from metrics import report_from_results, TOTAL
from shadows import ScoreSet, plan_splits, target_plan, run_shadows
from trainer import Model, ModelConfig, TrainConfig, extract_embeddings

logger = logging.getLogger('spaudit.analysis')

KDE_GRID_POINTS = 512
KDE_FLOOR_BANDWIDTH = 1e-3
EIGEN_RELATIVE_TOL = 1e-10
EVR_TOLERANCE = 1e-12

Embedding = Union[EmbeddingMatrix, np.ndarray]


# --- Memorization ---
def privacy_score_d(stats: GaussianStats) -> np.ndarray:
    """|mu_in - mu_out| / (sigma_in + sigma_out); NaN where a side has no shadows."""
    d = np.abs(stats.mu_in - stats.mu_out) / (stats.sigma_in + stats.sigma_out)
    return np.where(stats.valid, d, np.nan)


def label_memorization(correct: np.ndarray, membership: np.ndarray) -> np.ndarray:
    """
    |Pr_IN(correct) - Pr_OUT(correct)| per sample, over the models in the rows.
    Samples without an IN or an OUT model get NaN.
    """
    correct = np.asarray(correct, dtype=bool)
    membership = np.asarray(membership, dtype=bool)
    n_in = membership.sum(axis=0)
    n_out = (~membership).sum(axis=0)
    usable = (n_in > 0) & (n_out > 0)
    if not usable.all():
        logger.warning(f"{int((~usable).sum())} sample(s) lack IN or OUT models; excluded from label memorization.")
    with np.errstate(invalid='ignore', divide='ignore'):
        in_rate = (correct & membership).sum(axis=0) / n_in
        out_rate = (correct & ~membership).sum(axis=0) / n_out
    return np.where(usable, np.abs(in_rate - out_rate), np.nan)


@dataclass(frozen=True, eq=False)
class DensityCurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float

    def integral(self) -> float:
        return float(trapezoid(self.density, self.grid))


def kde_density(values, grid: Optional[np.ndarray] = None, bandwidth_rule: Union[str, float] = "scott") -> DensityCurve:
    """
    Gaussian KDE. `bandwidth_rule` is "scott", "silverman" or an absolute
    bandwidth. The default grid spans [min - 3h, max + 3h] in 512 points.
    """
    values = np.asarray(values, dtype=np.float64)
    values = values[np.isfinite(values)]
    if len(values) < 2:
        raise DataValidationError(f"kde_density needs at least 2 values, got {len(values)}")
    std = float(np.std(values, ddof=1))

    if std == 0.0:
        h = KDE_FLOOR_BANDWIDTH
        logger.warning(f"Zero-variance input to KDE; using floor bandwidth {h}")
        kde = None
    elif isinstance(bandwidth_rule, str):
        if bandwidth_rule not in ('scott', 'silverman'):
            raise UsageError(f"Unknown bandwidth rule '{bandwidth_rule}'")
        kde = gaussian_kde(values, bw_method=bandwidth_rule)
        h = float(kde.factor * std)
    else:
        h = float(bandwidth_rule)
        if h <= 0:
            raise UsageError(f"bandwidth must be positive, got {h}")
        kde = gaussian_kde(values, bw_method=h / std)

    if grid is None:
        grid = np.linspace(values.min() - 3 * h, values.max() + 3 * h, KDE_GRID_POINTS)
    grid = np.asarray(grid, dtype=np.float64)
    if kde is None:
        density = norm.pdf(grid[:, None], loc=values[None, :], scale=h).mean(axis=1)
    else:
        density = kde(grid)
    return DensityCurve(grid=grid, density=np.maximum(density, 0.0), bandwidth=h)


@dataclass
class MemorizationReport:
    samples: pd.DataFrame
    groups: pd.DataFrame
    densities: Dict[int, DensityCurve]
    stats: GaussianStats
    excluded: Tuple[int, ...] = ()


def memorization_report(shadows: ScoreSet, variance_mode: str = "per_example",
                        manifest: Optional[DatasetManifest] = None,
                        bandwidth_rule: Union[str, float] = "scott") -> MemorizationReport:
    """d and mem per sample, their per-group means, and a KDE of d for every group."""
    stats = fit_gaussians(shadows, variance_mode)
    d = privacy_score_d(stats)
    mem = label_memorization(shadows.correct, shadows.membership)
    usable = stats.valid
    excluded = tuple(int(s) for s in shadows.sample_ids[~usable])

    samples = pd.DataFrame({
        'sample_id': shadows.sample_ids, 'group_id': shadows.groups, 'class_id': shadows.classes,
        'd_score': d, 'mem': mem,
        'mu_in': stats.mu_in, 'sigma_in': stats.sigma_in, 'mu_out': stats.mu_out, 'sigma_out': stats.sigma_out,
        'n_in': stats.n_in, 'n_out': stats.n_out,
    })[usable].reset_index(drop=True)

    spurious = set(manifest.spurious_groups()) if manifest is not None else set()
    group_ids = manifest.group_ids() if manifest is not None else sorted(int(g) for g in np.unique(shadows.groups))
    rows, densities = [], {}
    for g in group_ids:
        part = samples[samples['group_id'] == g]
        n = len(part)
        rows.append({
            'group_id': g, 'is_spurious': g in spurious, 'n': n,
            'd_mean': float(part['d_score'].mean()) if n else math.nan,
            'd_se': float(part['d_score'].std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan,
            'mem_mean': float(part['mem'].mean()) if n else math.nan,
        })
        if n >= 2:
            densities[g] = kde_density(part['d_score'].to_numpy(), bandwidth_rule=bandwidth_rule)
        else:
            logger.warning(f"Group {g}: {n} scored sample(s), no density curve")
    return MemorizationReport(samples=samples, groups=pd.DataFrame(rows), densities=densities,
                              stats=stats, excluded=excluded)


def memorization_disparity_test(report: MemorizationReport, spurious_groups: Sequence[int]) -> Tuple[float, float]:
    """One-sided Welch t-test that spurious-group d exceeds the rest; returns (t, p)."""
    is_spurious = report.samples['group_id'].isin(list(spurious_groups))
    a = report.samples.loc[is_spurious, 'd_score'].to_numpy()
    b = report.samples.loc[~is_spurious, 'd_score'].to_numpy()
    if len(a) < 2 or len(b) < 2:
        raise DataValidationError("t-test needs at least two scored samples on each side")
    result = ttest_ind(a, b, equal_var=False, alternative='greater')
    return float(result.statistic), float(result.pvalue)


def write_memorization(report: MemorizationReport, path: str):
    write_dataframe(report.samples, path)
    logger.info(f"Wrote memorization scores for {len(report.samples)} samples to {path}")


def write_density_curves(densities: Mapping[int, DensityCurve], path: str):
    frames = [pd.DataFrame({'group_id': g, 'x': c.grid, 'density': c.density, 'bandwidth': c.bandwidth})
              for g, c in densities.items()]
    frame = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=['group_id', 'x', 'density', 'bandwidth'])
    write_dataframe(frame, path)


# --- Representation similarity ---
def _as_matrix(embedding: Embedding) -> Tuple[Optional[np.ndarray], np.ndarray]:
    if isinstance(embedding, EmbeddingMatrix):
        return embedding.sample_ids, np.asarray(embedding.matrix, dtype=np.float64)
    return None, np.asarray(embedding, dtype=np.float64)


def _centered_pair(A: Embedding, B: Embedding) -> Tuple[np.ndarray, np.ndarray]:
    ids_a, a = _as_matrix(A)
    ids_b, b = _as_matrix(B)
    if a.shape[0] != b.shape[0]:
        raise DataValidationError(f"row-count mismatch: {a.shape[0]} vs {b.shape[0]}")
    if ids_a is not None and ids_b is not None and not np.array_equal(ids_a, ids_b):
        raise DataValidationError("embedding rows are not aligned on sample ids")
    return a - a.mean(axis=0), b - b.mean(axis=0)


def hsic(A: Embedding, B: Embedding) -> float:
    """tr(K_A H K_B H) with linear kernels, i.e. the squared Frobenius norm of centered B^T A."""
    a, b = _centered_pair(A, B)
    return float(np.sum((b.T @ a) ** 2))


def linear_cka(A: Embedding, B: Embedding) -> float:
    a, b = _centered_pair(A, B)
    self_a = float(np.sum((a.T @ a) ** 2))
    self_b = float(np.sum((b.T @ b) ** 2))
    if self_a <= 0.0 or self_b <= 0.0:
        raise DegenerateInputError("degenerate embedding: zero self-HSIC")
    cross = float(np.sum((b.T @ a) ** 2))
    return min(1.0, cross / math.sqrt(self_a * self_b))


@dataclass(frozen=True, eq=False)
class FeatureComplexity:
    k: int
    tau: float
    eigenvalues: np.ndarray
    evr: np.ndarray


def explained_variance(E: Embedding) -> Tuple[np.ndarray, np.ndarray]:
    """Descending covariance eigenvalues (numerical zeros clamped) and the cumulative EVR."""
    _, x = _as_matrix(E)
    n, d = x.shape
    if n < 2:
        raise DataValidationError(f"feature complexity needs at least 2 rows, got {n}")
    xc = x - x.mean(axis=0)
    # Same nonzero spectrum either way; decompose the smaller side.
    gram = (xc.T @ xc) if d <= n else (xc @ xc.T)
    eigenvalues = eigh(gram / (n - 1), eigvals_only=True)[::-1]
    top = eigenvalues[0] if len(eigenvalues) else 0.0
    if top <= 0.0:
        raise DegenerateInputError("all-zero covariance")
    eigenvalues = np.where(eigenvalues < EIGEN_RELATIVE_TOL * top, 0.0, eigenvalues)[:d]
    cumulative = np.cumsum(eigenvalues)
    evr = cumulative / cumulative[-1]
    evr[-1] = 1.0
    return eigenvalues, evr


def feature_complexity(E: Embedding, tau: float = 0.95) -> FeatureComplexity:
    """Smallest number of principal components whose cumulative EVR reaches tau."""
    if not 0.0 < tau <= 1.0:
        raise UsageError(f"tau must lie in (0, 1], got {tau}")
    eigenvalues, evr = explained_variance(E)
    k = int(np.argmax(evr >= tau - EVR_TOLERANCE)) + 1
    return FeatureComplexity(k=k, tau=tau, eigenvalues=eigenvalues, evr=evr)


def embedding_cka_profile(A: EmbeddingMatrix, B: EmbeddingMatrix, groups: np.ndarray,
                          group_ids: Optional[Sequence[int]] = None) -> pd.DataFrame:
    """Linear CKA over all rows and within each group; groups under 2 samples are skipped."""
    groups = np.asarray(groups)
    if len(groups) != A.shape[0]:
        raise DataValidationError("group labels are not aligned with the embedding rows")
    if group_ids is None:
        group_ids = sorted(int(g) for g in np.unique(groups))
    rows = [{'group': TOTAL, 'n': A.shape[0], 'cka': linear_cka(A, B)}]
    for g in group_ids:
        mask = groups == g
        n = int(mask.sum())
        if n < 2:
            logger.warning(f"Group {g}: {n} sample(s), skipped in the CKA profile")
            continue
        try:
            value = linear_cka(A.restrict(mask), B.restrict(mask))
        except DegenerateInputError:
            logger.warning(f"Group {g}: constant embeddings, CKA undefined")
            value = math.nan
        rows.append({'group': str(g), 'n': n, 'cka': value})
    return pd.DataFrame(rows, columns=['group', 'n', 'cka'])


def group_cka_profile(model_a: Model, model_b: Model, samples: SampleTable,
                      group_ids: Optional[Sequence[int]] = None) -> pd.DataFrame:
    return embedding_cka_profile(extract_embeddings(model_a, samples), extract_embeddings(model_b, samples),
                                 samples.groups, group_ids)


# --- Cross-configuration matrix ---
@dataclass
class AttackMatrix:
    tpr: pd.DataFrame
    achieved_fpr: pd.DataFrame
    diagonal_best: Dict[str, bool] = field(default_factory=dict)


def cross_config_attack_matrix(shadow_cfgs: Mapping[str, ModelConfig], target_cfgs: Mapping[str, ModelConfig],
                               manifest: DatasetManifest, samples: SampleTable, train_cfg: TrainConfig,
                               attack: str = "lira_online", fpr: float = 0.01, n_shadows: int = 16,
                               n_targets: int = 8, seed: int = 0, variance_mode: str = "fixed",
                               threads: int = 1) -> AttackMatrix:
    """
    Total TPR@fpr for every (shadow config, target config) pair. All shadow
    configs share one split plan and all target configs share another, so
    cells differ only in architecture.
    """
    if not shadow_cfgs or not target_cfgs:
        raise UsageError("the attack matrix needs at least one shadow and one target config")
    shadow_plan = plan_splits(manifest, samples, n_shadows, seed=seed, purpose="shadow")
    targets = target_plan(manifest, samples, n_targets, seed=seed)
    n_classes, group_ids = manifest.n_classes, manifest.group_ids()

    shadow_scores = {name: run_shadows(shadow_plan, samples, cfg, train_cfg, "shadow", 0, n_classes, group_ids, threads)
                     for name, cfg in shadow_cfgs.items()}
    target_scores = {name: run_shadows(targets, samples, cfg, train_cfg, "target", n_shadows, n_classes, group_ids, threads)
                     for name, cfg in target_cfgs.items()}

    attacker = get_attack(attack, variance_mode)
    tpr = pd.DataFrame(index=list(shadow_cfgs), columns=list(target_cfgs), dtype=np.float64)
    achieved = tpr.copy()
    for s_name, s_scores in shadow_scores.items():
        for t_name, t_scores in target_scores.items():
            results = attack_targets(ScoreSet.concat([s_scores, t_scores]), attacker, "separate")
            report = report_from_results(results, [fpr], per_group=False)
            tpr.loc[s_name, t_name] = report.value(TOTAL, fpr, 'tpr')
            achieved.loc[s_name, t_name] = report.value(TOTAL, fpr, 'achieved_fpr')
            logger.info(f"Matrix cell shadow={s_name} target={t_name}: TPR {tpr.loc[s_name, t_name]:.4f}")

    diagonal_best = {}
    for t_name in target_cfgs:
        if t_name in shadow_cfgs:
            column = tpr[t_name]
            diagonal_best[t_name] = bool(column[t_name] >= column.max())
    tpr.index.name = achieved.index.name = 'shadow'
    return AttackMatrix(tpr=tpr, achieved_fpr=achieved, diagonal_best=diagonal_best)


def write_matrix(matrix: AttackMatrix, path: str):
    """TPR to `path`, the achieved FPR of every cell to a sibling `<stem>_achieved_fpr.csv`."""
    write_dataframe(matrix.tpr.reset_index(), path)
    write_dataframe(matrix.achieved_fpr.reset_index(), os.path.splitext(path)[0] + "_achieved_fpr.csv")
