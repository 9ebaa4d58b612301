"""
Likelihood-ratio membership inference (online and offline) and the global
confidence-threshold baseline, all in logit-confidence space.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.stats import norm

from base_attack import AttackResult, BaseAttack, logit_confidence
from core import UsageError, ParseError, read_csv_checked, write_dataframe
from shadows import ScoreSet

logger = logging.getLogger('spaudit.attack')

VARIANCE_FLOOR = 1e-4
VARIANCE_MODES = ('fixed', 'per_example')
RESULT_COLUMNS = ['target_id', 'sample_id', 'group_id', 'attack', 'score', 'is_member']

__all__ = [
    'AttackResult', 'BaseAttack', 'GaussianStats', 'LiraOnlineAttack', 'LiraOfflineAttack', 'ThresholdAttack',
    'logit_confidence', 'fit_gaussians', 'lira_online', 'lira_offline', 'threshold_attack',
    'attack_targets', 'write_attack_results', 'read_attack_results',
]


# --- Shadow statistics ---
@dataclass(frozen=True, eq=False)
class GaussianStats:
    sample_ids: np.ndarray
    mu_in: np.ndarray
    sigma_in: np.ndarray
    mu_out: np.ndarray
    sigma_out: np.ndarray
    n_in: np.ndarray
    n_out: np.ndarray
    variance_mode: str

    @property
    def valid(self) -> np.ndarray:
        return (self.n_in > 0) & (self.n_out > 0)

    @property
    def valid_out(self) -> np.ndarray:
        return self.n_out > 0

    def swapped(self) -> "GaussianStats":
        """IN and OUT hypotheses exchanged."""
        return GaussianStats(self.sample_ids, self.mu_out, self.sigma_out, self.mu_in, self.sigma_in,
                             self.n_out, self.n_in, self.variance_mode)


def _side_stats(phi: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-column mean, n-1 variance (NaN below two scores) and count of the masked entries."""
    count = mask.sum(axis=0)
    total = np.where(mask, phi, 0.0).sum(axis=0)
    with np.errstate(invalid='ignore', divide='ignore'):
        mu = np.where(count > 0, total / np.maximum(count, 1), np.nan)
        sq = np.where(mask, (phi - mu) ** 2, 0.0).sum(axis=0)
        var = np.where(count > 1, sq / np.maximum(count - 1, 1), np.nan)
    return mu, var, count


def _sigma(var: np.ndarray, count: np.ndarray, variance_mode: str, side: str) -> np.ndarray:
    if variance_mode == 'fixed':
        has_var = count > 1
        pooled = float(np.mean(var[has_var])) if has_var.any() else 0.0
        var = np.full_like(var, pooled)
    sigma = np.sqrt(np.where(np.isnan(var), 0.0, var))
    thin = (count == 1) if variance_mode == 'per_example' else np.zeros_like(count, dtype=bool)
    if thin.any():
        logger.warning(f"{int(thin.sum())} sample(s) have a single {side} shadow score; variance floor applied.")
    return np.maximum(sigma, VARIANCE_FLOOR)


def fit_gaussians(shadows: ScoreSet, variance_mode: str = "fixed") -> GaussianStats:
    """
    Per-sample Gaussians over the shadows' logit confidences, split by
    membership. "fixed" replaces each per-sample variance by the mean variance
    over all samples, separately for IN and OUT.
    """
    if variance_mode not in VARIANCE_MODES:
        raise UsageError(f"Unknown variance mode '{variance_mode}', expected one of {VARIANCE_MODES}")
    phi = logit_confidence(shadows.confidence)
    mu_in, var_in, n_in = _side_stats(phi, shadows.membership)
    mu_out, var_out, n_out = _side_stats(phi, ~shadows.membership)
    return GaussianStats(
        sample_ids=shadows.sample_ids,
        mu_in=mu_in, sigma_in=_sigma(var_in, n_in, variance_mode, "IN"),
        mu_out=mu_out, sigma_out=_sigma(var_out, n_out, variance_mode, "OUT"),
        n_in=n_in, n_out=n_out, variance_mode=variance_mode,
    )


# --- Scoring rules ---
def lira_online(stats: GaussianStats, target_phi: np.ndarray) -> np.ndarray:
    """log N(phi; mu_in, sigma_in) - log N(phi; mu_out, sigma_out)."""
    target_phi = np.asarray(target_phi, dtype=np.float64)
    return norm.logpdf(target_phi, stats.mu_in, stats.sigma_in) - norm.logpdf(target_phi, stats.mu_out, stats.sigma_out)


def lira_offline(stats: GaussianStats, target_phi: np.ndarray) -> np.ndarray:
    """
    One-sided: log of the standard-normal CDF of the target's z-score under the
    OUT Gaussian. logcdf keeps distinct z-scores apart where cdf saturates at 1.
    """
    target_phi = np.asarray(target_phi, dtype=np.float64)
    return norm.logcdf((target_phi - stats.mu_out) / stats.sigma_out)


def threshold_attack(target_phi: np.ndarray) -> np.ndarray:
    return np.array(target_phi, dtype=np.float64, copy=True)


# --- Attack classes ---
class LiraOnlineAttack(BaseAttack):
    name = "lira_online"

    def __init__(self, variance_mode: str = "fixed"):
        if variance_mode not in VARIANCE_MODES:
            raise UsageError(f"Unknown variance mode '{variance_mode}', expected one of {VARIANCE_MODES}")
        self.variance_mode = variance_mode

    def score(self, shadows, target_phi):
        stats = fit_gaussians(shadows, self.variance_mode)
        usable = stats.valid
        scores = np.zeros(len(target_phi))
        scores[usable] = lira_online(_restrict(stats, usable), target_phi[usable])
        return scores, usable


class LiraOfflineAttack(BaseAttack):
    name = "lira_offline"

    def __init__(self, variance_mode: str = "fixed"):
        if variance_mode not in VARIANCE_MODES:
            raise UsageError(f"Unknown variance mode '{variance_mode}', expected one of {VARIANCE_MODES}")
        self.variance_mode = variance_mode

    def score(self, shadows, target_phi):
        # Only the OUT side matters, so IN-less samples stay in.
        stats = fit_gaussians(shadows, self.variance_mode)
        usable = stats.valid_out
        scores = np.zeros(len(target_phi))
        scores[usable] = lira_offline(_restrict(stats, usable), target_phi[usable])
        return scores, usable


class ThresholdAttack(BaseAttack):
    name = "threshold"
    uses_shadows = False

    def __init__(self, variance_mode: str = "fixed"):
        self.variance_mode = variance_mode

    def score(self, shadows, target_phi):
        return threshold_attack(target_phi), np.ones(len(target_phi), dtype=bool)


def _restrict(stats: GaussianStats, mask: np.ndarray) -> GaussianStats:
    return GaussianStats(stats.sample_ids[mask], stats.mu_in[mask], stats.sigma_in[mask], stats.mu_out[mask],
                         stats.sigma_out[mask], stats.n_in[mask], stats.n_out[mask], stats.variance_mode)


def attack_targets(scores: ScoreSet, attack: BaseAttack, protocol: str = "separate",
                   target_ids: Optional[List[int]] = None) -> List[AttackResult]:
    """
    One AttackResult per target. "separate": shadow rows attack every target
    row. "loo": each model is attacked by all the others.
    """
    if protocol == "separate":
        shadow_rows = np.flatnonzero(scores.role_mask('shadow'))
        target_rows = np.flatnonzero(scores.role_mask('target'))
        if len(target_rows) == 0:
            raise UsageError("score set has no target models; use the leave-one-out protocol")
        shadows = scores.select(shadow_rows)
        plan = [(shadows, r) for r in target_rows]
    elif protocol == "loo":
        if scores.n_models < 2:
            raise UsageError("leave-one-out needs at least two models")
        plan = [(scores.select(np.delete(np.arange(scores.n_models), r)), r) for r in range(scores.n_models)]
    else:
        raise UsageError(f"Unknown protocol '{protocol}', expected 'separate' or 'loo'")

    if target_ids is not None:
        wanted = set(int(t) for t in target_ids)
        plan = [(s, r) for s, r in plan if int(scores.model_ids[r]) in wanted]
        missing = wanted - {int(scores.model_ids[r]) for _, r in plan}
        if missing:
            raise UsageError(f"target model(s) {sorted(missing)} not found among the {protocol} targets")

    results = [attack.attack(shadows, scores, row) for shadows, row in plan]
    logger.info(f"{attack.name}: attacked {len(results)} target(s) ({protocol})")
    return results


# --- Attack result file ---
def write_attack_results(results: List[AttackResult], path: str):
    frames = [pd.DataFrame({
        'target_id': np.full(len(r), r.target_id, dtype=np.int64),
        'sample_id': r.sample_ids,
        'group_id': r.groups,
        'attack': r.attack,
        'score': r.scores,
        'is_member': np.asarray(r.is_member, dtype=np.int64),
    }, columns=RESULT_COLUMNS) for r in results]
    frame = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=RESULT_COLUMNS)
    write_dataframe(frame, path)
    logger.info(f"Wrote {len(results)} attack result(s) to {path}")


def read_attack_results(path: str) -> List[AttackResult]:
    frame = read_csv_checked(path, RESULT_COLUMNS)
    score = pd.to_numeric(frame['score'], errors='coerce').to_numpy(dtype=np.float64)
    bad = ~np.isfinite(score)
    if bad.any():
        raise ParseError("score must be a finite number", path=path, line=int(np.flatnonzero(bad)[0]) + 2)
    bad = ~frame['is_member'].isin([0, 1]).to_numpy()
    if bad.any():
        raise ParseError("is_member must be 0 or 1", path=path, line=int(np.flatnonzero(bad)[0]) + 2)
    dup = frame.duplicated(['target_id', 'attack', 'sample_id']).to_numpy()
    if dup.any():
        raise ParseError("duplicate (target_id, attack, sample_id) row", path=path, line=int(np.flatnonzero(dup)[0]) + 2)

    results = []
    for (target_id, name), part in frame.groupby(['target_id', 'attack'], sort=False):
        results.append(AttackResult(
            target_id=int(target_id),
            attack=str(name),
            sample_ids=part['sample_id'].to_numpy(dtype=np.int64),
            scores=part['score'].to_numpy(dtype=np.float64),
            is_member=part['is_member'].to_numpy().astype(bool),
            groups=part['group_id'].to_numpy(dtype=np.int64),
        ))
    return results
