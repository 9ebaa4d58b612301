"""
ROC machinery for membership inference: exact tie-aware ROC curves, TPR at a
low FPR with the operating point actually achieved, per-group reports and
mean/standard-error aggregation over targets.
"""
import math
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml
from sklearn.metrics import roc_curve as sk_roc_curve

from base_attack import AttackResult
from core import DataValidationError, DegenerateInputError, ParseError, UsageError, atomic_write

logger = logging.getLogger('spaudit.metrics')

FPR_TOLERANCE = 1e-12
TOTAL = "total"
KEY_COLUMNS = ['attack', 'group', 'requested_fpr']
METRIC_COLUMNS = ['achieved_fpr', 'tpr', 'auroc']
REPORT_COLUMNS = KEY_COLUMNS + ['n_members', 'n_nonmembers', 'evaluable', 'n_targets'] + \
    [c for m in METRIC_COLUMNS for c in (m, f'{m}_se')]


@dataclass(frozen=True, eq=False)
class RocCurve:
    """Step points of the threshold sweep, from (0, t0) to (1, 1); counts are integers."""
    thresholds: np.ndarray
    false_positives: np.ndarray
    true_positives: np.ndarray
    n_members: int
    n_nonmembers: int

    @property
    def fpr(self) -> np.ndarray:
        return self.false_positives / self.n_nonmembers

    @property
    def tpr(self) -> np.ndarray:
        return self.true_positives / self.n_members


def roc_curve(scores, is_member) -> RocCurve:
    scores = np.asarray(scores, dtype=np.float64)
    is_member = np.asarray(is_member, dtype=bool)
    n_members = int(is_member.sum())
    n_nonmembers = int(len(is_member) - n_members)
    if n_members == 0 or n_nonmembers == 0:
        raise DegenerateInputError(f"degenerate ROC: {n_members} members, {n_nonmembers} nonmembers")
    # Without intermediate-point dropping, every distinct score is one threshold,
    # so tied members and nonmembers move in a single step.
    fpr, tpr, thresholds = sk_roc_curve(is_member.astype(np.int64), scores, drop_intermediate=False)
    return RocCurve(
        thresholds=thresholds,
        false_positives=np.rint(fpr * n_nonmembers).astype(np.int64),
        true_positives=np.rint(tpr * n_members).astype(np.int64),
        n_members=n_members,
        n_nonmembers=n_nonmembers,
    )


def auroc(curve: RocCurve) -> float:
    """Exact step integration with half credit for ties (the Mann-Whitney statistic)."""
    fp, tp = curve.false_positives, curve.true_positives
    pairs = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    return pairs / (2.0 * curve.n_members * curve.n_nonmembers)


def tpr_at_fpr(curve: RocCurve, requested_fpr: float) -> Tuple[float, float]:
    """
    Returns (tpr, achieved_fpr). A requested rate below one false positive is
    raised to 1/n_nonmembers, so small groups report where they were actually
    measured.
    """
    if not 0.0 < requested_fpr <= 1.0:
        raise UsageError(f"requested FPR must lie in (0, 1], got {requested_fpr}")
    achieved = max(float(requested_fpr), 1.0 / curve.n_nonmembers)
    allowed = curve.false_positives <= achieved * curve.n_nonmembers + FPR_TOLERANCE
    return float(curve.true_positives[allowed].max() / curve.n_members), achieved


# --- Reports ---
@dataclass
class GroupPrivacyReport:
    """
    One row per (attack, group, requested FPR); `group` is "total" or the group
    id as a string. A single-target report has n_targets 1 and absent (NaN)
    standard errors.
    """
    table: pd.DataFrame
    target_ids: Tuple[int, ...] = ()

    @property
    def n_targets(self) -> int:
        return len(self.target_ids)

    def attacks(self) -> List[str]:
        return list(pd.unique(self.table['attack']))

    def groups(self) -> List[str]:
        return list(pd.unique(self.table['group']))

    def cell(self, group, fpr: float, attack: Optional[str] = None) -> pd.Series:
        t = self.table
        mask = (t['group'] == str(group)) & np.isclose(t['requested_fpr'], fpr, rtol=0.0, atol=1e-15)
        if attack is not None:
            mask &= t['attack'] == attack
        rows = t[mask]
        if len(rows) != 1:
            raise DataValidationError(f"report has {len(rows)} cells for group={group}, fpr={fpr}, attack={attack}")
        return rows.iloc[0]

    def value(self, group, fpr: float, metric: str = 'tpr', attack: Optional[str] = None) -> float:
        return float(self.cell(group, fpr, attack)[metric])


def _cell_rows(attack: str, group: str, scores: np.ndarray, is_member: np.ndarray,
               fprs: Sequence[float], target_id: int) -> List[Dict]:
    n_members = int(is_member.sum())
    n_nonmembers = int(len(is_member) - n_members)
    base = {'attack': attack, 'group': group, 'n_members': n_members, 'n_nonmembers': n_nonmembers}
    if n_members == 0 or n_nonmembers == 0:
        logger.warning(f"Target {target_id}, group {group}: not evaluable "
                       f"({n_members} members, {n_nonmembers} nonmembers)")
        return [dict(base, requested_fpr=float(f), evaluable=False, n_targets=0,
                     **{c: math.nan for m in METRIC_COLUMNS for c in (m, f'{m}_se')}) for f in fprs]
    curve = roc_curve(scores, is_member)
    area = auroc(curve)
    rows = []
    for f in fprs:
        tpr, achieved = tpr_at_fpr(curve, f)
        rows.append(dict(base, requested_fpr=float(f), evaluable=True, n_targets=1,
                         achieved_fpr=achieved, achieved_fpr_se=math.nan,
                         tpr=tpr, tpr_se=math.nan, auroc=area, auroc_se=math.nan))
    return rows


def per_group_report(result: AttackResult, fprs: Sequence[float], group_ids: Optional[Sequence[int]] = None,
                     per_group: bool = True) -> GroupPrivacyReport:
    """ROC per group (members of g vs nonmembers of g) and for the whole population, one target."""
    if result.groups is None:
        raise DataValidationError("attack result carries no group metadata")
    rows = _cell_rows(result.attack, TOTAL, result.scores, result.is_member, fprs, result.target_id)
    if per_group:
        if group_ids is None:
            group_ids = sorted(int(g) for g in np.unique(result.groups))
        for g in group_ids:
            mask = result.groups == g
            rows += _cell_rows(result.attack, str(g), result.scores[mask], result.is_member[mask], fprs, result.target_id)
    return GroupPrivacyReport(table=pd.DataFrame(rows, columns=REPORT_COLUMNS), target_ids=(result.target_id,))


def _sorted_stats(values: np.ndarray) -> Tuple[float, float, int]:
    values = np.sort(values[~np.isnan(values)])
    n = len(values)
    if n == 0:
        return math.nan, math.nan, 0
    mean = math.fsum(values) / n
    se = math.sqrt(math.fsum((values - mean) ** 2) / (n - 1)) / math.sqrt(n) if n > 1 else math.nan
    return mean, se, n


def aggregate_targets(reports: Sequence[GroupPrivacyReport]) -> GroupPrivacyReport:
    """Per-cell mean and standard error (std with n-1 divisor over sqrt(T)) across targets."""
    if not reports:
        raise UsageError("aggregate_targets needs at least one report")
    keys = None
    for report in reports:
        cells = set(map(tuple, report.table[KEY_COLUMNS].astype(str).to_numpy()))
        if keys is None:
            keys = cells
        elif cells != keys:
            raise DataValidationError("reports cover mismatched (attack, group, fpr) cells")

    stacked = pd.concat([r.table for r in reports], ignore_index=True)
    rows = []
    for key, part in stacked.groupby(KEY_COLUMNS, sort=False):
        row = dict(zip(KEY_COLUMNS, key))
        row['n_members'] = _sorted_stats(part['n_members'].to_numpy(dtype=np.float64))[0]
        row['n_nonmembers'] = _sorted_stats(part['n_nonmembers'].to_numpy(dtype=np.float64))[0]
        evaluable = part['evaluable'].to_numpy(dtype=bool)
        for metric in METRIC_COLUMNS:
            mean, se, n = _sorted_stats(part[metric].to_numpy(dtype=np.float64)[evaluable])
            row[metric], row[f'{metric}_se'] = mean, se
            row['n_targets'] = n
        row['evaluable'] = bool(evaluable.any())
        rows.append(row)
    target_ids = tuple(sorted(t for r in reports for t in r.target_ids))
    return GroupPrivacyReport(table=pd.DataFrame(rows, columns=REPORT_COLUMNS), target_ids=target_ids)


def combine_reports(reports: Sequence[GroupPrivacyReport]) -> GroupPrivacyReport:
    """Stacks aggregated reports of different attacks over the same targets."""
    attacks = [a for r in reports for a in r.attacks()]
    if len(set(attacks)) != len(attacks):
        raise DataValidationError("combine_reports expects one report per attack")
    target_ids = tuple(sorted({t for r in reports for t in r.target_ids}))
    return GroupPrivacyReport(table=pd.concat([r.table for r in reports], ignore_index=True), target_ids=target_ids)


def report_from_results(results: Sequence[AttackResult], fprs: Sequence[float],
                        group_ids: Optional[Sequence[int]] = None, per_group: bool = True) -> GroupPrivacyReport:
    """Per-target reports, aggregated per attack, stacked in first-seen attack order."""
    if group_ids is None:
        group_ids = sorted({int(g) for r in results for g in np.unique(r.groups)})
    by_attack: Dict[str, List[GroupPrivacyReport]] = {}
    for result in results:
        by_attack.setdefault(result.attack, []).append(per_group_report(result, fprs, group_ids, per_group))
    return combine_reports([aggregate_targets(reports) for reports in by_attack.values()])


def disparity_ratio(report: GroupPrivacyReport, fpr: float, spurious_groups: Sequence[int],
                    attack: Optional[str] = None, metric: str = 'tpr') -> float:
    """Mean metric over spurious groups divided by the mean over the other groups."""
    t = report.table
    mask = (t['group'] != TOTAL) & np.isclose(t['requested_fpr'], fpr, rtol=0.0, atol=1e-15) & t['evaluable']
    if attack is not None:
        mask &= t['attack'] == attack
    cells = t[mask]
    spurious = cells['group'].isin([str(g) for g in spurious_groups])
    num = cells.loc[spurious, metric].mean()
    den = cells.loc[~spurious, metric].mean()
    if pd.isna(num) or pd.isna(den):
        logger.warning("Disparity ratio undefined: a side has no evaluable groups")
        return math.nan
    if den == 0:
        return math.inf if num > 0 else math.nan
    return float(num / den)


# --- Report file ---
def _optional(value) -> Optional[float]:
    return None if value is None or (isinstance(value, float) and math.isnan(value)) else float(value)


def report_to_dict(report: GroupPrivacyReport, meta: Optional[Dict] = None) -> Dict:
    """Nested mapping group -> attack -> fpr -> metric -> {mean, se, n}."""
    body: Dict = {}
    for row in report.table.itertuples(index=False):
        cell = body.setdefault(str(row.group), {}).setdefault(str(row.attack), {})
        cell[repr(float(row.requested_fpr))] = {
            'n_members': float(row.n_members),
            'n_nonmembers': float(row.n_nonmembers),
            'evaluable': bool(row.evaluable),
            **{m: {'mean': _optional(getattr(row, m)), 'se': _optional(getattr(row, f'{m}_se')),
                   'n': int(row.n_targets)} for m in METRIC_COLUMNS},
        }
    return {'meta': dict(meta or {}, target_ids=list(report.target_ids)), 'report': body}


def write_report(report: GroupPrivacyReport, path: str, meta: Optional[Dict] = None):
    with atomic_write(path) as handle:
        yaml.safe_dump(report_to_dict(report, meta), handle, sort_keys=False)
    logger.info(f"Wrote report to {path}")


def read_report(path: str) -> GroupPrivacyReport:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        mark = getattr(e, 'problem_mark', None)
        raise ParseError(f"invalid YAML: {e}", path=path, line=mark.line + 1 if mark else None)
    if not isinstance(data, dict) or 'report' not in data:
        raise ParseError("missing 'report' section", path=path)

    def nan(value):
        return math.nan if value is None else float(value)

    rows = []
    try:
        for group, attacks in data['report'].items():
            for attack, fprs in attacks.items():
                for fpr, cell in fprs.items():
                    row = {'attack': attack, 'group': str(group), 'requested_fpr': float(fpr),
                           'n_members': cell['n_members'], 'n_nonmembers': cell['n_nonmembers'],
                           'evaluable': bool(cell['evaluable']), 'n_targets': int(cell['tpr']['n'])}
                    for m in METRIC_COLUMNS:
                        row[m], row[f'{m}_se'] = nan(cell[m]['mean']), nan(cell[m]['se'])
                    rows.append(row)
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise ParseError(f"malformed report cell: {e}", path=path)
    target_ids = tuple(int(t) for t in (data.get('meta') or {}).get('target_ids', []))
    return GroupPrivacyReport(table=pd.DataFrame(rows, columns=REPORT_COLUMNS), target_ids=target_ids)
