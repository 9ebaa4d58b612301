"""
Scripted end-to-end audits on synthetic data, plus the run configuration that
both the experiments and the CLI read from config.yaml.

Every experiment writes into `<out_dir>.partial` and renames it into place only
when it finishes, so a failed run never leaves a half-written result directory.
"""
import os
import math
import shutil
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml

from analysis import (
    cross_config_attack_matrix, feature_complexity, group_cka_profile, embedding_cka_profile,
    memorization_report, memorization_disparity_test, write_memorization, write_density_curves, write_matrix,
)
from attack import attack_targets, write_attack_results
from attack_factory import get_attack, ATTACK_NAMES
from core import (
    DatasetManifest, SampleTable, EmbeddingMatrix, RngStream, DataValidationError, UsageError, ParseError,
    atomic_write, dataclass_from_dict, dataclass_to_dict, write_dataframe, write_dataset, write_embeddings,
)
from markdown_styler import markdown_to_html
from metrics import GroupPrivacyReport, TOTAL, combine_reports, disparity_ratio, report_from_results, write_report
from report_generator import frame_table, generate_report, plot_roc_svg, write_markdown
from shadows import (
    PROTOCOLS, ScoreSet, audit_scores, plan_splits, target_plan, run_shadows,
    train_planned_models, score_models, write_scores,
)
from synthdata import SyntheticConfig, generate_spurious_dataset, merge_classes, relabel_manifest
from trainer import METHODS, Model, ModelConfig, TrainConfig, evaluate_utility, extract_embeddings, train_model

logger = logging.getLogger('spaudit.experiments')

EXPERIMENT_NAMES = ('disparity', 'complexity', 'robust', 'memorization', 'cka_profile', 'matrix', 'attacks')
CONFIG_SECTIONS = ('run', 'synthetic', 'model', 'train', 'attack', 'report', 'analysis', 'experiment', 'matrix')
MIN_SHADOWS = {'disparity': 8, 'robust': 8}


# --- Configuration ---
@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    threads: int = 1
    log_dir: str = "logs"


@dataclass(frozen=True)
class AttackSettings:
    name: str = "lira_online"
    protocol: str = "separate"
    variance_mode: str = "fixed"
    n_shadows: int = 16
    n_targets: int = 8
    frac: float = 0.5
    stratified: bool = True

    def __post_init__(self):
        if self.name not in ATTACK_NAMES:
            raise UsageError(f"Unknown attack '{self.name}', expected one of {ATTACK_NAMES}")
        if self.protocol not in PROTOCOLS:
            raise UsageError(f"Unknown protocol '{self.protocol}', expected one of {PROTOCOLS}")
        if self.n_shadows < 2 or self.n_targets < 1:
            raise UsageError("n_shadows must be >= 2 and n_targets >= 1")


@dataclass(frozen=True)
class ReportSettings:
    fprs: Tuple[float, ...] = (0.001, 0.01, 0.1)
    per_group: bool = True
    plots: bool = True

    def __post_init__(self):
        object.__setattr__(self, 'fprs', tuple(float(f) for f in self.fprs))
        if not self.fprs or any(not 0.0 < f <= 1.0 for f in self.fprs):
            raise UsageError(f"report fprs must be non-empty and lie in (0, 1], got {list(self.fprs)}")


@dataclass(frozen=True)
class AnalysisSettings:
    tau: float = 0.95
    bandwidth: Any = "scott"
    memorization_variance_mode: str = "per_example"


@dataclass(frozen=True)
class ExperimentSettings:
    name: str = "disparity"
    out_dir: str = "runs"
    complexity_ks: Tuple[int, ...] = (8, 4, 2)
    matrix_fpr: float = 0.01


def default_matrix() -> Dict[str, ModelConfig]:
    return {
        'linear': ModelConfig(arch='linear'),
        'mlp-16': ModelConfig(arch='mlp', hidden=(16,)),
        'mlp-64': ModelConfig(arch='mlp', hidden=(64,)),
    }


def default_train() -> Dict[str, TrainConfig]:
    return {m: TrainConfig.for_method(m) for m in METHODS}


def _parse_train(section: Optional[Mapping[str, Any]]) -> Dict[str, TrainConfig]:
    """
    `train.erm`, `train.dro`, `train.dfr`; DRO and DFR inherit the ERM
    optimizer settings unless they override them.
    """
    section = dict(section or {})
    unknown = sorted(set(section) - set(METHODS))
    if unknown:
        raise UsageError(f"Unknown training method section(s) {unknown}, expected {list(METHODS)}")
    erm = dataclass_from_dict(TrainConfig, dict(section.get('erm') or {}, method='erm'), 'train.erm')
    shared = {k: getattr(erm, k) for k in ('lr', 'weight_decay', 'epochs', 'batch_size')}
    configs = {'erm': erm}
    for method in ('dro', 'dfr'):
        overrides = dict(section.get(method) or {})
        if 'method' in overrides and overrides['method'] != method:
            raise UsageError(f"train.{method}.method must be '{method}'")
        overrides.pop('method', None)
        unknown = sorted(set(overrides) - set(TrainConfig.__dataclass_fields__))
        if unknown:
            raise UsageError(f"Unknown key(s) in config section 'train.{method}': {unknown}")
        configs[method] = TrainConfig.for_method(method, **dict(shared, **overrides))
    return configs


def _parse_matrix(section: Optional[Mapping[str, Any]]) -> Dict[str, ModelConfig]:
    if not section:
        return default_matrix()
    return {str(name): dataclass_from_dict(ModelConfig, cfg, f"matrix.{name}") for name, cfg in section.items()}


@dataclass(frozen=True)
class RunConfig:
    """Every setting a command or experiment may read, one dataclass per config.yaml section."""
    run: RunSettings = field(default_factory=RunSettings)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(arch='mlp', hidden=(16,)))
    train: Dict[str, TrainConfig] = field(default_factory=default_train)
    attack: AttackSettings = field(default_factory=AttackSettings)
    report: ReportSettings = field(default_factory=ReportSettings)
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)
    matrix: Dict[str, ModelConfig] = field(default_factory=default_matrix)

    @classmethod
    def from_dict(cls, data: Optional[Mapping[str, Any]], env: Optional[Mapping[str, str]] = None) -> "RunConfig":
        data = dict(data or {})
        unknown = sorted(set(data) - set(CONFIG_SECTIONS))
        if unknown:
            raise UsageError(f"Unknown config section(s) {unknown}, expected {list(CONFIG_SECTIONS)}")
        run = dict(data.get('run') or {})
        env = env or {}
        # Environment defaults sit below the file.
        if 'threads' not in run and env.get('SPAUDIT_THREADS'):
            try:
                run['threads'] = int(env['SPAUDIT_THREADS'])
            except ValueError:
                raise UsageError(f"SPAUDIT_THREADS must be an integer, got '{env['SPAUDIT_THREADS']}'")
        if 'log_dir' not in run and env.get('SPAUDIT_LOG_DIR'):
            run['log_dir'] = env['SPAUDIT_LOG_DIR']
        model = data.get('model')
        return cls(
            run=dataclass_from_dict(RunSettings, run, 'run'),
            synthetic=dataclass_from_dict(SyntheticConfig, data.get('synthetic'), 'synthetic'),
            model=dataclass_from_dict(ModelConfig, model, 'model') if model else ModelConfig(arch='mlp', hidden=(16,)),
            train=_parse_train(data.get('train')),
            attack=dataclass_from_dict(AttackSettings, data.get('attack'), 'attack'),
            report=dataclass_from_dict(ReportSettings, data.get('report'), 'report'),
            analysis=dataclass_from_dict(AnalysisSettings, data.get('analysis'), 'analysis'),
            experiment=dataclass_from_dict(ExperimentSettings, data.get('experiment'), 'experiment'),
            matrix=_parse_matrix(data.get('matrix')),
        )

    @classmethod
    def load(cls, path: Optional[str], env: Optional[Mapping[str, str]] = None) -> "RunConfig":
        if path is None:
            return cls.from_dict({}, env)
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = yaml.safe_load(f)
        except FileNotFoundError:
            raise UsageError(f"Config file not found: {path}")
        except yaml.YAMLError as e:
            mark = getattr(e, 'problem_mark', None)
            raise ParseError(f"invalid YAML: {e}", path=path, line=mark.line + 1 if mark else None)
        if data is not None and not isinstance(data, dict):
            raise UsageError(f"Config file {path} must hold a mapping of sections")
        logger.debug(f"Loaded configuration from {path}")
        return cls.from_dict(data, env)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'run': dataclass_to_dict(self.run),
            'synthetic': dataclass_to_dict(self.synthetic),
            'model': dataclass_to_dict(self.model),
            'train': {m: dataclass_to_dict(c) for m, c in self.train.items()},
            'attack': dataclass_to_dict(self.attack),
            'report': dataclass_to_dict(self.report),
            'analysis': dataclass_to_dict(self.analysis),
            'experiment': dataclass_to_dict(self.experiment),
            'matrix': {n: dataclass_to_dict(c) for n, c in self.matrix.items()},
        }


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    config: RunConfig
    out_dir: str

    def __post_init__(self):
        if self.name not in EXPERIMENT_NAMES:
            raise UsageError(f"Unknown experiment '{self.name}', expected one of {EXPERIMENT_NAMES}")
        minimum = MIN_SHADOWS.get(self.name)
        if minimum and self.config.attack.n_shadows < minimum:
            raise UsageError(f"Experiment '{self.name}' needs n_shadows >= {minimum}, got {self.config.attack.n_shadows}")
        if self.name == 'complexity' and any(k < 2 for k in self.config.experiment.complexity_ks):
            raise UsageError("complexity_ks must all be >= 2")
        if self.name == 'matrix' and not self.config.matrix:
            raise UsageError("the matrix experiment needs at least one named model config")

    @classmethod
    def from_config(cls, config: RunConfig, name: Optional[str] = None, out_dir: Optional[str] = None) -> "ExperimentSpec":
        name = name or config.experiment.name
        out_dir = out_dir or os.path.join(config.experiment.out_dir, name)
        return cls(name=name, config=config, out_dir=out_dir)

    @classmethod
    def from_dict(cls, data: Optional[Mapping[str, Any]], name: Optional[str] = None,
                  out_dir: Optional[str] = None) -> "ExperimentSpec":
        return cls.from_config(RunConfig.from_dict(data), name, out_dir)

    @property
    def seed(self) -> int:
        return self.config.run.seed

    @property
    def threads(self) -> int:
        return self.config.run.threads


# --- Output plumbing ---
@contextmanager
def experiment_output(out_dir: str):
    """Yields `<out_dir>.partial`; renamed to out_dir on success, deleted on failure."""
    out_dir = os.path.normpath(out_dir)
    partial = out_dir + ".partial"
    if os.path.exists(partial):
        shutil.rmtree(partial)
    os.makedirs(partial)
    try:
        yield partial
    except BaseException:
        logger.error(f"Experiment failed; removing {partial}")
        shutil.rmtree(partial, ignore_errors=True)
        raise
    if os.path.exists(out_dir):
        shutil.rmtree(out_dir)
    os.replace(partial, out_dir)
    logger.info(f"Experiment outputs in {out_dir}")


def _plain(value):
    """numpy scalars / NaN to YAML-friendly python values."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return None if math.isnan(float(value)) else float(value)
    return value


def write_yaml(data: Mapping[str, Any], path: str):
    with atomic_write(path) as f:
        yaml.safe_dump(_plain(dict(data)), f, sort_keys=False)


def _write_html_report(out: str, markdown_text: str, title: str):
    write_markdown(markdown_text, os.path.join(out, "report.md"))
    with atomic_write(os.path.join(out, "report.html")) as f:
        f.write(markdown_to_html(markdown_text, title))


@dataclass
class AuditRun:
    scores: ScoreSet
    results: list
    report: GroupPrivacyReport


def run_audit(spec: ExperimentSpec, manifest: DatasetManifest, samples: SampleTable, out: str,
              prefix: str = "") -> AuditRun:
    """ERM shadows and targets, the configured attack, per-group report, files under `out`."""
    cfg = spec.config
    scores = audit_scores(manifest, samples, cfg.model, cfg.train['erm'], None, cfg.attack.n_shadows,
                          cfg.attack.n_targets, spec.seed, cfg.attack.protocol, cfg.attack.frac,
                          cfg.attack.stratified, spec.threads)
    results = attack_targets(scores, get_attack(cfg.attack.name, cfg.attack.variance_mode), cfg.attack.protocol)
    report = report_from_results(results, cfg.report.fprs, manifest.group_ids(), cfg.report.per_group)
    write_scores(scores, os.path.join(out, f"{prefix}scores.csv"))
    write_attack_results(results, os.path.join(out, f"{prefix}attack_results.csv"))
    write_report(report, os.path.join(out, f"{prefix}report.yaml"), meta={'dataset': manifest.name, 'seed': spec.seed})
    if cfg.report.plots:
        plot_roc_svg(results, os.path.join(out, f"{prefix}roc.svg"), manifest, cfg.report.per_group,
                     title=f"{manifest.name}: {cfg.attack.name}")
    return AuditRun(scores=scores, results=results, report=report)


def side_means(report: GroupPrivacyReport, fpr: float, spurious: Sequence[int],
               attack: Optional[str] = None) -> Tuple[float, float]:
    """Mean TPR over spurious groups and over the other groups."""
    t = report.table
    mask = (t['group'] != TOTAL) & np.isclose(t['requested_fpr'], fpr, rtol=0.0, atol=1e-15) & t['evaluable']
    if attack is not None:
        mask &= t['attack'] == attack
    cells = t[mask]
    is_spurious = cells['group'].isin([str(g) for g in spurious])
    return float(cells.loc[is_spurious, 'tpr'].mean()), float(cells.loc[~is_spurious, 'tpr'].mean())


def disparity_table(report: GroupPrivacyReport, manifest: DatasetManifest, fprs: Sequence[float],
                    attack: Optional[str] = None) -> pd.DataFrame:
    rows = []
    for fpr in fprs:
        spurious_tpr, other_tpr = side_means(report, fpr, manifest.spurious_groups(), attack)
        rows.append({'requested_fpr': fpr, 'spurious_tpr': spurious_tpr, 'nonspurious_tpr': other_tpr,
                     'disparity_ratio': disparity_ratio(report, fpr, manifest.spurious_groups(), attack)})
    return pd.DataFrame(rows)


def _dataset(spec: ExperimentSpec, out: str, synthetic: Optional[SyntheticConfig] = None):
    manifest, train, test = generate_spurious_dataset(synthetic or spec.config.synthetic)
    write_dataset(os.path.join(out, "data"), manifest, train, test)
    return manifest, train, test


# --- Experiments ---
@dataclass
class DisparityOutcome:
    report: GroupPrivacyReport
    disparity: pd.DataFrame
    manifest: DatasetManifest


def _disparity(spec: ExperimentSpec, out: str) -> DisparityOutcome:
    cfg = spec.config
    manifest, train, _ = _dataset(spec, out)
    audit = run_audit(spec, manifest, train, out)
    disparity = disparity_table(audit.report, manifest, cfg.report.fprs, cfg.attack.name)
    write_dataframe(disparity, os.path.join(out, "disparity.csv"))
    md = generate_report(audit.report, f"Group privacy disparity: {manifest.name}", manifest, cfg.report.fprs,
                         {'Disparity': frame_table(disparity)}, ["roc.svg"] if cfg.report.plots else [])
    _write_html_report(out, md, "Group privacy disparity")
    return DisparityOutcome(report=audit.report, disparity=disparity, manifest=manifest)


def run_disparity(spec: ExperimentSpec) -> DisparityOutcome:
    """Per-group TPR at each FPR and the spurious / non-spurious ratio on one synthetic dataset."""
    with experiment_output(spec.out_dir) as out:
        return _disparity(spec, out)


@dataclass
class ComplexityOutcome:
    table: pd.DataFrame
    cka: pd.DataFrame
    reports: Dict[int, GroupPrivacyReport]


def _complexity(spec: ExperimentSpec, out: str) -> ComplexityOutcome:
    cfg = spec.config
    ks = sorted(set(cfg.experiment.complexity_ks), reverse=True)
    K = ks[0]
    # Classes come in runs of K/A sharing one attribute, so every merge keeps a clean majority pattern.
    block = max(1, K // cfg.synthetic.n_attributes)
    synthetic = replace(cfg.synthetic, n_classes=K, d_core=max(cfg.synthetic.d_core, K), pattern_block=block,
                        name=f"{cfg.synthetic.name}-k{K}")
    manifest, train, test = generate_spurious_dataset(synthetic)
    test_manifest = relabel_manifest(manifest, test)

    rows, reports, references = [], {}, {}
    for k in ks:
        if k == K:
            m_k, train_k, test_k = manifest, train, test
        else:
            m_k, train_k = merge_classes(manifest, train, k)
            _, test_k = merge_classes(test_manifest, test, k)
        sub = os.path.join(out, f"k{k}")
        write_dataset(os.path.join(sub, "data"), m_k, train_k, test_k)
        audit = run_audit(spec, m_k, train_k, sub)
        reports[k] = audit.report

        model = train_model(cfg.model, train_k, cfg.train['erm'], RngStream.derive(spec.seed, "complexity", "reference", k),
                            m_k.n_classes, m_k.group_ids())
        embeddings = extract_embeddings(model, test_k)
        write_embeddings(embeddings, os.path.join(sub, "embeddings.csv"))
        complexity = feature_complexity(embeddings, cfg.analysis.tau)
        references[k] = (model, test_k)

        row = {'k': k, 'feature_complexity': complexity.k, 'tau': cfg.analysis.tau}
        for fpr in cfg.report.fprs:
            spurious_tpr, other_tpr = side_means(audit.report, fpr, m_k.spurious_groups(), cfg.attack.name)
            row[f'spurious_tpr@{fpr}'] = spurious_tpr
            row[f'nonspurious_tpr@{fpr}'] = other_tpr
            row[f'disparity@{fpr}'] = disparity_ratio(audit.report, fpr, m_k.spurious_groups(), cfg.attack.name)
        rows.append(row)
        logger.info(f"K={k}: feature complexity {complexity.k}")

    cka_frames = []
    model_K = references[K][0]
    for k in ks[1:]:
        model_k, test_k = references[k]
        profile = group_cka_profile(model_K, model_k, test_k)
        profile.insert(0, 'k', k)
        cka_frames.append(profile)
    cka = pd.concat(cka_frames, ignore_index=True) if cka_frames else pd.DataFrame(columns=['k', 'group', 'n', 'cka'])

    table = pd.DataFrame(rows)
    write_dataframe(table, os.path.join(out, "complexity.csv"))
    write_dataframe(cka, os.path.join(out, "cka.csv"))
    md = f"# Task complexity and privacy disparity\n\n## Disparity by number of classes\n\n{frame_table(table)}\n"
    md += f"## Per-group CKA against K={K}\n\n{frame_table(cka)}\n"
    _write_html_report(out, md, "Task complexity")
    return ComplexityOutcome(table=table, cka=cka, reports=reports)


def run_complexity(spec: ExperimentSpec) -> ComplexityOutcome:
    """Audits a K-class dataset and its merged variants; adds feature complexity and CKA against the K model."""
    with experiment_output(spec.out_dir) as out:
        return _complexity(spec, out)


@dataclass
class RobustOutcome:
    reports: Dict[str, GroupPrivacyReport]
    comparison: pd.DataFrame
    utility: pd.DataFrame
    target_membership: Dict[str, np.ndarray]


def _utility_rows(method: str, models: Sequence[Model], membership: np.ndarray, train: SampleTable,
                  test: SampleTable) -> List[Dict[str, Any]]:
    rows = []
    for k, model in enumerate(models):
        seen = evaluate_utility(model, train.subset(np.flatnonzero(membership[k])))
        unseen = evaluate_utility(model, test)
        rows.append({'method': method, 'target': k,
                     'train_accuracy': seen.accuracy, 'train_wga': seen.worst_group_accuracy,
                     'test_accuracy': unseen.accuracy, 'test_wga': unseen.worst_group_accuracy,
                     'accuracy_gap': seen.accuracy - unseen.accuracy,
                     'wga_gap': seen.worst_group_accuracy - unseen.worst_group_accuracy})
    return rows


def _mean_se(values: pd.Series) -> Tuple[float, float]:
    values = values.to_numpy(dtype=np.float64)
    se = float(np.std(values, ddof=1) / math.sqrt(len(values))) if len(values) > 1 else math.nan
    return float(np.mean(values)), se


def _robust(spec: ExperimentSpec, out: str) -> RobustOutcome:
    cfg = spec.config
    manifest, train, test = _dataset(spec, out)
    n_classes, group_ids = manifest.n_classes, manifest.group_ids()
    n_shadows, n_targets = cfg.attack.n_shadows, cfg.attack.n_targets

    shadow_plan = plan_splits(manifest, train, n_shadows, cfg.attack.frac, cfg.attack.stratified, spec.seed)
    shadows = run_shadows(shadow_plan, train, cfg.model, cfg.train['erm'], "shadow", 0, n_classes, group_ids, spec.threads)
    # One target plan for every method: identical IN halves, only the training rule differs.
    targets = target_plan(manifest, train, n_targets, cfg.attack.frac, cfg.attack.stratified, spec.seed)
    attacker = get_attack(cfg.attack.name, cfg.attack.variance_mode)

    reports, membership, utility_rows = {}, {}, []
    for i, method in enumerate(METHODS):
        models = train_planned_models(targets, train, cfg.model, cfg.train[method], n_classes, group_ids, spec.threads)
        target_scores = score_models(models, targets, train, "target", method, first_model_id=n_shadows + i * n_targets)
        results = attack_targets(ScoreSet.concat([shadows, target_scores]), attacker, "separate")
        reports[method] = report_from_results(results, cfg.report.fprs, group_ids, cfg.report.per_group)
        membership[method] = target_scores.membership
        utility_rows += _utility_rows(method, models, targets.membership, train, test)
        write_attack_results(results, os.path.join(out, f"{method}_attack_results.csv"))
        write_report(reports[method], os.path.join(out, f"{method}_report.yaml"), meta={'method': method, 'seed': spec.seed})
        if cfg.report.plots:
            plot_roc_svg(results, os.path.join(out, f"{method}_roc.svg"), manifest, cfg.report.per_group,
                         title=f"{method.upper()} targets")
    write_scores(shadows, os.path.join(out, "shadow_scores.csv"))

    comparison = reports['erm'].table[['group', 'requested_fpr']].copy()
    for method in METHODS:
        comparison[f'{method}_tpr'] = reports[method].table['tpr'].to_numpy()
        comparison[f'{method}_tpr_se'] = reports[method].table['tpr_se'].to_numpy()
    utility = pd.DataFrame(utility_rows)
    summary_rows = []
    for method in METHODS:
        part = utility[utility['method'] == method]
        row = {'method': method}
        for column in ('train_accuracy', 'train_wga', 'test_accuracy', 'test_wga', 'accuracy_gap', 'wga_gap'):
            row[column], row[f'{column}_se'] = _mean_se(part[column])
        summary_rows.append(row)
    utility_summary = pd.DataFrame(summary_rows)

    write_dataframe(comparison, os.path.join(out, "robust.csv"))
    write_dataframe(utility, os.path.join(out, "utility.csv"))
    write_dataframe(utility_summary, os.path.join(out, "utility_summary.csv"))
    md = f"# ERM vs group-DRO vs DFR targets\n\nShadows: {n_shadows} ERM models. Targets: {n_targets} per method, shared splits.\n\n"
    md += f"## TPR by group\n\n{frame_table(comparison)}\n## Utility\n\n{frame_table(utility_summary)}\n"
    _write_html_report(out, md, "Robust training and privacy")
    return RobustOutcome(reports=reports, comparison=comparison, utility=utility_summary, target_membership=membership)


def run_robust(spec: ExperimentSpec) -> RobustOutcome:
    """ERM shadows attack ERM, DRO and DFR targets trained on the same split bitmaps."""
    with experiment_output(spec.out_dir) as out:
        return _robust(spec, out)


@dataclass
class MemorizationOutcome:
    samples: pd.DataFrame
    groups: pd.DataFrame
    t_statistic: float
    p_value: float


def _memorization(spec: ExperimentSpec, out: str) -> MemorizationOutcome:
    cfg = spec.config
    manifest, train, _ = _dataset(spec, out)
    plan = plan_splits(manifest, train, cfg.attack.n_shadows, cfg.attack.frac, cfg.attack.stratified, spec.seed)
    shadows = run_shadows(plan, train, cfg.model, cfg.train['erm'], "shadow", 0, manifest.n_classes,
                          manifest.group_ids(), spec.threads)
    write_scores(shadows, os.path.join(out, "scores.csv"))
    report = memorization_report(shadows, cfg.analysis.memorization_variance_mode, manifest, cfg.analysis.bandwidth)
    write_memorization(report, os.path.join(out, "memorization.csv"))
    write_dataframe(report.groups, os.path.join(out, "memorization_groups.csv"))
    write_density_curves(report.densities, os.path.join(out, "densities.csv"))
    try:
        t_stat, p_value = memorization_disparity_test(report, manifest.spurious_groups())
    except DataValidationError as e:
        logger.warning(f"Spurious vs non-spurious t-test skipped: {e}")
        t_stat, p_value = math.nan, math.nan
    write_yaml({'t_statistic': t_stat, 'p_value': p_value, 'excluded_samples': len(report.excluded)},
               os.path.join(out, "summary.yaml"))
    md = f"# Memorization by group\n\n{frame_table(report.groups)}\n"
    md += f"One-sided Welch t-test (spurious d > non-spurious d): t = {t_stat:.3f}, p = {p_value:.3g}\n"
    _write_html_report(out, md, "Memorization")
    return MemorizationOutcome(samples=report.samples, groups=report.groups, t_statistic=t_stat, p_value=p_value)


def run_memorization(spec: ExperimentSpec) -> MemorizationOutcome:
    """Privacy score d and label memorization per sample, group means and KDE curves of d."""
    with experiment_output(spec.out_dir) as out:
        return _memorization(spec, out)


@dataclass
class CkaOutcome:
    profile: pd.DataFrame


def _cka_profile(spec: ExperimentSpec, out: str) -> CkaOutcome:
    cfg = spec.config
    manifest, train, test = _dataset(spec, out)
    n_classes, group_ids = manifest.n_classes, manifest.group_ids()
    erm_stream = RngStream.derive(spec.seed, "cka", "erm")
    erm = train_model(cfg.model, train, cfg.train['erm'], erm_stream, n_classes, group_ids)
    dro = train_model(cfg.model, train, cfg.train['dro'], erm_stream, n_classes, group_ids)
    erm_alt = train_model(replace(cfg.model, seed=cfg.model.seed + 1), train, cfg.train['erm'],
                          RngStream.derive(spec.seed, "cka", "erm-alt"), n_classes, group_ids)

    # Baseline: a model of an independently drawn dataset, embedding its own inputs row by row.
    unrelated_cfg = replace(cfg.synthetic, seed=cfg.synthetic.seed + 1, name=f"{cfg.synthetic.name}-unrelated")
    u_manifest, u_train, u_test = generate_spurious_dataset(unrelated_cfg)
    unrelated = train_model(cfg.model, u_train, cfg.train['erm'], RngStream.derive(spec.seed, "cka", "unrelated"),
                            u_manifest.n_classes, u_manifest.group_ids())
    n = min(len(test), len(u_test))
    test_rows = test.subset(np.arange(n))
    baseline = EmbeddingMatrix(test_rows.sample_ids, extract_embeddings(unrelated, u_test.subset(np.arange(n))).matrix)

    dro_profile = group_cka_profile(erm, dro, test_rows, group_ids)
    seed_profile = group_cka_profile(erm, erm_alt, test_rows, group_ids)
    base_profile = embedding_cka_profile(extract_embeddings(erm, test_rows), baseline, test_rows.groups, group_ids)
    profile = dro_profile.rename(columns={'cka': 'erm_vs_dro'})
    profile = profile.merge(seed_profile[['group', 'cka']].rename(columns={'cka': 'erm_vs_erm_seed'}), on='group', how='outer')
    profile = profile.merge(base_profile[['group', 'cka']].rename(columns={'cka': 'erm_vs_unrelated'}), on='group', how='outer')
    write_dataframe(profile, os.path.join(out, "cka_profile.csv"))
    _write_html_report(out, f"# Feature similarity per group\n\n{frame_table(profile)}\n", "CKA profile")
    return CkaOutcome(profile=profile)


def run_cka_profile(spec: ExperimentSpec) -> CkaOutcome:
    """Per-group linear CKA: ERM vs DRO, ERM vs ERM (other seed), ERM vs an unrelated-data model."""
    with experiment_output(spec.out_dir) as out:
        return _cka_profile(spec, out)


@dataclass
class MatrixOutcome:
    tpr: pd.DataFrame
    achieved_fpr: pd.DataFrame
    diagonal_best: Dict[str, bool]


def _matrix(spec: ExperimentSpec, out: str) -> MatrixOutcome:
    cfg = spec.config
    manifest, train, _ = _dataset(spec, out)
    matrix = cross_config_attack_matrix(cfg.matrix, cfg.matrix, manifest, train, cfg.train['erm'], cfg.attack.name,
                                        cfg.experiment.matrix_fpr, cfg.attack.n_shadows, cfg.attack.n_targets,
                                        spec.seed, cfg.attack.variance_mode, spec.threads)
    write_matrix(matrix, os.path.join(out, "matrix.csv"))
    write_yaml({'fpr': cfg.experiment.matrix_fpr, 'diagonal_best': matrix.diagonal_best}, os.path.join(out, "summary.yaml"))
    md = f"# Shadow x target architecture matrix (TPR at {cfg.experiment.matrix_fpr:g} FPR)\n\n"
    md += frame_table(matrix.tpr.reset_index())
    md += "\n" + "\n".join(f"- target {t}: matched shadows {'are' if best else 'are not'} the strongest"
                           for t, best in matrix.diagonal_best.items()) + "\n"
    _write_html_report(out, md, "Attack matrix")
    return MatrixOutcome(tpr=matrix.tpr, achieved_fpr=matrix.achieved_fpr, diagonal_best=matrix.diagonal_best)


def run_matrix(spec: ExperimentSpec) -> MatrixOutcome:
    with experiment_output(spec.out_dir) as out:
        return _matrix(spec, out)


@dataclass
class AttacksOutcome:
    report: GroupPrivacyReport


def _attacks(spec: ExperimentSpec, out: str) -> AttacksOutcome:
    cfg = spec.config
    manifest, train, _ = _dataset(spec, out)
    scores = audit_scores(manifest, train, cfg.model, cfg.train['erm'], None, cfg.attack.n_shadows,
                          cfg.attack.n_targets, spec.seed, cfg.attack.protocol, cfg.attack.frac,
                          cfg.attack.stratified, spec.threads)
    write_scores(scores, os.path.join(out, "scores.csv"))
    reports, all_results = [], []
    for name in ATTACK_NAMES:
        results = attack_targets(scores, get_attack(name, cfg.attack.variance_mode), cfg.attack.protocol)
        all_results += results
        reports.append(report_from_results(results, cfg.report.fprs, manifest.group_ids(), cfg.report.per_group))
        if cfg.report.plots:
            plot_roc_svg(results, os.path.join(out, f"{name}_roc.svg"), manifest, cfg.report.per_group, title=name)
    report = combine_reports(reports)
    write_attack_results(all_results, os.path.join(out, "attack_results.csv"))
    write_report(report, os.path.join(out, "report.yaml"), meta={'dataset': manifest.name, 'seed': spec.seed})
    write_dataframe(report.table, os.path.join(out, "attacks.csv"))
    md = generate_report(report, "Attack comparison", manifest, cfg.report.fprs,
                         plots=[f"{n}_roc.svg" for n in ATTACK_NAMES] if cfg.report.plots else [])
    _write_html_report(out, md, "Attack comparison")
    return AttacksOutcome(report=report)


def run_attacks(spec: ExperimentSpec) -> AttacksOutcome:
    """Online LiRA, offline LiRA and the threshold attack against the same targets."""
    with experiment_output(spec.out_dir) as out:
        return _attacks(spec, out)


EXPERIMENTS: Dict[str, Callable[[ExperimentSpec], Any]] = {
    'disparity': run_disparity,
    'complexity': run_complexity,
    'robust': run_robust,
    'memorization': run_memorization,
    'cka_profile': run_cka_profile,
    'matrix': run_matrix,
    'attacks': run_attacks,
}


def run_experiment(spec: ExperimentSpec):
    logger.info(f"--- Experiment '{spec.name}' (seed {spec.seed}) -> {spec.out_dir} ---")
    outcome = EXPERIMENTS[spec.name](spec)
    logger.info(f"--- Experiment '{spec.name}' complete ---")
    return outcome
