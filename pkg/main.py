import os
import sys
import glob
import logging
import argparse
from dataclasses import replace
from datetime import datetime
from typing import List, Optional

import numpy as np
import pandas as pd
import yaml
from dotenv import load_dotenv

# Load SPAUDIT_* defaults from a .env file if one is present
load_dotenv()

from analysis import (
    cross_config_attack_matrix, embedding_cka_profile, feature_complexity,
    memorization_report, write_density_curves, write_matrix, write_memorization,
)
from attack import attack_targets, read_attack_results, write_attack_results
from attack_factory import ATTACK_NAMES, get_attack
from core import (
    SpauditError, UsageError, DataValidationError, NumericError, SampleTable,
    atomic_write, dataclass_from_dict, read_dataset, read_embeddings, write_dataframe, write_dataset, write_embeddings,
)
from experiments import EXPERIMENT_NAMES, ExperimentSpec, RunConfig, run_experiment, write_yaml
from markdown_styler import markdown_to_html
from metrics import report_from_results, write_report
from report_generator import generate_report, plot_roc_svg, write_markdown
from shadows import (
    PROTOCOLS, ScoreSet, plan_splits, read_scores, score_models, target_plan, train_planned_models, write_scores,
)
from synthdata import generate_spurious_dataset, group_stats
from trainer import METHODS, ModelConfig, extract_embeddings, read_model, write_model

logger = logging.getLogger('spaudit.cli')


def setup_logging(command: str, log_dir: str = 'logs', verbose: bool = False):
    """Configures the root logger: a per-run file under log_dir plus stderr."""
    if not os.path.exists(log_dir):
        os.makedirs(log_dir)
    timestamp = datetime.now().strftime("%Y%m%d%H%M%S")
    log_filename = os.path.join(log_dir, f"spaudit_{command}_{timestamp}.log")

    root_logger = logging.getLogger()
    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)

    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(log_filename, mode='a'),
            logging.StreamHandler(sys.stderr)
        ]
    )
    logging.getLogger('matplotlib').setLevel(logging.WARNING)
    logging.info(f"Logging to {log_filename}")


class SpauditArgumentParser(argparse.ArgumentParser):
    """Usage errors become UsageError (exit 1) instead of argparse's exit 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _float_list(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(',') if x.strip()]
    except ValueError:
        raise UsageError(f"Expected a comma-separated list of numbers, got '{text}'")


def _int_list(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(',') if x.strip()]
    except ValueError:
        raise UsageError(f"Expected a comma-separated list of integers, got '{text}'")


def _model_config(args, cfg: RunConfig) -> ModelConfig:
    model = cfg.model
    if args.arch is not None:
        hidden = tuple(_int_list(args.hidden)) if args.hidden else (() if args.arch == 'linear' else model.hidden or (16,))
        model = ModelConfig(arch=args.arch, hidden=hidden, activation=model.activation,
                            init_scale=model.init_scale, seed=model.seed)
    elif args.hidden:
        model = replace(model, hidden=tuple(_int_list(args.hidden)))
    if args.activation is not None:
        model = replace(model, activation=args.activation)
    return model


def _add_model_flags(parser):
    group = parser.add_argument_group('Model')
    group.add_argument("--arch", choices=['linear', 'mlp'], help="Model architecture (default from config).")
    group.add_argument("--hidden", help="Comma-separated hidden widths for an mlp, e.g. 16 or 64,32.")
    group.add_argument("--activation", choices=['relu', 'tanh'], help="Hidden activation.")


# --- Commands ---
def cmd_synth(args, cfg: RunConfig) -> int:
    synthetic = cfg.synthetic
    overrides = {k: v for k, v in {
        'n_classes': args.n_classes, 'spur_strength': args.p_maj, 'n_train': args.n_train,
        'n_test': args.n_test, 'name': args.name, 'seed': args.seed,
    }.items() if v is not None}
    synthetic = replace(synthetic, **overrides)
    manifest, train, test = generate_spurious_dataset(synthetic)
    write_dataset(args.out, manifest, train, test)
    stats = group_stats(manifest, train)
    write_dataframe(stats.groups, os.path.join(args.out, "groups.csv"))
    for row in stats.groups.itertuples(index=False):
        logger.info(f"group {row.group_id} (y={row.class_id}, a={row.attribute_id}"
                    f"{', spurious' if row.is_spurious else ''}): {row.count} train samples")
    return 0


def cmd_shadows(args, cfg: RunConfig) -> int:
    manifest, train, _ = read_dataset(args.data)
    model_cfg = _model_config(args, cfg)
    method = args.method
    target_method = args.target_method or method
    n_classes, group_ids = manifest.n_classes, manifest.group_ids()
    seed, threads = cfg.run.seed, cfg.run.threads

    plan = plan_splits(manifest, train, args.n, cfg.attack.frac, cfg.attack.stratified, seed)
    models = train_planned_models(plan, train, model_cfg, cfg.train[method], n_classes, group_ids, threads)
    scores = score_models(models, plan, train, "shadow", method)
    all_models = list(models)
    if args.targets:
        targets = target_plan(manifest, train, args.targets, cfg.attack.frac, cfg.attack.stratified, seed)
        target_models = train_planned_models(targets, train, model_cfg, cfg.train[target_method], n_classes, group_ids, threads)
        scores = ScoreSet.concat([scores, score_models(target_models, targets, train, "target", target_method, args.n)])
        all_models += target_models
    write_scores(scores, args.out)

    if args.models_dir:
        for model_id, model in zip(scores.model_ids, all_models):
            write_model(model, os.path.join(args.models_dir, f"model_{int(model_id):04d}.spml"))
        logger.info(f"Wrote {len(all_models)} model files to {args.models_dir}")
    return 0


def cmd_attack(args, cfg: RunConfig) -> int:
    scores = read_scores(args.scores)
    protocol = args.protocol or cfg.attack.protocol
    variance_mode = args.variance_mode or cfg.attack.variance_mode
    target_ids = _int_list(args.targets) if args.targets else None
    results = []
    for name in (args.attack or [cfg.attack.name]):
        results += attack_targets(scores, get_attack(name, variance_mode), protocol, target_ids)
    write_attack_results(results, args.out)
    return 0


def cmd_report(args, cfg: RunConfig) -> int:
    results = []
    for path in args.results:
        results += read_attack_results(path)
    if not results:
        raise DataValidationError("no attack results to report on")
    fprs = _float_list(args.fprs) if args.fprs else list(cfg.report.fprs)
    per_group = cfg.report.per_group if args.per_group is None else args.per_group
    manifest = read_dataset(args.data)[0] if args.data else None
    group_ids = manifest.group_ids() if manifest is not None else None

    report = report_from_results(results, fprs, group_ids, per_group)
    os.makedirs(args.out, exist_ok=True)
    write_report(report, os.path.join(args.out, "report.yaml"), meta={'sources': list(args.results)})
    plots = []
    for attack in (report.attacks() if cfg.report.plots else []):
        name = f"roc_{attack}.svg"
        plot_roc_svg([r for r in results if r.attack == attack], os.path.join(args.out, name), manifest, per_group, title=attack)
        plots.append(name)
    md = generate_report(report, "Membership inference audit", manifest, fprs, plots=plots)
    write_markdown(md, os.path.join(args.out, "report.md"))
    with atomic_write(os.path.join(args.out, "report.html")) as f:
        f.write(markdown_to_html(md, "Membership inference audit"))
    return 0


def cmd_mem(args, cfg: RunConfig) -> int:
    scores = read_scores(args.scores)
    shadows = scores.select(scores.role_mask('shadow'))
    manifest = read_dataset(args.data)[0] if args.data else None
    variance_mode = args.variance_mode or cfg.analysis.memorization_variance_mode
    report = memorization_report(shadows, variance_mode, manifest, cfg.analysis.bandwidth)
    os.makedirs(args.out, exist_ok=True)
    write_memorization(report, os.path.join(args.out, "memorization.csv"))
    write_dataframe(report.groups, os.path.join(args.out, "memorization_groups.csv"))
    write_density_curves(report.densities, os.path.join(args.out, "densities.csv"))
    return 0


def _groups_for(ids: np.ndarray, samples: Optional[SampleTable]) -> Optional[np.ndarray]:
    if samples is None:
        return None
    lookup = pd.Series(samples.groups, index=samples.sample_ids)
    missing = ~pd.Index(ids).isin(lookup.index)
    if missing.any():
        raise DataValidationError(f"{int(missing.sum())} embedding row(s) are not in the dataset")
    return lookup.loc[ids].to_numpy()


def cmd_cka(args, cfg: RunConfig) -> int:
    samples = None
    if args.data:
        _, train, test = read_dataset(args.data)
        samples = test if args.split == 'test' else train
    if args.a and args.b:
        a, b = read_embeddings(args.a), read_embeddings(args.b)
    elif args.model_a and args.model_b:
        if samples is None:
            raise UsageError("--model-a/--model-b need --data")
        a = extract_embeddings(read_model(args.model_a), samples)
        b = extract_embeddings(read_model(args.model_b), samples)
    else:
        raise UsageError("give either --a and --b embedding files, or --model-a and --model-b with --data")
    groups = _groups_for(a.sample_ids, samples)
    if groups is None:
        groups = np.zeros(a.shape[0], dtype=np.int64)
        profile = embedding_cka_profile(a, b, groups, group_ids=[])
    else:
        profile = embedding_cka_profile(a, b, groups)
    write_dataframe(profile, args.out)
    logger.info(f"Total linear CKA: {profile.iloc[0]['cka']:.6f}")
    return 0


def cmd_complexity(args, cfg: RunConfig) -> int:
    embeddings = read_embeddings(args.embeddings)
    tau = args.tau if args.tau is not None else cfg.analysis.tau
    result = feature_complexity(embeddings, tau)
    curve = pd.DataFrame({'component': np.arange(1, len(result.evr) + 1),
                          'eigenvalue': result.eigenvalues, 'evr': result.evr})
    write_dataframe(curve, args.out)
    logger.info(f"Feature complexity at tau={tau}: k={result.k}")
    print(result.k)
    return 0


def cmd_embed(args, cfg: RunConfig) -> int:
    _, train, test = read_dataset(args.data)
    samples = test if args.split == 'test' else train
    if samples is None:
        raise DataValidationError(f"dataset {args.data} has no {args.split} split")
    write_embeddings(extract_embeddings(read_model(args.model), samples), args.out)
    return 0


def cmd_matrix(args, cfg: RunConfig) -> int:
    if args.config_dir:
        paths = sorted(glob.glob(os.path.join(args.config_dir, "*.yaml")))
        if not paths:
            raise UsageError(f"No *.yaml model configs in {args.config_dir}")
        configs = {}
        for path in paths:
            with open(path, 'r', encoding='utf-8') as f:
                configs[os.path.splitext(os.path.basename(path))[0]] = dataclass_from_dict(ModelConfig, yaml.safe_load(f), path)
    else:
        configs = cfg.matrix
    if args.data:
        manifest, train, _ = read_dataset(args.data)
    else:
        manifest, train, _ = generate_spurious_dataset(cfg.synthetic)
    fpr = args.fpr if args.fpr is not None else cfg.experiment.matrix_fpr
    matrix = cross_config_attack_matrix(configs, configs, manifest, train, cfg.train['erm'], cfg.attack.name, fpr,
                                        cfg.attack.n_shadows, cfg.attack.n_targets, cfg.run.seed,
                                        cfg.attack.variance_mode, cfg.run.threads)
    write_matrix(matrix, args.out)
    write_yaml({'fpr': fpr, 'diagonal_best': matrix.diagonal_best}, os.path.splitext(args.out)[0] + "_summary.yaml")
    return 0


def cmd_exp(args, cfg: RunConfig) -> int:
    spec = ExperimentSpec.from_config(cfg, args.name, args.out)
    run_experiment(spec)
    return 0


COMMANDS = {
    'synth': cmd_synth, 'shadows': cmd_shadows, 'attack': cmd_attack, 'report': cmd_report, 'mem': cmd_mem,
    'cka': cmd_cka, 'complexity': cmd_complexity, 'embed': cmd_embed, 'matrix': cmd_matrix, 'exp': cmd_exp,
}


def build_parser() -> argparse.ArgumentParser:
    parser = SpauditArgumentParser(
        prog="spaudit",
        description="Group-aware membership inference audits for models trained under spurious correlation.",
        formatter_class=argparse.RawTextHelpFormatter,
        epilog="""
Examples of use:
  - Generate the default synthetic dataset:
    spaudit synth --out data/

  - Train 16 ERM shadows and 8 targets, keeping the model files:
    spaudit shadows --data data/ --n 16 --targets 8 --out scores.csv --models-dir models/

  - Online LiRA against every target, then a per-group report with ROC plots:
    spaudit attack --scores scores.csv --out results.csv
    spaudit report --results results.csv --data data/ --fprs 0.001,0.01 --out report/

  - Run a whole experiment from a config file:
    spaudit --config config.yaml exp robust --out runs/robust
"""
    )

    global_group = parser.add_argument_group('Global Options')
    global_group.add_argument("--config", help="YAML run configuration (defaults apply when omitted).")
    global_group.add_argument("--seed", type=int, help="Run seed; overrides run.seed.")
    global_group.add_argument("--threads", type=int, help="Worker threads for model training; overrides run.threads.")
    global_group.add_argument("--log-dir", help="Directory for run logs; overrides run.log_dir.")
    global_group.add_argument("--verbose", action="store_true", help="Debug-level logging.")

    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=SpauditArgumentParser)
    sub.required = True

    p = sub.add_parser("synth", help="Generate a synthetic dataset with a spurious attribute.")
    p.add_argument("--out", required=True, help="Output dataset directory.")
    p.add_argument("--n-classes", type=int)
    p.add_argument("--p-maj", type=float, help="Probability the attribute follows the class pattern in train.")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--name")

    p = sub.add_parser("shadows", help="Train shadow (and optionally target) models and write their scores.")
    p.add_argument("--data", required=True, help="Dataset directory.")
    p.add_argument("--n", type=int, required=True, help="Number of shadow models.")
    p.add_argument("--method", choices=METHODS, default="erm")
    p.add_argument("--targets", type=int, default=0, help="Separate target models to train (0 = none, use loo).")
    p.add_argument("--target-method", choices=METHODS, help="Training method of the targets (default --method).")
    p.add_argument("--out", required=True, help="Score CSV.")
    p.add_argument("--models-dir", help="Also write every model as an SPML1 file here.")
    _add_model_flags(p)

    p = sub.add_parser("attack", help="Score membership for every target in a score file.")
    p.add_argument("--scores", required=True)
    p.add_argument("--attack", action="append", choices=ATTACK_NAMES, help="Repeatable; default from config.")
    p.add_argument("--variance-mode", choices=['fixed', 'per_example'])
    p.add_argument("--protocol", choices=PROTOCOLS)
    p.add_argument("--targets", help="Comma-separated target model ids (default: all).")
    p.add_argument("--out", required=True, help="Attack result CSV.")

    p = sub.add_parser("report", help="Per-group TPR at low FPR, AUROC, Markdown/HTML report and ROC SVGs.")
    p.add_argument("--results", nargs='+', required=True, help="Attack result CSV file(s).")
    p.add_argument("--fprs", help="Comma-separated FPRs, e.g. 0.001,0.01.")
    p.add_argument("--per-group", dest="per_group", action="store_true", default=None)
    p.add_argument("--no-per-group", dest="per_group", action="store_false")
    p.add_argument("--data", help="Dataset directory (group names and spurious flags).")
    p.add_argument("--out", required=True, help="Output directory.")

    p = sub.add_parser("mem", help="Privacy score d and label memorization per sample, with KDE curves per group.")
    p.add_argument("--scores", required=True)
    p.add_argument("--data", help="Dataset directory (spurious flags).")
    p.add_argument("--variance-mode", choices=['fixed', 'per_example'])
    p.add_argument("--out", required=True, help="Output directory.")

    p = sub.add_parser("cka", help="Linear CKA between two embeddings, overall and per group.")
    p.add_argument("--a", help="Embedding CSV.")
    p.add_argument("--b", help="Embedding CSV.")
    p.add_argument("--model-a", help="SPML1 model file.")
    p.add_argument("--model-b", help="SPML1 model file.")
    p.add_argument("--data", help="Dataset directory.")
    p.add_argument("--split", choices=['train', 'test'], default='test')
    p.add_argument("--out", required=True, help="CKA CSV.")

    p = sub.add_parser("complexity", help="Principal components needed to reach an explained-variance threshold.")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--tau", type=float)
    p.add_argument("--out", required=True, help="EVR curve CSV.")

    p = sub.add_parser("embed", help="Penultimate-layer embeddings of a model on a dataset split.")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=['train', 'test'], default='test')
    p.add_argument("--out", required=True, help="Embedding CSV.")

    p = sub.add_parser("matrix", help="Shadow x target architecture attack matrix.")
    p.add_argument("--config-dir", help="Directory of <name>.yaml model configs (default: config matrix section).")
    p.add_argument("--data", help="Dataset directory (default: generate from config).")
    p.add_argument("--fpr", type=float)
    p.add_argument("--out", required=True, help="Matrix CSV.")

    p = sub.add_parser("exp", help="Run a scripted experiment.")
    p.add_argument("name", choices=EXPERIMENT_NAMES)
    p.add_argument("--out", help="Run directory (default: experiment.out_dir/<name>).")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config, env=os.environ)
    run = cfg.run
    if args.seed is not None:
        run = replace(run, seed=args.seed)
    if args.threads is not None:
        if args.threads < 1:
            raise UsageError(f"--threads must be >= 1, got {args.threads}")
        run = replace(run, threads=args.threads)
    if args.log_dir is not None:
        run = replace(run, log_dir=args.log_dir)
    return replace(cfg, run=run)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
    except SpauditError as e:
        print(f"spaudit: error: {e}", file=sys.stderr)
        return e.exit_code

    try:
        setup_logging(args.command, cfg.run.log_dir, args.verbose)
    except OSError as e:
        print(f"spaudit: error: cannot open log directory {cfg.run.log_dir}: {e}", file=sys.stderr)
        return UsageError.exit_code
    logging.info(f"--- spaudit {args.command} (seed {cfg.run.seed}, threads {cfg.run.threads}) ---")
    try:
        code = COMMANDS[args.command](args, cfg)
    except SpauditError as e:
        logging.critical(f"{type(e).__name__}: {e}")
        return e.exit_code
    except (ArithmeticError, np.linalg.LinAlgError) as e:
        logging.critical(f"NumericError: {type(e).__name__}: {e}")
        return NumericError.exit_code
    logging.info(f"--- spaudit {args.command} finished ---")
    return code


if __name__ == "__main__":
    sys.exit(main())
