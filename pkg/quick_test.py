import os
from dataclasses import replace

from attack import attack_targets
from attack_factory import get_attack
from experiments import RunConfig
from metrics import TOTAL, disparity_ratio, report_from_results
from shadows import audit_scores
from synthdata import generate_spurious_dataset
from trainer import ModelConfig


def quick_test():
    # Load config, then shrink it so the whole audit runs in seconds
    config_path = os.path.join(os.path.dirname(os.path.abspath(__file__)), "config.yaml")
    cfg = RunConfig.load(config_path)
    synthetic = replace(cfg.synthetic, n_train=300, n_test=100)
    train_cfg = replace(cfg.train['erm'], epochs=5)
    print(f"Synthetic dataset: {synthetic.n_classes} classes, spur_strength {synthetic.spur_strength}")

    manifest, train, _ = generate_spurious_dataset(synthetic)
    print(f"Groups: {manifest.group_ids()}  spurious: {manifest.spurious_groups()}")

    scores = audit_scores(manifest, train, ModelConfig(arch='linear'), train_cfg, n_shadows=8, n_targets=2,
                          seed=cfg.run.seed)
    assert scores.n_models == 10, "Should have 8 shadows and 2 targets"
    print("✓ Shadows and targets trained")

    results = attack_targets(scores, get_attack(cfg.attack.name, cfg.attack.variance_mode))
    report = report_from_results(results, [0.1], manifest.group_ids())
    auroc = report.value(TOTAL, 0.1, 'auroc')
    assert 0.0 <= auroc <= 1.0
    print(f"✓ {cfg.attack.name}: total AUROC {auroc:.3f}, TPR@10% {report.value(TOTAL, 0.1):.3f}")
    print(f"  spurious / non-spurious TPR ratio: {disparity_ratio(report, 0.1, manifest.spurious_groups()):.3f}")


if __name__ == "__main__":
    quick_test()
