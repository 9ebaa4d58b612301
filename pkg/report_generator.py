"""
Builds the Markdown audit report and the log-log ROC plots that go with it.
"""
import math
import logging
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from base_attack import AttackResult
from core import DatasetManifest, atomic_write
from metrics import GroupPrivacyReport, TOTAL, roc_curve, disparity_ratio

logger = logging.getLogger('spaudit.report')

# Fixed salt and no date: identical inputs give byte-identical SVGs.
SVG_RC = {'svg.hashsalt': 'spaudit', 'svg.fonttype': 'none'}


def _fmt(value, digits: int = 4) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "n/a"
    return f"{value:.{digits}f}"


def _pct(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "n/a"
    return f"{100 * value:.2f}%"


def _group_label(group: str, manifest: Optional[DatasetManifest]) -> str:
    if group == TOTAL or manifest is None:
        return group
    spec = manifest.group(int(group))
    tag = " (spurious)" if spec.is_spurious else ""
    return f"{group}: y={spec.class_id}, a={spec.attribute_id}{tag}"


def privacy_table(report: GroupPrivacyReport, attack: str, manifest: Optional[DatasetManifest] = None) -> str:
    """Markdown table of TPR (at the achieved FPR) and AUROC, one row per group and FPR."""
    t = report.table[report.table['attack'] == attack]
    lines = [
        "| Group | Members | Nonmembers | Requested FPR | Achieved FPR | TPR | TPR SE | AUROC | AUROC SE | Targets |",
        "|---|---|---|---|---|---|---|---|---|---|",
    ]
    for row in t.itertuples(index=False):
        if not row.evaluable:
            lines.append(f"| {_group_label(row.group, manifest)} | {row.n_members:.1f} | {row.n_nonmembers:.1f} | "
                         f"{_pct(row.requested_fpr)} | _not evaluable_ | | | | | 0 |")
            continue
        lines.append(
            f"| {_group_label(row.group, manifest)} | {row.n_members:.1f} | {row.n_nonmembers:.1f} | "
            f"{_pct(row.requested_fpr)} | {_pct(row.achieved_fpr)} | {_pct(row.tpr)} | {_pct(row.tpr_se)} | "
            f"{_fmt(row.auroc)} | {_fmt(row.auroc_se)} | {row.n_targets} |"
        )
    return "\n".join(lines) + "\n"


def frame_table(frame: pd.DataFrame, digits: int = 4) -> str:
    """Any small DataFrame as a Markdown table."""
    cols = list(frame.columns)
    lines = ["| " + " | ".join(str(c) for c in cols) + " |", "|" + "---|" * len(cols)]
    for row in frame.itertuples(index=False):
        cells = [_fmt(v, digits) if isinstance(v, float) else str(v) for v in row]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def generate_report(report: GroupPrivacyReport, title: str = "Membership inference audit",
                    manifest: Optional[DatasetManifest] = None, fprs: Sequence[float] = (),
                    extra_sections: Optional[Dict[str, str]] = None, plots: Sequence[str] = ()) -> str:
    """Markdown report: one section per attack, a disparity summary, then any extra sections."""
    md = f"# {title}\n\n"
    if manifest is not None:
        md += f"**Dataset:** {manifest.name} | **Samples:** {manifest.n_samples} | **Classes:** {manifest.n_classes} | "
        md += f"**Spurious groups:** {', '.join(str(g) for g in manifest.spurious_groups()) or 'none'}\n\n"
    md += f"**Targets:** {report.n_targets}\n\n---\n\n"

    for attack in report.attacks():
        md += f"## {attack}\n\n"
        md += privacy_table(report, attack, manifest) + "\n"
        if manifest is not None and manifest.spurious_groups():
            for fpr in fprs:
                ratio = disparity_ratio(report, fpr, manifest.spurious_groups(), attack)
                md += f"- Spurious / non-spurious TPR ratio at {_pct(fpr)} FPR: **{_fmt(ratio, 3)}**\n"
            md += "\n"

    for heading, body in (extra_sections or {}).items():
        md += f"## {heading}\n\n{body}\n"

    if plots:
        md += "## ROC curves\n\n"
        for path in plots:
            md += f"![ROC]({path})\n\n"
    return md


def write_markdown(markdown_text: str, path: str):
    with atomic_write(path) as f:
        f.write(markdown_text)
    logger.info(f"Successfully saved report to {path}")


# --- Plots ---
def pooled_roc_points(results: Sequence[AttackResult], group: Optional[int] = None):
    """(fpr, tpr, n_nonmembers) with scores pooled across targets; None if not evaluable."""
    scores = np.concatenate([r.scores if group is None else r.scores[r.groups == group] for r in results])
    members = np.concatenate([r.is_member if group is None else r.is_member[r.groups == group] for r in results])
    if members.all() or not members.any():
        return None
    curve = roc_curve(scores, members)
    return curve.fpr, curve.tpr, curve.n_nonmembers


def plot_roc_svg(results: Sequence[AttackResult], path: str, manifest: Optional[DatasetManifest] = None,
                 per_group: bool = True, title: str = "") -> List[str]:
    """
    Log-log ROC; spurious groups solid, other groups dashed, total in black.
    Returns the legend labels in drawing order.
    """
    spurious = set(manifest.spurious_groups()) if manifest is not None else set()
    if manifest is not None:
        group_ids = manifest.group_ids()
    else:
        group_ids = sorted({int(g) for r in results for g in np.unique(r.groups)})

    curves = []
    total = pooled_roc_points(results)
    if total is not None:
        curves.append(("total", total, '-', 'black'))
    if per_group:
        cmap = plt.get_cmap('tab10')
        for i, g in enumerate(group_ids):
            points = pooled_roc_points(results, g)
            if points is None:
                logger.warning(f"Group {g} has no members or no nonmembers; no ROC line drawn")
                continue
            style = '-' if g in spurious else '--'
            label = f"group {g}" + (" (spurious)" if g in spurious else "")
            curves.append((label, points, style, cmap(i % 10)))

    floor = min((1.0 / points[2] for _, points, _, _ in curves), default=1e-3)
    with plt.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(5, 5))
        for label, (fpr, tpr, _), style, color in curves:
            ax.plot(np.maximum(fpr, floor), np.maximum(tpr, floor), linestyle=style, color=color, label=label, linewidth=1.2)
        ax.plot([floor, 1], [floor, 1], linestyle=':', color='grey', linewidth=0.8)
        ax.set_xscale('log')
        ax.set_yscale('log')
        ax.set_xlim(floor, 1)
        ax.set_ylim(floor, 1)
        ax.set_xlabel("False positive rate")
        ax.set_ylabel("True positive rate")
        if title:
            ax.set_title(title)
        ax.legend(loc='lower right', fontsize=7)
        fig.tight_layout()
        with atomic_write(path, 'wb') as f:
            fig.savefig(f, format='svg', metadata={'Date': None})
        plt.close(fig)
    logger.info(f"Wrote ROC plot with {len(curves)} line(s) to {path}")
    return [label for label, _, _, _ in curves]
