import numpy as np
import pytest

from base_attack import AttackResult
from core import ParseError
from markdown_styler import convert_markdown_to_html, markdown_to_html
from metrics import report_from_results
from report_generator import frame_table, generate_report, plot_roc_svg


def _results(groups, members, n_targets=2):
    gen = np.random.default_rng(0)
    members = np.asarray(members, dtype=bool)
    return [AttackResult(t, "lira_online", np.arange(len(groups)), gen.normal(size=len(groups)) + 2.0 * members,
                         members, np.asarray(groups)) for t in range(n_targets)]


def test_report_labels_groups_and_flags_unevaluable_cells(small_dataset):
    manifest, _, _ = small_dataset
    # group 3 has members only
    groups = [0, 0, 1, 1, 2, 2, 3, 3]
    members = [1, 0, 1, 0, 1, 0, 1, 1]
    report = report_from_results(_results(groups, members), [0.5], group_ids=manifest.group_ids())
    md = generate_report(report, manifest=manifest, fprs=[0.5], extra_sections={"Notes": "hello"},
                         plots=["roc_lira_online.svg"])
    assert md.startswith("# Membership inference audit")
    assert "## lira_online" in md
    assert "(spurious)" in md
    assert "_not evaluable_" in md
    assert "TPR ratio at 50.00% FPR" in md
    assert "## Notes\n\nhello" in md
    assert "![ROC](roc_lira_online.svg)" in md


def test_roc_plot_legend_and_determinism(tmp_path, small_dataset):
    manifest, _, _ = small_dataset
    groups = np.repeat([0, 1, 2, 3], 10)
    members = np.tile([1, 0], 20)
    results = _results(groups, members)
    a, b = str(tmp_path / "a.svg"), str(tmp_path / "b.svg")
    labels = plot_roc_svg(results, a, manifest=manifest)
    assert labels == ["total", "group 0", "group 1 (spurious)", "group 2 (spurious)", "group 3"]
    plot_roc_svg(results, b, manifest=manifest)
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    assert plot_roc_svg(results, a, manifest=manifest, per_group=False) == ["total"]


def test_frame_table_formats_floats():
    import pandas as pd
    md = frame_table(pd.DataFrame({'group': ['0'], 'cka': [0.123456]}))
    assert md.splitlines()[0] == "| group | cka |"
    assert "| 0 | 0.1235 |" in md


def test_markdown_to_html(tmp_path):
    html = markdown_to_html("# Audit\n\n| a | b |\n|---|---|\n| 1 | 2 |\n", title="t")
    assert "<table>" in html
    assert "<title>t</title>" in html

    src, dst = tmp_path / "r.md", tmp_path / "r.html"
    src.write_text("# Audit\n", encoding='utf-8')
    convert_markdown_to_html(str(src), str(dst))
    assert "<h1>Audit</h1>" in dst.read_text(encoding='utf-8')
    with pytest.raises(ParseError):
        convert_markdown_to_html(str(tmp_path / "missing.md"), str(dst))
