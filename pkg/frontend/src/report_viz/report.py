"""Standalone HTML summary of evaluation results files."""

from __future__ import annotations

import html
import json
from pathlib import Path

from .frames import FrameError

GAP = "&mdash;"
_RESULT_KEYS = {"variant", "pl", "accuracy", "edit_similarity", "n_positions"}


def _load_results(paths: list[str | Path]) -> dict[str, dict[str, dict]]:
    """{variant: {pl: row}} merged across files; raw values kept verbatim."""
    if not paths:
        raise FrameError("need at least one results file")
    merged: dict[str, dict[str, dict]] = {}
    for path in paths:
        path = Path(path)
        if not path.exists():
            raise FrameError(f"missing input file: {path}")
        rows = json.loads(path.read_text())
        if not isinstance(rows, list):
            raise FrameError(f"{path}: expected a JSON array of result rows")
        for row in rows:
            if not isinstance(row, dict) or not _RESULT_KEYS <= set(row):
                raise FrameError(f"{path}: result row missing keys {sorted(_RESULT_KEYS)}")
            merged.setdefault(row["variant"], {})[row["pl"]] = row
    return merged


def _load_ttests(path: str | Path | None) -> list[dict]:
    if path is None:
        return []
    rows = json.loads(Path(path).read_text())
    if not isinstance(rows, list):
        raise FrameError(f"{path}: expected a JSON array of t-test rows")
    for row in rows:
        if not {"variant_a", "variant_b", "pl", "degenerate"} <= set(row):
            raise FrameError(f"{path}: t-test row missing keys")
    return rows


def _fmt(value) -> str:
    # repr round-trips floats, so the report shows the input value exactly
    return html.escape(repr(value) if isinstance(value, float) else str(value))


def _results_table(results: dict[str, dict[str, dict]]) -> str:
    pls = sorted({pl for per_pl in results.values() for pl in per_pl if pl != "Overall"})
    cols = pls + ["Overall"]
    head = "".join(f"<th colspan=2>{html.escape(p)}</th>" for p in cols)
    sub = "<th>Acc</th><th>ES</th>" * len(cols)
    lines = [
        "<table>",
        f"<tr><th rowspan=2>variant</th>{head}</tr>",
        f"<tr>{sub}</tr>",
    ]
    for variant in sorted(results):
        cells = []
        for p in cols:
            row = results[variant].get(p)
            if row is None:
                cells.append(f"<td class=gap>{GAP}</td><td class=gap>{GAP}</td>")
            else:
                cells.append(
                    f"<td>{_fmt(row['accuracy'])}</td><td>{_fmt(row['edit_similarity'])}</td>"
                )
        lines.append(f"<tr><td>{html.escape(variant)}</td>{''.join(cells)}</tr>")
    lines.append("</table>")
    return "\n".join(lines)


def _delta_table(results: dict[str, dict[str, dict]], baseline: str = "pl_moe") -> str:
    if baseline not in results:
        return ""
    pls = sorted({pl for per_pl in results.values() for pl in per_pl})
    lines = [
        f"<h2>accuracy deltas vs {html.escape(baseline)}</h2>",
        "<table>",
        "<tr><th>variant</th>" + "".join(f"<th>{html.escape(p)}</th>" for p in pls) + "</tr>",
    ]
    base = results[baseline]
    for variant in sorted(results):
        if variant == baseline:
            continue
        cells = []
        for p in pls:
            a, b = results[variant].get(p), base.get(p)
            if a is None or b is None:
                cells.append(f"<td class=gap>{GAP}</td>")
            else:
                cells.append(f"<td>{a['accuracy'] - b['accuracy']:+.4f}</td>")
        lines.append(f"<tr><td>{html.escape(variant)}</td>{''.join(cells)}</tr>")
    lines.append("</table>")
    return "\n".join(lines)


def _ttest_table(ttests: list[dict]) -> str:
    if not ttests:
        return ""
    lines = [
        "<h2>paired t-tests</h2>",
        "<table>",
        "<tr><th>comparison</th><th>pl</th><th>t</th><th>p</th><th>flag</th></tr>",
    ]
    for row in ttests:
        name = f"{row['variant_a']} vs {row['variant_b']}"
        t = GAP if row.get("t") is None else _fmt(row["t"])
        p = GAP if row.get("p") is None else _fmt(row["p"])
        flag = "<b>degenerate</b>" if row["degenerate"] else ""
        lines.append(
            f"<tr><td>{html.escape(name)}</td><td>{html.escape(row['pl'])}</td>"
            f"<td>{t}</td><td>{p}</td><td>{flag}</td></tr>"
        )
    lines.append("</table>")
    return "\n".join(lines)


def render_report(
    results_paths: list[str | Path],
    out: str | Path,
    ttests_path: str | Path | None = None,
    baseline: str = "pl_moe",
) -> Path:
    """One HTML page: per-PL Acc/ES table, deltas vs the baseline, t-tests.

    Missing (variant, pl) cells render as an explicit gap marker, never as
    zero; degenerate t-tests are flagged.
    """
    results = _load_results(list(results_paths))
    ttests = _load_ttests(ttests_path)
    body = "\n".join(
        part
        for part in (
            "<h1>completion evaluation</h1>",
            _results_table(results),
            _delta_table(results, baseline),
            _ttest_table(ttests),
        )
        if part
    )
    doc = (
        "<!doctype html>\n<html><head><meta charset='utf-8'>"
        "<style>table{border-collapse:collapse}td,th{border:1px solid #999;"
        "padding:3px 8px;text-align:right}td:first-child,th:first-child"
        "{text-align:left}.gap{color:#b00}</style>"
        f"<title>completion evaluation</title></head>\n<body>\n{body}\n</body></html>\n"
    )
    out = Path(out)
    out.write_text(doc)
    return out
