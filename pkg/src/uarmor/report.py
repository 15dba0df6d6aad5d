"""Plain-text tables for overhead and survival results."""

from __future__ import annotations

from .gadgets import SurvivalReport, format_survival_table
from .overhead import OverheadReport

NOT_APPLICABLE = "x"


def _table(header, rows) -> list[str]:
    rows = [tuple(map(str, header))] + [tuple(map(str, r)) for r in rows]
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    out = [" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
    out.insert(1, "-+-".join("-" * w for w in widths))
    return out


def _num(v: float) -> str:
    v = round(v, 2)
    return "0" if v == 0 else f"{v:g}"


def format_overhead_table(title: str, results: list[tuple[str, OverheadReport]]) -> str:
    """Two blocks: relative to the application and relative to device resources."""
    app = [(name, _num(r.code_pct_app), _num(r.data_pct_app), f"{NOT_APPLICABLE} ({r.memory_bytes} B)",
            _num(r.runtime_pct_app)) for name, r in results]
    res = [(name, _num(r.code_pct_res), _num(r.data_pct_res), _num(r.memory_pct_res), NOT_APPLICABLE)
           for name, r in results]
    lines = [title, ""]
    lines += _table(("Wrt. Application", "%Code", "%Data", "%Memory", "%Runtime"), app)
    lines.append("")
    lines += _table(("Wrt. Resources", "%Code", "%Data", "%Memory", "%Runtime"), res)
    return "\n".join(lines) + "\n"


def format_code_size_table(title: str, results: list[tuple[str, OverheadReport]]) -> str:
    rows = [(name, _num(r.code_pct_app), _num(r.code_pct_res)) for name, r in results]
    return "\n".join([title, ""] + _table(("App", "% CS (A)", "% CS (R)"), rows)) + "\n"


def format_survival(reports: list[SurvivalReport]) -> str:
    return format_survival_table(reports)
