"""Enforcement-coverage accounting and report emission.

Every function in the final binary is exactly one of:

  Protected          hidden visibility, no ignorelist entry covers it
  DefaultVisibility  exported (originally default or patched back to default)
  Ignored            an active ignorelist entry suppresses its checks

Ignored wins over DefaultVisibility when both apply. Percentages are
rendered at two decimals with banker's rounding, and the largest component
absorbs the rounding residual so each displayed triple sums to exactly
100.00.

report.json is the canonical artifact (schema_version marks the layout);
report.html is a pure projection of the same dictionary, so the two never
disagree, and rendering the same dictionary twice yields identical bytes.
"""

from __future__ import annotations

import html
import json
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .ignorelist import EntryKind, IgnorelistEntry

SCHEMA_VERSION = "1"


class EnforcementStatus(Enum):
    PROTECTED = "Protected"
    DEFAULT_VISIBILITY = "DefaultVisibility"
    IGNORED = "Ignored"


@dataclass(frozen=True)
class FunctionRecord:
    """One defined function, as fed into coverage accounting."""

    name: str
    file: str | None
    call_sites: int
    visibility: str
    patched: bool = False


@dataclass(frozen=True)
class CoverageTriple:
    protected: float
    default_visibility: float
    ignored: float
    counts: tuple[int, int, int]

    def as_dict(self) -> dict:
        return {
            "protected": self.protected,
            "default_visibility": self.default_visibility,
            "ignored": self.ignored,
            "counts": {
                "protected": self.counts[0],
                "default_visibility": self.counts[1],
                "ignored": self.counts[2],
            },
        }


@dataclass(frozen=True)
class CoverageCore:
    per_function: CoverageTriple
    per_call_site: CoverageTriple
    statuses: Mapping[str, EnforcementStatus]


def reconcile_percentages(counts: Sequence[int]) -> tuple[float, ...]:
    """Two-decimal percentages that sum to exactly 100.00.

    Banker's rounding per component; the largest component (ties broken by
    position) absorbs the residual. An empty population yields all zeros.
    """
    total = sum(counts)
    if total == 0:
        return tuple(0.0 for _ in counts)
    hundred = Decimal(100)
    cent = Decimal("0.01")
    raw = [Decimal(c) * hundred / Decimal(total) for c in counts]
    rounded = [r.quantize(cent, rounding=ROUND_HALF_EVEN) for r in raw]
    residual = Decimal("100.00") - sum(rounded)
    if residual:
        largest = max(range(len(counts)), key=lambda i: (counts[i], -i))
        rounded[largest] += residual
    return tuple(float(r) for r in rounded)


def _matches_ignorelist(record: FunctionRecord, entries: Sequence[IgnorelistEntry]) -> bool:
    for entry in entries:
        if not entry.active:
            continue
        if entry.kind is EntryKind.FUN and record.name == entry.pattern:
            return True
        if entry.kind is EntryKind.SRC and record.file is not None:
            if record.file == entry.pattern or record.file.endswith("/" + entry.pattern):
                return True
    return False


def compute_coverage(
    functions: Sequence[FunctionRecord],
    entries: Sequence[IgnorelistEntry],
    patched_symbols: Iterable[str] = (),
) -> CoverageCore:
    """Status per function plus reconciled per-function/per-call-site triples."""
    patched = set(patched_symbols)
    statuses: dict[str, EnforcementStatus] = {}
    fn_counts = [0, 0, 0]
    site_counts = [0, 0, 0]
    for record in functions:
        if _matches_ignorelist(record, entries):
            status = EnforcementStatus.IGNORED
        elif record.patched or record.name in patched or record.visibility == "default":
            status = EnforcementStatus.DEFAULT_VISIBILITY
        else:
            status = EnforcementStatus.PROTECTED
        statuses[record.name] = status
        index = {
            EnforcementStatus.PROTECTED: 0,
            EnforcementStatus.DEFAULT_VISIBILITY: 1,
            EnforcementStatus.IGNORED: 2,
        }[status]
        fn_counts[index] += 1
        site_counts[index] += record.call_sites

    fn_pct = reconcile_percentages(fn_counts)
    site_pct = reconcile_percentages(site_counts)
    return CoverageCore(
        per_function=CoverageTriple(*fn_pct, counts=tuple(fn_counts)),
        per_call_site=CoverageTriple(*site_pct, counts=tuple(site_counts)),
        statuses=statuses,
    )


def format_duration(seconds: float) -> str:
    total = int(seconds)
    hours, rem = divmod(total, 3600)
    minutes, secs = divmod(rem, 60)
    return f"{hours:02d}:{minutes:02d}:{secs:02d}"


def render_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def _table(headers: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    head = "".join(f"<th>{html.escape(str(h))}</th>" for h in headers)
    body = "".join(
        "<tr>" + "".join(f"<td>{html.escape(str(c))}</td>" for c in row) + "</tr>"
        for row in rows
    )
    return f"<table><thead><tr>{head}</tr></thead><tbody>{body}</tbody></table>"


def render_html(report: dict) -> str:
    """Deterministic HTML projection of the report dictionary."""
    cov = report.get("coverage", {})
    census = report.get("census", {})
    violations = report.get("violations", {})
    tests = report.get("tests", {})
    repair = report.get("repair", {})

    def triple_rows(key: str) -> list[list[object]]:
        t = cov.get(key, {})
        counts = t.get("counts", {})
        return [
            ["Protected", f"{t.get('protected', 0):.2f}%", counts.get("protected", 0)],
            [
                "DefaultVisibility",
                f"{t.get('default_visibility', 0):.2f}%",
                counts.get("default_visibility", 0),
            ],
            ["Ignored", f"{t.get('ignored', 0):.2f}%", counts.get("ignored", 0)],
        ]

    sections = [
        "<h1>CFI enforcement report</h1>",
        f"<p>Schema {html.escape(str(report.get('schema_version', '?')))}"
        f" &middot; duration {html.escape(str(report.get('duration', '00:00:00')))}</p>",
        "<h2>Coverage (per function)</h2>",
        _table(["Status", "Share", "Functions"], triple_rows("per_function")),
        "<h2>Coverage (per call site)</h2>",
        _table(["Status", "Share", "Call sites"], triple_rows("per_call_site")),
        "<h2>Indirect-transfer census</h2>",
        _table(
            ["Category", "Sites"],
            [[k, census[k]] for k in sorted(census)],
        ),
        "<h2>Test outcomes</h2>",
        _table(["Class", "Tests"], [[k, tests[k]] for k in sorted(tests)]),
        "<h2>Violations</h2>",
        _table(
            ["Total", "Fixed", "Unresolvable"],
            [
                [
                    violations.get("total", 0),
                    violations.get("fixed", 0),
                    violations.get("unresolvable", 0),
                ]
            ],
        ),
    ]
    by_file = violations.get("by_file", [])
    if by_file:
        sections.append("<h3>By source file</h3>")
        sections.append(
            _table(
                ["File", "Violations", "Triggering tests"],
                [
                    [row["file"], row["count"], ", ".join(row["tests"])]
                    for row in by_file
                ],
            )
        )
    details = violations.get("details", [])
    if details:
        sections.append("<h3>Details</h3>")
        sections.append(
            _table(
                ["Id", "Function", "File", "Status", "Level", "Tests"],
                [
                    [
                        d["id"],
                        d.get("function", "?"),
                        d.get("file") or "<unknown>",
                        d["status"],
                        d.get("level", ""),
                        ", ".join(d.get("tests", [])),
                    ]
                    for d in details
                ],
            )
        )
    entries = report.get("ignorelist", [])
    sections.append("<h2>Final ignorelist</h2>")
    if entries:
        sections.append(
            "<pre>" + html.escape("\n".join(entries)) + "</pre>"
        )
    else:
        sections.append("<p>empty</p>")
    patches = repair.get("patches", [])
    sections.append("<h2>Visibility patches</h2>")
    if patches:
        sections.append(
            _table(
                ["Iteration", "Symbol", "File", "Line"],
                [[p["iteration"], p["symbol"], p["file"], p["line"]] for p in patches],
            )
        )
    else:
        sections.append("<p>none</p>")

    style = (
        "body{font-family:sans-serif;margin:2em;max-width:70em}"
        "table{border-collapse:collapse;margin:1em 0}"
        "td,th{border:1px solid #999;padding:0.3em 0.7em;text-align:left}"
        "th{background:#eee}pre{background:#f6f6f6;padding:1em}"
    )
    return (
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">"
        f"<title>CFI enforcement report</title><style>{style}</style></head><body>"
        + "".join(sections)
        + "</body></html>\n"
    )


def emit_report(
    report: dict, report_dir: Path, formats: Sequence[str] = ("json", "html")
) -> list[Path]:
    """Write the requested projections; returns the paths written."""
    report_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if "json" in formats:
        path = report_dir / "report.json"
        path.write_text(render_json(report))
        written.append(path)
    if "html" in formats:
        path = report_dir / "report.html"
        path.write_text(render_html(report))
        written.append(path)
    return written
