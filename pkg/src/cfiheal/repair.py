"""Automatic repair of visibility-induced link failures.

Under -fvisibility=hidden, symbols that used to be exported silently stop
resolving across shared-object boundaries. The repair loop reads undefined /
hidden-symbol diagnostics off a failed build, locates each symbol's
definition in the project tree, and prepends an explicit
__attribute__((visibility("default"))) to the definition's declarator. Every
textual insertion is journaled (iteration, file, line, symbol) so the whole
set of patches can be reverted exactly.

Definitions are recognized, not declarations: the symbol name followed by a
balanced parameter list whose closing parenthesis leads (possibly through
whitespace and further attributes) to an opening brace. Prototypes end in a
semicolon and are never patched.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

from .build import (
    BuildMode,
    BuildOutcome,
    Diagnostic,
    DiagnosticKind,
    ProjectLock,
    run_build,
)
from .config import ProjectConfig
from .symbols import demangle

ATTRIBUTE_TEXT = '__attribute__((visibility("default"))) '
JOURNAL_NAME = "repair-journal.tsv"

_SOURCE_SUFFIXES = (".c", ".cc", ".cpp", ".cxx", ".C")


class RepairError(RuntimeError):
    """Repair could not proceed (unreadable tree, malformed journal)."""


@dataclass(frozen=True)
class DefinitionSite:
    """Location of a function definition; offsets are 0-based into the text."""

    file: Path
    line: int
    column: int
    name_offset: int
    alternates: tuple[str, ...] = ()


@dataclass(frozen=True)
class VisibilityPatch:
    symbol: str
    demangled: str
    file: str
    line: int
    column: int
    applied_text: str
    iteration: int


@dataclass
class RepairLedger:
    """Everything the repair loop did, for reporting and for the journal."""

    patches: list[VisibilityPatch] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)
    ambiguities: list[tuple[str, tuple[str, ...]]] = field(default_factory=list)
    iterations_build_phase: int = 0
    iterations_test_phase: int = 0
    build_attempts: int = 0

    @property
    def patched_symbols(self) -> set[str]:
        return {p.symbol for p in self.patches} | {p.demangled for p in self.patches}


def base_identifier(demangled: str) -> str:
    """The unqualified function identifier to search source text for."""
    head = demangled.split("(", 1)[0].strip()
    return head.rsplit("::", 1)[-1].strip() or demangled


def extract_unresolved_symbols(diagnostics: tuple[Diagnostic, ...] | list[Diagnostic]) -> list[str]:
    """Ordered unique symbols from undefined-reference and hidden-symbol diagnostics."""
    symbols: list[str] = []
    for diag in diagnostics:
        if diag.kind is DiagnosticKind.OTHER or diag.symbol is None:
            continue
        if diag.symbol not in symbols:
            symbols.append(diag.symbol)
    return symbols


_ATTR_SKIP = re.compile(r"\s*__attribute__\s*\(\(", re.S)


def _skip_attributes(text: str, pos: int) -> int:
    """Advance past whitespace and __attribute__((...)) blocks."""
    while True:
        while pos < len(text) and text[pos].isspace():
            pos += 1
        m = _ATTR_SKIP.match(text, pos)
        if not m:
            return pos
        depth = 0
        i = m.end() - 2
        while i < len(text):
            if text[i] == "(":
                depth += 1
            elif text[i] == ")":
                depth -= 1
                if depth == 0:
                    pos = i + 1
                    break
            i += 1
        else:
            return pos


def _definition_offsets(text: str, name: str) -> list[int]:
    """Byte offsets of `name` where it begins a function definition."""
    offsets: list[int] = []
    for m in re.finditer(rf"\b{re.escape(name)}\s*\(", text):
        line_start = text.rfind("\n", 0, m.start()) + 1
        if text[line_start:].lstrip().startswith("#"):
            continue
        depth = 0
        i = m.end() - 1
        while i < len(text):
            if text[i] == "(":
                depth += 1
            elif text[i] == ")":
                depth -= 1
                if depth == 0:
                    break
            i += 1
        if i >= len(text):
            continue
        after = _skip_attributes(text, i + 1)
        if after < len(text) and text[after] == "{":
            offsets.append(m.start())
    return offsets


def _iter_sources(root: Path) -> list[Path]:
    files = [
        p
        for p in root.rglob("*")
        if p.is_file() and p.suffix in _SOURCE_SUFFIXES and not p.is_symlink()
    ]
    return sorted(files, key=lambda p: str(p.relative_to(root)))


def locate_definition(symbol: str, root: Path) -> DefinitionSite | None:
    """First definition of symbol under root, in deterministic path order.

    Further candidates are reported through DefinitionSite.alternates so the
    caller can record the ambiguity.
    """
    name = base_identifier(demangle(symbol))
    hits: list[tuple[Path, int]] = []
    for path in _iter_sources(root):
        try:
            text = path.read_text(errors="replace")
        except OSError:
            continue
        if name not in text:
            continue
        for offset in _definition_offsets(text, name):
            hits.append((path, offset))
    if not hits:
        return None
    path, offset = hits[0]
    text = path.read_text(errors="replace")
    line = text.count("\n", 0, offset) + 1
    column = offset - (text.rfind("\n", 0, offset) + 1) + 1
    alternates = tuple(
        f"{p.relative_to(root)}:{p.read_text(errors='replace').count(chr(10), 0, o) + 1}"
        for p, o in hits[1:]
    )
    return DefinitionSite(path, line, column, offset, alternates)


def _already_default(text: str, name_offset: int) -> bool:
    """True if the declarator already carries a visibility attribute."""
    start = max(
        text.rfind(";", 0, name_offset),
        text.rfind("}", 0, name_offset),
        text.rfind("{", 0, name_offset),
    )
    prefix = text[start + 1 : name_offset]
    return "visibility" in prefix


def apply_visibility_default(site: DefinitionSite, symbol: str, iteration: int) -> VisibilityPatch:
    """Insert the attribute immediately before the definition's name token.

    Placing the attribute between type and declarator keeps the insertion
    point independent of where the declaration starts, and is valid GNU C and
    C++. Idempotent: a declarator that already mentions visibility is left
    untouched and the patch records an empty applied_text.
    """
    text = site.file.read_text(errors="replace")
    rel = str(site.file)
    if _already_default(text, site.name_offset):
        return VisibilityPatch(symbol, demangle(symbol), rel, site.line, site.column, "", iteration)
    patched = text[: site.name_offset] + ATTRIBUTE_TEXT + text[site.name_offset :]
    site.file.write_text(patched)
    return VisibilityPatch(
        symbol, demangle(symbol), rel, site.line, site.column, ATTRIBUTE_TEXT, iteration
    )


def remove_visibility_default(file: Path, symbol: str) -> bool:
    """Remove one journaled insertion before symbol's definition; True if removed."""
    text = file.read_text(errors="replace")
    name = base_identifier(demangle(symbol))
    for offset in _definition_offsets(text, name):
        if text[:offset].endswith(ATTRIBUTE_TEXT):
            start = offset - len(ATTRIBUTE_TEXT)
            file.write_text(text[:start] + text[offset:])
            return True
    return False


def _journal_path(cfg: ProjectConfig) -> Path:
    return cfg.report_dir / JOURNAL_NAME


def journal_patch(cfg: ProjectConfig, patch: VisibilityPatch) -> None:
    path = _journal_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as fh:
        fh.write(f"{patch.iteration}\t{patch.file}\t{patch.line}\t{patch.symbol}\n")


def revert_patches(cfg: ProjectConfig) -> int:
    """Undo every journaled insertion; returns the number of removals."""
    path = _journal_path(cfg)
    if not path.exists():
        return 0
    removed = 0
    with ProjectLock(cfg.report_dir):
        for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
            if not raw.strip():
                continue
            parts = raw.split("\t")
            if len(parts) != 4:
                raise RepairError(f"journal line {lineno} is malformed: {raw!r}")
            _, file_str, _, symbol = parts
            file = Path(file_str)
            if not file.is_absolute():
                file = cfg.project_root / file
            if file.is_file() and remove_visibility_default(file, symbol):
                removed += 1
        path.unlink()
    return removed


def repair_until_buildable(
    cfg: ProjectConfig,
    mode: BuildMode,
    ledger: RepairLedger | None = None,
    *,
    phase: str = "build",
    start_iteration: int = 1,
) -> tuple[BuildOutcome, RepairLedger]:
    """Alternate run_build and symbol patching until the build stands.

    Terminates when the build succeeds, when an attempt yields zero new
    patches (no progress), or when the iteration budget is exhausted. Only
    attempts that applied at least one patch count as repair iterations.
    """
    if ledger is None:
        ledger = RepairLedger()
    attempts = 0
    run_configure = True
    iteration = start_iteration
    with ProjectLock(cfg.report_dir):
        while True:
            attempts += 1
            ledger.build_attempts += 1
            outcome = run_build(cfg, mode, iteration=iteration, run_configure=run_configure)
            if outcome.succeeded:
                return outcome, ledger
            run_configure = False
            new_patches = 0
            for symbol in extract_unresolved_symbols(outcome.diagnostics):
                if symbol in ledger.patched_symbols:
                    continue
                site = locate_definition(symbol, cfg.project_root)
                if site is None:
                    ledger.skipped.append((symbol, "definition not found under project root"))
                    continue
                if site.alternates:
                    ledger.ambiguities.append((symbol, site.alternates))
                patch = apply_visibility_default(site, symbol, iteration)
                if not patch.applied_text:
                    ledger.skipped.append((symbol, "definition already carries a visibility attribute"))
                    continue
                rel_patch = VisibilityPatch(
                    patch.symbol,
                    patch.demangled,
                    str(site.file.relative_to(cfg.project_root))
                    if site.file.is_relative_to(cfg.project_root)
                    else patch.file,
                    patch.line,
                    patch.column,
                    patch.applied_text,
                    patch.iteration,
                )
                ledger.patches.append(rel_patch)
                journal_patch(cfg, rel_patch)
                new_patches += 1
            if new_patches == 0:
                return outcome, ledger
            if phase == "build":
                ledger.iterations_build_phase += 1
            else:
                ledger.iterations_test_phase += 1
            run_configure = True
            iteration += 1
            if attempts >= cfg.max_repair_iterations:
                ledger.build_attempts += 1
                final = run_build(cfg, mode, iteration=iteration, run_configure=True)
                return final, ledger
