"""Address symbolization: static addresses to functions, files and lines.

Resolution layers, best first:
  1. symbol-table function spans plus line tables (confidence Debuginfo),
  2. symbol-table spans without line info (confidence SymbolTable),
  3. disassembly-derived boundary heuristics for stripped regions
     (confidence BoundaryHeuristic; such functions exist only as synthetic
     range labels and never carry file or line).

Runtime addresses from a trap are translated to static addresses through the
faulting mapping's file offset and the binary's PT_LOAD headers, which stays
correct when segment file offsets and virtual addresses disagree.

The disassembler is pluggable: anything with a
``function_candidates(Path) -> list[FunctionSpan]`` method can serve as the
backend (the shipped one drives objdump). Backends only ever contribute
heuristic spans; symbol-table spans always win where both exist.
"""

from __future__ import annotations

import bisect
import re
import subprocess
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Protocol, Sequence

from .elf import ElfError, ElfFile, ElfSymbol, LineTable
from .tracing import MemoryRegion


class Confidence(Enum):
    DEBUGINFO = "Debuginfo"
    SYMBOL_TABLE = "SymbolTable"
    BOUNDARY_HEURISTIC = "BoundaryHeuristic"


class ResolutionError(LookupError):
    """The address falls outside every known function span."""


@dataclass(frozen=True)
class SymbolInfo:
    function: str
    source_file: str | None
    line: int | None
    confidence: Confidence

    def __post_init__(self) -> None:
        if self.confidence is Confidence.DEBUGINFO and self.source_file is None:
            raise ValueError("Debuginfo confidence requires a source file")


@dataclass(frozen=True)
class FunctionSpan:
    name: str
    start: int
    end: int
    source: str = "symtab"  # "symtab" or "heuristic"

    def __post_init__(self) -> None:
        if self.end <= self.start:
            raise ValueError(f"empty function span: {self.name} at 0x{self.start:x}")

    def contains(self, addr: int) -> bool:
        return self.start <= addr < self.end


def demangle(symbol: str) -> str:
    """Demangled spelling via c++filt; non-mangled names pass through."""
    if not symbol.startswith("_Z"):
        return symbol
    try:
        out = subprocess.run(["c++filt", symbol], capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.TimeoutExpired):
        return symbol
    result = out.stdout.strip()
    return result if result and out.returncode == 0 else symbol


class DisassemblyBackend(Protocol):
    def function_candidates(self, binary: Path) -> list[FunctionSpan]:
        """Heuristic function spans recovered from a disassembly pass."""
        ...


_OBJDUMP_SECTION = re.compile(r"^Disassembly of section (\S+):")
_OBJDUMP_LABEL = re.compile(r"^([0-9a-f]+) <(.+)>:$")
_OBJDUMP_INSN = re.compile(r"^\s+([0-9a-f]+):\t((?:[0-9a-f]{2} )+)\s*\t?(.*)$")

_FLOW_ENDERS = {"ret", "retq", "jmp", "jmpq", "hlt", "ud2"}
_PADDING = {"nop", "nopw", "nopl", "int3", "cs", "data16", "xchg"}
_PROLOGUE = {"endbr64", "push", "pushq", "sub", "mov"}


class ObjdumpBackend:
    """Reference disassembly backend built on binutils objdump."""

    def __init__(self, objdump: str = "objdump"):
        self.objdump = objdump

    def function_candidates(self, binary: Path) -> list[FunctionSpan]:
        try:
            proc = subprocess.run(
                [self.objdump, "-d", str(binary)],
                capture_output=True,
                text=True,
                timeout=300,
            )
        except (OSError, subprocess.TimeoutExpired):
            return []
        if proc.returncode != 0:
            return []

        starts: dict[int, str | None] = {}
        section_last_end = 0
        flow_broken = True
        in_text = False
        for raw in proc.stdout.splitlines():
            m = _OBJDUMP_SECTION.match(raw)
            if m:
                in_text = m.group(1) == ".text"
                flow_broken = True
                continue
            if not in_text:
                continue
            m = _OBJDUMP_LABEL.match(raw)
            if m:
                flow_broken = True
                continue
            m = _OBJDUMP_INSN.match(raw)
            if not m:
                continue
            addr = int(m.group(1), 16)
            insn_len = len(m.group(2).split())
            mnemonic = (m.group(3).split() or [""])[0]
            section_last_end = max(section_last_end, addr + insn_len)
            if mnemonic in _PADDING:
                continue
            if flow_broken and mnemonic in _PROLOGUE:
                starts.setdefault(addr, None)
            flow_broken = mnemonic in _FLOW_ENDERS

        ordered = sorted(starts)
        spans: list[FunctionSpan] = []
        for i, start in enumerate(ordered):
            end = ordered[i + 1] if i + 1 < len(ordered) else section_last_end
            if end > start:
                name = starts[start] or f"fn_0x{start:x}"
                spans.append(FunctionSpan(name, start, end, source="heuristic"))
        return spans


def runtime_to_static(
    elf: ElfFile, runtime_addr: int, regions: Sequence[MemoryRegion], binary: Path
) -> int | None:
    """Static vaddr for a runtime address, or None when untranslatable."""
    binary_str = str(binary)
    for region in regions:
        if region.contains(runtime_addr) and region.path == binary_str:
            file_offset = region.offset + (runtime_addr - region.start)
            return elf.file_offset_to_vaddr(file_offset)
    return None


@dataclass
class _BinaryView:
    elf: ElfFile
    spans: list[FunctionSpan]
    starts: list[int]
    line_table: LineTable


class Symbolizer:
    """Per-binary caches over the resolution layers; results are deterministic."""

    def __init__(self, backend: DisassemblyBackend | None = None):
        self.backend = backend or ObjdumpBackend()
        self.warnings: list[str] = []
        self._cache: dict[tuple[str, int, int], _BinaryView | None] = {}

    def _view(self, binary: Path) -> _BinaryView | None:
        binary = Path(binary)
        try:
            stat = binary.stat()
        except OSError as exc:
            self.warnings.append(f"unreadable binary {binary}: {exc}")
            return None
        key = (str(binary), stat.st_mtime_ns, stat.st_size)
        if key in self._cache:
            return self._cache[key]
        try:
            elf = ElfFile(binary)
        except (ElfError, OSError) as exc:
            self.warnings.append(f"unparseable binary {binary}: {exc}")
            self._cache[key] = None
            return None
        spans = self._build_spans(elf, binary)
        table = LineTable.from_elf(elf)
        self.warnings.extend(f"{binary}: {w}" for w in table.warnings)
        view = _BinaryView(elf, spans, [s.start for s in spans], table)
        self._cache[key] = view
        return view

    def _build_spans(self, elf: ElfFile, binary: Path) -> list[FunctionSpan]:
        symtab_spans: list[FunctionSpan] = []
        by_start: dict[int, ElfSymbol] = {}
        for sym in elf.function_symbols():
            if sym.size <= 0:
                continue
            held = by_start.get(sym.value)
            if held is None or (held.bind == 0 and sym.bind != 0):
                by_start[sym.value] = sym
        ordered = sorted(by_start.values(), key=lambda s: s.value)
        for i, sym in enumerate(ordered):
            end = sym.value + sym.size
            if i + 1 < len(ordered):
                end = min(end, ordered[i + 1].value)
            if end > sym.value:
                symtab_spans.append(FunctionSpan(demangle(sym.name), sym.value, end))

        heuristic = self.backend.function_candidates(binary)
        if not symtab_spans:
            return sorted(heuristic, key=lambda s: s.start)

        # Fill uncovered gaps with heuristic candidates; symtab always wins.
        spans = list(symtab_spans)
        covered = [(s.start, s.end) for s in symtab_spans]
        for cand in heuristic:
            start, end = cand.start, cand.end
            for cov_start, cov_end in covered:
                if start >= cov_end or end <= cov_start:
                    continue
                if start < cov_start:
                    end = cov_start
                else:
                    start = max(start, cov_end)
                if end <= start:
                    break
            if end > start and not any(cs <= start < ce for cs, ce in covered):
                spans.append(FunctionSpan(f"fn_0x{start:x}", start, end, source="heuristic"))
        spans.sort(key=lambda s: s.start)
        trimmed: list[FunctionSpan] = []
        for span in spans:
            if trimmed and span.start < trimmed[-1].end:
                prev = trimmed[-1]
                trimmed[-1] = FunctionSpan(prev.name, prev.start, span.start, prev.source)
            trimmed.append(span)
        return [s for s in trimmed if s.end > s.start]

    def function_boundaries(self, binary: Path) -> list[FunctionSpan]:
        """Sorted, non-overlapping spans; empty (with a warning) if unparseable."""
        view = self._view(binary)
        return list(view.spans) if view else []

    def resolve(self, binary: Path, address: int) -> SymbolInfo:
        """Symbol info for a static address; raises ResolutionError on a miss."""
        view = self._view(binary)
        if view is None:
            raise ResolutionError(f"cannot parse binary {binary}")
        i = bisect.bisect_right(view.starts, address) - 1
        if i < 0 or not view.spans[i].contains(address):
            raise ResolutionError(f"address 0x{address:x} is outside all function spans")
        span = view.spans[i]
        if span.source == "heuristic":
            return SymbolInfo(span.name, None, None, Confidence.BOUNDARY_HEURISTIC)
        hit = view.line_table.lookup(address)
        if hit is not None:
            path, line = hit
            return SymbolInfo(span.name, path, line, Confidence.DEBUGINFO)
        return SymbolInfo(span.name, None, None, Confidence.SYMBOL_TABLE)

    def resolve_runtime(
        self, runtime_addr: int, regions: Sequence[MemoryRegion]
    ) -> tuple[Path, int, SymbolInfo] | None:
        """Resolve a runtime address through its mapping; None if unattributable."""
        region = next(
            (r for r in regions if r.contains(runtime_addr) and r.path and "x" in r.perms),
            None,
        )
        if region is None or region.path is None:
            return None
        binary = Path(region.path)
        view = self._view(binary)
        if view is None:
            return None
        static = runtime_to_static(view.elf, runtime_addr, regions, binary)
        if static is None:
            return None
        try:
            info = self.resolve(binary, static)
        except ResolutionError:
            return None
        return binary, static, info
