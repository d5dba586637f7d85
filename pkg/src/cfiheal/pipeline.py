"""End-to-end healing pipeline and the command-line interface.

heal() drives the whole sequence: validate config, baseline build and suite,
CFI build with automatic visibility repair, trap-driven escalation rounds
(re-running only the tests attributed to still-open violations after each
ignorelist update), a full-suite confirmation pass, the IR census, coverage
accounting, and report emission. state.json in the report directory is
rewritten after every phase transition so an interrupted run leaves an
inspectable trail.

Exit codes of the heal subcommand: 0 when the run completes with no
unresolvable violations, 1 when it completes but some violations stayed
unresolvable, 2 when the pipeline itself failed. Usage errors exit 64.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from .build import BuildMode, BuildOutcome, OrchestrationError, ProjectLock, run_build
from .config import ConfigError, ProjectConfig, load_config, validate_config
from .escalation import EscalationEngine, Violation, ViolationStatus, enforcement_name
from .harness import (
    FailureClass,
    HarnessError,
    SuiteDiff,
    TestResult,
    diff_suites,
    enumerate_tests,
    run_case,
    run_suite,
)
from .ignorelist import IgnorelistStore
from .ircensus import IrSiteCensus, census, census_by_function
from .repair import RepairLedger, repair_until_buildable, revert_patches
from .report import (
    CoverageCore,
    FunctionRecord,
    compute_coverage,
    emit_report,
    format_duration,
)
from .symbols import SymbolInfo, Symbolizer
from .tracing import TraceError, TrapEvent

STATE_NAME = "state.json"


class PipelineFailure(RuntimeError):
    """The pipeline could not complete (distinct from unresolvable violations)."""


@dataclass
class HealResult:
    report: dict
    coverage: CoverageCore | None
    violations: list[Violation]
    ledger: RepairLedger
    diff: SuiteDiff
    unresolvable: int
    open_violations: int
    report_paths: list[Path] = field(default_factory=list)


def _save_state(cfg: ProjectConfig, state: dict) -> None:
    cfg.report_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.report_dir / STATE_NAME
    path.write_text(json.dumps(state, indent=2, sort_keys=True) + "\n")


def _symbolize_trap(
    symbolizer: Symbolizer, trap: TrapEvent
) -> tuple[Path, int, SymbolInfo | None, SymbolInfo | None, SymbolInfo | None]:
    """Fault key plus callee/caller/caller's-caller identities (None = unknown)."""
    hit = symbolizer.resolve_runtime(trap.fault_pc, trap.memory_map)
    if hit is not None:
        binary, static, callee = hit
    else:
        binary = trap.binary or Path("<unknown>")
        static = trap.fault_pc
        callee = None
    frames: list[SymbolInfo | None] = []
    for addr in trap.return_addresses[:2]:
        frame_hit = symbolizer.resolve_runtime(addr, trap.memory_map)
        frames.append(frame_hit[2] if frame_hit else None)
    while len(frames) < 2:
        frames.append(None)
    return binary, static, callee, frames[0], frames[1]


def _collect_ir_files(cfg: ProjectConfig) -> list[Path]:
    report_root = cfg.report_dir.resolve()
    files = []
    for path in sorted(cfg.project_root.rglob("*.ll")):
        if report_root in path.resolve().parents:
            continue
        files.append(path)
    extra = cfg.report_dir / "ir"
    if extra.is_dir():
        files.extend(sorted(extra.rglob("*.ll")))
    return files


def _run_census(cfg: ProjectConfig) -> tuple[IrSiteCensus, dict[str, IrSiteCensus]]:
    total = IrSiteCensus()
    per_function: dict[str, IrSiteCensus] = {}
    diagnostics: list[tuple[int, str]] = []
    for path in _collect_ir_files(cfg):
        try:
            text = path.read_text(errors="replace")
        except OSError:
            continue
        sidecar: list[tuple[int, str]] = []
        total = total + census(text, sidecar)
        for name, counts in census_by_function(text).items():
            if not name:
                continue
            per_function[name] = per_function.get(name, IrSiteCensus()) + counts
        diagnostics.extend((lineno, f"{path.name}: {reason}") for lineno, reason in sidecar)
    if diagnostics:
        sidecar_path = cfg.report_dir / "ir-census-diagnostics.txt"
        sidecar_path.write_text(
            "".join(f"{name}:{lineno}\n" for lineno, name in diagnostics)
        )
    return total, per_function


def _checkable_sites(counts: IrSiteCensus) -> int:
    # Indirect transfers the forward-edge checks can guard at a call site.
    return counts.fp_calls + counts.virtual_calls + counts.jt_lowered


def _function_records(
    cfg: ProjectConfig,
    symbolizer: Symbolizer,
    per_function: dict[str, IrSiteCensus],
    ledger: RepairLedger,
) -> list[FunctionRecord]:
    from .elf import ElfError, ElfFile

    records: list[FunctionRecord] = []
    patched = {enforcement_name(s) for s in ledger.patched_symbols}
    for exe in cfg.executable_paths():
        if not exe.is_file():
            continue
        try:
            elf = ElfFile(exe)
        except (ElfError, OSError):
            continue
        # Exported functions (reachable through the dynamic symbol table)
        # are the ones a default-visibility escape leaves unprotected.
        exported = {
            s.name
            for s in elf.dynamic_symbols()
            if s.name and s.is_func and s.shndx != 0 and s.visibility == "default"
        }
        for span in symbolizer.function_boundaries(exe):
            if span.source != "symtab":
                continue
            name = enforcement_name(span.name)
            try:
                file = symbolizer.resolve(exe, span.start).source_file
            except Exception:
                file = None
            site_counts = per_function.get(span.name) or per_function.get(name)
            records.append(
                FunctionRecord(
                    name=name,
                    file=file,
                    call_sites=_checkable_sites(site_counts) if site_counts else 0,
                    visibility="default" if (name in exported or span.name in exported) else "hidden",
                    patched=name in patched,
                )
            )
    return records


def _violation_rows(engine: EscalationEngine) -> tuple[list[dict], list[dict]]:
    details = []
    by_file: dict[str, dict] = {}
    for violation in engine.all_violations():
        callee = violation.callee
        file = callee.source_file if callee else None
        function = enforcement_name(callee.function) if callee else "<unresolved>"
        details.append(
            {
                "id": violation.id,
                "binary": str(violation.binary),
                "fault_pc": hex(violation.static_fault_pc),
                "function": function,
                "file": file,
                "line": callee.line if callee else None,
                "status": violation.status.value,
                "level": violation.ladder_level.short
                if violation.fixed_level is None
                else violation.fixed_level.short,
                "tests": list(violation.test_ids),
                "attempted": [line for _, line in violation.attempted],
            }
        )
        bucket = by_file.setdefault(file or "<unknown>", {"count": 0, "tests": set()})
        bucket["count"] += 1
        bucket["tests"].update(violation.test_ids)
    grouped = [
        {"file": file, "count": data["count"], "tests": sorted(data["tests"])}
        for file, data in sorted(by_file.items(), key=lambda kv: (-kv[1]["count"], kv[0]))
    ]
    return details, grouped


def heal(cfg: ProjectConfig, *, symbolizer: Symbolizer | None = None) -> HealResult:
    """Run the full healing pipeline; raises PipelineFailure on hard errors."""
    findings = validate_config(cfg)
    if findings:
        raise PipelineFailure("invalid configuration: " + "; ".join(findings))
    symbolizer = symbolizer or Symbolizer()
    started = time.monotonic()
    cfg.report_dir.mkdir(parents=True, exist_ok=True)

    state: dict = {"phase": "building", "iteration": 0}
    _save_state(cfg, state)

    with ProjectLock(cfg.report_dir):
        baseline_build = run_build(cfg, BuildMode.baseline(), iteration=1)
        if not baseline_build.succeeded:
            _save_state(cfg, {**state, "phase": "failed", "reason": "baseline build failed"})
            raise PipelineFailure(
                f"baseline build failed; see {baseline_build.log_path}"
            )
        try:
            baseline_results = run_suite(cfg, baseline_build)
        except (HarnessError, TraceError) as exc:
            _save_state(cfg, {**state, "phase": "failed", "reason": str(exc)})
            raise PipelineFailure(f"baseline suite failed to run: {exc}") from exc
        baseline_by_id = {r.test_id: r for r in baseline_results}

        store = IgnorelistStore(cfg.report_dir / "cfi.ignorelist")
        store.write()
        cfi_mode = BuildMode.cfi(cfg.cfi_variants, store.path)
        ledger = RepairLedger()
        cfi_build, ledger = repair_until_buildable(cfg, cfi_mode, ledger, phase="build")
        if not cfi_build.succeeded:
            _save_state(cfg, {**state, "phase": "failed", "reason": "cfi build unrepairable"})
            raise PipelineFailure(
                f"instrumented build could not be repaired; see {cfi_build.log_path}"
            )

        state.update(phase="testing", ignorelist=[])
        _save_state(cfg, state)
        try:
            cfi_results = run_suite(cfg, cfi_build)
        except (HarnessError, TraceError) as exc:
            _save_state(cfg, {**state, "phase": "failed", "reason": str(exc)})
            raise PipelineFailure(f"instrumented suite failed to run: {exc}") from exc

        engine = EscalationEngine(store, cfg.project_root)
        diff = diff_suites(baseline_results, cfi_results)
        cfi_by_id = {r.test_id: r for r in cfi_results}
        for test_id, cls in diff.per_test.items():
            if cls is FailureClass.CFI_POLICY_VIOLATION:
                trap = cfi_by_id[test_id].outcome.trap
                assert trap is not None
                binary, static, callee, caller, cc = _symbolize_trap(symbolizer, trap)
                engine.observe(trap, binary, static, callee, caller, cc, test_id)

        iterations_used = 0
        final_results = cfi_results
        while True:
            while engine.open_violations() and iterations_used < cfg.max_repair_iterations:
                iterations_used += 1
                pending: list[Violation] = []
                for violation in engine.open_violations():
                    if engine.next_scope(violation) is not None:
                        pending.append(violation)
                if not pending:
                    continue
                store.write()
                cfi_build, ledger = repair_until_buildable(
                    cfg,
                    cfi_mode,
                    ledger,
                    phase="test",
                    start_iteration=ledger.build_attempts + 1,
                )
                if not cfi_build.succeeded:
                    _save_state(cfg, {**state, "phase": "failed", "reason": "rebuild failed"})
                    raise PipelineFailure(
                        f"rebuild with updated ignorelist failed; see {cfi_build.log_path}"
                    )
                affected = sorted({tid for v in pending for tid in v.test_ids})
                cases = {c.test_id: c for c in enumerate_tests(cfg)}
                missing = [tid for tid in affected if tid not in cases]
                if missing:
                    raise PipelineFailure(
                        f"tests disappeared from enumeration during healing: {missing}"
                    )
                rerun = {tid: run_case(cfg, cases[tid]) for tid in affected}
                recurred: dict[tuple[str, int], tuple[str, TrapEvent]] = {}
                for tid, result in rerun.items():
                    if result.cfi_trapped and result.outcome.trap is not None:
                        trap = result.outcome.trap
                        binary, static, callee, caller, cc = _symbolize_trap(symbolizer, trap)
                        recurred[(str(binary), static)] = (tid, trap)
                        if (str(binary), static) not in engine.violations:
                            base = baseline_by_id.get(tid)
                            if base is not None and base.passed:
                                engine.observe(trap, binary, static, callee, caller, cc, tid)
                for violation in pending:
                    engine.record_outcome(violation, violation.key in recurred)
                store.write()
                state.update(
                    iteration=iterations_used,
                    violations=engine.counts(),
                    ignorelist=[e.line for e in store.active_entries()],
                )
                _save_state(cfg, state)

            # Confirmation pass over the whole suite.
            store.write()
            try:
                final_results = run_suite(cfg, cfi_build)
            except (HarnessError, TraceError) as exc:
                raise PipelineFailure(f"confirmation suite failed to run: {exc}") from exc
            reopened = False
            for result in final_results:
                base = baseline_by_id.get(result.test_id)
                if base is None or not base.passed or not result.cfi_trapped:
                    continue
                trap = result.outcome.trap
                assert trap is not None
                binary, static, callee, caller, cc = _symbolize_trap(symbolizer, trap)
                violation, is_new = engine.observe(
                    trap, binary, static, callee, caller, cc, result.test_id
                )
                if is_new:
                    reopened = True
                elif violation.status is ViolationStatus.FIXED:
                    violation.status = ViolationStatus.OPEN
                    violation.fixed_level = None
                    engine.record_outcome(violation, trap_recurred=True)
                    if violation.status is ViolationStatus.OPEN:
                        reopened = True
            if reopened and iterations_used < cfg.max_repair_iterations:
                continue
            break

        final_diff = diff_suites(baseline_results, final_results)

        state.update(phase="reporting")
        _save_state(cfg, state)
        census_total, per_function = _run_census(cfg)
        records = _function_records(cfg, symbolizer, per_function, ledger)
        coverage = compute_coverage(records, store.active_entries(),
                                    {enforcement_name(s) for s in ledger.patched_symbols})

        counts = engine.counts()
        details, by_file = _violation_rows(engine)
        duration = time.monotonic() - started
        report = {
            "schema_version": "1",
            "duration": format_duration(duration),
            "coverage": {
                "per_function": coverage.per_function.as_dict(),
                "per_call_site": coverage.per_call_site.as_dict(),
            },
            "census": {**census_total.as_dict(), "total": census_total.total()},
            "violations": {
                "total": counts["total"],
                "fixed": counts["fixed"],
                "unresolvable": counts["unresolvable"],
                "open": counts["open"],
                "by_file": by_file,
                "details": details,
            },
            "ignorelist": [e.line for e in store.active_entries()],
            "repair": {
                "patches": [
                    {
                        "iteration": p.iteration,
                        "symbol": p.symbol,
                        "demangled": p.demangled,
                        "file": p.file,
                        "line": p.line,
                    }
                    for p in ledger.patches
                ],
                "iterations_build_phase": ledger.iterations_build_phase,
                "iterations_test_phase": ledger.iterations_test_phase,
                "skipped": [{"symbol": s, "reason": r} for s, r in ledger.skipped],
            },
            "tests": {
                "total": len(final_diff.per_test),
                "pass": final_diff.counts[FailureClass.PASS],
                "baseline_failure": final_diff.counts[FailureClass.BASELINE_FAILURE],
                "cfi_policy_violation": final_diff.counts[FailureClass.CFI_POLICY_VIOLATION],
                "functional_non_cfi": final_diff.counts[FailureClass.FUNCTIONAL_NON_CFI],
            },
        }
        paths = emit_report(report, cfg.report_dir)
        state.update(phase="done", report=report)
        _save_state(cfg, state)

    return HealResult(
        report=report,
        coverage=coverage,
        violations=engine.all_violations(),
        ledger=ledger,
        diff=final_diff,
        unresolvable=counts["unresolvable"],
        open_violations=counts["open"],
        report_paths=paths,
    )


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # noqa: D102 - argparse contract
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(64)


def _build_parser() -> _Parser:
    parser = _Parser(prog="cfiheal", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command")

    p_heal = sub.add_parser("heal", help="run the full healing pipeline")
    p_heal.add_argument("config", type=Path)
    p_heal.add_argument(
        "--revert",
        action="store_true",
        help="restore all journaled visibility patches and exit",
    )

    p_build = sub.add_parser("build", help="run one build")
    p_build.add_argument("config", type=Path)
    p_build.add_argument("--mode", choices=["baseline", "cfi"], default="baseline")

    p_census = sub.add_parser("census", help="census textual IR files")
    p_census.add_argument("paths", nargs="+", type=Path)

    p_report = sub.add_parser("report", help="re-emit reports from a state directory")
    p_report.add_argument("state_dir", type=Path)
    return parser


def cli_main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 64

    if args.command == "heal":
        try:
            cfg = load_config(args.config)
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        if args.revert:
            removed = revert_patches(cfg)
            print(f"reverted {removed} visibility patch(es)")
            return 0
        try:
            result = heal(cfg)
        except (PipelineFailure, OrchestrationError) as exc:
            print(f"pipeline failure: {exc}", file=sys.stderr)
            return 2
        summary = result.report["violations"]
        print(
            f"done: {summary['total']} violation(s), {summary['fixed']} fixed, "
            f"{summary['unresolvable']} unresolvable; reports in {cfg.report_dir}"
        )
        return 1 if result.unresolvable else 0

    if args.command == "build":
        try:
            cfg = load_config(args.config)
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        if args.mode == "baseline":
            mode = BuildMode.baseline()
        else:
            path = cfg.report_dir / "cfi.ignorelist"
            if not path.exists():
                IgnorelistStore(path).write()
            mode = BuildMode.cfi(cfg.cfi_variants, path)
        try:
            outcome = run_build(cfg, mode)
        except OrchestrationError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        print(f"build {'succeeded' if outcome.succeeded else 'failed'}; log: {outcome.log_path}")
        for diag in outcome.diagnostics[:20]:
            print(f"  [{diag.kind.value}] {diag.symbol or diag.raw_line}")
        return 0 if outcome.succeeded else 2

    if args.command == "census":
        files: list[Path] = []
        for path in args.paths:
            if path.is_dir():
                files.extend(sorted(path.rglob("*.ll")))
            elif path.is_file():
                files.append(path)
        if not files:
            print("error: no .ll files found", file=sys.stderr)
            return 2
        total = IrSiteCensus()
        for path in files:
            total = total + census(path.read_text(errors="replace"))
        for key, value in total.as_dict().items():
            print(f"{key}\t{value}")
        print(f"total\t{total.total()}")
        return 0

    if args.command == "report":
        state_path: Path = args.state_dir / STATE_NAME
        if not state_path.is_file():
            print(f"error: no {STATE_NAME} in {args.state_dir}", file=sys.stderr)
            return 2
        state = json.loads(state_path.read_text())
        report = state.get("report")
        if not report:
            print("error: state file has no completed report", file=sys.stderr)
            return 2
        for path in emit_report(report, args.state_dir):
            print(f"wrote {path}")
        return 0

    parser.print_usage(sys.stderr)
    return 64


def main() -> None:
    raise SystemExit(cli_main())
