"""Self-healing build/test pipeline for strict forward-edge CFI deployment.

The package turns the usual showstoppers of -fsanitize=cfi adoption
(visibility-induced link breakage, opaque SIGILL aborts, hand-maintained
ignorelists) into a closed loop: build, repair, trace, escalate, report.
"""

from .build import (
    BuildKind,
    BuildMode,
    BuildOutcome,
    Diagnostic,
    DiagnosticKind,
    OrchestrationError,
    compose_flags,
    parse_diagnostics,
    run_build,
)
from .config import (
    CFI_VARIANTS,
    ConfigError,
    ProjectConfig,
    load_config,
    parse_config,
    render_config,
    validate_config,
)
from .escalation import EscalationEngine, Violation, ViolationStatus, enforcement_name
from .harness import (
    FailureClass,
    HarnessError,
    SuiteDiff,
    TestCase,
    TestResult,
    classify,
    diff_suites,
    enumerate_tests,
    run_suite,
)
from .ignorelist import (
    EntryKind,
    IgnorelistEntry,
    IgnorelistStore,
    LadderLevel,
    merge,
    parse,
    render,
)
from .ircensus import IrSiteCensus, census, census_by_function, total_sites
from .pipeline import HealResult, PipelineFailure, cli_main, heal
from .repair import (
    RepairLedger,
    VisibilityPatch,
    apply_visibility_default,
    extract_unresolved_symbols,
    locate_definition,
    repair_until_buildable,
    revert_patches,
)
from .report import (
    CoverageCore,
    CoverageTriple,
    EnforcementStatus,
    FunctionRecord,
    compute_coverage,
    emit_report,
    reconcile_percentages,
)
from .symbols import (
    Confidence,
    FunctionSpan,
    ObjdumpBackend,
    ResolutionError,
    SymbolInfo,
    Symbolizer,
    demangle,
    runtime_to_static,
)
from .tracing import (
    MemoryRegion,
    OutcomeKind,
    TraceOutcome,
    TrapEvent,
    TrapSignal,
    correct_pc,
    run_traced,
    unwind_frames,
)

__version__ = "0.1.0"
