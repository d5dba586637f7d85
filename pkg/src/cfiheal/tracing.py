"""Trap forensics: supervise a test process tree and capture CFI traps.

CFI violations on x86_64 execute ud2 and raise SIGILL in the faulting task.
The monitor forks the command under PTRACE_TRACEME, follows every descendant
(fork/vfork/clone/exec), and converts the first SIGILL or genuine SIGTRAP
stop anywhere in the tree into a TrapEvent carrying the corrected fault PC,
up to two frame-pointer-unwound return addresses, a register snapshot, and
the faulting task's memory map. The tracee tree is terminated after the trap;
execution never resumes past a violation.

Program-counter correction is trap-flavor specific: SIGILL stops report the
faulting instruction address directly, while SIGTRAP from an int3 byte
reports the address after the trap instruction, so one byte is subtracted.

Unwinding walks saved frame pointers only (no call-frame metadata): the
return address lives at [FP + 8] and the caller's frame pointer at [FP].
The walk is bounded at depth two and truncates on any failed memory read or
non-monotonic frame chain, so instrumented builds must keep frame pointers.

All ptrace requests for one tracee tree are issued from a single control
context; concurrent monitors in one process stay isolated because each polls
only its own PIDs (never waitpid(-1)).
"""

from __future__ import annotations

import ctypes
import hashlib
import os
import re
import signal
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Sequence

PTRACE_TRACEME = 0
PTRACE_PEEKTEXT = 1
PTRACE_PEEKDATA = 2
PTRACE_CONT = 7
PTRACE_KILL = 8
PTRACE_GETREGS = 12
PTRACE_SETOPTIONS = 0x4200
PTRACE_GETEVENTMSG = 0x4201

PTRACE_O_TRACEFORK = 0x2
PTRACE_O_TRACEVFORK = 0x4
PTRACE_O_TRACECLONE = 0x8
PTRACE_O_TRACEEXEC = 0x10
PTRACE_O_EXITKILL = 0x100000

PTRACE_EVENT_FORK = 1
PTRACE_EVENT_VFORK = 2
PTRACE_EVENT_CLONE = 3
PTRACE_EVENT_EXEC = 4

_FOLLOW_OPTIONS = (
    PTRACE_O_TRACEFORK
    | PTRACE_O_TRACEVFORK
    | PTRACE_O_TRACECLONE
    | PTRACE_O_TRACEEXEC
    | PTRACE_O_EXITKILL
)

_WALL = 0x40000000
_WORD_MASK = (1 << 64) - 1

# x86_64 user_regs_struct, in kernel declaration order.
_REG_FIELDS = (
    "r15", "r14", "r13", "r12", "rbp", "rbx", "r11", "r10",
    "r9", "r8", "rax", "rcx", "rdx", "rsi", "rdi", "orig_rax",
    "rip", "cs", "eflags", "rsp", "ss", "fs_base", "gs_base",
    "ds", "es", "fs", "gs",
)


class _UserRegs(ctypes.Structure):
    _fields_ = [(name, ctypes.c_ulonglong) for name in _REG_FIELDS]


_libc = ctypes.CDLL("libc.so.6", use_errno=True)
_libc.ptrace.restype = ctypes.c_long
_libc.ptrace.argtypes = [ctypes.c_long, ctypes.c_long, ctypes.c_void_p, ctypes.c_void_p]


class TraceError(RuntimeError):
    """The monitor itself failed (not the tracee)."""


class PtraceError(OSError):
    def __init__(self, request: int, pid: int, errno_: int):
        super().__init__(errno_, os.strerror(errno_))
        self.request = request
        self.pid = pid


def _ptrace(request: int, pid: int, addr, data) -> int:
    ctypes.set_errno(0)
    result = _libc.ptrace(request, pid, addr, data)
    if result == -1:
        err = ctypes.get_errno()
        if err:
            raise PtraceError(request, pid, err)
    return result


def peek_word(pid: int, addr: int) -> int | None:
    """One 64-bit word of tracee memory; None on any fault.

    Reads that straddle into an unmapped page fail whole rather than being
    reassembled from partial bytes.
    """
    try:
        value = _ptrace(PTRACE_PEEKDATA, pid, ctypes.c_void_p(addr), None)
    except PtraceError:
        return None
    return value & _WORD_MASK


class TrapSignal(Enum):
    ILLEGAL_INSTRUCTION = signal.SIGILL
    BREAKPOINT_TRAP = signal.SIGTRAP


class OutcomeKind(Enum):
    EXITED = "Exited"
    TRAPPED = "Trapped"
    TIMED_OUT = "TimedOut"
    SIGNALLED = "Signalled"


@dataclass(frozen=True)
class MemoryRegion:
    start: int
    end: int
    perms: str
    offset: int
    path: str | None

    def contains(self, addr: int) -> bool:
        return self.start <= addr < self.end


@dataclass(frozen=True)
class TrapEvent:
    signal: TrapSignal
    raw_pc: int
    fault_pc: int
    return_addresses: tuple[int, ...]
    registers: Mapping[str, int]
    binary: Path | None
    memory_map: tuple[MemoryRegion, ...]
    test_id: str | None = None


@dataclass(frozen=True)
class TraceOutcome:
    kind: OutcomeKind
    exit_status: int | None = None
    term_signal: int | None = None
    trap: TrapEvent | None = None
    stdout_digest: str = ""
    stderr_digest: str = ""
    wall_time: float = 0.0


def correct_pc(trap_signal: TrapSignal, raw_pc: int) -> int:
    """Fault PC from the reported PC: SIGILL is direct, int3 reports PC+1."""
    if trap_signal is TrapSignal.BREAKPOINT_TRAP:
        return raw_pc - 1
    return raw_pc


def unwind_frames(
    registers: Mapping[str, int], read_word: Callable[[int], int | None]
) -> tuple[int, ...]:
    """Up to two return addresses via saved frame pointers.

    ret0 = mem[FP0 + 8]; FP1 = mem[FP0]; ret1 = mem[FP1 + 8] is included only
    when FP1 > FP0 (stack grows down, so an outer frame sits higher) and both
    reads succeed. Any failure truncates the result rather than raising.
    """
    fp0 = registers.get("rbp", 0)
    if not fp0:
        return ()
    ret0 = read_word(fp0 + 8)
    if ret0 is None:
        return ()
    fp1 = read_word(fp0)
    if fp1 is None or fp1 <= fp0:
        return (ret0,)
    ret1 = read_word(fp1 + 8)
    if ret1 is None:
        return (ret0,)
    return (ret0, ret1)


_MAPS_LINE = re.compile(
    r"^([0-9a-f]+)-([0-9a-f]+)\s+(\S+)\s+([0-9a-f]+)\s+\S+\s+\d+\s*(.*)$"
)


def read_memory_maps(pid: int) -> tuple[MemoryRegion, ...]:
    regions: list[MemoryRegion] = []
    try:
        text = Path(f"/proc/{pid}/maps").read_text()
    except OSError as exc:
        raise TraceError(f"cannot read memory map of pid {pid}: {exc}") from exc
    for line in text.splitlines():
        m = _MAPS_LINE.match(line)
        if not m:
            continue
        regions.append(
            MemoryRegion(
                start=int(m.group(1), 16),
                end=int(m.group(2), 16),
                perms=m.group(3),
                offset=int(m.group(4), 16),
                path=m.group(5) or None,
            )
        )
    return tuple(regions)


def region_for(regions: Sequence[MemoryRegion], addr: int) -> MemoryRegion | None:
    for region in regions:
        if region.contains(addr):
            return region
    return None


def _hashing_reader(fd: int, digest: "hashlib._Hash") -> threading.Thread:
    def pump() -> None:
        while True:
            try:
                chunk = os.read(fd, 65536)
            except OSError:
                break
            if not chunk:
                break
            digest.update(chunk)
        os.close(fd)

    thread = threading.Thread(target=pump, daemon=True)
    thread.start()
    return thread


def _spawn_traced(cmd: str | Sequence[str], cwd: Path | None, env: dict | None) -> tuple[int, int, int]:
    """Fork the tracee; returns (pid, stdout_read_fd, stderr_read_fd)."""
    if isinstance(cmd, str):
        argv = ["/bin/sh", "-c", cmd]
    else:
        argv = list(cmd)
        if not argv:
            raise TraceError("empty command")
        resolved = argv[0] if os.path.isabs(argv[0]) else None
        if resolved is None:
            from shutil import which

            resolved = which(argv[0], path=(env or os.environ).get("PATH", os.defpath))
        if resolved is None or not os.access(resolved, os.X_OK):
            raise TraceError(f"command not executable: {argv[0]}")
        argv[0] = resolved
    environ = dict(os.environ if env is None else env)

    out_r, out_w = os.pipe()
    err_r, err_w = os.pipe()
    null_fd = os.open(os.devnull, os.O_RDONLY)
    pid = os.fork()
    if pid == 0:
        # Child: only exec-safe operations between fork and execve.
        try:
            os.setsid()
            os.dup2(null_fd, 0)
            os.dup2(out_w, 1)
            os.dup2(err_w, 2)
            for fd in (out_r, out_w, err_r, err_w, null_fd):
                os.close(fd)
            if cwd is not None:
                os.chdir(cwd)
            _libc.ptrace(PTRACE_TRACEME, 0, None, None)
            os.execve(argv[0], argv, environ)
        except Exception:
            pass
        os._exit(127)
    for fd in (out_w, err_w, null_fd):
        os.close(fd)
    return pid, out_r, err_r


def _slay_tree(root: int, tracees: set[int]) -> None:
    """Terminate every remaining tracee and reap what we can."""
    try:
        os.killpg(root, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        pass
    for pid in set(tracees):
        try:
            os.kill(pid, signal.SIGKILL)
        except (ProcessLookupError, PermissionError):
            pass
    deadline = time.monotonic() + 2.0
    remaining = set(tracees)
    while remaining and time.monotonic() < deadline:
        for pid in list(remaining):
            try:
                wpid, _ = os.waitpid(pid, os.WNOHANG | _WALL)
            except ChildProcessError:
                remaining.discard(pid)
                continue
            if wpid == pid:
                remaining.discard(pid)
        if remaining:
            time.sleep(0.005)


def _event_of(status: int) -> int:
    return (status >> 16) & 0xFF


def run_traced(
    cmd: str | Sequence[str],
    timeout: float,
    *,
    cwd: Path | None = None,
    env: dict | None = None,
    test_id: str | None = None,
) -> TraceOutcome:
    """Run a command under trap supervision; first qualifying trap wins.

    A string command runs through /bin/sh -c; a sequence execs directly.
    Stdout and stderr are consumed concurrently and recorded as sha256
    digests, never buffered whole. Timeout kills the entire process group.
    """
    started = time.monotonic()
    deadline = started + timeout
    root, out_fd, err_fd = _spawn_traced(cmd, cwd, env)
    out_hash = hashlib.sha256()
    err_hash = hashlib.sha256()
    readers = [_hashing_reader(out_fd, out_hash), _hashing_reader(err_fd, err_hash)]
    tracees: set[int] = {root}

    def finish(outcome_kind: OutcomeKind, **kw) -> TraceOutcome:
        _slay_tree(root, tracees)
        for reader in readers:
            reader.join(timeout=2.0)
        return TraceOutcome(
            kind=outcome_kind,
            stdout_digest="sha256:" + out_hash.hexdigest(),
            stderr_digest="sha256:" + err_hash.hexdigest(),
            wall_time=time.monotonic() - started,
            **kw,
        )

    def trap_outcome(pid: int, stop_signal: int) -> TraceOutcome:
        trap_sig = (
            TrapSignal.ILLEGAL_INSTRUCTION
            if stop_signal == signal.SIGILL
            else TrapSignal.BREAKPOINT_TRAP
        )
        regs_struct = _UserRegs()
        _ptrace(PTRACE_GETREGS, pid, None, ctypes.byref(regs_struct))
        registers = {name: int(getattr(regs_struct, name)) for name in _REG_FIELDS}
        raw_pc = registers["rip"]
        fault_pc = correct_pc(trap_sig, raw_pc)
        regions = read_memory_maps(pid)
        frames = unwind_frames(registers, lambda addr: peek_word(pid, addr))
        home = region_for(regions, fault_pc)
        event = TrapEvent(
            signal=trap_sig,
            raw_pc=raw_pc,
            fault_pc=fault_pc,
            return_addresses=frames,
            registers=registers,
            binary=Path(home.path) if home and home.path else None,
            memory_map=regions,
            test_id=test_id,
        )
        return finish(OutcomeKind.TRAPPED, trap=event)

    # First stop: the TRACEME child raises SIGTRAP at execve (or exits 127
    # if the exec failed before tracing mattered).
    try:
        _, status = os.waitpid(root, 0)
    except ChildProcessError as exc:
        raise TraceError("tracee vanished before first stop") from exc
    if os.WIFEXITED(status):
        return finish(OutcomeKind.EXITED, exit_status=os.WEXITSTATUS(status))
    if os.WIFSIGNALED(status):
        return finish(OutcomeKind.SIGNALLED, term_signal=os.WTERMSIG(status))
    _ptrace(PTRACE_SETOPTIONS, root, None, ctypes.c_void_p(_FOLLOW_OPTIONS))
    _ptrace(PTRACE_CONT, root, None, None)

    while True:
        if time.monotonic() > deadline:
            return finish(OutcomeKind.TIMED_OUT)
        progressed = False
        for pid in list(tracees):
            try:
                wpid, status = os.waitpid(pid, os.WNOHANG | _WALL)
            except ChildProcessError:
                tracees.discard(pid)
                if pid == root:
                    raise TraceError("lost the root tracee without a wait status")
                continue
            if wpid == 0:
                continue
            progressed = True

            if os.WIFEXITED(status) or os.WIFSIGNALED(status):
                tracees.discard(pid)
                if pid == root:
                    if os.WIFEXITED(status):
                        return finish(OutcomeKind.EXITED, exit_status=os.WEXITSTATUS(status))
                    return finish(OutcomeKind.SIGNALLED, term_signal=os.WTERMSIG(status))
                continue

            if not os.WIFSTOPPED(status):
                continue
            stop_signal = os.WSTOPSIG(status)
            event = _event_of(status)
            try:
                if event in (PTRACE_EVENT_FORK, PTRACE_EVENT_VFORK, PTRACE_EVENT_CLONE):
                    msg = ctypes.c_ulong()
                    _ptrace(PTRACE_GETEVENTMSG, pid, None, ctypes.byref(msg))
                    tracees.add(msg.value)
                    _ptrace(PTRACE_CONT, pid, None, None)
                elif event:
                    _ptrace(PTRACE_CONT, pid, None, None)
                elif stop_signal in (signal.SIGILL, signal.SIGTRAP):
                    return trap_outcome(pid, stop_signal)
                elif stop_signal == signal.SIGSTOP:
                    # Auto-attach stop of a new descendant (or a job-control
                    # stop, which this monitor deliberately suppresses).
                    _ptrace(PTRACE_CONT, pid, None, None)
                else:
                    _ptrace(PTRACE_CONT, pid, None, ctypes.c_void_p(stop_signal))
            except PtraceError:
                # The task died between the wait and the request; the next
                # poll round will reap it.
                continue
        if not progressed:
            time.sleep(0.002)
