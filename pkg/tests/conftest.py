"""Shared fixtures: compiled sample binaries and fixture-project copies.

Compilation happens once per session; tests that mutate project sources get
their own copy via copy_fixture.
"""

from __future__ import annotations

import platform
import shutil
import subprocess
from pathlib import Path

import pytest

from cfiheal.config import ProjectConfig

FIXTURES = Path(__file__).parent / "fixtures"

HAVE_CLANG = shutil.which("clang") is not None
HAVE_LLD = shutil.which("ld.lld") is not None
IS_LINUX_X86_64 = platform.system() == "Linux" and platform.machine() == "x86_64"

needs_toolchain = pytest.mark.skipif(
    not (HAVE_CLANG and HAVE_LLD), reason="requires clang and ld.lld"
)
needs_linux = pytest.mark.skipif(
    not IS_LINUX_X86_64, reason="requires Linux x86_64 ptrace semantics"
)

# ud2 at a named label; after_call anchors the expected return address.
TRAP_ASM = """\
    .text
    .globl _start
_start:
    call do_trap
    .globl after_call
after_call:
    mov $60, %rax
    xor %edi, %edi
    syscall

    .globl do_trap
    .type do_trap, @function
do_trap:
    push %rbp
    mov %rsp, %rbp
    .globl trap_marker
trap_marker:
    ud2
    pop %rbp
    ret
    .size do_trap, . - do_trap
"""

INT3_ASM = """\
    .text
    .globl _start
_start:
    call do_break
    .globl after_call
after_call:
    mov $60, %rax
    xor %edi, %edi
    syscall

    .globl do_break
    .type do_break, @function
do_break:
    push %rbp
    mov %rsp, %rbp
    .globl break_marker
break_marker:
    int3
    nop
    pop %rbp
    ret
    .size do_break, . - do_break
"""

SAMPLE_C = """\
#include <stdio.h>

int alpha(int x) { return x + 1; }

int beta(int x) { return alpha(x) * 2; }

int gamma_fn(int x) { return beta(x) + alpha(x); }

int main(void) {
    printf("%d\\n", gamma_fn(3));
    return 0;
}
"""


def copy_fixture(name: str, dest: Path) -> Path:
    """Copy a fixture project into dest/<name> and return the new root."""
    root = dest / name
    shutil.copytree(FIXTURES / name, root)
    return root


def make_config(root: Path, report_dir: Path, **overrides) -> ProjectConfig:
    defaults = dict(
        project_root=root,
        build_cmd="make app",
        test_cmd="sh runtests.sh",
        executables=("app",),
        cfi_variants=("cfi-icall",),
        report_dir=report_dir,
        clean_cmd="make clean",
        extra_compile_flags=("-fuse-ld=lld", "-g"),
        test_timeout=30.0,
    )
    defaults.update(overrides)
    return ProjectConfig(**defaults)


def linker_map_symbol(map_path: Path, name: str) -> int:
    """Independent oracle: read a symbol VMA out of an lld -Map file."""
    for line in map_path.read_text().splitlines():
        parts = line.split()
        if len(parts) >= 5 and parts[-1] == name:
            return int(parts[0], 16)
    raise AssertionError(f"{name} not found in {map_path}")


def _build_asm(tmp: Path, stem: str, source: str) -> tuple[Path, Path]:
    src = tmp / f"{stem}.s"
    src.write_text(source)
    binary = tmp / stem
    map_path = tmp / f"{stem}.map"
    subprocess.run(
        [
            "clang", "-nostdlib", "-static", "-no-pie", "-fuse-ld=lld",
            f"-Wl,-Map,{map_path}", "-o", str(binary), str(src),
        ],
        check=True,
        capture_output=True,
    )
    return binary, map_path


@pytest.fixture(scope="session")
def asm_binaries(tmp_path_factory) -> dict[str, tuple[Path, Path]]:
    """ud2 and int3 binaries, each with its linker map. Static, non-PIE."""
    if not (HAVE_CLANG and HAVE_LLD):
        pytest.skip("requires clang and ld.lld")
    tmp = tmp_path_factory.mktemp("asm")
    return {
        "ud2": _build_asm(tmp, "trap", TRAP_ASM),
        "int3": _build_asm(tmp, "int3", INT3_ASM),
    }


@pytest.fixture(scope="session")
def sample_binaries(tmp_path_factory) -> dict[str, Path]:
    """A small C binary with DWARF4, a DWARF5 build, and a stripped copy."""
    if not HAVE_CLANG:
        pytest.skip("requires clang")
    tmp = tmp_path_factory.mktemp("sample")
    src = tmp / "sample.c"
    src.write_text(SAMPLE_C)
    out: dict[str, Path] = {"source": src}
    common = ["-O0", "-fno-omit-frame-pointer"]
    for tag, gflag in (("dwarf4", "-gdwarf-4"), ("dwarf5", "-gdwarf-5")):
        binary = tmp / f"sample-{tag}"
        subprocess.run(
            ["clang", gflag, *common, "-o", str(binary), str(src)],
            check=True,
            capture_output=True,
        )
        out[tag] = binary
    stripped = tmp / "sample-stripped"
    shutil.copy2(out["dwarf4"], stripped)
    subprocess.run(["strip", str(stripped)], check=True, capture_output=True)
    out["stripped"] = stripped
    return out


@pytest.fixture(scope="session")
def cfi_ir(tmp_path_factory) -> Path:
    """Real instrumented IR for the trap_l0 handler, one fp call + one store."""
    if not HAVE_CLANG:
        pytest.skip("requires clang")
    tmp = tmp_path_factory.mktemp("ir")
    empty = tmp / "empty.ignorelist"
    empty.write_text("")
    out = tmp / "bad.ll"
    subprocess.run(
        [
            "clang", "-flto", "-fvisibility=hidden", "-fsanitize=cfi-icall",
            f"-fsanitize-ignorelist={empty}", "-S", "-emit-llvm",
            "-o", str(out), str(FIXTURES / "trap_l0" / "bad.c"),
        ],
        check=True,
        capture_output=True,
    )
    return out
