"""Static instrumentation pass that splits long transactions.

Each sufficiently large function gets a ten-instruction prologue that
debits a shared countdown cell by the function's static size and, when the
cell goes negative, calls the commit-and-reopen runtime helper and resets
the cell. Loops are not instrumented; only function entries are. The pass
runs on the plain program, before the software-defense wrapper is applied,
so the wrapper's transaction encloses both the prologues and the helper.

The prologue clobbers registers r6 and r7, which are reserved for runtime
use (application code sticks to r0..r5).
"""

from __future__ import annotations

from dataclasses import dataclass

from .program import (AluI, BranchIfZero, Call, DataPage, Label, LoadImm,
                      Read, Write, Addr)
from .defense_sw import COMMIT_FUNC, add_heisenberg_commit, ensure_page_set

COUNTER_PAGE = "__txcnt"
PROLOGUE_LEN = 10  # executable instructions added per instrumented function


@dataclass(frozen=True)
class TxSplitConfig:
    init_cntr: int = 500
    func_skp: int = 8
    page_set: str | None = None

    def __post_init__(self):
        if self.init_cntr <= 0:
            raise ValueError("init_cntr must be positive")
        if self.func_skp < 0:
            raise ValueError("func_skp must be non-negative")


@dataclass(frozen=True)
class PassReport:
    instrumented: tuple
    skipped: tuple
    commit_sites: int


def instrument(program, config=None):
    """Return (instrumented program copy, pass report)."""
    cfg = config or TxSplitConfig()
    prog = program.copy()
    sid = ensure_page_set(prog, cfg.page_set)
    add_heisenberg_commit(prog, sid)
    if any(p.name == COUNTER_PAGE for p in prog.data_pages):
        raise ValueError("program already instrumented")
    prog.data_pages.append(
        DataPage(COUNTER_PAGE, "rw", {0: cfg.init_cntr}))
    prog.meta["runtime_pages"] = tuple(prog.meta.get("runtime_pages", ())) + (
        COUNTER_PAGE,)

    runtime_names = set(prog.meta.get("runtime_funcs", ()))
    cell = Addr(COUNTER_PAGE, 0)
    instrumented, skipped = [], []
    for name in list(prog.functions):
        if name in runtime_names:
            skipped.append(name)
            continue
        size = prog.function_size(name)
        if size < cfg.func_skp:
            skipped.append(name)
            continue
        skip_label = f"__ts_{name}"
        prologue = [
            LoadImm(6, cell),
            Read(7, 6),
            AluI("sub", 7, size),
            Write(6, 7),
            AluI("lt", 7, 0),
            BranchIfZero(7, skip_label),
            Call(COMMIT_FUNC),
            LoadImm(6, cell),
            LoadImm(7, cfg.init_cntr),
            Write(6, 7),
            Label(skip_label),
        ]
        prog.functions[name] = prologue + list(prog.functions[name])
        instrumented.append(name)

    prog.meta["txsplit"] = {"init_cntr": cfg.init_cntr,
                            "func_skp": cfg.func_skp}
    return prog, PassReport(tuple(instrumented), tuple(skipped),
                            commit_sites=len(instrumented))
