"""Software-only defense: RTM-style transactions around enclave entry points.

Each protected entry point becomes a retry loop: start a transaction whose
abort target is the loop head, preload the page set inside the transaction,
run the body, commit, exit. Any interrupt, capacity overflow, conflict, or
restricted instruction aborts the transaction: buffered writes vanish, the
registers snap back, and the loop re-preloads before the body can touch a
page with a cold TLB.

The engine models capacity deterministically: a write set may span at most
`write_capacity_lines` distinct 64-byte lines (the L1-sized budget), reads a
much larger tracked set. Faults raised inside a transaction are suppressed:
the transaction aborts in-enclave and the OS is never told which page missed.
"""

from __future__ import annotations

from dataclasses import dataclass

from .program import (
    Call, EExit, Label, PreloadMarker, Ret, XBegin, XEnd, PageSet,
)

COMMIT_FUNC = "__hb_commit"


@dataclass(frozen=True)
class TsxConfig:
    write_capacity_lines: int = 488
    read_capacity_lines: int = 33280
    line_size: int = 64
    conflict_rate: float = 0.0
    deterministic_capacity: bool = True
    max_consecutive_aborts: int = 10000

    def __post_init__(self):
        if self.write_capacity_lines <= 0 or self.read_capacity_lines <= 0:
            raise ValueError("capacities must be positive")
        if not self.deterministic_capacity:
            raise NotImplementedError(
                "only deterministic capacity thresholds are modeled")


class TxAbort(Exception):
    """Raised mid-instruction when a transactional access aborts."""


class Transaction:
    __slots__ = ("target", "snap_regs", "snap_rsp", "read_lines",
                 "write_lines", "buf")

    def __init__(self, target, snap_regs, snap_rsp):
        self.target = target          # absolute instruction index to retry at
        self.snap_regs = snap_regs
        self.snap_rsp = snap_rsp
        self.read_lines = set()
        self.write_lines = set()
        self.buf = {}                 # addr -> buffered value

    def clone(self):
        t = Transaction(self.target, self.snap_regs, self.snap_rsp)
        t.read_lines = set(self.read_lines)
        t.write_lines = set(self.write_lines)
        t.buf = dict(self.buf)
        return t

    def key(self):
        return (self.target, self.snap_regs, self.snap_rsp,
                frozenset(self.read_lines), frozenset(self.write_lines),
                tuple(sorted(self.buf.items())))

    def read(self, machine, core, addr):
        shift = machine.tsx.line_size.bit_length() - 1
        self.read_lines.add(addr >> shift)
        if len(self.read_lines) > machine.tsx.read_capacity_lines:
            self.abort(machine, core, "capacity")
            raise TxAbort()
        if addr in self.buf:
            return self.buf[addr]
        return machine.memory.get(addr, 0)

    def write(self, machine, core, addr, val):
        shift = machine.tsx.line_size.bit_length() - 1
        self.write_lines.add(addr >> shift)
        if len(self.write_lines) > machine.tsx.write_capacity_lines:
            self.abort(machine, core, "capacity")
            raise TxAbort()
        self.buf[addr] = val

    def abort(self, machine, core, cause):
        """Discard buffered writes, restore registers, jump to the target.

        No AEX and no TLB flush happen here; only interrupt-class aborts are
        followed by an AEX, and the machine performs that separately.
        """
        core.regs = list(self.snap_regs)
        core.rsp = self.snap_rsp
        core.rip = self.target
        core.tx = None
        core.consec_aborts += 1
        machine.counts["abort_" + cause] += 1
        machine.events.append((machine.tick, "txabort", core.idx, cause))
        if core.consec_aborts >= machine.tsx.max_consecutive_aborts:
            machine.nonterm = True

    def commit(self, machine, core):
        machine.memory.update(self.buf)
        core.tx = None
        core.consec_aborts = 0
        machine.counts["xend"] += 1
        machine.events.append((machine.tick, "txcommit", core.idx,
                               len(self.write_lines)))


def protection_level(platform):
    """SW protection claim for a platform: full only without live siblings."""
    if not platform.hyperthreading or platform.ht_disabled_attested:
        return "full"
    return "raised-bar only"


def ensure_page_set(program, sid=None):
    if sid is not None:
        if sid not in program.page_sets:
            raise KeyError(f"unknown page set {sid!r}")
        return sid
    if "default" in program.page_sets:
        return "default"
    program.page_sets["default"] = PageSet("default")
    return "default"


def add_heisenberg_commit(program, sid):
    """Publish buffered writes, then reopen a fresh preloaded transaction."""
    if COMMIT_FUNC in program.functions:
        return COMMIT_FUNC
    program.functions[COMMIT_FUNC] = [
        XEnd(),
        Label("Lc"),
        XBegin("Lc"),
        PreloadMarker(sid),
        Ret(),
    ]
    runtime = set(program.meta.get("runtime_funcs", ()))
    runtime.add(COMMIT_FUNC)
    program.meta["runtime_funcs"] = tuple(sorted(runtime))
    return COMMIT_FUNC


def wrap_sw(program, platform, page_set=None):
    """Wrap every entry point in the transactional retry loop."""
    prog = program.copy()
    sid = ensure_page_set(prog, page_set)
    runtime = set(prog.meta.get("runtime_funcs", ()))
    mapping = {}
    new_entries = []
    for e in prog.entry_points:
        w = f"__sw_{e}"
        prog.functions[w] = [
            Label("Lretry"),
            XBegin("Lretry"),
            PreloadMarker(sid),
            Call(e),
            XEnd(),
            EExit(),
        ]
        runtime.add(w)
        mapping[e] = w
        new_entries.append(w)
    prog.entry_points = new_entries
    prog.meta["runtime_funcs"] = tuple(sorted(runtime))
    prog.meta["entry_map"] = mapping
    if prog.meta.get("main_entry") in mapping:
        prog.meta["main_entry"] = mapping[prog.meta["main_entry"]]
    prog.meta["defense"] = "sw"
    prog.meta["preload_set"] = sid
    prog.meta["sw_protection"] = protection_level(platform)
    return prog
