"""Hardware-extension defense: blockable resume, resume hook, rendezvous.

Entry points arm a block bit in the live SSA frame, so the first interrupt
leaves a frame that eresume refuses to restore. The untrusted runtime must
then call the enclave's interrupt handler, which stashes the interrupted
context in enclave memory, rewrites the frame to point at a resume hook, and
clears the bit. The hook re-arms the bit, rendezvouses with the hyperthread
sibling, preloads the TLB, and atomically restores the stashed context.

The hook itself is interruptible toy code; it is never checkpointed — the
handler detects interrupts landing inside it (an in-hook flag plus an
rip-range test covering the flag-clear-to-restore window) and restarts it
from the top, which keeps the SSA requirement at two frames total.

The rendezvous protocol has both logical cores publish their physical core
id into shared cells under a lock that a core may re-acquire after losing it
to an interrupt. Success requires seeing the peer's id written after our own
erase of it, which proves the peer ran inside the enclave concurrently. As
written in the hardware proposal the winner returns while still holding the
mutex; `release_on_success` (default on) adds a release on that path so both
siblings can eventually succeed — required for the guard choreography, while
the exact original behavior stays available for the protocol model checks.
"""

from __future__ import annotations

from dataclasses import dataclass

from .program import (
    PAGE, Addr, Alu, AluI, BranchIfZero, Call, CmpXchg, DataPage, EExit,
    Fence, Label, LoadImm, PreloadMarker, Read, ReadPhysCoreId, Ret, Write,
)
from .program import Program, Scenario
from .defense_sw import ensure_page_set

RT_PAGE = "__hwrt"
HANDLER_ENTRY = "__hw_handler"

# word offsets inside the runtime page
MUTEX_OFF = 0
ID_OFF = (8, 16)          # id cell per thread slot
IN_HOOK_OFF = (24, 32)
CTX_OFF = (64, 192)       # 10 words each: r0..r7, rsp, rip


@dataclass(frozen=True)
class HwConfig:
    release_on_success: bool = True
    page_set: str | None = None


def _sbe(value):
    return ("sbe", value)


def _simaex():
    return ("simaex",)


def _regint():
    return ("regint",)


def _restore_context():
    return ("rstctx",)


def _jump(label, scratch=6):
    # unconditional branch: zero a scratch register and branch on it
    return [LoadImm(scratch, 0), BranchIfZero(scratch, label)]


def build_rendezvous_function(slot, release_on_success=True):
    """Slot-specialized rendezvous body. Returns r0=1 on success, 0 on
    physical-core mismatch; loops while the peer is absent."""
    my_id = slot
    mutex = Addr(RT_PAGE, MUTEX_OFF)
    my_cell = Addr(RT_PAGE, ID_OFF[slot])
    peer_cell = Addr(RT_PAGE, ID_OFF[1 - slot])
    body = [
        _regint(),                      # paired AEX registration, idempotent
        LoadImm(5, 0),                  # iteration counter
        Label("Lacq"),
        LoadImm(1, mutex),
        LoadImm(2, -1),
        LoadImm(3, my_id),
        CmpXchg(1, 2, 3, 4),            # free -> mine
        AluI("eq", 4, 0),
        BranchIfZero(4, "Lgot"),
        LoadImm(2, my_id),
        CmpXchg(1, 2, 3, 4),            # already mine (interrupted holder)
        AluI("eq", 4, 0),
        BranchIfZero(4, "Lgot"),
        *_jump("Lacq"),
        Label("Lgot"),
        Alu("mov", 2, 5),
        AluI("eq", 2, 0),
        BranchIfZero(2, "Lannounce"),   # iteration != 0: skip the erase
        LoadImm(1, peer_cell),
        LoadImm(3, -1),
        Write(1, 3),                    # erase the peer's id
        AluI("add", 5, 1),
        Label("Lannounce"),
        ReadPhysCoreId(2),
        LoadImm(1, my_cell),
        Write(1, 2),                    # publish own physical id
        LoadImm(1, peer_cell),
        Read(3, 1),
        Alu("mov", 4, 3),
        AluI("eq", 4, -1),
        BranchIfZero(4, "Lcaught"),     # peer present: compare ids
        LoadImm(1, mutex),              # peer absent: release and retry
        LoadImm(3, -1),
        Write(1, 3),
        *_jump("Lacq"),
        Label("Lcaught"),
        Alu("eq", 2, 3),                # same physical core?
        BranchIfZero(2, "Lmismatch"),
    ]
    if release_on_success:
        body += [
            LoadImm(1, mutex),
            LoadImm(3, -1),
            Write(1, 3),
        ]
    body += [
        LoadImm(0, 1),
        Ret(),
        Label("Lmismatch"),
        LoadImm(1, mutex),
        LoadImm(3, -1),
        Write(1, 3),
        LoadImm(0, 0),
        Ret(),
    ]
    return body


def _build_hook(slot, sid, with_rendezvous):
    body = [_sbe(1)]
    if with_rendezvous:
        body += [
            Call(f"__hw_rvz{slot}"),
            BranchIfZero(0, "Lfail"),
        ]
    body += [
        PreloadMarker(sid),
        LoadImm(6, Addr(RT_PAGE, IN_HOOK_OFF[slot])),
        LoadImm(7, 0),
        Write(6, 7),                    # in_hook := 0; covered by rip test
        _restore_context(),
    ]
    if with_rendezvous:
        body += [
            Label("Lfail"),
            _simaex(),                  # never falls through: frame is rewritten
            *_jump("Lfail"),
        ]
    return body


def _build_entry_wrapper(entry, slot, sid, with_rendezvous):
    body = [_sbe(1)]
    if with_rendezvous:
        body += [
            Call(f"__hw_rvz{slot}"),
            BranchIfZero(0, "Lfail"),
        ]
    body += [
        PreloadMarker(sid),
        Call(entry),
        _sbe(0),
        EExit(),
    ]
    if with_rendezvous:
        body += [
            Label("Lfail"),
            LoadImm(0, -1),
            _sbe(0),
            EExit(),
        ]
    return body


def _build_guard(with_rendezvous):
    body = [_sbe(1)]
    if with_rendezvous:
        body += [
            Call("__hw_rvz1"),
            BranchIfZero(0, "Lgdone"),
        ]
    body += [
        Label("Lspin"),
        Fence(),
        *_jump("Lspin", scratch=7),
    ]
    if with_rendezvous:
        body += [
            Label("Lgdone"),
            _sbe(0),
            EExit(),
        ]
    return body


def wrap_hw(program, platform, config=None):
    """Install the blockable-resume runtime around every entry point."""
    cfg = config or HwConfig()
    prog = program.copy()
    sid = ensure_page_set(prog, cfg.page_set)
    with_rvz = platform.hyperthreading  # no sibling: co-residency is automatic
    slots = (0, 1) if with_rvz else (0,)

    init = {MUTEX_OFF: -1, ID_OFF[0]: -1, ID_OFF[1]: -1,
            IN_HOOK_OFF[0]: 0, IN_HOOK_OFF[1]: 0}
    prog.data_pages.append(DataPage(RT_PAGE, "rw", init))
    stack_pages = {}
    for slot in slots:
        name = f"__hwstk{slot}"
        prog.data_pages.append(DataPage(name, "rw"))
        stack_pages[slot] = name

    runtime = set(prog.meta.get("runtime_funcs", ()))
    mapping = {}
    new_entries = []
    for e in prog.entry_points:
        w = f"__hw_{e}"
        prog.functions[w] = _build_entry_wrapper(e, 0, sid, with_rvz)
        runtime.add(w)
        mapping[e] = w
        new_entries.append(w)
    if with_rvz:
        prog.functions["__hw_guard"] = _build_guard(with_rvz)
        runtime.add("__hw_guard")
        new_entries.append("__hw_guard")
        for slot in slots:
            prog.functions[f"__hw_rvz{slot}"] = build_rendezvous_function(
                slot, cfg.release_on_success)
            runtime.add(f"__hw_rvz{slot}")
    hook_funcs = {}
    for slot in slots:
        name = f"__hw_hook{slot}"
        prog.functions[name] = _build_hook(slot, sid, with_rvz)
        runtime.add(name)
        hook_funcs[slot] = name

    prog.entry_points = new_entries
    prog.meta["runtime_funcs"] = tuple(sorted(runtime))
    prog.meta["runtime_pages"] = tuple(
        [RT_PAGE] + [stack_pages[s] for s in slots])
    prog.meta["entry_map"] = mapping
    if prog.meta.get("main_entry") in mapping:
        prog.meta["main_entry"] = mapping[prog.meta["main_entry"]]
    prog.meta["defense"] = "hw"
    prog.meta["preload_set"] = sid
    prog.meta["handler_entry"] = HANDLER_ENTRY
    prog.meta["hook_funcs"] = hook_funcs
    prog.meta["in_hook_addr"] = {
        s: Addr(RT_PAGE, IN_HOOK_OFF[s]) for s in slots}
    prog.meta["ctx_addr"] = {s: Addr(RT_PAGE, CTX_OFF[s]) for s in slots}
    prog.meta["hook_stack_top"] = {
        s: Addr(stack_pages[s], PAGE) for s in slots}
    if with_rvz:
        prog.meta["guard_entry"] = "__hw_guard"
        prog.meta["guard_core"] = 1
        prog.meta["rvz_funcs"] = {s: f"__hw_rvz{s}" for s in slots}
        prog.meta["rvz_cells"] = {
            "mutex": Addr(RT_PAGE, MUTEX_OFF),
            "id": {s: Addr(RT_PAGE, ID_OFF[s]) for s in slots},
        }
    return prog


def make_interrupt_handler():
    """The native enclave entry the runtime calls after a blocked resume.

    Runs atomically within its tick, mirroring a straight-line trusted stub.
    Touches exactly one enclave rw page before mutating anything, so a
    swapped-out runtime page faults out cleanly first.
    """

    def interrupt_handler(machine, core):
        meta = machine.image.meta
        slot = core.thread_slot
        ssa = core.frames[core.cssa - 1]  # the frame below the handler's own
        if ssa.block != 1:
            machine.events.append((machine.tick, "handler_misuse", core.idx))
            return False
        in_hook_addr = meta["in_hook_addr"][slot]
        machine.translate(core, in_hook_addr >> 12, "w")
        in_hook = machine.memory.get(in_hook_addr, 0)
        lo, hi = meta["hook_ranges"][slot]
        if in_hook == 0 and not (lo <= ssa.rip < hi):
            ctx = meta["ctx_addr"][slot]
            vals = list(ssa.regs) + [ssa.rsp, ssa.rip]
            for k, v in enumerate(vals):
                machine.memory[ctx + 8 * k] = v
            machine.events.append(
                (machine.tick, "ctxsave", core.idx, tuple(vals)))
        machine.memory[in_hook_addr] = 1
        ssa.regs = (0,) * 8
        ssa.rip = meta["hook_rips"][slot]
        ssa.rsp = meta["hook_stack_top"][slot]
        ssa.block = 0
        machine.events.append((machine.tick, "hooked", core.idx, slot))
        return True

    return interrupt_handler


def attach_runtime(image):
    """Install the native handler on a loaded image (hw defense only)."""
    if image.meta.get("defense") == "hw":
        image.native_entries[HANDLER_ENTRY] = make_interrupt_handler()
    return image


RESTART_ENTRY = "__rvz_restart"


def make_restart_handler():
    """Native handler for the rendezvous micro-scenario.

    Any interrupt of a protocol side restarts that side from the top, which
    is what the resume hook guarantees in the full runtime: re-entry always
    re-runs the rendezvous from iteration zero instead of resuming a stale
    mid-protocol continuation.
    """

    def restart_handler(machine, core):
        meta = machine.image.meta
        slot = core.thread_slot
        ssa = core.frames[core.cssa - 1]
        if ssa.block != 1:
            machine.events.append((machine.tick, "handler_misuse", core.idx))
            return False
        entry = meta["restart_entry"][slot]
        ssa.regs = (0,) * 8
        ssa.rip = machine.image.entries[entry]
        ssa.rsp = (machine.image.layout["stack_vpns"][core.idx] + 1) * PAGE
        ssa.block = 0
        machine.events.append((machine.tick, "restarted", core.idx, slot))
        return True

    return restart_handler


def attach_restart_runtime(image):
    image.native_entries[RESTART_ENTRY] = make_restart_handler()
    return image


def rendezvous_scenario(release_on_success=True, guard_core=1):
    """Micro-scenario: two logical cores run only the rendezvous protocol.

    Used by the protocol model checks; each side records the protocol result
    in its own output cell before exiting. With guard_core=1 the sides share
    a physical core (success expected); guard_core=2 places them on distinct
    physical cores (the protocol must refuse). Sides arm the block bit so
    every interrupt goes through a restart handler, matching the resume-hook
    discipline of the full runtime.
    """
    prog = Program()
    for slot in (0, 1):
        prog.functions[f"__hw_rvz{slot}"] = build_rendezvous_function(
            slot, release_on_success)
        prog.functions[f"side{slot}"] = [
            _sbe(1),
            Call(f"__hw_rvz{slot}"),
            LoadImm(1, Addr("rvzout", 8 * slot)),
            Write(1, 0),
            _sbe(0),
            EExit(),
        ]
    init = {MUTEX_OFF: -1, ID_OFF[0]: -1, ID_OFF[1]: -1}
    prog.data_pages.append(DataPage(RT_PAGE, "rw", init))
    prog.data_pages.append(DataPage("rvzout", "rw", {0: -2, 8: -2}))
    prog.data_pages.append(DataPage("rvzsec", "rw"))
    prog.secret_slots = [("rvzsec", 0)]
    prog.entry_points = ["side0", "side1"]
    prog.meta["main_entry"] = "side0"
    prog.meta["guard_entry"] = "side1"
    prog.meta["guard_core"] = guard_core
    prog.meta["handler_entry"] = RESTART_ENTRY
    prog.meta["restart_entry"] = {0: "side0", 1: "side1"}
    prog.meta["rvz_funcs"] = {0: "__hw_rvz0", 1: "__hw_rvz1"}
    prog.meta["rvz_cells"] = {
        "mutex": Addr(RT_PAGE, MUTEX_OFF),
        "id": {s: Addr(RT_PAGE, ID_OFF[s]) for s in (0, 1)},
    }
    return Scenario(
        name="rendezvous",
        program=prog,
        secret_pairs=[((0,), (0,))],
        default_secret=(0,),
        main_entry="side0",
        attack_targets={},
    )
