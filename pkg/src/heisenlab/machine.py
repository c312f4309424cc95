"""Deterministic platform model: cores, page tables, EPCM, TLBs, SSA stacks.

The machine executes one schedule entry per tick. Page translation follows a
use-but-verify discipline: page tables are untrusted and checked against the
EPCM on every walk, while TLB hits run on the rights cached at insert time.
Every attacker-relevant event (walks, PTE dirty updates, faults, exits) lands
in a global event list in tick order; the attacker-visible projection is the
observation trace.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from .program import (
    PAGE, INSTR_PER_PAGE, WORD, finalize_function, ProgramError,
)
from .defense_sw import TsxConfig, Transaction, TxAbort

CODE_BASE_VPN = 0x100
DATA_BASE_VPN = 0x200
STACK_BASE_VPN = 0x300
SSA_BASE_VPN = 0x400
UNTRUSTED_BASE_VPN = 0x10000

ENCLAVE_ID = 1


class MachineError(Exception):
    pass


class LoadError(MachineError):
    pass


class ProgramTooLarge(LoadError):
    pass


class ScheduleExhausted(MachineError):
    pass


class NoFreeSsaFrame(MachineError):
    pass


class InvariantViolation(MachineError):
    pass


class PageFault(Exception):
    """Internal control flow for translation faults (page-granular)."""

    def __init__(self, vpn, access, cause):
        self.vpn = vpn
        self.access = access
        self.cause = cause  # not_present | rights | epcm_mismatch
        super().__init__(f"fault vpn={vpn:#x} access={access} cause={cause}")


@dataclass(frozen=True)
class PlatformConfig:
    physical_cores: int = 2
    hyperthreading: bool = True
    tlb_sets: int = 128
    tlb_ways: int = 12
    epc_pages: int = 24576
    nssa: int = 2
    paired_aex_hw: bool = True
    ht_disabled_attested: bool = False
    timestamps: bool = False
    seconds_per_tick: float = 1e-6
    instructions_per_code_page: int = 64

    @property
    def n_logical(self):
        return self.physical_cores * 2 if self.hyperthreading else self.physical_cores

    def phys_of(self, i):
        return i // 2 if self.hyperthreading else i

    def sibling_of(self, i):
        return (i ^ 1) if self.hyperthreading else None


class Pte:
    __slots__ = ("present", "w", "x", "a", "d", "frame")

    def __init__(self, present, w, x, frame, a=0, d=0):
        self.present = present
        self.w = w
        self.x = x
        self.a = a
        self.d = d
        self.frame = frame

    def clone(self):
        return Pte(self.present, self.w, self.x, self.frame, self.a, self.d)

    def key(self):
        return (self.present, self.w, self.x, self.a, self.d, self.frame)


class EpcmEntry:
    __slots__ = ("valid", "enclave", "lpage", "w", "x", "ptype")

    def __init__(self, valid, enclave, lpage, w, x, ptype="regular"):
        self.valid = valid
        self.enclave = enclave
        self.lpage = lpage
        self.w = w
        self.x = x
        self.ptype = ptype

    def clone(self):
        return EpcmEntry(self.valid, self.enclave, self.lpage, self.w, self.x, self.ptype)


class SsaFrame:
    __slots__ = ("regs", "rip", "rsp", "block")

    def __init__(self):
        self.regs = (0,) * 8
        self.rip = 0
        self.rsp = 0
        self.block = 0

    def clone(self):
        f = SsaFrame()
        f.regs = self.regs
        f.rip = self.rip
        f.rsp = self.rsp
        f.block = self.block
        return f

    def key(self):
        return (self.regs, self.rip, self.rsp, self.block)


class Tlb:
    """Set-associative shared TLB, one per physical core, LRU per set.

    Sets are stored sparsely (index -> MRU-first list); entries are tuples
    (vpn, frame, w, x, dirty_cached, owner, inserted_by), replaced rather
    than mutated so that forks can share them.
    """

    __slots__ = ("nsets", "ways", "sets", "epoch")

    def __init__(self, nsets, ways):
        self.nsets = nsets
        self.ways = ways
        self.sets = {}
        self.epoch = 0

    def set_for(self, vpn):
        return self.sets.get(vpn % self.nsets, ())

    def insert(self, vpn, entry):
        s = self.sets.setdefault(vpn % self.nsets, [])
        s.insert(0, entry)
        if len(s) > self.ways:
            s.pop()
            self.epoch += 1

    def flush_enclave_core(self, core_idx):
        # AEX / eenter / eexit / eresume flush: only entries this logical
        # core inserted for the enclave; untrusted and sibling entries stay.
        for i in list(self.sets):
            s = self.sets[i]
            keep = [e for e in s if not (e[5] and e[6] == core_idx)]
            if len(keep) != len(s):
                if keep:
                    self.sets[i] = keep
                else:
                    del self.sets[i]
        self.epoch += 1

    def flush_vpn(self, vpn):
        i = vpn % self.nsets
        s = self.sets.get(i)
        if s is None:
            self.epoch += 1
            return
        keep = [e for e in s if e[0] != vpn]
        if keep:
            self.sets[i] = keep
        else:
            del self.sets[i]
        self.epoch += 1

    def entry_count(self):
        return sum(len(s) for s in self.sets.values())

    def clone(self):
        t = Tlb(self.nsets, self.ways)
        t.sets = {i: list(s) for i, s in self.sets.items()}
        t.epoch = self.epoch
        return t

    def key(self):
        return tuple((i, tuple(s)) for i, s in sorted(self.sets.items()))


class Core:
    __slots__ = (
        "idx", "phys", "sib", "mode", "regs", "rip", "rsp", "frames", "cssa",
        "thread_slot", "rt_phase", "rt_queue", "rt_current", "last_fault",
        "tx", "consec_aborts", "fetch_vpn", "fetch_epoch",
    )

    def __init__(self, idx, phys, sib, nssa):
        self.idx = idx
        self.phys = phys
        self.sib = sib
        self.mode = 0
        self.regs = [0] * 8
        self.rip = 0
        self.rsp = 0
        self.frames = [SsaFrame() for _ in range(nssa)]
        self.cssa = 0
        self.thread_slot = None
        self.rt_phase = "idle"
        self.rt_queue = []
        self.rt_current = None
        self.last_fault = None
        self.tx = None
        self.consec_aborts = 0
        self.fetch_vpn = -1
        self.fetch_epoch = -1

    def clone(self):
        c = Core(self.idx, self.phys, self.sib, len(self.frames))
        c.mode = self.mode
        c.regs = list(self.regs)
        c.rip = self.rip
        c.rsp = self.rsp
        c.frames = [f.clone() for f in self.frames]
        c.cssa = self.cssa
        c.thread_slot = self.thread_slot
        c.rt_phase = self.rt_phase
        c.rt_queue = list(self.rt_queue)
        c.rt_current = self.rt_current
        c.last_fault = self.last_fault
        c.tx = self.tx.clone() if self.tx else None
        c.consec_aborts = self.consec_aborts
        c.fetch_vpn = -1
        c.fetch_epoch = -1
        return c

    def key(self):
        return (
            self.mode, tuple(self.regs), self.rip, self.rsp,
            tuple(f.key() for f in self.frames), self.cssa, self.thread_slot,
            self.rt_phase, tuple(self.rt_queue), self.rt_current,
            self.last_fault, self.tx.key() if self.tx else None,
            self.consec_aborts,
        )


@dataclass
class Image:
    """Loaded program: resolved code stream, page tables, page sets."""

    code: list
    entries: dict                 # entry name -> rip
    native_entries: dict          # entry name -> callable(machine, core)
    data_init: dict               # addr -> value
    ptes: dict                    # vpn -> pristine Pte
    epcm: dict                    # frame -> pristine EpcmEntry
    secret_addrs: list
    page_sets: dict               # sid -> tuple of touch instruction tuples
    layout: dict
    meta: dict
    code_base: int = CODE_BASE_VPN

    def resolve_target(self, ref):
        """Map a symbolic attack target to vpns."""
        kind, name = ref[0], ref[1]
        if kind == "func":
            return list(self.layout["func_vpns"][name])
        if kind == "data":
            return [self.layout["data_vpn"][name]]
        raise KeyError(ref)


def _page_span(start, count):
    if count == 0:
        return ()
    first = start // INSTR_PER_PAGE
    last = (start + count - 1) // INSTR_PER_PAGE
    return tuple(range(CODE_BASE_VPN + first, CODE_BASE_VPN + last + 1))


def load(program, platform, extra_meta=None):
    """Lay out a program, expand preload markers, build the pristine image.

    Marker expansion and layout interact (touch code occupies pages that the
    default page set must itself cover), so layout runs to a fixed point.
    """
    for e in program.entry_points:
        if e not in program.functions:
            raise LoadError(f"entry point {e!r} is not a function")
    fin = {}
    for name, body in program.functions.items():
        try:
            fin[name] = finalize_function(body)
        except ProgramError as exc:
            raise LoadError(str(exc)) from exc

    data_vpn = {}
    for i, p in enumerate(program.data_pages):
        data_vpn[p.name] = DATA_BASE_VPN + i
    n_cores = platform.n_logical
    stack_vpns = [STACK_BASE_VPN + i for i in range(n_cores)]
    runtime_funcs = set(program.meta.get("runtime_funcs", ()))
    runtime_pages = list(program.meta.get("runtime_pages", ()))

    def resolve_set(ps, starts_sizes, n_code_pages):
        data_order = [p.name for p in program.data_pages]
        rights = {p.name: p.rights for p in program.data_pages}
        touches = []
        seen = set()

        def add_data(name, touch=None):
            vpn = data_vpn[name]
            if vpn in seen:
                return
            seen.add(vpn)
            cls = touch or rights[name]
            base = vpn * PAGE
            touches.append(("touchr", base) if cls == "ro" else ("touchrw", base))

        def add_code_vpn(vpn):
            if vpn in seen:
                return
            seen.add(vpn)
            touches.append(("touchx", vpn))

        def add_stacks():
            for vpn in stack_vpns:
                if vpn not in seen:
                    seen.add(vpn)
                    touches.append(("touchrw", vpn * PAGE))

        explicit_all = False
        for item in ps.items:
            kind = item[0]
            if kind == "all":
                explicit_all = True
                for vpn in range(CODE_BASE_VPN, CODE_BASE_VPN + n_code_pages):
                    add_code_vpn(vpn)
                for name in data_order:
                    add_data(name)
                add_stacks()
            elif kind == "func":
                start, size = starts_sizes[item[1]]
                for vpn in _page_span(start, size):
                    add_code_vpn(vpn)
            elif kind == "data":
                add_data(item[1], item[2] if len(item) > 2 else None)
            elif kind == "stack":
                add_stacks()
            elif kind == "runtime":
                pass  # handled below for every set
            else:
                raise LoadError(f"unknown page set item {item!r}")
        if not explicit_all:
            # defense runtime pages and stacks are always part of the set:
            # the runtime touches them on every pass and their order is fixed
            for name in runtime_pages:
                add_data(name)
            for fname in program.functions:
                if fname in runtime_funcs:
                    start, size = starts_sizes[fname]
                    for vpn in _page_span(start, size):
                        add_code_vpn(vpn)
            add_stacks()
        return tuple(touches)

    # fixed-point layout: marker expansion length depends on page counts
    sizes = {name: len(ins) for name, (ins, _) in fin.items()}
    exp = {name: sizes[name] for name in fin}
    resolved_sets = {}
    for _ in range(10):
        starts = {}
        pos = 0
        for name in program.functions:
            starts[name] = (pos, exp[name])
            pos += exp[name]
        n_code_pages = (pos + INSTR_PER_PAGE - 1) // INSTR_PER_PAGE
        starts_sizes = starts
        resolved_sets = {
            sid: resolve_set(ps, starts_sizes, n_code_pages)
            for sid, ps in program.page_sets.items()
        }
        new_exp = {}
        for name, (ins, _) in fin.items():
            n = 0
            for t in ins:
                if t[0] == "mark":
                    if t[1] not in resolved_sets:
                        raise LoadError(f"unknown page set {t[1]!r}")
                    n += len(resolved_sets[t[1]])
                else:
                    n += 1
            new_exp[name] = n
        if new_exp == exp:
            break
        exp = new_exp
    else:
        raise LoadError("layout did not converge")

    # final placement and code stream
    starts = {}
    pos = 0
    for name in program.functions:
        starts[name] = (pos, exp[name])
        pos += exp[name]
    n_code_pages = (pos + INSTR_PER_PAGE - 1) // INSTR_PER_PAGE

    def addr_of(ref):
        if isinstance(ref, tuple) and ref and ref[0] == "@":
            if ref[1] not in data_vpn:
                raise LoadError(f"unknown data page {ref[1]!r}")
            return data_vpn[ref[1]] * PAGE + ref[2]
        return ref

    code = []
    func_vpns = {}
    for name in program.functions:
        ins, labels = fin[name]
        fstart = starts[name][0]
        assert len(code) == fstart
        for t in ins:
            op = t[0]
            if op == "mark":
                code.extend(resolved_sets[t[1]])
            elif op == "li":
                code.append(("li", t[1], addr_of(t[2])))
            elif op == "alui":
                code.append(("alui", t[1], t[2], addr_of(t[3])))
            elif op in ("bz", "xbegin"):
                local = labels[t[-1]]
                # local label indexes count expanded slots before them
                off = 0
                for u in ins[:local]:
                    off += len(resolved_sets[u[1]]) if u[0] == "mark" else 1
                code.append((op,) + t[1:-1] + (fstart + off,))
            elif op == "call":
                code.append(("call", starts[t[1]][0]))
            else:
                code.append(t)
        func_vpns[name] = _page_span(*starts[name])

    total_pages = n_code_pages + len(program.data_pages) + n_cores + n_cores * platform.nssa
    if total_pages > platform.epc_pages:
        raise ProgramTooLarge(f"{total_pages} pages exceed EPC of {platform.epc_pages}")

    ptes = {}
    epcm = {}
    for i in range(n_code_pages):
        vpn = CODE_BASE_VPN + i
        ptes[vpn] = Pte(1, 0, 1, vpn)
        epcm[vpn] = EpcmEntry(1, ENCLAVE_ID, vpn, 0, 1)
    for p in program.data_pages:
        vpn = data_vpn[p.name]
        w = 1 if p.rights == "rw" else 0
        ptes[vpn] = Pte(1, w, 0, vpn)
        epcm[vpn] = EpcmEntry(1, ENCLAVE_ID, vpn, w, 0)
    for vpn in stack_vpns:
        ptes[vpn] = Pte(1, 1, 0, vpn)
        epcm[vpn] = EpcmEntry(1, ENCLAVE_ID, vpn, 1, 0)
    for i in range(n_cores * platform.nssa):
        vpn = SSA_BASE_VPN + i
        epcm[vpn] = EpcmEntry(1, ENCLAVE_ID, vpn, 1, 0, ptype="ssa")

    data_init = {}
    for p in program.data_pages:
        base = data_vpn[p.name] * PAGE
        for off, val in p.init.items():
            data_init[base + off] = val

    secret_addrs = [data_vpn[pg] * PAGE + off for pg, off in program.secret_slots]

    def resolve_meta(obj):
        # defense wrappers record symbolic page addresses; make them concrete
        if isinstance(obj, tuple) and obj and obj[0] == "@":
            return addr_of(obj)
        if isinstance(obj, dict):
            return {k: resolve_meta(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return type(obj)(resolve_meta(v) for v in obj)
        return obj

    meta = resolve_meta(dict(program.meta))
    if extra_meta:
        meta.update(resolve_meta(dict(extra_meta)))
    if "hook_funcs" in meta:
        meta["hook_ranges"] = {
            slot: (starts[fn][0], starts[fn][0] + exp[fn])
            for slot, fn in meta["hook_funcs"].items()
        }
        meta["hook_rips"] = {
            slot: starts[fn][0] for slot, fn in meta["hook_funcs"].items()
        }

    entries = {e: starts[e][0] for e in program.entry_points}

    func_rips = {name: (starts[name][0], starts[name][0] + exp[name])
                 for name in program.functions}
    layout = {
        "data_vpn": data_vpn,
        "func_vpns": func_vpns,
        "func_rips": func_rips,
        "stack_vpns": stack_vpns,
        "n_code_pages": n_code_pages,
        "total_pages": total_pages,
    }

    img = Image(
        code=code,
        entries=entries,
        native_entries={},
        data_init=data_init,
        ptes=ptes,
        epcm=epcm,
        secret_addrs=secret_addrs,
        page_sets=resolved_sets,
        layout=layout,
        meta=meta,
    )
    return img


def page_set_fits_tlb(image, sid, platform):
    pressure = {}
    for t in image.page_sets[sid]:
        vpn = t[1] if t[0] == "touchx" else t[1] // PAGE
        s = vpn % platform.tlb_sets
        pressure[s] = pressure.get(s, 0) + 1
    return all(v <= platform.tlb_ways for v in pressure.values())


class OsView:
    """What the attacker (the OS) can legitimately inspect."""

    def __init__(self, machine):
        self._m = machine

    def pte(self, vpn):
        p = self._m.ptes.get(vpn)
        if p is None:
            return None
        return p.key()

    def epcm_valid(self, vpn):
        e = self._m.epcm.get(vpn)
        return bool(e and e.valid)

    def mode(self, core_idx):
        return self._m.cores[core_idx].mode

    @property
    def app_done(self):
        return self._m.app_done


@dataclass
class RunResult:
    status: str
    ticks: int
    result: object
    icount: int
    counts: dict
    fits_tlb: bool = True


class _NullEvents(list):
    """Event sink for hot explorers: appends are dropped, trace unaffected."""

    __slots__ = ()

    def append(self, item):
        pass


class Machine:
    def __init__(self, image, platform, tsx_config=None, secret=()):
        if platform.instructions_per_code_page != INSTR_PER_PAGE:
            raise LoadError("code page granularity is fixed at "
                            f"{INSTR_PER_PAGE} instructions")
        self.image = image
        self.platform = platform
        self.tsx = tsx_config or TsxConfig()
        self.memory = dict(image.data_init)
        for a, v in zip(image.secret_addrs, secret):
            self.memory[a] = v
        self.ptes = {v: p.clone() for v, p in image.ptes.items()}
        self.epcm = {f: e.clone() for f, e in image.epcm.items()}
        n = platform.n_logical
        self.cores = [
            Core(i, platform.phys_of(i), platform.sibling_of(i), platform.nssa)
            for i in range(n)
        ]
        self.tlbs = [Tlb(platform.tlb_sets, platform.tlb_ways)
                     for _ in range(platform.physical_cores)]
        self.events = []
        self.trace = []
        self.walkbuf = []
        self.tick = 0
        self.registrations = {}
        self.app_done = False
        self.result = None
        self.nonterm = False
        self.icount = 0
        self.counts = {
            "eenter": 0, "eresume": 0, "eexit": 0, "aex": 0, "xend": 0,
            "abort_interrupt": 0, "abort_capacity": 0, "abort_conflict": 0,
            "abort_illegal": 0, "faults": 0, "suppressed_faults": 0,
        }
        self.view = OsView(self)
        self.main_core = 0
        meta = image.meta
        guard = meta.get("guard_entry")
        self.cores[0].thread_slot = 0
        self.cores[0].rt_queue.append((meta.get("main_entry", "main"),
                                       tuple(meta.get("main_args", ()))))
        if guard is not None and n > 1:
            g = meta.get("guard_core", 1)
            self.cores[g].thread_slot = 1
            self.cores[g].rt_queue.append((guard, ()))

    # -- state forking for the explorers ------------------------------------

    def fork(self):
        m = object.__new__(Machine)
        m.image = self.image
        m.platform = self.platform
        m.tsx = self.tsx
        m.memory = dict(self.memory)
        m.ptes = {v: p.clone() for v, p in self.ptes.items()}
        m.epcm = {f: e.clone() for f, e in self.epcm.items()}
        m.cores = [c.clone() for c in self.cores]
        m.tlbs = [t.clone() for t in self.tlbs]
        m.events = (_NullEvents() if type(self.events) is _NullEvents
                    else list(self.events))
        m.trace = list(self.trace)
        m.walkbuf = list(self.walkbuf)
        m.tick = self.tick
        m.registrations = dict(self.registrations)
        m.app_done = self.app_done
        m.result = self.result
        m.nonterm = self.nonterm
        m.icount = self.icount
        m.counts = dict(self.counts)
        m.view = OsView(m)
        m.main_core = self.main_core
        return m

    def disable_event_log(self):
        self.events = _NullEvents()

    def state_key(self, include_walkbuf=True):
        # the walk buffer only matters to a probing attacker; closed-system
        # model checks drop it so that states can actually recur
        return (
            tuple(c.key() for c in self.cores),
            tuple(sorted(self.memory.items())),
            tuple((v, p.key()) for v, p in sorted(self.ptes.items())),
            tuple((f, e.valid) for f, e in sorted(self.epcm.items())),
            tuple(t.key() for t in self.tlbs),
            tuple(self.walkbuf) if include_walkbuf else (),
            tuple(sorted(self.registrations.items())),
            self.app_done, self.nonterm,
        )

    # -- translation ---------------------------------------------------------

    def translate(self, core, vpn, access):
        tlb = self.tlbs[core.phys]
        s = tlb.set_for(vpn)
        for i, e in enumerate(s):
            if e[0] == vpn:
                if (access == "w" and not e[2]) or (access == "x" and not e[3]):
                    break  # cached rights insufficient: take the walk path
                if i:
                    s.insert(0, s.pop(i))
                if access == "w" and not e[4]:
                    # dirty bit set on a TLB-hit write: one visible PTE write
                    pte = self.ptes.get(vpn)
                    if pte is not None:
                        pte.d = 1
                    s[0] = (e[0], e[1], e[2], e[3], 1, e[5], e[6])
                    self.events.append((self.tick, "ptew", core.idx, vpn))
                    if core.mode:
                        self.walkbuf.append(vpn)
                return e[1]

        pte = self.ptes.get(vpn)
        if pte is None:
            if vpn >= UNTRUSTED_BASE_VPN:
                pte = Pte(1, 1, 0, vpn)
                self.ptes[vpn] = pte
            else:
                raise PageFault(vpn, access, "not_present")
        if not pte.present:
            raise PageFault(vpn, access, "not_present")
        if access == "w" and not pte.w:
            raise PageFault(vpn, access, "rights")
        if access == "x" and not pte.x:
            raise PageFault(vpn, access, "rights")
        frame = pte.frame
        if frame < UNTRUSTED_BASE_VPN:
            em = self.epcm.get(frame)
            if em is None or not em.valid:
                raise PageFault(vpn, access, "epcm_mismatch")
            if core.mode != em.enclave:
                raise PageFault(vpn, access, "epcm_mismatch")
            if em.lpage != vpn:
                raise PageFault(vpn, access, "epcm_mismatch")
            if (pte.w and not em.w) or (pte.x and not em.x):
                raise PageFault(vpn, access, "rights")
        dirty = 1 if access == "w" else 0
        pte.a = 1
        if dirty:
            pte.d = 1
        self.events.append((self.tick, "walk", core.idx, vpn, access))
        if core.mode:
            self.walkbuf.append(vpn)
        tlb.insert(vpn, (vpn, frame, pte.w, pte.x, dirty, core.mode, core.idx))
        tlb.epoch += 1
        return frame

    # -- transactional memory helpers (engine lives in defense_sw) -----------

    def _mem_read(self, core, addr):
        tx = core.tx
        if tx is not None:
            return tx.read(self, core, addr)
        return self.memory.get(addr, 0)

    def _mem_write(self, core, addr, val):
        tx = core.tx
        if tx is not None:
            tx.write(self, core, addr, val)
        else:
            self.memory[addr] = val

    def tx_abort(self, core, cause):
        core.tx.abort(self, core, cause)

    # -- attacker observations ------------------------------------------------

    def _observe(self, obs):
        if self.platform.timestamps:
            self.trace.append(("ts", self.tick))
        self.trace.append(obs)

    # -- enclave transitions ---------------------------------------------------

    def _flush_entry_exit(self, core):
        self.tlbs[core.phys].flush_enclave_core(core.idx)
        core.fetch_vpn = -1

    def eenter(self, core, entry, args=()):
        if entry in self.image.native_entries:
            return self._eenter_native(core, entry)
        if entry not in self.image.entries:
            raise InvariantViolation(f"eenter to non-entry {entry!r}")
        if core.cssa >= self.platform.nssa:
            raise NoFreeSsaFrame(f"core {core.idx}: ssa stack full")
        self._flush_entry_exit(core)
        core.mode = ENCLAVE_ID
        core.regs = [0] * 8
        for i, a in enumerate(args):
            core.regs[i] = a
        core.rip = self.image.entries[entry]
        core.rsp = (self.image.layout["stack_vpns"][core.idx] + 1) * PAGE
        core.frames[core.cssa].block = 0
        self.counts["eenter"] += 1
        self.events.append((self.tick, "eenter", core.idx, entry))
        return True

    def _eenter_native(self, core, entry):
        if core.cssa >= self.platform.nssa:
            raise NoFreeSsaFrame(f"core {core.idx}: ssa stack full")
        handler = self.image.native_entries[entry]
        self._flush_entry_exit(core)
        core.mode = ENCLAVE_ID
        self.counts["eenter"] += 1
        self.events.append((self.tick, "eenter", core.idx, entry))
        try:
            ok = handler(self, core)
            ok = True if ok is None else bool(ok)
        except PageFault as f:
            # entry aborted before any mutation; deliver like a fault exit
            self.counts["faults"] += 1
            self.events.append((self.tick, "fault", core.idx, f.vpn, f.access, f.cause))
            self._observe(("fault", f.vpn, f.access, f.cause))
            core.last_fault = (f.vpn, f.access, f.cause)
            core.rt_phase = "heal"
            ok = False
        # trampoline exit: no paired propagation, registration untouched
        self._flush_entry_exit(core)
        core.mode = 0
        self.counts["eexit"] += 1
        self.events.append((self.tick, "eexit", core.idx, entry))
        return ok

    def eresume(self, core):
        if core.cssa == 0:
            raise InvariantViolation(f"core {core.idx}: eresume with empty ssa stack")
        f = core.frames[core.cssa - 1]
        if f.block:
            self.events.append((self.tick, "erb", core.idx))
            return False
        core.cssa -= 1
        core.regs = list(f.regs)
        core.rip = f.rip
        core.rsp = f.rsp
        self._flush_entry_exit(core)
        core.mode = ENCLAVE_ID
        self.counts["eresume"] += 1
        self.events.append((self.tick, "eresume", core.idx))
        return True

    def aex(self, core, cause, fault=None, propagate=True):
        if core.tx is not None:
            self.tx_abort(core, "interrupt")
            if cause == "interrupt":
                cause = "tsx_abort"
        if core.cssa >= self.platform.nssa:
            raise InvariantViolation(f"core {core.idx}: aex with full ssa stack")
        f = core.frames[core.cssa]
        f.regs = tuple(core.regs)
        f.rip = core.rip
        f.rsp = core.rsp
        core.cssa += 1
        core.regs = [0] * 8
        self._flush_entry_exit(core)
        core.mode = 0
        core.rt_phase = "heal" if fault else "eresume"
        core.last_fault = fault
        self.counts["aex"] += 1
        self.events.append((self.tick, "aex", core.idx, cause))
        if fault:
            self.counts["faults"] += 1
            self.events.append((self.tick, "fault", core.idx) + fault)
            self._observe(("fault",) + fault)
        else:
            self._observe(("exit", cause))
        if propagate:
            self._propagate_paired(core)

    def _propagate_paired(self, core):
        if not self.platform.paired_aex_hw:
            return
        sib = core.sib
        if sib is None:
            return
        if self.registrations.get(core.phys) != ENCLAVE_ID:
            return
        other = self.cores[sib]
        if other.mode == ENCLAVE_ID:
            self.aex(other, "paired", propagate=False)

    def eexit(self, core):
        self._propagate_paired(core)
        if self.registrations.get(core.phys) == ENCLAVE_ID:
            del self.registrations[core.phys]
        self._flush_entry_exit(core)
        core.mode = 0
        # a synchronous eexit is the ecall's return, not an AEX-class event:
        # no EnclaveExit observation is appended for it
        retval = core.regs[0]
        self.counts["eexit"] += 1
        self.events.append((self.tick, "eexit", core.idx, core.rt_current))
        done = core.rt_current
        core.rt_current = None
        core.rt_phase = "idle"
        if done is not None and done == self.image.meta.get("main_entry", "main"):
            self.app_done = True
            self.result = retval

    def interrupt(self, core):
        if core.mode == ENCLAVE_ID:
            self.aex(core, "interrupt")

    def evict_page(self, vpn):
        em = self.epcm.get(vpn)
        if em is None or not em.valid:
            return
        for c in self.cores:
            if c.mode == em.enclave:
                self.events.append((self.tick, "ipi", c.idx))
                self.aex(c, "interrupt", propagate=False)
        for t in self.tlbs:
            t.flush_vpn(vpn)
        em.valid = 0
        pte = self.ptes.get(vpn)
        if pte is not None:
            pte.present = 0
        self.events.append((self.tick, "evict", -1, vpn))

    def reload_page(self, vpn):
        pristine = self.image.ptes.get(vpn)
        if pristine is not None:
            self.ptes[vpn] = pristine.clone()
        em = self.epcm.get(vpn)
        if em is not None:
            em.valid = 1
        self.events.append((self.tick, "reload", -1, vpn))

    # -- the untrusted runtime driver ------------------------------------------

    def _runtime_step(self, core):
        ph = core.rt_phase
        if ph == "idle":
            if core.rt_queue and not self.app_done:
                entry, args = core.rt_queue.pop(0)
                core.rt_current = entry
                self.eenter(core, entry, args)
            return
        if ph == "heal":
            if core.last_fault is not None:
                self.reload_page(core.last_fault[0])
                core.last_fault = None
            core.rt_phase = "eresume"
            return
        if ph == "eresume":
            if self.app_done and core.thread_slot == 1:
                core.rt_phase = "idle"
                return
            if not self.eresume(core):
                core.rt_phase = "handler"
            else:
                core.rt_phase = "idle"
            return
        if ph == "handler":
            handler = self.image.meta.get("handler_entry")
            if handler is None:
                raise InvariantViolation("blocked eresume without a handler entry")
            ok = self.eenter(core, handler)
            if ok:
                core.rt_phase = "eresume"
            return
        raise InvariantViolation(f"bad runtime phase {ph!r}")

    # -- instruction execution ---------------------------------------------------

    def _step_core(self, core):
        if core.mode != ENCLAVE_ID:
            self._runtime_step(core)
            return
        try:
            self._exec(core)
        except PageFault as f:
            if core.tx is not None:
                # faults inside a transaction are suppressed: the transaction
                # aborts in-enclave and nothing is delivered to the OS
                self.counts["suppressed_faults"] += 1
                self.tx_abort(core, "interrupt")
            else:
                self.aex(core, "fault", fault=(f.vpn, f.access, f.cause))
        except TxAbort:
            pass  # the abort already transferred control to the abort target

    def _exec(self, core):
        rip = core.rip
        vpn = self.image.code_base + (rip >> 6)
        tlb = self.tlbs[core.phys]
        if vpn != core.fetch_vpn or tlb.epoch != core.fetch_epoch:
            self.translate(core, vpn, "x")
            core.fetch_vpn = vpn
            core.fetch_epoch = tlb.epoch
        ins = self.image.code[rip]
        op = ins[0]
        regs = core.regs
        if op == "alui":
            regs[ins[2]] = _alu(ins[1], regs[ins[2]], ins[3])
            core.rip = rip + 1
        elif op == "alur":
            regs[ins[2]] = _alu(ins[1], regs[ins[2]], regs[ins[3]])
            core.rip = rip + 1
        elif op == "li":
            regs[ins[1]] = ins[2]
            core.rip = rip + 1
        elif op == "rd":
            addr = regs[ins[2]]
            self.translate(core, addr >> 12, "r")
            regs[ins[1]] = self._mem_read(core, addr)
            core.rip = rip + 1
        elif op == "wr":
            addr = regs[ins[1]]
            self.translate(core, addr >> 12, "w")
            self._mem_write(core, addr, regs[ins[2]])
            core.rip = rip + 1
        elif op == "bz":
            core.rip = ins[2] if regs[ins[1]] == 0 else rip + 1
        elif op == "call":
            sp = core.rsp - WORD
            self.translate(core, sp >> 12, "w")
            self._mem_write(core, sp, rip + 1)
            core.rsp = sp
            core.rip = ins[1]
        elif op == "ret":
            sp = core.rsp
            self.translate(core, sp >> 12, "r")
            core.rip = self._mem_read(core, sp)
            core.rsp = sp + WORD
        elif op == "fence":
            core.rip = rip + 1
        elif op == "touchr":
            addr = ins[1]
            self.translate(core, addr >> 12, "r")
            self._mem_read(core, addr)
            core.rip = rip + 1
        elif op == "touchrw":
            addr = ins[1]
            self.translate(core, addr >> 12, "r")
            v = self._mem_read(core, addr)
            self.translate(core, addr >> 12, "w")
            self._mem_write(core, addr, v)
            core.rip = rip + 1
        elif op == "touchx":
            self.translate(core, ins[1], "x")
            core.rip = rip + 1
        elif op == "xbegin":
            if core.tx is not None:
                self.tx_abort(core, "illegal")
            else:
                core.tx = Transaction(ins[1], tuple(regs), core.rsp)
                core.rip = rip + 1
                self.events.append((self.tick, "txb", core.idx))
        elif op == "xend":
            if core.tx is None:
                raise InvariantViolation(f"xend outside transaction at rip {rip}")
            core.tx.commit(self, core)
            core.rip = rip + 1
        elif op == "cas":
            addr = regs[ins[1]]
            self.translate(core, addr >> 12, "w")
            cur = self._mem_read(core, addr)
            if cur == regs[ins[2]]:
                self._mem_write(core, addr, regs[ins[3]])
                regs[ins[4]] = 1
            else:
                regs[ins[4]] = 0
            core.rip = rip + 1
        elif op == "corid":
            regs[ins[1]] = core.phys
            core.rip = rip + 1
        elif op == "eexit":
            if core.tx is not None:
                self.tx_abort(core, "illegal")  # restricted inside a transaction
            else:
                core.rip = rip + 1
                self.eexit(core)
        elif op == "regint":
            self.registrations[core.phys] = ENCLAVE_ID
            core.rip = rip + 1
        elif op == "sbe":
            core.frames[core.cssa].block = ins[1]
            core.rip = rip + 1
        elif op == "simaex":
            core.rip = rip + 1
            self.aex(core, "interrupt")
        elif op == "rstctx":
            slot = core.thread_slot
            base = self.image.meta["ctx_addr"][slot]
            self.translate(core, base >> 12, "r")
            vals = [self._mem_read(core, base + WORD * k) for k in range(10)]
            core.regs = vals[:8]
            core.rsp = vals[8]
            core.rip = vals[9]
            self.events.append((self.tick, "ctxrest", core.idx, tuple(vals)))
        else:
            raise InvariantViolation(f"cannot execute {ins!r}")
        self.icount += 1

    # -- attacker actions ----------------------------------------------------------

    def apply_attack(self, action):
        kind = action[0]
        if kind == "noop":
            return
        if kind == "evict":
            self.evict_page(action[1])
            return
        if kind == "setpte":
            _, vpn, fld, val = action
            pte = self.ptes.get(vpn)
            if pte is None:
                return
            if fld == "ad":
                pte.a = val
                pte.d = val
            else:
                setattr(pte, fld, val)
            self.events.append((self.tick, "setpte", -1, vpn, fld, val))
            return
        if kind == "pollad":
            snap = []
            for vpn in action[1]:
                pte = self.ptes.get(vpn)
                if pte is not None:
                    snap.append((vpn, pte.a, pte.d))
            self._observe(("ad", tuple(snap)))
            return
        if kind == "probe":
            self._observe(("walks", tuple(self.walkbuf)))
            del self.walkbuf[:]
            return
        if kind == "thrash":
            _, set_idx, count = action
            main = self.cores[self.main_core]
            sib = main.sib
            if sib is None:
                return
            core = self.cores[sib]
            if core.mode == ENCLAVE_ID:
                return
            nsets = self.platform.tlb_sets
            for k in range(count):
                vpn = UNTRUSTED_BASE_VPN + (set_idx % nsets) + k * nsets
                self.translate(core, vpn, "r")
            return
        if kind == "int":
            self.interrupt(self.cores[action[1]])
            return
        raise InvariantViolation(f"unknown attack action {action!r}")

    # -- schedule runner -------------------------------------------------------------

    def run(self, schedule, strategy=None, strict=True):
        turn = 0
        cores = self.cores
        for ent in schedule:
            if self.app_done or self.nonterm:
                break
            k = ent[0]
            if k == "c":
                self._step_core(cores[ent[1]])
            elif k == "i":
                self.interrupt(cores[ent[1]])
            elif k == "a":
                if strategy is not None:
                    act = strategy(turn, self.trace, self.view)
                    turn += 1
                    self.apply_attack(act)
            elif k == "x":
                c = cores[ent[1]]
                if c.tx is not None:
                    self.tx_abort(c, "conflict")
            else:
                raise InvariantViolation(f"bad schedule entry {ent!r}")
            self.tick += 1
        if self.nonterm:
            status = "non_termination"
        elif self.app_done:
            status = "completed"
        elif strict:
            raise ScheduleExhausted(f"program not finished after {self.tick} ticks")
        else:
            status = "truncated"
        return RunResult(
            status=status,
            ticks=self.tick,
            result=self.result,
            icount=self.icount,
            counts=dict(self.counts),
        )


def _alu(op, a, b):
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mov":
        return b
    if op == "and":
        return a & b
    if op == "or":
        return a | b
    if op == "xor":
        return a ^ b
    if op == "mul":
        return a * b
    if op == "shl":
        return a << b
    if op == "shr":
        return a >> b
    if op == "eq":
        return 1 if a == b else 0
    if op == "lt":
        return 1 if a < b else 0
    raise InvariantViolation(f"bad alu op {op!r}")


# -- serialization ------------------------------------------------------------------


def format_events(events):
    lines = []
    for ev in events:
        tick, kind, core = ev[0], ev[1], ev[2]
        rest = " ".join(str(x) for x in ev[3:])
        lines.append(f"{tick:6d} {kind:8s} core={core} {rest}".rstrip())
    return lines


def format_trace(trace):
    return [repr(obs) for obs in trace]


def quiet_schedule(n_ticks, cores=(0,)):
    """Round-robin core steps with no attacker or interrupt entries."""
    base = [("c", c) for c in cores]
    return list(itertools.islice(itertools.cycle(base), n_ticks))
