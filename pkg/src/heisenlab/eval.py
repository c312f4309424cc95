"""Leakage evaluation: paired runs, schedule exploration, cost and load models.

The central property is observational determinism over the attacker trace:
for a fixed schedule and strategy, two runs that differ only in the secret
must produce identical observation traces. The evaluator runs such pairs in
lockstep over randomly sampled schedules (counter-based RNG, so every
schedule is reproducible from (seed, index)) and, for small scenarios, over
every interleaving up to a depth bound with state-hash deduplication.

Runs truncated by the schedule still yield a sound verdict: the pair shares
the schedule prefix, so comparing trace prefixes is exact up to that point.
Exploration is embarrassingly parallel across schedule indices; this
implementation maps sequentially and merges reports by pure reduction.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .machine import (Machine, PAGE, load, page_set_fits_tlb,
                      quiet_schedule)
from .program import wrap_plain
from .defense_sw import wrap_sw
from .defense_hw import (HwConfig, RESTART_ENTRY, attach_restart_runtime,
                         attach_runtime, rendezvous_scenario, wrap_hw)
from . import txsplit as txsplit_mod
from .attacker import builtin_strategies, resolve_targets

DEFENSES = ("none", "sw", "hw")
_U64 = (1 << 64) - 1


class BudgetExceeded(Exception):
    pass


# -- building ----------------------------------------------------------------


def build_program(scenario, defense, platform, txsplit_cfg=None,
                  hw_cfg=None, page_set=None):
    prog = scenario.program.copy()
    prog.meta["main_entry"] = scenario.main_entry
    prog.meta["main_args"] = tuple(scenario.main_args)
    if defense == "none":
        return wrap_plain(prog)
    if defense == "sw":
        if txsplit_cfg is not None:
            prog, _ = txsplit_mod.instrument(prog, txsplit_cfg)
        return wrap_sw(prog, platform, page_set)
    if defense == "hw":
        return wrap_hw(prog, platform, hw_cfg or HwConfig(page_set=page_set))
    raise ValueError(f"unknown defense {defense!r}; expected one of {DEFENSES}")


def build_image(scenario, defense, platform, txsplit_cfg=None,
                hw_cfg=None, page_set=None):
    prog = build_program(scenario, defense, platform, txsplit_cfg,
                         hw_cfg, page_set)
    image = load(prog, platform)
    attach_runtime(image)
    if image.meta.get("handler_entry") == RESTART_ENTRY:
        attach_restart_runtime(image)
    return image


def bound_strategies(image, scenario, platform):
    return builtin_strategies(
        image, resolve_targets(image, scenario.attack_targets), platform)


# -- trace comparison --------------------------------------------------------


def compare_traces(a, b):
    """(equal, divergence) where divergence = (index, obs_a, obs_b)."""
    n = min(len(a), len(b))
    for i in range(n):
        if a[i] != b[i]:
            return False, (i, a[i], b[i])
    if len(a) != len(b):
        return False, (n, a[n] if len(a) > n else None,
                       b[n] if len(b) > n else None)
    return True, None


@dataclass
class PairResult:
    equal: bool
    divergence: tuple | None
    status_a: str
    status_b: str
    result_a: object
    result_b: object
    trace_len: int


def run_pair(image, platform, strategy, schedule, secret_a, secret_b,
             tsx=None):
    """Run the same schedule+strategy against two secrets, compare traces."""
    script = strategy.script if strategy is not None else None
    ma = Machine(image, platform, tsx, secret_a)
    ma.disable_event_log()
    ra = ma.run(schedule, script, strict=False)
    mb = Machine(image, platform, tsx, secret_b)
    mb.disable_event_log()
    rb = mb.run(schedule, script, strict=False)
    equal, div = compare_traces(ma.trace, mb.trace)
    return PairResult(equal, div, ra.status, rb.status, ra.result, rb.result,
                      min(len(ma.trace), len(mb.trace)))


# -- schedules ---------------------------------------------------------------


def _rng(seed, index=0):
    return np.random.Generator(
        np.random.Philox(key=[seed & _U64, index & _U64]))


def schedule_alphabet(image, platform, attacker=True, interrupts=True,
                      conflicts=False):
    """Schedule entries that can do anything for this image."""
    cores = [0]
    if image.meta.get("guard_entry") is not None and platform.n_logical > 1:
        cores.append(image.meta.get("guard_core", 1))
    ents = [("c", c) for c in cores]
    if attacker:
        ents.append(("a",))
    if interrupts:
        ents.extend(("i", c) for c in cores)
    if conflicts:
        ents.append(("x", 0))
    return ents


def random_schedule(rng, length, entries, probs=None):
    idx = rng.choice(len(entries), size=length, p=probs)
    return [entries[i] for i in idx]


def mixed_probs(entries, p_attack=0.25, p_int=0.10, p_conflict=0.05):
    """Probability vector over a schedule alphabet, core steps get the rest."""
    kinds = [e[0] for e in entries]
    n_core = kinds.count("c")
    n_int = kinds.count("i")
    p = []
    p_attack = p_attack if "a" in kinds else 0.0
    p_conflict = p_conflict if "x" in kinds else 0.0
    p_int = p_int if n_int else 0.0
    rest = 1.0 - p_attack - p_int - p_conflict
    for k in kinds:
        if k == "c":
            p.append(rest / n_core)
        elif k == "a":
            p.append(p_attack)
        elif k == "i":
            p.append(p_int / n_int)
        else:
            p.append(p_conflict)
    return p


# -- reports -----------------------------------------------------------------


@dataclass
class LeakageReport:
    scenario: str
    defense: str
    strategy: str
    mode: str
    schedules: int = 0
    pairs: int = 0
    traces_equal: bool = True
    first_divergence: dict | None = None
    elapsed_s: float = 0.0
    notes: str = ""

    @property
    def first_divergence_index(self):
        return (self.first_divergence or {}).get("index")

    def csv_row(self):
        idx = self.first_divergence_index
        return [self.scenario, self.defense, self.strategy,
                self.schedules, self.traces_equal,
                "" if idx is None else idx]

    def to_dict(self):
        return {
            "scenario": self.scenario, "defense": self.defense,
            "strategy": self.strategy, "mode": self.mode,
            "schedules": self.schedules, "pairs": self.pairs,
            "traces_equal": self.traces_equal,
            "first_divergence": self.first_divergence,
            "elapsed_s": round(self.elapsed_s, 3), "notes": self.notes,
        }


CSV_HEADER = ["scenario", "defense", "strategy", "schedules", "equal",
              "first_divergence_index"]


def write_csv(path, reports):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for r in reports:
            w.writerow(r.csv_row())


def write_jsonl(path, records):
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r.to_dict() if hasattr(r, "to_dict") else r)
                    + "\n")


# -- random exploration --------------------------------------------------------


def explore_random(scenario, defense, platform, *, seed=0, n_schedules=1000,
                   depth=1500, tsx=None, strategies=None, strategy_name=None,
                   p_attack=0.25, p_int=0.10, p_conflict=0.0,
                   stop_on_divergence=True, txsplit_cfg=None, page_set=None):
    """Sample schedules; run every secret pair under each; compare traces.

    Strategies are cycled over schedule indices unless one is pinned by
    name. Schedule i is regenerated from Philox key (seed, i), so any
    divergence is replayable from the report alone.
    """
    t0 = time.monotonic()
    image = build_image(scenario, defense, platform, txsplit_cfg,
                        page_set=page_set)
    strategies = strategies or bound_strategies(image, scenario, platform)
    if strategy_name:
        strategies = [s for s in strategies if s.name == strategy_name]
        if not strategies:
            raise ValueError(f"unknown strategy {strategy_name!r}")
    entries = schedule_alphabet(image, platform,
                                conflicts=p_conflict > 0 and defense == "sw")
    probs = mixed_probs(entries, p_attack, p_int, p_conflict)
    rep = LeakageReport(scenario.name, defense,
                        strategy_name or "all", "random",
                        notes=image.meta.get("sw_protection", ""))
    for i in range(n_schedules):
        sched = random_schedule(_rng(seed, i), depth, entries, probs)
        strat = strategies[i % len(strategies)]
        rep.schedules += 1
        for pair_no, (sa, sb) in enumerate(scenario.secret_pairs):
            pr = run_pair(image, platform, strat, sched, sa, sb, tsx)
            rep.pairs += 1
            if not pr.equal:
                rep.traces_equal = False
                if rep.first_divergence is None:
                    i0, oa, ob = pr.divergence
                    rep.first_divergence = {
                        "schedule_index": i, "strategy": strat.name,
                        "pair": pair_no, "index": i0,
                        "obs_a": oa, "obs_b": ob, "seed": seed,
                    }
                if stop_on_divergence:
                    rep.elapsed_s = time.monotonic() - t0
                    return rep
    rep.elapsed_s = time.monotonic() - t0
    return rep


# -- exhaustive exploration ----------------------------------------------------


def _enabled(m, ent):
    """False for entries that provably leave the machine unchanged."""
    k = ent[0]
    if k == "i":
        return m.cores[ent[1]].mode == 1
    if k == "c":
        c = m.cores[ent[1]]
        return not (c.mode == 0 and c.rt_phase == "idle" and not c.rt_queue)
    return True


def _apply_entry(m, ent, script, turn):
    """Mirror Machine.run's dispatch for one schedule entry; returns turn."""
    if m.app_done or m.nonterm:
        return turn
    k = ent[0]
    if k == "c":
        m._step_core(m.cores[ent[1]])
    elif k == "i":
        m.interrupt(m.cores[ent[1]])
    elif k == "a":
        m.apply_attack(script(turn, m.trace, m.view))
        turn += 1
    elif k == "x":
        c = m.cores[ent[1]]
        if c.tx is not None:
            m.tx_abort(c, "conflict")
    m.tick += 1
    return turn


def explore_exhaustive(scenario, defense, platform, *, strategy=None,
                       depth=30, tsx=None, max_states=2_000_000,
                       include_interrupts=True, txsplit_cfg=None,
                       page_set=None):
    """Every interleaving of core steps, attacker turns and interrupts up to
    `depth` ticks, with deduplication on (state_a, state_b, attacker turn).

    Dedup is sound only when the strategy ignores trace content (all the
    built-ins do): merged nodes have pairwise-equal traces by construction,
    but unequal traces across nodes.
    """
    t0 = time.monotonic()
    image = build_image(scenario, defense, platform, txsplit_cfg,
                        page_set=page_set)
    if strategy is None:
        strategy = bound_strategies(image, scenario, platform)[-1]
    if not strategy.trace_free:
        raise ValueError("exhaustive exploration needs a trace-free strategy")
    entries = schedule_alphabet(image, platform,
                                interrupts=include_interrupts)
    rep = LeakageReport(scenario.name, defense, strategy.name, "exhaustive",
                        notes=image.meta.get("sw_protection", ""))
    states = 0
    for pair_no, (sa, sb) in enumerate(scenario.secret_pairs):
        ma = Machine(image, platform, tsx, sa)
        mb = Machine(image, platform, tsx, sb)
        ma.disable_event_log()
        mb.disable_event_log()
        frontier = [(ma, mb, 0, 0)]
        seen = {(ma.state_key(), mb.state_key(), 0, 0)}
        for _ in range(depth):
            nxt = []
            for (pa, pb, ta, tb) in frontier:
                for ent in entries:
                    if not (_enabled(pa, ent) or _enabled(pb, ent)):
                        continue
                    fa, fb = pa.fork(), pb.fork()
                    t2a = _apply_entry(fa, ent, strategy.script, ta)
                    t2b = _apply_entry(fb, ent, strategy.script, tb)
                    if fa.trace != fb.trace:
                        i, da, db = compare_traces(fa.trace, fb.trace)[1]
                        rep.traces_equal = False
                        rep.first_divergence = {
                            "pair": pair_no, "depth": fa.tick, "entry": ent,
                            "index": i, "obs_a": da, "obs_b": db,
                        }
                        rep.schedules = states
                        rep.elapsed_s = time.monotonic() - t0
                        return rep
                    done_a = fa.app_done or fa.nonterm
                    done_b = fb.app_done or fb.nonterm
                    if done_a and done_b:
                        continue
                    key = (fa.state_key(), fb.state_key(), t2a, t2b)
                    if key in seen:
                        continue
                    seen.add(key)
                    states += 1
                    if states > max_states:
                        raise BudgetExceeded(
                            f"{states} states at depth {fa.tick}")
                    nxt.append((fa, fb, t2a, t2b))
            frontier = nxt
            if not frontier:
                break
    rep.schedules = states
    rep.pairs = len(scenario.secret_pairs)
    rep.elapsed_s = time.monotonic() - t0
    return rep


# -- rendezvous protocol model check -------------------------------------------


@dataclass
class RendezvousReport:
    placement: str
    release_on_success: bool
    states: int = 0
    depth: int = 0
    successes: int = 0
    unsound_success: dict | None = None
    mismatch_refusals: int = 0
    deadlocks: int = 0
    completed_paths: int = 0
    both_succeeded: bool = False
    witness_out: tuple | None = None
    elapsed_s: float = 0.0

    @property
    def sound(self):
        return self.unsound_success is None and self.deadlocks == 0


def _success_rips(image):
    """rip of the unique success-return load in each rendezvous body."""
    out = {}
    for slot, fname in image.meta["rvz_funcs"].items():
        lo, hi = image.layout["func_rips"][fname]
        hits = [i for i in range(lo, hi) if image.code[i] == ("li", 0, 1)]
        if len(hits) != 1:
            raise ValueError(f"expected one success site in {fname}, "
                             f"found {len(hits)}")
        out[slot] = hits[0]
    return out


def model_check_rendezvous(platform, *, release_on_success=True,
                           guard_core=1, depth=96, max_states=400_000):
    """Explore every interleaving of the rendezvous micro-scenario.

    Monitors (per protocol side k, peer j):
      * erase: k writes -1 into j's id cell  ->  arm k, clear k's witness
      * announce: j writes its physical id into its own cell while k's core
        is also in enclave mode and k is armed  ->  witness for k
      * success: k executes its success-return  ->  witness must be present
    Interrupted sides restart the protocol from the top (the resume-hook
    discipline), so an armed erase is always the most recent one.
    A state counts as a deadlock only if no transition changes it.
    """
    t0 = time.monotonic()
    sc = rendezvous_scenario(release_on_success, guard_core)
    prog = sc.program.copy()
    image = load(prog, platform)
    attach_restart_runtime(image)
    cells = image.meta["rvz_cells"]
    id_cell = {s: cells["id"][s] for s in (0, 1)}
    succ_rip = _success_rips(image)
    core_of = {0: 0, 1: image.meta["guard_core"]}
    slot_of = {v: k for k, v in core_of.items()}
    out_addr = {s: image.resolve_target(("data", "rvzout"))[0] * PAGE + 8 * s
                for s in (0, 1)}
    placement = ("same-physical-core"
                 if platform.phys_of(core_of[0]) == platform.phys_of(core_of[1])
                 else "cross-physical-core")
    rep = RendezvousReport(placement, release_on_success)

    entries = [("c", core_of[0]), ("c", core_of[1]),
               ("i", core_of[0]), ("i", core_of[1])]
    m0 = Machine(image, platform)
    m0.disable_event_log()
    mon0 = (False, False, False, False)  # armed0, good0, armed1, good1
    frontier = [(m0, mon0)]
    seen = {(m0.state_key(include_walkbuf=False), mon0)}
    terminal_out = set()

    def step(m, mon, ent):
        armed = [mon[0], mon[2]]
        good = [mon[1], mon[3]]
        success_by = None
        if ent[0] == "c":
            cidx = ent[1]
            core = m.cores[cidx]
            k = slot_of[cidx]
            if core.mode and core.tx is None:
                ins = m.image.code[core.rip]
                if ins[0] == "wr":
                    addr, val = core.regs[ins[1]], core.regs[ins[2]]
                    j = 1 - k
                    if addr == id_cell[j] and val == -1:
                        armed[k], good[k] = True, False
                    elif addr == id_cell[k] and val != -1:
                        # k announces; witness for the peer j if j is armed
                        # and j's core is co-resident in enclave mode
                        if armed[j] and m.cores[core_of[j]].mode:
                            good[j] = True
                elif core.rip == succ_rip[k]:
                    success_by = k
        _apply_entry(m, ent, None, 0)
        return (armed[0], good[0], armed[1], good[1]), success_by

    for d in range(depth):
        nxt = []
        for (pm, pmon) in frontier:
            pkey = pm.state_key(include_walkbuf=False)
            succ_keys = []
            for ent in entries:
                if not _enabled(pm, ent):
                    continue
                f = pm.fork()
                mon2, success_by = step(f, pmon, ent)
                if success_by is not None:
                    rep.successes += 1
                    k = success_by
                    if not (pmon[1] if k == 0 else pmon[3]):
                        rep.unsound_success = {
                            "slot": k, "depth": f.tick, "monitor": pmon,
                        }
                        rep.states = len(seen)
                        rep.depth = d
                        rep.elapsed_s = time.monotonic() - t0
                        return rep
                key = (f.state_key(include_walkbuf=False), mon2)
                succ_keys.append(key)
                if f.app_done:
                    rep.completed_paths += 1
                    o = (f.memory.get(out_addr[0]), f.memory.get(out_addr[1]))
                    terminal_out.add(o)
                    continue
                if key in seen:
                    continue
                seen.add(key)
                if len(seen) > max_states:
                    raise BudgetExceeded(f"{len(seen)} states at depth {d}")
                nxt.append((f, mon2))
            if not pm.app_done and all(k[0] == pkey for k in succ_keys):
                rep.deadlocks += 1
        frontier = nxt
        rep.depth = d + 1
        if not frontier:
            break
    rep.states = len(seen)
    rep.mismatch_refusals = sum(1 for o in terminal_out if o[0] == 0)
    # Directed interrupt-free witnesses.
    # 1. Plain alternation: runs to completion (no deadlock when both
    #    siblings run uninterrupted).
    wm = Machine(image, platform)
    wm.disable_event_log()
    wr = wm.run([("c", core_of[s % 2]) for s in range(4000)], strict=False)
    if wr.status == "completed":
        rep.completed_paths += 1
        rep.witness_out = (wm.memory.get(out_addr[0]),
                           wm.memory.get(out_addr[1]))
    # 2. Joint success: the first eexit yanks the sibling via paired AEX, so
    #    for both result stores to land, alternate until side 0 has executed
    #    its store (is parked just before its sbe/eexit tail), then run the
    #    guard alone through its own store, then let either side exit.
    if (1, 1) not in terminal_out and rep.witness_out != (1, 1):
        post_store = {}
        for slot, fname in (((0, "side0"), (1, "side1"))
                            if "side0" in image.layout["func_rips"]
                            else ()):
            lo, hi = image.layout["func_rips"][fname]
            wrs = [i for i in range(lo, hi) if image.code[i][0] == "wr"]
            post_store[slot] = wrs[0] + 1 if wrs else None
        if post_store.get(0) is not None and post_store.get(1) is not None:
            wm = Machine(image, platform)
            wm.disable_event_log()
            c0, c1 = core_of[0], core_of[1]

            def _phase(sides, stop):
                for s in range(600):
                    ent = ("c", sides[s % len(sides)])
                    if _enabled(wm, ent):
                        _apply_entry(wm, ent, None, 0)
                    if stop() or wm.app_done:
                        return
            _phase([c0, c1], lambda: (wm.cores[c0].mode
                                      and wm.cores[c0].rip == post_store[0]))
            _phase([c1], lambda: (not wm.cores[c1].mode
                                  or wm.cores[c1].rip == post_store[1]))
            _phase([c0, c1], lambda: False)
            out = (wm.memory.get(out_addr[0]), wm.memory.get(out_addr[1]))
            if wm.app_done:
                rep.completed_paths += 1
            if out == (1, 1):
                rep.witness_out = out
    rep.both_succeeded = ((1, 1) in terminal_out
                          or rep.witness_out == (1, 1))
    rep.elapsed_s = time.monotonic() - t0
    return rep


# -- context integrity (resume hook / flattened handler) -----------------------


@dataclass
class ContextReport:
    runs: int = 0
    violations: list = field(default_factory=list)
    max_ssa_frames: int = 0
    hook_restarts: int = 0
    elapsed_s: float = 0.0

    @property
    def intact(self):
        return not self.violations


def _check_ctx_events(machine, expect_result, result, violations, tag):
    if result != expect_result:
        violations.append((tag, "result", result, expect_result))
    last_save = {}
    n_save = n_rest = 0
    for ev in machine.events:
        if ev[1] == "ctxsave":
            last_save[ev[2]] = ev[3]
            n_save += 1
        elif ev[1] == "ctxrest":
            n_rest += 1
            want = last_save.get(ev[2])
            if want != ev[3]:
                violations.append((tag, "ctx", ev[3], want))
        elif ev[1] == "handler_misuse":
            violations.append((tag, "handler_misuse"))
    if n_rest > n_save:
        violations.append((tag, "restore_without_save", n_save, n_rest))


def explore_context_integrity(platform, *, n=200, nested_depth=5,
                              hook_offsets="all", max_ticks=60_000):
    """Single interrupt at every tick of a straight-line protected run, plus
    bursts that re-interrupt the resume hook (nested) up to `nested_depth`.

    Checks, per run: final result unchanged, every restored context equals
    the latest saved one, no handler misuse, and the SSA stack never needs
    a third frame.
    """
    from .program import build_scenario

    t0 = time.monotonic()
    sc = build_scenario("straightline", n=n)
    image = build_image(sc, "hw", platform)
    lo, hi = image.meta["hook_ranges"][0]
    rep = ContextReport()

    base = Machine(image, platform, secret=sc.default_secret)
    rb = base.run(quiet_schedule(max_ticks, cores=(0, 1)), strict=False)
    if rb.status != "completed":
        raise BudgetExceeded("reference run did not finish; raise max_ticks")
    expect = rb.result
    total = rb.ticks

    def drive(first_at, nest_plan, tag):
        """Round-robin cores 0/1; one interrupt at tick `first_at`; then one
        interrupt each time core 0 has executed `off` hook instructions,
        per the nest plan."""
        m = Machine(image, platform, secret=sc.default_secret)
        plan = list(nest_plan)
        hook_seen = 0
        pending = plan.pop(0) if plan else None
        rr = 0
        for tick in range(max_ticks):
            if m.app_done or m.nonterm:
                break
            c0 = m.cores[0]
            if tick == first_at:
                m.interrupt(c0)
            elif pending is not None and c0.mode and lo <= c0.rip < hi:
                if hook_seen == pending:
                    m.interrupt(c0)
                    rep.hook_restarts += 1
                    hook_seen = 0
                    pending = plan.pop(0) if plan else None
                else:
                    hook_seen += 1
                    m._step_core(c0)
            else:
                m._step_core(m.cores[rr])
                rr ^= 1
            m.tick += 1
            rep.max_ssa_frames = max(rep.max_ssa_frames,
                                     *(c.cssa for c in m.cores))
        rep.runs += 1
        status = ("completed" if m.app_done else
                  "non_termination" if m.nonterm else "truncated")
        if status != "completed":
            rep.violations.append((tag, "status", status))
            return
        _check_ctx_events(m, expect, m.result, rep.violations, tag)

    hook_len = hi - lo
    offsets = range(hook_len) if hook_offsets == "all" else hook_offsets
    for p in range(total):
        drive(p, [], ("single", p))
    mid = total // 2
    for off in offsets:
        drive(mid, [off], ("nested1", mid, off))
    for depth in range(2, nested_depth + 1):
        for p in range(0, total, 7):
            plan = [(p + i) % hook_len for i in range(depth)]
            drive(p, plan, ("nested", depth, p))
    rep.elapsed_s = time.monotonic() - t0
    return rep


# -- cost model ----------------------------------------------------------------


@dataclass(frozen=True)
class CostModel:
    """Per-page preload costs (microseconds) plus a fixed call overhead.

    An executable page costs the most to preload (it is touched through the
    instruction port), a read-only data page slightly more than a writable
    one. Every entry into protected execution — initial entry, re-entry
    after an interrupt, and every commit-and-reopen — pays one preload of
    the configured page set.
    """

    x_page_us: float = 0.030
    ro_page_us: float = 0.008
    rw_page_us: float = 0.007
    base_call_us: float = 1.0

    def classify(self, image, sid=None):
        sid = sid or image.meta.get("preload_set", "default")
        n = {"x": 0, "ro": 0, "rw": 0}
        for t in image.page_sets[sid]:
            n[{"touchx": "x", "touchr": "ro", "touchrw": "rw"}[t[0]]] += 1
        return n

    def preload_us(self, image, sid=None):
        n = self.classify(image, sid)
        return (n["x"] * self.x_page_us + n["ro"] * self.ro_page_us
                + n["rw"] * self.rw_page_us)

    def estimate_us(self, image, counts, sid=None):
        """Estimated wall cost of one protected call given run counters."""
        pre = self.preload_us(image, sid)
        entries = counts.get("eenter", 0) + counts.get("eresume", 0)
        commits = counts.get("xend", 0)
        return {
            "preload_us": pre,
            "entries": entries,
            "commits": commits,
            "pages": self.classify(image, sid),
            "total_us": self.base_call_us + (entries + commits) * pre,
        }


# -- load model ----------------------------------------------------------------


@dataclass(frozen=True)
class LoadPreset:
    name: str
    interrupts_per_s: int
    conflicts_per_s: int


LOAD_PRESETS = {
    "idle": LoadPreset("idle", 980, 44),
    "writes": LoadPreset("writes", 12_854, 67),
    "iostress": LoadPreset("iostress", 20_282, 44),
    "llvm": LoadPreset("llvm", 79_067, 27_913),
}

_PRESET_ORDER = ("idle", "writes", "iostress", "llvm")


def simulate_load(preset, duration_s=60, seed=0):
    """Per-second Poisson draws of interrupt and conflict counts."""
    if isinstance(preset, str):
        preset = LOAD_PRESETS[preset]
    pi = _PRESET_ORDER.index(preset.name) if preset.name in _PRESET_ORDER else 7
    rng = _rng(seed, pi)
    ints = rng.poisson(preset.interrupts_per_s, duration_s)
    confs = rng.poisson(preset.conflicts_per_s, duration_s)
    return {
        "preset": preset.name,
        "duration_s": duration_s,
        "interrupt_median": float(np.median(ints)),
        "conflict_median": float(np.median(confs)),
        "interrupts": ints.tolist(),
        "conflicts": confs.tolist(),
    }


def load_schedule(preset, image, platform, length, seed=0):
    """Schedule whose interrupt/conflict density matches a load preset at
    this platform's tick duration; remaining ticks round-robin the cores."""
    if isinstance(preset, str):
        preset = LOAD_PRESETS[preset]
    p_int = preset.interrupts_per_s * platform.seconds_per_tick
    p_conf = preset.conflicts_per_s * platform.seconds_per_tick
    entries = schedule_alphabet(image, platform, attacker=False,
                                conflicts=True)
    probs = mixed_probs(entries, p_attack=0.0, p_int=p_int,
                        p_conflict=p_conf)
    return random_schedule(_rng(seed, 1 << 32), length, entries, probs)


def run_under_load(scenario, defense, platform, preset, *, seed=0,
                   max_ticks=600_000, tsx=None, txsplit_cfg=None):
    image = build_image(scenario, defense, platform, txsplit_cfg)
    sched = load_schedule(preset, image, platform, max_ticks, seed)
    m = Machine(image, platform, tsx, scenario.default_secret)
    res = m.run(sched, strict=False)
    return m, res
