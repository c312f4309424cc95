"""Attacker strategies over the page-granular side channels.

An attacker strategy is a deterministic script mapping (turn index, the
observation trace so far, the OS view) to one action. The machine executes
actions on attacker ticks and appends the attacker-visible projection of
what happened to the observation trace; nothing in an observation carries
enclave register or memory contents, and faults are page-granular.

Actions:
  ("evict", vpn)                 swap out an EPC page (IPI + AEX first)
  ("setpte", vpn, field, value)  tamper with an untrusted page-table entry;
                                 field in {present, w, x, a, d, ad}
  ("pollad", (vpns...))          snapshot accessed/dirty bits, no interruption
  ("probe",)                     collect the page-walk set since last probe
  ("thrash", set_idx, count)     untrusted TLB pressure from the HT sibling
  ("int", core)                  inject an interrupt
  ("noop",)

Observations (appended by the machine):
  ("fault", vpn, access, cause)  page-granular fault report
  ("exit", cause)                AEX-class enclave exit (interrupt, paired,
                                 tsx_abort); synchronous returns are silent
  ("ad", ((vpn, a, d), ...))     accessed/dirty snapshot
  ("walks", (vpns...))           page-walk / pte-write set, in order
  ("ts", tick)                   only when the timing side channel is enabled
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class AttackerStrategy:
    name: str
    script: object          # callable(turn, trace, view) -> action
    # trace_free scripts ignore the trace argument's content; the
    # state-merging exhaustive explorer requires that property
    trace_free: bool = True


def resolve_targets(image, attack_targets):
    out = {}
    for kind, refs in attack_targets.items():
        vpns = []
        for ref in refs:
            vpns.extend(image.resolve_target(ref))
        out[kind] = vpns
    return out


def builtin_strategies(image, targets, platform):
    """The seven standard strategies, bound to a loaded image's layout."""
    data_vpns = sorted(image.layout["data_vpn"].values())
    evict = list(targets.get("evict") or data_vpns[:1])
    watch = list(targets.get("watch") or evict)
    field_for = {
        vpn: ("x" if image.ptes[vpn].x else "w") for vpn in evict
    }
    nsets = platform.tlb_sets
    ways = platform.tlb_ways
    watch_t = tuple(watch)

    def page_fault_evict(turn, trace, view):
        if turn % 3 == 0:
            return ("evict", evict[(turn // 3) % len(evict)])
        return ("noop",)

    def rights_reduce(turn, trace, view):
        if turn % 3 == 0:
            vpn = evict[(turn // 3) % len(evict)]
            return ("setpte", vpn, field_for[vpn], 0)
        return ("noop",)

    def ad_poller(turn, trace, view):
        if turn % 2 == 0:
            return ("setpte", watch[(turn // 2) % len(watch)], "ad", 0)
        return ("pollad", watch_t)

    def walk_prober(turn, trace, view):
        return ("probe",)

    def single_stepper(turn, trace, view):
        return ("int", 0)

    def sibling_thrasher(turn, trace, view):
        vpn = watch[turn % len(watch)]
        return ("thrash", vpn % nsets, ways)

    subs = [page_fault_evict, rights_reduce, ad_poller, walk_prober,
            single_stepper, sibling_thrasher]

    def composite(turn, trace, view):
        return subs[turn % len(subs)](turn // len(subs), trace, view)

    return [
        AttackerStrategy("page-fault-evict", page_fault_evict),
        AttackerStrategy("rights-reduce", rights_reduce),
        AttackerStrategy("ad-poller", ad_poller),
        AttackerStrategy("walk-prober", walk_prober),
        AttackerStrategy("single-stepper", single_stepper),
        AttackerStrategy("sibling-thrasher", sibling_thrasher),
        AttackerStrategy("composite", composite),
    ]


def strategy_by_name(strategies, name):
    for s in strategies:
        if s.name == name:
            return s
    raise KeyError(f"unknown strategy {name!r}; have "
                   f"{[s.name for s in strategies]}")


OBSERVATION_KINDS = ("fault", "exit", "ad", "walks", "ts")


def observation_wellformed(obs):
    """Structural no-content rule: page numbers, causes, bits, ticks only."""
    kind = obs[0]
    if kind == "fault":
        return (len(obs) == 4 and isinstance(obs[1], int)
                and obs[2] in ("r", "w", "x")
                and obs[3] in ("not_present", "rights", "epcm_mismatch"))
    if kind == "exit":
        return len(obs) == 2 and obs[1] in ("interrupt", "paired", "tsx_abort")
    if kind == "ad":
        return len(obs) == 2 and all(
            len(t) == 3 and t[1] in (0, 1) and t[2] in (0, 1) for t in obs[1])
    if kind == "walks":
        return len(obs) == 2 and all(isinstance(v, int) for v in obs[1])
    if kind == "ts":
        return len(obs) == 2 and isinstance(obs[1], int)
    return False
