"""Command-line front end.

Subcommands: run a single schedule, explore schedules for leakage,
instrument a program with the transaction-splitting pass, simulate load
presets, and list the available pieces. Exit status 0 means everything
held, 1 means a checked property was violated, 2 means usage error.

A config file (ini-style, section [heisenlab]) can preset any long option;
explicit command-line flags win. HEISENLAB_SEED sets the default seed.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import os
import sys
from pathlib import Path

from .machine import InvariantViolation, Machine, PlatformConfig, load
from .program import SCENARIOS, build_scenario, emit_asm
from .defense_sw import TsxConfig
from .txsplit import TxSplitConfig, instrument
from . import eval as ev
from .attacker import builtin_strategies

STRATEGY_NAMES = ("page-fault-evict", "rights-reduce", "ad-poller",
                  "walk-prober", "single-stepper", "sibling-thrasher",
                  "composite")


def _env_seed():
    try:
        return int(os.environ.get("HEISENLAB_SEED", "0"), 0)
    except ValueError:
        return 0


def _add_common(p):
    p.add_argument("--scenario", default="genome",
                   help="scenario name, e.g. genome, otp, fib10, "
                        "straightline, tlbfill")
    p.add_argument("--defense", default="none",
                   choices=("none", "sw", "hw"))
    p.add_argument("--seed", type=int, default=None,
                   help="RNG seed (default: HEISENLAB_SEED or 0)")
    p.add_argument("--no-ht", action="store_true",
                   help="platform without hyperthreading")
    p.add_argument("--ht-attested", action="store_true",
                   help="hyperthreading disabled and attested")
    p.add_argument("--timestamps", action="store_true",
                   help="give the attacker a cycle-accurate clock")
    p.add_argument("--init-cntr", type=int, default=None,
                   help="apply the transaction-splitting pass with this "
                        "initial counter (sw defense)")
    p.add_argument("--func-skp", type=int, default=8,
                   help="skip functions smaller than this in the pass")
    p.add_argument("--emit", default="report",
                   choices=("log", "trace", "report", "csv"))
    p.add_argument("--out", default=None, metavar="DIR",
                   help="write artifacts into DIR instead of stdout")


def _platform(args):
    kw = {}
    if args.no_ht:
        kw["hyperthreading"] = False
    if args.ht_attested:
        kw["hyperthreading"] = False
        kw["ht_disabled_attested"] = True
    if args.timestamps:
        kw["timestamps"] = True
    return PlatformConfig(**kw)


def _txcfg(args):
    if args.init_cntr is None:
        return None
    return TxSplitConfig(init_cntr=args.init_cntr, func_skp=args.func_skp)


def _emit(args, name, text):
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text)
        print(out / name)
    else:
        print(text, end="" if text.endswith("\n") else "\n")


def _scenario(args):
    kw = {}
    if getattr(args, "bits", None) is not None:
        kw["bits"] = args.bits
    if getattr(args, "n", None) is not None:
        kw["n"] = args.n
    return build_scenario(args.scenario, **kw)


def cmd_run(args):
    platform = _platform(args)
    scenario = _scenario(args)
    image = ev.build_image(scenario, args.defense, platform, _txcfg(args))
    seed = args.seed if args.seed is not None else _env_seed()
    strategy = None
    if args.strategy and args.strategy != "none":
        strategy = next(s for s in builtin_strategies(
            image, ev.resolve_targets(image, scenario.attack_targets),
            platform) if s.name == args.strategy)
    entries = ev.schedule_alphabet(image, platform,
                                   attacker=strategy is not None,
                                   interrupts=args.interrupts)
    if strategy is None and not args.interrupts:
        from .machine import quiet_schedule
        cores = [e[1] for e in entries if e[0] == "c"]
        sched = quiet_schedule(args.max_ticks, cores=tuple(cores))
    else:
        probs = ev.mixed_probs(entries, p_attack=0.25 if strategy else 0.0,
                               p_int=0.10 if args.interrupts else 0.0,
                               p_conflict=0.0)
        sched = ev.random_schedule(ev._rng(seed, 0), args.max_ticks,
                                   entries, probs)
    m = Machine(image, platform, TsxConfig(), scenario.default_secret)
    res = m.run(sched, strategy.script if strategy else None, strict=False)
    report = {
        "scenario": scenario.name, "defense": args.defense,
        "strategy": args.strategy, "status": res.status,
        "result": res.result, "ticks": res.ticks,
        "instructions": res.icount, "counts": res.counts,
        "observations": len(m.trace),
        "protection": image.meta.get("sw_protection", ""),
    }
    if args.emit == "trace":
        _emit(args, "trace.txt",
              "\n".join(repr(o) for o in m.trace) + "\n")
    elif args.emit == "log":
        _emit(args, "events.txt",
              "\n".join(repr(e) for e in m.events) + "\n")
    else:
        _emit(args, "run.json", json.dumps(report, indent=2, default=str))
    return 0


def cmd_explore(args):
    platform = _platform(args)
    scenario = _scenario(args)
    seed = args.seed if args.seed is not None else _env_seed()
    if args.mode == "exhaustive":
        rep = ev.explore_exhaustive(
            scenario, args.defense, platform, depth=args.depth,
            tsx=TsxConfig(), txsplit_cfg=_txcfg(args))
    else:
        rep = ev.explore_random(
            scenario, args.defense, platform, seed=seed,
            n_schedules=args.samples, depth=args.schedule_depth,
            tsx=TsxConfig(), strategy_name=args.strategy,
            txsplit_cfg=_txcfg(args))
    if args.emit == "csv":
        import io
        import csv as _csv
        buf = io.StringIO()
        w = _csv.writer(buf)
        w.writerow(ev.CSV_HEADER)
        w.writerow(rep.csv_row())
        _emit(args, "explore.csv", buf.getvalue())
    else:
        _emit(args, "explore.json",
              json.dumps(rep.to_dict(), indent=2, default=str))
    return 0 if rep.traces_equal else 1


def cmd_instrument(args):
    scenario = _scenario(args)
    prog = scenario.program.copy()
    prog.meta["main_entry"] = scenario.main_entry
    prog.meta["main_args"] = tuple(scenario.main_args)
    cfg = TxSplitConfig(init_cntr=args.init_cntr or 500,
                        func_skp=args.func_skp)
    prog2, rep = instrument(prog, cfg)
    summary = {
        "scenario": scenario.name,
        "init_cntr": cfg.init_cntr, "func_skp": cfg.func_skp,
        "instrumented": list(rep.instrumented),
        "skipped": list(rep.skipped),
        "commit_sites": rep.commit_sites,
    }
    if args.emit == "log":
        _emit(args, "instrumented.asm", emit_asm(prog2))
    else:
        _emit(args, "instrument.json", json.dumps(summary, indent=2))
    return 0


def cmd_load_sim(args):
    platform = _platform(args)
    seed = args.seed if args.seed is not None else _env_seed()
    out = {}
    presets = ([args.preset] if args.preset else list(ev.LOAD_PRESETS))
    for name in presets:
        sim = ev.simulate_load(name, args.duration, seed)
        out[name] = {k: sim[k] for k in
                     ("interrupt_median", "conflict_median", "duration_s")}
    if args.scenario and args.defense != "none":
        scenario = _scenario(args)
        lp = dataclasses.replace(platform,
                                 seconds_per_tick=args.seconds_per_tick)
        for name in presets:
            m, res = ev.run_under_load(
                scenario, args.defense, lp, name, seed=seed,
                max_ticks=args.max_ticks, tsx=TsxConfig(),
                txsplit_cfg=_txcfg(args))
            out[name]["run"] = {
                "status": res.status, "ticks": res.ticks,
                "result": res.result,
                "aborts": {k: v for k, v in res.counts.items()
                           if k.startswith("abort")},
            }
    _emit(args, "load.json", json.dumps(out, indent=2, default=str))
    return 0


def cmd_list(args):
    info = {
        "scenarios": sorted(SCENARIOS) + ["fibN (fib5..fib25)"],
        "defenses": list(ev.DEFENSES),
        "strategies": list(STRATEGY_NAMES),
        "load_presets": {k: dataclasses.asdict(v)
                         for k, v in ev.LOAD_PRESETS.items()},
    }
    print(json.dumps(info, indent=2))
    return 0


def build_parser():
    ap = argparse.ArgumentParser(
        prog="heisenlab",
        description="deterministic enclave side-channel laboratory")
    ap.add_argument("--config", default=None,
                    help="ini file with [heisenlab] defaults")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="run one schedule")
    _add_common(p)
    p.add_argument("--strategy", default="none",
                   choices=("none",) + STRATEGY_NAMES)
    p.add_argument("--interrupts", action="store_true",
                   help="mix OS interrupts into the schedule")
    p.add_argument("--max-ticks", type=int, default=100_000)
    p.add_argument("--bits", type=int, default=None)
    p.add_argument("--n", type=int, default=None)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("explore", help="search schedules for trace leaks")
    _add_common(p)
    p.add_argument("--mode", default="random",
                   choices=("random", "exhaustive"))
    p.add_argument("--strategy", default=None,
                   choices=STRATEGY_NAMES)
    p.add_argument("--samples", type=int, default=1000,
                   help="random mode: number of schedules")
    p.add_argument("--schedule-depth", type=int, default=1500,
                   help="random mode: entries per schedule")
    p.add_argument("--depth", type=int, default=30,
                   help="exhaustive mode: tick depth")
    p.add_argument("--bits", type=int, default=None)
    p.add_argument("--n", type=int, default=None)
    p.set_defaults(fn=cmd_explore)

    p = sub.add_parser("instrument",
                       help="apply the transaction-splitting pass")
    _add_common(p)
    p.add_argument("--bits", type=int, default=None)
    p.add_argument("--n", type=int, default=None)
    p.set_defaults(fn=cmd_instrument)

    p = sub.add_parser("load-sim", help="simulate load presets")
    _add_common(p)
    p.add_argument("--preset", default=None,
                   choices=tuple(ev.LOAD_PRESETS))
    p.add_argument("--duration", type=int, default=60,
                   help="simulated seconds")
    p.add_argument("--max-ticks", type=int, default=400_000)
    p.add_argument("--seconds-per-tick", type=float, default=5e-9)
    p.set_defaults(fn=cmd_load_sim)

    p = sub.add_parser("list", help="list scenarios, strategies, presets")
    p.set_defaults(fn=cmd_list)
    return ap


def _apply_config(ap, argv):
    """Pre-parse --config and fold its [heisenlab] section into defaults."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    cp = configparser.ConfigParser()
    if not cp.read(known.config):
        ap.error(f"config file not found: {known.config}")
    if "heisenlab" not in cp:
        return
    defaults = {}
    for key, val in cp["heisenlab"].items():
        key = key.replace("-", "_")
        if val.lower() in ("true", "false"):
            defaults[key] = val.lower() == "true"
        else:
            try:
                defaults[key] = int(val, 0)
            except ValueError:
                try:
                    defaults[key] = float(val)
                except ValueError:
                    defaults[key] = val
    for action in ap._subparsers._group_actions:
        for sp in action.choices.values():
            sp.set_defaults(**{k: v for k, v in defaults.items()
                               if any(a.dest == k for a in sp._actions)})


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    ap = build_parser()
    _apply_config(ap, argv)
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except InvariantViolation as exc:
        print(f"property violation: {exc}", file=sys.stderr)
        return 1
    except ev.BudgetExceeded as exc:
        print(f"exploration budget exceeded: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
