"""Command-line front end.

Commands:
    run        execute a scenario, writing a report JSON and timeline CSV
    compare    run blocking-full / async-full / async-PEC regimes side by side
    crashtest  hammer the on-disk store with truncated writes
    dump-plan  export the shard plan of a scenario as JSON

Exit codes: 0 success, 1 crashtest failures, 2 validation error,
3 simulation/storage error.  The default store root for ``run`` comes from
the MOC_STORE_ROOT environment variable when --store disk is selected.
"""

from __future__ import annotations

import argparse
import json
import os
import random
import shutil
import sys
import tempfile
from pathlib import Path

from . import __version__
from .planner import (
    ADAPTIVE_PEC,
    BASELINE,
    EQUAL_PEC,
    STRATEGIES,
    PecConfig,
    bottleneck_workload,
    plan_adaptive,
    plan_baseline,
    plan_equal,
)
from .scenario import Scenario, scenario_from_dict, scenario_to_dict
from .simulator import (
    adaptive_configure,
    analytic_overhead,
    run as run_scenario,
    seconds_to_us,
    transfer_us,
    write_timeline_csv,
)
from .store import (
    CrashPoint,
    DiskStore,
    MemoryStore,
    StoreEntry,
    TruncatingInjector,
    entry_payload,
)
from .topology import SpecValidationError, build_layout

OUTPUT_KEYS = {"report", "timeline", "dump_plan"}


def _load_config(path: str) -> tuple[dict, dict]:
    """Parse a scenario file into (scenario doc, output options)."""
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise SpecValidationError("config path readable", f"{path} not found")
    except json.JSONDecodeError as exc:
        raise SpecValidationError("config is valid JSON", str(exc))
    if not isinstance(doc, dict):
        raise SpecValidationError("config is a JSON object",
                                  f"got {type(doc).__name__}")
    output = doc.pop("output", {}) or {}
    unknown = set(output) - OUTPUT_KEYS
    if unknown:
        raise SpecValidationError("output has only known keys",
                                  f"unknown keys {sorted(unknown)}")
    return doc, output


def _apply_overrides(doc: dict, args) -> None:
    if getattr(args, "seed", None) is not None:
        doc["rng_seed"] = args.seed
    if getattr(args, "i_ckpt", None) is not None:
        doc["i_ckpt"] = args.i_ckpt
    if getattr(args, "strategy", None) is not None:
        doc["strategy"] = args.strategy
    if getattr(args, "k_pec", None) is not None:
        pec = dict(doc.get("pec") or {})
        pec["k_pec"] = args.k_pec
        pec["k_snapshot"] = args.k_pec
        pec["k_persist"] = args.k_pec
        doc["pec"] = pec


def _parse_scenario(doc: dict) -> Scenario:
    return scenario_from_dict(doc)


def _plan_of(scenario: Scenario):
    layout = build_layout(scenario.model, scenario.parallel, scenario.cluster)
    if scenario.strategy == BASELINE:
        return layout, plan_baseline(layout)
    if scenario.strategy == EQUAL_PEC:
        return layout, plan_equal(layout, scenario.pec)
    if scenario.strategy == ADAPTIVE_PEC:
        return layout, plan_adaptive(layout, scenario.pec)
    return layout, plan_equal(layout)


def cmd_run(args) -> int:
    doc, output = _load_config(args.config)
    _apply_overrides(doc, args)
    scenario = _parse_scenario(doc)

    if args.store == "disk":
        root = args.store_root or os.environ.get("MOC_STORE_ROOT")
        if root is None:
            root = tempfile.mkdtemp(prefix="mocsim-store-")
        store = DiskStore(root)
    else:
        store = MemoryStore()

    report = run_scenario(scenario, store=store)

    stem = Path(args.config).stem
    report_path = Path(args.report or output.get("report") or f"{stem}-report.json")
    timeline_path = Path(args.timeline or output.get("timeline")
                         or f"{stem}-timeline.csv")
    report_path.write_text(json.dumps(report.to_json_dict(), sort_keys=True,
                                      indent=2) + "\n")
    write_timeline_csv(report, timeline_path)

    dump_target = args.dump_plan or output.get("dump_plan")
    if dump_target:
        _, plan = _plan_of(scenario)
        Path(dump_target).write_text(json.dumps(plan.to_json_dict(),
                                                sort_keys=True, indent=2) + "\n")

    print(f"report: {report_path}")
    print(f"timeline: {timeline_path}")
    print(f"O_ckpt total: {report.o_ckpt_total_us} us "
          f"(save {report.o_save_total_us}, restart {report.o_restart_total_us}, "
          f"lost {report.o_lost_total_us})")
    print(f"PLT average: {report.plt_average:.6f}")
    return 0


def _regime_scenarios(scenario: Scenario) -> list[tuple[str, Scenario]]:
    base = scenario_to_dict(scenario)

    def variant(**changes) -> Scenario:
        doc = json.loads(json.dumps(base))
        doc.update(changes)
        return scenario_from_dict(doc)

    if scenario.strategy in (EQUAL_PEC, ADAPTIVE_PEC) and scenario.pec is not None:
        moc = variant(async_checkpointing=True)
    else:
        proposal = adaptive_configure(scenario)
        moc = variant(strategy=ADAPTIVE_PEC, async_checkpointing=True,
                      pec={"k_pec": proposal.pec.k_pec,
                           "selection": proposal.pec.selection,
                           "k_snapshot": proposal.pec.k_snapshot,
                           "k_persist": proposal.pec.k_persist})
    return [
        ("blocking-full", variant(strategy=BASELINE, pec=None, dynamic_k=None,
                                  async_checkpointing=False)),
        ("base-async", variant(strategy=BASELINE, pec=None, dynamic_k=None,
                               async_checkpointing=True)),
        ("moc-async", moc),
    ]


def _checkpoint_durations(scenario: Scenario) -> tuple[int, int]:
    """(snapshot, persist) bottleneck durations in us, worst phase."""
    _, plan = _plan_of(scenario)
    worst = max(bottleneck_workload(plan, p)[1] for p in range(plan.period))
    return (transfer_us(worst, scenario.cluster.snapshot_bandwidth),
            transfer_us(worst, scenario.cluster.persist_bandwidth))


def cmd_compare(args) -> int:
    doc, _ = _load_config(args.config)
    _apply_overrides(doc, args)
    scenario = _parse_scenario(doc)

    rows = []
    measured: dict[str, float] = {}
    for name, variant in _regime_scenarios(scenario):
        report = run_scenario(variant, keep_timeline=False)
        snap_us, persist_us = _checkpoint_durations(variant)
        n_ckpt = max(1, report.checkpoints_triggered)
        o_save_per_ckpt = report.o_save_total_us / n_ckpt
        ckpt_work = snap_us + persist_us
        overlap = 100.0 * (1.0 - min(1.0, o_save_per_ckpt / ckpt_work)) if ckpt_work else 100.0
        measured[name] = o_save_per_ckpt
        rows.append((name,
                     report.end_time_us / max(1, report.iterations_executed) / 1e6,
                     report.o_save_total_us / 1e6,
                     o_save_per_ckpt / 1e6,
                     overlap,
                     report.min_feasible_i_ckpt or 0,
                     report.o_ckpt_total_us / 1e6))

    header = (f"{'regime':<14} {'iter_time_s':>12} {'O_save_s':>10} "
              f"{'stall/ckpt_s':>13} {'overlap_%':>10} {'min_Ickpt':>10} {'O_ckpt_s':>10}")
    print(header)
    print("-" * len(header))
    for name, iter_s, osave, stall, overlap, mini, ockpt in rows:
        print(f"{name:<14} {iter_s:>12.6f} {osave:>10.3f} {stall:>13.6f} "
              f"{overlap:>10.1f} {mini:>10d} {ockpt:>10.3f}")

    verdict = analytic_overhead(
        o_save_full_us=measured["base-async"], i_ckpt_full=scenario.i_ckpt,
        o_save_moc_us=measured["moc-async"], i_ckpt_moc=scenario.i_ckpt,
        iter_time_us=seconds_to_us(scenario.cluster.fb_time)
        + seconds_to_us(scenario.cluster.update_time),
        failure_rate=scenario.cluster.failure_rate,
        o_restart_us=seconds_to_us(scenario.cluster.restart_time),
        i_total=scenario.i_total)
    print(f"analytic: O_ckpt_full={verdict.o_ckpt_full_us / 1e6:.3f}s "
          f"O_ckpt_moc={verdict.o_ckpt_moc_us / 1e6:.3f}s "
          f"moc_wins={verdict.moc_wins}")
    return 0


def _crashtest_entries() -> list[StoreEntry]:
    entries = []
    for i in range(6):
        key = f"ew.L0.E{i}" if i < 4 else f"neo.r{i - 4}"
        entries.append(StoreEntry(key, rank=i % 2, unit_key=key, start=0, stop=64))
    return entries


def cmd_crashtest(args) -> int:
    root = Path(args.root or os.environ.get("MOC_STORE_ROOT")
                or tempfile.mkdtemp(prefix="mocsim-crashtest-"))
    rng = random.Random(args.seed)
    entries = _crashtest_entries()
    failures = 0
    for trial in range(args.trials):
        trial_dir = root / f"trial{trial:05d}"
        store = DiskStore(trial_dir)
        store.write_version(1, iteration=10, checkpoint_index=0, entries=entries)
        total = store.serialized_size(2, 20, 1, entries)
        budget = rng.randint(0, total + 1)
        crashed = False
        try:
            store.write_version(2, iteration=20, checkpoint_index=1,
                                entries=entries,
                                injector=TruncatingInjector(budget))
        except CrashPoint:
            crashed = True
        expected = 1 if crashed else 2
        try:
            newest = store.newest_complete()
            ok = newest == expected
            if ok:
                content = store.load_checkpoint(newest)
                iteration = 10 if newest == 1 else 20
                ok = all(content[e.store_key]
                         == entry_payload(e.store_key, newest, iteration)
                         for e in entries)
        except Exception:
            ok = False
        if not ok:
            failures += 1
            print(f"trial {trial}: FAIL (budget={budget}, crashed={crashed})")
        shutil.rmtree(trial_dir, ignore_errors=True)
    print(f"crashtest: {args.trials} trials, {failures} failures")
    return 0 if failures == 0 else 1


def cmd_dump_plan(args) -> int:
    doc, output = _load_config(args.config)
    _apply_overrides(doc, args)
    scenario = _parse_scenario(doc)
    _, plan = _plan_of(scenario)
    text = json.dumps(plan.to_json_dict(), sort_keys=True, indent=2) + "\n"
    target = args.output or output.get("dump_plan")
    if target:
        Path(target).write_text(text)
        print(f"plan: {target}")
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mocsim",
        description="Fault-tolerance checkpointing simulator for MoE training")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_overrides(p):
        p.add_argument("--seed", type=int, help="override rng_seed")
        p.add_argument("--i-ckpt", dest="i_ckpt", type=int,
                       help="override checkpoint interval")
        p.add_argument("--k-pec", dest="k_pec", type=int,
                       help="override K (sets k_pec, k_snapshot, k_persist)")
        p.add_argument("--strategy", choices=STRATEGIES, help="override strategy")

    p_run = sub.add_parser("run", help="run a scenario")
    p_run.add_argument("config")
    add_overrides(p_run)
    p_run.add_argument("--report", help="report JSON path")
    p_run.add_argument("--timeline", help="timeline CSV path")
    p_run.add_argument("--dump-plan", dest="dump_plan", help="plan JSON path")
    p_run.add_argument("--store", choices=("memory", "disk"), default="memory",
                       help="checkpoint store backend (default: memory)")
    p_run.add_argument("--store-root", dest="store_root",
                       help="disk store root (default: $MOC_STORE_ROOT)")
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare",
                           help="compare blocking / async-full / async-PEC regimes")
    p_cmp.add_argument("config")
    add_overrides(p_cmp)
    p_cmp.set_defaults(func=cmd_compare)

    p_crash = sub.add_parser("crashtest", help="crash-inject the disk store")
    p_crash.add_argument("--root", help="scratch directory (default: "
                                        "$MOC_STORE_ROOT or a temp dir)")
    p_crash.add_argument("--trials", type=int, default=100)
    p_crash.add_argument("--seed", type=int, default=0)
    p_crash.set_defaults(func=cmd_crashtest)

    p_plan = sub.add_parser("dump-plan", help="export a scenario's shard plan")
    p_plan.add_argument("config")
    add_overrides(p_plan)
    p_plan.add_argument("-o", "--output", help="write JSON here instead of stdout")
    p_plan.set_defaults(func=cmd_dump_plan)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SpecValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # simulation/storage failures
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
