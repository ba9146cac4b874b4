"""Command line front end.

Subcommands:

* simulate   -- run a scenario (availability study and/or app workload);
                writes metrics.csv, latency.csv, summary.csv and, with
                --trace, trace.log.
* whitespace -- run the channel-detection study; writes occupancy.csv
                and ngsm_compare.csv.
* idbench    -- identity lookup latency under load; writes
                idbench_samples.csv and idbench_summary.csv.
* apps       -- one-shot marketplace command against a seeded demo
                catalog, e.g. 'SEARCH maize'.

Seed precedence: --seed beats GREENLINKS_SEED beats 0.  Exit codes:
0 success, 2 configuration error (bad flags or scenario), 3 runtime
invariant violation.  All floats in artifacts use 6 significant digits,
and a rerun with the same inputs is byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import random
import statistics
import sys
from pathlib import Path

from . import apps as apps_mod
from .errors import GreenLinksError, ScenarioError
from .scenario import load_scenario
from .simcore import METRICS, MonteCarloResult, Simulation, identity_latency_bench
from .whitespace import (
    Detector,
    DetectorConfig,
    RadioField,
    compare_ngsm,
    make_phones,
    organic_traffic,
    run_detection,
    volunteer_traffic,
)

DEFAULT_HORIZON = 3600.0


def fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return "" if value is None else str(value)


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(cell) for cell in row])


def resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("GREENLINKS_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ScenarioError(f"GREENLINKS_SEED must be an integer, got {env!r}")
    return 0


def out_dir(args) -> Path:
    path = Path(args.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ----------------------------------------------------------------- simulate


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    seed = resolve_seed(args)
    runs = args.runs
    if runs < 1:
        raise ScenarioError("--runs must be at least 1")
    horizon = args.horizon
    if horizon is None:
        horizon = DEFAULT_HORIZON if "traffic" in scenario else None
    outdir = out_dir(args)

    results = []
    for i in range(runs):
        sim = Simulation(scenario, seed=seed + i, priority_queue=args.priority_queue)
        if "workload" in scenario:
            workload = apps_mod.Workload(sim, scenario["workload"])
            workload.schedule()
        results.append(sim.run(horizon, drain=True))

    metric_rows = []
    ledgers = [r.ledger for r in results if r.ledger is not None]
    if len(ledgers) == 1:
        metric_rows = ledgers[0].csv_rows()
    elif ledgers:
        n_intervals = len(ledgers[0].intervals)
        for idx in range(n_intervals):
            means = []
            for metric in METRICS:
                vals = [lg.intervals[idx].rate(*METRICS[metric]) for lg in ledgers]
                means.append(statistics.fmean(vals))
            metric_rows.append((idx, *means))
    write_csv(
        outdir / "metrics.csv",
        ["interval", *METRICS.keys()],
        metric_rows,
    )

    latency_rows = []
    for i, result in enumerate(results):
        prefix = f"r{i}-" if runs > 1 else ""
        for rec in result.latency:
            latency_rows.append(
                (
                    prefix + rec.request_id,
                    rec.klass,
                    rec.app_type,
                    rec.size,
                    rec.enqueued_at,
                    rec.delivered_at,
                )
            )
    write_csv(
        outdir / "latency.csv",
        ["request_id", "class", "app_type", "bytes", "enqueued_at", "delivered_at"],
        latency_rows,
    )

    summary_rows = []
    violations = 0
    if ledgers:
        per_run = {m: [lg.overall(m) for lg in ledgers] for m in METRICS}
        mc = MonteCarloResult(
            runs=len(ledgers),
            per_run=per_run,
            containment_violations=sum(lg.containment_violations for lg in ledgers),
        )
        violations = mc.containment_violations
        for metric in METRICS:
            summary_rows.append(
                (metric, mc.mean(metric), mc.stdev(metric), mc.ci95(metric))
            )
    summary_rows.append(("containment_violations", float(violations), 0.0, 0.0))
    write_csv(outdir / "summary.csv", ["metric", "mean", "stdev", "ci95"], summary_rows)

    if args.trace:
        with open(outdir / "trace.log", "w") as fh:
            for event in results[0].trace.events:
                if event[0] == "link":
                    _, at, link_id, state = event
                    fh.write(f"{at:.6f} LINK {link_id} {state}\n")
                else:
                    _, at, src, dst, service = event
                    fh.write(f"{at:.6f} ATTEMPT {src} {dst} {service}\n")

    for result in results:
        if result.ledger is not None:
            lg = result.ledger
            print(
                "run: "
                + " ".join(f"{m}={lg.overall(m):.6g}" for m in METRICS)
            )
    if violations:
        print(
            f"containment violated on {violations} attempts", file=sys.stderr
        )
        return 3
    return 0


# ------------------------------------------------------------- whitespace


WHITESPACE_DEFAULTS = {
    "users": 25,
    "volunteers": 5,
    "volunteer_period_s": 60.0,
    "organic_period_s": 300.0,
    "band": {"first": 1, "last": 124},
    "truth_occupied": [3, 17, 29, 41, 58, 66, 82, 97, 110],
    "n_free": 40,
    "t_free_s": 600.0,
    "evidence_ttl_s": 86400.0,
    "radius": 0.25,
    "ngsm": {
        "user_counts": [10, 20, 30, 40, 50, 60, 70, 80, 90, 100],
        "ratios": [0.1, 0.2],
    },
}


def cmd_whitespace(args) -> int:
    scenario = load_scenario(args.scenario) if args.scenario else {}
    cfg = dict(WHITESPACE_DEFAULTS)
    section = scenario.get("whitespace", {})
    for key, value in section.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            merged = dict(cfg[key])
            merged.update(value)
            cfg[key] = merged
        else:
            cfg[key] = value
    seed = resolve_seed(args)
    outdir = out_dir(args)

    band = cfg["band"]
    det_config = DetectorConfig(
        first_arfcn=int(band["first"]),
        last_arfcn=int(band["last"]),
        n_free=int(cfg["n_free"]),
        t_free_s=float(cfg["t_free_s"]),
        evidence_ttl_s=float(cfg["evidence_ttl_s"]),
    )
    channels = det_config.last_arfcn - det_config.first_arfcn + 1
    truth = [a for a in cfg["truth_occupied"] if det_config.first_arfcn <= a <= det_config.last_arfcn]
    detector = Detector(det_config)
    users = int(cfg["users"])
    volunteers = int(cfg["volunteers"])
    converged = None
    collisions = 0
    if users + volunteers == 0:
        print("warning: no reporting traffic; the whole band stays unknown", file=sys.stderr)
    else:
        rng = random.Random(seed)
        field_model = RadioField.place(truth, rng, radius=float(cfg["radius"]))
        phones = make_phones(users + volunteers, rng)
        rate = users / cfg["organic_period_s"] + (
            volunteers / cfg["volunteer_period_s"] if volunteers else 0.0
        )
        groups = math.ceil(channels / det_config.slots)
        batches = groups * (det_config.n_free + det_config.t_free_s * rate) * 2 + 400
        organic_n = int(batches * (users / cfg["organic_period_s"]) / rate) + 50 if users else 0
        organic = organic_traffic(users, cfg["organic_period_s"], organic_n, rng) if users else []
        horizon = organic[-1][0] if organic else batches / rate
        extra = volunteer_traffic(volunteers, cfg["volunteer_period_s"], horizon)
        merged_traffic = sorted(
            organic + [(at, users + v) for at, v in extra], key=lambda e: (e[0], e[1])
        )
        run = run_detection(
            merged_traffic,
            detector,
            field_model,
            phones,
            random.Random(seed + 1),
            truth_occupied=set(truth),
        )
        converged = run.converged_at
        collisions = run.collisions
        if converged is None:
            print("warning: band not fully classified before traffic ran out", file=sys.stderr)

    rows = detector.occupancy_rows()
    write_csv(outdir / "occupancy.csv", ["arfcn", "verdict", "t_verdict"], rows)
    occupied = sum(1 for _, v, _ in rows if v == "occupied")
    free = sum(1 for _, v, _ in rows if v == "free")
    unknown = sum(1 for _, v, _ in rows if v == "unknown")
    when = f"{converged:.6g} s" if converged is not None else "never"
    print(
        f"occupancy: {occupied} occupied, {free} free, {unknown} unknown; "
        f"converged at {when}; serving collisions {collisions}"
    )

    compare_rows = []
    ngsm = cfg.get("ngsm")
    if ngsm:
        for users_n in ngsm["user_counts"]:
            for ratio in ngsm["ratios"]:
                t_ngsm, t_vol = compare_ngsm(
                    users_n,
                    ratio,
                    users_n,
                    seed=seed,
                    organic_period_s=float(cfg["organic_period_s"]),
                    volunteer_period_s=float(cfg["volunteer_period_s"]),
                )
                compare_rows.append(
                    (users_n, ratio, t_ngsm / 60.0, t_vol / 60.0)
                )
    write_csv(
        outdir / "ngsm_compare.csv",
        ["users", "ratio", "t_ngsm", "t_volunteer"],
        compare_rows,
    )
    return 0


# ---------------------------------------------------------------- idbench


IDBENCH_DEFAULTS = {
    "models": [
        {"model": "central", "servers": 1},
        {"model": "dht", "servers": 10},
    ],
    "load_rps": 150.0,
    "duration_s": 60.0,
    "service_s": 0.01,
    "latency_s": 0.1,
}


def cmd_idbench(args) -> int:
    scenario = load_scenario(args.scenario) if args.scenario else {}
    cfg = dict(IDBENCH_DEFAULTS)
    cfg.update(scenario.get("identity_bench", {}))
    seed = resolve_seed(args)
    outdir = out_dir(args)
    sample_rows = []
    summary_rows = []
    for spec in cfg["models"]:
        bench = identity_latency_bench(
            spec["model"],
            int(spec["servers"]),
            float(cfg["load_rps"]),
            duration_s=float(cfg["duration_s"]),
            service_s=float(cfg["service_s"]),
            latency_s=float(cfg["latency_s"]),
            seed=seed,
        )
        for i, sample in enumerate(bench.samples):
            sample_rows.append(
                (bench.model, bench.servers, i, sample.arrival, sample.server, sample.sojourn)
            )
        sojourns = bench.sojourns()
        summary_rows.append(
            (
                bench.model,
                bench.servers,
                len(sojourns),
                bench.quantile(0.5),
                bench.quantile(0.95),
                statistics.fmean(sojourns) if sojourns else 0.0,
            )
        )
        print(
            f"{bench.model}/{bench.servers}: n={len(sojourns)} "
            f"p50={bench.quantile(0.5):.6g}s p95={bench.quantile(0.95):.6g}s"
        )
    write_csv(
        outdir / "idbench_samples.csv",
        ["model", "servers", "index", "arrival", "server", "sojourn"],
        sample_rows,
    )
    write_csv(
        outdir / "idbench_summary.csv",
        ["model", "servers", "count", "p50", "p95", "mean"],
        summary_rows,
    )
    return 0


# ------------------------------------------------------------------- apps


def cmd_apps(args) -> int:
    command = apps_mod.parse_command(args.command)
    scenario = (
        load_scenario(args.scenario)
        if args.scenario
        else {
            "nodes": [{"id": 0, "role": "cloud"}, {"id": 1, "role": "level2"}],
            "zones": [{"id": "z0", "nodes": [1], "gateway": 1, "prefix": "10.0"}],
            "links": [{"id": "b0", "a": 0, "b": 1, "profile": "hsdpa"}],
        }
    )
    seed = resolve_seed(args)
    sim = Simulation(scenario, seed=seed)
    node = min(n for n in sim.topology.nodes if n != sim.topology.cloud_id)
    local = sim.local(node)
    market = apps_mod.Marketplace(local, sim.identity)
    me = "233299990000"
    sim.identity.issue_identity(node, me)
    # A small deterministic catalog so one-shot commands have something
    # to hit.
    demo = [("maize", 10, 2.5), ("maize", 4, 3.0), ("cassava", 7, 1.75)]
    for i, (item, qty, price) in enumerate(demo):
        imsi = f"23329000000{i:02d}"
        sim.identity.issue_identity(node, imsi)
        market.sell(imsi, item, qty, price)
    sim.poke(node)
    sim.engine.run_until(None)

    try:
        if command["op"] == "sell":
            listing, ack = market.sell(
                me, command["item"], command["qty"], command["price"]
            )
            sim.poke(node)
            sim.engine.run_until(None)
            receipt = next(
                r for r in local.records if r.request_id == ack.request_id
            )
            print(f"queued {listing.listing_id}: {listing.item} "
                  f"{listing.qty}@{listing.price:g}")
            print(f"receipt at {receipt.delivered_at:.6g}s")
        elif command["op"] == "buy":
            value, at = market.buy(me, command["listing_id"])
            print(
                f"bought {value['listing_id']}: {value['qty']}x {value['item']} "
                f"at {value['price']:g} from {value['seller_number']}"
            )
            print(f"confirmed at {at:.6g}s")
        else:
            listings, chunks, at = market.search(me, command["item"])
            if not listings:
                print(f"no listings for {command['item']}")
            for chunk in chunks:
                print(chunk)
            print(f"answered at {at:.6g}s")
    except GreenLinksError as exc:
        print(f"{type(exc).__name__}: {exc}")
    return 0


# ------------------------------------------------------------------ entry


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="greenlinks",
        description="Rural cellular edge simulator: availability, sync latency, "
        "whitespace detection and identity benchmarks.",
    )
    sub = parser.add_subparsers(dest="command_name", required=True)

    def common(p, scenario_required):
        p.add_argument(
            "--scenario", required=scenario_required, help="scenario JSON file"
        )
        p.add_argument("--seed", type=int, default=None, help="base RNG seed")
        p.add_argument("--out", default="out", help="output directory")

    p = sub.add_parser("simulate", help="dual-architecture availability run")
    common(p, True)
    p.add_argument("--runs", type=int, default=1, help="independent replications")
    p.add_argument("--horizon", type=float, default=None, help="sim seconds")
    p.add_argument("--trace", action="store_true", help="write trace.log")
    p.add_argument(
        "--priority-queue",
        action="store_true",
        help="sms-class requests jump file-class ones at request boundaries",
    )
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("whitespace", help="channel detection study")
    common(p, False)
    p.set_defaults(func=cmd_whitespace)

    p = sub.add_parser("idbench", help="identity lookup latency bench")
    common(p, False)
    p.set_defaults(func=cmd_idbench)

    p = sub.add_parser("apps", help="one-shot marketplace command")
    common(p, False)
    p.add_argument("command", help="e.g. 'SELL maize 10 2.5' or 'SEARCH maize'")
    p.set_defaults(func=cmd_apps)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except GreenLinksError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
