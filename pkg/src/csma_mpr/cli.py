"""Command-line front end: ``csma-mpr <subcommand> ...``.

Every output carries a manifest (argv, resolved config, seeds, version,
timestamp) as ``#``-prefixed header lines in CSV or a ``manifest`` key in
JSON.  ``csma-mpr rerun FILE`` replays the stored argv.

Exit codes: 0 success, 2 configuration error, 3 computation error,
4 infeasible design.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import io
import json
import logging
import math
import os
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import delay, meanfield as mf, phy, presets
from .errors import ConfigError, CsmaMprError, InfeasibleError
from .model import load_scenario, scenario_to_dict
from .sim import SimConfig, run_simulation, write_trace

EXIT_OK, EXIT_CONFIG, EXIT_COMPUTE, EXIT_INFEASIBLE = 0, 2, 3, 4
MANIFEST_PREFIX = "# manifest: "

log = logging.getLogger("csma_mpr")


class UsageError(Exception):
    pass


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CSMA_MPR_THREADS", "1")))
    except ValueError:
        return 1


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


def _format_cell(v) -> str:
    v = _plain(v)
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


def render(rows: list[dict], manifest: dict, fmt: str) -> str:
    if fmt == "json":
        return json.dumps({"manifest": _plain(manifest), "rows": _plain(rows)},
                          indent=1, sort_keys=False) + "\n"
    buf = io.StringIO()
    buf.write(MANIFEST_PREFIX + json.dumps(_plain(manifest), sort_keys=True) + "\n")
    columns: list[str] = []
    for r in rows:
        columns += [k for k in r if k not in columns]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_format_cell(r.get(c, "")) for c in columns])
    return buf.getvalue()


def read_manifest(path) -> dict:
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        return json.loads(text)["manifest"]
    for line in text.splitlines():
        if line.startswith(MANIFEST_PREFIX):
            return json.loads(line[len(MANIFEST_PREFIX):])
    raise ConfigError(f"{path}: no manifest header")


def data_rows(path) -> list[str]:
    """Output content with the manifest stripped, for reproducibility checks."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        return [json.dumps(json.loads(text)["rows"])]
    return [l for l in text.splitlines() if not l.startswith("#")]


def emit(args, tables: dict[str, list[dict]], manifest: dict, prefix: str | None = None) -> None:
    fmt = args.format
    ext = "json" if fmt == "json" else "csv"
    if args.out is None:
        for name, rows in tables.items():
            if len(tables) > 1:
                sys.stdout.write(f"# table: {name}\n")
            sys.stdout.write(render(rows, manifest, fmt))
        return
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prefix = prefix or args.command
    paths = {name: str(out / f"{prefix}_{name}.{ext}") for name in tables}
    manifest = dict(manifest, outputs=sorted(paths.values()))
    for name, rows in tables.items():
        Path(paths[name]).write_text(render(rows, manifest, fmt))
        log.info("wrote %s", paths[name])


def _manifest(args, argv, **extra) -> dict:
    return {"subcommand": args.command, "argv": list(argv), "version": _version(),
            "timestamp": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
            **extra}


def _int_list(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        if "-" in part.strip()[1:]:
            a, b = part.split("-", 1)
            out += list(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return out


def _count(text: str) -> int:
    """Non-negative integer, also written like 1e6."""
    try:
        x = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number") from None
    if x < 0 or x != int(x):
        raise argparse.ArgumentTypeError(f"{text!r} is not a non-negative integer")
    return int(x)


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",")]


# -- subcommands ------------------------------------------------------------

def cmd_analyze(args, argv):
    s = load_scenario(args.config)
    eq = mf.solve_equilibrium(s, allow_fallback=args.allow_fallback)
    diag = {k: v for k, v in eq.to_record().items() if not k.startswith(("rho_", "gamma_root"))}
    rows = []
    if eq.state == mf.State.UNSTABLE:
        rows.append(dict(diag))
    for i, (g, rho) in enumerate(zip(eq.gamma_roots, eq.rho_solutions)):
        reports = {}
        if eq.state == mf.State.STABLE and s.mode == "finite":
            reports = {r.klass: r for r in delay.delay_report(s, rho)}
        for v in range(s.V):
            row = {"solution": i + 1, "class": v + 1, "gamma_root": g,
                   "lambda": float(s.arrival_rates[v]), "rho": float(rho[v])}
            if v in reports:
                row["service_delay"] = reports[v].service_delay
                row["total_delay"] = reports[v].total_delay
            row.update(diag)
            rows.append(row)
    emit(args, {"equilibrium": rows}, _manifest(args, argv, config=scenario_to_dict(s)))
    return EXIT_OK


def cmd_simulate(args, argv):
    s = load_scenario(args.config)
    seeds = _int_list(args.seeds)
    cfgs = [SimConfig(s, args.horizon, args.warmup, seed, trace=args.trace is not None,
                      buffer_cap=args.buffer_cap) for seed in seeds]
    for c in cfgs:
        if c.horizon <= c.warmup_slots or c.warmup_slots < 0:
            raise ConfigError(f"horizon={c.horizon} must exceed warmup={c.warmup_slots}")
    workers = min(_threads(), len(cfgs))
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as pool:
            reports = list(pool.map(run_simulation, cfgs))
    else:
        reports = [run_simulation(c) for c in cfgs]
    rows = []
    for rep in reports:
        for r in rep.rows():
            r["fraction_idle_superslots"] = rep.fraction_idle_superslots
            rows.append(r)
        if args.trace is not None:
            write_trace(f"{args.trace}.seed{rep.seed}.csv", rep.trace)
    if len(reports) > 1:
        for v in range(s.V):
            vals = {k: np.array([getattr(rep.classes[v], k) for rep in reports])
                    for k in ("throughput", "utilization_hat", "mean_service_delay",
                              "mean_total_delay")}
            row = {"class": v + 1, "seed": "mean"}
            for k, x in vals.items():
                row[k] = float(np.mean(x))
                row[f"{k}_across_seed_se"] = float(np.std(x, ddof=1) / math.sqrt(len(x)))
            rows.append(row)
    hist = reports[0].attempt_histogram
    manifest = _manifest(args, argv, config=scenario_to_dict(s), seeds=seeds,
                         horizon=args.horizon, warmup=cfgs[0].warmup_slots,
                         attempt_histogram_seed0=hist[:int(np.max(np.nonzero(hist)[0], initial=0)) + 1])
    emit(args, {"simulation": rows}, manifest)
    return EXIT_OK


def cmd_qprob(args, argv):
    workers = _threads()
    loss = tuple(_float_list(args.lattice_loss)) if args.lattice_loss else None
    if args.table1:
        rows = phy.table1(args.samples, args.seed, args.a_radius, workers)
    else:
        users = _int_list(args.users)
        if min(users) < 1:
            raise ConfigError(f"L must be >= 1, got {args.users}")
        decoders = list(phy.Decoder) if args.decoder == "all" else [phy.Decoder(args.decoder)]
        rows = []
        for d in decoders:
            cfg = phy.PhyConfig(args.snr_db, args.K, args.rate, d, args.samples, args.seed,
                                args.a_radius, loss)
            for L in users:
                est = phy.estimate_q(cfg, L, workers)
                rows.append({"decoder": d.value, "snr_db": args.snr_db, "K": args.K,
                             "R": args.rate, "L": L, "q_hat": est.q,
                             "ci_half_width": est.half_width, "samples": args.samples,
                             "seed": args.seed, "failures": est.failures,
                             "degenerate_ci": est.half_width == 0.0})
    emit(args, {"qprob": rows}, _manifest(args, argv, seed=args.seed, samples=args.samples))
    return EXIT_OK


def cmd_design(args, argv):
    s = load_scenario(args.config)
    targets = _float_list(args.targets)
    try:
        res = delay.design_tx_probs(s, targets, literal=args.literal)
    except InfeasibleError as exc:
        eq = mf.solve_equilibrium(s, allow_fallback=True)
        raise InfeasibleError(f"{exc}; stability diagnostics: "
                              f"{json.dumps(_plain(eq.to_record()))}") from exc
    rows = [{"class": v + 1, "lambda": float(s.arrival_rates[v]), "delay_target": targets[v],
             "attempt_rate": float(res.attempt_rates[v]), "min_tx_prob": float(res.min_tx_probs[v]),
             "feasible": bool(res.feasible[v]), "p_idle": res.p_idle} for v in range(s.V)]
    emit(args, {"design": rows}, _manifest(args, argv, config=scenario_to_dict(s),
                                           literal=args.literal))
    if not np.all(res.feasible):
        bad = [v + 1 for v in range(s.V) if not res.feasible[v]]
        print(f"error [INFEASIBLE]: classes {bad} need a transmit probability above 1",
              file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_reproduce(args, argv):
    name = args.preset or args.name
    if name not in presets.PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(presets.PRESETS)}")
    seeds = _int_list(args.seeds)
    tables, notes = presets.run_preset(name, args.horizon, seeds[0], _threads(), args.samples)
    emit(args, tables, _manifest(args, argv, preset=name, seed=seeds[0], horizon=args.horizon,
                                 samples=args.samples, choices=notes), prefix=name)
    return EXIT_OK


def cmd_rerun(args, argv):
    manifest = read_manifest(args.file)
    stored = list(manifest["argv"])
    if args.out is not None:
        stored = _replace_flag(stored, "--out", args.out)
    return main(stored)


def _replace_flag(argv, flag, value):
    out, skip = [], False
    for i, a in enumerate(argv):
        if skip:
            skip = False
            continue
        if a == flag:
            skip = True
            continue
        if a.startswith(flag + "="):
            continue
        out.append(a)
    return out + [flag, value]


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csma-mpr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", help="output directory (default: stdout)")
        sp.add_argument("--format", choices=("csv", "json"), default="csv")
        return sp

    a = common(sub.add_parser("analyze", help="equilibrium, stability region label and delays"))
    a.add_argument("--config", required=True)
    a.add_argument("--allow-fallback", action="store_true",
                   help="grid-scan rate functions not certified unimodal")
    a.set_defaults(func=cmd_analyze)

    s = common(sub.add_parser("simulate", help="slot-level protocol simulation"))
    s.add_argument("--config", required=True)
    s.add_argument("--horizon", type=_count, default=1_000_000)
    s.add_argument("--warmup", type=_count, default=None, help="default: 10%% of horizon")
    s.add_argument("--seeds", default="1", help="comma list or ranges, e.g. 1,2,5-8")
    s.add_argument("--buffer-cap", type=int, default=None)
    s.add_argument("--trace", metavar="PREFIX", default=None,
                   help="write per-super-slot traces to PREFIX.seed<k>.csv")
    s.set_defaults(func=cmd_simulate)

    q = common(sub.add_parser("qprob", help="Monte Carlo MPR success probabilities"))
    q.add_argument("--snr-db", type=float, default=6.0)
    q.add_argument("--K", type=int, default=1)
    q.add_argument("--rate", type=float, default=1.0, help="message rate, bits per symbol")
    q.add_argument("--decoder", default="all", choices=["all"] + [d.value for d in phy.Decoder])
    q.add_argument("--users", default="1-2", help="values of L, e.g. 1-3")
    q.add_argument("--samples", type=_count, default=100_000)
    q.add_argument("--seed", type=int, default=1)
    q.add_argument("--a-radius", type=int, default=2)
    q.add_argument("--lattice-loss", metavar="G,MU", default=None)
    q.add_argument("--table1", action="store_true", help="run the three reference configurations")
    q.set_defaults(func=cmd_qprob)

    d = common(sub.add_parser("design", help="minimum transmit probabilities for delay targets"))
    d.add_argument("--config", required=True)
    d.add_argument("--targets", required=True, help="comma list of total-delay targets (slots)")
    d.add_argument("--literal", action="store_true",
                   help="use the T + c denominator variant of the bound")
    d.set_defaults(func=cmd_design)

    r = common(sub.add_parser("reproduce", help="canned parameter sweeps"))
    r.add_argument("name", nargs="?", help=", ".join(presets.PRESETS))
    r.add_argument("--preset", default=None)
    r.add_argument("--horizon", type=_count, default=1_000_000)
    r.add_argument("--seeds", default="1")
    r.add_argument("--samples", type=_count, default=20_000)
    r.set_defaults(func=cmd_reproduce)

    rr = sub.add_parser("rerun", help="replay the command recorded in an output's manifest")
    rr.add_argument("file")
    rr.add_argument("--out", default=None)
    rr.set_defaults(func=cmd_rerun)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except InfeasibleError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ConfigError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CsmaMprError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
