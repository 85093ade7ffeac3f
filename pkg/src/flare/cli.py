"""Command-line entry point: ``flare tpn ...`` and ``flare sim ...``.

Exit codes: 0 success, 1 analysis finished with findings, 2 usage or input
error, 3 resource cap reached.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from flare import __version__
from flare.deadlock import (
    CASE_COLUMNS, CampaignParams, GeneratedCase, SystemSpec, generate_case, iter_rows, loglog_slope,
    run_campaign, summarize,
)
from flare.diagnosis import MAX_ITER, MU_MIN, RHO_MIN, rank_components, verdicts_csv
from flare.errors import FlareError, StateSpaceOverflow
from flare.ranking import exam_score, extract_error_traces, rank_transitions
from flare.simbed import (
    ComponentSystem, accuracy_csv, diagnose_system, evaluate_accuracy, generate_system,
    marginal, passes, simulate,
)
from flare.tpn import DEFAULT_MAX_STATES, TimePetriNet, build_reachability_graph, find_violation_states

EXIT_OK, EXIT_FINDINGS, EXIT_USAGE, EXIT_CAP = 0, 1, 2, 3

log = logging.getLogger("flare")


class UsageError(Exception):
    pass


def int_range(text: str) -> tuple[int, int]:
    """``"5..20"`` or ``"7"``."""
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            lo, hi = int(a), int(b)
        else:
            lo = hi = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or LO..HI, got {text!r}")
    if lo > hi:
        raise argparse.ArgumentTypeError(f"empty range {text!r}")
    return lo, hi


def number_list(text: str) -> list:
    """``"1..4"`` (integer steps), ``"1,1.5,2"`` or a single number."""
    if ".." in text:
        lo, hi = int_range(text)
        return list(range(lo, hi + 1))
    try:
        vals = [float(x) if "." in x else int(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number list, got {text!r}")
    return vals


def seed_arg(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 bits")
    return v


def _write(args, text: str):
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read {path}: {exc}")


def _csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------- tpn

def cmd_tpn_gen(args) -> int:
    spec = SystemSpec(args.p, args.r, args.faults, args.seed, density=args.density,
                      interval_range=args.intervals, max_width=args.max_width)
    case = generate_case(spec)
    _write(args, case.to_json())
    return EXIT_OK


def cmd_tpn_analyze(args) -> int:
    doc = _read_json(args.input)
    case = None
    if "net" in doc:
        case = GeneratedCase.from_dict(doc)
        net = case.net
    else:
        net = TimePetriNet.from_dict(doc)
    graph = build_reachability_graph(net, args.max_states)
    if args.emit_dot:
        Path(args.emit_dot).write_text(graph.to_dot())
    violations = find_violation_states(graph, args.property)
    traces = [t for t in extract_error_traces(graph, violations, time_abstract=not args.raw_traces) if len(t)]
    meta = {
        "input": os.path.basename(args.input),
        "property": args.property,
        "seed": doc.get("seed"),
        "states": graph.n_states,
        "edges": graph.n_edges,
        "violations": len(violations),
    }
    if not traces:
        ranking = None
    else:
        ranking = rank_transitions(traces, model_transitions=len(net.transitions))
        if case is not None and case.faulty_transitions:
            res = exam_score(ranking, case.faulty_transitions)
            meta.update(exam=res.exam_score, rank_first=res.rank_of_first_fault,
                        total_ranked=res.total_ranked, model_transitions=len(net.transitions))
    if args.format == "json":
        if ranking is None:
            text = json.dumps({"schema": 1, **meta, "n_traces": 0, "ranking": []}, indent=2) + "\n"
        else:
            text = ranking.to_json(**meta)
    else:
        header = [f"{k}={v}" for k, v in meta.items()]
        if ranking is None:
            text = "".join(f"# {h}\n" for h in header) + "rank,transition,cf,tc_mean,itc\n"
        else:
            text = ranking.to_csv(header)
    _write(args, text)
    return EXIT_FINDINGS if ranking is not None else EXIT_OK


def _campaign_params(args) -> CampaignParams:
    return CampaignParams(
        p_range=args.p, r_range=args.r, fault_range=args.faults, cases=args.cases,
        seed=args.seed, max_states=args.max_states, density=args.density,
        interval_range=args.intervals, max_width=args.max_width,
    )


def cmd_tpn_campaign(args) -> int:
    params = _campaign_params(args)
    results = run_campaign(params, workers=args.workers)
    summary = summarize(results)
    header = [f"flare tpn campaign seed={args.seed} p={args.p[0]}..{args.p[1]} r={args.r[0]}..{args.r[1]} "
              f"faults={args.faults[0]}..{args.faults[1]} cases={args.cases} max_states={args.max_states}"]
    if args.format == "json":
        doc = {
            "schema": 1,
            "seed": args.seed,
            "params": {k: list(v) if isinstance(v, tuple) else v for k, v in vars(params).items()},
            "cases": [dict(zip(CASE_COLUMNS, r.row())) for r in results],
            "summary": summary,
            "loglog_slope": loglog_slope(results),
        }
        _write(args, json.dumps(doc, indent=2) + "\n")
    else:
        _write(args, "".join(f"# {h}\n" for h in header) + _csv(iter_rows(results)))
    if args.summary:
        cols = sorted({k for row in summary for k in row}, key=lambda k: (k != "faults", k))
        rows = [cols] + [[row.get(c, "") for c in cols] for row in summary]
        Path(args.summary).write_text("".join(f"# {h}\n" for h in header) + _csv(rows))
    return EXIT_OK


# ---------------------------------------------------------------- sim

def cmd_sim_gen(args) -> int:
    system = generate_system(args.components, args.avg_io, args.faults, args.seed, args.failure_probability)
    _write(args, system.to_json())
    return EXIT_OK


def _load_values(path, system: ComponentSystem) -> np.ndarray:
    try:
        rows = [r for r in csv.reader(Path(path).read_text().splitlines()) if r and not r[0].startswith("#")]
        values = np.array([[float(x) for x in r] for r in rows[1:]])
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read data {path}: {exc}")
    if values.ndim != 2 or values.shape[1] != system.n_variables:
        raise UsageError(f"data must have {system.n_variables} columns")
    return values


def cmd_sim_analyze(args) -> int:
    system = ComponentSystem.from_dict(_read_json(args.input))
    if args.data:
        passed = passes(system, _load_values(args.data, system))
    else:
        passed = simulate(system, args.cases, args.seed).passed
    # the diagnosis only sees pass/fail data and the blinded architecture
    result = diagnose_system(system.blinded(), passed, args.seed, args.mu_min, args.rho_min, args.max_iter)
    verdicts = {cid: v for cid, (_, v) in result.items()}
    ranked = rank_components(system.ids, verdicts)
    if args.dump_hmm:
        d = Path(args.dump_hmm)
        d.mkdir(parents=True, exist_ok=True)
        for cid, (cm, _) in result.items():
            (d / f"{cid}.json").write_text(cm.to_json())
    if args.format == "json":
        doc = {"schema": 1, "seed": args.seed, "input": os.path.basename(args.input),
               "verdicts": [vars(r) for r in ranked]}
        _write(args, json.dumps(doc, indent=2) + "\n")
    else:
        _write(args, verdicts_csv(ranked, [f"input={os.path.basename(args.input)}", f"seed={args.seed}"]))
    return EXIT_FINDINGS if any(r.suspect for r in ranked) else EXIT_OK


def cmd_sim_eval(args) -> int:
    rows = evaluate_accuracy(args.components, args.avg_io, args.cases, args.repeats, args.seed,
                             args.faults, args.max_iter, args.workers)
    if args.format == "json":
        doc = {"schema": 1, "seed": args.seed, "rows": rows,
               "by_components": marginal(rows, "components"), "by_avg_io": marginal(rows, "avg_io")}
        _write(args, json.dumps(doc, indent=2) + "\n")
    else:
        _write(args, accuracy_csv(rows, [f"flare sim eval seed={args.seed} cases={args.cases} faults={args.faults}"]))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flare", description="Fault localization for TPN models and component systems.")
    p.add_argument("--version", action="version", version=f"flare {__version__}")
    top = p.add_subparsers(dest="area", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=seed_arg, default=0)
    common.add_argument("--out", help="output path (default: stdout)")
    common.add_argument("--format", choices=("csv", "json"), default="csv")

    tpn = top.add_parser("tpn", help="Time Petri net fault ranking").add_subparsers(dest="cmd", required=True)
    gen_opts = argparse.ArgumentParser(add_help=False)
    gen_opts.add_argument("--density", type=float, default=0.5, help="probability a process uses a resource")
    gen_opts.add_argument("--intervals", type=int_range, default=(1, 10), help="eft range, e.g. 1..10")
    gen_opts.add_argument("--max-width", type=int, default=0, help="max lft - eft")

    g = tpn.add_parser("gen", parents=[common, gen_opts], help="generate one deadlock case")
    g.add_argument("--p", type=int, required=True)
    g.add_argument("--r", type=int, required=True)
    g.add_argument("--faults", type=int, default=1)
    g.set_defaults(func=cmd_tpn_gen)

    a = tpn.add_parser("analyze", parents=[common], help="rank transitions of a net or generated case")
    a.add_argument("input")
    a.add_argument("--property", default="deadlock", help='"deadlock" or a marking expression')
    a.add_argument("--max-states", type=int, default=DEFAULT_MAX_STATES)
    a.add_argument("--emit-dot", metavar="PATH")
    a.add_argument("--raw-traces", action="store_true", help="count firing edges of timed states")
    a.set_defaults(func=cmd_tpn_analyze)

    c = tpn.add_parser("campaign", parents=[common, gen_opts], help="EXAM campaign over generated cases")
    c.add_argument("--p", type=int_range, default=(5, 20))
    c.add_argument("--r", type=int_range, default=(5, 20))
    c.add_argument("--faults", type=int_range, default=(1, 9))
    c.add_argument("--cases", type=int, default=100, help="cases per fault count")
    c.add_argument("--max-states", type=int, default=100_000)
    c.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    c.add_argument("--summary", metavar="PATH", help="also write per-fault-count aggregates")
    c.set_defaults(func=cmd_tpn_campaign)

    sim = top.add_parser("sim", help="component HMM diagnosis").add_subparsers(dest="cmd", required=True)
    sg = sim.add_parser("gen", parents=[common], help="generate a component system")
    sg.add_argument("--components", type=int, required=True)
    sg.add_argument("--avg-io", type=float, required=True)
    sg.add_argument("--faults", type=int, default=1)
    sg.add_argument("--failure-probability", type=float, default=0.7)
    sg.set_defaults(func=cmd_sim_gen)

    search = argparse.ArgumentParser(add_help=False)
    search.add_argument("--max-iter", type=int, default=MAX_ITER)
    search.add_argument("--cases", type=int, default=100, help="test cases per system")

    sa = sim.add_parser("analyze", parents=[common, search], help="diagnose the components of a system")
    sa.add_argument("input")
    sa.add_argument("--data", help="CSV of variable values; simulated from --seed when omitted")
    sa.add_argument("--mu-min", type=float, default=MU_MIN)
    sa.add_argument("--rho-min", type=float, default=RHO_MIN)
    sa.add_argument("--dump-hmm", metavar="DIR")
    sa.set_defaults(func=cmd_sim_analyze)

    se = sim.add_parser("eval", parents=[common, search], help="accuracy over generated systems")
    se.add_argument("--components", type=number_list, default=[5, 10, 15, 20])
    se.add_argument("--avg-io", type=number_list, default=[1, 2, 3])
    se.add_argument("--repeats", type=int, default=40)
    se.add_argument("--faults", type=int, default=2)
    se.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    se.set_defaults(func=cmd_sim_eval)
    return p


def main(argv=None) -> int:
    level = os.environ.get("FLARE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except StateSpaceOverflow as exc:
        print(f"flare: {exc}", file=sys.stderr)
        return EXIT_CAP
    except (UsageError, FlareError, ValueError, KeyError) as exc:
        print(f"flare: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
