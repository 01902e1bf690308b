import os
import sys
import json
import asyncio
import logging
import argparse
from datetime import datetime
from dotenv import load_dotenv

from run_logger import log_run

from decision_layer.errors import DecisionLayerError, PreconditionError
from decision_layer.calendar_env import generate_scenarios, scenario_by_id
from decision_layer.graph_env import generate_graph, load_scenarios
from decision_layer.retrieval_env import sweep, synthesize_corpus, write_corpus
from decision_layer.trace_log import read_traces
from decision_layer.signal_fixture import fixture_traces
from decision_layer.attribution import (
    attribute_calendar_failure,
    attribute_retrieval_failure,
    replay_threshold_controller,
)
from decision_layer.harness import (
    attribution_table,
    config_from_dict,
    emit_report,
    infer_experiment,
    load_config,
    run_experiment_async,
    sweep_table,
    table_for,
)

load_dotenv()

DEFAULT_TAU_GRID = "0.5,0.6,0.7,0.8,0.9"
DEFAULT_ALPHA_GRID = "0.2,0.3,0.4,0.5,0.6"


def _grid(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _counts(text: str) -> list:
    parts = [x.strip() for x in text.split(",")]
    try:
        counts = [int(x) for x in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected EASY,MEDIUM,HARD integers, got {text!r}")
    if len(counts) != 3 or any(c < 0 for c in counts):
        raise argparse.ArgumentTypeError(f"expected three non-negative counts, got {text!r}")
    return counts


def _write_or_print(text: str, path: str | None) -> None:
    if not path:
        print(text, end="" if text.endswith("\n") else "\n")
        return
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    print(f"Wrote {path}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="driver.py",
        description="Decision-layer benchmarks: calendar clarify-vs-execute, graph disambiguation, retrieval stop-vs-expand.",
    )
    parser.add_argument("--verbose", action="store_true", help="log per-turn detail")
    verbs = parser.add_subparsers(dest="verb", required=True)

    p = verbs.add_parser("gen-scenarios", help="write the 8 calendar scenarios as JSON")
    p.add_argument("--out", help="output file (stdout if omitted)")

    p = verbs.add_parser("gen-graph", help="write the organisation graph and S1-S5 as JSON")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output file (stdout if omitted)")

    p = verbs.add_parser("synth-corpus", help="write a synthetic bucketed retrieval corpus")
    p.add_argument("--counts", type=int, nargs=3, default=[50, 50, 50], metavar=("EASY", "MEDIUM", "HARD"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--passages", required=True, help="passages JSONL path")
    p.add_argument("--questions", required=True, help="questions JSONL path")

    p = verbs.add_parser("run", help="run an experiment and write traces and tables")
    p.add_argument("experiment", choices=["calendar", "graph", "retrieval"])
    p.add_argument("--config", help="experiment JSON config")
    p.add_argument("--method")
    p.add_argument("--runs", type=int)
    p.add_argument("--seed", type=int, dest="base_seed")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", dest="output_dir")
    p.add_argument("--scenario", action="append", dest="scenarios", help="restrict to a scenario id (repeatable)")
    p.add_argument("--mode", choices=["targeted", "drifting"], help="calendar question generator")
    p.add_argument("--drift-rate", type=float)
    p.add_argument("--noise-fn", type=float, help="calendar extractor false-negative rate")
    p.add_argument("--noise-fp", type=float, help="calendar extractor false-positive rate")
    p.add_argument("--tau", type=float, help="retrieval stop threshold")
    p.add_argument("--alpha", type=float, help="retrieval dense weight")
    corpus = p.add_mutually_exclusive_group()
    corpus.add_argument("--corpus", metavar="DIR", help="directory holding passages.jsonl and questions.jsonl")
    corpus.add_argument("--synth", type=_counts, metavar="E,M,H", help="synthesize a corpus with these bucket counts")
    p.add_argument("--estimator-url", help="external p_llm estimator endpoint")
    p.add_argument("--estimator-timeout-ms", type=int)
    p.add_argument("--log-file", default="run_log.csv")

    p = verbs.add_parser("sweep", help="replay retrieval traces over a (tau, alpha) grid")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--traces", help="retrieval trace JSONL")
    source.add_argument("--fixture", action="store_true", help="use the shipped signal fixture")
    p.add_argument("--tau-grid", type=_grid, default=_grid(DEFAULT_TAU_GRID))
    p.add_argument("--alpha-grid", type=_grid, default=_grid(DEFAULT_ALPHA_GRID))
    p.add_argument("--format", choices=["markdown", "csv"], default="markdown")
    p.add_argument("--out")

    p = verbs.add_parser("attribute", help="attribute failed episodes in a trace file")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--traces")
    source.add_argument("--fixture", action="store_true")
    p.add_argument("--tau", type=float, help="retrieval threshold (default: recorded)")
    p.add_argument("--alpha", type=float, help="retrieval dense weight (default: recorded)")
    p.add_argument("--format", choices=["markdown", "csv"], default="markdown")
    p.add_argument("--out")

    p = verbs.add_parser("report", help="rebuild the results table from a trace file")
    p.add_argument("--traces", required=True)
    p.add_argument("--experiment", choices=["calendar", "graph", "retrieval"])
    p.add_argument("--format", choices=["markdown", "csv"], default="markdown")
    p.add_argument("--out")
    return parser


async def cmd_run(args, session_id: str) -> None:
    overrides = {
        "experiment": args.experiment,
        "method": args.method,
        "runs": args.runs,
        "base_seed": args.base_seed,
        "workers": args.workers,
        "output_dir": args.output_dir,
        "calendar.mode": args.mode,
        "calendar.drift_rate": args.drift_rate,
        "calendar.noise_fn": args.noise_fn,
        "calendar.noise_fp": args.noise_fp,
        "retrieval.tau": args.tau,
        "retrieval.alpha": args.alpha,
        "retrieval.counts": args.synth,
        "estimator.url": args.estimator_url,
        "estimator.timeout_ms": args.estimator_timeout_ms,
    }
    if args.scenarios and args.experiment in ("calendar", "graph"):
        overrides[f"{args.experiment}.scenarios"] = args.scenarios
    if args.corpus:
        overrides["retrieval.passages_path"] = os.path.join(args.corpus, "passages.jsonl")
        overrides["retrieval.questions_path"] = os.path.join(args.corpus, "questions.jsonl")
    if args.config:
        config = load_config(args.config, overrides)
    else:
        config = config_from_dict({}, overrides)
    if args.synth is not None and config.retrieval.passages_path:
        # --synth wins over a corpus named in the config file
        retrieval = config.retrieval.model_copy(update={"passages_path": None, "questions_path": None})
        config = config.model_copy(update={"retrieval": retrieval})

    result = await run_experiment_async(config)
    meta = result.metadata
    print(emit_report(result.data["table"], "markdown"))
    print(f"Traces: {meta['trace_path']}")
    print(f"Report: {meta['md_path']}, {meta['csv_path']}")

    log_run(
        session_id=session_id,
        experiment=config.experiment,
        method=config.method,
        runs=config.runs,
        base_seed=config.base_seed,
        episodes=meta["episodes"],
        success_rate=meta["success_rate"],
        elapsed_sec=meta["elapsed_sec"],
        trace_path=meta["trace_path"],
        report_path=meta["md_path"],
        filepath=args.log_file,
    )


def cmd_sweep(args) -> None:
    traces = fixture_traces() if args.fixture else read_traces(args.traces)
    rows = sweep(traces, args.tau_grid, args.alpha_grid)
    _write_or_print(emit_report(sweep_table(rows), args.format), args.out)


def cmd_attribute(args) -> None:
    traces = fixture_traces() if args.fixture else read_traces(args.traces)
    if not traces:
        raise PreconditionError("trace file holds no episodes")
    failed = []
    experiment = infer_experiment(traces)
    if experiment == "retrieval":
        for trace in traces:
            tau = args.tau if args.tau is not None else float(trace.tags.get("tau", 0.8))
            alpha = args.alpha if args.alpha is not None else float(trace.tags.get("alpha", 0.4))
            if not replay_threshold_controller(trace, tau, alpha)["success"]:
                failed.append(attribute_retrieval_failure(trace, tau, alpha))
    elif experiment == "calendar":
        for trace in traces:
            if not trace.success:
                failed.append(attribute_calendar_failure(trace, scenario_by_id(trace.scenario_id)))
    else:
        raise PreconditionError("attribution covers calendar and retrieval traces only")

    caption = f"Failure attribution ({experiment}, {len(failed)} of {len(traces)} episodes failed)"
    _write_or_print(emit_report(attribution_table(failed, caption), args.format), args.out)


def cmd_report(args) -> None:
    traces = read_traces(args.traces)
    experiment = args.experiment or infer_experiment(traces)
    method = traces[0].method_id if traces else "-"
    _write_or_print(emit_report(table_for(experiment, traces, method), args.format), args.out)


async def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    session_id = datetime.now().strftime("%Y-%m-%d %H:%M:%S")

    try:
        if args.verb == "gen-scenarios":
            doc = [scenario.to_dict() for scenario in generate_scenarios()]
            _write_or_print(json.dumps(doc, indent=2) + "\n", args.out)
        elif args.verb == "gen-graph":
            graph = generate_graph(n=args.n, seed=args.seed)
            doc = {"graph": graph.to_dict(), "scenarios": [s.to_dict() for s in load_scenarios()]}
            _write_or_print(json.dumps(doc, indent=2) + "\n", args.out)
        elif args.verb == "synth-corpus":
            corpus = synthesize_corpus(args.counts, seed=args.seed)
            write_corpus(corpus, args.passages, args.questions)
            print(f"Wrote {len(corpus.passages)} passages and {len(corpus.questions)} questions")
        elif args.verb == "run":
            await cmd_run(args, session_id)
        elif args.verb == "sweep":
            cmd_sweep(args)
        elif args.verb == "attribute":
            cmd_attribute(args)
        elif args.verb == "report":
            cmd_report(args)
    except (DecisionLayerError, FileNotFoundError) as e:
        print(f"[Driver] Error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"[Driver] Error: {e}", file=sys.stderr)
        import traceback
        traceback.print_exc()
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(asyncio.run(main()))
