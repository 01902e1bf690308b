"""
harness.py
Experiment configuration, seeded parallel execution and report tables.

- One JSON document per experiment, validated by pydantic; validation errors
  surface as ConfigurationError with the dotted field path.
- Run i uses seed base_seed + i. Runs go to worker threads under a semaphore
  and are sorted by run index before anything is aggregated or written.
- Reports are markdown or CSV with fixed formatting (percentages 0 d.p.,
  rates 2 d.p.), so the same input always gives the same bytes.

Output layout:
    <out>/traces/<experiment>_<method>.jsonl
    <out>/<experiment>_<method>.md
    <out>/<experiment>_<method>.csv
"""

import asyncio
import csv
import io
import json
import logging
import os
import time
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple

import httpx
from pydantic import BaseModel, Field, ValidationError, ValidationInfo, field_validator, model_validator

from .attribution import summarize_labels
from .bm25 import build_bm25_index
from .calendar_env import (
    DEFAULT_BUDGET,
    QuestionMode,
    calendar_metrics,
    generate_scenarios,
    run_calendar_episode,
)
from .errors import ConfigurationError, DecisionLayerError, ExperimentError, PreconditionError
from .graph_env import generate_graph, graph_metrics, load_scenarios, run_graph_episode
from .retrieval_env import (
    BUCKETS,
    ControllerConfig,
    HashedEmbedder,
    attach_signals,
    ingest_corpus,
    precompute_states,
    retrieval_metrics,
    run_retrieval_episode,
    synthesize_corpus,
)
from .shared_types import ExperimentResult
from .signal_kit import ExternalEstimatorEndpoint, NoiseSpec
from .trace_log import EpisodeTrace, write_traces

logger = logging.getLogger(__name__)

# Configurations

OUTPUT_DIR_ENV = "DECISION_LAYER_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "results"

EXPERIMENT_METHODS: Dict[str, Tuple[str, ...]] = {
    "calendar": ("dc", "retry"),
    "graph": ("dc", "retry"),
    "retrieval": ("dc_composite", "dc_llm", "dc_dense"),
}

CALENDAR_SCENARIO_IDS: Tuple[str, ...] = tuple(s.id for s in generate_scenarios())
GRAPH_SCENARIO_IDS: Tuple[str, ...] = ("S1", "S2", "S3", "S4", "S5")

# Column format codes understood by emit_report
FORMATS = ("text", "int", "percent", "rate")


class CalendarParams(BaseModel):
    T: int = Field(default=DEFAULT_BUDGET, ge=1)
    mode: Literal["targeted", "drifting"] = "targeted"
    drift_rate: float = Field(default=0.0, ge=0.0, le=1.0)
    noise_fn: float = Field(default=0.0, ge=0.0, le=1.0)
    noise_fp: float = Field(default=0.0, ge=0.0, le=1.0)
    scenarios: List[str] = Field(default_factory=lambda: list(CALENDAR_SCENARIO_IDS))

    @model_validator(mode="after")
    def _known_scenarios(self):
        unknown = [s for s in self.scenarios if s not in CALENDAR_SCENARIO_IDS]
        if unknown:
            raise ValueError(f"unknown calendar scenarios {unknown}")
        return self


class GraphParams(BaseModel):
    n: int = Field(default=200, ge=35)
    graph_seed: int = Field(default=0, ge=0)
    tau_suff: float = Field(default=0.4, ge=0.0, le=1.0)
    theta_corr: float = Field(default=0.5, ge=0.0, le=1.0)
    scenarios: List[str] = Field(default_factory=lambda: list(GRAPH_SCENARIO_IDS))

    @model_validator(mode="after")
    def _known_scenarios(self):
        unknown = [s for s in self.scenarios if s not in GRAPH_SCENARIO_IDS]
        if unknown:
            raise ValueError(f"unknown graph scenarios {unknown}")
        return self


class RetrievalParams(BaseModel):
    tau: float = Field(default=0.8, ge=0.0, le=1.0)
    alpha: float = Field(default=0.4, ge=0.0, le=1.0)
    budget: int = Field(default=2, ge=0)
    k_schedule: List[int] = Field(default_factory=lambda: [3, 6, 9])
    judge_confidence: float = Field(default=1.0, ge=0.0, le=1.0)
    counts: List[int] = Field(default_factory=lambda: [50, 50, 50])
    corpus_seed: int = Field(default=0, ge=0)
    embedding_dim: int = Field(default=256, ge=1)
    passages_path: Optional[str] = None
    questions_path: Optional[str] = None

    @model_validator(mode="after")
    def _consistent(self):
        if len(self.counts) != len(BUCKETS) or any(c < 0 for c in self.counts):
            raise ValueError(f"counts needs three non-negative entries, got {self.counts}")
        if (self.passages_path is None) != (self.questions_path is None):
            raise ValueError("passages_path and questions_path must be given together")
        try:
            self.controller()
        except ConfigurationError as e:
            raise ValueError(str(e)) from e
        return self

    def controller(self) -> ControllerConfig:
        return ControllerConfig(
            tau=self.tau,
            alpha=self.alpha,
            budget=self.budget,
            k_schedule=tuple(self.k_schedule),
            judge_confidence=self.judge_confidence,
        )


class EstimatorParams(BaseModel):
    url: str
    timeout_ms: int = Field(default=5000, ge=1)

    def endpoint(self) -> ExternalEstimatorEndpoint:
        return ExternalEstimatorEndpoint(address=self.url, timeout=self.timeout_ms)


class ExperimentConfig(BaseModel):
    """
    One experiment: which environment, which method, how many seeded runs.

    method defaults to "dc" (calendar, graph) or "dc_composite" (retrieval).
    """
    experiment: Literal["calendar", "graph", "retrieval"]
    method: Optional[str] = Field(default=None, validate_default=True)
    runs: int = Field(default=10, ge=1)
    base_seed: int = Field(default=0, ge=0)
    workers: int = Field(default=1, ge=1)
    output_dir: str = DEFAULT_OUTPUT_DIR
    calendar: CalendarParams = Field(default_factory=CalendarParams)
    graph: GraphParams = Field(default_factory=GraphParams)
    retrieval: RetrievalParams = Field(default_factory=RetrievalParams)
    estimator: Optional[EstimatorParams] = None

    @field_validator("method")
    @classmethod
    def _method_for_experiment(cls, value: Optional[str], info: ValidationInfo) -> Optional[str]:
        experiment = info.data.get("experiment")
        if experiment is None:
            return value
        allowed = EXPERIMENT_METHODS[experiment]
        if value is None:
            return allowed[0]
        if value not in allowed:
            raise ValueError(f"{value!r} is not a {experiment} method (choose from {list(allowed)})")
        return value


def _set_dotted(doc: Dict[str, Any], path: str, value: Any) -> None:
    node = doc
    parts = path.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def config_from_dict(doc: Dict[str, Any], overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    Validate a config document, with dotted-path overrides applied first.

    Raises:
        ConfigurationError: first validation failure, with its field path
    """
    if not isinstance(doc, dict):
        raise ConfigurationError("config document must be a JSON object")
    doc = json.loads(json.dumps(doc))
    for path, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(doc, path, value)
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as e:
        first = e.errors()[0]
        field_path = ".".join(str(part) for part in first["loc"]) or None
        raise ConfigurationError(first["msg"], field_path=field_path) from e


def load_config(path: str, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    Read and validate an experiment config file.

    Raises:
        FileNotFoundError: path does not exist
        ConfigurationError: malformed JSON or an out-of-range value
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"invalid JSON in {path}: {e}") from e
    return config_from_dict(doc, overrides)


def output_dir_for(config: ExperimentConfig) -> str:
    return os.environ.get(OUTPUT_DIR_ENV) or config.output_dir


@dataclass(frozen=True)
class ReportTable:
    """
    A results table ready for emission

    Attributes:
        caption: One-line title
        columns: Column names; the first one labels the rows
        rows: (label, values) with one value per remaining column
        formats: Format code per value column (text, int, percent, rate)
    """
    caption: str
    columns: Tuple[str, ...]
    rows: Tuple[Tuple[str, Tuple[Any, ...]], ...] = ()
    formats: Tuple[str, ...] = ()

    def __post_init__(self):
        if not self.columns:
            raise PreconditionError("a report table needs at least a label column")
        width = len(self.columns) - 1
        formats = self.formats or ("text",) * width
        if len(formats) != width:
            raise PreconditionError(f"{len(formats)} formats for {width} value columns")
        unknown = [f for f in formats if f not in FORMATS]
        if unknown:
            raise PreconditionError(f"unknown column formats {unknown}")
        for label, values in self.rows:
            if len(values) != width:
                raise PreconditionError(f"row {label!r} has {len(values) + 1} cells, expected {len(self.columns)}")
        object.__setattr__(self, "formats", tuple(formats))

    def cells(self) -> List[List[str]]:
        return [[str(label)] + [_format_cell(v, f) for v, f in zip(values, self.formats)] for label, values in self.rows]


def _format_cell(value: Any, fmt: str) -> str:
    if value is None:
        return "-"
    if fmt == "percent":
        return f"{float(value) * 100:.0f}%"
    if fmt == "rate":
        return f"{float(value):.2f}"
    if fmt == "int":
        return str(int(value))
    return str(value)


def emit_report(table: ReportTable, format: str = "markdown") -> str:
    """Render a table as markdown or CSV text."""
    cells = table.cells()
    if format == "markdown":
        lines = [f"Table: {table.caption}", ""]
        lines.append("| " + " | ".join(table.columns) + " |")
        lines.append("|" + "|".join("---" for _ in table.columns) + "|")
        lines.extend("| " + " | ".join(row) + " |" for row in cells)
        return "\n".join(lines) + "\n"
    if format == "csv":
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(table.columns)
        writer.writerows(cells)
        return buffer.getvalue()
    raise ConfigurationError(f"unknown report format {format!r}", field_path="format")


# Tables

def calendar_table(traces: Sequence[EpisodeTrace], method: str, scenario_ids: Sequence[str] = CALENDAR_SCENARIO_IDS) -> ReportTable:
    rows = []
    for scenario_id in scenario_ids:
        group = [t for t in traces if t.scenario_id == scenario_id]
        if not group:
            continue
        m = calendar_metrics(group)
        rows.append((scenario_id, (
            group[0].tags.get("k"),
            m["success_rate"],
            m["first_action_optimality"],
            m["wasted_executions"],
            m["clarifications"],
            m["avg_turns"],
        )))
    return ReportTable(
        caption=f"Calendar results by scenario ({method})",
        columns=("Scenario", "k", "Succ.", "1st", "Wasted", "Clarif.", "Turns"),
        rows=tuple(rows),
        formats=("int", "percent", "percent", "rate", "rate", "rate"),
    )


def graph_table(traces: Sequence[EpisodeTrace], method: str, scenario_ids: Sequence[str] = GRAPH_SCENARIO_IDS) -> ReportTable:
    rows = []
    for scenario_id in scenario_ids:
        group = [t for t in traces if t.scenario_id == scenario_id]
        if not group:
            continue
        m = graph_metrics(group)
        rows.append((scenario_id, (
            m["success_rate"],
            m["wasted_traversals"],
            m["clarify_count"],
            m["backtrack_count"],
            m["avg_turns"],
        )))
    return ReportTable(
        caption=f"Graph disambiguation by scenario ({method})",
        columns=("Scenario", "Succ.", "Wasted", "Clarif.", "Backtr.", "Turns"),
        rows=tuple(rows),
        formats=("percent", "rate", "rate", "rate", "rate"),
    )


def retrieval_table(traces: Sequence[EpisodeTrace], method: str) -> ReportTable:
    by_bucket = retrieval_metrics(traces) if traces else {}
    rows = tuple(
        (bucket, (by_bucket[bucket]["n"], by_bucket[bucket]["success_rate"], by_bucket[bucket]["avg_rounds"]))
        for bucket in BUCKETS if bucket in by_bucket
    )
    return ReportTable(
        caption=f"Retrieval control by bucket ({method})",
        columns=("Bucket", "n", "Succ.", "RR"),
        rows=rows,
        formats=("int", "percent", "rate"),
    )


def sweep_table(rows: Sequence[Dict[str, Any]], caption: str = "Threshold sweep") -> ReportTable:
    return ReportTable(
        caption=caption,
        columns=("Bucket", "alpha", "tau", "n", "Succ.", "RR"),
        rows=tuple(
            (row["bucket"], (row["alpha"], row["tau"], row["n"], row["success"], row["avg_rounds"]))
            for row in rows
        ),
        formats=("rate", "rate", "int", "percent", "rate"),
    )


def attribution_table(labels, caption: str = "Failure attribution") -> ReportTable:
    counts = summarize_labels(labels)
    return ReportTable(
        caption=caption,
        columns=("Category", "Count"),
        rows=tuple((category, (count,)) for category, count in counts.items()),
        formats=("int",),
    )


def table_for(experiment: str, traces: Sequence[EpisodeTrace], method: str) -> ReportTable:
    if experiment == "calendar":
        return calendar_table(traces, method)
    if experiment == "graph":
        return graph_table(traces, method)
    if experiment == "retrieval":
        return retrieval_table(traces, method)
    raise ConfigurationError(f"unknown experiment {experiment!r}", field_path="experiment")


def infer_experiment(traces: Sequence[EpisodeTrace]) -> str:
    """Guess the experiment from trace tags (bucket, tau_suff or k)."""
    if not traces:
        raise PreconditionError("cannot infer the experiment of an empty trace set")
    tags = traces[0].tags
    if "bucket" in tags:
        return "retrieval"
    if "tau_suff" in tags:
        return "graph"
    if "k" in tags:
        return "calendar"
    raise PreconditionError(f"trace tags {sorted(tags)} do not identify an experiment")


# Execution

RunFn = Callable[[int, int], List[EpisodeTrace]]


def _calendar_runner(config: ExperimentConfig) -> RunFn:
    params = config.calendar
    scenarios = [s for s in generate_scenarios() if s.id in params.scenarios]
    noise = None
    if params.noise_fn or params.noise_fp:
        noise = NoiseSpec(false_negative_rate=params.noise_fn, false_positive_rate=params.noise_fp)
    mode = QuestionMode(params.mode)

    def run(run_index: int, seed: int) -> List[EpisodeTrace]:
        return [
            run_calendar_episode(
                config.method, scenario, T=params.T, seed=seed,
                mode=mode, drift_rate=params.drift_rate, noise=noise,
            )
            for scenario in scenarios
        ]
    return run


def _graph_runner(config: ExperimentConfig) -> RunFn:
    params = config.graph
    graph = generate_graph(n=params.n, seed=params.graph_seed)
    scenarios = [s for s in load_scenarios() if s.id in params.scenarios]

    def run(run_index: int, seed: int) -> List[EpisodeTrace]:
        return [
            run_graph_episode(
                config.method, scenario, graph, seed=seed,
                tau_suff=params.tau_suff, theta_corr=params.theta_corr,
            )
            for scenario in scenarios
        ]
    return run


def _retrieval_runner(config: ExperimentConfig) -> RunFn:
    params = config.retrieval
    controller = params.controller()
    if params.passages_path:
        corpus = ingest_corpus(params.passages_path, params.questions_path)
    else:
        corpus = synthesize_corpus(params.counts, seed=params.corpus_seed)
    passages = corpus.passage_map()
    index = build_bm25_index(corpus.passages)
    embedder = HashedEmbedder(dim=params.embedding_dim, seed=params.corpus_seed)
    endpoint = config.estimator.endpoint() if config.estimator else None

    # Signals are computed once and shared read-only by every run
    client = httpx.Client(timeout=endpoint.timeout / 1000.0) if endpoint else None
    try:
        states = [
            attach_signals(
                question, precompute_states(question, index, passages, controller), passages,
                embedder, controller, endpoint=endpoint, client=client,
            )
            for question in corpus.questions
        ]
    finally:
        if client is not None:
            client.close()

    def run(run_index: int, seed: int) -> List[EpisodeTrace]:
        return [
            run_retrieval_episode(config.method, question, state, passages, config=controller, seed=seed)
            for question, state in zip(corpus.questions, states)
        ]
    return run


RUNNERS: Dict[str, Callable[[ExperimentConfig], RunFn]] = {
    "calendar": _calendar_runner,
    "graph": _graph_runner,
    "retrieval": _retrieval_runner,
}


async def _schedule(run: RunFn, runs: int, base_seed: int, workers: int) -> List[Tuple[int, List[EpisodeTrace]]]:
    semaphore = asyncio.Semaphore(workers)

    async def one(run_index: int) -> Tuple[int, List[EpisodeTrace]]:
        async with semaphore:
            seed = base_seed + run_index
            try:
                traces = await asyncio.to_thread(run, run_index, seed)
            except DecisionLayerError as e:
                raise ExperimentError(str(e), run_index=run_index) from e
            logger.debug("[Harness] run %d done (%d episodes)", run_index, len(traces), extra={"run_index": run_index})
            return run_index, traces

    results = await asyncio.gather(*(one(i) for i in range(runs)))
    return sorted(results, key=lambda item: item[0])


async def run_experiment_async(config: ExperimentConfig, write: bool = True) -> ExperimentResult:
    """
    Run config.runs seeded runs and aggregate them into one table.

    Raises:
        ExperimentError: an environment error, tagged with the failing run index
    """
    started = time.perf_counter()
    run = RUNNERS[config.experiment](config)

    results = await _schedule(run, config.runs, config.base_seed, config.workers)
    traces = [trace for _, batch in results for trace in batch]
    table = table_for(config.experiment, traces, config.method)
    success_rate = sum(1 for t in traces if t.success) / len(traces) if traces else 0.0

    metadata: Dict[str, Any] = {
        "experiment": config.experiment,
        "method": config.method,
        "runs": config.runs,
        "base_seed": config.base_seed,
        "episodes": len(traces),
        "success_rate": success_rate,
        "elapsed_sec": time.perf_counter() - started,
    }
    if write:
        metadata.update(write_outputs(config, traces, table))

    logger.info(
        "[Harness] %s/%s: %d episodes, success %.2f", config.experiment, config.method, len(traces), success_rate,
        extra={"experiment": config.experiment, "method": config.method},
    )
    return ExperimentResult(success=True, data={"traces": traces, "table": table}, metadata=metadata)


def run_experiment(config: ExperimentConfig, write: bool = True) -> ExperimentResult:
    return asyncio.run(run_experiment_async(config, write=write))


def write_outputs(config: ExperimentConfig, traces: Sequence[EpisodeTrace], table: ReportTable) -> Dict[str, str]:
    out = output_dir_for(config)
    stem = f"{config.experiment}_{config.method}"
    trace_path = os.path.join(out, "traces", f"{stem}.jsonl")
    write_traces(trace_path, traces)
    paths = {"trace_path": trace_path}
    for fmt, ext in (("markdown", "md"), ("csv", "csv")):
        path = os.path.join(out, f"{stem}.{ext}")
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(emit_report(table, fmt))
        paths[f"{ext}_path"] = path
    return paths
