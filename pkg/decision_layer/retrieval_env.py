"""
retrieval_env.py
Stop-vs-expand retrieval control over a BM25 ranking.

- Each question's ranking is computed once; round r exposes the top k_schedule[r]
  passages (3 -> 6 -> 9), so round sets nest by construction.
- Buckets come from the rank of the annotated passage alone: easy <= 3, medium <= 9, hard otherwise.
- Signals per round: p_dense (max cosine under a hashed bag-of-tokens embedder) and
  p_llm (answerability judge; a substring oracle unless an external estimator is attached).
- The controller stops when p_hat >= tau or at the budget round.

Corpus files (line-delimited JSON):
    passages:  {"id", "text", "question_id"?}
    questions: {"id", "question", "gold_answer", "annotated_passage_id"}
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import httpx
import numpy as np

from .bm25 import BM25Index, build_bm25_index, tokenize
from .errors import (
    ConfigurationError,
    DataError,
    EstimatorUnavailableError,
    PreconditionError,
    SynthesisError,
)
from .shared_types import Action, ActionKind, DecisionContext, Signal, SignalSource
from .signal_kit import ExternalEstimatorEndpoint, blend_composite, normalize_linear, query_external_estimator
from .trace_log import EpisodeTrace, TurnRecord, append_turn

logger = logging.getLogger(__name__)

# Configurations

BUCKETS: Tuple[str, ...] = ("easy", "medium", "hard")
METHODS: Tuple[str, ...] = ("dc_llm", "dc_dense", "dc_composite")
EMBEDDING_DIM = 256

# Distractors that outrank the annotated passage, per bucket (inclusive ranges)
DISTRACTOR_RANGE: Dict[str, Tuple[int, int]] = {
    "easy": (0, 2),
    "medium": (3, 8),
    "hard": (9, 12),
}
PASSAGE_TOKENS = 8
TOPIC_TERMS = 3
QUESTION_PREFIX = "what is the"
CONSONANTS = "bdfgklmnprstvz"
VOWELS = "aeiou"
FILLER_VOCABULARY = 300
MAX_SYNTHESIS_RETRIES = 5


@dataclass(frozen=True)
class Passage:
    id: str
    text: str
    source_question_id: Optional[str] = None

    def __post_init__(self):
        if not self.text.strip():
            raise DataError(f"passage {self.id} has empty text")

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"id": self.id, "text": self.text}
        if self.source_question_id is not None:
            data["question_id"] = self.source_question_id
        return data


@dataclass(frozen=True)
class QuestionItem:
    """
    Attributes:
        id: Question id
        question: Question text, used as the BM25 query
        gold_answer: Answer string that must appear in the annotated passage
        annotated_passage_id: The passage annotated as containing the answer
        bucket: easy / medium / hard once assigned
    """
    id: str
    question: str
    gold_answer: str
    annotated_passage_id: str
    bucket: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "id": self.id,
            "question": self.question,
            "gold_answer": self.gold_answer,
            "annotated_passage_id": self.annotated_passage_id,
        }
        if self.bucket is not None:
            data["bucket"] = self.bucket
        return data


@dataclass(frozen=True)
class ControllerConfig:
    """
    Attributes:
        tau: Stop threshold on p_hat
        alpha: Dense weight in the composite
        budget: Number of expansion rounds
        k_schedule: Cumulative passage count per round
        judge_confidence: Confidence of the oracle judge
    """
    tau: float = 0.8
    alpha: float = 0.4
    budget: int = 2
    k_schedule: Tuple[int, ...] = (3, 6, 9)
    judge_confidence: float = 1.0

    def __post_init__(self):
        for name in ("tau", "alpha", "judge_confidence"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"must be in [0, 1], got {value}", field_path=name)
        if self.budget < 0 or len(self.k_schedule) != self.budget + 1:
            raise ConfigurationError(
                f"k_schedule needs budget + 1 = {self.budget + 1} entries, got {list(self.k_schedule)}",
                field_path="k_schedule",
            )
        if any(b <= a for a, b in zip(self.k_schedule, self.k_schedule[1:])) or self.k_schedule[0] < 1:
            raise ConfigurationError("k_schedule must be positive and increasing", field_path="k_schedule")


@dataclass(frozen=True)
class RetrievalState:
    """
    Attributes:
        question_id: Question this state belongs to
        rounds: Cumulative passage ids per round
        gold_present: Whether the gold answer appears in each round's passages
        signals: Per-round {p_dense, p_llm} once computed
    """
    question_id: str
    rounds: Tuple[Tuple[str, ...], ...]
    gold_present: Tuple[bool, ...]
    signals: Tuple[Dict[str, float], ...] = ()

    def __post_init__(self):
        for earlier, later in zip(self.rounds, self.rounds[1:]):
            if not set(earlier) <= set(later):
                raise PreconditionError(f"{self.question_id}: round sets are not nested")


@dataclass
class RetrievalCorpus:
    passages: List[Passage] = field(default_factory=list)
    questions: List[QuestionItem] = field(default_factory=list)

    def passage_map(self) -> Dict[str, Passage]:
        return {p.id: p for p in self.passages}


class HashedEmbedder:
    """
    Seeded bag-of-tokens embedder.

    Each token goes to bucket(token) = blake2b(seed:token) mod dim; components are
    term counts, so every vector is non-negative and cosine lies in [0, 1].
    """

    def __init__(self, dim: int = EMBEDDING_DIM, seed: int = 0):
        if dim <= 0:
            raise ConfigurationError("must be positive", field_path="dim")
        self.dim = dim
        self.seed = seed

    def bucket(self, token: str) -> int:
        digest = hashlib.blake2b(f"{self.seed}:{token}".encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "big") % self.dim

    def embed(self, text: str) -> np.ndarray:
        vector = np.zeros(self.dim, dtype=float)
        for token in tokenize(text):
            vector[self.bucket(token)] += 1.0
        return vector


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def _gold_in(gold_answer: str, texts: Sequence[str]) -> bool:
    needle = gold_answer.lower()
    return any(needle in text.lower() for text in texts)


def assign_bucket(question: QuestionItem, index: BM25Index) -> str:
    """Bucket by the BM25 rank of the annotated passage."""
    if question.annotated_passage_id not in index.position:
        raise DataError(f"{question.id}: annotated passage {question.annotated_passage_id!r} not in corpus")
    rank = index.rank_of(question.question, question.annotated_passage_id)
    if rank <= 3:
        return "easy"
    if rank <= 9:
        return "medium"
    return "hard"


def precompute_states(
    question: QuestionItem,
    index: BM25Index,
    passages: Dict[str, Passage],
    config: ControllerConfig = ControllerConfig(),
) -> RetrievalState:
    """Cumulative top-k prefixes of one ranking, with gold-presence flags."""
    ranking = [pid for pid, _ in index.rank(question.question, top_k=config.k_schedule[-1])]
    rounds = tuple(tuple(ranking[:k]) for k in config.k_schedule)
    flags = tuple(_gold_in(question.gold_answer, [passages[pid].text for pid in ids]) for ids in rounds)
    return RetrievalState(question_id=question.id, rounds=rounds, gold_present=flags)


def dense_signal(
    question: QuestionItem,
    passages: Sequence[Passage],
    embedder: HashedEmbedder,
    lo: float = 0.0,
    hi: float = 1.0,
) -> Signal:
    """Max cosine between question and passages, normalized to [0, 1]."""
    if not passages:
        raise PreconditionError("dense_signal needs at least one passage")
    q = embedder.embed(question.question)
    best = max(cosine(q, embedder.embed(p.text)) for p in passages)
    return Signal(name="p_dense", value=normalize_linear(best, lo, hi), source=SignalSource.LEXICAL)


def oracle_judge_signal(question: QuestionItem, passages: Sequence[Passage], confidence: float = 1.0) -> Signal:
    """conf if the gold answer appears in any passage, else 1 - conf."""
    if not passages:
        raise PreconditionError("oracle_judge_signal needs at least one passage")
    answerable = _gold_in(question.gold_answer, [p.text for p in passages])
    value = confidence if answerable else 1.0 - confidence
    return Signal(name="p_llm", value=value, source=SignalSource.ORACLE, detail={"answerable": answerable})


def controller_step(p_hat: float, round_index: int, config: ControllerConfig) -> Action:
    """Stop when p_hat >= tau or at the budget round; otherwise expand to the next k."""
    if not 0 <= round_index <= config.budget:
        raise PreconditionError(f"round {round_index} outside 0..{config.budget}")
    if p_hat >= config.tau or round_index == config.budget:
        return Action.of(ActionKind.STOP, k=config.k_schedule[round_index])
    return Action.of(ActionKind.EXPAND, k=config.k_schedule[round_index + 1])


def effective_alpha(method: str, config: ControllerConfig) -> float:
    if method == "dc_llm":
        return 0.0
    if method == "dc_dense":
        return 1.0
    if method == "dc_composite":
        return config.alpha
    raise ConfigurationError(f"unknown retrieval method {method!r}", field_path="method")


def compute_round_signals(
    question: QuestionItem,
    state: RetrievalState,
    passages: Dict[str, Passage],
    embedder: HashedEmbedder,
    config: ControllerConfig,
    endpoint: Optional[ExternalEstimatorEndpoint] = None,
    client: Optional[httpx.Client] = None,
) -> List[Dict[str, Any]]:
    """p_dense, p_llm and gold presence for every round up to budget."""
    table: List[Dict[str, Any]] = []
    for r, ids in enumerate(state.rounds):
        shown = [passages[pid] for pid in ids]
        p_dense = dense_signal(question, shown, embedder)
        p_llm = oracle_judge_signal(question, shown, config.judge_confidence)
        if endpoint is not None:
            context = DecisionContext(
                signals={"p_dense": p_dense},
                counters={"round": r, "budget": config.budget, "k": config.k_schedule[r]},
            )
            try:
                p_llm = query_external_estimator(endpoint, context, client=client)
            except EstimatorUnavailableError as e:
                logger.warning(
                    "[Estimator] %s round %d: %s; using oracle judge", question.id, r, e,
                    extra={"question_id": question.id, "round": r},
                )
        table.append({"p_dense": p_dense.value, "p_llm": p_llm.value, "gold_present": state.gold_present[r]})
    return table


def attach_signals(
    question: QuestionItem,
    state: RetrievalState,
    passages: Dict[str, Passage],
    embedder: HashedEmbedder,
    config: ControllerConfig,
    endpoint: Optional[ExternalEstimatorEndpoint] = None,
    client: Optional[httpx.Client] = None,
) -> RetrievalState:
    """Compute the per-round signals once so every method reads the same values."""
    table = compute_round_signals(question, state, passages, embedder, config, endpoint, client)
    return replace(state, signals=tuple(table))


def run_retrieval_episode(
    method: str,
    question: QuestionItem,
    state: RetrievalState,
    passages: Dict[str, Passage],
    config: ControllerConfig = ControllerConfig(),
    embedder: Optional[HashedEmbedder] = None,
    endpoint: Optional[ExternalEstimatorEndpoint] = None,
    client: Optional[httpx.Client] = None,
    seed: int = 0,
) -> EpisodeTrace:
    """
    Run the threshold controller on one question.

    Success is the gold-presence flag at the stop round. Both component signals
    are logged every round, and the terminator carries the full per-round table.
    """
    alpha = effective_alpha(method, config)
    if state.signals:
        table = [dict(row) for row in state.signals]
    else:
        table = compute_round_signals(question, state, passages, embedder or HashedEmbedder(), config, endpoint, client)

    trace = EpisodeTrace(
        scenario_id=question.id,
        method_id=method,
        seed=seed,
        tags={"bucket": question.bucket, "tau": config.tau, "alpha": alpha, "budget": config.budget},
    )
    success = False
    stop_round = config.budget
    for r, row in enumerate(table):
        p_dense = Signal("p_dense", row["p_dense"], SignalSource.LEXICAL)
        p_llm = Signal("p_llm", row["p_llm"], SignalSource.ORACLE)
        p_hat = blend_composite(p_dense, p_llm, alpha)
        action = controller_step(p_hat.value, r, config)
        stopped = action.kind == ActionKind.STOP
        trace = append_turn(trace, TurnRecord(
            turn=r + 1,
            signals={"p_dense": p_dense.value, "p_llm": p_llm.value, "p_hat": p_hat.value},
            flags={},
            action=action,
            valid=bool(stopped and row["gold_present"]),
            observations={"k": config.k_schedule[r], "gold_present": row["gold_present"]},
        ))
        if stopped:
            success = bool(row["gold_present"])
            stop_round = r
            break

    logger.debug(
        "[Retrieval] %s/%s stop_round=%d success=%s", question.id, method, stop_round, success,
        extra={"question_id": question.id, "method": method},
    )
    metrics = {"success": 1.0 if success else 0.0, "rounds": float(stop_round)}
    return trace.finish(success, metrics, rounds=table)


def retrieval_metrics(traces: Sequence[EpisodeTrace]) -> Dict[str, Dict[str, float]]:
    """Success rate and average rounds per bucket."""
    if not traces:
        raise PreconditionError("retrieval_metrics needs at least one trace")
    table: Dict[str, Dict[str, float]] = {}
    for bucket in BUCKETS:
        group = [t for t in traces if t.tags.get("bucket") == bucket]
        if not group:
            continue
        table[bucket] = {
            "n": float(len(group)),
            "success_rate": float(np.mean([1.0 if t.success else 0.0 for t in group])),
            "avg_rounds": float(np.mean([t.metrics.get("rounds", 0.0) for t in group])),
        }
    return table


def sweep(
    traces: Sequence[EpisodeTrace],
    tau_grid: Sequence[float],
    alpha_grid: Sequence[float],
) -> List[Dict[str, Any]]:
    """Replay saved traces over a (tau, alpha) grid; one row per bucket and grid point."""
    from .attribution import replay_threshold_controller

    rows: List[Dict[str, Any]] = []
    for alpha in alpha_grid:
        for tau in tau_grid:
            outcomes: Dict[str, List[Tuple[bool, int]]] = {}
            for trace in traces:
                result = replay_threshold_controller(trace, tau, alpha)
                outcomes.setdefault(trace.tags.get("bucket") or "all", []).append(
                    (result["success"], result["rounds"])
                )
            for bucket in sorted(outcomes, key=lambda b: (BUCKETS.index(b) if b in BUCKETS else len(BUCKETS), b)):
                group = outcomes[bucket]
                rows.append({
                    "bucket": bucket,
                    "tau": tau,
                    "alpha": alpha,
                    "n": len(group),
                    "success": float(np.mean([1.0 if ok else 0.0 for ok, _ in group])),
                    "avg_rounds": float(np.mean([rounds for _, rounds in group])),
                })
    return rows


# Corpus synthesis and ingestion

def _word(rng: np.random.Generator) -> str:
    syllables = int(rng.integers(2, 4))
    return "".join(
        CONSONANTS[int(rng.integers(len(CONSONANTS)))] + VOWELS[int(rng.integers(len(VOWELS)))]
        for _ in range(syllables)
    )


def _fresh_word(rng: np.random.Generator, used: set) -> str:
    while True:
        word = _word(rng)
        if word not in used:
            used.add(word)
            return word


def _synthesize_question(
    index: int,
    bucket: str,
    rng: np.random.Generator,
    used: set,
    fillers: List[str],
    next_pid,
) -> Tuple[QuestionItem, List[Passage]]:
    qid = f"q{index:05d}"
    topic = [_fresh_word(rng, used) for _ in range(TOPIC_TERMS)]
    answer = f"{_fresh_word(rng, used)}-{index:05d}"

    def filler(count: int) -> List[str]:
        return [fillers[int(i)] for i in rng.integers(len(fillers), size=count)]

    lo, hi = DISTRACTOR_RANGE[bucket]
    n_distractors = int(rng.integers(lo, hi + 1))
    passages: List[Passage] = []
    # Each distractor repeats every topic term, so it strictly outranks the annotated passage
    for _ in range(n_distractors):
        words = [t for t in topic for _ in range(2)] + filler(PASSAGE_TOKENS - 2 * TOPIC_TERMS)
        rng.shuffle(words)
        passages.append(Passage(id=next_pid(), text=" ".join(words)))

    words = [answer] + topic + filler(PASSAGE_TOKENS - 1 - TOPIC_TERMS)
    rng.shuffle(words)
    annotated = Passage(id=next_pid(), text=" ".join(words), source_question_id=qid)
    passages.append(annotated)

    question = QuestionItem(
        id=qid,
        question=f"{QUESTION_PREFIX} {' '.join(topic)}",
        gold_answer=answer,
        annotated_passage_id=annotated.id,
        bucket=bucket,
    )
    return question, passages


def synthesize_corpus(counts: Sequence[int] = (50, 50, 50), seed: int = 0) -> RetrievalCorpus:
    """
    Seeded corpus whose questions land in the requested buckets.

    Every bucket is re-checked with assign_bucket on the final index; mismatching
    questions are regenerated a bounded number of times.

    Raises:
        SynthesisError: a bucket could not be reached within the retries
    """
    if len(counts) != len(BUCKETS) or any(c < 0 for c in counts):
        raise ConfigurationError(f"need three non-negative counts, got {list(counts)}", field_path="counts")
    if sum(counts) == 0:
        return RetrievalCorpus()

    rng = np.random.default_rng(seed)
    used = set(QUESTION_PREFIX.split())
    fillers = [_fresh_word(rng, used) for _ in range(FILLER_VOCABULARY)]
    pid_counter = iter(range(10 ** 9))

    def next_pid() -> str:
        return f"p{next(pid_counter):06d}"

    plan = [bucket for bucket, count in zip(BUCKETS, counts) for _ in range(count)]
    entries: List[Tuple[QuestionItem, List[Passage]]] = [
        _synthesize_question(i, bucket, rng, used, fillers, next_pid) for i, bucket in enumerate(plan)
    ]

    for attempt in range(MAX_SYNTHESIS_RETRIES + 1):
        corpus = RetrievalCorpus(
            passages=[p for _, group in entries for p in group],
            questions=[q for q, _ in entries],
        )
        index = build_bm25_index(corpus.passages)
        wrong = [i for i, (q, _) in enumerate(entries) if assign_bucket(q, index) != q.bucket]
        if not wrong:
            logger.info(
                "[Retrieval] synthesized %d questions, %d passages (seed=%d)",
                len(corpus.questions), len(corpus.passages), seed,
                extra={"seed": seed},
            )
            return corpus
        if attempt == MAX_SYNTHESIS_RETRIES:
            break
        for i in wrong:
            entries[i] = _synthesize_question(i, plan[i], rng, used, fillers, next_pid)

    raise SynthesisError(f"{len(wrong)} questions missed their bucket after {MAX_SYNTHESIS_RETRIES} retries")


def _read_jsonl(path: str) -> List[Dict[str, Any]]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{number}: invalid JSON ({e})") from e
    return rows


def ingest_corpus(passages_path: str, questions_path: str) -> RetrievalCorpus:
    """
    Load a user-supplied corpus and assign buckets by BM25 rank.

    Raises:
        DataError: missing annotated passage, or gold answer not in it
    """
    passages = [
        Passage(id=str(row["id"]), text=row["text"], source_question_id=row.get("question_id"))
        for row in _read_jsonl(passages_path)
    ]
    by_id = {p.id: p for p in passages}
    index = build_bm25_index(passages)

    questions: List[QuestionItem] = []
    for row in _read_jsonl(questions_path):
        item = QuestionItem(
            id=str(row["id"]),
            question=row["question"],
            gold_answer=row["gold_answer"],
            annotated_passage_id=str(row["annotated_passage_id"]),
        )
        annotated = by_id.get(item.annotated_passage_id)
        if annotated is None:
            raise DataError(f"{item.id}: annotated passage {item.annotated_passage_id!r} not in corpus")
        if item.gold_answer.lower() not in annotated.text.lower():
            raise DataError(f"{item.id}: gold answer not found in annotated passage")
        questions.append(replace(item, bucket=assign_bucket(item, index)))
    return RetrievalCorpus(passages=passages, questions=questions)


def write_corpus(corpus: RetrievalCorpus, passages_path: str, questions_path: str) -> None:
    with open(passages_path, "w", encoding="utf-8", newline="\n") as f:
        for passage in corpus.passages:
            f.write(json.dumps(passage.to_dict(), ensure_ascii=False) + "\n")
    with open(questions_path, "w", encoding="utf-8", newline="\n") as f:
        for question in corpus.questions:
            f.write(json.dumps(question.to_dict(), ensure_ascii=False) + "\n")
