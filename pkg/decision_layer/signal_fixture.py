"""
signal_fixture.py
Saved per-round retrieval signals (150 episodes, 50 per bucket) and the code
that turns them back into episode traces for offline sweeps.
"""

import json
import logging
import os
from typing import Any, Dict, List

from .errors import DataError
from .retrieval_env import BUCKETS, ControllerConfig, QuestionItem, RetrievalState, run_retrieval_episode
from .trace_log import EpisodeTrace

logger = logging.getLogger(__name__)

FIXTURE_PATH = os.path.join(os.path.dirname(__file__), "data", "signal_traces.json")


def load_fixture_document(path: str = FIXTURE_PATH) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def fixture_traces(path: str = FIXTURE_PATH, method: str = "dc_composite") -> List[EpisodeTrace]:
    """
    One trace per fixture episode, produced by the live controller at the
    recorded (tau, alpha) from the stored per-round signals.
    """
    doc = load_fixture_document(path)
    recorded = doc.get("recorded") or {}
    config = ControllerConfig(
        tau=float(recorded.get("tau", 0.8)),
        alpha=float(recorded.get("alpha", 0.4)),
        budget=int(recorded.get("budget", 2)),
        k_schedule=tuple(recorded.get("k_schedule", (3, 6, 9))),
    )

    traces: List[EpisodeTrace] = []
    for bucket in BUCKETS:
        number = 0
        for group in doc["buckets"].get(bucket, []):
            rounds = group["rounds"]
            if len(rounds) != config.budget + 1:
                raise DataError(f"{bucket} pattern has {len(rounds)} rounds, expected {config.budget + 1}")
            signals = tuple(
                {"p_dense": float(d), "p_llm": float(l), "gold_present": bool(g)} for d, l, g in rounds
            )
            for _ in range(int(group["count"])):
                qid = f"fx-{bucket}-{number:03d}"
                state = RetrievalState(
                    question_id=qid,
                    rounds=tuple(() for _ in rounds),
                    gold_present=tuple(row["gold_present"] for row in signals),
                    signals=signals,
                )
                item = QuestionItem(id=qid, question="", gold_answer="", annotated_passage_id="", bucket=bucket)
                traces.append(run_retrieval_episode(method, item, state, passages={}, config=config, seed=number))
                number += 1

    logger.debug("[Fixture] rebuilt %d traces from %s", len(traces), path)
    return traces
