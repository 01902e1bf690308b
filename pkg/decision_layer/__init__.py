from .shared_types import Action, ActionKind, DecisionContext, DecisionRecord, Signal, SignalSource
from .decision_core import decide, linear_utility, threshold_rule, utility_argmax
from .signal_kit import apply_noise, blend_composite, normalize_linear, query_external_estimator
from .trace_log import EpisodeTrace, TurnRecord, append_turn
from .calendar_env import run_calendar_episode
from .graph_env import generate_graph, run_graph_episode
from .retrieval_env import run_retrieval_episode, synthesize_corpus
from .harness import emit_report, load_config, run_experiment

__all__ = [
    'Action', 'ActionKind', 'DecisionContext', 'DecisionRecord', 'Signal', 'SignalSource',
    'decide', 'linear_utility', 'threshold_rule', 'utility_argmax',
    'apply_noise', 'blend_composite', 'normalize_linear', 'query_external_estimator',
    'EpisodeTrace', 'TurnRecord', 'append_turn',
    'run_calendar_episode', 'generate_graph', 'run_graph_episode',
    'run_retrieval_episode', 'synthesize_corpus',
    'emit_report', 'load_config', 'run_experiment',
]
