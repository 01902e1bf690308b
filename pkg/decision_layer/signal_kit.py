"""
signal_kit.py
Generic signal construction: composite blending, linear normalization,
seeded noise injection and the wire client for external estimators.

- Everything here is a pure function except query_external_estimator, which
  performs one HTTP exchange and keeps no state between calls.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional

import httpx
import numpy as np

from .errors import ConfigurationError, EstimatorUnavailableError
from .shared_types import DecisionContext, Signal, SignalSource

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSpec:
    """
    Error model for a per-field boolean estimator

    Attributes:
        false_negative_rate: Probability a true field is reported false
        false_positive_rate: Probability a false field is reported true
        seed: Seed of the generator used when the caller supplies none
    """
    false_negative_rate: float = 0.0
    false_positive_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("false_negative_rate", "false_positive_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise ConfigurationError(f"must be in [0, 1], got {rate}", field_path=name)
        if self.seed < 0:
            raise ConfigurationError("must be non-negative", field_path="seed")

    @property
    def is_identity(self) -> bool:
        return self.false_negative_rate == 0.0 and self.false_positive_rate == 0.0


@dataclass(frozen=True)
class ExternalEstimatorEndpoint:
    """
    Address of an external (e.g. LLM-backed) estimator

    Attributes:
        address: URL accepting a POSTed JSON request document
        timeout: Milliseconds before the exchange is abandoned
        signal_name: Name of the signal requested
    """
    address: str
    timeout: int = 5000
    signal_name: str = "p_llm"

    def __post_init__(self):
        if self.timeout <= 0:
            raise ConfigurationError("must be positive", field_path="timeout")


def blend_composite(p_dense: Signal, p_llm: Signal, alpha: float) -> Signal:
    """Convex blend alpha * p_dense + (1 - alpha) * p_llm."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"must be in [0, 1], got {alpha}", field_path="alpha")
    value = composite_value(p_dense.value, p_llm.value, alpha)
    return Signal(
        name="p_hat",
        value=value,
        source=SignalSource.COMPOSITE,
        detail={"p_dense": p_dense.value, "p_llm": p_llm.value, "alpha": alpha},
    )


def composite_value(p_dense: float, p_llm: float, alpha: float) -> float:
    # Shared by live episodes and offline replay so both compute identical floats.
    # Equal components come back unchanged and the result never leaves [min, max].
    if alpha == 0.0:
        return p_llm
    if alpha == 1.0:
        return p_dense
    lo, hi = min(p_dense, p_llm), max(p_dense, p_llm)
    return min(hi, max(lo, p_llm + alpha * (p_dense - p_llm)))


def normalize_linear(x: float, lo: float, hi: float) -> float:
    """Map x linearly so lo -> 0 and hi -> 1, clamped to [0, 1]."""
    if lo >= hi:
        raise ConfigurationError(f"lower bound {lo} must be below upper bound {hi}", field_path="lo")
    return min(1.0, max(0.0, (x - lo) / (hi - lo)))


def apply_noise(
    report: Dict[str, bool],
    spec: NoiseSpec,
    rng: Optional[np.random.Generator] = None,
) -> Dict[str, bool]:
    """
    Flip per-field booleans according to the false-negative and false-positive rates.

    One uniform draw is consumed per field, in the report's key order,
    whatever the rates are, so streams stay aligned across configurations.
    """
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    draws = rng.random(len(report))
    noisy: Dict[str, bool] = {}
    for (name, present), u in zip(report.items(), draws):
        if present:
            noisy[name] = not (u < spec.false_negative_rate)
        else:
            noisy[name] = bool(u < spec.false_positive_rate)
    return noisy


def query_external_estimator(
    endpoint: ExternalEstimatorEndpoint,
    context: DecisionContext,
    client: Optional[httpx.Client] = None,
) -> Signal:
    """
    Ask an external estimator for one signal.

    Sends {signal_name, context} and expects {name, value} back. Values
    outside [0, 1] are clamped with a warning.

    Raises:
        EstimatorUnavailableError: timeout, transport failure, non-2xx status
            or a reply without a numeric value
    """
    request = {"signal_name": endpoint.signal_name, "context": context.snapshot()}
    owns_client = client is None
    if owns_client:
        client = httpx.Client(timeout=endpoint.timeout / 1000.0)
    try:
        resp = client.post(endpoint.address, json=request, timeout=endpoint.timeout / 1000.0)
        resp.raise_for_status()
        payload = resp.json()
    except httpx.TimeoutException as e:
        raise EstimatorUnavailableError(f"estimator at {endpoint.address} timed out") from e
    except httpx.HTTPError as e:
        raise EstimatorUnavailableError(f"estimator at {endpoint.address} failed: {e}") from e
    except ValueError as e:
        raise EstimatorUnavailableError(f"estimator at {endpoint.address} sent invalid JSON") from e
    finally:
        if owns_client:
            client.close()

    if not isinstance(payload, dict):
        raise EstimatorUnavailableError("estimator reply is not a JSON object")
    value = payload.get("value")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise EstimatorUnavailableError(f"estimator reply has no numeric value: {payload!r}")

    name = payload.get("name") or endpoint.signal_name
    logger.debug("[Estimator] %s=%s", name, value)
    return Signal.clamped(name, float(value), source=SignalSource.EXTERNAL)
