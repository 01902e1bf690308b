import json
import logging

import httpx
import numpy as np
import pytest

from decision_layer.errors import ConfigurationError, EstimatorUnavailableError
from decision_layer.shared_types import DecisionContext, Signal, SignalSource
from decision_layer.signal_kit import (
    ExternalEstimatorEndpoint,
    NoiseSpec,
    apply_noise,
    blend_composite,
    normalize_linear,
    query_external_estimator,
)

ENDPOINT = ExternalEstimatorEndpoint(address="http://estimator.test/signal", timeout=200)


def _client(handler) -> httpx.Client:
    return httpx.Client(transport=httpx.MockTransport(handler))


def test_blend_composite_endpoints():
    dense, llm = Signal("p_dense", 0.2), Signal("p_llm", 0.9)
    assert blend_composite(dense, llm, 0.0).value == pytest.approx(0.9)
    assert blend_composite(dense, llm, 1.0).value == pytest.approx(0.2)
    blended = blend_composite(dense, llm, 0.4)
    assert blended.value == pytest.approx(0.4 * 0.2 + 0.6 * 0.9)
    assert blended.source == SignalSource.COMPOSITE
    assert blended.name == "p_hat"


def test_blend_composite_rejects_bad_alpha():
    with pytest.raises(ConfigurationError):
        blend_composite(Signal("p_dense", 0.2), Signal("p_llm", 0.9), 1.2)


def test_normalize_linear_clamps():
    assert normalize_linear(5.0, 0.0, 10.0) == pytest.approx(0.5)
    assert normalize_linear(-3.0, 0.0, 10.0) == 0.0
    assert normalize_linear(30.0, 0.0, 10.0) == 1.0
    with pytest.raises(ConfigurationError):
        normalize_linear(1.0, 2.0, 2.0)


def test_apply_noise_identity_and_saturation():
    report = {"date": True, "start_time": False, "duration_min": True, "attendees": False}
    assert apply_noise(report, NoiseSpec()) == report
    flipped = apply_noise(report, NoiseSpec(false_negative_rate=1.0, false_positive_rate=1.0))
    assert flipped == {name: not value for name, value in report.items()}


def test_apply_noise_is_seeded():
    report = {name: bool(i % 2) for i, name in enumerate("abcdefghij")}
    spec = NoiseSpec(false_negative_rate=0.5, false_positive_rate=0.5, seed=7)
    assert apply_noise(report, spec) == apply_noise(report, spec)
    a = apply_noise(report, spec, np.random.default_rng(3))
    b = apply_noise(report, spec, np.random.default_rng(3))
    assert a == b


def test_apply_noise_flip_pattern():
    report = {"date": True, "start_time": True, "duration_min": True, "attendees": False}
    spec = NoiseSpec(false_negative_rate=0.5, false_positive_rate=0.0, seed=7)
    draws = np.random.default_rng(7).random(4)
    expected = {
        name: bool(present and not u < 0.5)
        for (name, present), u in zip(report.items(), draws)
    }
    assert apply_noise(report, spec) == expected
    assert apply_noise(report, spec) == expected
    assert expected["attendees"] is False


def test_apply_noise_takes_one_draw_per_field():
    report = {"date": True, "start_time": False, "duration_min": True, "attendees": False}
    rng = np.random.default_rng(7)
    apply_noise(report, NoiseSpec(false_negative_rate=0.5, false_positive_rate=0.5), rng)
    # the draw count does not depend on the rates
    assert rng.random() == np.random.default_rng(7).random(5)[4]


def test_noise_spec_validates_rates():
    with pytest.raises(ConfigurationError) as err:
        NoiseSpec(false_positive_rate=1.5)
    assert err.value.field_path == "false_positive_rate"


def test_external_estimator_roundtrip():
    seen = {}

    def handler(request: httpx.Request) -> httpx.Response:
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={"name": "p_llm", "value": 0.73})

    context = DecisionContext(signals={"p_dense": Signal("p_dense", 0.4)}, counters={"round": 1})
    with _client(handler) as client:
        signal = query_external_estimator(ENDPOINT, context, client=client)
    assert signal.value == pytest.approx(0.73)
    assert signal.source == SignalSource.EXTERNAL
    assert seen["body"]["signal_name"] == "p_llm"
    assert seen["body"]["context"]["signals"] == {"p_dense": 0.4}
    assert seen["body"]["context"]["counters"] == {"round": 1}


def test_external_estimator_clamps_with_warning(caplog):
    def handler(request):
        return httpx.Response(200, json={"name": "p_llm", "value": 1.7})

    with caplog.at_level(logging.WARNING), _client(handler) as client:
        signal = query_external_estimator(ENDPOINT, DecisionContext(), client=client)
    assert signal.value == 1.0
    assert any("clamped" in record.getMessage() for record in caplog.records)


@pytest.mark.parametrize("handler", [
    lambda request: httpx.Response(503),
    lambda request: httpx.Response(200, text="not json"),
    lambda request: httpx.Response(200, json={"name": "p_llm"}),
    lambda request: httpx.Response(200, json={"value": True}),
    lambda request: httpx.Response(200, json=[0.5]),
])
def test_external_estimator_bad_replies(handler):
    with _client(handler) as client, pytest.raises(EstimatorUnavailableError):
        query_external_estimator(ENDPOINT, DecisionContext(), client=client)


def test_external_estimator_timeout():
    def handler(request):
        raise httpx.ReadTimeout("slow", request=request)

    with _client(handler) as client, pytest.raises(EstimatorUnavailableError, match="timed out"):
        query_external_estimator(ENDPOINT, DecisionContext(), client=client)


def test_endpoint_timeout_must_be_positive():
    with pytest.raises(ConfigurationError):
        ExternalEstimatorEndpoint(address="http://x", timeout=0)
