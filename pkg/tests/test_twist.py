import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import WIN, case_of, span, twist_oracle
from incident_rca.config import TwistConfig
from incident_rca.twist import (
    ComponentScores,
    LatencyStats,
    NoBaselineError,
    SpanAnomaly,
    TraceDag,
    build_trace_dags,
    component_scores,
    latency_stats,
    rank_components,
    span_threshold,
    twist_analyze,
    twist_rank,
)

EQUAL = (0.25, 0.25, 0.25, 0.25)


def test_latency_stats():
    s = latency_stats([100, 100, 300])
    assert (s.median, s.mad) == (100, 0)
    assert s.mean == pytest.approx(166.6667, abs=1e-4)
    single = latency_stats([50])
    assert (single.median, single.mad, single.stddev) == (50, 0, 0)
    with pytest.raises(ValueError):
        latency_stats([])


def test_mad_threshold():
    th = span_threshold(LatencyStats(100, 10, 100, 0, 5), TwistConfig())
    assert th == pytest.approx(144.478)
    assert 200 - th == pytest.approx(55.522)


def test_fallback_threshold():
    th = span_threshold(LatencyStats(100, 0, 100, 0, 5), TwistConfig())
    assert th == pytest.approx(120)
    assert not 110 > th
    assert 0 < th


def test_no_baseline_is_an_error():
    with pytest.raises(NoBaselineError):
        twist_rank(case_of([span("t", "a", None, "x", WIN[0] + 1, 10)]))


def _flag(excess):
    return SpanAnomaly("", excess > 0, 0.0, float(excess))


def test_blast_radius_and_delay_severity():
    s = lambda t, sid, parent, svc: span(t, sid, parent, svc, 0, 1)  # noqa: E731
    spans = [
        s("t1", "A1", None, "A"), s("t1", "B1", "A1", "B"), s("t1", "C1", "A1", "C"),
        s("t1", "C2", "B1", "C"), s("t1", "C3", "B1", "C"),
        s("t2", "A2", None, "A"),
        s("t3", "A3", None, "A"), s("t3", "B2", "A3", "B"), s("t3", "C5", "B2", "C"), s("t3", "C6", "B2", "C"),
    ]
    excess = {"A1": 400, "A2": 100, "B1": 800}
    anomalies = {(x.trace_id, x.span_id): _flag(excess.get(x.span_id, 0)) for x in spans}
    scores = component_scores(build_trace_dags(spans, anomalies), anomalies)
    assert scores["A"].c3 == pytest.approx(0.5)
    assert scores["B"].c3 == 1.0 and scores["C"].c3 == 0.0
    assert scores["A"].c4 == pytest.approx(0.5)
    assert scores["A"].c1 == pytest.approx(2 / 3)
    # t1 and t2 are anomalous; B only appears in t1
    assert scores["A"].c2 == 1.0 and scores["B"].c2 == 0.5


def test_composite_and_order():
    a = ComponentScores(0.5, 1.0, 0.5, 0.5, EQUAL)
    b = ComponentScores(0.0, 1 / 3, 1.0, 0.0, EQUAL)
    assert a.composite == pytest.approx(0.625, abs=1e-12)
    assert b.composite == pytest.approx(0.3333, abs=1e-4)
    assert rank_components({"B": b, "A": a}).candidates == ["A", "B"]


def test_ties_broken_by_delay_severity_then_name():
    x = ComponentScores(0.5, 0.5, 0.0, 0.0, EQUAL)
    y = ComponentScores(0.5, 0.0, 0.0, 0.5, EQUAL)
    z = ComponentScores(0.5, 0.0, 0.0, 0.5, EQUAL)
    assert rank_components({"x": x, "z": z, "y": y}).candidates == ["y", "z", "x"]


def _two_level_case(incident_extra=0):
    spans = []
    for i in range(4):
        spans += [span(f"b{i}", "r", None, "front", 10 * i, 100), span(f"b{i}", "c", "r", "back", 10 * i + 1, 50)]
    for i in range(3):
        t = WIN[0] + 10 * i
        spans += [
            span(f"i{i}", "r", None, "front", t, 100 + incident_extra),
            span(f"i{i}", "c", "r", "back", t + 1, 50 + incident_extra),
            span(f"i{i}", "d", "r", "other", t + 2, 5),
        ]
    return case_of(spans)


def test_no_anomaly_orders_by_blast_radius():
    ranking = twist_rank(_two_level_case())
    assert ranking.candidates == ["front", "back", "other"]
    result = twist_analyze(_two_level_case())
    assert all(c.c1 == c.c2 == c.c4 == 0 for c in result.components.values())


def test_single_service():
    spans = [span("b", "r", None, "solo", 0, 10), span("i", "r", None, "solo", WIN[0], 50)]
    assert twist_rank(case_of(spans)).candidates == ["solo"]


def test_cycles_are_broken_and_flagged():
    spans = [span("t", "a", "c", "x", 0, 1), span("t", "b", "a", "y", 1, 1), span("t", "c", "b", "z", 2, 1)]
    (dag,) = build_trace_dags(spans)
    assert dag.malformed
    assert len(dag.edges) == 2
    assert _acyclic(dag)


def _acyclic(dag: TraceDag) -> bool:
    parent = {child: p for p, child in dag.edges}
    for start in parent:
        seen, cur = set(), start
        while cur in parent:
            if cur in seen:
                return False
            seen.add(cur)
            cur = parent[cur]
    return True


def test_determinism():
    case = _two_level_case(incident_extra=80)
    assert twist_rank(case).to_json() == twist_rank(case).to_json()


# --- randomized trace sets ---------------------------------------------------------

SERVICES = ["a", "b", "c", "d"]


@st.composite
def trace_sets(draw, max_traces=6):
    spans = []
    for phase, (lo, hi) in (("b", (0, WIN[0] - 1)), ("i", WIN)):
        for t in range(draw(st.integers(1, max_traces))):
            start = draw(st.integers(lo, hi - 1))
            n = draw(st.integers(1, 5))
            for k in range(n):
                parent = None if k == 0 else f"s{draw(st.integers(0, k - 1))}"
                spans.append(span(f"{phase}{t}", f"s{k}", parent, draw(st.sampled_from(SERVICES)),
                                  start + k, draw(st.integers(0, 400)), op=draw(st.sampled_from(["get", "put"]))))
    return spans


@settings(max_examples=150, deadline=None)
@given(trace_sets())
def test_matches_brute_force_oracle(spans):
    result = twist_analyze(case_of(spans))
    oracle = twist_oracle(spans, WIN)
    assert set(result.components) == set(oracle)
    for svc, cs in result.components.items():
        for got, want in zip((*cs.components, cs.composite), oracle[svc]):
            assert got == pytest.approx(want, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(trace_sets(), st.lists(st.floats(0, 1), min_size=4, max_size=4).filter(lambda w: sum(w) > 0))
def test_components_bounded_and_composite_is_dot_product(spans, raw):
    total = sum(raw)
    w = [x / total for x in raw]
    w[3] = 1 - w[0] - w[1] - w[2]
    if w[3] < 0:
        return
    config = TwistConfig(w1=w[0], w2=w[1], w3=w[2], w4=w[3])
    result = twist_analyze(case_of(spans), config)
    for cs in result.components.values():
        assert all(0 <= c <= 1 for c in cs.components)
        assert abs(cs.composite - sum(a * b for a, b in zip(config.weights, cs.components))) <= 1e-12
    scores = [e.score for e in result.ranking.entries]
    assert scores == sorted(scores, reverse=True)


@settings(max_examples=100, deadline=None)
@given(trace_sets(), st.sampled_from([2, 3, 7, 1000]))
def test_scale_invariance(spans, factor):
    scaled = [span(s.trace_id, s.span_id, s.parent_span_id, s.service, s.start, s.duration * factor, s.operation)
              for s in spans]
    a, b = twist_analyze(case_of(spans)), twist_analyze(case_of(scaled))

    def order(result):
        # thresholds scale up to float rounding, so compare order on rounded keys
        cs = result.components
        return sorted(cs, key=lambda v: (-round(cs[v].composite, 9), -round(cs[v].c4, 9), v))

    assert order(a) == order(b)
    for svc in a.components:
        assert a.components[svc].components == pytest.approx(b.components[svc].components, abs=1e-12)
