"""Builders and independent oracles shared by the test modules."""

from __future__ import annotations

import json
from collections import defaultdict

from incident_rca.agents.backends import CallbackBackend
from incident_rca.model import IncidentCase, LogEntry, MetricSeries, Severity, Span

WIN = (1_000_000, 2_000_000)


def span(trace, sid, parent, service, start, duration, op="op"):
    return Span(trace, sid, parent, service, op, start, duration)


def case_of(spans=(), metrics=(), logs=(), window=WIN, case_id="c"):
    return IncidentCase(case_id, window, tuple(metrics), tuple(logs), tuple(spans))


def series(pod, metric, samples):
    return MetricSeries(pod, metric, tuple(samples))


def entry(pod, time, message, severity="INFO"):
    return LogEntry(pod, time, Severity.parse(severity), message)


def rerank(decision, target=None, ranking=None):
    obj = {"reasoning": "scripted", "decision": decision}
    if target is not None:
        obj["target"] = target
    if ranking is not None:
        obj["ranking"] = ranking
    return json.dumps(obj)


REMEDIATION = json.dumps(
    {
        "summary": "cart exhausted its memory limit",
        "actions": [{"step": "restart cart", "impact": "restores service"}],
        "confidence": [{"candidate": "cart", "confidence": "high"}],
    }
)


def role_backend(rerank_replies, deep_dive="pod looks unhealthy", remediation=REMEDIATION, vision=False):
    """Answer by agent role, read from the system prompt; rerank replies are consumed in order
    and the last one repeats."""
    queue = list(rerank_replies)

    def reply(turns):
        role = turns[0].text.splitlines()[0].lower()
        if "deep dive agent" in role:
            return deep_dive
        if "remediation agent" in role:
            return remediation
        return queue.pop(0) if len(queue) > 1 else queue[0]

    return CallbackBackend(reply, vision=vision)


# --- oracles ---------------------------------------------------------------


def _median(xs):
    s = sorted(xs)
    n = len(s)
    return s[n // 2] if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2


def twist_oracle(spans, window, k=3.0, r=0.2, weights=(0.25, 0.25, 0.25, 0.25)):
    """Component scores by direct per-definition loops. Assumes acyclic parent links."""
    base = defaultdict(list)
    for s in spans:
        if s.start < window[0]:
            base[(s.service, s.operation)].append(s.duration)
    pooled = [d for ds in base.values() for d in ds]

    def threshold(key):
        ds = base.get(key) or pooled
        med = _median(ds)
        mad = _median([abs(d - med) for d in ds])
        return med + k * 1.4826 * mad if mad > 0 else med * (1 + r)

    inc = [s for s in spans if window[0] <= s.start < window[1]]
    flagged, excess = {}, {}
    for s in inc:
        th = threshold((s.service, s.operation))
        flagged[(s.trace_id, s.span_id)] = s.duration > th
        excess[(s.trace_id, s.span_id)] = max(0.0, s.duration - th)

    services = sorted({s.service for s in inc})
    traces = sorted({s.trace_id for s in inc})
    anomalous = [t for t in traces if any(flagged[(s.trace_id, s.span_id)] for s in inc if s.trace_id == t)]
    out = {}
    raw3, raw4 = {}, {}
    for svc in services:
        mine = [s for s in inc if s.service == svc]
        n_flag = sum(1 for s in mine if flagged[(s.trace_id, s.span_id)])
        c1 = n_flag / len(mine)
        hits = sum(1 for t in anomalous if any(s.trace_id == t for s in mine))
        c2 = hits / len(anomalous) if anomalous else 0.0
        kids = 0
        for s in mine:
            kids += sum(1 for c in inc if c.trace_id == s.trace_id and c.parent_span_id == s.span_id)
        raw3[svc] = kids / len(mine)
        raw4[svc] = max([excess[(s.trace_id, s.span_id)] for s in mine if flagged[(s.trace_id, s.span_id)]], default=0.0)
        out[svc] = [c1, c2]
    top3 = max(raw3.values(), default=0.0)
    top4 = max(raw4.values(), default=0.0)
    for svc in services:
        c3 = raw3[svc] / top3 if top3 > 0 else 0.0
        c4 = raw4[svc] / top4 if top4 > 0 else 0.0
        comps = out[svc] + [c3, c4]
        out[svc] = (*comps, sum(w * c for w, c in zip(weights, comps)))
    return out


def pagerank_oracle(nodes, edges, personalization, damping, tol=1e-12, max_iter=100_000):
    """Plain-Python power iteration with dangling mass returned to the personalization."""
    total = sum(personalization.get(v, 0.0) for v in nodes)
    p = {v: personalization.get(v, 0.0) / total for v in nodes}
    out = defaultdict(list)
    for (a, b), w in edges.items():
        out[a].append((b, w))
    x = dict(p)
    for _ in range(max_iter):
        nxt = {v: (1 - damping) * p[v] for v in nodes}
        for v in nodes:
            if out[v]:
                wsum = sum(w for _, w in out[v])
                for b, w in out[v]:
                    nxt[b] += damping * x[v] * w / wsum
            else:
                for u in nodes:
                    nxt[u] += damping * x[v] * p[u]
        diff = sum(abs(nxt[v] - x[v]) for v in nodes)
        x = nxt
        if diff < tol:
            break
    return x
