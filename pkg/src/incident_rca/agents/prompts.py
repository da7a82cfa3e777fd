"""Prompt templates and tolerant JSON extraction from model replies."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from string import Template

from ..model import Ranking

PROMPT_VERSION = "v1"

_decoder = json.JSONDecoder()


@lru_cache(maxsize=None)
def load_template(name: str, version: str = PROMPT_VERSION) -> Template:
    text = (
        resources.files("incident_rca")
        .joinpath("resources", "prompts", version, f"{name}.txt")
        .read_text(encoding="utf-8")
    )
    return Template(text)


def render(name: str, **values) -> str:
    values.setdefault("fault_types", load_template("fault_types").template.strip())
    return load_template(name).substitute(values).strip()


def format_ranking(ranking: Ranking | None, limit: int | None = None) -> str:
    if ranking is None or not ranking.entries:
        return "(empty)"
    rows = []
    for i, e in enumerate(ranking.entries[:limit], 1):
        line = f"{i}. {e.candidate} (score {e.score:.4f})"
        if e.rationale:
            line += f" - {e.rationale}"
        rows.append(line)
    return "\n".join(rows)


def extract_json(text: str, kind: type = dict):
    """Return the first well-formed JSON value of type ``kind`` embedded in ``text``.

    Prose around the value and markdown code fences are ignored.
    """
    opener = "{" if kind is dict else "["
    pos = text.find(opener)
    while pos != -1:
        try:
            value, _ = _decoder.raw_decode(text, pos)
        except json.JSONDecodeError:
            pass
        else:
            if isinstance(value, kind):
                return value
        pos = text.find(opener, pos + 1)
    return None
