"""Versioned prompt templates shipped as package data, plus response parsing helpers."""
from __future__ import annotations

import functools
import json
import re
from importlib import resources
from string import Template

from .oracle import ROLE_TAGS

RULES_NONE = "(none)"


@functools.lru_cache(maxsize=None)
def template(role_tag: str) -> Template:
    if role_tag not in ROLE_TAGS:
        raise KeyError(role_tag)
    text = resources.files("skillforge").joinpath(f"templates/{role_tag}.txt").read_text("utf-8")
    # the first line names the template version and is not sent
    return Template(text.split("\n", 1)[1])


def render(role_tag: str, **slots) -> str:
    return template(role_tag).substitute(**{k: str(v) for k, v in slots.items()})


def render_rules(rules) -> str:
    """Rules appear verbatim, one per line."""
    return "\n".join(f"- {r}" for r in rules) if rules else RULES_NONE


def section(prompt: str, header: str, stop: str | None = None) -> str:
    """Text following the ``header`` line up to the ``stop`` line."""
    start = prompt.find(header + "\n")
    if start < 0:
        return ""
    start += len(header) + 1
    end = prompt.find("\n" + stop, start) if stop else -1
    return prompt[start:] if end < 0 else prompt[start:end]


def parse_rules_section(prompt: str) -> list[str]:
    body = section(prompt, "LEARNED RULES:")
    out = []
    for line in body.splitlines():
        if not line.startswith("- "):
            break
        out.append(line[2:])
    return out


def first_json_object(text: str):
    """First decodable JSON object embedded in ``text``, or ``None``."""
    dec = json.JSONDecoder()
    for m in re.finditer(r"\{", text):
        try:
            obj, _ = dec.raw_decode(text, m.start())
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    return None
