"""Rule-driven scripted responders for every role, tuned to deskworld.

Each responder reads only the rendered prompt, so the same request always
gets the same answer regardless of call order or thread interleaving.

Executor contract
    1. For every ``requires P before T`` (or ``before any``) visible in the
       prompt whose ``T`` is the requested tool (or ``any``) and whose ``P``
       has not yet been answered with ``ok``/``warning`` in this task: emit P.
    2. Otherwise emit the requested call, filling each ``?`` from the last
       ``T.a=v`` in the prompt, else the last ``a=v`` of an ``ok`` observation,
       else leaving it as ``?``.
"""
from __future__ import annotations

import json
import re

from .deskworld import ESCALATE, canonical, parse_call
from .oracle import ChatRequest, ScriptedBackend
from .prompts import parse_rules_section, section

SENTIMENT_RULE = ("Do not extract workflow guardrails triggered by sentiment keywords; require verifiable "
                  "state, API preconditions, or cross-turn data dependencies.")
CONTRACT_RULE = "Extract tool-scoped argument bindings and preconditions that error observations reveal, one skill per contract."
REFINER_RULE = "Remove the step that induced unneeded tool calls instead of only narrowing the trigger."
REFACTORER_RULE = "Only abstract groups whose members share a verified tool contract."

_REQUEST_RE = re.compile(r"\[call:\s*([A-Za-z_][A-Za-z0-9_]*)\((.*?)\)\]")
_REQUIRES_RE = re.compile(r"requires ([A-Za-z_][A-Za-z0-9_]*\([^)]*\)) before ([A-Za-z_][A-Za-z0-9_]*)")
_BINDING_RE = re.compile(r"\b([A-Za-z_][A-Za-z0-9_]*)\.([A-Za-z_][A-Za-z0-9_]*)=([^\s,;)\]|]+)")
_KV_RE = re.compile(r"\b([A-Za-z_][A-Za-z0-9_]*)=([^\s,;)\]|]+)")
_SKILL_RE = re.compile(r'<<skill id="([^"]+)" v=(\d+) name="([^"]*)">>\n(.*?)\n<</skill>>', re.S)
_ERR_BIND_RE = re.compile(r"error: ([A-Za-z_][A-Za-z0-9_]*) requires \1\.([A-Za-z_][A-Za-z0-9_]*)=(\S+)")
_ERR_PRE_RE = re.compile(r"error: ([A-Za-z_][A-Za-z0-9_]*) requires ([A-Za-z_][A-Za-z0-9_]*\([^)]*\)) before \1")


def _history_lines(prompt: str) -> list[str]:
    return [ln for ln in section(prompt, "HISTORY:", "TURN:").splitlines() if ln.startswith("turn ")]


def executor(req: ChatRequest) -> str | None:
    if req.role_tag != "executor":
        return None
    prompt = req.prompt
    m = None
    for line in prompt.splitlines():
        if line.startswith("CURRENT REQUEST:"):
            m = _REQUEST_RE.search(line)
    if m is None:
        return "DONE"
    tool = m.group(1)
    parsed = parse_call(f"CALL {tool}({m.group(2)})")
    args = parsed[1] if parsed else {}
    history = _history_lines(prompt)
    answered = set()
    for ln in history:
        call_part, _, obs = ln.partition(" -> ")
        if obs.startswith(("ok", "warning")) and "CALL " in call_part:
            answered.add(call_part.split("CALL ", 1)[1].strip())
    for pre, target in _REQUIRES_RE.findall(prompt):
        if target in (tool, "any") and pre not in answered:
            return f"CALL {pre}"
    ok_values: dict[str, str] = {}
    for ln in history:
        _, _, obs = ln.partition(" -> ")
        if obs.startswith("ok:"):
            ok_values.update(_KV_RE.findall(obs))
    bound: dict[str, str] = {}
    for t, a, v in _BINDING_RE.findall(prompt):
        if t == tool:
            bound[a] = v
    filled = {}
    for a, v in args.items():
        if v == "?":
            v = bound.get(a, ok_values.get(a, "?"))
        filled[a] = v
    return f"CALL {canonical(tool, filled)}"


def _trace_lines(prompt: str) -> list[str]:
    return [ln for ln in section(prompt, "TRACE:").splitlines() if ln.startswith("step ")]


def _skill_json(name, description, semantics, triggers, tools, domains, body, bundle) -> dict:
    return {"name": name, "description": description, "semantics": semantics,
            "trigger_conditions": triggers, "allowed_tools": tools, "domains": domains,
            "body": body, "bundle": bundle}


def _family(tool: str) -> str:
    return tool.split("_", 1)[0]


def extractor_candidates(prompt: str) -> list[dict]:
    rules = " ".join(parse_rules_section(prompt)).lower()
    lines = _trace_lines(prompt)
    out: list[dict] = []
    seen = set()
    for ln in lines:
        for t, a, v in _ERR_BIND_RE.findall(ln):
            if (t, a) in seen:
                continue
            seen.add((t, a))
            out.append(_skill_json(
                f"{t}_{a}_binding", f"{t} needs {a}={v}", "callable_function", [f"calling {t}"], [t],
                [_family(t)], f"When calling {t}, pass {a}={v}.\n{t}.{a}={v}",
                [{"kind": "unit", "input": ln, "expected": f"supplies {t}.{a}={v}",
                  "rule": f"The skill must supply {t}.{a}={v} when calling {t}."}]))
        for t, pre in _ERR_PRE_RE.findall(ln):
            if (t, pre) in seen:
                continue
            seen.add((t, pre))
            out.append(_skill_json(
                f"{t}_precondition", f"{pre} must precede {t}", "workflow", [f"calling {t}"], [t],
                [_family(t)], f"Before {t}, call {pre}.\nrequires {pre} before {t}",
                [{"kind": "unit", "input": ln, "expected": f"{pre} before {t}",
                  "rule": f"The skill must place {pre} before {t}."}]))
    instruction = section(prompt, "TRACE:").splitlines()[:1]
    urgent = bool(instruction) and "urgent request" in instruction[0]
    if urgent and "sentiment keywords" not in rules:
        tools = [m.group(1) for ln in lines for m in [re.search(r"CALL ([A-Za-z_][A-Za-z0-9_]*)\(", ln)] if m]
        fam = next((_family(t) for t in tools if not t.startswith("support_")), "desk")
        out.append(_skill_json(
            f"{fam}_urgent_request_escalation", "Escalate urgent requests before acting.", "workflow",
            ["urgent request from the user"], [ESCALATE], [fam],
            f"Urgent requests need extra care.\nrequires {ESCALATE}(priority=high) before any",
            [{"kind": "unit", "input": "This is an urgent request from the user.",
              "expected": "the request is escalated", "rule": "The skill must escalate urgent requests."}]))
    return out


def extractor(req: ChatRequest) -> str | None:
    if req.role_tag != "extractor":
        return None
    m = re.search(r"^SAMPLE: (\d+) of (\d+)$", req.prompt, re.M)
    k = int(m.group(1)) if m else 1
    cands = extractor_candidates(req.prompt)
    if not cands:
        return json.dumps({"skill": None})
    pick = cands[k - 1] if k - 1 < len(cands) else cands[0]
    return json.dumps({"skill": pick}, sort_keys=True)


_MEMBER_RE = re.compile(r"^- \[([^\]]+)\] source=\S+ tools: (.*?); errors: (.*)$", re.M)


def refactorer(req: ChatRequest) -> str | None:
    if req.role_tag != "refactorer":
        return None
    members = _MEMBER_RE.findall(req.prompt)
    if not members or any(mid.startswith("skill:") for mid, _, _ in members):
        # an existing skill already covers this group
        return json.dumps({"skills": []})
    tool_sets = [set(t.strip() for t in tools.split(",")) - {"none"} for _, tools, _ in members]
    shared = sorted(set.intersection(*tool_sets))
    errors = " | ".join(e for _, _, e in members)
    out = []
    for t in shared:
        lines = sorted({f"{t}.{a}={v}" for tt, a, v in _ERR_BIND_RE.findall(errors) if tt == t}
                       | {f"requires {pre} before {t}" for tt, pre in _ERR_PRE_RE.findall(errors) if tt == t})
        if not lines:
            continue
        first_err = next(e.strip() for e in errors.split(" | ") if t in e and e.strip().startswith("error:"))
        out.append(_skill_json(
            f"{t}_contract", f"Consolidated contract for {t}", "workflow", [f"calling {t}"], [t],
            [_family(t)], f"Contract for {t}.\n" + "\n".join(lines),
            [{"kind": "unit", "input": first_err, "expected": f"the {t} contract is honoured",
              "rule": f"The skill must state the {t} contract."}]))
    return json.dumps({"skills": out}, sort_keys=True)


def refiner(req: ChatRequest) -> str | None:
    if req.role_tag != "refiner":
        return None
    prompt = req.prompt
    skill_text = section(prompt, "SKILL:", "BUNDLE:")
    try:
        skill = json.loads(skill_text)
    except json.JSONDecodeError:
        return "unparseable skill"
    rules = " ".join(parse_rules_section(prompt))
    evidence = section(prompt, "EVIDENCE:")
    harmful_calls = set(re.findall(r"CALL ([A-Za-z_][A-Za-z0-9_]*\([^)]*\)) -> warning", evidence))
    body_lines = skill["body"].splitlines()
    if "Remove the step" in rules:
        kept = [ln for ln in body_lines
                if not any(ln.startswith(f"requires {c} before") for c in harmful_calls)]
        skill["body"] = "\n".join(kept) or skill["description"]
    else:
        trig = skill["trigger_conditions"] or ["always"]
        skill["trigger_conditions"] = [trig[0] + " and the request explicitly asks for it"] + trig[1:]
    for k in ("id", "version", "parent_id", "source_role", "created_at_task"):
        skill.pop(k, None)
    return json.dumps({"skill": skill}, sort_keys=True)


def credit(req: ChatRequest) -> str | None:
    if req.role_tag != "credit":
        return None
    prompt = req.prompt
    trace = _trace_lines(prompt)
    first = section(prompt, "TRACE:").splitlines()[:1]
    judgments = []
    for sid, ver, _name, body in _SKILL_RE.findall(section(prompt, "EXPOSED SKILLS:")):
        verdict, why, scope = "neutral", "no observable effect", first[0] if first else ""
        harmful = helpful = None
        for pre, _t in _REQUIRES_RE.findall(body):
            for ln in trace:
                if f"CALL {pre} -> warning" in ln and harmful is None:
                    harmful = ln
                if f"CALL {pre} -> ok" in ln and helpful is None:
                    helpful = ln
        for t, a, v in _BINDING_RE.findall(body):
            for ln in trace:
                call, _, obs = ln.partition(" -> ")
                if f"CALL {t}(" in call and f"{a}={v}" in call and obs.startswith("ok") and helpful is None:
                    helpful = ln
        if harmful is not None:
            verdict, why, scope = "harmful", "induced an unneeded call", harmful
        elif helpful is not None:
            verdict, why, scope = "helpful", "supplied a contract the call needed", helpful
        judgments.append({"skill_id": sid, "version": int(ver), "judgment": verdict,
                          "rationale": why, "scope": scope})
    return json.dumps({"judgments": judgments}, sort_keys=True)


def induced_calls(body: str) -> list[str]:
    return [pre for pre, _ in _REQUIRES_RE.findall(body)]


def bundle_verdict(req: ChatRequest) -> str | None:
    if req.role_tag != "bundle_verdict":
        return None
    prompt = req.prompt
    body = section(prompt, "SKILL BODY:", "CASE KIND:")
    fragment = ""
    rule = ""
    for line in prompt.splitlines():
        if line.startswith("CASE INPUT: "):
            fragment = line[len("CASE INPUT: "):]
        elif line.startswith("VERDICT RULE: "):
            rule = line[len("VERDICT RULE: "):]
    calls = induced_calls(body)
    if "must not" in rule:
        for c in calls:
            if c in fragment:
                return f"FAIL: body induces {c} present in the fragment"
        return "PASS"
    for t, a, v in _BINDING_RE.findall(body):
        if f"{t}.{a}={v}" in fragment or (f"{t}(" in fragment and f"{a}={v}" in fragment):
            return "PASS"
    for c in calls:
        if c in fragment:
            return "PASS"
    for pre, t in _REQUIRES_RE.findall(body):
        if f"requires {pre} before {t}" in fragment:
            return "PASS"
    if "CALL " not in fragment and "error:" not in fragment:
        return "PASS"
    return "FAIL: the fragment shows behavior the body does not produce"


def meta(req: ChatRequest) -> str | None:
    if req.role_tag != "meta":
        return None
    prompt = req.prompt
    role = re.search(r"^ROLE: (\w+)", prompt, re.M).group(1)
    current = [ln[2:] for ln in section(prompt, "CURRENT RULES:", "EVIDENCE:").splitlines() if ln.startswith("- ")]
    evidence = section(prompt, "EVIDENCE:", "Answer in three sections:")
    rows = re.split(r"\n(?=\[)", evidence.strip())
    new = list(current)
    notes = []
    if role == "extractor":
        for r in rows:
            m = re.search(r"harmful=(\d+)", r)
            if m and int(m.group(1)) > 0 and ESCALATE in r:
                notes.append("guardrails keyed on urgency induced unneeded escalations")
                for rule in (SENTIMENT_RULE, CONTRACT_RULE):
                    if rule not in new:
                        new.append(rule)
                break
    elif role == "refiner":
        for r in rows:
            if "state=archived" in r and "gate=fail" in r and "induces" in r:
                notes.append("narrowed revisions kept the harmful step and failed the gate")
                if REFINER_RULE not in new:
                    new.append(REFINER_RULE)
                break
    elif role == "refactorer":
        if rows and REFACTORER_RULE not in new:
            notes.append("refactored skills are only useful when they restate a real contract")
            new.append(REFACTORER_RULE)
    if not new:
        return "ANALYSIS: nothing conclusive.\nSUMMARY: no rule yet.\nRULES:\n"
    body = "\n".join(f"{i}. {r}" for i, r in enumerate(new, 1))
    analysis = "; ".join(notes) or "evidence is consistent with the current rules"
    return f"ANALYSIS: {analysis}.\nSUMMARY: keep the rules that explain the evidence.\nRULES:\n{body}\n"


def failing_meta(req: ChatRequest) -> str | None:
    if req.role_tag != "meta":
        return None
    return "I could not summarize the evidence."


RESPONDERS = (executor, extractor, refactorer, refiner, credit, bundle_verdict, meta)


def deskworld_backend(fail_meta: bool = False, tape=None) -> ScriptedBackend:
    """Strict scripted backend answering every role for deskworld prompts.

    ``tape`` entries (per role tag) take precedence over the rules."""
    rules = list(RESPONDERS)
    if fail_meta:
        rules = [failing_meta] + [r for r in rules if r is not meta]
    return ScriptedBackend(tape or {}, rules=rules, strict=True)
