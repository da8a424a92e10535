"""Logical-step decomposition, abstract logical prompt assembly, and program generation/refinement."""

from __future__ import annotations

import functools
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

from . import analysis, dsl
from .clients import DEFAULT_MAX_TOKENS, ModelClient
from .codebase import CodebaseEntry, cosine, embed

log = logging.getLogger(__name__)

TEMPLATE_VERSION = "v1"
TEMPLATE_NAMES = ("DECOMPOSE", "GENERATE", "REFINE", "SELECT", "CAPTION", "VERIFY_STEP", "LOGIC_CHECK", "SUMMARIZE")
DEFAULT_TEMPLATES_DIR = Path(__file__).parent / "templates" / TEMPLATE_VERSION
SYSTEM_PROMPT = "You are a careful assistant for visual programming. Follow the requested output format exactly."
_SLOT_RE = re.compile(r"\{\{([A-Z_]+)\}\}")
_STEP_LINE_RE = re.compile(r"^\s*(\d+)[.)]\s*(.*?)\s*$")
_FENCE_RE = re.compile(r"```[A-Za-z0-9_-]*\n(.*?)```", re.DOTALL)


class MalformedModelReply(ValueError):
    pass


class MissingSlot(KeyError):
    def __init__(self, slot: str, template: str):
        self.slot = slot
        self.template = template
        super().__init__(f"template {template} needs slot {slot}")

    def __str__(self) -> str:
        return self.args[0]


@functools.lru_cache(maxsize=None)
def _load(directory: str, name: str) -> str:
    return (Path(directory) / f"{name}.txt").read_text(encoding="utf-8")


def template_slots(name: str, templates_dir: Union[str, Path, None] = None) -> list[str]:
    text = _load(str(templates_dir or DEFAULT_TEMPLATES_DIR), name)
    return list(dict.fromkeys(_SLOT_RE.findall(text)))


def render_template(name: str, slots: dict, templates_dir: Union[str, Path, None] = None) -> str:
    if name not in TEMPLATE_NAMES:
        raise ValueError(f"unknown template {name!r}")
    text = _load(str(templates_dir or DEFAULT_TEMPLATES_DIR), name)
    for slot in _SLOT_RE.findall(text):
        if slot not in slots:
            raise MissingSlot(slot, name)
    return _SLOT_RE.sub(lambda m: str(slots[m.group(1)]), text)


def grammar_summary(templates_dir: Union[str, Path, None] = None) -> str:
    return _load(str(templates_dir or DEFAULT_TEMPLATES_DIR), "GRAMMAR").rstrip("\n")


def ask(client: ModelClient, prompt: str, max_tokens: int = DEFAULT_MAX_TOKENS) -> str:
    messages = [{"role": "system", "content": SYSTEM_PROMPT}, {"role": "user", "content": prompt}]
    return client.complete(messages, temperature=0.0, max_tokens=max_tokens)


# -- logical steps ----------------------------------------------------------


def parse_steps(reply: str) -> list[str]:
    steps = []
    for line in reply.splitlines():
        m = _STEP_LINE_RE.match(line)
        if not m:
            continue
        number, text = int(m.group(1)), m.group(2)
        if number != len(steps) + 1:
            raise MalformedModelReply(f"step numbers must be contiguous from 1, got {number} after {len(steps)}")
        if not text:
            raise MalformedModelReply(f"step {number} is empty")
        steps.append(text)
    if not steps:
        raise MalformedModelReply("no numbered step lines in reply")
    return steps


def generate_logical_steps(query: str, client: ModelClient, templates_dir=None) -> list[str]:
    if not query.strip():
        raise ValueError("query must not be empty")
    prompt = render_template("DECOMPOSE", {"QUERY": query}, templates_dir)
    try:
        return parse_steps(ask(client, prompt))
    except MalformedModelReply as e:
        retry = f"{prompt}\nYour previous reply could not be used ({e}). Reply with numbered lines \"1. <step>\" only.\n"
        return parse_steps(ask(client, retry))


# -- abstract logical prompt ------------------------------------------------


@dataclass(frozen=True)
class AlPrompt:
    query: str
    steps: tuple
    abstract_codes: tuple
    rendered: str
    donor_ids: tuple = ()
    similarities: tuple = ()


def format_steps(steps: Sequence[str]) -> str:
    return "\n".join(f"{i}. {s}" for i, s in enumerate(steps, start=1))


def build_al_prompt(
    query: str,
    steps: Sequence[str],
    retrieved: Sequence[CodebaseEntry],
    k: int = 2,
    templates_dir=None,
) -> AlPrompt:
    if not steps:
        raise ValueError("steps must not be empty")
    steps_vec = embed(" ".join(steps))
    scored = sorted(((cosine(e.embedding, steps_vec), e) for e in retrieved), key=lambda se: (-se[0], se[1].id))
    scored = scored[:k]
    if log.isEnabledFor(logging.DEBUG):
        for score, e in scored:
            per_step = [round(cosine(e.embedding, embed(s)), 4) for s in steps]
            log.debug("donor %s whole-steps=%.4f per-step=%s", e.id, score, per_step)
    abstracts = tuple(analysis.abstract_code(dsl.parse(e.code)) for _, e in scored)
    if abstracts:
        examples = "\n".join(f"Example {i}:\n{a.text}" for i, a in enumerate(abstracts, start=1))
    else:
        examples = "(none)"
    rendered = render_template(
        "GENERATE",
        {"GRAMMAR": grammar_summary(templates_dir), "STEPS": format_steps(steps), "EXAMPLES": examples, "QUERY": query},
        templates_dir,
    )
    return AlPrompt(
        query,
        tuple(steps),
        abstracts,
        rendered,
        tuple(e.id for _, e in scored),
        tuple(s for s, _ in scored),
    )


# -- program generation -----------------------------------------------------


@dataclass(frozen=True)
class Generation:
    source: dsl.SourceProgram
    ast: dsl.ProgramAst
    issues: tuple = ()  # problems left after the corrective re-ask
    reasked: bool = False
    first_issues: tuple = field(default=(), compare=False)


def extract_code(reply: str) -> str:
    m = _FENCE_RE.search(reply)
    text = m.group(1) if m else reply
    lines = text.split("\n")
    while lines and not lines[0].strip():
        lines.pop(0)
    while lines and not lines[-1].strip():
        lines.pop()
    return "\n".join(lines) + "\n"


def check_program(text: str, step_ids: Sequence[int]) -> tuple[Optional[dsl.ProgramAst], list[str]]:
    """Parse ``text`` and compare its step comments with ``step_ids``."""
    try:
        ast = dsl.parse(text)
    except dsl.ParseFailure as e:
        return None, [f"parse error at line {err.line}: {err.message}" for err in e.errors]
    present = set(dsl.step_comments(ast))
    problems = []
    missing = [i for i in step_ids if i not in present]
    extra = sorted(present - set(step_ids))
    if missing:
        problems.append(f"missing step comments: {missing}")
    if extra:
        problems.append(f"unexpected step comments: {extra}")
    return ast, problems


def _generate(client: ModelClient, prompt: str, step_ids: Sequence[int], origin: str) -> Generation:
    text = extract_code(ask(client, prompt))
    ast, problems = check_program(text, step_ids)
    if ast is not None and not problems:
        return Generation(dsl.print_canonical(ast, origin), ast)
    retry = (
        f"{prompt}\nYour previous reply had these problems:\n"
        + "\n".join(f"- {p}" for p in problems)
        + "\nReply with the corrected program only.\n"
    )
    text = extract_code(ask(client, retry))
    ast2, problems2 = check_program(text, step_ids)
    if ast2 is None:
        raise MalformedModelReply("; ".join(problems2))
    return Generation(dsl.print_canonical(ast2, origin), ast2, tuple(problems2), True, tuple(problems))


def generate_program(al: AlPrompt, client: ModelClient) -> Generation:
    return _generate(client, al.rendered, range(1, len(al.steps) + 1), "generated")


def refine_program(
    query: str, program: dsl.SourceProgram, feedback_text: str, client: ModelClient, templates_dir=None
) -> Generation:
    ast = dsl.parse(program)
    prompt = render_template(
        "REFINE",
        {"QUERY": query, "PROGRAM": dsl.canonical_text(ast), "FEEDBACK": feedback_text},
        templates_dir,
    )
    return _generate(client, prompt, sorted(dsl.step_comments(ast)), "refined")


def ask_selector(client: ModelClient, draft, refined, draft_fb, refined_fb, templates_dir=None) -> Optional[str]:
    """Ask the model to choose between a stored draft (A) and a refined program (B)."""
    prompt = render_template(
        "SELECT",
        {
            "QUERY": draft.query,
            "PROGRAM_A": draft.code.text,
            "FEEDBACK_A": draft_fb.render(),
            "PROGRAM_B": refined.code.text,
            "FEEDBACK_B": refined_fb.render(),
        },
        templates_dir,
    )
    reply = ask(client, prompt, max_tokens=8).strip().upper()
    if reply[:1] in ("A", "B"):
        return reply[:1]
    log.warning("selector reply %r unusable; falling back to policy", reply[:40])
    return None
