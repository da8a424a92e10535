"""Feedback channels computed from an execution trace, and their aggregation into one bundle."""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .analysis import Diagnostic
from .clients import ModelError
from .runtime import (
    Patch,
    Scene,
    ExecutionResult,
    TraceEvent,
    format_value,
    name_matches,
    type_of,
    TEXT,
)

log = logging.getLogger(__name__)

SOURCES = ("visual", "textual", "compile", "human")
CATEGORIES = (
    "caption",
    "substep_mismatch",
    "substep_ok",
    "summary",
    "logic_check",
    "repetition",
    "static_diag",
    "runtime_error",
    "user_note",
)
_RANK = {"error": 2, "warning": 1, "info": 0}
REPETITION_THRESHOLD = 3


@dataclass(frozen=True)
class FeedbackItem:
    source: str
    category: str
    severity: str
    message: str
    step_id: Optional[int] = None
    line: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "category": self.category,
            "severity": self.severity,
            "step_id": self.step_id,
            "line": self.line,
            "message": self.message,
        }

    def render(self) -> str:
        where = ""
        if self.step_id is not None:
            where += f" step {self.step_id}"
        if self.line is not None:
            where += f" line {self.line}"
        return f"- [{self.severity}] {self.category}{where}: {self.message}"


@dataclass(frozen=True)
class FeedbackBundle:
    items: tuple = ()

    @property
    def counts(self) -> dict:
        c = {"error": 0, "warning": 0, "info": 0}
        for item in self.items:
            c[item.severity] += 1
        return c

    @property
    def blocking(self) -> bool:
        """True when any error or warning item remains (the refine loop keeps going)."""
        return any(item.severity != "info" for item in self.items)

    def by_source(self, source: str) -> tuple:
        return tuple(i for i in self.items if i.source == source)

    def render(self) -> str:
        out = []
        for source in SOURCES:
            out.append(f"{source.upper()}:")
            items = self.by_source(source)
            if items:
                out.extend(i.render() for i in items)
            else:
                out.append("- (none)")
        return "\n".join(out) + "\n"

    def to_dict(self) -> dict:
        return {"items": [i.to_dict() for i in self.items], "counts": self.counts}


def aggregate(
    visual: Iterable[FeedbackItem] = (),
    textual: Iterable[FeedbackItem] = (),
    compile: Iterable[FeedbackItem] = (),
    human: Iterable[FeedbackItem] = (),
) -> FeedbackBundle:
    merged = [*visual, *textual, *compile, *human]
    order = sorted(
        range(len(merged)),
        key=lambda i: (-_RANK[merged[i].severity], merged[i].line is None, merged[i].line or 0, i),
    )
    return FeedbackBundle(tuple(merged[i] for i in order))


# -- visual -----------------------------------------------------------------

_STOPWORDS = frozenset(
    """a an the of on in at to from with by for and or is are be there any all each every that which
    this these those it its their them whether if then image picture photo find locate detect get select
    crop check count number how many much what whose who where left right above below top bottom side
    next near behind front answer return yes no not otherwise else compare whether same different
    verify see look determine exists exist object objects region""".split()
)


def target_noun(step_text: str) -> Optional[str]:
    """Last content word of a step, used as the noun the step's patches should show."""
    words = [w for w in re.findall(r"[a-z]+", step_text.lower()) if w not in _STOPWORDS]
    return words[-1] if words else None


def caption_patch(scene: Scene, patch: Patch) -> str:
    x, y, w, h = patch.box
    parts = []
    for o in scene.objects:
        ox, oy, ow, oh = o.box
        if ox >= x and oy >= y and ox + ow <= x + w and oy + oh <= y + h:
            attrs = ", ".join(f"{k}={v}" for k, v in sorted(o.attributes.items()))
            desc = f"a {o.name} ({attrs})" if attrs else f"a {o.name}"
            parts.append(f"{desc} at [{ox}, {oy}, {ow}, {oh}]")
    return "; ".join(parts) if parts else "nothing recognizable"


def _patches(value) -> list:
    if isinstance(value, Patch):
        return [value]
    if isinstance(value, tuple):
        return [v for v in value if isinstance(v, Patch)]
    return []


def _box(p: Patch) -> str:
    return "[" + ", ".join(str(v) for v in p.box) + "]"


def visual_feedback(
    trace: Sequence[TraceEvent],
    scene: Scene,
    backend,
    step_texts: Optional[dict] = None,
    caption_client=None,
    verify_client=None,
    templates_dir=None,
) -> list[FeedbackItem]:
    items: list[FeedbackItem] = []
    step_texts = step_texts or {}
    degraded: list[str] = []

    def caption(p: Patch) -> str:
        if caption_client is not None and not degraded:
            from .prompting import ask, render_template

            try:
                return ask(caption_client, render_template("CAPTION", {"REGION": _box(p)}, templates_dir)).strip()
            except ModelError as e:
                degraded.append(str(e))
        return caption_patch(scene, p)

    full = scene.full_patch()
    items.append(FeedbackItem("visual", "caption", "info", f"image {_box(full)}: {caption(full)}"))
    for ev in trace:
        if ev.kind != "assign":
            continue
        patches = _patches(ev.value_snapshot)
        if not patches:
            continue
        described = " | ".join(f"{_box(p)} {caption(p)}" for p in patches)
        items.append(
            FeedbackItem("visual", "caption", "info", f"{ev.name} = {len(patches)} patch(es): {described}", ev.step_id, ev.line)
        )

    by_step: dict[int, list[TraceEvent]] = {}
    for ev in trace:
        if ev.kind == "primitive_call" and ev.primitive in ("find", "exists") and ev.step_id is not None:
            by_step.setdefault(ev.step_id, []).append(ev)
    for step_id in sorted(by_step):
        events = by_step[step_id]
        text = step_texts.get(step_id)
        target = target_noun(text) if text else None
        if target is None:
            continue
        found: list[Patch] = []
        for ev in events:
            if ev.primitive == "find":
                found.extend(ev.value_snapshot)
            else:
                found.extend(backend.find(ev.args_snapshot[0], ev.args_snapshot[1]))
        ok: Optional[bool] = None
        if verify_client is not None and not degraded:
            from .prompting import ask, render_template

            regions = "\n".join(f"{_box(p)} {caption_patch(scene, p)}" for p in found) or "(no regions)"
            try:
                reply = ask(verify_client, render_template("VERIFY_STEP", {"STEP": text, "REGIONS": regions}, templates_dir))
                first = reply.strip().lower()
                if first.startswith(("yes", "no")):
                    ok = first.startswith("yes")
            except ModelError as e:
                degraded.append(str(e))
        if ok is None:
            names = [scene.by_id(i).name for p in found for i in p.object_ids]
            ok = any(name_matches(n, target) for n in names)
        line = events[0].line
        if ok:
            items.append(FeedbackItem("visual", "substep_ok", "info", f"step {step_id} verified: found {target}", step_id, line))
        else:
            items.append(
                FeedbackItem("visual", "substep_mismatch", "warning", f"no {target} found in step {step_id}", step_id, line)
            )
    if degraded:
        items.append(
            FeedbackItem("visual", "caption", "warning", f"vision model unavailable, used scene-graph captions: {degraded[0]}")
        )
    return items


# -- textual ----------------------------------------------------------------


def derivation_closure(trace: Sequence[TraceEvent], seq: int) -> set:
    """Seqs of all events that ``seq`` depends on, transitively."""
    seen: set = set()
    stack = list(trace[seq].deps)
    while stack:
        s = stack.pop()
        if s in seen:
            continue
        seen.add(s)
        stack.extend(trace[s].deps)
    return seen


def is_grounded(trace: Sequence[TraceEvent]) -> Optional[bool]:
    """Whether the returned value derives from some primitive call; None without a return."""
    returns = [e for e in trace if e.kind == "return"]
    if not returns:
        return None
    closure = derivation_closure(trace, returns[-1].seq)
    return any(trace[s].kind == "primitive_call" for s in closure)


def _text_values(trace: Sequence[TraceEvent]) -> list[str]:
    return [e.value_snapshot for e in trace if e.kind == "assign" and type_of(e.value_snapshot) == TEXT]


def textual_feedback(
    trace: Sequence[TraceEvent], result: ExecutionResult, client=None, templates_dir=None
) -> list[FeedbackItem]:
    items: list[FeedbackItem] = []
    repeats = Counter(
        (e.line, e.value_snapshot) for e in trace if e.kind == "assign" and type_of(e.value_snapshot) == TEXT
    )
    for (line, value), n in sorted(repeats.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        if n >= REPETITION_THRESHOLD:
            items.append(
                FeedbackItem("textual", "repetition", "info", f"value {value!r} repeated {n} times in loop at line {line}", line=line)
            )

    texts = _text_values(trace)
    answer = "none (runtime error)" if result.runtime_error else format_value(result.result)
    model_failed: Optional[str] = None
    summary = None
    if client is not None:
        from .prompting import ask, render_template

        try:
            values = "\n".join(f"- {t}" for t in texts) or "(none)"
            summary = ask(client, render_template("SUMMARIZE", {"VALUES": values, "ANSWER": answer}, templates_dir)).strip()
        except ModelError as e:
            model_failed = str(e)
    if summary is None:
        distinct = list(dict.fromkeys(texts))
        shown = ", ".join(repr(t) for t in distinct[:5])
        summary = f"{len(texts)} text value(s) assigned, {len(distinct)} distinct" + (f" ({shown})" if shown else "")
        summary += f"; final answer: {answer}"
    items.append(FeedbackItem("textual", "summary", "info", summary))

    grounded = is_grounded(trace)
    if grounded is not None:
        verdict = None
        if client is not None and model_failed is None:
            from .prompting import ask, render_template

            lines = "\n".join(
                f"line {e.line} {e.kind} {e.name or e.primitive or ''} = {format_value(e.value_snapshot)}" for e in trace
            )
            try:
                reply = ask(client, render_template("LOGIC_CHECK", {"TRACE": lines, "ANSWER": answer}, templates_dir))
                first = reply.strip().lower()
                if first.startswith(("yes", "no")):
                    verdict = (first.startswith("yes"), reply.strip())
            except ModelError as e:
                model_failed = str(e)
        ret = [e for e in trace if e.kind == "return"][-1]
        ret_line = ret.line
        if verdict is not None:
            ok, text = verdict
            sev = "info" if ok else "warning"
            items.append(FeedbackItem("textual", "logic_check", sev, text.splitlines()[0] if ok else text, line=ret_line))
        elif grounded:
            used = sorted({trace[s].primitive for s in derivation_closure(trace, ret.seq) if trace[s].kind == "primitive_call"})
            items.append(
                FeedbackItem("textual", "logic_check", "info", f"answer derives from primitive calls: {', '.join(used)}", line=ret_line)
            )
        else:
            items.append(
                FeedbackItem("textual", "logic_check", "error", "answer not grounded in any perception call", line=ret_line)
            )
    if model_failed is not None:
        items.append(FeedbackItem("textual", "summary", "warning", f"language model unavailable, used rule-based checks: {model_failed}"))
    return items


# -- compile and human ------------------------------------------------------


def compile_feedback(diags: Sequence[Diagnostic], execution: Optional[ExecutionResult]) -> list[FeedbackItem]:
    items = [FeedbackItem("compile", "static_diag", d.severity, f"{d.code}: {d.message}", line=d.line) for d in diags]
    if execution is not None and execution.runtime_error is not None:
        err = execution.runtime_error
        items.append(FeedbackItem("compile", "runtime_error", "error", f"runtime error: {err.message}", line=err.line))
    return items


def human_feedback(lines: Sequence[str]) -> list[FeedbackItem]:
    return [FeedbackItem("human", "user_note", "warning", line) for line in lines if line.strip()]
