"""The decompose -> generate -> execute -> feedback -> refine loop, codebase write-back and batch evaluation."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

from . import analysis, dsl
from .clients import ModelClient, ModelError
from .codebase import Codebase, make_entry, retrieve, select_survivor
from .feedback import (
    SOURCES,
    FeedbackBundle,
    aggregate,
    compile_feedback,
    human_feedback,
    textual_feedback,
    visual_feedback,
)
from .prompting import MalformedModelReply, build_al_prompt, generate_logical_steps, generate_program, refine_program
from .runtime import (
    DEFAULT_MAX_STEPS,
    ExecutionResult,
    Scene,
    SyntheticBackend,
    Value,
    execute,
    format_value,
    load_scene,
    scene_from_dict,
    value_to_json,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1"
CODEBASE_ACTIONS = ("inserted", "replaced_draft", "kept_draft", "none")


@dataclass(frozen=True)
class EngineConfig:
    max_iterations: int = 3
    retrieval_k: int = 2
    bootstrap_fraction: float = 0.2
    seed: int = 0
    mode: str = "hermetic"
    step_limit: int = DEFAULT_MAX_STEPS
    human_feedback_enabled: bool = False
    feedback_channels: tuple = SOURCES
    templates_dir: Optional[str] = None

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not 0 <= self.bootstrap_fraction <= 1:
            raise ValueError("bootstrap_fraction must lie in [0, 1]")
        if self.retrieval_k < 0:
            raise ValueError("retrieval_k must be non-negative")
        if self.mode not in ("hermetic", "live"):
            raise ValueError(f"mode must be 'hermetic' or 'live', not {self.mode!r}")
        unknown = set(self.feedback_channels) - set(SOURCES)
        if unknown:
            raise ValueError(f"unknown feedback channel {sorted(unknown)[0]!r}")


@dataclass
class Clients:
    """Model endpoints; only ``generator`` is needed in hermetic mode."""

    generator: ModelClient
    caption: Optional[ModelClient] = None
    verify: Optional[ModelClient] = None
    textual: Optional[ModelClient] = None
    selector: Optional[ModelClient] = None


@dataclass(frozen=True)
class IterationRecord:
    index: int
    program: dsl.SourceProgram
    diagnostics: tuple
    execution: Optional[ExecutionResult]
    feedback: FeedbackBundle
    stopped_early: bool = False
    lint_score: float = 10.0
    notes: tuple = ()

    @property
    def clean(self) -> bool:
        """No static errors and no runtime error."""
        return (
            not analysis.has_errors(list(self.diagnostics))
            and self.execution is not None
            and self.execution.runtime_error is None
        )

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "program": self.program.text,
            "diagnostics": [d.to_dict() for d in self.diagnostics],
            "lint_score": self.lint_score,
            "execution": None if self.execution is None else self.execution.to_dict(),
            "feedback": self.feedback.to_dict(),
            "stopped_early": self.stopped_early,
            "notes": list(self.notes),
        }


@dataclass
class TaskReport:
    task_id: str
    query: str
    final_result: Value = None
    iterations: list = field(default_factory=list)
    codebase_action: str = "none"
    wall_time: float = 0.0
    steps: tuple = ()
    failure: Optional[str] = None
    failure_prompt: Optional[str] = None  # prompt prefix when no mock rule matched

    @property
    def answered(self) -> bool:
        last = self.iterations[-1] if self.iterations else None
        return self.failure is None and last is not None and last.execution is not None and last.execution.ok

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "task_id": self.task_id,
            "query": self.query,
            "logical_steps": list(self.steps),
            "final_result": value_to_json(self.final_result) if self.answered else None,
            "iterations": [r.to_dict() for r in self.iterations],
            "codebase_action": self.codebase_action,
            "wall_time": round(self.wall_time, 6),
            "failure": self.failure,
        }


HumanChannel = Callable[[int, FeedbackBundle], Sequence[str]]


def collect_feedback(
    ast: dsl.ProgramAst,
    diags: Sequence[analysis.Diagnostic],
    execution: ExecutionResult,
    scene: Scene,
    backend,
    cfg: EngineConfig,
    clients: Optional[Clients] = None,
    human_lines: Sequence[str] = (),
) -> FeedbackBundle:
    live = clients is not None and cfg.mode == "live"
    channels = set(cfg.feedback_channels)
    visual = textual = compile_items = human = []
    if "visual" in channels:
        visual = visual_feedback(
            execution.trace,
            scene,
            backend,
            dsl.step_comments(ast),
            caption_client=clients.caption if live else None,
            verify_client=clients.verify if live else None,
            templates_dir=cfg.templates_dir,
        )
    if "textual" in channels:
        textual = textual_feedback(execution.trace, execution, clients.textual if live else None, cfg.templates_dir)
    if "compile" in channels:
        compile_items = compile_feedback(diags, execution)
    if "human" in channels:
        human = human_feedback(human_lines)
    return aggregate(visual, textual, compile_items, human)


def refine(query: str, program: dsl.SourceProgram, feedback: FeedbackBundle, client: ModelClient, templates_dir=None):
    """One refinement call; returns a :class:`prompting.Generation`."""
    if not feedback.items:
        raise ValueError("refinement needs feedback")
    return refine_program(query, program, feedback.render(), client, templates_dir)


def run_task(
    query: str,
    scene: Scene,
    cb: Codebase,
    cfg: EngineConfig,
    clients: Clients,
    backend=None,
    *,
    task_id: str = "task",
    human: Optional[HumanChannel] = None,
) -> TaskReport:
    started = time.perf_counter()
    backend = backend or SyntheticBackend(scene)
    report = TaskReport(task_id, query)

    def finish() -> TaskReport:
        report.wall_time = time.perf_counter() - started
        return report

    try:
        steps = generate_logical_steps(query, clients.generator, cfg.templates_dir)
        report.steps = tuple(steps)
        al = build_al_prompt(query, steps, retrieve(cb, query, cfg.retrieval_k), cfg.retrieval_k, cfg.templates_dir)
        gen = generate_program(al, clients.generator)
    except (ModelError, MalformedModelReply) as e:
        report.failure = f"{type(e).__name__}: {e}"
        report.failure_prompt = getattr(e, "prefix", None)
        log.warning("task %s aborted before execution: %s", task_id, e)
        return finish()

    program, ast = gen.source, gen.ast
    notes = tuple(f"generation issue: {p}" for p in gen.issues)
    for i in range(1, cfg.max_iterations + 1):
        diags = tuple(analysis.analyze(ast))
        execution = execute(ast, scene, backend, max_steps=cfg.step_limit)
        auto = collect_feedback(ast, diags, execution, scene, backend, cfg, clients)
        lines: Sequence[str] = ()
        if cfg.human_feedback_enabled and human is not None and "human" in cfg.feedback_channels:
            lines = human(i, auto)
        bundle = aggregate(auto.items, human_feedback(lines)) if lines else auto
        stop = not bundle.blocking
        record = IterationRecord(i, program, diags, execution, bundle, stop, analysis.lint_score(ast, list(diags)), notes)
        report.iterations.append(record)
        if stop or i == cfg.max_iterations:
            break
        try:
            gen = refine(query, program, bundle, clients.generator, cfg.templates_dir)
        except MalformedModelReply as e:
            report.iterations[-1] = dataclasses.replace(
                record, notes=record.notes + (f"refinement failed, keeping previous program: {e}",)
            )
            notes = ()
            continue
        except ModelError as e:
            report.iterations[-1] = dataclasses.replace(record, notes=record.notes + (f"model failure: {e}",))
            report.failure = f"{type(e).__name__}: {e}"
            report.failure_prompt = getattr(e, "prefix", None)
            return finish()
        program, ast = gen.source, gen.ast
        notes = tuple(f"generation issue: {p}" for p in gen.issues)

    last = report.iterations[-1]
    report.final_result = last.execution.result if last.execution is not None else None
    report.codebase_action = write_back(cb, query, report.steps, report.iterations, scene, backend, cfg, clients)
    return finish()


def write_back(
    cb: Codebase,
    query: str,
    steps: Sequence[str],
    iterations: Sequence[IterationRecord],
    scene: Scene,
    backend,
    cfg: EngineConfig,
    clients: Optional[Clients] = None,
) -> str:
    final = iterations[-1]
    if not final.clean:
        return "none"
    status = "refined" if len(iterations) > 1 else "draft"
    candidate = make_entry(query, steps, final.program, status=status, runs=1, error_free_runs=1)
    existing = cb.find_by_query(query)
    if existing is None:
        cb.add(candidate)
        return "inserted"
    old_ast = dsl.parse(existing.code)
    old_diags = analysis.analyze(old_ast)
    old_exec = execute(old_ast, scene, backend, max_steps=cfg.step_limit)
    old_fb = collect_feedback(old_ast, old_diags, old_exec, scene, backend, cfg, clients)
    selector = clients.selector if clients is not None and cfg.mode == "live" else None
    survivor = select_survivor(existing, candidate, old_fb, final.feedback, client=selector)
    if survivor is candidate:
        cb.replace(candidate)
        return "replaced_draft"
    cb.record_run(existing.id, old_exec.ok and not analysis.has_errors(old_diags))
    return "kept_draft"


# -- evaluation -------------------------------------------------------------


@dataclass(frozen=True)
class Task:
    id: str
    query: str
    scene: Scene
    expected_answer: Optional[str] = None


def load_tasks(path: Union[str, Path]) -> list[Task]:
    path = Path(path)
    tasks = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        data = json.loads(line)
        try:
            raw_scene = data["scene"]
            if isinstance(raw_scene, str):
                scene = load_scene(path.parent / raw_scene)
            else:
                scene = scene_from_dict(raw_scene)
            tasks.append(Task(str(data["id"]), data["query"], scene, data.get("expected_answer")))
        except (KeyError, ValueError) as e:
            raise ValueError(f"{path}:{n}: {e}") from None
    return tasks


def _as_decimal(text: str) -> Optional[Decimal]:
    try:
        d = Decimal(text)
    except InvalidOperation:
        return None
    return d if d.is_finite() else None


def answers_match(value: Value, expected: str) -> bool:
    if value is None:
        return False
    got = format_value(value).strip().casefold()
    exp = str(expected).strip().casefold()
    g, e = _as_decimal(got), _as_decimal(exp)
    if g is not None and e is not None:
        return g == e
    return got == exp


def _iteration_correct(report: TaskReport, index: int, expected: str) -> bool:
    if report.failure is not None or not report.iterations:
        return False
    rec = report.iterations[min(index, len(report.iterations)) - 1]
    if rec.execution is None or not rec.execution.ok:
        return False
    return answers_match(rec.execution.result, expected)


@dataclass
class EvalReport:
    accuracy: float
    accuracy_by_iteration: list
    avg_iterations: float
    compile_success_rate: float
    mean_lint_score_draft: float
    mean_lint_score_final: float
    n_tasks: int
    failures: list
    tasks: list
    config: dict

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "n_tasks": self.n_tasks,
            "accuracy": self.accuracy,
            "accuracy_by_iteration": self.accuracy_by_iteration,
            "avg_iterations": self.avg_iterations,
            "compile_success_rate": self.compile_success_rate,
            "mean_lint_score_draft": self.mean_lint_score_draft,
            "mean_lint_score_final": self.mean_lint_score_final,
            "failures": self.failures,
            "tasks": self.tasks,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "accuracy"])
        for i, acc in enumerate(self.accuracy_by_iteration, start=1):
            w.writerow([i, f"{acc:.6f}"])
        return buf.getvalue()

    def write(self, out_dir: Union[str, Path]) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_report.json").write_text(self.to_json(), encoding="utf-8")
        (out / "accuracy_vs_iteration.csv").write_text(self.curve_csv(), encoding="utf-8")


def _mean(xs: Sequence[float]) -> float:
    return round(sum(xs) / len(xs), 6) if xs else 0.0


def summarize(tasks: Sequence[Task], reports: Sequence[TaskReport], cfg: EngineConfig) -> EvalReport:
    n = len(tasks)
    rows, failures = [], []
    by_iter = [0] * cfg.max_iterations
    correct_final = 0
    for task, rep in zip(tasks, reports):
        expected = task.expected_answer if task.expected_answer is not None else ""
        ok = _iteration_correct(rep, cfg.max_iterations, expected)
        correct_final += ok
        for i in range(cfg.max_iterations):
            by_iter[i] += _iteration_correct(rep, i + 1, expected)
        if rep.failure is not None:
            failures.append({"task_id": task.id, "reason": rep.failure})
        rows.append(
            {
                "id": task.id,
                "query": task.query,
                "expected": expected,
                "answer": format_value(rep.final_result) if rep.answered else None,
                "correct": ok,
                "iterations": len(rep.iterations),
                "codebase_action": rep.codebase_action,
            }
        )
    with_iters = [r for r in reports if r.iterations]
    return EvalReport(
        accuracy=round(correct_final / n, 6) if n else 0.0,
        accuracy_by_iteration=[round(c / n, 6) if n else 0.0 for c in by_iter],
        avg_iterations=_mean([len(r.iterations) for r in reports]),
        compile_success_rate=round(sum(1 for r in with_iters if r.iterations[-1].clean) / n, 6) if n else 0.0,
        mean_lint_score_draft=_mean([r.iterations[0].lint_score for r in with_iters]),
        mean_lint_score_final=_mean([r.iterations[-1].lint_score for r in with_iters]),
        n_tasks=n,
        failures=failures,
        tasks=rows,
        config={
            "max_iterations": cfg.max_iterations,
            "retrieval_k": cfg.retrieval_k,
            "feedback_channels": list(cfg.feedback_channels),
            "mode": cfg.mode,
            "seed": cfg.seed,
            "step_limit": cfg.step_limit,
        },
    )


def evaluate(
    tasks: Union[str, Path, Sequence[Task]],
    cfg: EngineConfig,
    clients: Clients,
    codebase: Optional[Codebase] = None,
    *,
    backend_factory: Callable = SyntheticBackend,
    jobs: int = 1,
    keep_reports: Optional[list] = None,
) -> EvalReport:
    """Run every task and score it; per-task failures count as incorrect."""
    if not isinstance(tasks, (list, tuple)):
        tasks = load_tasks(tasks)
    cb = codebase if codebase is not None else Codebase()

    def one(task: Task) -> TaskReport:
        try:
            return run_task(task.query, task.scene, cb, cfg, clients, backend_factory(task.scene), task_id=task.id)
        except Exception as e:  # keep the batch going
            log.exception("task %s crashed", task.id)
            return TaskReport(task.id, task.query, failure=f"{type(e).__name__}: {e}")

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(one, tasks))
    else:
        reports = [one(t) for t in tasks]
    if keep_reports is not None:
        keep_reports.extend(reports)
    return summarize(tasks, reports, cfg)
