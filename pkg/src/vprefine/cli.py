"""Command-line entry point.

Every command writes exactly one JSON document to stdout; logs and errors go to
stderr (errors as a single JSON line). Exit codes: 0 ok, 1 task failure,
2 configuration or I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from . import analysis, dsl
from .clients import MockClient, MockScript, ModelError, OpenAICompatClient
from .codebase import Codebase, bootstrap, retrieve
from .orchestrator import Clients, EngineConfig, evaluate, load_tasks, run_task
from .prompting import MalformedModelReply, build_al_prompt, generate_logical_steps, generate_program
from .runtime import SceneError, load_scene

log = logging.getLogger("vprefine")

PATH_KEYS = ("codebase_path", "templates_dir", "mock_script_path")
ENGINE_KEYS = tuple(f.name for f in dataclasses.fields(EngineConfig))
DEFAULT_CODEBASE = "codebase.jsonl"


class CliError(Exception):
    """Configuration or I/O problem (exit 2)."""


class TaskFailed(Exception):
    """Task-level failure (exit 1)."""

    def __init__(self, message: str, **extra):
        super().__init__(message)
        self.extra = extra


def emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")


def emit_error(kind: str, message: str, **extra) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True) + "\n")


# -- configuration ----------------------------------------------------------


def read_config_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise CliError(f"cannot read config {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise CliError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise CliError(f"config {path} must be a JSON object")
    for key in data:
        if key not in ENGINE_KEYS + PATH_KEYS:
            raise CliError(f"unknown config key {key!r}")
    return data


def resolve_config(args: argparse.Namespace) -> tuple[EngineConfig, dict]:
    """Merge built-in defaults, the config file and flags (flags win)."""
    merged = read_config_file(getattr(args, "config", None))
    for key in ENGINE_KEYS + PATH_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    disabled = getattr(args, "disable_channel", None) or []
    if disabled:
        channels = merged.get("feedback_channels", EngineConfig.feedback_channels)
        merged["feedback_channels"] = [c for c in channels if c not in disabled]
    engine = {k: merged[k] for k in ENGINE_KEYS if k in merged}
    if "feedback_channels" in engine:
        engine["feedback_channels"] = tuple(engine["feedback_channels"])
    if "templates_dir" in merged:
        engine["templates_dir"] = merged["templates_dir"]
    try:
        cfg = EngineConfig(**engine)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid configuration: {e}") from None
    return cfg, {k: merged.get(k) for k in PATH_KEYS}


def make_clients(cfg: EngineConfig, paths: dict) -> Clients:
    if cfg.mode == "live":
        try:
            client = OpenAICompatClient.from_env()
        except ModelError as e:
            raise CliError(str(e)) from None
        return Clients(client, caption=client, verify=client, textual=client, selector=client)
    script_path = paths.get("mock_script_path")
    if not script_path:
        raise CliError("hermetic mode needs --mock-script (or mock_script_path in the config)")
    try:
        script = MockScript.load(script_path)
    except OSError as e:
        raise CliError(f"cannot read mock script {script_path}: {e.strerror}") from None
    except ValueError as e:
        raise CliError(f"bad mock script {script_path}: {e}") from None
    return Clients(MockClient(script))


def open_codebase(path: Optional[str]) -> Codebase:
    if path is None:
        return Codebase()
    try:
        return Codebase.load(path)
    except OSError as e:
        raise CliError(f"cannot read codebase {path}: {e.strerror}") from None
    except ValueError as e:
        raise CliError(f"bad codebase {path}: {e}") from None


def save_codebase(cb: Codebase, path: Optional[str]) -> None:
    if path is None:
        return
    try:
        cb.save(path)
    except OSError as e:
        raise CliError(f"cannot write codebase {path}: {e.strerror}") from None


def read_program(path: str) -> dsl.ProgramAst:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise CliError(f"cannot read {path}: {e.strerror}") from None
    try:
        return dsl.parse(dsl.SourceProgram(text, "user"))
    except dsl.ParseFailure as e:
        raise TaskFailed(
            f"{path}: {len(e.errors)} parse error(s)",
            parse_errors=[{"line": err.line, "message": err.message} for err in e.errors],
        ) from None


# -- commands ---------------------------------------------------------------


def stdin_human_channel(index, bundle) -> list[str]:
    sys.stderr.write(f"-- feedback after iteration {index} --\n{bundle.render()}")
    sys.stderr.write("Enter notes for the next refinement, blank line to continue:\n")
    sys.stderr.flush()
    lines = []
    for raw in sys.stdin:
        line = raw.rstrip("\n")
        if not line.strip():
            break
        lines.append(line)
    return lines


def cmd_run(args) -> int:
    if args.human_feedback:
        args.human_feedback_enabled = True
    cfg, paths = resolve_config(args)
    clients = make_clients(cfg, paths)
    try:
        scene = load_scene(args.scene)
    except OSError as e:
        raise CliError(f"cannot read scene {args.scene}: {e.strerror}") from None
    except SceneError as e:
        raise CliError(f"bad scene {args.scene}: {e}") from None
    cb = open_codebase(paths["codebase_path"])
    human = stdin_human_channel if cfg.human_feedback_enabled else None
    report = run_task(args.query, scene, cb, cfg, clients, task_id=args.task_id, human=human)
    save_codebase(cb, paths["codebase_path"])
    emit(report.to_dict())
    if report.failure is not None:
        extra = {"prompt_prefix": report.failure_prompt} if report.failure_prompt else {}
        raise TaskFailed(report.failure, **extra)
    if not report.answered:
        raise TaskFailed("final program did not produce an answer")
    return 0


def cmd_eval(args) -> int:
    cfg, paths = resolve_config(args)
    clients = make_clients(cfg, paths)
    try:
        tasks = load_tasks(args.tasks)
    except OSError as e:
        raise CliError(f"cannot read tasks {args.tasks}: {e.strerror}") from None
    except ValueError as e:
        raise CliError(f"bad tasks file: {e}") from None
    cb = open_codebase(paths["codebase_path"])
    report = evaluate(tasks, cfg, clients, cb, jobs=args.jobs)
    try:
        report.write(args.out_dir)
    except OSError as e:
        raise CliError(f"cannot write to {args.out_dir}: {e.strerror}") from None
    save_codebase(cb, paths["codebase_path"])
    out = Path(args.out_dir)
    emit(
        {
            "accuracy": report.accuracy,
            "accuracy_by_iteration": report.accuracy_by_iteration,
            "n_tasks": report.n_tasks,
            "failures": len(report.failures),
            "report": str(out / "eval_report.json"),
            "curve": str(out / "accuracy_vs_iteration.csv"),
        }
    )
    return 0


def cmd_codebase(args) -> int:
    if args.fraction is not None:
        args.bootstrap_fraction = args.fraction
    cfg, paths = resolve_config(args)
    path = paths["codebase_path"] or DEFAULT_CODEBASE
    cb = open_codebase(path)
    if args.action == "list":
        emit(
            {
                "entries": [
                    {
                        "id": e.id,
                        "query": e.query,
                        "status": e.status,
                        "runs": e.stats["runs"],
                        "error_free_runs": e.stats["error_free_runs"],
                    }
                    for e in cb
                ]
            }
        )
        return 0
    if args.action == "show":
        entry = cb.get(args.id)
        if entry is None:
            raise CliError(f"no codebase entry {args.id!r}")
        emit(entry.to_dict())
        return 0

    clients = make_clients(cfg, paths)
    try:
        tasks = load_tasks(args.tasks)
    except OSError as e:
        raise CliError(f"cannot read tasks {args.tasks}: {e.strerror}") from None
    except ValueError as e:
        raise CliError(f"bad tasks file: {e}") from None

    def generator(query: str):
        steps = generate_logical_steps(query, clients.generator, cfg.templates_dir)
        al = build_al_prompt(query, steps, retrieve(cb, query, cfg.retrieval_k), cfg.retrieval_k, cfg.templates_dir)
        return steps, generate_program(al, clients.generator).source

    report = bootstrap(
        cb,
        [t.query for t in tasks],
        cfg.bootstrap_fraction,
        seed=cfg.seed,
        generator=generator,
        scenes=[t.scene for t in tasks],
        max_steps=cfg.step_limit,
    )
    save_codebase(cb, path)
    emit({**report.to_dict(), "codebase": path, "entries": len(cb)})
    return 0


def cmd_abstract(args) -> int:
    abstract = analysis.abstract_code(read_program(args.file), mask_callees=args.mask_callees)
    emit({"abstract": abstract.text, "skeleton": list(abstract.skeleton)})
    return 0


def cmd_analyze(args) -> int:
    ast = read_program(args.file)
    diags = analysis.analyze(ast)
    emit({"diagnostics": [d.to_dict() for d in diags], "lint_score": analysis.lint_score(ast, diags)})
    return 0


# -- parser -----------------------------------------------------------------


def _engine_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("engine (override the config file)")
    g.add_argument("--config", help="JSON config file")
    g.add_argument("--mock-script", dest="mock_script_path", help="mock model script (hermetic mode)")
    g.add_argument("--codebase", dest="codebase_path", help="codebase JSONL file")
    g.add_argument("--templates-dir", dest="templates_dir")
    g.add_argument("--mode", choices=("hermetic", "live"))
    g.add_argument("--max-iterations", dest="max_iterations", type=int)
    g.add_argument("--retrieval-k", dest="retrieval_k", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--step-limit", dest="step_limit", type=int)
    return p


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vprefine", description="self-refining visual programs over scene graphs")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="log to stderr (-vv for debug)")
    sub = ap.add_subparsers(dest="command", required=True)
    engine = _engine_flags()

    p = sub.add_parser("run", parents=[engine], help="answer one query")
    p.add_argument("--query", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--task-id", default="task")
    p.add_argument("--human-feedback", action="store_true", help="read notes from stdin after each iteration")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", parents=[engine], help="run a JSONL task file")
    p.add_argument("--tasks", required=True)
    p.add_argument("--out-dir", default="out")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument(
        "--disable-channel", action="append", choices=("visual", "textual", "compile", "human"), help="ablate a feedback channel"
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("codebase", help="manage the program codebase")
    csub = p.add_subparsers(dest="action", required=True)
    c = csub.add_parser("init", parents=[engine], help="bootstrap from a task file")
    c.add_argument("--tasks", required=True)
    c.add_argument("--fraction", type=float)
    c.set_defaults(func=cmd_codebase)
    c = csub.add_parser("list", parents=[engine])
    c.set_defaults(func=cmd_codebase, fraction=None)
    c = csub.add_parser("show", parents=[engine])
    c.add_argument("id")
    c.set_defaults(func=cmd_codebase, fraction=None)

    p = sub.add_parser("abstract", help="print the masked form of a program")
    p.add_argument("file")
    p.add_argument("--mask-callees", action="store_true")
    p.set_defaults(func=cmd_abstract)

    p = sub.add_parser("analyze", help="static diagnostics and lint score")
    p.add_argument("file")
    p.set_defaults(func=cmd_analyze)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        emit_error("config", str(e))
        return 2
    except TaskFailed as e:
        emit_error("task", str(e), **e.extra)
        return 1
    except (ModelError, MalformedModelReply) as e:
        emit_error("model", str(e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
