"""The evolving program store: hashed query embeddings, top-k retrieval, bootstrap and survivor selection."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import random
import re
import tempfile
import threading
from array import array
from dataclasses import dataclass, field
from decimal import ROUND_FLOOR, Decimal
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

from . import analysis, dsl, kernels
from .runtime import DEFAULT_MAX_STEPS, Scene, SyntheticBackend, execute

log = logging.getLogger(__name__)

DIMS = 256
STATUSES = ("draft", "refined")
_TOKEN_RE = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def embed(text: str) -> tuple:
    """Signed feature-hash embedding (64-bit FNV-1a per token), L2-normalized."""
    vec = kernels.hash_embed([t.encode("utf-8") for t in tokenize(text)], DIMS)
    return tuple(vec)


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    # embeddings are unit-norm or all-zero, so the dot product is the cosine
    return kernels.dot_rows(array("d", a), array("d", b), 1)[0]


def entry_id(query: str) -> str:
    return "cb-" + hashlib.sha1(query.encode("utf-8")).hexdigest()[:12]


@dataclass(frozen=True)
class CodebaseEntry:
    id: str
    query: str
    logical_steps: tuple
    code: dsl.SourceProgram
    abstract: analysis.AbstractCode
    embedding: tuple
    status: str = "draft"
    stats: dict = field(default_factory=lambda: {"runs": 0, "error_free_runs": 0}, hash=False)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "query": self.query,
            "logical_steps": list(self.logical_steps),
            "code": self.code.text,
            "abstract": self.abstract.text,
            "embedding": list(self.embedding),
            "status": self.status,
            "stats": {"runs": self.stats["runs"], "error_free_runs": self.stats["error_free_runs"]},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CodebaseEntry":
        abstract_text = data["abstract"]
        skeleton = tuple(dsl.skeleton(dsl.parse_abstract(abstract_text)))
        return cls(
            id=data["id"],
            query=data["query"],
            logical_steps=tuple(data["logical_steps"]),
            code=dsl.SourceProgram(data["code"], "retrieved"),
            abstract=analysis.AbstractCode(abstract_text, skeleton),
            embedding=tuple(float(x) for x in data["embedding"]),
            status=data["status"],
            stats={"runs": int(data["stats"]["runs"]), "error_free_runs": int(data["stats"]["error_free_runs"])},
        )


def make_entry(
    query: str,
    steps: Iterable[str],
    code: Union[dsl.SourceProgram, str],
    *,
    status: str = "draft",
    runs: int = 0,
    error_free_runs: int = 0,
) -> CodebaseEntry:
    if isinstance(code, str):
        code = dsl.SourceProgram(code, "generated")
    if status not in STATUSES:
        raise ValueError(f"unknown status {status!r}")
    ast = dsl.parse(code)
    return CodebaseEntry(
        id=entry_id(query),
        query=query,
        logical_steps=tuple(steps),
        code=code,
        abstract=analysis.abstract_code(ast),
        embedding=embed(query),
        status=status,
        stats={"runs": runs, "error_free_runs": error_free_runs},
    )


def static_errors(entry: CodebaseEntry) -> list[analysis.Diagnostic]:
    diags = analysis.analyze(dsl.parse(entry.code))
    return [d for d in diags if d.severity == "error"]


class Codebase:
    """Ordered entry store. Reads may run concurrently; mutations take a single lock."""

    def __init__(self, entries: Iterable[CodebaseEntry] = ()):
        self._entries: list[CodebaseEntry] = []
        self._lock = threading.RLock()
        self._matrix: Optional[array] = None
        for e in entries:
            self.add(e)

    @property
    def entries(self) -> tuple:
        return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self.entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, Codebase) and self.entries == other.entries

    def get(self, entry_id: str) -> Optional[CodebaseEntry]:
        for e in self._entries:
            if e.id == entry_id:
                return e
        return None

    def find_by_query(self, query: str) -> Optional[CodebaseEntry]:
        for e in self._entries:
            if e.query == query:
                return e
        return None

    def _check(self, entry: CodebaseEntry) -> None:
        errors = static_errors(entry)
        if errors:
            raise ValueError(f"refusing entry {entry.id} with static errors: {errors[0].message}")

    def add(self, entry: CodebaseEntry) -> None:
        self._check(entry)
        with self._lock:
            if self.get(entry.id) is not None:
                raise ValueError(f"duplicate entry id {entry.id!r}")
            self._entries.append(entry)
            self._matrix = None

    def replace(self, entry: CodebaseEntry) -> None:
        """Swap in ``entry`` for the stored entry answering the same query (position kept)."""
        self._check(entry)
        with self._lock:
            for i, e in enumerate(self._entries):
                if e.query == entry.query:
                    self._entries[i] = dataclasses.replace(entry, id=e.id)
                    self._matrix = None
                    return
            raise KeyError(entry.query)

    def record_run(self, entry_id: str, error_free: bool) -> None:
        with self._lock:
            for i, e in enumerate(self._entries):
                if e.id == entry_id:
                    stats = {
                        "runs": e.stats["runs"] + 1,
                        "error_free_runs": e.stats["error_free_runs"] + int(error_free),
                    }
                    self._entries[i] = dataclasses.replace(e, stats=stats)
                    return
            raise KeyError(entry_id)

    def matrix(self) -> array:
        with self._lock:
            if self._matrix is None:
                m = array("d")
                for e in self._entries:
                    m.extend(e.embedding)
                self._matrix = m
            return self._matrix

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in self.entries)

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(self.to_jsonl())
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise

    @classmethod
    def from_jsonl(cls, text: str) -> "Codebase":
        cb = cls()
        for n, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                cb.add(CodebaseEntry.from_dict(json.loads(line)))
            except (KeyError, ValueError, dsl.ParseFailure) as e:
                raise ValueError(f"codebase line {n}: {e}") from None
        return cb

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Codebase":
        path = Path(path)
        if not path.exists():
            return cls()
        return cls.from_jsonl(path.read_text(encoding="utf-8"))


def retrieve(cb: Codebase, query: str, k: int = 2) -> list[CodebaseEntry]:
    """Top-``k`` entries by cosine similarity of query embeddings; ties by id."""
    if k < 0:
        raise ValueError("k must be non-negative")
    entries = cb.entries
    if not entries or k == 0:
        return []
    scores = kernels.dot_rows(array("d", embed(query)), cb.matrix(), len(entries))
    order = sorted(range(len(entries)), key=lambda i: (-scores[i], entries[i].id))
    return [entries[i] for i in order[:k]]


# -- bootstrap --------------------------------------------------------------


@dataclass
class BootstrapReport:
    selected: list = field(default_factory=list)  # queries chosen, in task order
    inserted: list = field(default_factory=list)  # entry ids
    skipped: list = field(default_factory=list)  # {"query", "reason"}

    def to_dict(self) -> dict:
        return {
            "selected": list(self.selected),
            "insert_attempts": len(self.selected),
            "inserted": list(self.inserted),
            "skipped": list(self.skipped),
        }


def selection_size(n: int, fraction: Union[float, str, Decimal]) -> int:
    frac = Decimal(str(fraction))
    if not Decimal(0) <= frac <= Decimal(1):
        raise ValueError("fraction must lie in [0, 1]")
    return int((frac * n).to_integral_value(rounding=ROUND_FLOOR))


def select_bootstrap_indices(n: int, fraction, seed: int) -> list[int]:
    order = list(range(n))
    random.Random(seed).shuffle(order)
    return sorted(order[: selection_size(n, fraction)])


Generator = Callable[[str], tuple]  # query -> (steps, SourceProgram)


def bootstrap(
    cb: Codebase,
    task_queries: Sequence[str],
    fraction=0.2,
    *,
    seed: int,
    generator: Generator,
    scenes: Sequence[Scene],
    backend_factory: Callable = SyntheticBackend,
    max_steps: int = DEFAULT_MAX_STEPS,
) -> BootstrapReport:
    """Seed ``cb`` with executable drafts for a random ``fraction`` of the (unlabeled) queries."""
    report = BootstrapReport()
    for i in select_bootstrap_indices(len(task_queries), fraction, seed):
        query = task_queries[i]
        report.selected.append(query)
        if cb.find_by_query(query) is not None:
            report.skipped.append({"query": query, "reason": "already in codebase"})
            continue
        try:
            steps, program = generator(query)
            ast = dsl.parse(program)
        except Exception as e:  # generator failures are per-query skips
            report.skipped.append({"query": query, "reason": f"generation failed: {e}"})
            continue
        errors = [d for d in analysis.analyze(ast) if d.severity == "error"]
        if errors:
            report.skipped.append({"query": query, "reason": f"static error: {errors[0].code} line {errors[0].line}"})
            continue
        result = execute(ast, scenes[i], backend_factory(scenes[i]), max_steps=max_steps)
        if result.runtime_error is not None:
            report.skipped.append({"query": query, "reason": f"runtime error: {result.runtime_error.message}"})
            continue
        entry = make_entry(query, steps, program, status="draft", runs=1, error_free_runs=1)
        cb.add(entry)
        report.inserted.append(entry.id)
    log.info("bootstrap: %d selected, %d inserted", len(report.selected), len(report.inserted))
    return report


# -- survivor selection -----------------------------------------------------


def _policy_key(entry: CodebaseEntry, fb) -> tuple:
    ast = dsl.parse(entry.code)
    return (fb.counts["error"], fb.counts["warning"], -analysis.lint_score(ast))


def select_survivor(draft: CodebaseEntry, refined: CodebaseEntry, draft_fb, refined_fb, client=None) -> CodebaseEntry:
    """Keep one of two programs for the same query.

    Fewer error items wins, then fewer warnings, then the higher lint score;
    a full tie keeps ``refined``. With a ``client`` the model is asked first
    and the policy is the fallback for an unusable reply.
    """
    if draft.query != refined.query:
        raise ValueError("select_survivor needs two entries for the same query")
    if client is not None:
        from .prompting import ask_selector

        choice = ask_selector(client, draft, refined, draft_fb, refined_fb)
        if choice == "A":
            return draft
        if choice == "B":
            return refined
    if _policy_key(draft, draft_fb) < _policy_key(refined, refined_fb):
        return draft
    return refined
