"""Scene graphs, runtime values, the synthetic perception backend and the tracing interpreter."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from decimal import Context, Decimal
from pathlib import Path
from typing import Any, NamedTuple, Optional, Protocol, Union

from . import dsl

DEFAULT_MAX_STEPS = 10_000

# Abstract type names shared with the static analyzer.
PATCH, TEXT, NUMBER, BOOL, LIST, UNKNOWN = "Patch", "Text", "Number", "Bool", "List", "Unknown"


class Signature(NamedTuple):
    params: tuple
    returns: str
    perception: bool


PRIMITIVES: dict[str, Signature] = {
    "find": Signature((PATCH, TEXT), LIST, True),
    "exists": Signature((PATCH, TEXT), BOOL, True),
    "query": Signature((PATCH, TEXT), TEXT, True),
    "verify_property": Signature((PATCH, TEXT, TEXT), BOOL, True),
    "related": Signature((PATCH, TEXT, PATCH), BOOL, True),
    "count": Signature((LIST,), NUMBER, False),
    "get": Signature((LIST, NUMBER), UNKNOWN, False),
    "hcenter": Signature((PATCH,), NUMBER, False),
    "vcenter": Signature((PATCH,), NUMBER, False),
    "width": Signature((PATCH,), NUMBER, False),
    "height": Signature((PATCH,), NUMBER, False),
}
PERCEPTION_OPS = tuple(name for name, sig in PRIMITIVES.items() if sig.perception)
INPUT_VAR = "image"


# -- scenes -----------------------------------------------------------------


@dataclass(frozen=True)
class SceneObject:
    id: str
    name: str
    box: tuple  # (x, y, w, h) in pixels
    attributes: dict = field(default_factory=dict, hash=False)


@dataclass(frozen=True)
class Relation:
    subject_id: str
    predicate: str
    object_id: str


@dataclass(frozen=True)
class Scene:
    width: int
    height: int
    objects: tuple = ()
    relations: tuple = ()

    def full_patch(self) -> "Patch":
        return Patch((0, 0, self.width, self.height), tuple(o.id for o in self.objects))

    def by_id(self, obj_id: str) -> SceneObject:
        for o in self.objects:
            if o.id == obj_id:
                return o
        raise KeyError(obj_id)

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "objects": [
                {"id": o.id, "name": o.name, "box": list(o.box), "attributes": dict(o.attributes)}
                for o in self.objects
            ],
            "relations": [
                {"subject_id": r.subject_id, "predicate": r.predicate, "object_id": r.object_id}
                for r in self.relations
            ],
        }


class SceneError(ValueError):
    """Schema violation; the message starts with a JSON-pointer-style path."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path or '/'}: {message}")


def _pixel(value: Any, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SceneError(path, "expected a number")
    if value != int(value) or value < 0:
        raise SceneError(path, "expected a non-negative whole number of pixels")
    return int(value)


def _string(value: Any, path: str) -> str:
    if not isinstance(value, str) or not value:
        raise SceneError(path, "expected a non-empty string")
    return value


def scene_from_dict(data: Any) -> Scene:
    if not isinstance(data, dict):
        raise SceneError("", "scene must be an object")
    for key in ("width", "height"):
        if key not in data:
            raise SceneError(f"/{key}", "missing")
    width = _pixel(data["width"], "/width")
    height = _pixel(data["height"], "/height")
    raw_objects = data.get("objects", [])
    if not isinstance(raw_objects, list):
        raise SceneError("/objects", "expected a list")
    objects = []
    seen: set[str] = set()
    for i, raw in enumerate(raw_objects):
        base = f"/objects/{i}"
        if not isinstance(raw, dict):
            raise SceneError(base, "expected an object")
        for key in ("id", "name", "box"):
            if key not in raw:
                raise SceneError(f"{base}/{key}", "missing")
        obj_id = _string(raw["id"], f"{base}/id")
        if obj_id in seen:
            raise SceneError(f"{base}/id", f"duplicate object id {obj_id!r}")
        seen.add(obj_id)
        name = _string(raw["name"], f"{base}/name")
        if name != name.lower():
            raise SceneError(f"{base}/name", "object names must be lowercase")
        box = raw["box"]
        if not isinstance(box, list) or len(box) != 4:
            raise SceneError(f"{base}/box", "expected [x, y, w, h]")
        x, y, w, h = (_pixel(v, f"{base}/box/{j}") for j, v in enumerate(box))
        if x + w > width or y + h > height:
            raise SceneError(f"{base}/box", "box extends beyond the canvas")
        attrs = raw.get("attributes", {})
        if not isinstance(attrs, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in attrs.items()
        ):
            raise SceneError(f"{base}/attributes", "expected a map of strings to strings")
        objects.append(SceneObject(obj_id, name, (x, y, w, h), dict(attrs)))
    raw_relations = data.get("relations", [])
    if not isinstance(raw_relations, list):
        raise SceneError("/relations", "expected a list")
    relations = []
    for i, raw in enumerate(raw_relations):
        base = f"/relations/{i}"
        if not isinstance(raw, dict):
            raise SceneError(base, "expected an object")
        for key in ("subject_id", "predicate", "object_id"):
            if key not in raw:
                raise SceneError(f"{base}/{key}", "missing")
            _string(raw[key], f"{base}/{key}")
            if key != "predicate" and raw[key] not in seen:
                raise SceneError(f"{base}/{key}", f"unknown object id {raw[key]!r}")
        relations.append(Relation(raw["subject_id"], raw["predicate"], raw["object_id"]))
    unknown = set(data) - {"width", "height", "objects", "relations"}
    if unknown:
        raise SceneError(f"/{sorted(unknown)[0]}", "unknown key")
    return Scene(width, height, tuple(objects), tuple(relations))


def load_scene(path: Union[str, Path]) -> Scene:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SceneError("", f"invalid JSON: {e}") from None
    return scene_from_dict(data)


# -- values -----------------------------------------------------------------


@dataclass(frozen=True)
class Patch:
    box: tuple
    object_ids: tuple = ()
    label: Optional[str] = None


# A runtime value is a Patch, str (Text), Decimal (Number), bool, tuple (list) or None.
Value = Union[Patch, str, Decimal, bool, tuple, None]


def type_of(value: Value) -> str:
    if isinstance(value, Patch):
        return PATCH
    if isinstance(value, bool):
        return BOOL
    if isinstance(value, str):
        return TEXT
    if isinstance(value, Decimal):
        return NUMBER
    if isinstance(value, tuple):
        return LIST
    return "Null"


_TAGS = {PATCH: "patch", TEXT: "text", NUMBER: "num", BOOL: "bool", LIST: "list", "Null": "null"}


def values_equal(a: Value, b: Value) -> bool:
    ta, tb = type_of(a), type_of(b)
    if ta != tb:
        return False
    if ta == LIST:
        return len(a) == len(b) and all(values_equal(x, y) for x, y in zip(a, b))
    return a == b


def _num_json(d: Decimal):
    if d == d.to_integral_value():
        return int(d)
    return float(d)


def value_to_json(value: Value) -> dict:
    tag = _TAGS[type_of(value)]
    if isinstance(value, Patch):
        v: Any = {"box": list(value.box), "object_ids": list(value.object_ids), "label": value.label}
    elif isinstance(value, Decimal):
        v = _num_json(value)
    elif isinstance(value, tuple):
        v = [value_to_json(x) for x in value]
    else:
        v = value
    return {"t": tag, "v": v}


def value_from_json(data: dict) -> Value:
    t, v = data["t"], data["v"]
    if t == "patch":
        return Patch(tuple(v["box"]), tuple(v["object_ids"]), v.get("label"))
    if t == "num":
        return Decimal(str(v))
    if t == "list":
        return tuple(value_from_json(x) for x in v)
    return v


def format_value(value: Value) -> str:
    """Answer-style rendering used for scoring and prompts."""
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, Decimal):
        return dsl.format_number(value)
    if isinstance(value, Patch):
        return "[" + ", ".join(str(v) for v in value.box) + "]"
    if isinstance(value, tuple):
        return "[" + ", ".join(format_value(v) for v in value) + "]"
    if value is None:
        return "null"
    return value


# -- perception -------------------------------------------------------------


class PerceptionBackend(Protocol):
    def find(self, patch: Patch, name: str) -> tuple: ...

    def exists(self, patch: Patch, name: str) -> bool: ...

    def query(self, patch: Patch, question: str) -> str: ...

    def verify_property(self, patch: Patch, name: str, prop: str) -> bool: ...

    def related(self, a: Patch, predicate: str, b: Patch) -> bool: ...


def normalize_name(name: str) -> str:
    return " ".join(name.casefold().split())


def name_matches(object_name: str, query: str) -> bool:
    q = normalize_name(query)
    obj = normalize_name(object_name)
    return obj == q or (q.endswith("s") and obj == q[:-1])


def box_inside(inner: tuple, outer: tuple) -> bool:
    x, y, w, h = inner
    ox, oy, ow, oh = outer
    return x >= ox and y >= oy and x + w <= ox + ow and y + h <= oy + oh


_HOW_MANY = re.compile(r"how many (.+?)(?: are there| are in the image)?")
_IS_THERE = re.compile(r"is there an? (.+)")
_COLOR = re.compile(r"what colou?r is the (.+)")


class SyntheticBackend:
    """Deterministic perception over a scene graph."""

    def __init__(self, scene: Scene):
        self.scene = scene

    def find(self, patch: Patch, name: str) -> tuple:
        hits = [
            o for o in self.scene.objects if name_matches(o.name, name) and box_inside(o.box, patch.box)
        ]
        hits.sort(key=lambda o: (o.box[0], o.id))
        return tuple(Patch(o.box, (o.id,), o.name) for o in hits)

    def exists(self, patch: Patch, name: str) -> bool:
        return bool(self.find(patch, name))

    def verify_property(self, patch: Patch, name: str, prop: str) -> bool:
        want = normalize_name(prop)
        for p in self.find(patch, name):
            obj = self.scene.by_id(p.object_ids[0])
            if any(normalize_name(v) == want for v in obj.attributes.values()):
                return True
        return False

    def related(self, a: Patch, predicate: str, b: Patch) -> bool:
        pred = normalize_name(predicate)
        a_ids, b_ids = set(a.object_ids), set(b.object_ids)
        return any(
            r.subject_id in a_ids and r.object_id in b_ids and normalize_name(r.predicate) == pred
            for r in self.scene.relations
        )

    def query(self, patch: Patch, question: str) -> str:
        q = normalize_name(question).rstrip("?").strip()
        m = _HOW_MANY.fullmatch(q)
        if m:
            return str(len(self.find(patch, m.group(1))))
        m = _IS_THERE.fullmatch(q)
        if m:
            return "yes" if self.exists(patch, m.group(1)) else "no"
        m = _COLOR.fullmatch(q)
        if m:
            hits = self.find(patch, m.group(1))
            if hits:
                return self.scene.by_id(hits[0].object_ids[0]).attributes.get("color", "unknown")
        return "unknown"


# -- execution --------------------------------------------------------------

EVENT_KINDS = ("assign", "primitive_call", "branch", "loop_iter", "return")


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    line: int
    step_id: Optional[int]
    kind: str
    name: Optional[str] = None
    primitive: Optional[str] = None
    args_snapshot: tuple = ()
    value_snapshot: Value = None
    # seqs of earlier events this value was computed from (data + control flow)
    deps: tuple = ()

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "line": self.line,
            "step_id": self.step_id,
            "kind": self.kind,
            "name": self.name,
            "primitive": self.primitive,
            "args_snapshot": [value_to_json(a) for a in self.args_snapshot],
            "value_snapshot": value_to_json(self.value_snapshot),
            "deps": list(self.deps),
        }


@dataclass(frozen=True)
class RuntimeErrorInfo:
    line: int
    message: str


@dataclass(frozen=True)
class ExecutionResult:
    result: Value
    trace: tuple
    runtime_error: Optional[RuntimeErrorInfo]
    steps_used: int

    @property
    def ok(self) -> bool:
        return self.runtime_error is None

    def to_dict(self) -> dict:
        return {
            "result": None if self.runtime_error else value_to_json(self.result),
            "trace": [e.to_dict() for e in self.trace],
            "runtime_error": None
            if self.runtime_error is None
            else {"line": self.runtime_error.line, "message": self.runtime_error.message},
            "steps_used": self.steps_used,
        }


class _Abort(Exception):
    def __init__(self, line: int, message: str):
        self.line = line
        self.message = message


class _Returned(Exception):
    def __init__(self, value: Value):
        self.value = value


_DECIMAL = Context(prec=28)


class _Interpreter:
    def __init__(self, scene: Scene, backend: PerceptionBackend, max_steps: int):
        self.scene = scene
        self.backend = backend
        self.max_steps = max_steps
        self.steps = 0
        self.trace: list[TraceEvent] = []
        self.step_id: Optional[int] = None
        self.control: list[int] = []
        # name -> (value, seq of the defining event or None for the input)
        self.env: dict[str, tuple] = {INPUT_VAR: (scene.full_patch(), None)}
        self.line = 1

    def emit(self, kind: str, line: int, deps: set, **fields) -> int:
        seq = len(self.trace)
        all_deps = set(deps) | set(self.control)
        self.trace.append(
            TraceEvent(seq, line, self.step_id, kind, deps=tuple(sorted(all_deps)), **fields)
        )
        return seq

    def tick(self, line: int) -> None:
        self.steps += 1
        if self.steps > self.max_steps:
            self.steps = self.max_steps
            raise _Abort(line, "step limit exceeded")

    def run_block(self, stmts: tuple) -> None:
        for s in stmts:
            self.line = s.span.line if s.span else self.line
            if isinstance(s, dsl.StepComment):
                # running max keeps step ids non-decreasing when loops revisit earlier steps
                self.step_id = s.step_id if self.step_id is None else max(self.step_id, s.step_id)
                continue
            if isinstance(s, dsl.PlainComment):
                continue
            self.tick(self.line)
            self.run_stmt(s)

    def run_stmt(self, s) -> None:
        line = self.line
        if isinstance(s, dsl.Assign):
            value, deps = self.eval(s.value, line)
            seq = self.emit("assign", line, deps, name=s.target, value_snapshot=value)
            self.env[s.target] = (value, seq)
        elif isinstance(s, dsl.Return):
            value, deps = self.eval(s.value, line)
            self.emit("return", line, deps, value_snapshot=value)
            raise _Returned(value)
        elif isinstance(s, dsl.If):
            cond, deps = self.eval(s.cond, line)
            if not isinstance(cond, bool):
                raise _Abort(line, f"type error: condition must be Bool, got {type_of(cond)}")
            seq = self.emit("branch", line, deps, value_snapshot=cond)
            block = s.body if cond else s.orelse
            if block is not None:
                self.control.append(seq)
                try:
                    self.run_block(block)
                finally:
                    self.control.pop()
        elif isinstance(s, dsl.For):
            items, deps = self.eval(s.iterable, line)
            if not isinstance(items, tuple):
                raise _Abort(line, f"type error: cannot iterate over {type_of(items)}")
            for item in items:
                self.line = line
                self.tick(line)
                seq = self.emit("loop_iter", line, deps, name=s.var, value_snapshot=item)
                self.env[s.var] = (item, seq)
                self.control.append(seq)
                try:
                    self.run_block(s.body)
                finally:
                    self.control.pop()
        else:  # pragma: no cover - parser never produces other statements
            raise _Abort(line, f"unsupported statement {type(s).__name__}")

    # expressions return (value, set of dependency seqs)

    def eval(self, node, line: int):
        if isinstance(node, dsl.StrLit):
            return node.value, set()
        if isinstance(node, dsl.NumLit):
            return node.value, set()
        if isinstance(node, dsl.BoolLit):
            return node.value, set()
        if isinstance(node, dsl.Var):
            if node.name not in self.env:
                raise _Abort(line, f"undefined name {node.name!r}")
            value, seq = self.env[node.name]
            return value, set() if seq is None else {seq}
        if isinstance(node, dsl.Call):
            return self.call(node, line)
        if isinstance(node, dsl.Index):
            target, d1 = self.eval(node.target, line)
            index, d2 = self.eval(node.index, line)
            return self.index(target, index, line), d1 | d2
        if isinstance(node, dsl.Unary):
            value, deps = self.eval(node.operand, line)
            if node.op == "not":
                if not isinstance(value, bool):
                    raise _Abort(line, f"type error: 'not' expects Bool, got {type_of(value)}")
                return not value, deps
            if not isinstance(value, Decimal):
                raise _Abort(line, f"type error: unary '-' expects Number, got {type_of(value)}")
            return _DECIMAL.minus(value), deps
        if isinstance(node, dsl.Binary):
            return self.binary(node, line)
        raise _Abort(line, f"cannot evaluate {type(node).__name__}")

    def index(self, target: Value, index: Value, line: int) -> Value:
        if not isinstance(target, tuple):
            raise _Abort(line, f"type error: cannot index {type_of(target)}")
        if not isinstance(index, Decimal) or index != index.to_integral_value():
            raise _Abort(line, f"type error: index must be a whole Number, got {format_value(index)}")
        i = int(index)
        if i < 0 or i >= len(target):
            raise _Abort(line, "index out of range")
        return target[i]

    def binary(self, node: dsl.Binary, line: int):
        op = node.op
        left, ld = self.eval(node.left, line)
        if op in ("and", "or"):
            if not isinstance(left, bool):
                raise _Abort(line, f"type error: '{op}' expects Bool, got {type_of(left)}")
            if (op == "and" and not left) or (op == "or" and left):
                return left, ld
            right, rd = self.eval(node.right, line)
            if not isinstance(right, bool):
                raise _Abort(line, f"type error: '{op}' expects Bool, got {type_of(right)}")
            return right, ld | rd
        right, rd = self.eval(node.right, line)
        deps = ld | rd
        if op == "==":
            return values_equal(left, right), deps
        if op == "!=":
            return not values_equal(left, right), deps
        lt, rt = type_of(left), type_of(right)
        if op in ("<", "<=", ">", ">="):
            if lt != rt or lt not in (NUMBER, TEXT):
                raise _Abort(line, f"type error: cannot compare {lt} {op} {rt}")
            result = {
                "<": left < right,
                "<=": left <= right,
                ">": left > right,
                ">=": left >= right,
            }[op]
            return result, deps
        if op == "+" and lt == rt == TEXT:
            return left + right, deps
        if lt != NUMBER or rt != NUMBER:
            raise _Abort(line, f"type error: unsupported operand types for {op}: {lt} and {rt}")
        if op == "+":
            return _DECIMAL.add(left, right), deps
        if op == "-":
            return _DECIMAL.subtract(left, right), deps
        if op == "*":
            return _DECIMAL.multiply(left, right), deps
        if right == 0:
            raise _Abort(line, "division by zero")
        return _DECIMAL.divide(left, right), deps

    def call(self, node: dsl.Call, line: int):
        sig = PRIMITIVES.get(node.callee)
        if sig is None:
            raise _Abort(line, f"undefined name {node.callee!r}")
        args = []
        deps: set = set()
        for a in node.args:
            v, d = self.eval(a, line)
            args.append(v)
            deps |= d
        if len(args) != len(sig.params):
            raise _Abort(
                line, f"type error: {node.callee} expects {len(sig.params)} arguments, got {len(args)}"
            )
        for i, (want, got) in enumerate(zip(sig.params, args)):
            if want != UNKNOWN and type_of(got) != want:
                raise _Abort(
                    line,
                    f"type error: argument {i + 1} of {node.callee} must be {want}, got {type_of(got)}",
                )
        result = self.apply(node.callee, args, line)
        seq = self.emit(
            "primitive_call", line, deps, primitive=node.callee, args_snapshot=tuple(args), value_snapshot=result
        )
        return result, {seq}

    def apply(self, name: str, args: list, line: int) -> Value:
        b = self.backend
        if name == "find":
            return tuple(b.find(args[0], args[1]))
        if name == "exists":
            return bool(b.exists(args[0], args[1]))
        if name == "query":
            return str(b.query(args[0], args[1]))
        if name == "verify_property":
            return bool(b.verify_property(args[0], args[1], args[2]))
        if name == "related":
            return bool(b.related(args[0], args[1], args[2]))
        if name == "count":
            return Decimal(len(args[0]))
        if name == "get":
            return self.index(args[0], args[1], line)
        x, y, w, h = (Decimal(v) for v in args[0].box)
        if name == "hcenter":
            return _DECIMAL.add(x, _DECIMAL.divide(w, Decimal(2)))
        if name == "vcenter":
            return _DECIMAL.add(y, _DECIMAL.divide(h, Decimal(2)))
        if name == "width":
            return w
        return h


def execute(
    ast: dsl.ProgramAst,
    scene: Scene,
    backend: Optional[PerceptionBackend] = None,
    *,
    max_steps: int = DEFAULT_MAX_STEPS,
) -> ExecutionResult:
    """Run ``ast`` with ``image`` bound to the full-scene patch, tracing every intermediate."""
    interp = _Interpreter(scene, backend or SyntheticBackend(scene), max_steps)
    try:
        interp.run_block(ast.statements)
    except _Returned as r:
        return ExecutionResult(r.value, tuple(interp.trace), None, interp.steps)
    except _Abort as a:
        return ExecutionResult(None, tuple(interp.trace), RuntimeErrorInfo(a.line, a.message), interp.steps)
    last = ast.statements[-1].span.line if ast.statements and ast.statements[-1].span else 1
    err = RuntimeErrorInfo(last, "program ended without return")
    return ExecutionResult(None, tuple(interp.trace), err, interp.steps)
