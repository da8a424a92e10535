"""Deterministic generator for the shipped hermetic suite: scenes, tasks, gold answers and a mock script.

Gold answers are computed directly from the scene graph, never through the
interpreter, so the suite doubles as an oracle for the runtime.

Regenerate the shipped files with ``python -m vprefine.suite [OUT_DIR]``.
"""

from __future__ import annotations

import argparse
import json
import random
from fractions import Fraction
from pathlib import Path
from typing import Optional

SUITE_SEED = 20240611
SUITE_SIZE = 50
DATA_DIR = Path(__file__).parent / "data" / "suite"

NOUNS = ("cup", "plate", "apple", "orange", "dog", "cat", "car", "chair", "book", "bottle", "bowl", "lamp")
COLORS = ("red", "green", "blue", "yellow", "white", "black")
SIZES = ("small", "large")
PREDICATES = ("left of", "on", "near", "behind")
KINDS = ("count", "property", "color", "left", "more")

CANVAS = (640, 480)
CELL = 80

# task index -> seeded defect in the first draft
DEFECTS = {
    0: "undefined_var",
    1: "hard_coded",
    2: "index_oor",
    3: "undefined_var",
    4: "lint_warning",
    5: "wrong_noun",
    7: "two_step",
    8: "never_fixed",
    10: "wrong_noun",
    11: "malformed",
    13: "index_oor",
    14: "hard_coded",
    15: "wrong_noun",
    19: "lint_warning",
    22: "undefined_var",
    24: "two_step",
}


def random_scene(rng: random.Random, nouns: Optional[list] = None, relations: bool = True) -> dict:
    """Objects on distinct grid cells so no box contains another."""
    cols, rows = CANVAS[0] // CELL, CANVAS[1] // CELL
    if nouns is None:
        nouns = rng.sample(NOUNS, rng.randint(2, 4))
    counts = [rng.randint(1, 4) for _ in nouns]
    cells = rng.sample(range(cols * rows), sum(counts))
    objects = []
    k = 0
    for noun, n in zip(nouns, counts):
        for _ in range(n):
            c = cells[k]
            k += 1
            w, h = rng.randint(20, CELL - 10), rng.randint(20, CELL - 10)
            x = (c % cols) * CELL + rng.randint(0, CELL - w)
            y = (c // cols) * CELL + rng.randint(0, CELL - h)
            objects.append(
                {
                    "id": f"o{k}",
                    "name": noun,
                    "box": [x, y, w, h],
                    "attributes": {"color": rng.choice(COLORS), "size": rng.choice(SIZES)},
                }
            )
    rels = []
    if relations and len(objects) > 1:
        for _ in range(rng.randint(1, len(objects))):
            a, b = rng.sample(objects, 2)
            rels.append({"subject_id": a["id"], "predicate": rng.choice(PREDICATES), "object_id": b["id"]})
    return {"width": CANVAS[0], "height": CANVAS[1], "objects": objects, "relations": rels}


# -- brute-force answers ----------------------------------------------------


def _named(scene: dict, noun: str) -> list:
    hits = [o for o in scene["objects"] if o["name"] == noun]
    return sorted(hits, key=lambda o: (o["box"][0], o["id"]))


def _hcenter(o: dict) -> Fraction:
    return o["box"][0] + Fraction(o["box"][2], 2)


def gold_answer(kind: str, scene: dict, args: dict) -> str:
    if kind == "count":
        return str(len(_named(scene, args["noun"])))
    if kind == "property":
        hit = any(o["attributes"]["color"] == args["color"] for o in _named(scene, args["noun"]))
        return "yes" if hit else "no"
    if kind == "color":
        return _named(scene, args["noun"])[0]["attributes"]["color"]
    if kind == "left":
        a, b = _named(scene, args["a"])[0], _named(scene, args["b"])[0]
        return "yes" if _hcenter(a) < _hcenter(b) else "no"
    if kind == "more":
        return "yes" if len(_named(scene, args["a"])) > len(_named(scene, args["b"])) else "no"
    raise ValueError(kind)


# -- queries, steps and programs --------------------------------------------


def query_for(kind: str, photo: int, args: dict) -> str:
    p = f"In photo {photo},"
    if kind == "count":
        return f"{p} how many {args['noun']}s are there?"
    if kind == "property":
        return f"{p} is there a {args['color']} {args['noun']}?"
    if kind == "color":
        return f"{p} what color is the leftmost {args['noun']}?"
    if kind == "left":
        return f"{p} is the {args['a']} left of the {args['b']}?"
    return f"{p} are there more {args['a']}s than {args['b']}s?"


def steps_for(kind: str, args: dict) -> list[str]:
    if kind == "count":
        return [f"find the {args['noun']}s", f"count the {args['noun']}s"]
    if kind == "property":
        return [f"check for a {args['color']} {args['noun']}"]
    if kind == "color":
        return [f"find the {args['noun']}s", f"ask for the color of the leftmost {args['noun']}"]
    if kind == "left":
        return [f"find the {args['a']}", f"find the {args['b']}", "compare horizontal positions"]
    return [f"find the {args['a']}s", f"find the {args['b']}s", "compare the two counts"]


def program_lines(kind: str, args: dict) -> list[str]:
    """The reference program; the last line is always ``return <var>``."""
    if kind == "count":
        n = args["noun"]
        return [f'{n}s = find(image, "{n}")', "total = count(" + n + "s)", "return total"]
    if kind == "property":
        return [f'found = verify_property(image, "{args["noun"]}", "{args["color"]}")', "return found"]
    if kind == "color":
        n = args["noun"]
        return [
            f'{n}s = find(image, "{n}")',
            f"first = get({n}s, 0)",
            f'color = query(first, "what color is the {n}")',
            "return color",
        ]
    if kind == "left":
        return [
            f'a = find(image, "{args["a"]}")',
            f'b = find(image, "{args["b"]}")',
            "left = hcenter(get(a, 0)) < hcenter(get(b, 0))",
            "return left",
        ]
    return [
        f'a = find(image, "{args["a"]}")',
        f'b = find(image, "{args["b"]}")',
        "more = count(a) > count(b)",
        "return more",
    ]


_STEP_OF_LINE = {
    "count": (1, 2, 2),
    "property": (1, 1),
    "color": (1, 2, 2, 2),
    "left": (1, 2, 3, 3),
    "more": (1, 2, 3, 3),
}


def render(kind: str, steps: list[str], lines: list[str]) -> str:
    out = []
    current = 0
    for line, step in zip(lines, _STEP_OF_LINE[kind]):
        if step != current:
            current = step
            out.append(f"# step {step}: {steps[step - 1]}")
        out.append(line)
    return "\n".join(out) + "\n"


def _wrong_literal(kind: str, gold: str) -> str:
    if kind == "count":
        return str(int(gold) + 1)
    if kind == "color":
        return '"' + next(c for c in COLORS if c != gold) + '"'
    return '"no"' if gold == "yes" else '"yes"'


def draft_variant(defect: str, kind: str, args: dict, gold: str, steps: list[str]) -> str:
    lines = program_lines(kind, args)
    if defect in ("undefined_var", "never_fixed", "two_step", "malformed"):
        lines = lines[:-1] + ["return answer"]
    elif defect == "hard_coded":
        lines = lines[:-1] + ["return " + _wrong_literal(kind, gold)]
    elif defect == "index_oor":
        lines = [ln.replace(", 0)", ", 9)") for ln in lines]
    elif defect == "wrong_noun":
        lines = [lines[0].replace(f'"{args["noun"]}"', f'"{args["decoy"]}"')] + lines[1:]
    elif defect == "lint_warning":
        return render(kind, steps, lines) + f'extra = count(find(image, "{args["decoy"]}"))\n'
    else:
        raise ValueError(defect)
    return render(kind, steps, lines)


def _pick_args(kind: str, rng: random.Random, scene_nouns: list) -> dict:
    if kind in ("count", "color"):
        return {"noun": scene_nouns[0], "decoy": scene_nouns[1]}
    if kind == "property":
        return {"noun": rng.choice(scene_nouns + [rng.choice(NOUNS)]), "color": rng.choice(COLORS), "decoy": scene_nouns[1]}
    return {"a": scene_nouns[0], "b": scene_nouns[1], "decoy": scene_nouns[-1]}


def build_suite(seed: int = SUITE_SEED, n: int = SUITE_SIZE) -> tuple[list, dict, dict]:
    """Return ``(tasks, mock_script, manifest)`` for ``n`` tasks."""
    rng = random.Random(seed)
    tasks, rules, manifest = [], [], {}
    for i in range(n):
        kind = KINDS[i % len(KINDS)]
        defect = DEFECTS.get(i)
        while True:
            nouns = rng.sample(NOUNS, rng.randint(2, 4))
            scene = random_scene(rng, nouns)
            args = _pick_args(kind, rng, nouns)
            gold = gold_answer(kind, scene, args)
            if defect != "wrong_noun" or len(_named(scene, args["noun"])) != len(_named(scene, args["decoy"])):
                break
        query = query_for(kind, i + 1, args)
        steps = steps_for(kind, args)
        correct = render(kind, steps, program_lines(kind, args))
        if defect is None:
            draft, fixes = correct, []
        else:
            draft = draft_variant(defect, kind, args, gold, steps)
            if defect == "never_fixed":
                fixes = [draft, draft]
            elif defect == "two_step":
                fixes = [draft_variant("hard_coded", kind, args, gold, steps), correct]
            elif defect == "malformed":
                fixes = ["Sorry, I cannot rewrite this program.", "Still no program here.", correct]
            else:
                fixes = [correct]
        task_id = f"t{i + 1:03d}"
        tasks.append({"id": task_id, "query": query, "scene": scene, "expected_answer": gold})
        numbered = "\n".join(f"{k}. {s}" for k, s in enumerate(steps, start=1)) + "\n"
        rules.append({"match": f"Decompose query: {query}\n", "responses": [numbered]})
        rules.append({"match": f"Write a program for query: {query}\n", "responses": [draft]})
        if fixes:
            rules.append({"match": f"Refine the program for query: {query}\n", "responses": fixes})
        manifest[task_id] = {"kind": kind, "defect": defect, "expected_answer": gold}
    queries = [t["query"] for t in tasks]
    assert len(set(queries)) == len(queries), "suite queries must be unique"
    return tasks, {"rules": rules}, manifest


def write_suite(out_dir=DATA_DIR, seed: int = SUITE_SEED, n: int = SUITE_SIZE) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks, script, manifest = build_suite(seed, n)
    (out / "tasks.jsonl").write_text("".join(json.dumps(t, sort_keys=True) + "\n" for t in tasks), encoding="utf-8")
    (out / "mock_script.json").write_text(json.dumps(script, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description="regenerate the hermetic evaluation suite")
    ap.add_argument("out_dir", nargs="?", default=str(DATA_DIR))
    ap.add_argument("--seed", type=int, default=SUITE_SEED)
    ap.add_argument("-n", type=int, default=SUITE_SIZE)
    args = ap.parse_args(argv)
    write_suite(args.out_dir, args.seed, args.n)


if __name__ == "__main__":
    main()
