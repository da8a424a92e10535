import json
import random

import pytest

from vprefine import analysis, dsl
from vprefine.runtime import SyntheticBackend, execute, format_value, scene_from_dict
from vprefine.suite import DATA_DIR, DEFECTS, KINDS, SUITE_SIZE, build_suite, random_scene, write_suite


def test_shipped_files_match_regeneration(tmp_path):
    write_suite(tmp_path)
    for name in ("tasks.jsonl", "mock_script.json", "manifest.json"):
        assert (tmp_path / name).read_bytes() == (DATA_DIR / name).read_bytes(), name


def test_suite_shape():
    tasks, script, manifest = build_suite()
    assert len(tasks) == SUITE_SIZE == len(manifest)
    assert len({t["query"] for t in tasks}) == SUITE_SIZE
    assert {m["kind"] for m in manifest.values()} == set(KINDS)
    assert sum(m["defect"] is not None for m in manifest.values()) == len(DEFECTS)


def test_reference_programs_reach_gold_answers():
    """The scripted corrected programs, executed by the interpreter, agree with the brute-force gold."""
    tasks, script, _ = build_suite()
    last = {}
    for rule in script["rules"]:
        if rule["match"].startswith(("Write", "Refine")):
            last[rule["match"].split(": ", 1)[1].rstrip("\n")] = rule["responses"][-1]
    for t in tasks:
        ast = dsl.parse(last[t["query"]])
        if any(d.severity == "error" for d in analysis.analyze(ast)):
            continue  # never-fixed task
        scene = scene_from_dict(t["scene"])
        res = execute(ast, scene, SyntheticBackend(scene))
        assert res.runtime_error is None, t["id"]
        assert format_value(res.result).casefold() == t["expected_answer"], t["id"]


@pytest.mark.parametrize("seed", range(20))
def test_random_scenes_do_not_nest_boxes(seed):
    scene = random_scene(random.Random(seed))
    boxes = [o["box"] for o in scene["objects"]]
    for i, a in enumerate(boxes):
        for b in boxes[i + 1 :]:
            overlap_x = a[0] < b[0] + b[2] and b[0] < a[0] + a[2]
            overlap_y = a[1] < b[1] + b[3] and b[1] < a[1] + a[3]
            assert not (overlap_x and overlap_y)
    scene_from_dict(json.loads(json.dumps(scene)))
