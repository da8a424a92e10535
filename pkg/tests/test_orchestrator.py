import json
from decimal import Decimal

import pytest

from vprefine.codebase import Codebase, make_entry
from vprefine.orchestrator import (
    Clients,
    EngineConfig,
    Task,
    answers_match,
    evaluate,
    load_tasks,
    run_task,
)

from conftest import SUITE_TASKS, scripted, suite_clients

Q = "How many muffins are there?"
STEPS = "1. find the muffins\n2. count the muffins\n"
GOOD = '# step 1: find the muffins\nms = find(image, "muffin")\n# step 2: count the muffins\nreturn count(ms)\n'
BAD = GOOD.replace("count(ms)", "count(m)")


def clients(draft, *fixes):
    rules = {f"Decompose query: {Q}": [STEPS], f"Write a program for query: {Q}": [draft]}
    if fixes:
        rules[f"Refine the program for query: {Q}"] = list(fixes)
    return Clients(scripted(rules))


def go(muffin_scene, c, cb=None, cfg=EngineConfig(), **kw):
    return run_task(Q, muffin_scene, cb if cb is not None else Codebase(), cfg, c, **kw)


def test_refinement_fixes_undefined_variable(muffin_scene):
    rep = go(muffin_scene, clients(BAD, GOOD))
    assert len(rep.iterations) == 2
    first, second = rep.iterations
    assert not first.stopped_early and second.stopped_early
    assert any(i.message.startswith("UNDEFINED_VAR") for i in first.feedback.items)
    assert rep.final_result == Decimal(3) and rep.codebase_action == "inserted"
    assert second.program.origin == "refined"


def test_clean_draft_stops_after_one_iteration(muffin_scene):
    rep = go(muffin_scene, clients(GOOD))
    assert len(rep.iterations) == 1 and rep.iterations[0].stopped_early
    assert rep.final_result == Decimal(3)


def test_budget_when_never_fixed(muffin_scene):
    cb = Codebase()
    rep = go(muffin_scene, clients(BAD, BAD, BAD), cb)
    assert len(rep.iterations) == 3 and not any(r.stopped_early for r in rep.iterations)
    assert rep.final_result is None and rep.iterations[-1].execution.runtime_error is not None
    assert rep.codebase_action == "none" and len(cb) == 0


def test_budget_is_configurable(muffin_scene):
    rep = go(muffin_scene, clients(BAD, BAD), cfg=EngineConfig(max_iterations=2))
    assert len(rep.iterations) == 2


def test_unparsable_refinement_keeps_prior_program(muffin_scene):
    rep = go(muffin_scene, clients(BAD, "(((", ")))", GOOD))
    assert len(rep.iterations) == 3
    assert rep.iterations[1].program == rep.iterations[0].program
    assert "refinement failed" in rep.iterations[0].notes[0]
    assert rep.final_result == Decimal(3)


def test_model_failure_aborts(muffin_scene):
    rep = go(muffin_scene, clients(BAD))  # no refine responses
    assert rep.failure is not None and rep.failure_prompt is not None
    assert rep.final_result is None and not rep.answered
    assert "model failure" in rep.iterations[-1].notes[-1]
    assert rep.to_dict()["final_result"] is None


def test_decomposition_failure_aborts_before_execution(muffin_scene):
    rep = go(muffin_scene, Clients(scripted({})))
    assert rep.iterations == [] and rep.failure.startswith("MockUnmatched")


def test_write_back_replaces_or_keeps_stored_program(muffin_scene):
    cb = Codebase()
    assert go(muffin_scene, clients(GOOD), cb).codebase_action == "inserted"
    assert cb.entries[0].status == "draft"
    noisy = GOOD.replace("return count(ms)", "x = 1\nreturn count(ms)")
    assert go(muffin_scene, clients(noisy), cb).codebase_action == "kept_draft"
    assert cb.entries[0].code.text == GOOD and cb.entries[0].stats == {"runs": 2, "error_free_runs": 2}
    cb2 = Codebase([make_entry(Q, ["s"], noisy.replace("# step 1: find the muffins\n", "").replace("# step 2: count the muffins\n", ""))])
    assert go(muffin_scene, clients(GOOD), cb2).codebase_action == "replaced_draft"
    assert cb2.entries[0].code.text == GOOD and cb2.entries[0].stats == {"runs": 1, "error_free_runs": 1}


def test_human_lines_enter_the_bundle(muffin_scene):
    seen = []

    def human(i, bundle):
        seen.append(i)
        return ["count only the pink muffin"] if i == 1 else []

    cfg = EngineConfig(human_feedback_enabled=True)
    rep = go(muffin_scene, clients(GOOD, GOOD), cfg=cfg, human=human)
    assert seen == [1, 2]
    assert [i.message for i in rep.iterations[0].feedback.by_source("human")] == ["count only the pink muffin"]
    assert rep.iterations[1].stopped_early


def test_report_json_shape(muffin_scene):
    d = go(muffin_scene, clients(BAD, GOOD)).to_dict()
    assert d["final_result"] == {"t": "num", "v": 3}
    assert [it["index"] for it in d["iterations"]] == [1, 2]
    json.dumps(d)


@pytest.mark.parametrize(
    "kw",
    [{"max_iterations": 0}, {"bootstrap_fraction": 1.5}, {"mode": "cloud"}, {"feedback_channels": ("smell",)}],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        EngineConfig(**kw)


@pytest.mark.parametrize(
    "value, expected, ok",
    [
        (Decimal(3), "3", True),
        (Decimal("3.0"), " 3 ", True),
        (True, "Yes", True),
        (False, "yes", False),
        ("Red ", "red", True),
        (None, "3", False),
        ("3", "3.00", True),
    ],
)
def test_answer_normalization(value, expected, ok):
    assert answers_match(value, expected) is ok


def test_degenerate_suite_scores_one(muffin_scene):
    tasks = [Task("a", Q, muffin_scene, "3")]
    rep = evaluate(tasks, EngineConfig(), clients(GOOD))
    assert rep.accuracy == 1.0 and rep.avg_iterations == 1.0
    assert rep.accuracy_by_iteration == [1.0, 1.0, 1.0]
    assert rep.curve_csv() == "iteration,accuracy\n1,1.000000\n2,1.000000\n3,1.000000\n"


def test_failed_tasks_count_as_incorrect(muffin_scene):
    rep = evaluate([Task("a", Q, muffin_scene, "3")], EngineConfig(), Clients(scripted({})))
    assert rep.accuracy == 0.0 and rep.failures[0]["task_id"] == "a"


def test_load_tasks_with_scene_path(tmp_path, muffin_scene):
    (tmp_path / "s.json").write_text(json.dumps(muffin_scene.to_dict()))
    (tmp_path / "t.jsonl").write_text(json.dumps({"id": "x", "query": Q, "scene": "s.json", "expected_answer": "3"}) + "\n")
    assert load_tasks(tmp_path / "t.jsonl") == [Task("x", Q, muffin_scene, "3")]
    (tmp_path / "bad.jsonl").write_text('{"id": "x"}\n')
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        load_tasks(tmp_path / "bad.jsonl")


def test_suite_invariants_hold_for_every_task():
    reports = []
    evaluate(SUITE_TASKS, EngineConfig(), suite_clients(), keep_reports=reports)
    for rep in reports:
        assert 1 <= len(rep.iterations) <= 3
        for it in rep.iterations:
            if it.stopped_early:
                assert it.feedback.counts["error"] == it.feedback.counts["warning"] == 0
        last = rep.iterations[-1].execution
        assert rep.final_result == last.result


def test_parallel_eval_matches_sequential():
    a = evaluate(SUITE_TASKS, EngineConfig(), suite_clients(), jobs=1).to_json()
    b = evaluate(SUITE_TASKS, EngineConfig(), suite_clients(), jobs=4).to_json()
    assert a == b
