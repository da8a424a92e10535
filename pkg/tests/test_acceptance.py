"""Acceptance criteria, one test each; a pass/fail line per criterion is printed in the terminal summary."""

import random
import time

import pytest

from vprefine import analysis, dsl
from vprefine.clients import MockClient, MockScript
from vprefine.codebase import Codebase, bootstrap, retrieve
from vprefine.orchestrator import Clients, EngineConfig, evaluate, load_tasks
from vprefine.prompting import build_al_prompt, generate_logical_steps, generate_program
from vprefine.runtime import INPUT_VAR, PRIMITIVES, SyntheticBackend, execute, scene_from_dict
from vprefine.suite import COLORS, NOUNS, PREDICATES, random_scene

import oracle
from conftest import CORPUS, DEFECT_MANIFEST, DEFECTS, SUITE_SCRIPT, SUITE_TASKS, suite_clients
from test_analysis import leaked_tokens
from test_codebase import brute_top_k, random_codebase
from test_runtime import probe_mismatches

pytestmark = pytest.mark.acceptance

PRIMS = set(PRIMITIVES) | {INPUT_VAR}


@pytest.fixture(scope="module")
def suite_runs():
    """Full and visual-ablated evaluations of the shipped suite, with per-task reports."""
    full, ablated = [], []
    t0 = time.perf_counter()
    rep = evaluate(SUITE_TASKS, EngineConfig(), suite_clients(), keep_reports=full)
    elapsed = time.perf_counter() - t0
    channels = tuple(c for c in EngineConfig().feedback_channels if c != "visual")
    rep_nv = evaluate(SUITE_TASKS, EngineConfig(feedback_channels=channels), suite_clients(), keep_reports=ablated)
    return rep, full, elapsed, rep_nv, ablated


def test_c01_parser_round_trip():
    assert len(CORPUS) >= 30
    t0 = time.perf_counter()
    same = 0
    for path in CORPUS:
        ast = dsl.parse(path.read_text())
        same += dsl.parse(dsl.canonical_text(ast)) == ast
    elapsed = time.perf_counter() - t0
    print(f"round-trip {same}/{len(CORPUS)} in {elapsed:.3f}s")
    assert same == len(CORPUS) and elapsed < 1.0


def _originals(ast) -> set:
    toks = set()
    for line in dsl.canonical_text(ast).splitlines():
        for tok in dsl.tokenize_line(line):
            if tok.kind in ("string", "number"):
                toks.add(tok.text)
            elif tok.kind == "name" and tok.text not in PRIMS:
                toks.add(tok.text)
    return toks


def test_c02_masking_properties():
    ok = 0
    for path in CORPUS:
        ast = dsl.parse(path.read_text())
        a = analysis.abstract_code(ast)
        masked = {t.text for ln in a.text.splitlines() for t in dsl.tokenize_line(ln, abstract=True)}
        reparsed = dsl.parse_abstract(a.text)
        ok += (
            not (_originals(ast) & masked)
            and leaked_tokens(a.text) == []
            and tuple(dsl.skeleton(reparsed)) == a.skeleton == tuple(dsl.skeleton(ast))
            and analysis.abstract_code(reparsed).text == a.text
        )
    print(f"masking {ok}/{len(CORPUS)}")
    assert ok == len(CORPUS)


def test_c03_static_analysis_recall():
    assert len(DEFECTS) == 12
    hits = 0
    for path in DEFECTS:
        got = [{"code": d.code, "line": d.line} for d in analysis.analyze(dsl.parse(path.read_text()))]
        hits += got == DEFECT_MANIFEST[path.name]
    covered = {w["code"] for ws in DEFECT_MANIFEST.values() for w in ws}
    print(f"defects detected {hits}/12, codes covered {len(covered)}/{len(analysis.SEVERITY)}")
    assert hits == 12 and covered == set(analysis.SEVERITY)


def _probe_programs() -> list:
    progs = []
    for i, a in enumerate(NOUNS):
        b = NOUNS[(i + 1) % len(NOUNS)]
        color, pred = COLORS[i % len(COLORS)], PREDICATES[i % len(PREDICATES)]
        progs.append(
            f'xs = find(image, "{a}")\n'
            f'ys = find(image, "{b}s")\n'
            f'e = exists(image, "{a}")\n'
            f'v = verify_property(image, "{b}", "{color}")\n'
            "for x in xs:\n"
            f'    inner = find(x, "{a}")\n'
            f'    here = exists(x, "{b}")\n'
            f'    w = verify_property(x, "{a}", "{color}")\n'
            "    for y in ys:\n"
            f'        r = related(x, "{pred}", y)\n'
            f'        q = related(y, "{pred}", x)\n'
            "return e\n"
        )
    return [dsl.parse(p) for p in progs]


def _trace_mismatches(scene_dict, programs) -> tuple:
    scene = scene_from_dict(scene_dict)
    calls = bad = 0
    for ast in programs:
        res = execute(ast, scene, SyntheticBackend(scene))
        assert res.runtime_error is None
        for ev in res.trace:
            if ev.kind != "primitive_call":
                continue
            args, got = ev.args_snapshot, ev.value_snapshot
            calls += 1
            if ev.primitive == "find":
                bad += [p.object_ids[0] for p in got] != oracle.find_ids(scene_dict, args[0].box, args[1])
            elif ev.primitive == "exists":
                bad += got != oracle.exists(scene_dict, args[0].box, args[1])
            elif ev.primitive == "verify_property":
                bad += got != oracle.verify_property(scene_dict, args[0].box, args[1], args[2])
            elif ev.primitive == "related":
                bad += got != oracle.related(scene_dict, args[0].object_ids, args[1], args[2].object_ids)
    return calls, bad


def test_c04_oracle_equivalence():
    programs = _probe_programs()
    calls = bad = 0
    for seed in range(100):
        rng = random.Random(seed)
        scene = random_scene(rng, rng.sample(NOUNS, rng.randint(2, 5)))
        c, b = _trace_mismatches(scene, programs)
        calls, bad = calls + c, bad + b + probe_mismatches(scene)
    print(f"probe calls {calls}, mismatches {bad}")
    assert calls > 0 and bad == 0


def test_c05_retrieval_correctness():
    bad = checks = 0
    for seed in range(50):
        rng = random.Random(1000 + seed)
        cb = random_codebase(rng, rng.randint(1, 200))
        for _ in range(4):
            q = " ".join(rng.choice(["cup", "dog", "red", "how", "many", "left", "tree"]) for _ in range(rng.randint(1, 3)))
            for k in (1, 2, 5, 10):
                checks += 1
                bad += retrieve(cb, q, k) != brute_top_k(cb.entries, q, k)
    print(f"retrieval checks {checks}, mismatches {bad}")
    assert bad == 0


def _suite_generator(client, cb):
    def gen(query):
        steps = generate_logical_steps(query, client)
        al = build_al_prompt(query, steps, retrieve(cb, query, 2), 2)
        return steps, generate_program(al, client).source

    return gen


def test_c06_bootstrap_arithmetic_and_filtering():
    tasks = load_tasks(SUITE_TASKS)[:20]
    queries, scenes = [t.query for t in tasks], [t.scene for t in tasks]
    attempts, leaked, skipped = [], 0, 0
    for seed in range(10):
        cb = Codebase()
        client = MockClient(MockScript.load(SUITE_SCRIPT))
        rep = bootstrap(cb, queries, 0.2, seed=seed, generator=_suite_generator(client, cb), scenes=scenes)
        attempts.append(rep.to_dict()["insert_attempts"])
        skipped += len(rep.skipped)
        for e in cb:
            ast = dsl.parse(e.code)
            scene = scenes[queries.index(e.query)]
            errs = [d for d in analysis.analyze(ast) if d.severity == "error"]
            leaked += bool(errs) or execute(ast, scene, SyntheticBackend(scene)).runtime_error is not None
    print(f"insert attempts per seed {attempts}, skipped {skipped}, bad inserts {leaked}")
    assert set(attempts) == {4} and skipped > 0 and leaked == 0


def test_c07_refinement_convergence(suite_runs):
    rep, reports, elapsed, _, _ = suite_runs
    acc = rep.accuracy_by_iteration
    most = max(len(r.iterations) for r in reports)
    print(f"accuracy by iteration {acc}, max iterations {most}, {elapsed:.2f}s")
    assert acc[-1] > acc[0]
    assert all(x <= y for x, y in zip(acc, acc[1:]))
    assert most <= 3 and elapsed < 30.0


def test_c08_lint_direction(suite_runs):
    rep = suite_runs[0]
    print(f"mean lint draft {rep.mean_lint_score_draft:.3f}, final {rep.mean_lint_score_final:.3f}")
    assert rep.mean_lint_score_final > rep.mean_lint_score_draft


def test_c09_feedback_ablation(suite_runs):
    rep, full, _, rep_nv, ablated = suite_runs
    stray = exact = compared = 0
    for a, b in zip(full, ablated):
        for x, y in zip(a.iterations, b.iterations):
            stray += len(y.feedback.by_source("visual"))
            if x.program == y.program:
                compared += 1
                exact += y.feedback.items == tuple(i for i in x.feedback.items if i.source != "visual")
    print(f"accuracy full {rep.accuracy:.2f}, no-visual {rep_nv.accuracy:.2f}, bundles {exact}/{compared} exact, stray {stray}")
    assert rep_nv.accuracy <= rep.accuracy
    assert stray == 0 and compared > 0 and exact == compared


def test_c10_determinism(tmp_path):
    outs = []
    for name in ("a", "b"):
        rep = evaluate(SUITE_TASKS, EngineConfig(seed=7), suite_clients())
        rep.write(tmp_path / name)
        outs.append(
            ((tmp_path / name / "eval_report.json").read_bytes(), (tmp_path / name / "accuracy_vs_iteration.csv").read_bytes())
        )
    print(f"report bytes {len(outs[0][0])}, identical {outs[0] == outs[1]}")
    assert outs[0] == outs[1]
