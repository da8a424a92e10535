import pytest
from hypothesis import given, settings

from vprefine import analysis, dsl
from vprefine.runtime import PRIMITIVES, SyntheticBackend, execute, scene_from_dict
from vprefine.suite import random_scene

from conftest import CORPUS, DEFECT_MANIFEST, DEFECTS
from strategies import programs, small_names, typed_exprs


def codes(text):
    return [(d.code, d.line) for d in analysis.analyze(dsl.parse(text))]


def test_undefined_name_in_call_argument():
    assert codes("return count(xs)\n") == [("UNDEFINED_VAR", 1)]


def test_primitive_name_conflict():
    assert codes("find = 3\nreturn find\n") == [("NAME_CONFLICT_WITH_PRIMITIVE", 1)]


def test_missing_return():
    assert codes("x = 1\nif x > 0:\n    return x\n") == [("MISSING_RETURN", 2)]


def test_both_branches_returning_is_complete():
    assert codes("x = 1\nif x > 0:\n    return x\nelse:\n    return 0\n") == []


def test_maybe_assigned_is_undefined():
    assert codes("if exists(image, \"cat\"):\n    y = 1\nreturn y\n") == [("UNDEFINED_VAR", 3)]


def test_loop_carried_types_do_not_false_positive():
    text = "best = 0\nfor b in find(image, \"box\"):\n    w = width(b)\n    if w > best:\n        best = w\nreturn best\n"
    assert codes(text) == []


def test_nested_loop_reentry_is_not_shadowing():
    text = (
        "n = 0\nfor c in find(image, \"cup\"):\n    for p in find(image, \"plate\"):\n"
        "        if related(c, \"on\", p):\n            n = n + 1\nreturn n\n"
    )
    assert codes(text) == []


def test_type_mismatch_needs_known_types():
    assert codes("return width(\"x\")\n") == [("TYPE_MISMATCH", 1)]
    assert codes("for x in find(image, \"a\"):\n    y = x + 1\nreturn 0\n") == [("UNUSED_VAR", 2)]


def test_diagnostics_sorted_by_line_then_code():
    text = "total = 0\nfor c in find(image, \"cup\"):\n    total = total + 1\nreturn vcenter(c)\n"
    diags = analysis.analyze(dsl.parse(text))
    assert [d.code for d in diags] == ["LOOP_VAR_LEAK", "UNDEFINED_VAR"]
    assert all(d.severity == analysis.SEVERITY[d.code] for d in diags)


@pytest.mark.parametrize(
    "severities, expected",
    [((), 10.0), (("error", "warning"), 7.5), (("info",) * 3, 9.7), (("error",) * 6, 0.0)],
)
def test_lint_score_formula(severities, expected):
    code_for = {"error": "UNDEFINED_VAR", "warning": "SHADOWED_VAR", "info": "UNUSED_VAR"}
    diags = [analysis.Diagnostic(code_for[s], 1, "x") for s in severities]
    assert analysis.lint_score(dsl.ProgramAst(()), diags) == expected


@pytest.mark.parametrize("path", DEFECTS, ids=lambda p: p.stem)
def test_seeded_defects(path):
    expected = [(d["code"], d["line"]) for d in DEFECT_MANIFEST[path.name]]
    assert codes(path.read_text()) == expected


def test_defect_suite_covers_every_code():
    seen = {d["code"] for ds in DEFECT_MANIFEST.values() for d in ds}
    assert seen == set(analysis.SEVERITY)
    assert len(DEFECTS) == 12


@pytest.mark.parametrize("path", CORPUS, ids=lambda p: p.stem)
def test_corpus_is_clean(path):
    assert codes(path.read_text()) == []


# -- masking ----------------------------------------------------------------


def test_masking_examples():
    a = analysis.abstract_code(dsl.parse('ms = find(image, "muffin")\nif count(ms) > 2:\n    return True\nreturn False\n'))
    assert a.text == "<pad> = find(<pad>, <pad>)\nif count(<pad>) > <pad>:\n    return <pad>\nreturn <pad>\n"
    assert a.skeleton == ("assign", "if", "return", "end", "return")


def test_condition_operands_collapse_but_connectives_stay():
    a = analysis.abstract_code(dsl.parse("if n + 1 >= 2 and not flag:\n    return 1\nreturn 0\n"))
    assert a.text.splitlines()[0] == "if <pad> >= <pad> and not <pad>:"


def test_mask_callees_option():
    a = analysis.abstract_code(dsl.parse('return count(find(image, "x"))\n'), mask_callees=True)
    assert a.text == "return <pad>(<pad>(<pad>, <pad>))\n"


def leaked_tokens(text: str) -> list:
    allowed = set(PRIMITIVES) | dsl.KEYWORDS
    bad = []
    for line in text.splitlines():
        for tok in dsl.tokenize_line(line, abstract=True):
            if tok.kind in ("string", "number") or (tok.kind == "name" and tok.text not in allowed):
                bad.append(tok.text)
            if tok.kind == "keyword" and tok.text in ("True", "False"):
                bad.append(tok.text)
    return bad


def check_masking(ast):
    a = analysis.abstract_code(ast)
    assert leaked_tokens(a.text) == []
    reparsed = dsl.parse_abstract(a.text)
    assert tuple(dsl.skeleton(reparsed)) == a.skeleton == tuple(dsl.skeleton(ast))
    assert analysis.abstract_code(reparsed).text == a.text


@pytest.mark.parametrize("path", CORPUS, ids=lambda p: p.stem)
def test_corpus_masking(path):
    check_masking(dsl.parse(path.read_text()))


@settings(max_examples=150, deadline=None)
@given(programs())
def test_masking_properties_on_generated_programs(ast):
    check_masking(ast)


# -- soundness --------------------------------------------------------------

_SCENE = scene_from_dict(random_scene(__import__("random").Random(7), ["cup", "plate", "dog"]))


@settings(max_examples=300, deadline=None)
@given(programs(2, typed_exprs, small_names))
def test_no_undefined_name_at_runtime_without_errors(ast):
    ast = dsl.parse(dsl.canonical_text(ast))  # attach line spans
    diags = analysis.analyze(ast)
    if analysis.has_errors(diags):
        return
    result = execute(ast, _SCENE, SyntheticBackend(_SCENE), max_steps=2000)
    if result.runtime_error is not None:
        assert "undefined name" not in result.runtime_error.message


def _without(ast, line):
    keep = tuple(s for s in ast.statements if s.span.line != line)
    return dsl.ProgramAst(keep)


def test_removing_a_cause_does_not_lower_the_score():
    ast = dsl.parse('extra = find(image, "dog")\ncats = find(image, "cat")\nreturn count(cats)\n')
    fixed = _without(ast, 1)
    assert analysis.lint_score(fixed) >= analysis.lint_score(ast)
    assert analysis.lint_score(fixed) == 10.0
