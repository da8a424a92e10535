import pytest

from vprefine import dsl
from vprefine.codebase import make_entry
from vprefine.prompting import (
    TEMPLATE_NAMES,
    MalformedModelReply,
    MissingSlot,
    build_al_prompt,
    check_program,
    extract_code,
    generate_logical_steps,
    generate_program,
    parse_steps,
    refine_program,
    render_template,
    template_slots,
)

from conftest import scripted

Q = "how many cups are there?"
GOOD = '# step 1: find the cups\ncups = find(image, "cup")\n# step 2: count the cups\nreturn count(cups)\n'


def test_every_template_renders_with_its_slots():
    for name in TEMPLATE_NAMES:
        slots = {s: f"<{s}>" for s in template_slots(name)}
        text = render_template(name, slots)
        assert "{{" not in text
        assert all(v in text for v in slots.values())


def test_missing_slot_names_slot_and_template():
    with pytest.raises(MissingSlot) as exc:
        render_template("REFINE", {"QUERY": "q"})
    assert exc.value.template == "REFINE" and exc.value.slot in ("PROGRAM", "FEEDBACK")


def test_custom_templates_dir(tmp_path):
    (tmp_path / "DECOMPOSE.txt").write_text("Q={{QUERY}}\n")
    assert render_template("DECOMPOSE", {"QUERY": "x"}, tmp_path) == "Q=x\n"


@pytest.mark.parametrize(
    "reply, steps",
    [
        ("1. find the cups\n2. count them\n", ["find the cups", "count them"]),
        ("Sure!\n1) a\n\n2) b\nThanks", ["a", "b"]),
    ],
)
def test_parse_steps(reply, steps):
    assert parse_steps(reply) == steps


@pytest.mark.parametrize("reply", ["no numbers here", "1. a\n3. b\n", "2. a\n", "1. \n"])
def test_parse_steps_rejects(reply):
    with pytest.raises(MalformedModelReply):
        parse_steps(reply)


def test_decomposition_retries_once():
    c = scripted({f"Decompose query: {Q}": ["I think we should look", "1. find the cups\n2. count the cups\n"]})
    assert generate_logical_steps(Q, c) == ["find the cups", "count the cups"]
    c = scripted({f"Decompose query: {Q}": ["nope", "still nope"]})
    with pytest.raises(MalformedModelReply):
        generate_logical_steps(Q, c)


def test_al_prompt_without_examples():
    al = build_al_prompt(Q, ["find the cups"], [])
    assert "(none)" in al.rendered and al.donor_ids == ()
    assert al.rendered.rstrip("\n").endswith(f"Write a program for query: {Q}")
    assert "1. find the cups" in al.rendered


def test_al_prompt_masks_donors_and_orders_them_by_step_similarity():
    donors = [
        make_entry("is there a red dog?", ["check for a red dog"], 'return verify_property(image, "dog", "red")\n'),
        make_entry("count the cups", ["find the cups", "count the cups"], GOOD),
        make_entry("unrelated", ["look at the sky"], "return 1\n"),
    ]
    al = build_al_prompt(Q, ["find the cups", "count the cups"], donors, k=2)
    assert al.donor_ids[0] == donors[1].id and len(al.donor_ids) == 2
    assert list(al.similarities) == sorted(al.similarities, reverse=True)
    examples = al.rendered.split("Abstract example programs")[1].split("Write one program")[0]
    assert "<pad> = find(<pad>, <pad>)" in examples
    assert '"cup"' not in examples and '"dog"' not in examples


def test_extract_code_strips_fences():
    assert extract_code("Here:\n```python\nreturn 1\n```\nbye") == "return 1\n"
    assert extract_code("\n\nreturn 1\n\n") == "return 1\n"


def test_check_program_reports_step_problems():
    _, problems = check_program("# step 2: x\nreturn 1\n", [1, 2])
    assert problems == ["missing step comments: [1]"]
    ast, problems = check_program("return (\n", [1])
    assert ast is None and problems[0].startswith("parse error at line 1")


def _al():
    return build_al_prompt(Q, ["find the cups", "count the cups"], [])


def test_generation_clean_first_try():
    g = generate_program(_al(), scripted({f"query: {Q}": ["```\n" + GOOD + "```"]}))
    assert g.source.text == GOOD and g.source.origin == "generated" and not g.reasked


def test_generation_reasks_with_problems_listed():
    c = scripted({"previous reply had these problems": [GOOD], f"query: {Q}": ["return (\n"]})
    g = generate_program(_al(), c)
    assert g.reasked and g.issues == () and g.first_issues[0].startswith("parse error")


def test_generation_best_effort_after_retry():
    no_steps = "return count(find(image, \"cup\"))\n"
    g = generate_program(_al(), scripted({f"query: {Q}": [no_steps, no_steps]}))
    assert g.issues == ("missing step comments: [1, 2]",)
    assert dsl.canonical_text(g.ast) == no_steps


def test_generation_raises_when_retry_unparsable():
    with pytest.raises(MalformedModelReply):
        generate_program(_al(), scripted({f"query: {Q}": ["(", ")"]}))


def test_refine_expects_prior_step_ids():
    prior = dsl.SourceProgram(GOOD.replace("count(cups)", "count(cup)"), "generated")
    c = scripted({f"Refine the program for query: {Q}": [GOOD]})
    g = refine_program(Q, prior, "COMPILE:\n- [error] static_diag: UNDEFINED_VAR", c)
    assert g.source.origin == "refined" and g.source.text == GOOD
