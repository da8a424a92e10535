"""Hypothesis strategies for DSL programs and scenes shared by the property tests."""

from hypothesis import strategies as st

from vprefine import dsl
from vprefine.dsl import Assign, Binary, BoolLit, Call, For, If, Index, NumLit, Return, StrLit, Unary, Var

names = st.sampled_from(["a", "b", "xs", "cups", "n"])
atoms = st.one_of(
    names.map(Var),
    st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=8).map(StrLit),
    st.decimals(min_value=0, max_value=10**6, places=2, allow_nan=False).map(lambda d: NumLit(d.normalize())),
    st.booleans().map(BoolLit),
)


def _extend(children):
    return st.one_of(
        st.builds(Binary, st.sampled_from(dsl.BINARY_OPS), children, children),
        st.builds(Unary, st.sampled_from(["not", "-"]), children),
        st.builds(Index, children, children),
        st.builds(Call, st.sampled_from(["find", "count", "get"]), st.lists(children, max_size=3).map(tuple)),
    )


exprs = st.recursive(atoms, _extend, max_leaves=12)


def statements(depth: int, expr=exprs, var=names):
    simple = st.one_of(st.builds(Assign, var, expr), st.builds(Return, expr))
    if depth == 0:
        return simple
    block = st.lists(statements(depth - 1, expr, var), min_size=1, max_size=3).map(tuple)
    return st.one_of(
        simple,
        st.builds(If, expr, block, st.one_of(st.none(), block)),
        st.builds(For, var, expr, block),
    )


def programs(depth: int = 2, expr=exprs, var=names):
    return st.lists(statements(depth, expr, var), min_size=1, max_size=5).map(lambda s: dsl.ProgramAst(tuple(s)))


# well-typed-ish programs over the scene primitives, for runtime properties
small_names = st.sampled_from(["a", "b", "c"])
_noun = st.sampled_from(["cup", "plate", "dog"]).map(StrLit)
_img = st.just(Var("image"))
typed_atoms = st.one_of(
    small_names.map(Var),
    st.integers(0, 5).map(lambda i: NumLit(dsl.Decimal(i))),
    st.builds(Call, st.just("find"), st.tuples(_img, _noun)),
    st.builds(Call, st.just("exists"), st.tuples(_img, _noun)),
    st.builds(lambda n: Call("count", (Call("find", (Var("image"), n)),)), _noun),
)


def _typed_extend(children):
    return st.one_of(
        st.builds(Binary, st.sampled_from(["+", "-", "*", "<", "==", "and"]), children, children),
        st.builds(Call, st.just("count"), st.tuples(children)),
        st.builds(Call, st.just("get"), st.tuples(children, children)),
    )


typed_exprs = st.recursive(typed_atoms, _typed_extend, max_leaves=6)
