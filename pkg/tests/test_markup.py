import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundseg.markup import (
    EntityIdentifier,
    IdentifierError,
    MarkupError,
    UnresolvedReferenceError,
    build_response,
    find_identifiers,
    parse_identifier,
    parse_response,
    resolve_references,
    serialize_response,
)

from helpers import random_response


def test_single_phrase():
    r = parse_response("The <p>table</p> [SEG] (IMAGE1) is larger.", 2)
    assert [(p.text, p.image_index, p.within_image_order) for p in r.phrases] == [("table", 1, 1)]
    s, e = r.phrases[0].char_span
    assert r.raw_text[s:e] == "table"
    assert r.counts() == [1, 0]


def test_no_phrases_lenient():
    r = parse_response("Nothing grounded here.", 3, strict=False)
    assert r.phrases == ()


def test_no_phrases_strict_raises():
    with pytest.raises(MarkupError):
        parse_response("Nothing grounded here.", 3, strict=True)


def test_two_images_out_of_order():
    text = "A <p>red chair</p> [SEG] (IMAGE2) and a <p>desk</p>[SEG](IMAGE1)."
    r = parse_response(text, 2)
    groups = r.per_image()
    assert [p.text for p in groups[1]] == ["desk"]
    assert [p.text for p in groups[2]] == ["red chair"]
    assert [p.within_image_order for p in r.phrases] == [1, 1]


def test_whitespace_between_tokens():
    r = parse_response("<p>x</p>\n\t[SEG]  (IMAGE1)", 1)
    assert r.phrases[0].text == "x"


@pytest.mark.parametrize(
    "text,offset",
    [
        ("a <p>b</p> [SEG] c", 11),  # [SEG] without image tag
        ("a <p>b [SEG] (IMAGE1)", 7),  # [SEG] inside an open phrase
        ("a <p>b <p>c</p></p>", 7),  # nested
        ("a b</p>", 3),  # close without open
        ("a <p>b", 2),  # never closed
        ("a <p>b</p> [SEG] (IMAGE0)", 23),  # image 0
        ("a <p>b</p> [SEG] (IMAGE3)", 23),  # > num_images
        ("[SEG] (IMAGE1)", 0),
        ("<p>b</p> then prose", 8),
    ],
)
def test_malformed_markup(text, offset):
    with pytest.raises(MarkupError) as err:
        parse_response(text, 2, strict=True)
    assert err.value.offset == offset


def test_lenient_drops_out_of_range_image():
    r = parse_response("<p>a</p> [SEG] (IMAGE5) <p>b</p> [SEG] (IMAGE1)", 2, strict=False)
    assert [p.text for p in r.phrases] == ["b"]


def test_serialize_examples():
    empty = parse_response("plain text", 1, strict=False)
    assert serialize_response(empty) == "plain text"
    one = build_response(["see ", ("lamp", 1), " there"], 1)
    out = serialize_response(one)
    assert out.count("<p>") == out.count("</p>") == out.count("[SEG]") == out.count("(IMAGE") == 1


def test_serialize_canonicalises_whitespace():
    r = parse_response("x <p>cup</p>\n[SEG]\t(IMAGE2) y", 2)
    assert serialize_response(r) == "x <p>cup</p> [SEG] (IMAGE2) y"


def test_roundtrip_generated_responses():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        r = random_response(rng)
        back = parse_response(serialize_response(r), r.num_images, strict=False)
        assert back.phrases == r.phrases
        assert serialize_response(back) == serialize_response(r)
        # conservation and gap-free ordering
        assert serialize_response(r).count("<p>") == sum(r.counts())
        for j, group in r.per_image().items():
            assert [p.within_image_order for p in group] == list(range(1, len(group) + 1))


# ------------------------------------------------------------------ identifiers


def test_identifier_fixtures():
    assert parse_identifier("table_101") == EntityIdentifier("table", 1, 1, None)
    assert parse_identifier("drawer_10101") == EntityIdentifier("drawer", 1, 1, 1)
    rocket = parse_identifier("rocket_101_202")
    assert rocket.refs == ((1, 1, None), (2, 2, None))
    assert rocket.name == "rocket"


def test_identifier_lowercases_and_keeps_underscored_names():
    ident = parse_identifier("Chest_of_Drawers_312")
    assert ident.name == "chest_of_drawers"
    assert ident.refs == ((3, 12, None),)


@pytest.mark.parametrize("token", ["table_1011", "table_11", "_101", "table", "table_001", "table_101_2"])
def test_identifier_malformed(token):
    with pytest.raises(IdentifierError):
        parse_identifier(token)


ref_st = st.tuples(st.integers(1, 9), st.integers(0, 99), st.one_of(st.none(), st.integers(0, 99)))


@settings(max_examples=300, deadline=None)
@given(st.from_regex(r"[a-z]{1,8}", fullmatch=True), st.lists(ref_st, min_size=1, max_size=3))
def test_identifier_token_roundtrip(name, refs):
    ident = EntityIdentifier(name, *refs[0], tuple(refs[1:]))
    assert parse_identifier(ident.token()) == ident


@settings(max_examples=300, deadline=None)
@given(
    st.from_regex(r"[a-z]{1,5}", fullmatch=True), st.lists(ref_st, min_size=1, max_size=2),
    st.from_regex(r"[a-z]{1,5}", fullmatch=True), st.lists(ref_st, min_size=1, max_size=2),
)
def test_identifier_injective(n1, r1, n2, r2):
    t1 = EntityIdentifier(n1, *r1[0], tuple(r1[1:])).token()
    t2 = EntityIdentifier(n2, *r2[0], tuple(r2[1:])).token()
    if t1 != t2:
        a, b = parse_identifier(t1), parse_identifier(t2)
        assert (a.name, a.refs) != (b.name, b.refs)


def test_find_identifiers_in_text():
    found = find_identifiers("The table_101 and rocket_101_202, not (IMAGE1).")
    assert [i.token() for i, _ in found] == ["table_101", "rocket_101_202"]


class Ann:
    def __init__(self, name):
        self.name = name


ANNOTATIONS = {
    (1, 1, None): Ann("table"),
    (1, 1, 1): Ann("drawer"),
    (1, 2, None): Ann("rocket"),
    (2, 2, None): Ann("rocket"),
}


def test_resolve_single():
    out = resolve_references("The table_101 is big.", ANNOTATIONS)
    assert len(out) == 1 and out[0].annotation.name == "table"


def test_resolve_missing():
    with pytest.raises(UnresolvedReferenceError) as err:
        resolve_references("A zebra_305 appears.", ANNOTATIONS)
    assert err.value.token == "zebra_305"


def test_resolve_multi_image():
    ann = {(1, 1, None): Ann("rocket"), (2, 2, None): Ann("rocket")}
    out = resolve_references("The rocket_101_202 flies.", ann)
    assert [t.ref for t in out] == [(1, 1, None), (2, 2, None)]


def test_resolve_name_mismatch():
    with pytest.raises(UnresolvedReferenceError):
        resolve_references("The chair_101 is big.", ANNOTATIONS)


def test_resolve_name_ignores_spaces():
    out = resolve_references("A chestofdrawers_101 stands.", {(1, 1, None): Ann("chest of drawers")})
    assert len(out) == 1
