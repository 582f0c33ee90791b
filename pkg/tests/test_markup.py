from __future__ import annotations

import random

import pytest

from gritforge.geometry import NormBox
from gritforge.markup import (
    IssueKind,
    MarkedText,
    MarkupParseError,
    QuantBox,
    Ref,
    ReservedTokenError,
    Text,
    dequantize,
    extract_boxes,
    marked,
    parse,
    quantize,
    render,
    wrap_image,
)

from conftest import malformed_corpus, random_marked_text


class TestQuantize:
    def test_linear_scaling(self):
        assert quantize(NormBox(0.25, 0.5, 0.75, 1.0)) == QuantBox(250, 500, 750, 1000)

    def test_origin(self):
        assert quantize(NormBox(0, 0, 0, 0)) == QuantBox(0, 0, 0, 0)

    def test_round_half_up(self):
        # hand-applied: 123.4 -> 123, 999.9 -> 1000
        assert quantize(NormBox(0.1234, 0.5, 0.9999, 1.0)) == QuantBox(123, 500, 1000, 1000)

    def test_monotone_ordering_preserved(self, rng):
        for _ in range(2000):
            x0, x1 = sorted(rng.random() for _ in range(2))
            y0, y1 = sorted(rng.random() for _ in range(2))
            q = quantize(NormBox(x0, y0, x1, y1))
            assert q.x0 <= q.x1 and q.y0 <= q.y1


class TestDequantize:
    def test_exact_division(self):
        assert dequantize(QuantBox(250, 500, 750, 1000)) == NormBox(0.25, 0.5, 0.75, 1.0)

    def test_quantize_of_dequantize_is_identity(self, rng):
        for _ in range(1000):
            x0, x1 = sorted(rng.randint(0, 1000) for _ in range(2))
            y0, y1 = sorted(rng.randint(0, 1000) for _ in range(2))
            q = QuantBox(x0, y0, x1, y1)
            assert quantize(dequantize(q)) == q

    def test_roundtrip_error_bound_on_grid(self):
        # exhaustive 10^4-sample grid of one coordinate
        for i in range(10**4):
            v = i / 10**4
            q = quantize(NormBox(v, v, v, v))
            back = dequantize(q)
            assert abs(back.x0 - v) <= 0.0005 + 1e-12


class TestRender:
    def test_single_ref(self):
        mt = marked(Ref("liver", (QuantBox(103, 214, 486, 702),)))
        assert render(mt) == "<ref>liver</ref><box>(103,214),(486,702)</box>"

    def test_plain_text(self):
        assert render(marked(Text("hello"))) == "hello"

    def test_two_boxes_concatenated(self):
        mt = marked(Ref("lesions", (QuantBox(1, 2, 3, 4), QuantBox(5, 6, 7, 8))))
        assert render(mt) == "<ref>lesions</ref><box>(1,2),(3,4)</box><box>(5,6),(7,8)</box>"

    def test_reserved_token_in_text_refused(self):
        with pytest.raises(ReservedTokenError):
            render(MarkedText((Text("evil <box> here"),)))
        with pytest.raises(ReservedTokenError):
            render(MarkedText((Ref("bad</ref>", (QuantBox(0, 0, 1, 1),)),)))


class TestParse:
    def test_roundtrip_simple(self):
        mt = marked(Text("see "), Ref("liver", (QuantBox(1, 2, 3, 4),)), Text(" here"))
        doc, issues = parse(render(mt), "strict")
        assert doc == mt and issues == []

    def test_strict_box_without_ref(self):
        with pytest.raises(MarkupParseError) as err:
            parse("<box>(1,2),(3,4)</box>", "strict")
        assert err.value.issue.kind is IssueKind.BOX_WITHOUT_REF

    def test_lenient_box_without_ref_recovers(self):
        doc, issues = parse("<box>(1,2),(3,4)</box>", "lenient")
        assert doc == MarkedText((Ref("", (QuantBox(1, 2, 3, 4),)),))
        assert [i.kind for i in issues] == [IssueKind.BOX_WITHOUT_REF]

    def test_lenient_clamps_out_of_range(self):
        doc, issues = parse("<ref>liver</ref><box>(1,2),(3,1400)</box>", "lenient")
        assert doc == MarkedText((Ref("liver", (QuantBox(1, 2, 3, 1000),)),))
        assert [i.kind for i in issues] == [IssueKind.OUT_OF_RANGE]

    def test_strict_rejects_out_of_range(self):
        with pytest.raises(MarkupParseError) as err:
            parse("<ref>liver</ref><box>(1,2),(3,1400)</box>", "strict")
        assert err.value.issue.kind is IssueKind.OUT_OF_RANGE

    def test_lenient_accepts_spaces_in_tuples(self):
        doc, issues = parse("<ref>a</ref><box>( 1 , 2 ), ( 3 , 4 )</box>", "lenient")
        assert doc == MarkedText((Ref("a", (QuantBox(1, 2, 3, 4),)),))
        assert issues == []

    def test_strict_rejects_spaces_in_tuples(self):
        with pytest.raises(MarkupParseError) as err:
            parse("<ref>a</ref><box>(1, 2),(3,4)</box>", "strict")
        assert err.value.issue.kind is IssueKind.MALFORMED_COORDINATE

    def test_lenient_unclosed_ref_demotes_to_text(self):
        doc, issues = parse("<ref>liver", "lenient")
        assert doc == MarkedText((Text("liver"),))
        assert [i.kind for i in issues] == [IssueKind.UNCLOSED_TAG]

    def test_lenient_ref_without_box_demotes_to_text(self):
        doc, issues = parse("hi <ref>liver</ref> there", "lenient")
        assert doc == MarkedText((Text("hi liver there"),))
        assert [i.kind for i in issues] == [IssueKind.REF_WITHOUT_BOX]

    def test_consecutive_orphan_boxes_merge(self):
        doc, issues = parse("<box>(1,2),(3,4)</box><box>(5,6),(7,8)</box>", "lenient")
        assert doc == MarkedText((Ref("", (QuantBox(1, 2, 3, 4), QuantBox(5, 6, 7, 8))),))

    def test_empty_input(self):
        assert parse("", "strict") == (MarkedText(()), [])

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            parse("x", "fuzzy")


class TestExtractBoxes:
    def test_multi_box_ref(self):
        b1, b2 = QuantBox(1, 2, 3, 4), QuantBox(5, 6, 7, 8)
        mt = marked(Ref("liver", (b1, b2)))
        assert extract_boxes(mt) == [("liver", b1), ("liver", b2)]

    def test_pure_text(self):
        assert extract_boxes(marked(Text("nothing here"))) == []

    def test_two_refs_in_order(self):
        b1, b2 = QuantBox(1, 2, 3, 4), QuantBox(5, 6, 7, 8)
        mt = marked(Ref("a", (b1,)), Text(" and "), Ref("b", (b2,)))
        assert extract_boxes(mt) == [("a", b1), ("b", b2)]


def test_image_marker_wraps_once():
    prompt = wrap_image("scan_001.png")
    assert prompt == "<img>scan_001.png</img>"
    assert prompt.count("<img>") == 1 and prompt.count("</img>") == 1


def _assert_canonical(doc: MarkedText) -> None:
    previous_was_text = False
    for seg in doc.segments:
        if isinstance(seg, Text):
            assert seg.raw, "empty text segment"
            assert not previous_was_text, "adjacent text segments"
            for token in ("<ref>", "</ref>", "<box>", "</box>"):
                assert token not in seg.raw
            previous_was_text = True
        else:
            assert seg.boxes, "ref without boxes"
            previous_was_text = False


class TestRandomizedRoundTrip:
    def test_roundtrip_10k(self):
        rng = random.Random(1234)
        for _ in range(10_000):
            mt = random_marked_text(rng)
            wire = render(mt)
            doc, issues = parse(wire, "strict")
            assert issues == []
            assert doc == mt

    def test_lenient_matches_strict_on_valid_input(self):
        rng = random.Random(4321)
        for _ in range(2000):
            mt = random_marked_text(rng)
            doc, issues = parse(render(mt), "lenient")
            assert issues == []
            assert doc == mt

    def test_lenient_total_on_random_tag_soup(self):
        rng = random.Random(777)
        pieces = [
            "<ref>", "</ref>", "<box>", "</box>", "(", ")", ",", "1", "99", "1400",
            "-3", "liver", " ", "x", "<", ">", "<img>", "</img>", "(1,2),(3,4)", "(1,2)",
        ]
        for _ in range(20_000):
            soup = "".join(rng.choice(pieces) for _ in range(rng.randint(0, 12)))
            doc, _ = parse(soup, "lenient")
            _assert_canonical(doc)
            redoc, reissues = parse(render(doc), "strict")
            assert redoc == doc and reissues == []

    def test_malformed_corpus_strict_kinds_and_lenient_totality(self):
        rng = random.Random(987)
        for source, expected_kind in malformed_corpus(rng, 200):
            with pytest.raises(MarkupParseError) as err:
                parse(source, "strict")
            assert err.value.issue.kind.value == expected_kind, source
            doc, issues = parse(source, "lenient")
            _assert_canonical(doc)
            # recovered documents re-render and re-parse cleanly
            redoc, reissues = parse(render(doc), "strict")
            assert redoc == doc and reissues == []
