from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from roivqa.metrics import (
    EvalReport,
    ScoredItem,
    aggregate,
    closed_accuracy,
    extract_choice,
    iou,
    localization_accuracy,
    markdown_table,
    normalize,
    parse_bbox,
    token_recall,
)

COLORS = {"A": "Yellow", "B": "Purple", "C": "Green", "D": "Red"}


def raster_iou(a, b):
    pa = {(x, y) for x in range(a[0], a[2]) for y in range(a[1], a[3])}
    pb = {(x, y) for x in range(b[0], b[2]) for y in range(b[1], b[3])}
    return Fraction(len(pa & pb), len(pa | pb))


@pytest.mark.parametrize("text,tokens", [
    ("Yes.", ["yes"]),
    ("The Brain Enhancing Tumor", ["brain", "enhancing", "tumor"]),
    ("", []),
    ("  the a An heart!! ", ["heart"]),
    ("Left-lung, (upper)", ["leftlung", "upper"]),
])
def test_normalize(text, tokens):
    assert list(normalize(text).tokens) == tokens


@given(st.text())
def test_normalize_idempotent(s):
    once = normalize(s)
    assert normalize(" ".join(once.tokens)).tokens == once.tokens
    assert all(t.isalnum() for t in once.tokens)


def test_closed_accuracy():
    assert closed_accuracy(["Yes."], ["yes"]) == 1
    assert closed_accuracy(["yes", "no", "yes", "no"], ["yes", "no", "yes", "yes"]) == Fraction(3, 4)
    assert closed_accuracy(["no"], ["yes"]) == 0
    with pytest.raises(ValueError):
        closed_accuracy(["a"], [])
    with pytest.raises(ValueError):
        closed_accuracy([], [])


@pytest.mark.parametrize("pred,letter", [
    ("B. Purple", "B"),
    ("The answer is C", "C"),
    ("the red box", "D"),
    ("D", "D"),
    ("(a)", "A"),
    ("C: green", "C"),
    ("I think the answer is: b", "B"),
    ("no idea", None),
    ("", None),
])
def test_extract_choice(pred, letter):
    assert extract_choice(pred, COLORS) == letter


def test_extract_choice_color_needs_meta():
    assert extract_choice("the red box") is None


def test_token_recall_examples():
    assert token_recall("enhancing tumor in the brain", "brain enhancing tumor") == 1
    assert token_recall("brain edema", "brain enhancing tumor") == Fraction(1, 3)
    assert token_recall("Heart", "heart") == 1
    with pytest.raises(ValueError):
        token_recall("x", "the")


words = st.sampled_from(["brain", "heart", "lung", "liver", "tumor", "left", "right", "mass", "edema", "yes"])


@given(st.lists(words, min_size=1, max_size=8), st.lists(words, max_size=8))
def test_token_recall_matches_set_oracle(gold, pred):
    g, p = set(gold), set(pred)
    assert token_recall(" ".join(pred), " ".join(gold)) == Fraction(len(g & p), len(g))


@given(st.lists(words, min_size=1, max_size=6), st.lists(words, max_size=6))
def test_token_recall_superset_is_one(gold, extra):
    assert token_recall(" ".join(extra + gold + extra), " ".join(gold)) == 1


def test_parse_bbox():
    assert parse_bbox("[115, 163, 243, 268]") == (115, 163, 243, 268)
    assert parse_bbox("box: [1,2,3,4] maybe") == (1, 2, 3, 4)
    assert parse_bbox("no box here") is None
    assert parse_bbox("[1, 2, 3]") is None


def test_iou_examples():
    assert iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1
    assert iou((0, 0, 10, 10), (20, 20, 30, 30)) == 0
    assert iou((0, 0, 10, 10), (5, 5, 15, 15)) == Fraction(25, 175) == raster_iou((0, 0, 10, 10), (5, 5, 15, 15))
    with pytest.raises(ValueError):
        iou((0, 0, 0, 5), (0, 0, 1, 1))


box = st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(1, 12), st.integers(1, 12)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@settings(max_examples=200)
@given(box, box)
def test_iou_properties(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert iou(a, a) == 1
    assert 0 <= v <= 1
    assert abs(float(v) - float(raster_iou(a, b))) <= 1e-12


def test_localization_accuracy():
    assert localization_accuracy(["[0, 0, 10, 10]"], ["[0, 0, 10, 10]"]) == 1
    assert localization_accuracy(["nothing"], ["[0, 0, 10, 10]"]) == 0
    assert localization_accuracy(["[0, 0, 10, 10]"], ["[5, 5, 15, 15]"], Fraction(1, 2)) == 0
    assert localization_accuracy(["[5, 5, 1, 1]"], ["[0, 0, 10, 10]"]) == 0
    with pytest.raises(ValueError):
        localization_accuracy(["a", "b"], ["a"])


def test_aggregate_example():
    items = [ScoredItem("c1", "closed", Fraction(1)), ScoredItem("c2", "closed", Fraction(0)),
             ScoredItem("o1", "open", Fraction(1)), ScoredItem("o2", "open", Fraction(1, 2))]
    rep = aggregate(items)
    assert rep.value("closed") == 0.5 and rep.value("open") == 0.75
    assert "multichoice" not in rep.per_type and rep.overall_counts["multichoice"] == 0
    assert rep.overall_counts["total"] == 4
    assert EvalReport.from_json(rep.to_json()).to_json() == rep.to_json()


def test_aggregate_order_independent():
    items = [ScoredItem(f"q{i}", "open", Fraction(i % 3, 3)) for i in range(30)]
    assert aggregate(items).to_json() == aggregate(reversed(items)).to_json()


def test_aggregate_rejects_out_of_range():
    with pytest.raises(ValueError):
        aggregate([ScoredItem("q", "open", Fraction(3, 2))])


def test_markdown_table_layout():
    rep = aggregate([ScoredItem("a", "closed", Fraction(1)), ScoredItem("b", "open", Fraction(1, 2))])
    md = markdown_table({"SLAKE": rep})
    assert md.splitlines()[0] == "| Dataset | Open | Closed | Multi | Loc |"
    assert "| SLAKE | 50.00 | 100.00 | - | - |" in md
