"""Answer normalization and scoring.

Closed and multi-choice items are scored by accuracy, open items by token
recall (the fraction of ground-truth tokens present in the prediction),
localization items by IoU against a threshold. Scores are ``Fraction`` so
accuracies stay exact multiples of 1/n.
"""

from __future__ import annotations

import json
import re
import unicodedata
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from roivqa.corpus import OPTION_LETTERS, QTYPES, BBox

ARTICLES = frozenset({"a", "an", "the"})
COLOR_WORDS = ("yellow", "purple", "green", "red")

METRIC_NAMES = {
    "closed": "accuracy",
    "multichoice": "accuracy",
    "open": "recall",
    "localization": "iou_accuracy",
}

_BBOX_SEARCH = re.compile(r"\[\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*\]")
_STANDALONE = re.compile(r"^\W*\(?([A-Da-d])\)?\W*$")
_PREFIX = re.compile(r"^\s*\(?([A-D])\)?\s*[.:)]")
_ANSWER_IS = re.compile(r"answer\s+is\s*:?\s*\(?([A-Da-d])\b", re.IGNORECASE)


@dataclass(frozen=True)
class NormalizedAnswer:
    tokens: tuple[str, ...]
    raw: str


def _is_kept(ch: str) -> bool:
    return ch.isalnum() or ch.isspace()


def normalize(s: str, strip_articles: bool = True) -> NormalizedAnswer:
    """Lowercase, drop non-alphanumeric characters, split, strip leading articles."""
    cleaned = "".join(ch if _is_kept(ch) else "" for ch in unicodedata.normalize("NFKC", s).lower())
    tokens = cleaned.split()
    if strip_articles:
        i = 0
        while i < len(tokens) and tokens[i] in ARTICLES:
            i += 1
        tokens = tokens[i:]
    return NormalizedAnswer(tuple(tokens), s)


def _check_lengths(preds: Sequence, golds: Sequence) -> None:
    if len(preds) != len(golds):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(golds)} golds")


def closed_correct(pred: str, gold: str) -> bool:
    return normalize(pred).tokens == normalize(gold).tokens


def closed_accuracy(preds: Sequence[str], golds: Sequence[str]) -> Fraction:
    _check_lengths(preds, golds)
    if not golds:
        raise ValueError("accuracy over zero items is undefined")
    return Fraction(sum(closed_correct(p, g) for p, g in zip(preds, golds)), len(golds))


def extract_choice(pred: str, option_colors: Mapping[str, str] | None = None) -> str | None:
    """Pull an option letter out of a free-form answer.

    Rules, first hit wins: a bare letter, a ``B.``/``B:`` prefix,
    ``answer is X``, then a color word mapped back through the item's
    option colors.
    """
    for rx in (_STANDALONE, _PREFIX, _ANSWER_IS):
        m = rx.search(pred)
        if m:
            return m.group(1).upper()
    if option_colors:
        by_color = {c.lower(): letter for letter, c in option_colors.items() if letter in OPTION_LETTERS}
        for tok in normalize(pred, strip_articles=False).tokens:
            if tok in by_color:
                return by_color[tok]
    return None


def token_recall(pred: str, gold: str) -> Fraction:
    gold_tokens = set(normalize(gold).tokens)
    if not gold_tokens:
        raise ValueError(f"gold answer {gold!r} has no tokens after normalization")
    return Fraction(len(gold_tokens & set(normalize(pred).tokens)), len(gold_tokens))


def parse_bbox(s: str) -> BBox | None:
    m = _BBOX_SEARCH.search(s)
    if not m:
        return None
    return tuple(int(g) for g in m.groups())  # type: ignore[return-value]


def _area(b: Sequence[int]) -> int:
    x1, y1, x2, y2 = b
    if x2 <= x1 or y2 <= y1:
        raise ValueError(f"degenerate bbox {list(b)}")
    return (x2 - x1) * (y2 - y1)


def iou(a: Sequence[int], b: Sequence[int]) -> Fraction:
    area_a, area_b = _area(a), _area(b)
    iw = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    return Fraction(inter, area_a + area_b - inter)


def localization_correct(pred: str, gold: str, threshold: Fraction = Fraction(1, 2)) -> bool:
    p, g = parse_bbox(pred), parse_bbox(gold)
    if p is None or g is None:
        return False
    try:
        return iou(p, g) >= threshold
    except ValueError:
        return False


def localization_accuracy(preds: Sequence[str], golds: Sequence[str],
                          threshold: Fraction = Fraction(1, 2)) -> Fraction:
    _check_lengths(preds, golds)
    if not golds:
        raise ValueError("accuracy over zero items is undefined")
    return Fraction(sum(localization_correct(p, g, threshold) for p, g in zip(preds, golds)), len(golds))


# --------------------------------------------------------------------------
# Aggregation


@dataclass(frozen=True)
class ScoredItem:
    qa_id: str
    qtype: str
    score: Fraction


@dataclass
class EvalReport:
    per_type: dict[str, dict]
    overall_counts: dict[str, int]
    run_meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"per_type": self.per_type, "overall_counts": self.overall_counts, "run_meta": self.run_meta}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        obj = json.loads(text)
        return cls(obj["per_type"], obj["overall_counts"], obj.get("run_meta", {}))

    def value(self, qtype: str) -> float | None:
        entry = self.per_type.get(qtype)
        return None if entry is None else entry["value"]


def aggregate(items: Iterable[ScoredItem], run_meta: Mapping | None = None) -> EvalReport:
    """Per-type means. Order of ``items`` does not matter."""
    sums: dict[str, Fraction] = {}
    counts = {t: 0 for t in QTYPES}
    for it in items:
        if it.qtype not in counts:
            raise ValueError(f"unknown qtype {it.qtype!r}")
        if not 0 <= it.score <= 1:
            raise ValueError(f"score {it.score} for {it.qa_id} outside [0, 1]")
        counts[it.qtype] += 1
        sums[it.qtype] = sums.get(it.qtype, Fraction(0)) + Fraction(it.score)
    per_type = {}
    for t in QTYPES:
        n = counts[t]
        if n == 0:
            continue
        mean = sums[t] / n
        per_type[t] = {"n": n, "metric_name": METRIC_NAMES[t], "value": float(mean),
                       "exact": f"{mean.numerator}/{mean.denominator}"}
    overall = {**counts, "total": sum(counts.values())}
    return EvalReport(per_type, overall, dict(run_meta or {}))


def markdown_table(reports: Mapping[str, EvalReport]) -> str:
    """Percentages in an Open / Closed / Multi (+ Loc) layout, one row per dataset."""
    cols = [("open", "Open"), ("closed", "Closed"), ("multichoice", "Multi"), ("localization", "Loc")]
    lines = ["| Dataset | " + " | ".join(c[1] for c in cols) + " |",
             "|---|" + "---:|" * len(cols)]
    for name, rep in reports.items():
        cells = []
        for key, _ in cols:
            v = rep.value(key)
            cells.append("-" if v is None else f"{100 * v:.2f}")
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
