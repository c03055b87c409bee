"""Reconstruct a dataset with four region-of-interest QA types.

* ``localization``: label in, bbox coordinates out.
* ``selection``: four colored boxes drawn, pick the one matching a label.
* ``desc_coords``: bbox coordinates in the prompt, label out.
* ``desc_highlight``: bbox drawn into the image only, label out.

Every random decision is keyed by ``hash64(seed, <item key>)`` so output is
independent of processing order and worker count.
"""

from __future__ import annotations

import json
import logging
import os
import re
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Sequence

from roivqa.compositor import (
    PALETTE,
    AlphaPolicy,
    CompositedImage,
    composite_item,
    outline_box,
    write_composite,
    write_sidecar,
)
from roivqa.corpus import (
    OPTION_LETTERS,
    BBox,
    Dataset,
    ImageRecord,
    QAPair,
    RegionAnnotation,
    check_bbox,
    format_bbox,
    save_dataset,
)
from roivqa.metrics import iou
from roivqa.rng import SplitMix64, hash64

log = logging.getLogger(__name__)

ROI_TYPES = ("localization", "selection", "desc_coords", "desc_highlight")
QTYPE_OF = {
    "localization": "localization",
    "selection": "multichoice",
    "desc_coords": "open",
    "desc_highlight": "open",
}
DEFAULT_THICKNESS = 3
MAX_JITTER_ATTEMPTS = 64


@dataclass(frozen=True)
class QATemplate:
    qtype: str
    question_pattern: str
    answer_pattern: str
    placeholders: frozenset = frozenset({"label", "bbox", "c1", "c2", "c3", "c4", "letter"})

    def __post_init__(self):
        for pattern in (self.question_pattern, self.answer_pattern):
            used = {name for _, name, _, _ in string.Formatter().parse(pattern) if name is not None}
            if not used <= self.placeholders:
                raise ValueError(f"undeclared placeholder(s) {sorted(used - self.placeholders)} in {pattern!r}")

    def question(self, **kw) -> str:
        return self.question_pattern.format(**kw)

    def answer(self, **kw) -> str:
        return self.answer_pattern.format(**kw)

    def question_regex(self) -> re.Pattern:
        """Regex matching any question produced by this template."""
        out = []
        for literal, name, _, _ in string.Formatter().parse(self.question_pattern):
            out.append(re.escape(literal))
            if name is not None:
                out.append(r"\[\d+, \d+, \d+, \d+\]" if name == "bbox" else r".+?")
        return re.compile("^" + "".join(out) + "$")


TEMPLATES = {
    "localization": QATemplate(
        "localization",
        "Please provide the bounding box coordinate of the region this sentence describes: {label}",
        "{bbox}",
    ),
    "selection": QATemplate(
        "multichoice",
        "Select the bounding box (bbox) describes {label}. A. {c1} B. {c2} C. {c3} D. {c4}",
        "{letter}",
    ),
    "desc_coords": QATemplate(
        "open",
        "Please provide a short description for this region: {bbox}",
        "{label}",
    ),
    "desc_highlight": QATemplate(
        "open",
        "Please provide a short description inside the bounding box",
        "{label}",
    ),
}


@dataclass(frozen=True)
class GenerationConfig:
    enabled_types: tuple[str, ...] = ROI_TYPES
    per_type_quota: dict = field(default_factory=dict)
    seed: int = 0
    alpha_policy: AlphaPolicy = AlphaPolicy.dynamic()
    distractor_min_count: int = 3
    distractor_max_iou: Fraction = Fraction(3, 10)
    bbox_in_prompt: bool = True
    thickness: int = DEFAULT_THICKNESS

    def __post_init__(self):
        unknown = set(self.enabled_types) - set(ROI_TYPES)
        if unknown:
            raise ValueError(f"unknown RoI type(s) {sorted(unknown)}")
        object.__setattr__(self, "enabled_types", tuple(t for t in ROI_TYPES if t in self.enabled_types))
        frac = Fraction(self.distractor_max_iou)
        if not 0 < frac < 1:
            raise ValueError("distractor_max_iou must lie in (0, 1)")
        object.__setattr__(self, "distractor_max_iou", frac)
        if self.distractor_min_count != len(OPTION_LETTERS) - 1:
            raise ValueError("selection items need exactly 4 options (3 distractors)")
        for t, q in self.per_type_quota.items():
            if t not in ROI_TYPES or not isinstance(q, int) or q < 0:
                raise ValueError(f"bad quota {t}={q!r}")

    def quota(self, roi_type: str) -> int:
        return self.per_type_quota.get(roi_type, 0)

    def to_json(self) -> dict:
        return {
            "enabled_types": list(self.enabled_types),
            "per_type_quota": {t: self.quota(t) for t in self.enabled_types},
            "seed": self.seed,
            "alpha": self.alpha_policy.describe(),
            "distractor_min_count": self.distractor_min_count,
            "distractor_max_iou": str(self.distractor_max_iou),
            "bbox_in_prompt": self.bbox_in_prompt,
            "thickness": self.thickness,
        }


class SelectionError(RuntimeError):
    """Not enough valid distractor boxes could be placed."""


def qa_id_for(image_id: str, roi_type: str, region_id: str) -> str:
    return f"{image_id}:{roi_type}:{region_id}"


def _item_rng(seed: int, key: str) -> SplitMix64:
    return SplitMix64(hash64(seed, key))


def gen_localization(img: ImageRecord, region: RegionAnnotation) -> QAPair:
    check_bbox(region.bbox, img.width, img.height)
    t = TEMPLATES["localization"]
    return QAPair(
        qa_id=qa_id_for(img.image_id, "localization", region.region_id),
        image_id=img.image_id,
        question=t.question(label=region.label),
        answer=t.answer(bbox=format_bbox(region.bbox)),
        qtype="localization",
        provenance="reconstructed",
        meta={"roi_type": "localization", "region_id": region.region_id},
    )


def _jitter_box(rng: SplitMix64, box: BBox, width: int, height: int) -> BBox:
    """Translate by 0.5-1.5 box sizes on each axis (random sign), then shift back inside."""
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    dx = round(rng.uniform(0.5, 1.5) * w) * (1 if rng.randbelow(2) else -1)
    dy = round(rng.uniform(0.5, 1.5) * h) * (1 if rng.randbelow(2) else -1)
    nx1 = min(max(x1 + dx, 0), width - w)
    ny1 = min(max(y1 + dy, 0), height - h)
    return (nx1, ny1, nx1 + w, ny1 + h)


def pick_distractors(img: ImageRecord, correct: RegionAnnotation, all_regions: Sequence[RegionAnnotation],
                     cfg: GenerationConfig, rng: SplitMix64) -> list[tuple[BBox, str | None]]:
    """Three distractor boxes, each with IoU(correct) below the cap.

    Real regions are preferred; synthetic jittered copies of the correct box
    fill any shortfall. Returns (bbox, region_id or None) pairs.
    """
    need = cfg.distractor_min_count
    cap = cfg.distractor_max_iou
    chosen: list[tuple[BBox, str | None]] = []
    real = sorted(
        (r for r in all_regions
         if r.region_id != correct.region_id and r.bbox != correct.bbox and iou(r.bbox, correct.bbox) < cap),
        key=lambda r: r.region_id,
    )
    seen_boxes = {correct.bbox}
    rng.shuffle(real)
    for r in real:
        if len(chosen) == need:
            break
        if r.bbox in seen_boxes:
            continue
        seen_boxes.add(r.bbox)
        chosen.append((r.bbox, r.region_id))
    attempts = 0
    while len(chosen) < need:
        if attempts >= MAX_JITTER_ATTEMPTS:
            raise SelectionError(
                f"could not place {need - len(chosen)} distractor(s) for region {correct.region_id!r} "
                f"on image {img.image_id!r} after {MAX_JITTER_ATTEMPTS} attempts"
            )
        attempts += 1
        box = _jitter_box(rng, correct.bbox, img.width, img.height)
        if box in seen_boxes or iou(box, correct.bbox) >= cap:
            continue
        seen_boxes.add(box)
        chosen.append((box, None))
    return chosen


def gen_selection(img: ImageRecord, correct: RegionAnnotation, all_regions: Sequence[RegionAnnotation],
                  cfg: GenerationConfig) -> tuple[QAPair, CompositedImage]:
    qa_id = qa_id_for(img.image_id, "selection", correct.region_id)
    rng = _item_rng(cfg.seed, qa_id)
    distractors = pick_distractors(img, correct, all_regions, cfg, rng)
    colors = list(PALETTE)
    rng.shuffle(colors)
    # slot 0 holds the correct box before shuffling letters
    entries = [(correct.bbox, correct.region_id, True)] + [(b, rid, False) for b, rid in distractors]
    rng.shuffle(entries)
    letters = OPTION_LETTERS
    option_colors = {letter: c.name for letter, c in zip(letters, colors)}
    option_boxes = {letter: list(e[0]) for letter, e in zip(letters, entries)}
    option_regions = {letter: e[1] for letter, e in zip(letters, entries)}
    answer_letter = next(letter for letter, e in zip(letters, entries) if e[2])

    boxes = [outline_box(e[0], c, cfg.thickness) for e, c in zip(entries, colors)]
    composite = composite_item(img, boxes, cfg.alpha_policy, cfg.seed, qa_id)
    t = TEMPLATES["selection"]
    qa = QAPair(
        qa_id=qa_id,
        image_id=img.image_id,
        question=t.question(label=correct.label, c1=colors[0].name, c2=colors[1].name,
                            c3=colors[2].name, c4=colors[3].name),
        answer=t.answer(letter=answer_letter),
        qtype="multichoice",
        composite_ref=composite.composite_id,
        provenance="reconstructed",
        meta={
            "roi_type": "selection",
            "region_id": correct.region_id,
            "correct": answer_letter,
            "option_colors": option_colors,
            "option_boxes": option_boxes,
            "option_regions": option_regions,
            "alpha_used": composite.alpha_used,
        },
    )
    return qa, composite


def gen_desc_coords(img: ImageRecord, region: RegionAnnotation,
                    cfg: GenerationConfig) -> tuple[QAPair, CompositedImage | None]:
    """Coordinates in the text; the region is also drawn unless alpha is fixed at 0."""
    check_bbox(region.bbox, img.width, img.height)
    qa_id = qa_id_for(img.image_id, "desc_coords", region.region_id)
    composite = None
    if not cfg.alpha_policy.is_zero:
        composite = composite_item(img, [outline_box(region.bbox, PALETTE[3], cfg.thickness)],
                                   cfg.alpha_policy, cfg.seed, qa_id)
    t = TEMPLATES["desc_coords"]
    meta = {"roi_type": "desc_coords", "region_id": region.region_id, "bbox": list(region.bbox),
            "alpha_used": composite.alpha_used if composite else 0}
    qa = QAPair(qa_id, img.image_id, t.question(bbox=format_bbox(region.bbox)), t.answer(label=region.label),
                "open", composite.composite_id if composite else None, "reconstructed", meta)
    return qa, composite


def gen_desc_highlight(img: ImageRecord, region: RegionAnnotation,
                       cfg: GenerationConfig) -> tuple[QAPair, CompositedImage]:
    qa_id = qa_id_for(img.image_id, "desc_highlight", region.region_id)
    composite = composite_item(img, [outline_box(region.bbox, PALETTE[3], cfg.thickness)],
                               cfg.alpha_policy, cfg.seed, qa_id)
    t = TEMPLATES["desc_highlight"]
    meta = {"roi_type": "desc_highlight", "region_id": region.region_id, "bbox": list(region.bbox),
            "alpha_used": composite.alpha_used}
    qa = QAPair(qa_id, img.image_id, t.question(), t.answer(label=region.label), "open",
                composite.composite_id, "reconstructed", meta)
    return qa, composite


def _pick_regions(regions: Sequence[RegionAnnotation], quota: int, seed: int, key: str) -> list[RegionAnnotation]:
    ordered = sorted(regions, key=lambda r: r.region_id)
    if quota == 0 or quota >= len(ordered):
        return ordered
    _item_rng(seed, key).shuffle(ordered)
    return sorted(ordered[:quota], key=lambda r: r.region_id)


@dataclass
class ImageResult:
    qa: list[QAPair] = field(default_factory=list)
    composites: dict[str, CompositedImage] = field(default_factory=dict)
    skipped: list[dict] = field(default_factory=list)


def generate_for_image(img: ImageRecord, regions: Sequence[RegionAnnotation], cfg: GenerationConfig) -> ImageResult:
    res = ImageResult()
    for roi_type in cfg.enabled_types:
        if roi_type == "desc_coords" and not cfg.bbox_in_prompt:
            continue
        picked = _pick_regions(regions, cfg.quota(roi_type), cfg.seed, f"pick:{img.image_id}:{roi_type}")
        for region in picked:
            composite = None
            if roi_type == "localization":
                qa = gen_localization(img, region)
            elif roi_type == "selection":
                try:
                    qa, composite = gen_selection(img, region, regions, cfg)
                except SelectionError as e:
                    log.warning("skipping selection item: %s", e)
                    res.skipped.append({"image_id": img.image_id, "region_id": region.region_id,
                                        "type": roi_type, "reason": str(e)})
                    continue
            elif roi_type == "desc_coords":
                qa, composite = gen_desc_coords(img, region, cfg)
            else:
                qa, composite = gen_desc_highlight(img, region, cfg)
            # alpha 0 composites equal the base image, so none is stored
            if composite is not None and composite.alpha_used == 0:
                qa = replace(qa, composite_ref=None)
                composite = None
            if composite is not None:
                res.composites[qa.qa_id] = composite
            res.qa.append(qa)
    return res


@dataclass
class Reconstruction:
    dataset: Dataset
    composites: dict[str, CompositedImage]
    report: dict


def reconstruct_dataset(d: Dataset, cfg: GenerationConfig, workers: int | None = None) -> Reconstruction:
    """Originals (unchanged, original order) followed by generated QA sorted by qa_id."""
    workers = workers or os.cpu_count() or 1
    jobs = [(im, d.regions_for(im.image_id)) for im in d.images if d.regions_for(im.image_id)]
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda job: generate_for_image(job[0], job[1], cfg), jobs))
    else:
        results = [generate_for_image(im, rs, cfg) for im, rs in jobs]

    generated: list[QAPair] = []
    composites: dict[str, CompositedImage] = {}
    skipped: list[dict] = []
    for r in results:
        generated.extend(r.qa)
        composites.update(r.composites)
        skipped.extend(r.skipped)
    generated.sort(key=lambda q: q.qa_id)
    skipped.sort(key=lambda s: (s["image_id"], s["region_id"], s["type"]))

    counts = {t: 0 for t in cfg.enabled_types}
    for q in generated:
        counts[q.meta["roi_type"]] += 1
    out = replace(d, qa=d.qa + tuple(generated))
    report = {
        "per_type_counts": counts,
        "generated": len(generated),
        "original": len(d.qa),
        "composites": len(composites),
        "skipped": skipped,
        "seed": cfg.seed,
        "cfg": cfg.to_json(),
    }
    return Reconstruction(out, composites, report)


def write_reconstruction(rec: Reconstruction, out_dir: str | Path, manifest_name: str = "manifest.jsonl") -> Path:
    """Write composites, their sidecar, the manifest and the generation report."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sidecar = []
    files = {}
    for qa_id in sorted(rec.composites):
        rel, record = write_composite(rec.composites[qa_id], out_dir, qa_id)
        files[qa_id] = rel
        sidecar.append(record)
    write_sidecar(sidecar, out_dir / "composites.jsonl")
    qa = tuple(
        replace(q, meta={**q.meta, "composite_file": files[q.qa_id]}) if q.qa_id in files else q
        for q in rec.dataset.qa
    )
    manifest = save_dataset(replace(rec.dataset, qa=qa), out_dir / manifest_name)
    (out_dir / "generation_report.json").write_text(
        json.dumps(rec.report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return manifest
