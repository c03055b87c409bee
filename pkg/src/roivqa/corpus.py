"""Data model, canonical JSONL manifest IO, splitting and merging.

Manifest lines are discriminated by ``kind``::

    {"kind": "image", "image_id": ..., "file": "img/x.png", "width": W, "height": H}
    {"kind": "region", "image_id": ..., "region_id": ..., "label": ..., "bbox": [x1, y1, x2, y2]}
    {"kind": "qa", "qa_id": ..., "image_id": ..., "qtype": ..., "question": ...,
     "answer": ..., "provenance": ..., "meta": {...}}

Boxes are integer pixel corners with x2/y2 exclusive. Image files are PNG,
resolved relative to the manifest's directory.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import re
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from PIL import Image

from roivqa.rng import SplitMix64

BBox = tuple[int, int, int, int]

QTYPES = ("closed", "open", "multichoice", "localization")
PROVENANCES = ("original", "reconstructed")
OPTION_LETTERS = ("A", "B", "C", "D")

_BBOX_RE = re.compile(r"^\[\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*\]$")

_IMAGE_FIELDS = {"kind", "image_id", "file", "width", "height"}
_REGION_FIELDS = {"kind", "image_id", "region_id", "label", "bbox"}
_QA_FIELDS = {"kind", "qa_id", "image_id", "qtype", "question", "answer", "provenance", "meta"}
_QA_OPTIONAL = {"composite_ref"}


class ManifestError(ValueError):
    """A manifest failed validation. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class SplitError(ValueError):
    pass


class MergeError(ValueError):
    pass


# --------------------------------------------------------------------------
# PNG helpers


def encode_png(pixels: bytes, width: int, height: int) -> bytes:
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def decode_png(data: bytes) -> tuple[bytes, int, int]:
    with Image.open(io.BytesIO(data)) as im:
        if im.format != "PNG":
            raise ValueError(f"not a PNG image ({im.format})")
        rgb = im.convert("RGB")
        return rgb.tobytes(), rgb.width, rgb.height


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# --------------------------------------------------------------------------
# Records


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    width: int
    height: int
    pixels: bytes = field(repr=False)
    source_path: str = ""
    extra: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image {self.image_id}: dimensions must be positive")
        if len(self.pixels) != self.width * self.height * 3:
            raise ValueError(
                f"image {self.image_id}: buffer has {len(self.pixels)} bytes, "
                f"expected {self.width * self.height * 3}"
            )

    def array(self) -> np.ndarray:
        """Read-only (height, width, 3) uint8 view of the pixels."""
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(self.height, self.width, 3)

    @classmethod
    def from_array(cls, image_id: str, arr: np.ndarray, source_path: str = "") -> "ImageRecord":
        arr = np.ascontiguousarray(arr, dtype=np.uint8)
        h, w, _ = arr.shape
        return cls(image_id, w, h, arr.tobytes(), source_path)

    def png_bytes(self) -> bytes:
        return encode_png(self.pixels, self.width, self.height)


@dataclass(frozen=True)
class RegionAnnotation:
    region_id: str
    label: str
    bbox: BBox
    image_id: str = ""
    extra: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if not self.label.strip():
            raise ValueError(f"region {self.region_id}: empty label")
        object.__setattr__(self, "bbox", check_bbox(self.bbox))


@dataclass(frozen=True)
class QAPair:
    qa_id: str
    image_id: str
    question: str
    answer: str
    qtype: str
    composite_ref: str | None = None
    provenance: str = "original"
    meta: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.qtype not in QTYPES:
            raise ValueError(f"qa {self.qa_id}: unknown qtype {self.qtype!r}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"qa {self.qa_id}: unknown provenance {self.provenance!r}")
        if self.qtype == "multichoice":
            _check_multichoice_meta(self)
        elif self.qtype == "localization" and parse_bbox_strict(self.answer) is None:
            raise ValueError(f"qa {self.qa_id}: localization answer is not a bbox")


def _check_multichoice_meta(qa: QAPair) -> None:
    correct = qa.meta.get("correct")
    colors = qa.meta.get("option_colors")
    if correct not in OPTION_LETTERS:
        raise ValueError(f"qa {qa.qa_id}: multichoice meta needs 'correct' in A-D")
    if not isinstance(colors, dict) or sorted(colors) != list(OPTION_LETTERS):
        raise ValueError(f"qa {qa.qa_id}: multichoice meta needs a color for each of A-D")
    if not all(isinstance(c, str) and c for c in colors.values()):
        raise ValueError(f"qa {qa.qa_id}: option colors must be nonempty strings")


@dataclass(frozen=True)
class Dataset:
    name: str
    images: tuple[ImageRecord, ...]
    regions: dict[str, tuple[RegionAnnotation, ...]]
    qa: tuple[QAPair, ...]
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        validate_dataset(self)

    def image(self, image_id: str) -> ImageRecord:
        return self._index()[image_id]

    def _index(self) -> dict[str, ImageRecord]:
        idx = self.__dict__.get("_image_index")
        if idx is None:
            idx = {im.image_id: im for im in self.images}
            object.__setattr__(self, "_image_index", idx)
        return idx

    def regions_for(self, image_id: str) -> tuple[RegionAnnotation, ...]:
        return self.regions.get(image_id, ())

    @property
    def image_ids(self) -> list[str]:
        return [im.image_id for im in self.images]


@dataclass(frozen=True)
class SplitSpec:
    seed: int
    train_fraction: Fraction = Fraction(4, 5)

    def __post_init__(self):
        frac = Fraction(self.train_fraction)
        if not 0 < frac < 1:
            raise ValueError("train_fraction must lie strictly between 0 and 1")
        object.__setattr__(self, "train_fraction", frac)


# --------------------------------------------------------------------------
# Validation


def check_bbox(bbox: Sequence[int], width: int | None = None, height: int | None = None) -> BBox:
    if len(bbox) != 4 or not all(isinstance(v, int) and not isinstance(v, bool) for v in bbox):
        raise ValueError(f"bbox must be 4 integers, got {list(bbox)!r}")
    x1, y1, x2, y2 = bbox
    if x2 <= x1 or y2 <= y1:
        raise ValueError(f"degenerate bbox {list(bbox)}")
    if width is not None and height is not None:
        if x1 < 0 or y1 < 0 or x2 > width or y2 > height:
            raise ValueError(f"bbox out of bounds {list(bbox)} for {width}x{height} image")
    return (x1, y1, x2, y2)


def parse_bbox_strict(s: str) -> BBox | None:
    """Parse a string that is exactly ``[x1, y1, x2, y2]``."""
    m = _BBOX_RE.match(s.strip())
    if not m:
        return None
    return tuple(int(g) for g in m.groups())  # type: ignore[return-value]


def format_bbox(bbox: Sequence[int]) -> str:
    return "[" + ", ".join(str(int(v)) for v in bbox) + "]"


def validate_dataset(d: Dataset) -> None:
    index: dict[str, ImageRecord] = {}
    for im in d.images:
        if im.image_id in index:
            raise ValueError(f"duplicate image_id {im.image_id!r}")
        index[im.image_id] = im
    for image_id, regions in d.regions.items():
        if image_id not in index:
            raise ValueError(f"regions reference unknown image {image_id!r}")
        im = index[image_id]
        seen = set()
        for r in regions:
            if r.region_id in seen:
                raise ValueError(f"duplicate region_id {r.region_id!r} on image {image_id!r}")
            seen.add(r.region_id)
            try:
                check_bbox(r.bbox, im.width, im.height)
            except ValueError as e:
                raise ValueError(f"region {r.region_id!r} on image {image_id!r}: {e}") from None
    qa_ids = set()
    for q in d.qa:
        if q.qa_id in qa_ids:
            raise ValueError(f"duplicate qa_id {q.qa_id!r}")
        qa_ids.add(q.qa_id)
        if q.image_id not in index:
            raise ValueError(f"qa {q.qa_id!r} references unknown image {q.image_id!r}")


# --------------------------------------------------------------------------
# Manifest IO


def _require(obj: dict, key: str, typ, lineno: int):
    if key not in obj:
        raise ManifestError("missing required field", lineno, key)
    v = obj[key]
    if typ is int:
        ok = isinstance(v, int) and not isinstance(v, bool)
    else:
        ok = isinstance(v, typ)
    if not ok:
        raise ManifestError(f"expected {getattr(typ, '__name__', typ)}, got {type(v).__name__}", lineno, key)
    return v


def _split_unknown(obj: dict, known: set[str], lineno: int, strict: bool) -> dict:
    unknown = {k: obj[k] for k in obj if k not in known}
    if unknown and strict:
        raise ManifestError(f"unknown field(s) {sorted(unknown)}", lineno, sorted(unknown)[0])
    return unknown


def load_dataset(path: str | Path, *, strict: bool = True, name: str | None = None,
                 errors: list[ManifestError] | None = None) -> Dataset:
    """Load and fully validate a manifest, decoding every referenced PNG.

    With ``strict=False`` unknown fields are kept (and written back by
    :func:`save_dataset`) instead of rejected. Passing an ``errors`` list
    makes validation continue past bad lines; every problem is appended and
    the first one is raised at the end.
    """
    path = Path(path)
    root = path.parent
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not any(line.strip() for line in lines):
        raise ManifestError("empty manifest")

    images: list[ImageRecord] = []
    image_lines: dict[str, int] = {}
    regions: dict[str, list[RegionAnnotation]] = {}
    region_lines: list[tuple[int, RegionAnnotation]] = []
    qa: list[QAPair] = []
    qa_lines: dict[str, int] = {}

    for lineno, line in enumerate(lines, start=1):
        try:
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"invalid JSON ({e.msg})", lineno) from None
            if not isinstance(obj, dict):
                raise ManifestError("line is not a JSON object", lineno)
            kind = obj.get("kind")
            if kind == "image":
                image_id = _require(obj, "image_id", str, lineno)
                file = _require(obj, "file", str, lineno)
                width = _require(obj, "width", int, lineno)
                height = _require(obj, "height", int, lineno)
                extra = _split_unknown(obj, _IMAGE_FIELDS, lineno, strict)
                if image_id in image_lines:
                    raise ManifestError(f"duplicate image_id {image_id!r}", lineno, "image_id")
                if width < 1 or height < 1:
                    raise ManifestError("dimensions must be positive", lineno, "width" if width < 1 else "height")
                img_path = root / file
                try:
                    data = img_path.read_bytes()
                except OSError:
                    raise ManifestError(f"image file not found: {file}", lineno, "file") from None
                try:
                    pixels, w, h = decode_png(data)
                except Exception as e:
                    raise ManifestError(f"cannot decode image {file}: {e}", lineno, "file") from None
                if (w, h) != (width, height):
                    raise ManifestError(
                        f"image {image_id!r} is {w}x{h} but manifest says {width}x{height}", lineno, "width"
                    )
                images.append(ImageRecord(image_id, width, height, pixels, file, extra))
                image_lines[image_id] = lineno
            elif kind == "region":
                image_id = _require(obj, "image_id", str, lineno)
                region_id = _require(obj, "region_id", str, lineno)
                label = _require(obj, "label", str, lineno)
                bbox = _require(obj, "bbox", list, lineno)
                extra = _split_unknown(obj, _REGION_FIELDS, lineno, strict)
                if not label.strip():
                    raise ManifestError(f"region {region_id!r}: empty label", lineno, "label")
                try:
                    box = check_bbox(bbox)
                except ValueError as e:
                    raise ManifestError(f"region {region_id!r}: {e}", lineno, "bbox") from None
                r = RegionAnnotation(region_id, label, box, image_id, extra)
                if any(x.region_id == region_id for x in regions.get(image_id, ())):
                    raise ManifestError(f"duplicate region_id {region_id!r} on image {image_id!r}", lineno, "region_id")
                regions.setdefault(image_id, []).append(r)
                region_lines.append((lineno, r))
            elif kind == "qa":
                qa_id = _require(obj, "qa_id", str, lineno)
                image_id = _require(obj, "image_id", str, lineno)
                qtype = _require(obj, "qtype", str, lineno)
                question = _require(obj, "question", str, lineno)
                answer = _require(obj, "answer", str, lineno)
                provenance = _require(obj, "provenance", str, lineno)
                meta = _require(obj, "meta", dict, lineno)
                composite_ref = obj.get("composite_ref")
                if composite_ref is not None and not isinstance(composite_ref, str):
                    raise ManifestError("expected str", lineno, "composite_ref")
                extra = _split_unknown(obj, _QA_FIELDS | _QA_OPTIONAL, lineno, strict)
                if qa_id in qa_lines:
                    raise ManifestError(f"duplicate qa_id {qa_id!r}", lineno, "qa_id")
                if qtype not in QTYPES:
                    raise ManifestError(f"qa {qa_id!r}: unknown qtype {qtype!r}", lineno, "qtype")
                if provenance not in PROVENANCES:
                    raise ManifestError(f"qa {qa_id!r}: unknown provenance {provenance!r}", lineno, "provenance")
                try:
                    q = QAPair(qa_id, image_id, question, answer, qtype, composite_ref, provenance, meta, extra)
                except ValueError as e:
                    raise ManifestError(str(e), lineno, "meta" if qtype == "multichoice" else "answer") from None
                qa.append(q)
                qa_lines[qa_id] = lineno
            else:
                raise ManifestError(f"unknown kind {kind!r}", lineno, "kind")
        except ManifestError as e:
            if errors is None:
                raise
            errors.append(e)

    dims = {im.image_id: (im.width, im.height) for im in images}
    post: list[ManifestError] = []
    for lineno, r in region_lines:
        if r.image_id not in dims:
            post.append(ManifestError(f"region {r.region_id!r} references unknown image {r.image_id!r}",
                                      lineno, "image_id"))
            continue
        w, h = dims[r.image_id]
        try:
            check_bbox(r.bbox, w, h)
        except ValueError as e:
            post.append(ManifestError(f"region {r.region_id!r}: {e}", lineno, "bbox"))
    for q in qa:
        if q.image_id not in dims:
            post.append(ManifestError(f"qa {q.qa_id!r} references unknown image {q.image_id!r}",
                                      qa_lines[q.qa_id], "image_id"))
    if post and errors is None:
        raise post[0]
    if errors is not None:
        errors.extend(post)
        errors.sort(key=lambda e: e.line or 0)
        if errors:
            raise errors[0]

    return Dataset(
        name=name or path.stem,
        images=tuple(images),
        regions={k: tuple(v) for k, v in regions.items()},
        qa=tuple(qa),
        root=root,
    )


def dumps_line(obj: dict) -> str:
    """Canonical single-line JSON: sorted keys, UTF-8, no trailing spaces."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(", ", ": "))


def image_line(im: ImageRecord) -> dict:
    return {**im.extra, "kind": "image", "image_id": im.image_id, "file": im.source_path,
            "width": im.width, "height": im.height}


def region_line(r: RegionAnnotation) -> dict:
    return {**r.extra, "kind": "region", "image_id": r.image_id, "region_id": r.region_id,
            "label": r.label, "bbox": list(r.bbox)}


def qa_line(q: QAPair) -> dict:
    obj = {**q.extra, "kind": "qa", "qa_id": q.qa_id, "image_id": q.image_id, "qtype": q.qtype,
           "question": q.question, "answer": q.answer, "provenance": q.provenance, "meta": q.meta}
    if q.composite_ref is not None:
        obj["composite_ref"] = q.composite_ref
    return obj


def manifest_lines(d: Dataset) -> list[str]:
    """Canonical order: images, then each image's regions, then QA pairs."""
    out = [dumps_line(image_line(im)) for im in d.images]
    for im in d.images:
        out.extend(dumps_line(region_line(r)) for r in d.regions_for(im.image_id))
    out.extend(dumps_line(qa_line(q)) for q in d.qa)
    return out


def manifest_text(d: Dataset) -> str:
    return "".join(line + "\n" for line in manifest_lines(d))


def image_file_for(im: ImageRecord) -> str:
    return im.source_path or f"images/{im.image_id}.png"


def resolve_file(d: Dataset, rel: str) -> Path | None:
    """Locate a manifest-relative file on disk, following merge namespaces."""
    if d.root is not None:
        return d.root / rel
    sources = d.__dict__.get("_sources") or {}
    for name, root in sources.items():
        if root is not None and rel.startswith(name + "/"):
            return root / rel[len(name) + 1:]
    return None


def save_dataset(d: Dataset, path: str | Path) -> Path:
    """Write the manifest plus any image/composite files it references.

    Files that already exist at the destination are left untouched, so
    saving next to the inputs never rewrites them.
    """
    path = Path(path)
    root = path.parent
    root.mkdir(parents=True, exist_ok=True)
    images = []
    for im in d.images:
        rel = image_file_for(im)
        if rel != im.source_path:
            im = replace(im, source_path=rel)
        target = root / rel
        if not target.exists():
            target.parent.mkdir(parents=True, exist_ok=True)
            src = resolve_file(d, rel)
            if src is not None and src.is_file():
                target.write_bytes(src.read_bytes())
            else:
                target.write_bytes(im.png_bytes())
        images.append(im)
    for q in d.qa:
        rel = q.meta.get("composite_file")
        if not rel:
            continue
        target = root / rel
        src = resolve_file(d, rel)
        if not target.exists() and src is not None and src.is_file():
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(src.read_bytes())
    d = replace(d, images=tuple(images))
    path.write_text(manifest_text(d), encoding="utf-8")
    return path


# --------------------------------------------------------------------------
# Split / merge


def split_dataset(d: Dataset, s: SplitSpec) -> tuple[Dataset, Dataset]:
    """Partition by image: seeded Fisher-Yates over sorted image ids.

    The first ``ceil(train_fraction * N)`` shuffled images go to train
    (capped at N - 1 so the test side is never empty).
    """
    ids = sorted(d.image_ids)
    n = len(ids)
    if n < 2:
        raise SplitError(f"cannot split a dataset with {n} image(s); need at least 2")
    SplitMix64(s.seed).shuffle(ids)
    n_train = min(math.ceil(s.train_fraction * n), n - 1)
    train_ids = set(ids[:n_train])
    return _subset(d, train_ids), _subset(d, set(ids[n_train:]))


def _subset(d: Dataset, keep: set[str]) -> Dataset:
    return Dataset(
        name=d.name,
        images=tuple(im for im in d.images if im.image_id in keep),
        regions={k: v for k, v in d.regions.items() if k in keep},
        qa=tuple(q for q in d.qa if q.image_id in keep),
        root=d.root,
    )


def merge_datasets(ds: Iterable[Dataset]) -> Dataset:
    """Union with every id namespaced as ``<dataset name>/<id>``.

    Image files move under ``<name>/`` too; merged datasets carry no single
    root, so save them with the originals' files already copied or let
    :func:`save_dataset` re-encode from pixels.
    """
    ds = list(ds)
    if not ds:
        raise MergeError("nothing to merge")
    images: list[ImageRecord] = []
    regions: dict[str, tuple[RegionAnnotation, ...]] = {}
    qa: list[QAPair] = []
    seen_images: set[str] = set()
    seen_qa: set[str] = set()
    for d in ds:
        p = d.name + "/"
        for im in d.images:
            new_id = p + im.image_id
            if new_id in seen_images:
                raise MergeError(f"image id collision after namespacing: {new_id!r}")
            seen_images.add(new_id)
            images.append(replace(im, image_id=new_id, source_path=p + image_file_for(im)))
        for image_id, rs in d.regions.items():
            regions[p + image_id] = tuple(replace(r, image_id=p + image_id) for r in rs)
        for q in d.qa:
            new_id = p + q.qa_id
            if new_id in seen_qa:
                raise MergeError(f"qa id collision after namespacing: {new_id!r}")
            seen_qa.add(new_id)
            meta = dict(q.meta)
            if meta.get("composite_file"):
                meta["composite_file"] = p + meta["composite_file"]
            qa.append(replace(
                q, qa_id=new_id, image_id=p + q.image_id, meta=meta,
                composite_ref=None if q.composite_ref is None else p + q.composite_ref,
            ))
    merged = Dataset(name="+".join(d.name for d in ds), images=tuple(images), regions=regions, qa=tuple(qa))
    object.__setattr__(merged, "_sources", {d.name: d.root for d in ds})
    return merged
