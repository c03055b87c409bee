"""Box overlays and alpha blending into the base image.

Alpha is on the byte scale (0..255) and only covered pixels are blended::

    out = round_half_up((alpha * marker + (255 - alpha) * base) / 255)

Everything here is pure integer arithmetic so composites are bit-identical
across platforms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from roivqa.corpus import BBox, ImageRecord, check_bbox, encode_png, sha256_hex
from roivqa.rng import SplitMix64, hash64


@dataclass(frozen=True)
class Color:
    r: int
    g: int
    b: int
    name: str = "custom"

    def __post_init__(self):
        for c in (self.r, self.g, self.b):
            if not 0 <= c <= 255:
                raise ValueError(f"channel value {c} outside 0..255")

    @property
    def rgb(self) -> tuple[int, int, int]:
        return (self.r, self.g, self.b)


YELLOW = Color(255, 255, 0, "Yellow")
PURPLE = Color(128, 0, 128, "Purple")
GREEN = Color(0, 255, 0, "Green")
RED = Color(255, 0, 0, "Red")
PALETTE: tuple[Color, ...] = (YELLOW, PURPLE, GREEN, RED)
PALETTE_BY_NAME = {c.name: c for c in PALETTE}


def color_by_name(name: str) -> Color:
    try:
        return PALETTE_BY_NAME[name.capitalize()]
    except KeyError:
        raise ValueError(f"unknown palette color {name!r}") from None


@dataclass(frozen=True)
class OverlayBox:
    bbox: BBox
    color: Color
    style: str = "outline"
    thickness: int = 3

    def __post_init__(self):
        if self.style not in ("outline", "filled"):
            raise ValueError(f"unknown box style {self.style!r}")
        check_bbox(self.bbox)
        if self.style == "outline":
            x1, y1, x2, y2 = self.bbox
            if self.thickness < 1:
                raise ValueError("outline thickness must be >= 1")
            if 2 * self.thickness > min(x2 - x1, y2 - y1):
                raise ValueError(
                    f"thickness {self.thickness} exceeds half the smaller side of {list(self.bbox)}"
                )

    def to_json(self) -> dict:
        d = {"bbox": list(self.bbox), "color": self.color.name, "rgb": list(self.color.rgb), "style": self.style}
        if self.style == "outline":
            d["thickness"] = self.thickness
        return d


@dataclass(frozen=True)
class OverlaySpec:
    boxes: tuple[OverlayBox, ...] = ()

    def validate(self, width: int, height: int) -> None:
        for box in self.boxes:
            check_bbox(box.bbox, width, height)


@dataclass(frozen=True)
class AlphaPolicy:
    """Either a fixed byte-scale alpha or a uniform draw from [lo, hi]."""

    mode: str
    a: int = 0
    lo: int = 96
    hi: int = 255

    def __post_init__(self):
        if self.mode == "fixed":
            if not 0 <= self.a <= 255:
                raise ValueError(f"fixed alpha {self.a} outside 0..255")
        elif self.mode == "dynamic":
            if not 0 <= self.lo <= self.hi <= 255:
                raise ValueError(f"dynamic range [{self.lo}, {self.hi}] invalid")
        else:
            raise ValueError(f"unknown alpha mode {self.mode!r}")

    @classmethod
    def fixed(cls, a: int) -> "AlphaPolicy":
        return cls("fixed", a=a)

    @classmethod
    def dynamic(cls, lo: int = 96, hi: int = 255) -> "AlphaPolicy":
        return cls("dynamic", lo=lo, hi=hi)

    @classmethod
    def parse(cls, text: str) -> "AlphaPolicy":
        """``"dynamic"``, ``"dynamic:LO:HI"`` or an integer 0..255."""
        text = str(text).strip().lower()
        if text == "dynamic":
            return cls.dynamic()
        if text.startswith("dynamic:"):
            _, lo, hi = text.split(":")
            return cls.dynamic(int(lo), int(hi))
        return cls.fixed(int(text))

    @property
    def is_zero(self) -> bool:
        return self.mode == "fixed" and self.a == 0

    def describe(self) -> str:
        return str(self.a) if self.mode == "fixed" else f"dynamic:{self.lo}:{self.hi}"


@dataclass(frozen=True)
class CompositedImage:
    composite_id: str
    base_image_id: str
    overlay: OverlaySpec
    alpha_used: int
    width: int
    height: int
    pixels: bytes = field(repr=False)
    file: str | None = None

    def array(self) -> np.ndarray:
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(self.height, self.width, 3)

    def png_bytes(self) -> bytes:
        return encode_png(self.pixels, self.width, self.height)


def render_overlay(width: int, height: int, spec: OverlaySpec) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize boxes into a bool coverage mask and an RGB color layer.

    Boxes paint in order, so later boxes win where they overlap.
    """
    spec.validate(width, height)
    mask = np.zeros((height, width), dtype=bool)
    layer = np.zeros((height, width, 3), dtype=np.uint8)
    for box in spec.boxes:
        x1, y1, x2, y2 = box.bbox
        region = np.zeros((y2 - y1, x2 - x1), dtype=bool)
        if box.style == "filled":
            region[:] = True
        else:
            t = box.thickness
            region[:t, :] = True
            region[-t:, :] = True
            region[:, :t] = True
            region[:, -t:] = True
        mask[y1:y2, x1:x2] |= region
        layer[y1:y2, x1:x2][region] = box.color.rgb
    return mask, layer


def blend_arrays(base: np.ndarray, mask: np.ndarray, layer: np.ndarray, alpha: int) -> np.ndarray:
    if not 0 <= alpha <= 255:
        raise ValueError(f"alpha {alpha} outside 0..255")
    if base.shape != layer.shape or base.shape[:2] != mask.shape:
        raise ValueError(f"dimension mismatch: base {base.shape}, layer {layer.shape}, mask {mask.shape}")
    out = np.array(base, dtype=np.uint8, copy=True)
    if alpha == 0 or not mask.any():
        return out
    x = base[mask].astype(np.int64)
    p = layer[mask].astype(np.int64)
    num = alpha * p + (255 - alpha) * x
    # floor(num / 255 + 1/2) without floats
    out[mask] = ((2 * num + 255) // 510).astype(np.uint8)
    return out


def blend(base: ImageRecord, layer: tuple[np.ndarray, np.ndarray], alpha: int,
          overlay: OverlaySpec = OverlaySpec(), composite_id: str | None = None) -> CompositedImage:
    mask, colors = layer
    out = blend_arrays(base.array(), mask, colors, alpha)
    return CompositedImage(
        composite_id=composite_id or f"{base.image_id}#composite",
        base_image_id=base.image_id,
        overlay=overlay,
        alpha_used=alpha,
        width=base.width,
        height=base.height,
        pixels=out.tobytes(),
    )


def sample_alpha(policy: AlphaPolicy, seed: int, qa_id: str) -> int:
    """Per-item alpha; dynamic draws are keyed by (seed, qa_id) only."""
    if policy.mode == "fixed":
        return policy.a
    return SplitMix64(hash64(seed, "alpha:" + qa_id)).randint(policy.lo, policy.hi)


def composite_id_for(qa_id: str) -> str:
    return f"{qa_id}#roi"


def composite_item(base: ImageRecord, boxes: Sequence[OverlayBox], policy: AlphaPolicy,
                   seed: int, qa_id: str) -> CompositedImage:
    spec = OverlaySpec(tuple(boxes))
    alpha = sample_alpha(policy, seed, qa_id)
    layer = render_overlay(base.width, base.height, spec)
    return blend(base, layer, alpha, spec, composite_id_for(qa_id))


def outline_box(bbox: BBox, color: Color, thickness: int = 3) -> OverlayBox:
    """Outline box whose thickness is clamped to fit; tiny boxes are filled."""
    x1, y1, x2, y2 = bbox
    fit = min(x2 - x1, y2 - y1) // 2
    if fit < 1:
        return OverlayBox(tuple(bbox), color, "filled")
    return OverlayBox(tuple(bbox), color, "outline", min(thickness, fit))


def write_composite(ci: CompositedImage, run_dir: str | Path, qa_id: str) -> tuple[str, dict]:
    """Write ``composites/<qa_id>.png`` under run_dir; return (relpath, sidecar record)."""
    rel = f"composites/{qa_id}.png"
    target = Path(run_dir) / rel
    target.parent.mkdir(parents=True, exist_ok=True)
    data = ci.png_bytes()
    target.write_bytes(data)
    record = {
        "qa_id": qa_id,
        "composite_id": ci.composite_id,
        "alpha_used": ci.alpha_used,
        "boxes": [b.to_json() for b in ci.overlay.boxes],
        "file": rel,
        "sha256": sha256_hex(data),
    }
    return rel, record


def write_sidecar(records: Sequence[dict], path: str | Path) -> None:
    lines = [json.dumps(r, sort_keys=True, separators=(", ", ": ")) for r in sorted(records, key=lambda r: r["qa_id"])]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
