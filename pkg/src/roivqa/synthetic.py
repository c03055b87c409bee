"""Seeded synthetic corpora for tests, demos and the acceptance suite."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from roivqa.corpus import Dataset, ImageRecord, QAPair, RegionAnnotation, save_dataset
from roivqa.rng import SplitMix64

LABELS = ("Heart", "Liver", "spleen", "Left Lung", "Right Lung", "Kidney", "Brain Enhancing Tumor", "Cardiomegaly")
CLOSED_QUESTIONS = (
    ("Is there any abnormality in the {label}?", "Yes"),
    ("Is the {label} healthy?", "No"),
    ("Does the image contain a {label}?", "Yes"),
)


def _random_box(rng: SplitMix64, width: int, height: int) -> tuple[int, int, int, int]:
    w = rng.randint(max(2, width // 10), max(2, width // 3))
    h = rng.randint(max(2, height // 10), max(2, height // 3))
    x1 = rng.randint(0, width - w)
    y1 = rng.randint(0, height - h)
    return (x1, y1, x1 + w, y1 + h)


def make_dataset(n_images: int = 10, regions_per_image: int = 3, qa_per_image: int = 2,
                 size: int = 64, seed: int = 0, name: str = "synth") -> Dataset:
    """Grayscale noise images with random labelled boxes and closed/open QA."""
    rng = SplitMix64(seed)
    nrng = np.random.default_rng(rng.next_u64())
    images, regions, qa = [], {}, []
    for i in range(n_images):
        image_id = f"img{i:04d}"
        gray = nrng.integers(0, 256, size=(size, size), dtype=np.uint8)
        arr = np.repeat(gray[:, :, None], 3, axis=2)
        images.append(ImageRecord.from_array(image_id, arr, f"images/{image_id}.png"))
        rs = []
        for j in range(regions_per_image):
            label = LABELS[rng.randbelow(len(LABELS))]
            rs.append(RegionAnnotation(f"r{j}", label, _random_box(rng, size, size), image_id))
        if rs:
            regions[image_id] = tuple(rs)
        for k in range(qa_per_image):
            label = rs[k % len(rs)].label if rs else "image"
            if k % 2 == 0:
                q, a = CLOSED_QUESTIONS[rng.randbelow(len(CLOSED_QUESTIONS))]
                qa.append(QAPair(f"{image_id}:q{k}", image_id, q.format(label=label), a, "closed"))
            else:
                qa.append(QAPair(f"{image_id}:q{k}", image_id, "What organ is shown in the box?", label, "open"))
    return Dataset(name, tuple(images), regions, tuple(qa))


def write_dataset(d: Dataset, out_dir: str | Path, manifest_name: str = "manifest.jsonl") -> Path:
    return save_dataset(d, Path(out_dir) / manifest_name)
