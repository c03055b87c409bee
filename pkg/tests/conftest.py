import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from roivqa.synthetic import make_dataset, write_dataset


def write_png(path: Path, width: int, height: int, value: int = 100) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full((height, width, 3), value, dtype=np.uint8)).save(path)


def write_manifest(path: Path, objs) -> Path:
    path.write_text("".join(json.dumps(o) + "\n" for o in objs), encoding="utf-8")
    return path


@pytest.fixture
def minimal_manifest(tmp_path):
    write_png(tmp_path / "img" / "a.png", 200, 200)
    return write_manifest(tmp_path / "m.jsonl", [
        {"kind": "image", "image_id": "a", "file": "img/a.png", "width": 200, "height": 200},
        {"kind": "region", "image_id": "a", "region_id": "r1", "label": "Heart", "bbox": [50, 60, 120, 140]},
        {"kind": "qa", "qa_id": "q1", "image_id": "a", "qtype": "closed", "question": "Is there a heart?",
         "answer": "Yes", "provenance": "original", "meta": {}},
    ])


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    write_dataset(make_dataset(12, 3, 2, size=64, seed=11), root)
    return root


@pytest.fixture(scope="session")
def recon_dir(tmp_path_factory):
    """A reconstructed split with composites on disk."""
    from roivqa.roiqa import GenerationConfig, reconstruct_dataset, write_reconstruction

    root = tmp_path_factory.mktemp("recon")
    rec = reconstruct_dataset(make_dataset(8, 3, 2, size=64, seed=5), GenerationConfig(seed=21))
    write_reconstruction(rec, root)
    return root


def gold_fixture(manifest: Path, out: Path) -> Path:
    from roivqa.corpus import load_dataset

    d = load_dataset(manifest)
    out.write_text("".join(json.dumps({"qa_id": q.qa_id, "answer": q.answer}) + "\n" for q in d.qa))
    return out
