import json
import math
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from roivqa.corpus import (
    Dataset,
    ManifestError,
    MergeError,
    QAPair,
    SplitError,
    SplitSpec,
    load_dataset,
    manifest_text,
    merge_datasets,
    save_dataset,
    split_dataset,
)
from roivqa.synthetic import make_dataset

from conftest import write_manifest, write_png


def test_load_minimal(minimal_manifest):
    d = load_dataset(minimal_manifest)
    assert len(d.images) == 1 and len(d.qa) == 1
    assert d.regions["a"][0].bbox == (50, 60, 120, 140)
    assert len(d.images[0].pixels) == 200 * 200 * 3


def test_paper_bbox_on_512_image(tmp_path):
    write_png(tmp_path / "x.png", 512, 512)
    p = write_manifest(tmp_path / "m.jsonl", [
        {"kind": "image", "image_id": "x", "file": "x.png", "width": 512, "height": 512},
        {"kind": "region", "image_id": "x", "region_id": "r", "label": "Heart", "bbox": [115, 163, 243, 268]},
    ])
    assert load_dataset(p).regions["x"][0].bbox == (115, 163, 243, 268)


def _one_image(tmp_path, region=None, qa=None, extra_image=None):
    write_png(tmp_path / "a.png", 20, 20)
    objs = [{"kind": "image", "image_id": "a", "file": "a.png", "width": 20, "height": 20, **(extra_image or {})}]
    if region:
        objs.append({"kind": "region", "image_id": "a", "region_id": "r", "label": "Heart", **region})
    if qa:
        objs.append({"kind": "qa", "qa_id": "q", "image_id": "a", "qtype": "closed", "question": "?",
                     "answer": "yes", "provenance": "original", "meta": {}, **qa})
    return write_manifest(tmp_path / "m.jsonl", objs)


def test_degenerate_bbox(tmp_path):
    with pytest.raises(ManifestError, match="degenerate bbox") as ei:
        load_dataset(_one_image(tmp_path, {"bbox": [10, 2, 10, 5]}))
    assert ei.value.line == 2 and ei.value.field == "bbox"


def test_out_of_bounds_bbox(tmp_path):
    with pytest.raises(ManifestError, match="out of bounds"):
        load_dataset(_one_image(tmp_path, {"bbox": [0, 0, 21, 5]}))


def test_empty_label(tmp_path):
    with pytest.raises(ManifestError, match="empty label"):
        load_dataset(_one_image(tmp_path, {"bbox": [0, 0, 5, 5], "label": "  "}))


def test_missing_field_named(tmp_path):
    p = write_manifest(tmp_path / "m.jsonl", [{"kind": "image", "image_id": "a", "width": 2, "height": 2}])
    with pytest.raises(ManifestError) as ei:
        load_dataset(p)
    assert ei.value.line == 1 and ei.value.field == "file"


def test_missing_image_file(tmp_path):
    p = write_manifest(tmp_path / "m.jsonl",
                       [{"kind": "image", "image_id": "a", "file": "nope.png", "width": 2, "height": 2}])
    with pytest.raises(ManifestError, match="not found"):
        load_dataset(p)


def test_undecodable_image(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not a png")
    p = write_manifest(tmp_path / "m.jsonl",
                       [{"kind": "image", "image_id": "a", "file": "bad.png", "width": 2, "height": 2}])
    with pytest.raises(ManifestError, match="cannot decode"):
        load_dataset(p)


def test_duplicate_qa_id(tmp_path):
    p = _one_image(tmp_path, qa={"answer": "no"})
    p.write_text(p.read_text() + p.read_text().splitlines()[-1] + "\n")
    with pytest.raises(ManifestError, match="duplicate qa_id"):
        load_dataset(p)


def test_empty_manifest(tmp_path):
    (tmp_path / "m.jsonl").write_text("\n")
    with pytest.raises(ManifestError, match="empty manifest"):
        load_dataset(tmp_path / "m.jsonl")


def test_unknown_field_strict_vs_lenient(tmp_path):
    p = _one_image(tmp_path, extra_image={"modality": "CT"})
    with pytest.raises(ManifestError, match="unknown field"):
        load_dataset(p)
    d = load_dataset(p, strict=False)
    assert d.images[0].extra == {"modality": "CT"}
    save_dataset(d, tmp_path / "out" / "m.jsonl")
    assert '"modality": "CT"' in (tmp_path / "out" / "m.jsonl").read_text()


def test_multichoice_meta_invariant(tmp_path):
    meta = {"correct": "E", "option_colors": {"A": "Yellow", "B": "Purple", "C": "Green", "D": "Red"}}
    with pytest.raises(ManifestError, match="multichoice"):
        load_dataset(_one_image(tmp_path, qa={"qtype": "multichoice", "answer": "E", "meta": meta}))


def test_localization_answer_must_parse(tmp_path):
    with pytest.raises(ManifestError, match="not a bbox"):
        load_dataset(_one_image(tmp_path, qa={"qtype": "localization", "answer": "somewhere"}))


def test_error_collection_reports_every_line(tmp_path):
    write_png(tmp_path / "a.png", 20, 20)
    p = write_manifest(tmp_path / "m.jsonl", [
        {"kind": "image", "image_id": "a", "file": "a.png", "width": 20, "height": 20},
        {"kind": "region", "image_id": "a", "region_id": "r1", "label": "x", "bbox": [5, 5, 1, 1]},
        {"kind": "region", "image_id": "a", "region_id": "r2", "label": "x", "bbox": [0, 0, 50, 5]},
        {"kind": "bogus"},
    ])
    errors = []
    with pytest.raises(ManifestError):
        load_dataset(p, errors=errors)
    assert [e.line for e in errors] == [2, 3, 4]


def test_round_trip_byte_identical(synth_dir, tmp_path):
    src = synth_dir / "manifest.jsonl"
    out = save_dataset(load_dataset(src), tmp_path / "copy" / "manifest.jsonl")
    assert out.read_bytes() == src.read_bytes()
    again = save_dataset(load_dataset(out), tmp_path / "copy2" / "manifest.jsonl")
    assert again.read_bytes() == src.read_bytes()


# ---- split


def _brute_force_train_qa(d: Dataset, train_ids):
    return sum(1 for q in d.qa if q.image_id in train_ids)


def test_split_sizes_10_images():
    d = make_dataset(10, 1, 1, size=16)
    train, test = split_dataset(d, SplitSpec(seed=3))
    assert (len(train.images), len(test.images)) == (8, 2)


def test_split_five_images_three_qa():
    d = make_dataset(5, 1, 3, size=16)
    train, test = split_dataset(d, SplitSpec(seed=9))
    train_ids = {im.image_id for im in train.images}
    # grouping rule: every QA follows its image
    assert len(train.qa) == _brute_force_train_qa(d, train_ids) == 4 * 3
    assert len(test.qa) == 3


def test_split_deterministic():
    d = make_dataset(10, 1, 2, size=16)
    a = split_dataset(d, SplitSpec(seed=42))
    b = split_dataset(d, SplitSpec(seed=42))
    assert manifest_text(a[0]) == manifest_text(b[0])
    assert manifest_text(a[1]) == manifest_text(b[1])


def test_split_needs_two_images():
    with pytest.raises(SplitError):
        split_dataset(make_dataset(1, 1, 1, size=16), SplitSpec(seed=0))


def test_split_spec_rejects_bad_fraction():
    with pytest.raises(ValueError):
        SplitSpec(0, Fraction(1))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**64 - 1), n=st.integers(min_value=2, max_value=25),
       num=st.integers(min_value=1, max_value=9))
def test_split_properties(seed, n, num):
    frac = Fraction(num, 10)
    d = make_dataset(n, 0, 2, size=8)
    train, test = split_dataset(d, SplitSpec(seed, frac))
    tr, te = set(train.image_ids), set(test.image_ids)
    assert not tr & te
    assert tr | te == set(d.image_ids)
    assert len(tr) == min(math.ceil(frac * n), n - 1)
    assert all(q.image_id in tr for q in train.qa)
    assert all(q.image_id in te for q in test.qa)
    assert len(train.qa) + len(test.qa) == len(d.qa)


# ---- merge


def test_merge_disjoint_union():
    a = make_dataset(2, 1, 1, size=8, name="A")
    b = make_dataset(3, 1, 1, size=8, name="B")
    m = merge_datasets([a, b])
    assert len(m.images) == 5
    assert sorted(i.split("/")[0] for i in m.image_ids) == ["A", "A", "B", "B", "B"]
    assert all(q.image_id in set(m.image_ids) for q in m.qa)


def test_merge_single_is_identity_modulo_prefix():
    a = make_dataset(3, 2, 2, size=8, name="A")
    m = merge_datasets([a])
    assert [i.removeprefix("A/") for i in m.image_ids] == a.image_ids
    assert [q.question for q in m.qa] == [q.question for q in a.qa]
    assert [im.pixels for im in m.images] == [im.pixels for im in a.images]


def test_merge_same_name_collides():
    a = make_dataset(2, 1, 1, size=8, name="A")
    with pytest.raises(MergeError):
        merge_datasets([a, a])


def test_merged_dataset_saves_and_reloads(tmp_path):
    a = make_dataset(2, 1, 1, size=8, name="A")
    b = make_dataset(2, 1, 1, size=8, name="B")
    path = save_dataset(merge_datasets([a, b]), tmp_path / "all.jsonl")
    d = load_dataset(path)
    assert len(d.images) == 4 and d.images[0].image_id.startswith("A/")


def test_qapair_validates_qtype():
    with pytest.raises(ValueError):
        QAPair("q", "a", "?", "x", "essay")
