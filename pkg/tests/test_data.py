import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from segforge import data as D

GOLDEN = Path(__file__).parent / "golden"
SMALL = D.SyntheticSpec(num_train=6, num_val=3, side=16, seed=4)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

def test_generate_is_deterministic(tmp_path):
    D.generate(SMALL, tmp_path / "a")
    D.generate(SMALL, tmp_path / "b")
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b and "manifest.json" in a and "train/train_00000.ppm" in a


def test_zero_shapes_gives_background_only():
    spec = replace(SMALL, shapes_per_image=[0, 0])
    assert all(not s.mask.any() for s in D.generate_samples(spec, "train"))


def test_every_class_present_in_train_and_values_valid():
    spec = D.SyntheticSpec(num_train=20, num_val=5, side=32, num_foreground_classes=6)
    train = D.generate_samples(spec, "train")
    present = set()
    for s in train:
        assert s.mask.max() < spec.num_classes
        present |= set(np.unique(s.mask).tolist())
    assert present >= set(range(1, 7))


def test_every_shape_kind_rasterises():
    for kind in D.SHAPE_KINDS:
        m = D.shape_mask(kind, 32, 16.0, 16.0, 8.0, 0.0)
        assert m.dtype == bool and m.any() and not m.all()


def test_background_dominates():
    train = D.generate_samples(D.SyntheticSpec(num_train=20, side=64), "train")
    counts = np.bincount(np.concatenate([s.mask.ravel() for s in train]))
    assert counts[0] > counts[1:].sum()


@pytest.mark.parametrize("field,value", [("side", 50), ("num_foreground_classes", 0), ("shapes_per_image", [3, 1]),
                                         ("num_train", -1), ("noise_level", -0.1)])
def test_spec_errors_name_the_field(field, value):
    with pytest.raises(D.SpecError) as info:
        replace(SMALL, **{field: value}).validate()
    assert info.value.field == field and field in str(info.value)


# ---------------------------------------------------------------------------
# PPM / PGM
# ---------------------------------------------------------------------------

def test_golden_pgm_loads_exactly():
    mask = D.decode_pgm((GOLDEN / "mask_2x2.pgm").read_bytes())
    np.testing.assert_array_equal(mask, [[0, 1], [2, 3]])
    assert D.encode_pgm(mask) == (GOLDEN / "mask_2x2.pgm").read_bytes()


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9), st.just(3))),
       arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_pnm_byte_round_trip(img, mask):
    ppm = D._encode_pnm(b"P6", img)
    decoded = D.decode_ppm(ppm)
    assert D.encode_ppm(decoded) == ppm
    pgm = D.encode_pgm(mask)
    assert D.encode_pgm(D.decode_pgm(pgm)) == pgm


def test_sample_round_trip(tmp_path):
    s = D.generate_samples(SMALL, "train", 1)[0]
    D.save_sample(s, tmp_path / "i.ppm", tmp_path / "m.pgm")
    back = D.load_sample(tmp_path / "i.ppm", tmp_path / "m.pgm", 4)
    assert np.array_equal(back.mask, s.mask)
    assert np.abs(back.image - s.image).max() <= 0.5 / 255 + 1e-12
    assert back.id == "i"


def test_header_comments_are_skipped():
    data = b"P5\n# made by hand\n2 1\n# max\n255\n\x01\x02"
    np.testing.assert_array_equal(D.decode_pgm(data), [[1, 2]])


def test_distinct_error_kinds():
    with pytest.raises(D.MalformedHeaderError, match="maxval"):
        D.decode_pgm(b"P5\n2 2\n65535\n" + bytes(8))
    with pytest.raises(D.MalformedHeaderError):
        D.decode_pgm(b"P2\n2 2\n255\n" + bytes(4))
    with pytest.raises(D.MalformedHeaderError):
        D.decode_pgm(b"P5\n2 x\n255\n")
    with pytest.raises(D.TruncatedPayloadError):
        D.decode_pgm(b"P5\n2 2\n255\n\x00\x01")
    with pytest.raises(D.MaskValueError, match=r"row 1, col 1"):
        D.decode_pgm(b"P5\n2 2\n255\n\x00\x01\x02\x09", num_classes=4)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def write_manifest(root, entries, num_classes=4):
    root.mkdir(parents=True, exist_ok=True)
    for e in entries:
        for key in ("image", "mask"):
            (root / e[key]).parent.mkdir(parents=True, exist_ok=True)
        (root / e["image"]).write_bytes(D._encode_pnm(b"P6", np.zeros((2, 2, 3), np.uint8)))
        (root / e["mask"]).write_bytes(D.encode_pgm(np.zeros((2, 2), np.uint8)))
    doc = {"num_classes": num_classes, "class_names": ["bg", "a", "b", "c"], "entries": entries}
    (root / "manifest.json").write_text(json.dumps(doc))


def entry(i, split="train"):
    return {"id": i, "image": f"{split}/{i}.ppm", "mask": f"{split}/{i}_mask.pgm", "split": split}


def test_iteration_order_matches_golden(tmp_path):
    ids = ["train_a", "train_2", "train_B", "train_10"]
    write_manifest(tmp_path, [entry(i) for i in ids])
    manifest = D.load_manifest(tmp_path)
    got = [s.id for s in D.iterate_split(manifest, "train")]
    assert got == (GOLDEN / "split_order.txt").read_text().split()


def test_empty_split_is_fine(tmp_path):
    write_manifest(tmp_path, [entry("x")])
    assert list(D.iterate_split(D.load_manifest(tmp_path), "test")) == []


def test_manifest_errors(tmp_path):
    write_manifest(tmp_path / "dup", [entry("x"), entry("x")])
    with pytest.raises(D.ManifestError, match="duplicate sample id 'x'"):
        D.load_manifest(tmp_path / "dup")
    write_manifest(tmp_path / "split", [entry("y", "holdout")])
    with pytest.raises(D.ManifestError, match="'y' has unknown split"):
        D.load_manifest(tmp_path / "split")
    write_manifest(tmp_path / "missing", [entry("z")])
    (tmp_path / "missing" / "train" / "z.ppm").unlink()
    with pytest.raises(D.ManifestError, match="'z' references missing file"):
        D.load_manifest(tmp_path / "missing")
    with pytest.raises(D.ManifestError, match="not found"):
        D.load_manifest(tmp_path / "nowhere")
    with pytest.raises(D.ManifestError, match="unknown split"):
        D.DatasetManifest(tmp_path, 4, [], []).split("holdout")


def test_generated_manifest_matches_disk(tmp_path):
    manifest = D.generate(SMALL, tmp_path)
    loaded = D.load_manifest(tmp_path / "manifest.json")
    assert len(loaded.split("train")) == 6 and len(loaded.split("val")) == 3
    assert loaded.class_names == ["background", "circle", "rectangle", "triangle"]
    assert [e.id for e in loaded.entries] == [e.id for e in manifest.entries]
    samples = D.load_split(loaded, "val")
    assert all(s.mask.shape == (16, 16) for s in samples)
