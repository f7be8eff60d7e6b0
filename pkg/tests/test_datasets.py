import json
import struct
import zlib
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from midpose import formats
from midpose.binning import assign_bin, azimuth_spec
from midpose.datasets import (FEATURE_SHAPE, SynthConfig, load_annotations, load_feature_map, load_mask, load_mesh,
                              make_split, save_feature_map, save_mesh, subsample_fraction, synth_generate, cuboid)
from midpose.errors import (BadMagicError, ChecksumError, ConfigurationError, CorruptFileError, FormatError,
                            MissingFileError, TruncatedFileError)
from midpose.silhouette import MeshModel


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_tensor_round_trip(tmp_path):
    a = np.random.default_rng(0).standard_normal(FEATURE_SHAPE).astype(np.float32)
    save_feature_map(tmp_path / "a.mlt", a)
    b = load_feature_map(tmp_path / "a.mlt")
    assert b.dtype == np.float32 and b.tobytes() == a.tobytes()


def test_tensor_layout():
    blob = formats.encode_tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert blob[:4] == b"MLT1"
    assert struct.unpack_from("<BBH2I", blob, 4) == (0, 2, 0, 2, 3)
    payload = blob[16:-4]
    assert np.frombuffer(payload, "<f4").tolist() == [0, 1, 2, 3, 4, 5]
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(payload)


def test_tensor_errors_are_distinct(tmp_path):
    blob = formats.encode_tensor(np.ones((16, 16, 8), np.float32))
    with pytest.raises(TruncatedFileError):
        formats.decode_tensor(blob[:len(blob) // 2])
    with pytest.raises(BadMagicError):
        formats.decode_tensor(b"XXXX" + blob[4:])
    with pytest.raises(ChecksumError):
        formats.decode_tensor(blob[:40] + b"\x01" + blob[41:])
    # header claims 16x16x4 but the payload holds 16x16x8
    lying = blob[:16] + struct.pack("<I", 4) + blob[20:]
    with pytest.raises(CorruptFileError):
        formats.decode_tensor(lying)
    p = tmp_path / "x.mlt"
    formats.save_tensor(p, np.ones((4, 4), np.float32))
    with pytest.raises(FormatError):
        load_feature_map(p)  # wrong shape for a feature map
    with pytest.raises(MissingFileError, match="nope.mlt"):
        load_feature_map(tmp_path / "nope.mlt")


def test_split_sizes():
    s = make_split(range(10069), 0.7487, seed=1)
    assert (len(s.train), len(s.test)) == (7539, 2530)
    s = make_split(["a", "b", "c", "d"], 0.5, seed=0)
    assert (len(s.train), len(s.test)) == (2, 2)
    assert make_split(range(50), 0.3, 9) == make_split(range(50), 0.3, 9)


@pytest.mark.parametrize("ids,frac", [([1], 0.5), (range(10), 0.0), (range(10), 1.0)])
def test_split_rejects_bad_input(ids, frac):
    with pytest.raises(ConfigurationError):
        make_split(ids, frac, 0)


def test_subsample_sizes():
    split = make_split(range(10069), 0.7487, seed=1)
    assert subsample_fraction(split, 1.0, 3) == split
    sub = subsample_fraction(split, 0.25, 3)
    assert len(sub.train) == 1884 and sub.test == split.test
    assert set(sub.train) <= set(split.train)
    with pytest.raises(ConfigurationError):
        subsample_fraction(split, 0.0, 3)


def test_subsample_is_stratified():
    cats = {i: ("a" if i % 4 else "b") for i in range(400)}
    split = make_split(range(400), 0.75, 2)
    sub = subsample_fraction(split, 0.5, 4, cats)
    full = Counter(cats[i] for i in split.train)
    kept = Counter(cats[i] for i in sub.train)
    for c in full:
        assert abs(kept[c] - full[c] / 2) <= 1


def test_subsample_warns_on_emptied_category(caplog):
    cats = {0: "rare", **{i: "common" for i in range(1, 40)}}
    split = make_split(range(40), 0.5, 0)
    split = type(split)(tuple(sorted(set(split.train) | {0})), tuple(set(split.test) - {0}), 0)
    sub = subsample_fraction(split, 0.2, 0, cats)
    # the single rare item sits at the median quantile, so a small fraction drops it
    assert 0 not in sub.train
    assert len(sub.train) == int(0.2 * len(split.train))
    assert "rare" in caplog.text


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32), st.integers(2, 300))
def test_split_determinism_and_nesting(seed, n):
    split = make_split(range(n), 0.75, seed)
    assert split == make_split(range(n), 0.75, seed)
    assert not set(split.train) & set(split.test)
    assert set(split.train) | set(split.test) == set(range(n))
    cats = {i: "abc"[i % 3] for i in range(n)}
    prev = set()
    for f in (0.25, 0.5, 0.75, 1.0):
        cur = set(subsample_fraction(split, f, seed, cats).train)
        assert prev <= cur
        prev = cur


def test_synth_counts(small_root):
    anns = load_annotations(small_root / "annotations.jsonl")
    assert len(anns) == 10
    assert len((small_root / "annotations.jsonl").read_text().splitlines()) == 10
    assert len(list((small_root / "masks").glob("*.pgm"))) == 10
    assert len(list((small_root / "features").glob("*.mlt"))) == 20
    for a in anns:
        assert load_feature_map(a.normal_path).shape == FEATURE_SHAPE
        assert load_mask(a.mask_path).bits.any()


def test_synth_is_bitwise_deterministic(tmp_path, small_root):
    root = tmp_path / "again"
    synth_generate(SynthConfig(n_samples=10, seed=5), root)
    assert tree_bytes(root) == tree_bytes(small_root)


def test_synth_covers_all_azimuth_bins(synth_data):
    anns, meshes, _ = synth_data
    spec = azimuth_spec()
    assert {assign_bin(a.azimuth_deg, spec) for a in anns} == set(range(9))
    assert {a.mesh_id for a in anns} <= set(meshes)


def test_synth_features_standardised(synth_data):
    _, _, samples = synth_data
    normals = np.stack([s.normal for s in samples])
    assert np.allclose(normals.mean(axis=(0, 1, 2)), 0, atol=1e-4)
    assert np.allclose(normals.std(axis=(0, 1, 2)), 1, atol=1e-3)


def test_synth_refuses_foreign_directory(tmp_path):
    (tmp_path / "keep.txt").write_text("mine")
    with pytest.raises(ConfigurationError):
        synth_generate(SynthConfig(n_samples=2), tmp_path)
    assert (tmp_path / "keep.txt").read_text() == "mine"


def test_cube_obj(tmp_path):
    v, f = cuboid((0, 0, 0), (1, 1, 1))
    save_mesh(tmp_path / "cube.obj", MeshModel("cube", v, f))
    text = (tmp_path / "cube.obj").read_text()
    assert text.count("\nf ") + text.startswith("f ") == 12
    mesh = load_mesh(tmp_path / "cube.obj")
    assert mesh.id == "cube" and len(mesh.vertices) == 8 and len(mesh.faces) == 12


def test_obj_ignores_other_lines_and_reports_line_numbers(tmp_path):
    good = "# comment\nvn 0 0 1\nv 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1 2 3\nf 1/1 2/2 4/4\n"
    p = tmp_path / "t.obj"
    p.write_text(good)
    assert len(load_mesh(p).faces) == 2
    p.write_text("v 0 0 0\nv 1 0\n")
    with pytest.raises(FormatError, match=r"t\.obj:2"):
        load_mesh(p)
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1 2 3 4\n")
    with pytest.raises(FormatError, match=":5"):
        load_mesh(p)
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 2 0 0\nf 1 2 3\n")
    with pytest.raises(FormatError):
        load_mesh(p)  # coplanar


def test_pgm_threshold(tmp_path):
    img = np.array([[0, 127, 128, 255]], dtype=np.uint8)
    p = tmp_path / "m.pgm"
    formats.write_pgm(p, img, 255)
    assert load_mask(p).bits.tolist() == [[False, False, True, True]]
    p.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(BadMagicError):
        load_mask(p)
    p.write_bytes(b"P5\n4 4\n255\n\x00")
    with pytest.raises(TruncatedFileError):
        load_mask(p)


def test_annotation_missing_file_named(small_root, tmp_path):
    lines = (small_root / "annotations.jsonl").read_text().splitlines()
    obj = json.loads(lines[0])
    obj["mask_path"] = "masks/absent.pgm"
    p = small_root / "broken.jsonl"
    p.write_text(json.dumps(obj) + "\n")
    try:
        with pytest.raises(MissingFileError, match="absent.pgm"):
            load_annotations(p)
    finally:
        p.unlink()


@pytest.mark.parametrize("mutate,err", [
    (lambda o: o.pop("category"), FormatError),
    (lambda o: o.update(azimuth_deg=360.0), FormatError),
    (lambda o: o.update(elevation_deg="high"), FormatError),
    (lambda o: o.update(colour="red"), FormatError),
])
def test_annotation_validation(tmp_path, mutate, err):
    obj = {"sample_id": "a", "category": "chair", "mesh_id": "m", "azimuth_deg": 10.0, "elevation_deg": 5.0}
    mutate(obj)
    p = tmp_path / "a.jsonl"
    p.write_text("\n" + json.dumps(obj) + "\n")
    with pytest.raises(err, match=":2"):
        load_annotations(p)


def test_annotations_without_paths_and_duplicates(tmp_path):
    obj = {"sample_id": "a", "category": "chair", "mesh_id": "m", "azimuth_deg": 10.0, "elevation_deg": 5.0,
           "normal_path": None}
    p = tmp_path / "a.jsonl"
    p.write_text(json.dumps(obj) + "\n")
    (a,) = load_annotations(p)
    assert not a.has_features()
    p.write_text((json.dumps(obj) + "\n") * 2)
    with pytest.raises(FormatError, match="duplicate"):
        load_annotations(p)
    p.write_text("{not json\n")
    with pytest.raises(FormatError, match=":1"):
        load_annotations(p)
