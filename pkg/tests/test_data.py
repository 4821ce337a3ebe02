import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from regionblip import data
from regionblip.data import (COLORS, DatasetError, PRIMITIVES, SHAPES, Tokenizer, TokenizerError, TrainSample,
                             gen_image_scene, gen_point_scene)
from regionblip.regions import RegionError, RegionSpec


def test_region_spec_validation_and_padding():
    r = RegionSpec("box2d", (0, 0, 1, 1))
    np.testing.assert_array_equal(r.padded(), [0, 0, 0, 1, 1, 0])
    assert RegionSpec.from_json(r.to_json()) == r
    for bad in [("box2d", (0.5, 0, 0.2, 1)), ("box2d", (0, 0, 1)), ("box3d", (0.5,) * 3 + (0, 0.1, 0.1)),
                ("box2d", (0, 0, 1.5, 1)), ("ellipse", (0, 0, 1, 1))]:
        with pytest.raises(RegionError):
            RegionSpec(*bad)


def test_tokenizer_examples(tmp_path):
    tok = Tokenizer()
    ids = tok.tokenize("a red circle", frame=True)
    assert len(ids) == 5 and ids[0] == data.BOS and ids[-1] == data.EOS
    with pytest.raises(TokenizerError):
        tok.tokenize("a zebra")
    tok.save(tmp_path / "vocab.txt")
    lines = (tmp_path / "vocab.txt").read_text().splitlines()
    assert lines[:3] == ["<pad>", "<bos>", "<eos>"]
    assert Tokenizer.load(tmp_path / "vocab.txt").vocab == tok.vocab


@given(seed=st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_caption_round_trip(seed):
    tok = Tokenizer()
    for cap in [gen_image_scene(seed).caption, gen_point_scene(seed).caption]:
        assert tok.detokenize(tok.tokenize(cap, frame=True)) == cap


def test_image_scene_deterministic():
    a, b = gen_image_scene(11), gen_image_scene(11)
    np.testing.assert_array_equal(a.image.pixels, b.image.pixels)
    assert a.caption == b.caption


@given(seed=st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_image_scene_boxes_and_pixels(seed):
    scene = gen_image_scene(seed, 2, 4)
    assert 2 <= len(scene.objects) <= 4
    names = [o.name for o in scene.objects]
    assert len(set(names)) == len(names)
    for o in scene.objects:
        x1, y1, x2, y2 = o.region.coords
        cy, cx = int((y1 + y2) / 2 * 64), int((x1 + x2) / 2 * 64)
        color = o.name.split()[0]
        np.testing.assert_allclose(scene.image.pixels[cy, cx], COLORS[color], atol=1e-6)
        assert o.name.split()[1] in SHAPES


def test_unit_sphere_radius():
    p = data.sample_primitive("sphere", 200, np.random.default_rng(0))
    np.testing.assert_allclose(np.linalg.norm(p, axis=1), 1.0, atol=1e-6)


@given(seed=st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_point_boxes_contain_their_object(seed):
    scene = gen_point_scene(seed)
    pts = scene.cloud.points.astype(np.float64)
    per = len(pts) // len(scene.objects)
    for o in scene.objects:
        c = np.array(o.region.coords[:3]) * 2 - 1
        half = np.array(o.region.coords[3:])
        inside = np.all(np.abs(pts - c) <= half + 1e-6, axis=1).sum()
        assert inside >= 0.95 * per
        assert o.name in PRIMITIVES


def test_point_scene_deterministic():
    np.testing.assert_array_equal(gen_point_scene(4).cloud.points, gen_point_scene(4).cloud.points)


def test_blob_round_trip_and_mismatch(tmp_path):
    arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    data.write_blob(tmp_path / "x.bin", arr)
    np.testing.assert_array_equal(data.read_blob(tmp_path / "x.bin"), arr)
    raw = (tmp_path / "x.bin").read_bytes()
    (tmp_path / "y.bin").write_bytes(raw[:-4])
    with pytest.raises(DatasetError):
        data.read_blob(tmp_path / "y.bin")
    with pytest.raises(DatasetError):
        data.read_blob(tmp_path / "missing.bin")


def test_generate_split_round_trip(tmp_path):
    out = data.generate_split(tmp_path, "img_region", "train", 3)
    back = data.read_dataset(data.dataset_path(tmp_path, "img_region", "train"))
    assert back == out
    assert len({s.payload for s in out}) == 3
    assert len(out) >= 6  # at least two objects per scene
    pc = data.generate_split(tmp_path, "pc_text", "test", 2)
    assert all(s.region is None for s in pc)
    img = data.load_payload(tmp_path, out[0])
    assert img.pixels.shape == (64, 64, 3)


def test_splits_are_disjoint(tmp_path):
    tr = data.generate_split(tmp_path, "img_text", "train", 5)
    te = data.generate_split(tmp_path, "img_text", "test", 5)
    a = {data.read_blob(tmp_path / s.payload).tobytes() for s in tr}
    b = {data.read_blob(tmp_path / s.payload).tobytes() for s in te}
    assert not a & b


def test_dataset_errors(tmp_path):
    with pytest.raises(DatasetError):
        TrainSample("x", "pc_text", "p.bin", RegionSpec("box3d", (0.5,) * 6), "a sphere")
    with pytest.raises(DatasetError):
        TrainSample("x", "img_region", "p.bin", None, "a red circle")
    with pytest.raises(DatasetError):
        TrainSample("x", "img_text", "p.bin", None, "  ")
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps({"id": "a"}) + "\n")
    with pytest.raises(DatasetError, match=":1:"):
        data.read_dataset(path)
    rec = {"id": "a", "modality": "img_text", "payload": "blobs/none.bin", "region": None, "caption": "a red circle"}
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(DatasetError, match="missing blob"):
        data.read_dataset(path)


def test_generate_all_writes_vocab(tmp_path):
    data.generate_all(tmp_path, 2, 1, modalities=["pc_region"])
    assert (tmp_path / "vocab.txt").exists()
    assert (tmp_path / "pc_region_test.jsonl").exists()
