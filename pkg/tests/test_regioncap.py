import json
import math

import numpy as np
import pytest

from regionblip.data import gen_image_scene, generate_all, dataset_path
from regionblip.encoders import ImageGrid
from regionblip.regioncap import (CandidatePair, FilterConfig, bag_of_words_embedder, discover_regions,
                                  max_chunk_similarity, mine_regions, noun_chunks, refine_captions,
                                  similarity_filter, toy_captioner, whiten_crop, connected_components)
from regionblip.regions import RegionSpec

BOX = RegionSpec("box2d", (0, 0, 0.5, 0.5))


def pair(regional, image="a red circle", image_id="x"):
    return CandidatePair(image_id, BOX, regional, image)


def two_object_scene():
    for seed in range(100):
        scene = gen_image_scene(seed, min_objects=2, max_objects=2)
        if len(scene.objects) == 2:
            return scene
    raise AssertionError("no two-object scene")


def test_discovery_finds_each_object():
    scene = two_object_scene()
    found = discover_regions(scene.image)
    assert len(found) == 2
    px = 1 / scene.image.width
    for obj in scene.objects:
        assert any(np.allclose(r.coords, obj.region.coords, atol=px + 1e-9) for r in found)


def test_blank_image_has_no_regions():
    assert discover_regions(ImageGrid(np.zeros((32, 32, 3)))) == []


def test_whiten_crop_and_caption():
    scene = two_object_scene()
    comps = connected_components(scene.image)
    for comp, obj in zip(sorted(comps, key=lambda c: c.region.coords), sorted(scene.objects, key=lambda o: o.region.coords)):
        crop = whiten_crop(scene.image, comp.region, comp.mask)
        outside = ~comp.mask[comp.mask.any(1)][:, comp.mask.any(0)]
        assert np.all(crop.pixels[outside] == 1.0)
        assert toy_captioner(crop) == obj.caption
    assert toy_captioner(ImageGrid(np.ones((4, 4, 3)))) == ""


def test_noun_chunks():
    assert noun_chunks("a red circle above a blue square") == ["red circle", "blue square"]
    assert noun_chunks("a point cloud of a sphere and a cone") == ["sphere", "cone"]
    assert noun_chunks("a photo of a dog") == []


def test_filter_examples():
    assert similarity_filter(pair("a red circle")) == "retain"
    assert similarity_filter(pair("a blue square")) == "filter_out"
    assert similarity_filter(pair("a wolf")) == "filter_out"
    # chunk vectors (sqrt7, sqrt3, 0) and (sqrt7, 0, sqrt3): cosine 0.7
    weighted = bag_of_words_embedder({"red": math.sqrt(7), "circle": math.sqrt(3), "square": math.sqrt(3)})
    assert abs(max_chunk_similarity("a red circle", "a red square", weighted) - 0.7) < 1e-12
    assert abs(max_chunk_similarity("a red circle", "a red square", bag_of_words_embedder()) - 0.5) < 1e-12
    p = pair("a red square")
    assert similarity_filter(p, FilterConfig(0.9, weighted)) == "filter_out"
    assert similarity_filter(p, FilterConfig(0.5, weighted)) == "retain"
    with pytest.raises(ValueError):
        FilterConfig(0.0)


def test_filter_monotone_in_tau():
    rng = np.random.default_rng(0)
    words = ["a", "red", "blue", "green", "circle", "square", "triangle", "sphere", "cube", "above", "and"]
    emb = bag_of_words_embedder({w: float(rng.uniform(0.5, 3)) for w in words})

    def cap():
        return " ".join(rng.choice(words, size=int(rng.integers(1, 6))))

    pairs = [pair(cap(), cap()) for _ in range(1000)]
    prev = None
    for tau in np.linspace(0.1, 0.9, 9):
        kept = {i for i, p in enumerate(pairs) if similarity_filter(p, FilterConfig(float(tau), emb)) == "retain"}
        assert prev is None or kept <= prev
        prev = kept


def test_refine_dedup_and_language():
    pairs = [pair("a red circle"), pair("a red circle"), pair("a red circle", image_id="y"), pair("über circle")]
    kept, dup, lang = refine_captions(pairs)
    assert [(p.image_id, p.regional_caption) for p in kept] == [("x", "a red circle"), ("y", "a red circle")]
    assert (dup, lang) == (1, 1)
    with pytest.raises(ValueError):
        pair("  ")


def test_mine_regions_end_to_end(tmp_path):
    generate_all(tmp_path / "data", n_train=6, n_test=2, modalities=["img_text"])
    kept, stats = mine_regions(dataset_path(tmp_path / "data", "img_text", "train"), tmp_path / "out")
    assert stats["retained"] == len(kept) > 0
    assert stats["input_pairs"] == stats["retained"] + stats["filtered_by_similarity"] + \
        stats["filtered_by_dedup"] + stats["filtered_by_language"]
    lines = (tmp_path / "out" / "pairs.jsonl").read_text().splitlines()
    assert len(lines) == len(kept)
    assert json.loads(lines[0])["region"]["kind"] == "box2d"
