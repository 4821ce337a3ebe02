"""Box-text mining pipeline with deterministic toy components.

Steps: discover regions (connected components stand in for a promptable
segmenter), caption each whitened crop (a colour/fill-ratio classifier
stands in for an image captioner), keep a pair only when some noun chunk
of the regional caption is close to a noun chunk of the image caption,
then drop duplicate and non-English captions.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import COLORS, PRIMITIVES, SHAPES, VOCAB, load_payload, read_dataset
from .encoders import ImageGrid
from .regions import RegionSpec


@dataclass
class CandidatePair:
    image_id: str
    region: RegionSpec
    regional_caption: str
    image_caption: str

    def __post_init__(self):
        if not self.regional_caption.strip() or not self.image_caption.strip():
            raise ValueError(f"{self.image_id}: captions must be non-empty")

    def to_json(self):
        return {"image_id": self.image_id, "region": self.region.to_json(),
                "regional_caption": self.regional_caption, "image_caption": self.image_caption}


# -- step 1: region discovery --------------------------------------------------------

@dataclass
class Component:
    region: RegionSpec
    mask: np.ndarray  # full-image boolean mask


def connected_components(img, threshold=0.05):
    """Default segmenter: 8-connected components of non-background pixels, per colour."""
    px = img.pixels
    fg = px.max(axis=2) > threshold
    H, W = fg.shape
    # quantize colours so touching objects of different colour stay apart
    keys = np.round(px * 8).astype(np.int64) @ np.array([81, 9, 1])
    out = []
    for key in np.unique(keys[fg]):
        labels, n = ndimage.label(fg & (keys == key), structure=np.ones((3, 3)))
        for sl_idx, sl in enumerate(ndimage.find_objects(labels), 1):
            if sl is None:
                continue
            mask = labels == sl_idx
            ys, xs = sl
            box = (xs.start / W, ys.start / H, xs.stop / W, ys.stop / H)
            out.append(Component(RegionSpec("box2d", box), mask))
    out.sort(key=lambda c: (c.region.coords[1], c.region.coords[0]))
    return out


def discover_regions(img, segmenter=None, min_area=0.001):
    """Boxes of discovered components covering at least ``min_area`` of the image."""
    comps = (segmenter or connected_components)(img)
    total = img.height * img.width
    return [c.region for c in comps if c.mask.sum() / total >= min_area]


# -- step 2: whitened crops and captions ---------------------------------------------

def box_pixels(img, region):
    x1, y1, x2, y2 = region.coords
    H, W = img.height, img.width
    c0, c1 = int(round(x1 * W)), int(round(x2 * W))
    r0, r1 = int(round(y1 * H)), int(round(y2 * H))
    if c1 <= c0 or r1 <= r0:
        raise ValueError(f"region {region.coords} is smaller than one pixel")
    return r0, r1, c0, c1


def whiten_crop(img, region, mask=None):
    """Crop to the box and paint pixels outside ``mask`` white."""
    r0, r1, c0, c1 = box_pixels(img, region)
    crop = img.pixels[r0:r1, c0:c1].copy()
    if mask is not None:
        crop[~mask[r0:r1, c0:c1]] = 1.0
    return ImageGrid(crop)


def toy_captioner(crop):
    """Name the object in a whitened crop: nearest palette colour + fill-ratio shape."""
    px = crop.pixels
    obj = ~np.all(px >= 0.999, axis=2)
    if not obj.any():
        return ""
    mean = px[obj].mean(axis=0)
    color = min(COLORS, key=lambda c: float(np.sum((np.array(COLORS[c]) - mean) ** 2)))
    fill = obj.mean()
    shape = "square" if fill > 0.9 else "circle" if fill > 0.65 else "triangle"
    return f"a {color} {shape}"


# -- step 3: filtering ------------------------------------------------------------------

def noun_chunks(caption):
    """``<color> <shape>`` / ``<primitive>`` chunks; [] if the caption is off-grammar."""
    toks = caption.lower().split()
    known = set(VOCAB)
    if any(t not in known for t in toks):
        return []
    chunks, i = [], 0
    while i < len(toks):
        t = toks[i]
        if t in COLORS and i + 1 < len(toks) and toks[i + 1] in SHAPES:
            chunks.append(f"{t} {toks[i + 1]}")
            i += 2
            continue
        if t in PRIMITIVES:
            chunks.append(t)
        i += 1
    return chunks


def bag_of_words_embedder(weights=None):
    """Unit-norm weighted bag of words over the vocabulary."""
    weights = weights or {}
    index = {w: i for i, w in enumerate(VOCAB)}

    def embed(text):
        v = np.zeros(len(VOCAB))
        for tok in text.lower().split():
            if tok in index:
                v[index[tok]] += weights.get(tok, 1.0)
        n = np.linalg.norm(v)
        return v / n if n else v

    return embed


@dataclass
class FilterConfig:
    tau: float = 0.9
    embedder: object = field(default_factory=bag_of_words_embedder)

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValueError(f"tau must be in (0, 1], got {self.tau}")


def max_chunk_similarity(image_caption, regional_caption, embedder):
    ni, nr = noun_chunks(image_caption), noun_chunks(regional_caption)
    if not ni or not nr:
        return None
    ei = np.stack([embedder(c) for c in ni])
    er = np.stack([embedder(c) for c in nr])
    return float((ei @ er.T).max())


def similarity_filter(pair, cfg=None):
    """``"retain"`` iff the best noun-chunk similarity is strictly above tau."""
    cfg = cfg or FilterConfig()
    s = max_chunk_similarity(pair.image_caption, pair.regional_caption, cfg.embedder)
    return "retain" if s is not None and s > cfg.tau else "filter_out"


def _is_english(caption):
    return all(tok.isascii() and tok.isalpha() for tok in caption.split())


def refine_captions(pairs):
    """Drop repeated captions per image (first kept) and non-English captions.

    Returns ``(kept, n_duplicates, n_non_english)``.
    """
    kept, seen = [], set()
    dup = lang = 0
    for p in pairs:
        key = (p.image_id, p.regional_caption)
        if key in seen:
            dup += 1
            continue
        seen.add(key)
        if not _is_english(p.regional_caption):
            lang += 1
            continue
        kept.append(p)
    return kept, dup, lang


def mine_regions(dataset_path, out_dir, cfg=None, segmenter=None, captioner=None):
    """Run the pipeline over an image dataset; writes pairs JSONL and stats JSON."""
    cfg = cfg or FilterConfig()
    captioner = captioner or toy_captioner
    dataset_path = Path(dataset_path)
    samples = read_dataset(dataset_path)
    candidates = []
    seen_payloads = set()
    for s in samples:
        if s.payload in seen_payloads:
            continue
        seen_payloads.add(s.payload)
        img = load_payload(dataset_path.parent, s)
        comps = (segmenter or connected_components)(img)
        total = img.height * img.width
        for c in comps:
            if c.mask.sum() / total < 0.001:
                continue
            cap = captioner(whiten_crop(img, c.region, c.mask))
            if cap:
                candidates.append(CandidatePair(s.id, c.region, cap, s.caption))
    retained = [p for p in candidates if similarity_filter(p, cfg) == "retain"]
    kept, dup, lang = refine_captions(retained)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "pairs.jsonl", "w") as fh:
        for p in kept:
            fh.write(json.dumps(p.to_json(), sort_keys=True) + "\n")
    stats = {"input_pairs": len(candidates), "retained": len(kept),
             "filtered_by_similarity": len(candidates) - len(retained),
             "filtered_by_dedup": dup, "filtered_by_language": lang}
    (out_dir / "stats.json").write_text(json.dumps(stats, sort_keys=True) + "\n")
    return kept, stats
