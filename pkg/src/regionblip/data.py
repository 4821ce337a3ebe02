"""Synthetic image / point-cloud scenes, the toy tokenizer, and dataset files.

Dataset layout under a root directory::

    <root>/<modality>_<split>.jsonl
    <root>/blobs/<modality>/<scene>.bin

Each JSONL line is ``{id, modality, payload, region, caption}`` where
``payload`` is a blob path relative to the root. A blob is an 8-byte
little-endian uint16 header (rank, extent0, extent1, extent2; unused
extents are 0) followed by raw little-endian float32 data.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import ImageGrid, PointCloud
from .regions import MODALITIES, RegionSpec, get_modality

PAD, BOS, EOS = 0, 1, 2
RESERVED = ["<pad>", "<bos>", "<eos>"]

COLORS = {
    "red": (0.9, 0.15, 0.1),
    "green": (0.15, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.15),
}
SHAPES = ("circle", "square", "triangle")
PRIMITIVES = ("sphere", "cube", "cone", "torus")
RELATIONS = ("above", "left of")
GRAMMAR_WORDS = ["a", "photo", "of", "point", "cloud", "and", "above", "left"]
VOCAB = RESERVED + GRAMMAR_WORDS + list(COLORS) + list(SHAPES) + list(PRIMITIVES)

IMAGE_SIZE = 64
CELL = 16
SCENE_EXTENT = 1.0  # point scenes live in [-1, 1]^3
TEST_SEED_OFFSET = 5_000_000


class TokenizerError(ValueError):
    pass


class DatasetError(ValueError):
    pass


class Tokenizer:
    """Whitespace tokenizer over a fixed vocabulary (0=PAD, 1=BOS, 2=EOS)."""

    def __init__(self, vocab=None):
        self.vocab = list(VOCAB if vocab is None else vocab)
        if self.vocab[:3] != RESERVED:
            raise TokenizerError("vocabulary must start with <pad>, <bos>, <eos>")
        self.index = {w: i for i, w in enumerate(self.vocab)}
        if len(self.index) != len(self.vocab):
            raise TokenizerError("duplicate vocabulary entries")

    def __len__(self):
        return len(self.vocab)

    def tokenize(self, text, frame=False):
        ids = []
        for tok in text.lower().split():
            if tok not in self.index:
                raise TokenizerError(f"out-of-vocabulary token {tok!r}")
            ids.append(self.index[tok])
        return [BOS] + ids + [EOS] if frame else ids

    def detokenize(self, ids):
        words = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            words.append(self.vocab[i])
        return " ".join(words)

    def save(self, path):
        Path(path).write_text("\n".join(self.vocab) + "\n")

    @classmethod
    def load(cls, path):
        return cls([line for line in Path(path).read_text().splitlines() if line])


def tokenize(text, tokenizer=None):
    return (tokenizer or Tokenizer()).tokenize(text, frame=True)


def detokenize(ids, tokenizer=None):
    return (tokenizer or Tokenizer()).detokenize(ids)


# -- image scenes ----------------------------------------------------------------

@dataclass
class SceneObject:
    name: str  # caption chunk, e.g. "red circle" or "sphere"
    region: RegionSpec
    cell: int = 0
    mask: np.ndarray | None = field(default=None, repr=False)

    @property
    def caption(self):
        return f"a {self.name}"


@dataclass
class ImageScene:
    image: ImageGrid
    objects: list
    caption: str


@dataclass
class PointScene:
    cloud: PointCloud
    objects: list
    caption: str


def _shape_mask(shape, size):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "circle":
        r = size / 2
        return (xx - r) ** 2 + (yy - r) ** 2 <= r * r
    if shape == "triangle":
        # apex at top centre, base along the bottom row
        half = (yy / size) * (size / 2)
        return np.abs(xx - size / 2) <= half + 0.5
    raise ValueError(f"unknown shape {shape!r}")


def scene_caption(objects, relation=True):
    """Objects are listed in raster order of their grid cells."""
    objs = sorted(objects, key=lambda o: o.cell)
    if len(objs) == 2 and relation:
        a, b = objs
        grid = IMAGE_SIZE // CELL
        rel = "left of" if a.cell // grid == b.cell // grid else "above"
        return f"{a.caption} {rel} {b.caption}"
    return " and ".join(o.caption for o in objs)


def gen_image_scene(seed, min_objects=1, max_objects=4):
    """2-4 (or 1-4) distinct coloured shapes, one per 16x16 grid cell."""
    rng = np.random.default_rng(seed)
    grid = IMAGE_SIZE // CELL
    n = int(rng.integers(min_objects, max_objects + 1))
    cells = rng.choice(grid * grid, size=n, replace=False)
    kinds = [(c, s) for c in COLORS for s in SHAPES]
    picks = rng.choice(len(kinds), size=n, replace=False)
    pixels = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
    objects = []
    for cell, pick in zip(cells, picks):
        color, shape = kinds[pick]
        size = int(rng.integers(12, 14))
        row, col = divmod(int(cell), grid)
        y0 = row * CELL + 1 + int(rng.integers(0, CELL - 2 - size + 1))
        x0 = col * CELL + 1 + int(rng.integers(0, CELL - 2 - size + 1))
        local = _shape_mask(shape, size)
        mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
        mask[y0:y0 + size, x0:x0 + size] = local
        pixels[mask] = COLORS[color]
        ys, xs = np.nonzero(mask)
        box = (xs.min() / IMAGE_SIZE, ys.min() / IMAGE_SIZE,
               (xs.max() + 1) / IMAGE_SIZE, (ys.max() + 1) / IMAGE_SIZE)
        objects.append(SceneObject(f"{color} {shape}", RegionSpec("box2d", box), int(cell), mask))
    objects.sort(key=lambda o: o.cell)
    return ImageScene(ImageGrid(pixels), objects, scene_caption(objects))


# -- point scenes -----------------------------------------------------------------

def sample_primitive(kind, n, rng, size=1.0):
    """``n`` surface points of a primitive centred at the origin."""
    if kind == "sphere":
        v = rng.normal(size=(n, 3))
        return size * v / np.linalg.norm(v, axis=1, keepdims=True)
    if kind == "cube":
        p = rng.uniform(-1, 1, size=(n, 3))
        axis = rng.integers(0, 3, size=n)
        p[np.arange(n), axis] = rng.choice([-1.0, 1.0], size=n)
        return size * p
    if kind == "cone":
        # lateral surface, apex up; height 2*size, base radius size
        h = np.sqrt(rng.uniform(0, 1, size=n))
        theta = rng.uniform(0, 2 * np.pi, size=n)
        r = size * h
        return np.stack([r * np.cos(theta), r * np.sin(theta), size * (1 - 2 * h)], axis=1)
    if kind == "torus":
        R, r = 0.7 * size, 0.3 * size
        u = rng.uniform(0, 2 * np.pi, size=n)
        v = rng.uniform(0, 2 * np.pi, size=n)
        return np.stack([(R + r * np.cos(v)) * np.cos(u), (R + r * np.cos(v)) * np.sin(u), r * np.sin(v)], axis=1)
    raise ValueError(f"unknown primitive {kind!r}")


def gen_point_scene(seed, min_objects=1, max_objects=3, n_points=512):
    """Distinct primitives on a 3x3 ground grid inside [-1, 1]^3."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(min_objects, max_objects + 1))
    cells = rng.choice(9, size=n, replace=False)
    kinds = rng.choice(len(PRIMITIVES), size=n, replace=False)
    counts = np.full(n, n_points // n)
    counts[: n_points - counts.sum()] += 1
    pts, objects = [], []
    for cell, kind, cnt in zip(cells, kinds, counts):
        row, col = divmod(int(cell), 3)
        size = rng.uniform(0.18, 0.26)
        centre = np.array([-2 / 3 + col * 2 / 3 + rng.uniform(-0.05, 0.05),
                           -2 / 3 + row * 2 / 3 + rng.uniform(-0.05, 0.05),
                           rng.uniform(-0.3, 0.3)])
        p = sample_primitive(PRIMITIVES[kind], int(cnt), rng, size) + centre
        lo, hi = p.min(axis=0), p.max(axis=0)
        c = ((lo + hi) / 2 + SCENE_EXTENT) / (2 * SCENE_EXTENT)
        d = (hi - lo) / (2 * SCENE_EXTENT)
        objects.append(SceneObject(PRIMITIVES[kind], RegionSpec("box3d", tuple(c) + tuple(d)), int(cell)))
        pts.append(p)
    order = np.argsort([o.cell for o in objects], kind="stable")
    objects = [objects[i] for i in order]
    cloud = PointCloud(np.concatenate(pts).astype(np.float32))
    return PointScene(cloud, objects, scene_caption(objects, relation=False))


# -- samples and files ----------------------------------------------------------

@dataclass
class TrainSample:
    id: str
    modality: str
    payload: str
    region: RegionSpec | None
    caption: str

    def __post_init__(self):
        mod = get_modality(self.modality)
        if (self.region is not None) != mod.is_region:
            raise DatasetError(f"{self.id}: region must be present iff {self.modality} is a region modality")
        if self.region is not None and self.region.kind != mod.region_kind:
            raise DatasetError(f"{self.id}: {self.modality} expects {mod.region_kind}, got {self.region.kind}")
        if not self.caption.strip():
            raise DatasetError(f"{self.id}: empty caption")

    def to_json(self):
        return {"id": self.id, "modality": self.modality, "payload": self.payload,
                "region": None if self.region is None else self.region.to_json(), "caption": self.caption}


def write_blob(path, array):
    arr = np.ascontiguousarray(array, dtype="<f4")
    if not 1 <= arr.ndim <= 3 or max(arr.shape) > 0xFFFF:
        raise DatasetError(f"blob arrays must have rank 1-3 and extents < 65536, got {arr.shape}")
    header = np.zeros(4, dtype="<u2")
    header[0] = arr.ndim
    header[1:1 + arr.ndim] = arr.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header.tobytes() + arr.tobytes())


def read_blob(path):
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing blob: {path}")
    raw = path.read_bytes()
    if len(raw) < 8:
        raise DatasetError(f"blob too short for header: {path}")
    header = np.frombuffer(raw[:8], dtype="<u2")
    rank = int(header[0])
    if not 1 <= rank <= 3:
        raise DatasetError(f"blob {path}: invalid rank {rank}")
    shape = tuple(int(x) for x in header[1:1 + rank])
    expected = 4 * int(np.prod(shape))
    if len(raw) - 8 != expected:
        raise DatasetError(f"blob {path}: header says {shape} ({expected} bytes), body has {len(raw) - 8}")
    return np.frombuffer(raw[8:], dtype="<f4").reshape(shape).astype(np.float32)


def write_dataset(path, samples):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")


def read_dataset(path):
    path = Path(path)
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                sample = TrainSample(obj["id"], obj["modality"], obj["payload"],
                                     RegionSpec.from_json(obj["region"]), obj["caption"])
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed record ({exc})") from None
            if not (path.parent / sample.payload).exists():
                raise DatasetError(f"{path}:{lineno}: missing blob {path.parent / sample.payload}")
            out.append(sample)
    return out


def load_payload(root, sample):
    arr = read_blob(Path(root) / sample.payload)
    if get_modality(sample.modality).encoder == "image":
        return ImageGrid(arr)
    return PointCloud(arr)


def dataset_path(root, modality, split):
    return Path(root) / f"{modality}_{split}.jsonl"


def _scene_seed(seed, split, index):
    return seed * 10_000_000 + (TEST_SEED_OFFSET if split == "test" else 0) + index


def generate_split(root, modality, split, n_scenes, seed=0):
    """Write ``n_scenes`` scenes of ``modality`` and return the samples.

    Region modalities emit one sample per object and require >= 2 objects
    per scene.
    """
    mod = get_modality(modality)
    root = Path(root)
    samples = []
    for i in range(n_scenes):
        scene_seed = _scene_seed(seed, split, i)
        if mod.encoder == "image":
            lo = 2 if mod.is_region else 1
            scene = gen_image_scene(scene_seed, lo, 4)
            array = scene.image.pixels
        else:
            lo = 2 if mod.is_region else 1
            scene = gen_point_scene(scene_seed, lo, 3)
            array = scene.cloud.points
        rel = f"blobs/{modality}/{split}-{i:06d}.bin"
        write_blob(root / rel, array)
        if mod.is_region:
            for j, obj in enumerate(scene.objects):
                samples.append(TrainSample(f"{modality}-{split}-{i:06d}-{j}", modality, rel, obj.region, obj.caption))
        else:
            samples.append(TrainSample(f"{modality}-{split}-{i:06d}", modality, rel, None, scene.caption))
    write_dataset(dataset_path(root, modality, split), samples)
    return samples


def generate_all(root, n_train=200, n_test=40, seed=0, modalities=None):
    out = {}
    for m in modalities or MODALITIES:
        out[(m, "train")] = generate_split(root, m, "train", n_train, seed)
        out[(m, "test")] = generate_split(root, m, "test", n_test, seed)
    Tokenizer().save(Path(root) / "vocab.txt")
    return out


def caption_corpus(seed=0, n_scenes=200):
    """Prefix + caption strings covering every modality, for LM pre-training."""
    texts = []
    for i in range(n_scenes):
        s = gen_image_scene(_scene_seed(seed, "train", i), 1, 4)
        texts.append(("a photo of", s.caption))
        texts.extend(("a photo of", o.caption) for o in s.objects)
        p = gen_point_scene(_scene_seed(seed, "train", i), 1, 3)
        texts.append(("a point cloud of", p.caption))
        texts.extend(("a point cloud of", o.caption) for o in p.objects)
    return texts
