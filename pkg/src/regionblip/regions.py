"""Normalized region boxes and the modality registry."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class RegionError(ValueError):
    pass


@dataclass(frozen=True)
class RegionSpec:
    """A normalized box.

    ``box2d`` coords are (x1, y1, x2, y2) divided by the image extent;
    ``box3d`` coords are (cx, cy, cz, dx, dy, dz) divided by the scene
    extent. Everything lies in [0, 1].
    """

    kind: str
    coords: tuple

    def __post_init__(self):
        c = tuple(float(v) for v in self.coords)
        object.__setattr__(self, "coords", c)
        if self.kind == "box2d":
            if len(c) != 4:
                raise RegionError(f"box2d needs 4 coords, got {len(c)}")
            x1, y1, x2, y2 = c
            if not (x1 < x2 and y1 < y2):
                raise RegionError(f"box2d must have x1<x2 and y1<y2: {c}")
        elif self.kind == "box3d":
            if len(c) != 6:
                raise RegionError(f"box3d needs 6 coords, got {len(c)}")
            if min(c[3:]) <= 0:
                raise RegionError(f"box3d extents must be positive: {c}")
        else:
            raise RegionError(f"unknown region kind {self.kind!r}")
        if not all(np.isfinite(v) and 0.0 <= v <= 1.0 for v in c):
            raise RegionError(f"region coords must lie in [0, 1]: {c}")

    @property
    def dim(self):
        return len(self.coords)

    def padded(self):
        """Shared 6-dim PaFE input; box2d becomes (x1, y1, 0, x2, y2, 0)."""
        if self.kind == "box2d":
            x1, y1, x2, y2 = self.coords
            return np.array([x1, y1, 0.0, x2, y2, 0.0], dtype=np.float32)
        return np.array(self.coords, dtype=np.float32)

    def to_json(self):
        return {"kind": self.kind, "coords": list(self.coords)}

    @classmethod
    def from_json(cls, obj):
        return None if obj is None else cls(obj["kind"], tuple(obj["coords"]))


@dataclass(frozen=True)
class Modality:
    id: str
    encoder: str  # "image" | "point"
    region_kind: str | None
    prefix: str

    @property
    def is_region(self):
        return self.region_kind is not None


MODALITIES = {
    "img_text": Modality("img_text", "image", None, "a photo of"),
    "img_region": Modality("img_region", "image", "box2d", "a photo of"),
    "pc_text": Modality("pc_text", "point", None, "a point cloud of"),
    "pc_region": Modality("pc_region", "point", "box3d", "a point cloud of"),
}


def get_modality(modality_id):
    try:
        return MODALITIES[modality_id]
    except KeyError:
        raise KeyError(f"unknown modality {modality_id!r}; expected one of {sorted(MODALITIES)}") from None
