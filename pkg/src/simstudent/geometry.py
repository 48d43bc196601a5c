"""Spatial neighbor indexing over patch grid coordinates.

For every patch, the other patches of the same slide are partitioned into a
"similar" set (Euclidean distance in millimeters <= radius, boundary
inclusive) and a "dissimilar" set (everything else). A patch is never similar
to itself. The index is built per slide with uniform grid bucketing; the
one-positive/one-negative pair used by the similarity loss is drawn uniformly
from the two sets.
"""

from collections import defaultdict
from dataclasses import dataclass

import math

import numpy as np

DEFAULT_SPACING_MM = 0.2178


class IsolatedPatchError(ValueError):
    """Raised when a patch has no similar neighbor within the radius."""


@dataclass(frozen=True)
class PatchCoord:
    slide_id: str
    row: int
    col: int
    spacing_mm: float = DEFAULT_SPACING_MM

    def __post_init__(self):
        if self.spacing_mm <= 0:
            raise ValueError("spacing_mm must be positive")


def _within(dr: int, dc: int, spacing: float, radius: float) -> bool:
    return spacing * math.sqrt(dr * dr + dc * dc) <= radius


class NeighborIndex:
    """Per-patch similar/dissimilar partition, restricted to the same slide."""

    def __init__(self, similar: list, slide_members: dict, slide_of: list):
        self._similar = similar
        self._slide_members = slide_members
        self._slide_of = slide_of
        self.n_patches = len(similar)

    def similar_ids(self, patch: int) -> np.ndarray:
        return self._similar[patch]

    def dissimilar_ids(self, patch: int) -> np.ndarray:
        members = self._slide_members[self._slide_of[patch]]
        others = members[members != patch]
        return np.setdiff1d(others, self._similar[patch], assume_unique=True)

    def slide_patch_count(self, patch: int) -> int:
        return len(self._slide_members[self._slide_of[patch]])


def build_neighbor_index(coords: list, radius_mm: float) -> NeighborIndex:
    """Index patch coordinates for radius queries in physical units.

    coords are PatchCoord records; indices into that list are the patch ids
    used everywhere downstream. Bucket size equals the radius in grid units,
    so only the 3x3 neighborhood of a patch's bucket needs scanning.
    """
    if radius_mm <= 0:
        raise ValueError("similarity radius must be positive")
    slide_members = defaultdict(list)
    for i, c in enumerate(coords):
        slide_members[c.slide_id].append(i)

    spacing_of = {}
    for c in coords:
        prev = spacing_of.setdefault(c.slide_id, c.spacing_mm)
        if prev != c.spacing_mm:
            raise ValueError(f"mixed spacing within slide {c.slide_id!r}")

    similar: list = [None] * len(coords)
    slide_of = [c.slide_id for c in coords]
    members_arr = {}
    for slide_id, members in slide_members.items():
        spacing = spacing_of[slide_id]
        cell = max(radius_mm / spacing, 1.0)
        buckets = defaultdict(list)
        for i in members:
            buckets[(int(coords[i].row // cell), int(coords[i].col // cell))].append(i)
        for i in members:
            ci = coords[i]
            bi = (int(ci.row // cell), int(ci.col // cell))
            found = []
            for db_r in (-1, 0, 1):
                for db_c in (-1, 0, 1):
                    for j in buckets.get((bi[0] + db_r, bi[1] + db_c), ()):
                        if j == i:
                            continue
                        cj = coords[j]
                        if _within(ci.row - cj.row, ci.col - cj.col, spacing,
                                   radius_mm):
                            found.append(j)
            similar[i] = np.array(sorted(found), dtype=np.int64)
        members_arr[slide_id] = np.array(sorted(members), dtype=np.int64)

    return NeighborIndex(similar, members_arr, slide_of)


def sample_pair(index: NeighborIndex, patch: int,
                rng: np.random.Generator) -> tuple:
    """Draw one similar and one dissimilar patch id, uniformly and
    independently."""
    sim = index.similar_ids(patch)
    if len(sim) == 0:
        raise IsolatedPatchError(f"patch {patch} has no similar neighbor")
    dis = index.dissimilar_ids(patch)
    if len(dis) == 0:
        # everything on the slide is within the radius: no contrastable
        # counterpart exists, so the patch is isolated for sampling purposes
        raise IsolatedPatchError(f"patch {patch} has no dissimilar patch")
    p_plus = int(sim[rng.integers(len(sim))])
    p_minus = int(dis[rng.integers(len(dis))])
    return p_plus, p_minus
