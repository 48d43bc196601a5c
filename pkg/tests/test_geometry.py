import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simstudent.geometry import (
    IsolatedPatchError,
    PatchCoord,
    build_neighbor_index,
    sample_pair,
)


def brute_force_similar(coords, radius_mm):
    """O(N^2) oracle partition."""
    out = []
    for i, a in enumerate(coords):
        sim = []
        for j, b in enumerate(coords):
            if i == j or a.slide_id != b.slide_id:
                continue
            d = a.spacing_mm * math.sqrt(
                (a.row - b.row) ** 2 + (a.col - b.col) ** 2
            )
            if d <= radius_mm:
                sim.append(j)
        out.append(sorted(sim))
    return out


def grid_coords(slide_id, h, w, spacing):
    return [PatchCoord(slide_id, r, c, spacing)
            for r in range(h) for c in range(w)]


class TestBuildIndex:
    def test_hand_distance_example(self):
        coords = [PatchCoord("s", 0, 0, 0.218), PatchCoord("s", 0, 3, 0.218)]
        index = build_neighbor_index(coords, 1.0)
        # distance 3 * 0.218 = 0.654 mm <= 1 mm
        assert list(index.similar_ids(0)) == [1]
        assert list(index.similar_ids(1)) == [0]

    def test_boundary_distance_is_similar(self):
        coords = [PatchCoord("s", 0, 0, 0.25), PatchCoord("s", 0, 4, 0.25),
                  PatchCoord("s", 0, 9, 0.25)]
        index = build_neighbor_index(coords, 1.0)
        # exactly 4 * 0.25 = 1.0 mm: boundary is inclusive
        assert 1 in index.similar_ids(0)
        assert 2 not in index.similar_ids(0)

    def test_matches_brute_force_random(self):
        rng = np.random.default_rng(0)
        for trial in range(5):
            coords = []
            for slide in range(3):
                spacing = rng.uniform(0.1, 0.5)
                n = int(rng.integers(20, 180))
                taken = set()
                while len(taken) < n:
                    taken.add((int(rng.integers(0, 30)),
                               int(rng.integers(0, 30))))
                coords.extend(
                    PatchCoord(f"s{slide}", r, c, spacing) for r, c in taken
                )
            radius = rng.uniform(0.5, 3.0)
            index = build_neighbor_index(coords, radius)
            oracle = brute_force_similar(coords, radius)
            for i in range(len(coords)):
                assert list(index.similar_ids(i)) == oracle[i]

    def test_partition_exhaustive_and_disjoint(self):
        coords = grid_coords("s", 8, 8, 0.3)
        index = build_neighbor_index(coords, 1.0)
        n = len(coords)
        for i in range(n):
            sim = set(index.similar_ids(i).tolist())
            dis = set(index.dissimilar_ids(i).tolist())
            assert sim.isdisjoint(dis)
            assert i not in sim and i not in dis
            assert sim | dis == set(range(n)) - {i}
            assert len(sim) + len(dis) == n - 1

    def test_symmetry(self):
        coords = grid_coords("s", 7, 9, 0.21)
        index = build_neighbor_index(coords, 1.0)
        for i in range(len(coords)):
            for j in index.similar_ids(i):
                assert i in index.similar_ids(int(j))

    def test_no_cross_slide_neighbors(self):
        coords = (grid_coords("a", 4, 4, 0.2)
                  + grid_coords("b", 4, 4, 0.2))
        index = build_neighbor_index(coords, 10.0)
        for i in range(16):
            assert all(j < 16 for j in index.similar_ids(i))
            assert all(j < 16 for j in index.dissimilar_ids(i))
        for i in range(16, 32):
            assert all(j >= 16 for j in index.similar_ids(i))

    def test_rejects_bad_radius(self):
        coords = grid_coords("s", 2, 2, 0.2)
        for radius in (0.0, -1.0):
            with pytest.raises(ValueError):
                build_neighbor_index(coords, radius)

    def test_rejects_mixed_spacing(self):
        coords = [PatchCoord("s", 0, 0, 0.2), PatchCoord("s", 0, 1, 0.3)]
        with pytest.raises(ValueError):
            build_neighbor_index(coords, 1.0)

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_partition_property_random_slides(self, seed):
        rng = np.random.default_rng(seed)
        h, w = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        spacing = float(rng.uniform(0.05, 0.6))
        radius = float(rng.uniform(0.2, 2.0))
        coords = grid_coords("s", h, w, spacing)
        index = build_neighbor_index(coords, radius)
        oracle = brute_force_similar(coords, radius)
        for i in range(len(coords)):
            assert list(index.similar_ids(i)) == oracle[i]


class TestSamplePair:
    def setup_method(self):
        # (0,0) has exactly one similar patch (0,1) and two far patches
        self.coords = [
            PatchCoord("s", 0, 0, 1.0), PatchCoord("s", 0, 1, 1.0),
            PatchCoord("s", 9, 0, 1.0), PatchCoord("s", 9, 9, 1.0),
        ]
        self.index = build_neighbor_index(self.coords, 1.0)

    def test_forced_single_similar(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p_plus, p_minus = sample_pair(self.index, 0, rng)
            assert p_plus == 1
            assert p_minus in (2, 3)

    def test_sampled_pairs_satisfy_predicate(self):
        coords = grid_coords("s", 10, 10, 0.3)
        index = build_neighbor_index(coords, 1.0)
        oracle = brute_force_similar(coords, 1.0)
        rng = np.random.default_rng(1)
        for _ in range(300):
            i = int(rng.integers(len(coords)))
            p_plus, p_minus = sample_pair(index, i, rng)
            assert p_plus in oracle[i]
            assert p_minus not in oracle[i] and p_minus != i

    def test_uniform_frequencies(self):
        # patch at center of a cross of 4 similar neighbors
        coords = [PatchCoord("s", 5, 5, 1.0),
                  PatchCoord("s", 4, 5, 1.0), PatchCoord("s", 6, 5, 1.0),
                  PatchCoord("s", 5, 4, 1.0), PatchCoord("s", 5, 6, 1.0),
                  PatchCoord("s", 0, 0, 1.0)]
        index = build_neighbor_index(coords, 1.0)
        rng = np.random.default_rng(2)
        counts = np.zeros(6)
        n = 100_000
        for _ in range(n):
            p_plus, _ = sample_pair(index, 0, rng)
            counts[p_plus] += 1
        freqs = counts[1:5] / n
        np.testing.assert_allclose(freqs, 0.25, atol=0.01)

    def test_isolated_patch_raises(self):
        coords = [PatchCoord("s", 0, 0, 1.0), PatchCoord("s", 50, 50, 1.0)]
        index = build_neighbor_index(coords, 1.0)
        with pytest.raises(IsolatedPatchError):
            sample_pair(index, 0, np.random.default_rng(0))

    def test_reproducible_from_state(self):
        draws_a = [sample_pair(self.index, 0, np.random.default_rng(7))
                   for _ in range(1)]
        draws_b = [sample_pair(self.index, 0, np.random.default_rng(7))
                   for _ in range(1)]
        assert draws_a == draws_b
