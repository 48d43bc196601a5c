import json
import struct

import numpy as np
import pytest

from simstudent import dataio
from simstudent.dataio import (
    assign_splits,
    build_dataset,
    load_dataset,
    read_payload,
    save_dataset,
    write_payload,
)
from simstudent.slidegen import NoiseSpec, SlideConfig

CFG = SlideConfig(grid_shape=(10, 10), lesion_count_range=(1, 2),
                  lesion_radius_range=(1.0, 2.2))
FRACTIONS = {"train": 0.5, "val": 0.25, "test": 0.25}


class TestPayload:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        pixels = rng.random((7, 32, 32, 3)).astype(np.float32)
        path = tmp_path / "p.sspx"
        offsets = write_payload(path, pixels)
        back = read_payload(path)
        np.testing.assert_array_equal(back, pixels)
        assert offsets[0] == 16
        assert offsets[1] - offsets[0] == 32 * 32 * 3 * 4

    def test_header(self, tmp_path):
        path = tmp_path / "p.sspx"
        write_payload(path, np.zeros((3, 32, 32, 3), dtype=np.float32))
        blob = path.read_bytes()
        magic, version, count = struct.unpack_from("<4sIQ", blob, 0)
        assert magic == b"SSPX" and version == 1 and count == 3

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.sspx"
        path.write_bytes(b"XXXX" + b"\x00" * 12)
        with pytest.raises(ValueError):
            read_payload(path)

    def test_offset_points_at_patch(self, tmp_path):
        rng = np.random.default_rng(1)
        pixels = rng.random((4, 32, 32, 3)).astype(np.float32)
        path = tmp_path / "p.sspx"
        offsets = write_payload(path, pixels)
        blob = path.read_bytes()
        got = np.frombuffer(blob, dtype="<f4", count=32 * 32 * 3,
                            offset=offsets[2]).reshape(32, 32, 3)
        np.testing.assert_array_equal(got, pixels[2])


class TestBuildDataset:
    def test_split_assignment_fractions(self):
        labels = assign_splits(20, FRACTIONS, master_seed=3)
        assert labels.count("train") == 10
        assert labels.count("val") == 5
        assert labels.count("test") == 5

    def test_test_slides_keep_complete_labels(self):
        ds, _ = build_dataset(8, CFG, NoiseSpec("k_rand", 1), FRACTIONS,
                              master_seed=5)
        test_idx = ds.split_indices("test")
        np.testing.assert_array_equal(ds.noisy_labels[test_idx],
                                      ds.clean_labels[test_idx])
        stats_clean = (ds.noisy_labels[ds.split_indices("train")]
                       != ds.clean_labels[ds.split_indices("train")])
        # train split carries at least some injected noise in this fixture
        assert stats_clean.sum() > 0

    def test_deterministic(self):
        a, _ = build_dataset(6, CFG, NoiseSpec("k_rand", 1), FRACTIONS,
                             master_seed=7)
        b, _ = build_dataset(6, CFG, NoiseSpec("k_rand", 1), FRACTIONS,
                            master_seed=7)
        assert a.patch_ids == b.patch_ids
        np.testing.assert_array_equal(a.pixels, b.pixels)
        np.testing.assert_array_equal(a.noisy_labels, b.noisy_labels)

    def test_worker_count_invariance(self, monkeypatch):
        monkeypatch.setenv("SIMSTUDENT_THREADS", "1")
        a, _ = build_dataset(6, CFG, NoiseSpec("k_top", 1), FRACTIONS,
                             master_seed=9)
        monkeypatch.setenv("SIMSTUDENT_THREADS", "3")
        b, _ = build_dataset(6, CFG, NoiseSpec("k_top", 1), FRACTIONS,
                             master_seed=9)
        assert a.patch_ids == b.patch_ids
        np.testing.assert_array_equal(a.pixels, b.pixels)

    def test_stats_reported_per_split(self):
        _, stats = build_dataset(8, CFG, NoiseSpec("k_rand", 1), FRACTIONS,
                                 master_seed=11)
        assert set(stats) == {"train", "val", "test"}
        if stats["test"]["clean_cancer_patches"]:
            assert stats["test"]["noisiness_ratio"] == 0.0


class TestSaveLoad:
    def test_round_trip(self, tmp_path):
        ds, stats = build_dataset(6, CFG, NoiseSpec("k_rand", 1), FRACTIONS,
                                  master_seed=13)
        save_dataset(tmp_path, ds, stats, config_echo={"note": 1})
        back = load_dataset(tmp_path)
        assert back.patch_ids == ds.patch_ids
        assert back.slide_ids == ds.slide_ids
        np.testing.assert_array_equal(back.pixels, ds.pixels)
        np.testing.assert_array_equal(back.coords, ds.coords)
        np.testing.assert_array_equal(back.noisy_labels, ds.noisy_labels)
        np.testing.assert_array_equal(back.clean_labels, ds.clean_labels)
        for split in ("train", "val", "test"):
            np.testing.assert_array_equal(back.splits[split],
                                          ds.splits[split])
        for sid, meta in ds.slides.items():
            got = back.slides[sid]
            assert got.grid_shape == meta.grid_shape
            assert got.split == meta.split
            assert got.clean_lesions == [
                (lid, [tuple(c) for c in cells])
                for lid, cells in meta.clean_lesions
            ]

    def test_manifest_schema(self, tmp_path):
        ds, stats = build_dataset(4, CFG, NoiseSpec("complete", 1), FRACTIONS,
                                  master_seed=15)
        save_dataset(tmp_path, ds, stats)
        with open(tmp_path / "manifest.jsonl") as fh:
            first = json.loads(fh.readline())
        assert set(first) == {"patch_id", "slide_id", "coord", "noisy_label",
                              "clean_label", "foreground_ratio", "offset"}

    def test_stats_file_written(self, tmp_path):
        ds, stats = build_dataset(4, CFG, NoiseSpec("k_top", 1), FRACTIONS,
                                  master_seed=17)
        save_dataset(tmp_path, ds, stats)
        doc = json.loads((tmp_path / "stats.json").read_text())
        assert doc == json.loads(json.dumps(stats))

    def test_clean_labels_flagged_eval_only(self, tmp_path):
        ds, stats = build_dataset(4, CFG, NoiseSpec("k_top", 1), FRACTIONS,
                                  master_seed=19)
        save_dataset(tmp_path, ds, stats)
        doc = json.loads((tmp_path / "dataset.json").read_text())
        assert doc["clean_label_usage"] == "evaluation_only"

    def test_missing_clean_labels_detected(self, tmp_path):
        ds, stats = build_dataset(4, CFG, NoiseSpec("k_top", 1), FRACTIONS,
                                  master_seed=21)
        save_dataset(tmp_path, ds, stats)
        lines = (tmp_path / "manifest.jsonl").read_text().splitlines()
        records = [json.loads(l) for l in lines]
        for rec in records:
            rec["clean_label"] = None
        (tmp_path / "manifest.jsonl").write_text(
            "\n".join(json.dumps(r) for r in records) + "\n"
        )
        back = load_dataset(tmp_path)
        assert not back.has_clean_labels(np.arange(back.n_patches))
