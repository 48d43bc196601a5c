"""Dataset assembly and on-disk formats.

A generated dataset directory holds:

  dataset.json   - slide geometry, lesions, split assignment, generator echo
  manifest.jsonl - one record per patch: patch_id, slide_id, coord, labels,
                   foreground_ratio, byte offset into the payload
  patches.sspx   - 16-byte header (magic "SSPX", version, patch count), then
                   each patch as little-endian float32, row-major
                   (row, col, channel), in manifest order
  stats.json     - per-split label-noise statistics

Train and validation slides receive partial labels; test slides keep the
complete ground truth. Slides are generated concurrently (seed mixed per
slide) and merged in slide order, so output is independent of thread count.
"""

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import slidegen
from .slidegen import NoiseSpec, PatchRecord, SlideConfig
from .util import mix_seed, worker_count

PAYLOAD_MAGIC = b"SSPX"
PAYLOAD_VERSION = 1
PATCH_FLOATS = slidegen.PATCH_SIZE * slidegen.PATCH_SIZE * 3
SPLITS = ("train", "val", "test")


@dataclass
class SlideMeta:
    slide_id: str
    grid_shape: tuple
    spacing_mm: float
    split: str
    clean_lesions: list          # [(lesion_id, [cells...])]
    partial_lesion_ids: list
    degenerate_histogram: bool

    def lesion_cell_sets(self) -> list:
        return [set(map(tuple, cells)) for _, cells in self.clean_lesions]


@dataclass
class Dataset:
    patch_ids: list
    slide_ids: list
    coords: np.ndarray            # (N, 2) int
    pixels: np.ndarray            # (N, 32, 32, 3) float32
    noisy_labels: np.ndarray      # (N,) int8
    clean_labels: np.ndarray      # (N,) int8; -1 when unavailable
    foreground_ratio: np.ndarray
    slides: dict                  # slide_id -> SlideMeta
    splits: dict = field(default_factory=dict)  # split -> np.ndarray of indices

    @property
    def n_patches(self) -> int:
        return len(self.patch_ids)

    def split_indices(self, split: str) -> np.ndarray:
        if split == "all":
            return np.arange(self.n_patches)
        if split not in self.splits:
            raise KeyError(f"unknown split {split!r}")
        return self.splits[split]

    def has_clean_labels(self, indices) -> bool:
        return bool(np.all(self.clean_labels[indices] >= 0))


def derive_slide_seed(master_seed: int, slide_index: int) -> int:
    return mix_seed(master_seed, "slide", slide_index)


def assign_splits(n_slides: int, fractions: dict, master_seed: int) -> list:
    """Deterministic shuffled split assignment, one label per slide index."""
    order = np.random.default_rng(mix_seed(master_seed, "splits")).permutation(
        n_slides
    )
    n_train = int(round(fractions["train"] * n_slides))
    n_val = int(round(fractions["val"] * n_slides))
    labels = [""] * n_slides
    for pos, slide in enumerate(order):
        if pos < n_train:
            labels[slide] = "train"
        elif pos < n_train + n_val:
            labels[slide] = "val"
        else:
            labels[slide] = "test"
    return labels


def build_dataset(
    slide_count: int,
    slide_cfg: SlideConfig,
    noise: NoiseSpec,
    split_fractions: dict,
    master_seed: int,
) -> tuple:
    """Generate slides, inject noise on train/val, extract patches.

    Returns (Dataset, stats-per-split dict). Test slides keep complete
    labels, so their noisy labels equal the clean ones.
    """
    split_of = assign_splits(slide_count, split_fractions, master_seed)

    def make(i: int):
        slide = slidegen.generate_slide(
            derive_slide_seed(master_seed, i), slide_cfg, slide_id=f"slide{i:04d}"
        )
        if split_of[i] != "test":
            spec = NoiseSpec(noise.mode, noise.k,
                             seed=mix_seed(master_seed, "noise", i))
            slidegen.inject_partial_labels(slide, spec)
        return slide, slidegen.extract_patches(slide)

    workers = min(worker_count(), slide_count) or 1
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            produced = list(pool.map(make, range(slide_count)))
    else:
        produced = [make(i) for i in range(slide_count)]

    patches: list = []
    slides: dict = {}
    stats_patches: dict = {s: [] for s in SPLITS}
    for i, (slide, slide_patches) in enumerate(produced):
        split = split_of[i]
        slides[slide.slide_id] = SlideMeta(
            slide_id=slide.slide_id,
            grid_shape=slide.grid_shape,
            spacing_mm=slide.pixel_spacing_mm,
            split=split,
            clean_lesions=[
                (les.lesion_id, sorted(les.cells)) for les in slide.clean_lesions
            ],
            partial_lesion_ids=[les.lesion_id for les in slide.partial_lesions],
            degenerate_histogram=slide.degenerate_histogram,
        )
        patches.extend(slide_patches)
        stats_patches[split].extend(slide_patches)

    dataset = _dataset_from_patches(patches, slides)
    stats = {s: slidegen.dataset_stats(stats_patches[s]) for s in SPLITS}
    return dataset, stats


def _dataset_from_patches(patches: list, slides: dict) -> Dataset:
    n = len(patches)
    pixels = np.zeros((n, slidegen.PATCH_SIZE, slidegen.PATCH_SIZE, 3),
                      dtype=np.float32)
    coords = np.zeros((n, 2), dtype=np.int32)
    noisy = np.zeros(n, dtype=np.int8)
    clean = np.zeros(n, dtype=np.int8)
    fg = np.zeros(n, dtype=np.float64)
    for i, p in enumerate(patches):
        pixels[i] = p.pixels
        coords[i] = p.coord
        noisy[i] = p.noisy_label
        clean[i] = p.clean_label
        fg[i] = p.foreground_ratio
    ds = Dataset(
        patch_ids=[p.patch_id for p in patches],
        slide_ids=[p.slide_id for p in patches],
        coords=coords,
        pixels=pixels,
        noisy_labels=noisy,
        clean_labels=clean,
        foreground_ratio=fg,
        slides=slides,
    )
    ds.splits = {
        s: np.array(
            [i for i, sid in enumerate(ds.slide_ids) if slides[sid].split == s],
            dtype=np.int64,
        )
        for s in SPLITS
    }
    return ds


def write_payload(path, pixels: np.ndarray) -> list:
    """Write the SSPX pixel payload; returns the byte offset of each patch."""
    offsets = []
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIQ", PAYLOAD_MAGIC, PAYLOAD_VERSION,
                             pixels.shape[0]))
        pos = 16
        for i in range(pixels.shape[0]):
            offsets.append(pos)
            block = np.ascontiguousarray(pixels[i], dtype="<f4").tobytes()
            fh.write(block)
            pos += len(block)
    return offsets


def read_payload(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, version, count = struct.unpack_from("<4sIQ", blob, 0)
    if magic != PAYLOAD_MAGIC:
        raise ValueError("not a patch payload (bad magic)")
    if version != PAYLOAD_VERSION:
        raise ValueError(f"unsupported payload version {version}")
    data = np.frombuffer(blob, dtype="<f4", offset=16,
                         count=count * PATCH_FLOATS)
    return data.reshape(count, slidegen.PATCH_SIZE, slidegen.PATCH_SIZE, 3).astype(
        np.float32
    )


def save_dataset(out_dir, dataset: Dataset, stats: dict,
                 config_echo: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    offsets = write_payload(out / "patches.sspx", dataset.pixels)

    with open(out / "manifest.jsonl", "w") as fh:
        for i in range(dataset.n_patches):
            rec = {
                "patch_id": dataset.patch_ids[i],
                "slide_id": dataset.slide_ids[i],
                "coord": [int(dataset.coords[i, 0]), int(dataset.coords[i, 1])],
                "noisy_label": int(dataset.noisy_labels[i]),
                "clean_label": (
                    int(dataset.clean_labels[i])
                    if dataset.clean_labels[i] >= 0 else None
                ),
                "foreground_ratio": float(dataset.foreground_ratio[i]),
                "offset": offsets[i],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    doc = {
        "version": 1,
        "clean_label_usage": "evaluation_only",
        "config": config_echo or {},
        "slides": [
            {
                "slide_id": m.slide_id,
                "grid": list(m.grid_shape),
                "spacing_mm": m.spacing_mm,
                "split": m.split,
                "clean_lesions": [
                    {"lesion_id": lid, "cells": [list(c) for c in cells]}
                    for lid, cells in m.clean_lesions
                ],
                "partial_lesion_ids": m.partial_lesion_ids,
                "degenerate_histogram": m.degenerate_histogram,
            }
            for m in dataset.slides.values()
        ],
    }
    with open(out / "dataset.json", "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
    with open(out / "stats.json", "w") as fh:
        json.dump(stats, fh, sort_keys=True, indent=1)


def load_dataset(data_dir) -> Dataset:
    data = Path(data_dir)
    with open(data / "dataset.json") as fh:
        doc = json.load(fh)
    slides = {}
    for s in doc["slides"]:
        slides[s["slide_id"]] = SlideMeta(
            slide_id=s["slide_id"],
            grid_shape=tuple(s["grid"]),
            spacing_mm=s["spacing_mm"],
            split=s["split"],
            clean_lesions=[
                (l["lesion_id"], [tuple(c) for c in l["cells"]])
                for l in s["clean_lesions"]
            ],
            partial_lesion_ids=s["partial_lesion_ids"],
            degenerate_histogram=s["degenerate_histogram"],
        )

    records = []
    with open(data / "manifest.jsonl") as fh:
        for line in fh:
            records.append(json.loads(line))
    pixels = read_payload(data / "patches.sspx")
    if pixels.shape[0] != len(records):
        raise ValueError("payload patch count does not match manifest")

    patches = [
        PatchRecord(
            patch_id=r["patch_id"],
            slide_id=r["slide_id"],
            coord=tuple(r["coord"]),
            pixels=pixels[i],
            noisy_label=r["noisy_label"],
            clean_label=-1 if r["clean_label"] is None else r["clean_label"],
            foreground_ratio=r["foreground_ratio"],
        )
        for i, r in enumerate(records)
    ]
    return _dataset_from_patches(patches, slides)
