import numpy as np
import pytest

from simstudent import dataio
from simstudent.dataio import Dataset, SlideMeta
from simstudent.slidegen import NoiseSpec, SlideConfig
from simstudent.util import tune_performance

tune_performance()


def toy_dataset(labels_by_slide, pixel_fn, spacing_mm=1.0, lesions=None,
                splits=None):
    """Hand-built Dataset: labels_by_slide maps slide_id -> {(r, c): (noisy,
    clean)}; pixel_fn(slide_id, coord, clean) -> (32, 32, 3) float array."""
    from simstudent.slidegen import PatchRecord

    patches = []
    slides = {}
    for slide_id, cells in labels_by_slide.items():
        max_r = max(c[0] for c in cells) + 1
        max_c = max(c[1] for c in cells) + 1
        slides[slide_id] = SlideMeta(
            slide_id=slide_id,
            grid_shape=(max_r, max_c),
            spacing_mm=spacing_mm,
            split=(splits or {}).get(slide_id, "train"),
            clean_lesions=(lesions or {}).get(slide_id, []),
            partial_lesion_ids=[],
            degenerate_histogram=False,
        )
        for coord in sorted(cells):
            noisy, clean = cells[coord]
            patches.append(PatchRecord(
                patch_id=f"{slide_id}:{coord[0]}-{coord[1]}",
                slide_id=slide_id,
                coord=coord,
                pixels=np.asarray(pixel_fn(slide_id, coord, clean),
                                  dtype=np.float32),
                noisy_label=noisy,
                clean_label=clean,
                foreground_ratio=1.0,
            ))
    return dataio._dataset_from_patches(patches, slides)


@pytest.fixture(scope="session")
def small_generated_dataset():
    """A small but realistic generated dataset shared across tests."""
    ds, stats = dataio.build_dataset(
        slide_count=8,
        slide_cfg=SlideConfig(grid_shape=(12, 12), lesion_count_range=(1, 2),
                              lesion_radius_range=(1.0, 2.5)),
        noise=NoiseSpec("k_rand", 1),
        split_fractions={"train": 0.5, "val": 0.25, "test": 0.25},
        master_seed=4242,
    )
    return ds, stats
