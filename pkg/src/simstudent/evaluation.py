"""Patch-level DSC, slide stitching, lesion candidates, and FROC scoring.

Stitching places one probability per non-overlapping patch cell. Lesion
candidates are 8-connected components of cells at or above the base
threshold, scored by their mean probability. The FROC curve sweeps the
unique candidate confidences from high to low; a candidate is a true
positive when its cells intersect a ground-truth lesion (a lesion is
credited once) and a false positive when it hits no lesion at all. The final
score averages sensitivity at 0.25, 0.5, 1, 2, 4, and 8 false positives per
slide, reading each rate off the curve by step interpolation.
"""

import csv
import json
from dataclasses import dataclass

import numpy as np

from .util import connected_components

FROC_RATES = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0)


@dataclass
class SlidePredictionMask:
    slide_id: str
    grid_shape: tuple
    probs: dict                   # (row, col) -> cancer probability

    def __post_init__(self):
        for cell, p in self.probs.items():
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"probability out of range at {cell}: {p}")
            if not (0 <= cell[0] < self.grid_shape[0]
                    and 0 <= cell[1] < self.grid_shape[1]):
                raise ValueError(f"cell {cell} outside grid {self.grid_shape}")

    def to_array(self) -> np.ndarray:
        """Dense grid with NaN at absent (non-tissue) cells."""
        arr = np.full(self.grid_shape, np.nan)
        for (r, c), p in self.probs.items():
            arr[r, c] = p
        return arr


@dataclass
class Candidate:
    confidence: float
    cells: frozenset


@dataclass
class FrocCurve:
    points: list                  # (threshold, avg_fp_per_slide, sensitivity)
    score: float
    per_rate: dict                # fp rate -> sensitivity

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "avg_fp_per_slide", "sensitivity"])
            for threshold, fp, sens in self.points:
                writer.writerow([repr(threshold), repr(fp), repr(sens)])


@dataclass
class MetricsReport:
    dsc: float
    froc_score: float | None
    froc_per_rate: dict | None
    curve: FrocCurve | None
    per_slide: dict

    def to_json_dict(self) -> dict:
        return {
            "dsc": self.dsc,
            "froc_score": self.froc_score,
            "froc_sensitivities": (
                {str(rate): sens for rate, sens in self.froc_per_rate.items()}
                if self.froc_per_rate is not None else None
            ),
            "per_slide": self.per_slide,
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True, indent=1)


def stitch(patches: list, probs, grid_shape: tuple | None = None
           ) -> SlidePredictionMask:
    """Place per-patch probabilities on one slide's grid.

    `patches` are PatchRecord-like objects from a single slide; duplicates of
    a grid cell are rejected. The grid shape is inferred from the largest
    coordinate unless given.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if len(patches) != len(probs):
        raise ValueError("one probability required per patch")
    slide_ids = {p.slide_id for p in patches}
    if len(slide_ids) > 1:
        raise ValueError("stitch expects patches from a single slide")
    cells = {}
    max_r = max_c = 0
    for p, prob in zip(patches, probs):
        if p.coord in cells:
            raise ValueError(f"duplicate patch coordinate {p.coord}")
        cells[p.coord] = float(prob)
        max_r = max(max_r, p.coord[0])
        max_c = max(max_c, p.coord[1])
    slide_id = slide_ids.pop() if slide_ids else ""
    if grid_shape is None:
        grid_shape = (max_r + 1, max_c + 1)
    return SlidePredictionMask(slide_id=slide_id, grid_shape=grid_shape,
                               probs=cells)


def dsc(pred: set, truth: set) -> float:
    """Dice coefficient in [0, 100], pooled over the given element sets.

    Elements are arbitrary hashables (e.g. (slide_id, cell) pairs). Two empty
    sets score 100 by convention.
    """
    pred = set(pred)
    truth = set(truth)
    if not pred and not truth:
        return 100.0
    tp = len(pred & truth)
    fp = len(pred - truth)
    fn = len(truth - pred)
    return 100.0 * 2 * tp / (2 * tp + fp + fn)


def extract_candidates(mask: SlidePredictionMask,
                       base_threshold: float = 0.5) -> list:
    """Connected components of cells at or above the base threshold.

    Confidence is the component's mean probability; components are ordered by
    their minimum cell for determinism.
    """
    hot = [cell for cell, p in mask.probs.items() if p >= base_threshold]
    out = []
    for comp in connected_components(hot):
        conf = float(np.mean([mask.probs[cell] for cell in comp]))
        out.append(Candidate(confidence=conf, cells=frozenset(comp)))
    return out


def froc(candidates_per_slide: dict, lesions_per_slide: dict) -> FrocCurve:
    """Free-response ROC over all slides.

    candidates_per_slide: slide_id -> list of Candidate (possibly empty);
    every evaluated slide must appear. lesions_per_slide: slide_id -> list of
    ground-truth lesion cell sets.
    """
    n_slides = len(candidates_per_slide)
    lesions = {
        sid: [frozenset(cells) for cells in lesions_per_slide.get(sid, [])]
        for sid in candidates_per_slide
    }
    total_lesions = sum(len(v) for v in lesions.values())
    if total_lesions == 0:
        raise ValueError("FROC requires at least one ground-truth lesion")

    flat = []
    for sid, cands in candidates_per_slide.items():
        for cand in cands:
            hits = frozenset(
                i for i, les in enumerate(lesions[sid]) if cand.cells & les
            )
            flat.append((cand.confidence, sid, hits))

    thresholds = sorted({conf for conf, _, _ in flat}, reverse=True)
    points = []
    per_rate = {}
    for t in thresholds:
        detected = set()
        fp = 0
        for conf, sid, hits in flat:
            if conf < t:
                continue
            if hits:
                detected.update((sid, i) for i in hits)
            else:
                fp += 1
        sens = len(detected) / total_lesions
        points.append((t, fp / n_slides, sens))

    for rate in FROC_RATES:
        best = 0.0
        for _, fp_rate, sens in points:
            if fp_rate <= rate:
                best = sens        # points are ordered by decreasing threshold
        per_rate[rate] = best
    score = float(np.mean([per_rate[r] for r in FROC_RATES]))
    return FrocCurve(points=points, score=score, per_rate=per_rate)


def write_mask_pgm(mask: SlidePredictionMask, path) -> None:
    """Portable graymap of a stitched mask (probability x 255, rounded;
    absent cells are 0)."""
    h, w = mask.grid_shape
    img = np.zeros((h, w), dtype=np.uint8)
    for (r, c), p in mask.probs.items():
        img[r, c] = int(round(p * 255))
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
