"""Synthetic slide generation, partial-label noise injection, and patch
extraction.

A slide is an H x W grid of cells, each rendered as a 32x32x3 raster in
[0, 1]. Tissue forms a wobbled elliptical region on a near-white background;
lesions are rasterized discs planted inside the tissue, separated so each
stays its own 8-connected component. Benign tissue is a smooth stained
texture; lesion cells additionally carry a dark speckle pattern whose density
and tint vary per lesion, so lesions are mutually distinguishable while all
sharing the class-defining texture.

Label noise follows the partial-annotation protocol: keep the k largest
(k_top) or k random (k_rand) lesions per slide and relabel everything else
benign. Patch labels come from lesion overlap with a 50 percent rule; the
Otsu-thresholded foreground mask decides which cells become patches at all.
"""

from dataclasses import dataclass, field

import numpy as np

from .geometry import DEFAULT_SPACING_MM
from .util import connected_components

PATCH_SIZE = 32
BENIGN = 0
CANCER = 1

NOISE_MODES = ("k_top", "k_rand", "complete")


@dataclass(frozen=True)
class NoiseSpec:
    mode: str
    k: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in NOISE_MODES:
            raise ValueError(f"noise mode must be one of {NOISE_MODES}")
        if self.mode != "complete" and self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass(frozen=True)
class SlideConfig:
    grid_shape: tuple = (16, 16)
    lesion_count_range: tuple = (1, 3)
    lesion_radius_range: tuple = (1.0, 4.0)
    pixel_spacing_mm: float = DEFAULT_SPACING_MM
    tissue_axis_range: tuple = (0.50, 0.56)   # semi-axes as fraction of grid
    tissue_wobble: float = 0.10
    benign_color: tuple = (0.78, 0.58, 0.72)
    cancer_color: tuple = (0.70, 0.49, 0.67)
    color_noise: float = 0.035
    field_strength: float = 0.07              # low-frequency shading amplitude
    stain_shift: float = 0.06                 # per-slide channel scale range
    speckle_density_range: tuple = (0.12, 0.38)
    speckle_darkness: float = 0.45
    lesion_tint: float = 0.05
    background_intensity: tuple = (0.93, 0.98)

    def __post_init__(self):
        h, w = self.grid_shape
        if h < 8 or w < 8:
            raise ValueError("grid dimensions must be at least 8x8")
        if self.lesion_count_range[0] < 0:
            raise ValueError("lesion count cannot be negative")
        if self.lesion_radius_range[0] <= 0.7:
            raise ValueError("lesion radius must exceed 0.7 cells")
        if self.pixel_spacing_mm <= 0:
            raise ValueError("pixel_spacing_mm must be positive")


@dataclass
class Lesion:
    lesion_id: int
    cells: frozenset
    speckle_density: float = 0.0
    tint: tuple = (0.0, 0.0, 0.0)

    @property
    def area_cells(self) -> int:
        return len(self.cells)


@dataclass
class SyntheticSlide:
    slide_id: str
    grid: np.ndarray                  # (H, W, 32, 32, 3) float32 in [0, 1]
    pixel_spacing_mm: float
    clean_lesions: list
    partial_lesions: list
    tissue_mask: np.ndarray           # generator ground truth, bool (H, W)
    foreground_mask: np.ndarray = None
    foreground_fraction: np.ndarray = None
    degenerate_histogram: bool = False

    @property
    def grid_shape(self) -> tuple:
        return self.grid.shape[:2]


@dataclass
class PatchRecord:
    patch_id: str
    slide_id: str
    coord: tuple
    pixels: np.ndarray               # (32, 32, 3) float32
    noisy_label: int
    clean_label: int
    foreground_ratio: float


@dataclass
class ForegroundResult:
    mask: np.ndarray
    fraction: np.ndarray
    threshold: float
    degenerate: bool


def _tissue_mask(cfg: SlideConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = cfg.grid_shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ay = h * rng.uniform(*cfg.tissue_axis_range)
    ax = w * rng.uniform(*cfg.tissue_axis_range)
    phases = rng.uniform(0.0, 2 * np.pi, size=3)
    amps = rng.uniform(0.3, 1.0, size=3) * cfg.tissue_wobble
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ang = np.arctan2(rows - cy, cols - cx)
    wobble = sum(a * np.sin((k + 1) * ang + p)
                 for k, (a, p) in enumerate(zip(amps, phases)))
    radial = np.sqrt(((rows - cy) / ay) ** 2 + ((cols - cx) / ax) ** 2)
    mask = radial <= 1.0 + wobble
    # scans keep a white margin: the border ring stays background, which
    # guarantees the intensity histogram is bimodal
    mask[0, :] = mask[-1, :] = False
    mask[:, 0] = mask[:, -1] = False
    return mask


def _disc_cells(center, radius, grid_shape):
    h, w = grid_shape
    cy, cx = center
    r_int = int(np.ceil(radius))
    cells = set()
    for r in range(max(0, int(cy) - r_int - 1), min(h, int(cy) + r_int + 2)):
        for c in range(max(0, int(cx) - r_int - 1), min(w, int(cx) + r_int + 2)):
            if (r - cy) ** 2 + (c - cx) ** 2 <= radius * radius:
                cells.add((r, c))
    return cells


def _cheb_separated(cells, occupied, gap=2):
    for (r, c) in cells:
        for dr in range(-gap + 1, gap):
            for dc in range(-gap + 1, gap):
                if (r + dr, c + dc) in occupied:
                    return False
    return True


def _place_lesions(cfg: SlideConfig, tissue: np.ndarray,
                   rng: np.random.Generator) -> list:
    lo, hi = cfg.lesion_count_range
    n = int(rng.integers(lo, hi + 1))
    if n == 0:
        return []
    r_lo, r_hi = cfg.lesion_radius_range
    if n == 1:
        radii = np.array([rng.uniform(r_lo, r_hi)])
    else:
        # Pin the extremes so rasterized areas span at least 4:1.
        radii = np.concatenate([[r_lo, r_hi], rng.uniform(r_lo, r_hi, n - 2)])
        radii = radii[rng.permutation(n)]

    tissue_cells = np.argwhere(tissue)
    for _ in range(20):
        lesions = _try_place(cfg, tissue, tissue_cells, radii, rng)
        if lesions is None:
            continue
        areas = [les.area_cells for les in lesions]
        if n < 2 or max(areas) >= 4 * min(areas):
            return lesions
    raise ValueError(
        f"grid {cfg.grid_shape} cannot host {n} separated lesions with a 4:1 "
        f"area span at radii {cfg.lesion_radius_range}"
    )


def _try_place(cfg, tissue, tissue_cells, radii, rng):
    occupied = set()
    lesions = []
    for i, radius in enumerate(radii):
        placed = False
        for _ in range(400):
            base = tissue_cells[rng.integers(len(tissue_cells))]
            center = (base[0] + rng.uniform(-0.5, 0.5),
                      base[1] + rng.uniform(-0.5, 0.5))
            cells = _disc_cells(center, radius, cfg.grid_shape)
            if not cells:
                continue
            if not all(tissue[r, c] for r, c in cells):
                continue
            if not _cheb_separated(cells, occupied):
                continue
            lesions.append(Lesion(
                lesion_id=i,
                cells=frozenset(cells),
                speckle_density=float(rng.uniform(*cfg.speckle_density_range)),
                tint=tuple(rng.uniform(-cfg.lesion_tint, cfg.lesion_tint, 3)),
            ))
            occupied.update(cells)
            placed = True
            break
        if not placed:
            return None
    return lesions


def _bilinear_field(lattice: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    lh, lw = lattice.shape
    ys = np.linspace(0, lh - 1, out_h)
    xs = np.linspace(0, lw - 1, out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, lh - 1)
    x1 = np.minimum(x0 + 1, lw - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = lattice[np.ix_(y0, x0)] * (1 - fx) + lattice[np.ix_(y0, x1)] * fx
    bot = lattice[np.ix_(y1, x0)] * (1 - fx) + lattice[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def generate_slide(seed: int, cfg: SlideConfig,
                   slide_id: str | None = None) -> SyntheticSlide:
    """Deterministically render one synthetic slide for a (seed, cfg) pair."""
    rng = np.random.default_rng(seed)
    h, w = cfg.grid_shape
    if slide_id is None:
        slide_id = f"slide{seed:08x}"

    tissue = _tissue_mask(cfg, rng)
    lesions = _place_lesions(cfg, tissue, rng)
    lesion_of = {}
    for lesion in lesions:
        for cell in lesion.cells:
            lesion_of[cell] = lesion

    stain = 1.0 + rng.uniform(-cfg.stain_shift, cfg.stain_shift, size=3)
    lattice = rng.normal(0.0, 1.0, size=(h // 4 + 2, w // 4 + 2))
    shading = 1.0 + cfg.field_strength * _bilinear_field(
        lattice, h * PATCH_SIZE, w * PATCH_SIZE
    )
    shading = np.clip(shading, 0.75, 1.25)

    benign_base = np.asarray(cfg.benign_color) * stain
    grid = np.empty((h, w, PATCH_SIZE, PATCH_SIZE, 3), dtype=np.float32)
    for r in range(h):
        for c in range(w):
            cell_shade = shading[
                r * PATCH_SIZE : (r + 1) * PATCH_SIZE,
                c * PATCH_SIZE : (c + 1) * PATCH_SIZE,
            ][..., None]
            if not tissue[r, c]:
                gray = rng.uniform(*cfg.background_intensity,
                                   size=(PATCH_SIZE, PATCH_SIZE, 1))
                jitter = rng.normal(0.0, 0.004, size=(PATCH_SIZE, PATCH_SIZE, 3))
                cell = np.clip(gray + jitter, 0.905, 1.0)
            else:
                lesion = lesion_of.get((r, c))
                if lesion is None:
                    base = benign_base
                else:
                    base = (np.asarray(cfg.cancer_color) + np.asarray(lesion.tint)) * stain
                noise = rng.normal(0.0, cfg.color_noise,
                                   size=(PATCH_SIZE, PATCH_SIZE, 3))
                cell = base[None, None, :] * cell_shade + noise
                if lesion is not None:
                    blocks = rng.random((PATCH_SIZE // 2, PATCH_SIZE // 2))
                    speckle = np.repeat(
                        np.repeat(blocks < lesion.speckle_density, 2, axis=0),
                        2, axis=1,
                    )
                    cell = cell * (1.0 - (1.0 - cfg.speckle_darkness)
                                   * speckle[..., None])
                cell = np.clip(cell, 0.0, 1.0)
            grid[r, c] = cell

    slide = SyntheticSlide(
        slide_id=slide_id,
        grid=grid,
        pixel_spacing_mm=cfg.pixel_spacing_mm,
        clean_lesions=lesions,
        partial_lesions=list(lesions),
        tissue_mask=tissue,
    )
    fg = compute_foreground_mask(slide)
    slide.foreground_mask = fg.mask
    slide.foreground_fraction = fg.fraction
    slide.degenerate_histogram = fg.degenerate
    return slide


def compute_foreground_mask(slide: SyntheticSlide) -> ForegroundResult:
    """Otsu-threshold per-cell mean intensities to split tissue from
    background.

    The 256-bin histogram of per-cell mean grayscale values is swept for the
    threshold maximizing between-class variance (ties: lowest threshold). A
    cell is foreground when at least half of its pixels fall below the
    threshold. A single-bin histogram is flagged degenerate and everything is
    declared foreground.
    """
    gray = slide.grid.astype(np.float64).mean(axis=4)      # (H, W, 32, 32)
    cell_means = gray.mean(axis=(2, 3))
    bins = np.minimum((cell_means * 256).astype(int), 255)
    hist = np.bincount(bins.ravel(), minlength=256).astype(np.float64)

    total = hist.sum()
    cum = np.cumsum(hist)
    cum_mean = np.cumsum(hist * np.arange(256))
    grand_mean = cum_mean[-1]
    w0 = cum[:-1]
    w1 = total - w0
    valid = (w0 > 0) & (w1 > 0)
    if not valid.any():
        full = np.ones(slide.grid_shape, dtype=bool)
        return ForegroundResult(mask=full,
                                fraction=np.ones(slide.grid_shape),
                                threshold=1.0, degenerate=True)
    mu0 = np.where(valid, cum_mean[:-1] / np.where(w0 == 0, 1, w0), 0.0)
    mu1 = np.where(valid, (grand_mean - cum_mean[:-1]) / np.where(w1 == 0, 1, w1),
                   0.0)
    between = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, -1.0)
    t_idx = int(np.argmax(between))          # argmax takes the lowest tie
    threshold = (t_idx + 1) / 256.0

    fraction = (gray < threshold).mean(axis=(2, 3))
    return ForegroundResult(mask=fraction >= 0.5, fraction=fraction,
                            threshold=threshold, degenerate=False)


def inject_partial_labels(slide: SyntheticSlide, spec: NoiseSpec) -> SyntheticSlide:
    """Reduce clean_lesions to the retained subset per the noise protocol."""
    lesions = slide.clean_lesions
    if spec.mode == "complete" or spec.k >= len(lesions):
        slide.partial_lesions = list(lesions)
        return slide
    if spec.mode == "k_top":
        ranked = sorted(lesions, key=lambda les: (-les.area_cells, les.lesion_id))
        keep = {les.lesion_id for les in ranked[: spec.k]}
    else:
        rng = np.random.default_rng(spec.seed)
        chosen = rng.choice(len(lesions), size=spec.k, replace=False)
        keep = {lesions[int(i)].lesion_id for i in chosen}
    slide.partial_lesions = [les for les in lesions if les.lesion_id in keep]
    return slide


def _overlap_fraction(cell, lesion_cells) -> float:
    # Lesions are cell-aligned, so overlap is all-or-nothing; the fraction
    # form keeps the 50-percent labeling rule explicit.
    return 1.0 if cell in lesion_cells else 0.0


def extract_patches(slide: SyntheticSlide) -> list:
    """One PatchRecord per foreground cell, labeled by lesion overlap.

    A patch is cancer when its overlap with retained lesions exceeds half the
    cell, benign when fully outside; anything in between is excluded from
    training. The clean label applies the same rule against all lesions.
    """
    if slide.foreground_mask is None:
        raise ValueError("foreground mask not computed")
    clean_cells = set()
    for lesion in slide.clean_lesions:
        clean_cells |= lesion.cells
    partial_cells = set()
    for lesion in slide.partial_lesions:
        partial_cells |= lesion.cells

    patches = []
    h, w = slide.grid_shape
    for r in range(h):
        for c in range(w):
            if not slide.foreground_mask[r, c]:
                continue
            noisy_overlap = _overlap_fraction((r, c), partial_cells)
            clean_overlap = _overlap_fraction((r, c), clean_cells)
            if 0.0 < noisy_overlap <= 0.5 or 0.0 < clean_overlap <= 0.5:
                continue
            patches.append(PatchRecord(
                patch_id=f"{slide.slide_id}:r{r:03d}c{c:03d}",
                slide_id=slide.slide_id,
                coord=(r, c),
                pixels=slide.grid[r, c],
                noisy_label=CANCER if noisy_overlap > 0.5 else BENIGN,
                clean_label=CANCER if clean_overlap > 0.5 else BENIGN,
                foreground_ratio=float(slide.foreground_fraction[r, c]),
            ))
    return patches


def dataset_stats(patches: list) -> dict:
    """Label-noise statistics over a patch collection.

    The correct-cancer ratio divides cancer-labeled patches by truly
    cancerous ones (noise only ever flips cancer to benign). Lesion counts
    are recovered as 8-connected components of cancer-labeled cells per
    slide, i.e. the retained lesions.
    """
    benign = sum(1 for p in patches if p.noisy_label == BENIGN)
    cancer = sum(1 for p in patches if p.noisy_label == CANCER)
    clean_cancer = sum(1 for p in patches if p.clean_label == CANCER)

    by_slide = {}
    for p in patches:
        if p.noisy_label == CANCER:
            by_slide.setdefault(p.slide_id, set()).add(p.coord)
    lesion_areas = []
    for cells in by_slide.values():
        lesion_areas.extend(len(comp) for comp in connected_components(cells))

    if clean_cancer == 0:
        correct_ratio = None
        noisiness = None
    else:
        correct_ratio = cancer / clean_cancer
        noisiness = 1.0 - correct_ratio
    return {
        "benign_patches": benign,
        "cancer_patches": cancer,
        "clean_cancer_patches": clean_cancer,
        "correct_cancer_ratio": correct_ratio,
        "noisiness_ratio": noisiness,
        "lesion_count": len(lesion_areas),
        "mean_lesion_area_cells": (
            float(np.mean(lesion_areas)) if lesion_areas else None
        ),
    }
