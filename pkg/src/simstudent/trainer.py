"""Training loops: the self-similarity algorithm and the baseline
teacher-student variants.

The main loop, per epoch: shuffle; per batch, forward the student on
augmented patches, forward the teacher on independently augmented sampled
neighbor pairs (embeddings only), combine the label and pseudo-label cross
entropies with the similarity loss, Adam-update the student, and EMA the
teacher weights per batch. After the batch loop, a full eval-mode teacher
pass refreshes every patch's prediction ensemble, and the neighbor consensus
rewrites the pseudo-labels used in the next epoch.

Every random decision draws from a stream named by (seed, purpose, epoch),
so disabling a component never shifts the others and training is resumable
at epoch boundaries without serializing generator state.
"""

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import backbone, ensemble, evaluation, losses
from .augment import AugConfig, apply_batch, scale_noisy
from .backbone import ModelParams, OptimizerState
from .dataio import Dataset
from .geometry import IsolatedPatchError, NeighborIndex, PatchCoord, \
    build_neighbor_index, sample_pair
from .util import stream, tune_performance

EVAL_BATCH = 512


class NanLossError(RuntimeError):
    def __init__(self, epoch: int, batch: int, detail: str = ""):
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch} {detail}".rstrip()
        )
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class VariantPreset:
    name: str
    batch_momentum: float         # per-batch teacher weight EMA
    epoch_momentum: float         # per-epoch teacher weight EMA
    prediction_momentum: float    # pseudo-label EMA
    consistency_weight: float
    noisy_augment: bool = False


PRESETS = {
    "mean_teacher": VariantPreset("mean_teacher", 0.999, 1.0, 0.0, 1.0),
    "noisy_student": VariantPreset("noisy_student", 1.0, 0.0, 0.0, 0.0,
                                   noisy_augment=True),
    "pred_ensemble": VariantPreset("pred_ensemble", 0.999, 1.0, 0.9, 0.0),
    "supervised_baseline": VariantPreset("supervised_baseline", 1.0, 1.0, 1.0,
                                         0.0),
}


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 48
    base_lr: float = 1e-4
    weight_decay: float = 4e-5
    dropout: float = 0.2
    seed: int = 2020
    teacher_momentum: float = 0.999
    prediction_momentum: float = 0.9
    temperature: float = 0.07
    similar_radius_mm: float = 1.0
    arch: str = "conv"
    use_similarity_loss: bool = True
    use_pseudo_label: bool = True
    pseudo_label_mode: str = "sim_ensemble"     # or "pred_only"
    sim_ensemble_mode: str = "half_mean"        # or "pool"
    label_loss_weight: float = 1.0
    pseudo_loss_weight: float = 1.0
    similarity_loss_weight: float = 1.0
    student_augment: AugConfig = field(default_factory=AugConfig)
    teacher_augment: AugConfig = field(default_factory=AugConfig)
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("teacher_momentum", "prediction_momentum"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.pseudo_label_mode not in ("sim_ensemble", "pred_only"):
            raise ValueError("pseudo_label_mode must be sim_ensemble|pred_only")


@dataclass
class EpochReport:
    epoch: int
    loss_ce_label: float
    loss_ce_pseudo: float
    loss_similarity: float
    loss_consistency: float
    loss_total: float
    val_dsc: float
    pseudo_drift: float
    learning_rate: float
    isolated_patches: int


@dataclass
class TrainResult:
    history: list
    student: ModelParams
    teacher: ModelParams
    optimizer: OptimizerState
    state: ensemble.EnsembleState | None
    best_epoch: int
    best_val_dsc: float
    best_student: ModelParams


def train_coords(dataset: Dataset, indices) -> list:
    """PatchCoord list for an index set, in that order."""
    return [
        PatchCoord(
            slide_id=dataset.slide_ids[i],
            row=int(dataset.coords[i, 0]),
            col=int(dataset.coords[i, 1]),
            spacing_mm=dataset.slides[dataset.slide_ids[i]].spacing_mm,
        )
        for i in indices
    ]


def build_train_index(dataset: Dataset, radius_mm: float) -> NeighborIndex:
    """Neighbor index over the training split, in split order."""
    return build_neighbor_index(
        train_coords(dataset, dataset.split_indices("train")), radius_mm
    )


def _onehot(labels, n_classes=2):
    out = np.zeros((len(labels), n_classes), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _eval_forward(params: ModelParams, pixels) -> tuple:
    """Eval-mode probabilities and embeddings, batched."""
    probs = np.empty((len(pixels), backbone.N_CLASSES))
    embed = np.empty((len(pixels), backbone.EMBED_DIM))
    for start in range(0, len(pixels), EVAL_BATCH):
        chunk = pixels[start : start + EVAL_BATCH].astype(np.float64)
        out = backbone.forward(params, chunk, train_mode=False)
        probs[start : start + len(chunk)] = out.probs
        embed[start : start + len(chunk)] = out.embedding
    return probs, embed


def _patch_dsc(probs_cancer, labels) -> float:
    pred = {i for i, p in enumerate(probs_cancer) if p >= 0.5}
    truth = {i for i, lab in enumerate(labels) if lab == 1}
    return evaluation.dsc(pred, truth)


def _init_models(cfg: TrainConfig) -> tuple:
    student = backbone.init_params(cfg.arch, seed=stream(cfg.seed, "init").integers(2**63))
    teacher = student.copy()
    opt = backbone.init_optimizer(student, lr=cfg.base_lr,
                                  weight_decay=cfg.weight_decay)
    return student, teacher, opt


class _RunWriter:
    """Per-epoch history flushing and checkpoint files for one run."""

    def __init__(self, out_dir, run_meta, keep_epochs_upto=None):
        self.dir = Path(out_dir) if out_dir is not None else None
        self.meta = dict(run_meta or {})
        self.prior = []
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)
            self.history_path = self.dir / "history.jsonl"
            prior = []
            if keep_epochs_upto is not None and self.history_path.exists():
                with open(self.history_path) as fh:
                    for line in fh:
                        rec = json.loads(line)
                        if rec["epoch"] <= keep_epochs_upto:
                            prior.append(rec)
            with open(self.history_path, "w") as fh:
                for rec in prior:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self.prior = prior

    def append(self, report: EpochReport):
        if self.dir is None:
            return
        with open(self.history_path, "a") as fh:
            fh.write(json.dumps(asdict(report), sort_keys=True) + "\n")

    def checkpoint(self, name, student, teacher, opt, state, epoch,
                   extra=None):
        if self.dir is None:
            return
        meta = dict(self.meta)
        meta["epoch"] = epoch
        meta.update(extra or {})
        backbone.save_checkpoint(
            self.dir / name, student, teacher, opt,
            predictions=None if state is None else state.predictions,
            pseudo_labels=None if state is None else state.pseudo_labels,
            meta=meta,
        )


def train_selfsim(
    dataset: Dataset,
    index: NeighborIndex,
    cfg: TrainConfig,
    out_dir=None,
    run_meta: dict | None = None,
    resume_from: dict | None = None,
) -> TrainResult:
    """Run the self-similarity teacher-student algorithm on the train split.

    `index` must be built over the train split in split order (see
    build_train_index). Pass a loaded checkpoint dict as resume_from to
    continue an interrupted run at the next epoch.
    """
    tune_performance()
    train_idx = dataset.split_indices("train")
    val_idx = dataset.split_indices("val")
    n = len(train_idx)
    if index.n_patches != n:
        raise ValueError("neighbor index does not cover the training split")
    labels = dataset.noisy_labels[train_idx].astype(np.int64)
    y_onehot = _onehot(labels)
    pixels = dataset.pixels[train_idx]

    student_aug = replace(cfg.student_augment, dropout_rate=cfg.dropout)
    run_teacher = cfg.use_similarity_loss or cfg.use_pseudo_label

    if resume_from is not None:
        student = resume_from["student"]
        teacher = resume_from["teacher"]
        opt = resume_from["optimizer"]
        state = ensemble.EnsembleState(resume_from["predictions"],
                                       resume_from["pseudo_labels"])
        start_epoch = resume_from["meta"]["epoch"] + 1
        best_val = resume_from["meta"].get("best_val_dsc", -1.0)
        best_epoch = resume_from["meta"].get("best_epoch", -1)
        best_student = student.copy()
    else:
        student, teacher, opt = _init_models(cfg)
        state = ensemble.init_state(labels)
        start_epoch = 0
        best_val, best_epoch = -1.0, -1
        best_student = student.copy()

    writer = _RunWriter(out_dir, run_meta,
                        keep_epochs_upto=start_epoch - 1 if resume_from else None)
    history = [EpochReport(**rec) for rec in writer.prior]

    for ep in range(start_epoch, cfg.epochs):
        opt.lr = backbone.lr_at(ep, cfg.base_lr)
        shuffle_rng = stream(cfg.seed, "shuffle", ep)
        aug_s_rng = stream(cfg.seed, "aug-student", ep)
        aug_t_rng = stream(cfg.seed, "aug-teacher", ep)
        drop_rng = stream(cfg.seed, "dropout", ep)
        pair_rng = stream(cfg.seed, "pairs", ep)

        perm = shuffle_rng.permutation(n)
        sums = {"label": 0.0, "pseudo": 0.0, "sl": 0.0}
        sl_count = 0
        isolated = 0

        for b_start in range(0, n, cfg.batch_size):
            batch = perm[b_start : b_start + cfg.batch_size]
            bsz = len(batch)
            aug_pix = apply_batch(pixels[batch].astype(np.float64),
                                  student_aug, aug_s_rng)
            out_s = backbone.forward(student, aug_pix,
                                     dropout_rate=student_aug.dropout_rate,
                                     rng=drop_rng, train_mode=True)

            ce_label, _ = losses.cross_entropy(y_onehot[batch], out_s.probs)
            grad_logits = (out_s.probs - y_onehot[batch]) * (
                cfg.label_loss_weight / bsz
            )
            sums["label"] += ce_label.sum()

            if cfg.use_pseudo_label:
                pseudo = state.pseudo_labels[batch]
                ce_pseudo, _ = losses.cross_entropy(pseudo, out_s.probs)
                grad_logits += (out_s.probs - pseudo) * (
                    cfg.pseudo_loss_weight / bsz
                )
                sums["pseudo"] += ce_pseudo.sum()

            grad_embedding = None
            if cfg.use_similarity_loss:
                plus_ids, minus_ids, rows = [], [], []
                for j, i in enumerate(batch):
                    try:
                        p_plus, p_minus = sample_pair(index, int(i), pair_rng)
                    except IsolatedPatchError:
                        isolated += 1
                        continue
                    plus_ids.append(p_plus)
                    minus_ids.append(p_minus)
                    rows.append(j)
                if rows:
                    pair_pix = pixels[np.array(plus_ids + minus_ids)].astype(
                        np.float64
                    )
                    pair_aug = apply_batch(pair_pix, cfg.teacher_augment,
                                           aug_t_rng)
                    out_t = backbone.forward(teacher, pair_aug,
                                             train_mode=False)
                    m = len(rows)
                    z_plus = losses.l2_normalize(out_t.embedding[:m])
                    z_minus = losses.l2_normalize(out_t.embedding[m:])
                    rows = np.array(rows)
                    z_raw = out_s.embedding[rows]
                    z_unit = losses.l2_normalize(z_raw)
                    sl, g_unit = losses.similarity_loss(
                        z_unit, z_plus, z_minus, cfg.temperature
                    )
                    sums["sl"] += sl.sum()
                    sl_count += m
                    g_raw = losses.l2_normalize_grad(z_raw, g_unit) * (
                        cfg.similarity_loss_weight / m
                    )
                    grad_embedding = np.zeros_like(out_s.embedding)
                    grad_embedding[rows] = g_raw

            if not (np.all(np.isfinite(grad_logits))
                    and np.isfinite(sums["label"])):
                raise NanLossError(ep, b_start // cfg.batch_size)

            grads = backbone.backward(out_s, student, grad_logits=grad_logits,
                                      grad_embedding=grad_embedding)
            try:
                backbone.adam_step(opt, student, grads)
            except FloatingPointError as exc:
                raise NanLossError(ep, b_start // cfg.batch_size, str(exc))
            if run_teacher:
                teacher = ensemble.ema_weights(teacher, student,
                                               cfg.teacher_momentum)

        drift = 0.0
        if cfg.use_pseudo_label:
            t_probs, _ = _eval_forward(teacher, pixels)
            state.predictions = ensemble.ema_prediction(
                state.predictions, t_probs, cfg.prediction_momentum
            )
            if cfg.pseudo_label_mode == "pred_only":
                new_pseudo = state.predictions.copy()
            else:
                preds = state.predictions
                new_pseudo = np.empty_like(state.pseudo_labels)
                for i in range(n):
                    nb = index.similar_ids(i)
                    new_pseudo[i] = ensemble.similarity_ensemble(
                        preds[i], preds[nb], mode=cfg.sim_ensemble_mode
                    )
            drift = float(
                np.abs(new_pseudo - state.pseudo_labels).sum(axis=1).mean()
            )
            state.pseudo_labels = new_pseudo

        val_probs, _ = _eval_forward(student, dataset.pixels[val_idx])
        val_dsc = _patch_dsc(val_probs[:, 1],
                             dataset.noisy_labels[val_idx])

        mean_sl = sums["sl"] / sl_count if sl_count else 0.0
        report = EpochReport(
            epoch=ep,
            loss_ce_label=float(sums["label"] / n),
            loss_ce_pseudo=float(sums["pseudo"] / n),
            loss_similarity=float(mean_sl),
            loss_consistency=0.0,
            loss_total=float(
                cfg.label_loss_weight * sums["label"] / n
                + cfg.pseudo_loss_weight * sums["pseudo"] / n
                + cfg.similarity_loss_weight * mean_sl
            ),
            val_dsc=float(val_dsc),
            pseudo_drift=drift,
            learning_rate=opt.lr,
            isolated_patches=isolated,
        )
        history.append(report)
        writer.append(report)

        if val_dsc > best_val:
            best_val, best_epoch = float(val_dsc), ep
            best_student = student.copy()
            writer.checkpoint("best.ssck", student, teacher, opt, state, ep,
                              extra=_best_meta(best_val, best_epoch, cfg))
        if cfg.checkpoint_every and (ep + 1) % cfg.checkpoint_every == 0:
            writer.checkpoint(f"epoch_{ep:04d}.ssck", student, teacher, opt,
                              state, ep,
                              extra=_best_meta(best_val, best_epoch, cfg))

    writer.checkpoint("final.ssck", student, teacher, opt, state,
                      cfg.epochs - 1,
                      extra=_best_meta(best_val, best_epoch, cfg))
    return TrainResult(history, student, teacher, opt, state, best_epoch,
                       best_val, best_student)


def _best_meta(best_val, best_epoch, cfg):
    return {
        "best_val_dsc": best_val,
        "best_epoch": best_epoch,
        "seed": cfg.seed,
        "teacher_momentum": cfg.teacher_momentum,
        "prediction_momentum": cfg.prediction_momentum,
        "arch": cfg.arch,
    }


def train_variant(
    dataset: Dataset,
    cfg: TrainConfig,
    preset: VariantPreset | str,
    out_dir=None,
    run_meta: dict | None = None,
    resume_from: dict | None = None,
) -> TrainResult:
    """Baseline teacher-student loop: supervision against the pseudo-label
    only (initialized to the noisy label), an optional consistency penalty
    between teacher and student embeddings of the same patch, per-batch and
    per-epoch teacher weight EMAs, and a per-epoch pseudo-label EMA."""
    tune_performance()
    if isinstance(preset, str):
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}")
        preset = PRESETS[preset]

    train_idx = dataset.split_indices("train")
    val_idx = dataset.split_indices("val")
    n = len(train_idx)
    labels = dataset.noisy_labels[train_idx].astype(np.int64)
    pixels = dataset.pixels[train_idx]

    student_aug = replace(cfg.student_augment, dropout_rate=cfg.dropout)
    if preset.noisy_augment:
        student_aug = scale_noisy(student_aug)

    if resume_from is not None:
        student = resume_from["student"]
        teacher = resume_from["teacher"]
        opt = resume_from["optimizer"]
        state = ensemble.EnsembleState(resume_from["predictions"],
                                       resume_from["pseudo_labels"])
        start_epoch = resume_from["meta"]["epoch"] + 1
        best_val = resume_from["meta"].get("best_val_dsc", -1.0)
        best_epoch = resume_from["meta"].get("best_epoch", -1)
        best_student = student.copy()
    else:
        student, teacher, opt = _init_models(cfg)
        state = ensemble.init_state(labels)
        start_epoch = 0
        best_val, best_epoch = -1.0, -1
        best_student = student.copy()

    writer = _RunWriter(out_dir, run_meta,
                        keep_epochs_upto=start_epoch - 1 if resume_from else None)
    history = [EpochReport(**rec) for rec in writer.prior]
    need_teacher_fwd = preset.consistency_weight > 0.0

    for ep in range(start_epoch, cfg.epochs):
        opt.lr = backbone.lr_at(ep, cfg.base_lr)
        shuffle_rng = stream(cfg.seed, "shuffle", ep)
        aug_s_rng = stream(cfg.seed, "aug-student", ep)
        aug_t_rng = stream(cfg.seed, "aug-teacher", ep)
        drop_rng = stream(cfg.seed, "dropout", ep)

        perm = shuffle_rng.permutation(n)
        ce_sum = 0.0
        cs_sum = 0.0

        for b_start in range(0, n, cfg.batch_size):
            batch = perm[b_start : b_start + cfg.batch_size]
            bsz = len(batch)
            aug_pix = apply_batch(pixels[batch].astype(np.float64),
                                  student_aug, aug_s_rng)
            out_s = backbone.forward(student, aug_pix,
                                     dropout_rate=student_aug.dropout_rate,
                                     rng=drop_rng, train_mode=True)
            pseudo = state.pseudo_labels[batch]
            ce, _ = losses.cross_entropy(pseudo, out_s.probs)
            ce_sum += ce.sum()
            grad_logits = (out_s.probs - pseudo) * (1.0 / bsz)

            grad_embedding = None
            if need_teacher_fwd:
                t_pix = apply_batch(pixels[batch].astype(np.float64),
                                    cfg.teacher_augment, aug_t_rng)
                out_t = backbone.forward(teacher, t_pix, train_mode=False)
                cs, g_cs = losses.consistency_loss(out_t.embedding,
                                                   out_s.embedding)
                cs_sum += cs.sum()
                grad_embedding = g_cs * (preset.consistency_weight / bsz)

            if not np.isfinite(ce_sum):
                raise NanLossError(ep, b_start // cfg.batch_size)
            grads = backbone.backward(out_s, student, grad_logits=grad_logits,
                                      grad_embedding=grad_embedding)
            try:
                backbone.adam_step(opt, student, grads)
            except FloatingPointError as exc:
                raise NanLossError(ep, b_start // cfg.batch_size, str(exc))
            if preset.batch_momentum < 1.0:
                teacher = ensemble.ema_weights(teacher, student,
                                               preset.batch_momentum)

        if preset.epoch_momentum < 1.0:
            teacher = ensemble.ema_weights(teacher, student,
                                           preset.epoch_momentum)

        drift = 0.0
        if preset.prediction_momentum < 1.0:
            t_probs, _ = _eval_forward(teacher, pixels)
            new_pseudo = ensemble.ema_prediction(
                state.pseudo_labels, t_probs, preset.prediction_momentum
            )
            drift = float(
                np.abs(new_pseudo - state.pseudo_labels).sum(axis=1).mean()
            )
            state.pseudo_labels = new_pseudo
            state.predictions = new_pseudo.copy()

        val_probs, _ = _eval_forward(student, dataset.pixels[val_idx])
        val_dsc = _patch_dsc(val_probs[:, 1], dataset.noisy_labels[val_idx])

        mean_ce = float(ce_sum / n)
        mean_cs = float(cs_sum / n) if need_teacher_fwd else 0.0
        is_supervised = preset.name == "supervised_baseline"
        report = EpochReport(
            epoch=ep,
            loss_ce_label=mean_ce if is_supervised else 0.0,
            loss_ce_pseudo=0.0 if is_supervised else mean_ce,
            loss_similarity=0.0,
            loss_consistency=mean_cs,
            loss_total=mean_ce + preset.consistency_weight * mean_cs,
            val_dsc=float(val_dsc),
            pseudo_drift=drift,
            learning_rate=opt.lr,
            isolated_patches=0,
        )
        history.append(report)
        writer.append(report)

        if val_dsc > best_val:
            best_val, best_epoch = float(val_dsc), ep
            best_student = student.copy()
            writer.checkpoint("best.ssck", student, teacher, opt, state, ep,
                              extra=_best_meta(best_val, best_epoch, cfg))
        if cfg.checkpoint_every and (ep + 1) % cfg.checkpoint_every == 0:
            writer.checkpoint(f"epoch_{ep:04d}.ssck", student, teacher, opt,
                              state, ep,
                              extra=_best_meta(best_val, best_epoch, cfg))

    writer.checkpoint("final.ssck", student, teacher, opt, state,
                      cfg.epochs - 1,
                      extra=_best_meta(best_val, best_epoch, cfg))
    return TrainResult(history, student, teacher, opt, state, best_epoch,
                       best_val, best_student)


class _StitchCell:
    __slots__ = ("slide_id", "coord")

    def __init__(self, slide_id, coord):
        self.slide_id = slide_id
        self.coord = coord


def evaluate_checkpoint(
    student: ModelParams,
    dataset: Dataset,
    split: str = "test",
    mask_threshold: float = 0.5,
    candidate_threshold: float = 0.5,
) -> tuple:
    """Score eval-mode student predictions against clean labels.

    Returns (MetricsReport, stitched masks per slide). DSC pools all split
    patches; FROC runs over the split's slides with clean lesions as ground
    truth.
    """
    tune_performance()
    idx = dataset.split_indices(split)
    if len(idx) == 0:
        raise ValueError(f"split {split!r} is empty")
    if not dataset.has_clean_labels(idx):
        raise ValueError("evaluation requires clean labels")

    probs, _ = _eval_forward(student, dataset.pixels[idx])
    cancer = probs[:, 1]

    by_slide: dict = {}
    for pos, i in enumerate(idx):
        by_slide.setdefault(dataset.slide_ids[i], []).append(pos)

    pred_cells = set()
    truth_cells = set()
    masks = {}
    candidates = {}
    lesions = {}
    per_slide = {}
    for slide_id, positions in sorted(by_slide.items()):
        meta = dataset.slides[slide_id]
        cells = [
            _StitchCell(slide_id, tuple(int(v) for v in dataset.coords[idx[pos]]))
            for pos in positions
        ]
        slide_probs = cancer[positions]
        mask = evaluation.stitch(cells, slide_probs)
        mask.grid_shape = meta.grid_shape
        masks[slide_id] = mask
        candidates[slide_id] = evaluation.extract_candidates(
            mask, candidate_threshold
        )
        lesions[slide_id] = meta.lesion_cell_sets()

        s_pred = {
            (slide_id, cell.coord)
            for cell, p in zip(cells, slide_probs)
            if p >= mask_threshold
        }
        s_truth = {
            (slide_id, cell.coord)
            for pos, cell in zip(positions, cells)
            if dataset.clean_labels[idx[pos]] == 1
        }
        pred_cells |= s_pred
        truth_cells |= s_truth
        per_slide[slide_id] = {
            "dsc": evaluation.dsc(s_pred, s_truth),
            "n_candidates": len(candidates[slide_id]),
            "n_lesions": len(lesions[slide_id]),
        }

    total_dsc = evaluation.dsc(pred_cells, truth_cells)
    if sum(len(v) for v in lesions.values()) > 0:
        curve = evaluation.froc(candidates, lesions)
        report = evaluation.MetricsReport(
            dsc=total_dsc, froc_score=curve.score,
            froc_per_rate=curve.per_rate, curve=curve, per_slide=per_slide,
        )
    else:
        report = evaluation.MetricsReport(
            dsc=total_dsc, froc_score=None, froc_per_rate=None, curve=None,
            per_slide=per_slide,
        )
    return report, masks


def export_embeddings(student: ModelParams, dataset: Dataset,
                      split: str = "test") -> tuple:
    """Eval-mode embeddings for a split, in split order.

    Returns (patch_ids, clean_labels, embeddings (N, 64))."""
    idx = dataset.split_indices(split)
    _, embed = _eval_forward(student, dataset.pixels[idx])
    ids = [dataset.patch_ids[i] for i in idx]
    clean = dataset.clean_labels[idx]
    return ids, clean, embed
