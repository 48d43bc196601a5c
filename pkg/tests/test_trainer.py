import json
from dataclasses import replace

import numpy as np
import pytest

from simstudent import backbone, trainer
from simstudent.augment import AugConfig
from simstudent.trainer import (
    PRESETS,
    TrainConfig,
    build_train_index,
    evaluate_checkpoint,
    export_embeddings,
    train_selfsim,
    train_variant,
)
from simstudent.util import stream

from conftest import toy_dataset

IDENTITY = AugConfig.identity()


def fixture_pixels(slide_id, coord, clean):
    rng = np.random.default_rng(hash((slide_id, coord)) % (2**32))
    base = 0.3 if clean else 0.7
    return np.clip(base + 0.05 * rng.standard_normal((32, 32, 3)), 0, 1)


def four_patch_dataset():
    """Two tight pairs far apart: each patch has one similar neighbor."""
    cells = {
        "f": {
            (0, 0): (1, 1),
            (0, 1): (0, 1),   # injected noise: clean cancer, labeled benign
            (10, 0): (0, 0),
            (10, 1): (0, 0),
        }
    }
    return toy_dataset(cells, fixture_pixels, spacing_mm=1.0)


def fixture_config(**over):
    base = dict(
        epochs=1, batch_size=2, base_lr=1e-3, weight_decay=4e-5,
        dropout=0.0, seed=77, teacher_momentum=0.999,
        prediction_momentum=0.9, temperature=0.07, similar_radius_mm=1.0,
        arch="mlp", student_augment=IDENTITY, teacher_augment=IDENTITY,
        checkpoint_every=0,
    )
    base.update(over)
    return TrainConfig(**base)


def reference_selfsim_epoch(dataset, cfg):
    """Independent re-implementation of one epoch of the main algorithm.

    Orchestration, losses, Adam, and all three EMAs are re-derived here from
    scratch; only the network forward/backward primitives are shared (they
    have their own finite-difference oracle).
    """
    train_idx = dataset.split_indices("train")
    n = len(train_idx)
    labels = dataset.noisy_labels[train_idx]
    y1h = np.zeros((n, 2))
    y1h[np.arange(n), labels] = 1.0
    pixels = dataset.pixels[train_idx].astype(np.float64)

    similar = {0: [1], 1: [0], 2: [3], 3: [2]}
    dissimilar = {0: [2, 3], 1: [2, 3], 2: [0, 1], 3: [0, 1]}

    student = backbone.init_params(
        cfg.arch, seed=stream(cfg.seed, "init").integers(2**63)
    )
    teacher = student.copy()
    ybar = y1h.copy()
    yhat = y1h.copy()
    m = np.zeros(student.size)
    v = np.zeros(student.size)
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    perm = stream(cfg.seed, "shuffle", 0).permutation(n)
    pair_rng = stream(cfg.seed, "pairs", 0)
    step = 0
    for start in range(0, n, cfg.batch_size):
        batch = perm[start : start + cfg.batch_size]
        bsz = len(batch)
        out = backbone.forward(student, pixels[batch], train_mode=True)
        probs, z_raw = out.probs, out.embedding

        grad_logits = (probs - y1h[batch]) / bsz + (probs - yhat[batch]) / bsz

        plus, minus = [], []
        for i in batch:
            sim = similar[int(i)]
            dis = dissimilar[int(i)]
            plus.append(sim[pair_rng.integers(len(sim))])
            minus.append(dis[pair_rng.integers(len(dis))])
        out_t = backbone.forward(teacher, pixels[np.array(plus + minus)])
        zt = out_t.embedding
        zp = zt[:bsz] / np.linalg.norm(zt[:bsz], axis=1, keepdims=True)
        zm = zt[bsz:] / np.linalg.norm(zt[bsz:], axis=1, keepdims=True)

        norm = np.linalg.norm(z_raw, axis=1, keepdims=True)
        zu = z_raw / norm
        s_plus = (zu * zp).sum(axis=1)
        s_minus = (zu * zm).sum(axis=1)
        margin = (s_minus - s_plus) / cfg.temperature
        sig = 1.0 / (1.0 + np.exp(-margin))
        g_unit = (sig / cfg.temperature)[:, None] * (zm - zp)
        radial = (zu * g_unit).sum(axis=1, keepdims=True)
        g_raw = (g_unit - zu * radial) / norm
        grad_embedding = g_raw / bsz

        grads = backbone.backward(out, student, grad_logits=grad_logits,
                                  grad_embedding=grad_embedding)

        g = grads + cfg.weight_decay * student.values
        step += 1
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** step)
        v_hat = v / (1 - beta2 ** step)
        student = backbone.ModelParams(
            cfg.arch,
            student.values - cfg.base_lr * m_hat / (np.sqrt(v_hat) + eps),
        )
        teacher = backbone.ModelParams(
            cfg.arch,
            cfg.teacher_momentum * teacher.values
            + (1 - cfg.teacher_momentum) * student.values,
        )

    t_probs = backbone.forward(teacher, pixels).probs
    ybar = cfg.prediction_momentum * ybar + (1 - cfg.prediction_momentum) * t_probs
    yhat_new = np.empty_like(yhat)
    for i in range(n):
        yhat_new[i] = 0.5 * (ybar[i] + ybar[similar[i]].mean(axis=0))
    return student, teacher, ybar, yhat_new


class TestHandTrace:
    def test_one_epoch_matches_reference(self):
        ds = four_patch_dataset()
        cfg = fixture_config()
        index = build_train_index(ds, cfg.similar_radius_mm)
        result = train_selfsim(ds, index, cfg)
        student, teacher, ybar, yhat = reference_selfsim_epoch(ds, cfg)

        np.testing.assert_allclose(result.teacher.values, teacher.values,
                                   atol=1e-9)
        np.testing.assert_allclose(result.student.values, student.values,
                                   atol=1e-9)
        np.testing.assert_allclose(result.state.predictions, ybar, atol=1e-9)
        np.testing.assert_allclose(result.state.pseudo_labels, yhat,
                                   atol=1e-9)

    def test_pseudo_labels_stay_on_simplex(self):
        ds = four_patch_dataset()
        cfg = fixture_config(epochs=5)
        index = build_train_index(ds, cfg.similar_radius_mm)
        result = train_selfsim(ds, index, cfg)
        np.testing.assert_allclose(result.state.pseudo_labels.sum(axis=1),
                                   1.0, atol=1e-9)
        np.testing.assert_allclose(result.state.predictions.sum(axis=1),
                                   1.0, atol=1e-9)
        for rep in result.history:
            assert 0.0 <= rep.pseudo_drift <= 2.0
            assert np.isfinite(rep.loss_total)


class TestTeacherDynamics:
    def test_frozen_teacher_at_momentum_one(self):
        ds = four_patch_dataset()
        cfg = fixture_config(epochs=3, teacher_momentum=1.0)
        index = build_train_index(ds, cfg.similar_radius_mm)
        result = train_selfsim(ds, index, cfg)
        init = backbone.init_params(
            cfg.arch, seed=stream(cfg.seed, "init").integers(2**63)
        )
        np.testing.assert_array_equal(result.teacher.values, init.values)
        # the student kept moving
        assert not np.array_equal(result.student.values, init.values)

    def test_teacher_receives_no_gradient(self):
        # similarity loss flows into the student only; with momentum 1 the
        # teacher is bit-identical after training despite being forwarded
        ds = four_patch_dataset()
        cfg = fixture_config(epochs=2, teacher_momentum=1.0,
                             use_pseudo_label=False)
        index = build_train_index(ds, cfg.similar_radius_mm)
        result = train_selfsim(ds, index, cfg)
        init = backbone.init_params(
            cfg.arch, seed=stream(cfg.seed, "init").integers(2**63)
        )
        np.testing.assert_array_equal(result.teacher.values, init.values)


class TestAblationSwitches:
    def test_switches_off_equals_supervised_variant(self, small_generated_dataset):
        ds, _ = small_generated_dataset
        cfg = fixture_config(epochs=2, batch_size=32, seed=123,
                             use_similarity_loss=False,
                             use_pseudo_label=False)
        index = build_train_index(ds, cfg.similar_radius_mm)
        a = train_selfsim(ds, index, cfg)
        b = train_variant(ds, cfg, "supervised_baseline")
        np.testing.assert_array_equal(a.student.values, b.student.values)
        assert [r.val_dsc for r in a.history] == [r.val_dsc for r in b.history]
        assert [r.loss_ce_label for r in a.history] == [
            r.loss_ce_label for r in b.history
        ]

    def test_isolated_patches_reported(self):
        cells = {"f": {(0, 0): (1, 1), (0, 1): (0, 0), (20, 5): (0, 0)}}
        ds = toy_dataset(cells, fixture_pixels, spacing_mm=1.0)
        cfg = fixture_config(epochs=1, batch_size=3)
        index = build_train_index(ds, cfg.similar_radius_mm)
        result = train_selfsim(ds, index, cfg)
        assert result.history[0].isolated_patches == 1


class TestVariants:
    def test_presets_match_published_table(self):
        assert (PRESETS["mean_teacher"].batch_momentum,
                PRESETS["mean_teacher"].epoch_momentum,
                PRESETS["mean_teacher"].prediction_momentum,
                PRESETS["mean_teacher"].consistency_weight) == (0.999, 1, 0, 1)
        assert (PRESETS["noisy_student"].batch_momentum,
                PRESETS["noisy_student"].epoch_momentum,
                PRESETS["noisy_student"].prediction_momentum,
                PRESETS["noisy_student"].consistency_weight) == (1, 0, 0, 0)
        assert PRESETS["noisy_student"].noisy_augment
        assert (PRESETS["pred_ensemble"].batch_momentum,
                PRESETS["pred_ensemble"].epoch_momentum,
                PRESETS["pred_ensemble"].prediction_momentum,
                PRESETS["pred_ensemble"].consistency_weight) == (0.999, 1, 0.9, 0)

    def test_mean_teacher_pseudo_equals_teacher_prediction(self):
        ds = four_patch_dataset()
        cfg = fixture_config(epochs=2)
        result = train_variant(ds, cfg, "mean_teacher")
        pixels = ds.pixels[ds.split_indices("train")].astype(np.float64)
        t_probs = backbone.forward(result.teacher, pixels).probs
        np.testing.assert_array_equal(result.state.pseudo_labels, t_probs)

    def test_noisy_student_epoch_copy(self):
        ds = four_patch_dataset()
        cfg = fixture_config(epochs=2)
        result = train_variant(ds, cfg, "noisy_student")
        np.testing.assert_array_equal(result.teacher.values,
                                      result.student.values)

    def test_zero_weight_consistency_never_computed(self):
        ds = four_patch_dataset()
        result = train_variant(ds, fixture_config(epochs=2), "pred_ensemble")
        assert all(r.loss_consistency == 0.0 for r in result.history)

    def test_mean_teacher_records_consistency(self):
        ds = four_patch_dataset()
        result = train_variant(ds, fixture_config(epochs=1), "mean_teacher")
        assert result.history[0].loss_consistency > 0.0

    def test_supervised_history_has_only_label_ce(self):
        ds = four_patch_dataset()
        result = train_variant(ds, fixture_config(epochs=2),
                               "supervised_baseline")
        for rep in result.history:
            assert rep.loss_ce_label > 0.0
            assert rep.loss_ce_pseudo == 0.0
            assert rep.loss_similarity == 0.0
            assert rep.loss_consistency == 0.0

    def test_unknown_preset_rejected(self):
        ds = four_patch_dataset()
        with pytest.raises(ValueError):
            train_variant(ds, fixture_config(), "bogus")


class TestDeterminismAndResume:
    def test_bit_identical_reruns(self):
        ds = four_patch_dataset()
        cfg = fixture_config(epochs=3)
        index = build_train_index(ds, cfg.similar_radius_mm)
        a = train_selfsim(ds, index, cfg)
        b = train_selfsim(ds, index, cfg)
        np.testing.assert_array_equal(a.student.values, b.student.values)
        np.testing.assert_array_equal(a.state.pseudo_labels,
                                      b.state.pseudo_labels)
        assert [json.dumps(vars(r)) for r in a.history] == [
            json.dumps(vars(r)) for r in b.history
        ]

    def test_resume_matches_uninterrupted(self, tmp_path,
                                          small_generated_dataset):
        ds, _ = small_generated_dataset
        cfg = fixture_config(epochs=4, batch_size=32, seed=11,
                             checkpoint_every=1)
        index = build_train_index(ds, cfg.similar_radius_mm)

        dir_a = tmp_path / "straight"
        train_selfsim(ds, index, cfg, out_dir=dir_a)

        dir_b = tmp_path / "interrupted"
        train_selfsim(ds, index, replace(cfg, epochs=2), out_dir=dir_b)
        loaded = backbone.load_checkpoint(dir_b / "epoch_0001.ssck")
        train_selfsim(ds, index, cfg, out_dir=dir_b, resume_from=loaded)

        assert (dir_a / "history.jsonl").read_bytes() == (
            dir_b / "history.jsonl"
        ).read_bytes()
        assert (dir_a / "final.ssck").read_bytes() == (
            dir_b / "final.ssck"
        ).read_bytes()


class TestSanity:
    def test_noise_free_loss_non_increasing(self):
        # linearly separable content, complete labels, supervised loop,
        # full-batch steps so the recorded loss is the exact epoch loss
        def pix(slide_id, coord, clean):
            rng = np.random.default_rng(hash((slide_id, coord)) % (2**32))
            base = 0.25 if clean else 0.75
            return np.clip(base + 0.02 * rng.standard_normal((32, 32, 3)),
                           0, 1)

        cells = {}
        rng = np.random.default_rng(5)
        for s in range(2):
            slide = {}
            for r in range(8):
                for c in range(8):
                    label = int(rng.random() < 0.4)
                    slide[(r, c)] = (label, label)
            cells[f"s{s}"] = slide
        ds = toy_dataset(cells, pix, spacing_mm=1.0)
        n = len(ds.split_indices("train"))

        curves = []
        for seed in (1, 2, 3):
            cfg = fixture_config(epochs=10, batch_size=n, seed=seed,
                                 base_lr=1e-4, dropout=0.0, arch="conv")
            result = train_variant(ds, cfg, "supervised_baseline")
            curves.append([r.loss_ce_label for r in result.history])
        mean = np.mean(curves, axis=0)
        assert all(b <= a + 1e-12 for a, b in zip(mean, mean[1:]))


def separable_eval_dataset():
    lesions = {"e0": [(0, [(0, 0), (0, 1)])], "e1": [(0, [(2, 2)])]}
    cells = {
        "e0": {(0, 0): (1, 1), (0, 1): (1, 1), (3, 3): (0, 0),
               (4, 4): (0, 0)},
        "e1": {(2, 2): (1, 1), (0, 3): (0, 0), (4, 0): (0, 0)},
    }

    def pix(slide_id, coord, clean):
        return np.full((32, 32, 3), 0.1 if clean else 0.9)

    return toy_dataset(cells, pix, spacing_mm=1.0, lesions=lesions,
                       splits={"e0": "test", "e1": "test"})


def intensity_classifier():
    """Hand-built MLP: cancer iff mean pixel intensity < 0.5."""
    params = backbone.init_params("mlp", seed=0)
    params.values[:] = 0.0
    n_in = 32 * 32 * 3
    params.view("fc0_w")[:, 0] = -1.0 / n_in
    params.view("fc0_b")[0] = 0.5            # a0 = 0.5 - mean
    params.view("fc0_w")[:, 1] = 1.0 / n_in
    params.view("fc0_b")[1] = -0.5           # a1 = mean - 0.5
    params.view("fc1_w")[0, 0] = 1.0          # z0: cancer evidence
    params.view("fc1_w")[1, 1] = 1.0          # z1: benign evidence
    params.view("fc2_w")[0, 1] = 40.0
    params.view("fc2_w")[1, 0] = 40.0
    return params


class TestEvaluateCheckpoint:
    def test_perfect_oracle_scores_ceiling(self):
        ds = separable_eval_dataset()
        report, masks = evaluate_checkpoint(intensity_classifier(), ds)
        assert report.dsc == 100.0
        assert report.froc_score == 1.0
        assert set(masks) == {"e0", "e1"}

    def test_all_benign_predictions_zero_dsc(self):
        ds = separable_eval_dataset()
        params = backbone.init_params("mlp", seed=0)
        params.values[:] = 0.0
        params.view("fc2_b")[0] = 10.0
        report, _ = evaluate_checkpoint(params, ds)
        assert report.dsc == 0.0

    def test_matches_direct_module_calls(self):
        from simstudent import evaluation
        ds = separable_eval_dataset()
        params = backbone.init_params("mlp", seed=9)
        report, masks = evaluate_checkpoint(params, ds)

        idx = ds.split_indices("test")
        probs = backbone.forward(params,
                                 ds.pixels[idx].astype(np.float64)).probs
        pred = {
            (ds.slide_ids[i], tuple(ds.coords[i]))
            for pos, i in enumerate(idx) if probs[pos, 1] >= 0.5
        }
        truth = {
            (ds.slide_ids[i], tuple(ds.coords[i]))
            for i in idx if ds.clean_labels[i] == 1
        }
        assert report.dsc == evaluation.dsc(pred, truth)

        cands = {
            sid: evaluation.extract_candidates(mask)
            for sid, mask in masks.items()
        }
        lesions = {sid: ds.slides[sid].lesion_cell_sets() for sid in masks}
        assert report.froc_score == evaluation.froc(cands, lesions).score

    def test_missing_clean_labels_rejected(self):
        ds = separable_eval_dataset()
        ds.clean_labels[:] = -1
        with pytest.raises(ValueError):
            evaluate_checkpoint(intensity_classifier(), ds)


class TestExportEmbeddings:
    def test_shape_and_purity(self):
        ds = separable_eval_dataset()
        params = backbone.init_params("mlp", seed=3)
        ids, clean, emb = export_embeddings(params, ds, split="test")
        assert len(ids) == 7 and emb.shape == (7, 64)
        # identical pixels give identical embeddings
        labels = dict(zip(ids, clean))
        rows = {pid: emb[i] for i, pid in enumerate(ids)}
        cancer_rows = [rows[p] for p in ids if labels[p] == 1]
        for row in cancer_rows[1:]:
            np.testing.assert_array_equal(row, cancer_rows[0])
