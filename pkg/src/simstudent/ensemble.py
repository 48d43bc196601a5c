"""Exponential-moving-average machinery: teacher weights, per-patch
prediction ensembles, and the neighbor-consensus pseudo-labels."""

import numpy as np

from .backbone import ModelParams


class EnsembleState:
    """Per-patch prediction ensemble and pseudo-label, aligned to a fixed
    patch order. Both arrays stay on the probability simplex."""

    def __init__(self, predictions: np.ndarray, pseudo_labels: np.ndarray):
        predictions = np.asarray(predictions, dtype=np.float64)
        pseudo_labels = np.asarray(pseudo_labels, dtype=np.float64)
        if predictions.shape != pseudo_labels.shape or predictions.ndim != 2:
            raise ValueError("prediction/pseudo-label arrays must match (N, C)")
        self.predictions = predictions
        self.pseudo_labels = pseudo_labels

    @property
    def n_patches(self) -> int:
        return self.predictions.shape[0]

    def copy(self) -> "EnsembleState":
        return EnsembleState(self.predictions.copy(), self.pseudo_labels.copy())


def init_state(noisy_labels, n_classes: int = 2) -> EnsembleState:
    """Both the ensemble and the pseudo-labels start as one-hot noisy labels."""
    labels = np.asarray(noisy_labels, dtype=np.int64)
    onehot = np.zeros((len(labels), n_classes), dtype=np.float64)
    onehot[np.arange(len(labels)), labels] = 1.0
    return EnsembleState(onehot.copy(), onehot.copy())


def ema_weights(theta_t: ModelParams, theta_s: ModelParams,
                alpha: float) -> ModelParams:
    """theta_t <- alpha * theta_t + (1 - alpha) * theta_s, element-wise."""
    if theta_t.arch != theta_s.arch or theta_t.size != theta_s.size:
        raise ValueError("parameter layouts differ")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    return ModelParams(theta_t.arch,
                       alpha * theta_t.values + (1.0 - alpha) * theta_s.values)


def ema_prediction(ybar, teacher_pred, alpha_pred: float):
    """Convex update of the prediction ensemble toward the teacher output."""
    if not 0.0 <= alpha_pred <= 1.0:
        raise ValueError("alpha_pred must be in [0, 1]")
    ybar = np.asarray(ybar, dtype=np.float64)
    teacher_pred = np.asarray(teacher_pred, dtype=np.float64)
    return alpha_pred * ybar + (1.0 - alpha_pred) * teacher_pred


def similarity_ensemble(ybar_p, ybar_neighbors, mode: str = "half_mean"):
    """Consensus pseudo-label from a patch's ensemble and its similar set.

    half_mean: 0.5 * (ybar_p + mean(neighbors)) - the default reading of
    "the average of the patch's ensemble and its similar patches' ensembles".
    pool: plain mean over the patch and all neighbors together.
    An empty neighbor list returns ybar_p unchanged.
    """
    ybar_p = np.asarray(ybar_p, dtype=np.float64)
    neighbors = np.asarray(ybar_neighbors, dtype=np.float64)
    if neighbors.size == 0:
        return ybar_p.copy()
    if mode == "half_mean":
        return 0.5 * (ybar_p + neighbors.mean(axis=0))
    if mode == "pool":
        return (ybar_p + neighbors.sum(axis=0)) / (1 + neighbors.shape[0])
    raise ValueError(f"unknown similarity-ensemble mode {mode!r}")
