"""Loss functions: categorical cross entropy, the contrastive similarity loss
on spatial neighbor pairs, the teacher-student consistency penalty, and their
unweighted composite.

All functions accept either a single example (1-D arrays) or a batch (2-D,
leading batch axis) and return the loss together with the gradient the
training loop needs. Teacher-side embeddings are always treated as constants.
"""

import numpy as np

SIMPLEX_ATOL = 1e-9
PROB_FLOOR = 1e-12


def _check_simplex(v: np.ndarray, name: str) -> None:
    if np.any(v < -SIMPLEX_ATOL) or np.any(v > 1 + SIMPLEX_ATOL):
        raise ValueError(f"{name} entries must lie in [0, 1]")
    sums = v.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > SIMPLEX_ATOL):
        raise ValueError(f"{name} must sum to 1 (got sums {sums})")


def cross_entropy(target, pred):
    """-sum(target * log(pred)) with the gradient w.r.t. the pred logits.

    `pred` is assumed to be a softmax output, so the logit gradient is the
    usual pred - target. Probabilities are floored at 1e-12 inside the log.
    """
    target = np.asarray(target, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if target.shape != pred.shape:
        raise ValueError("target and pred shapes differ")
    _check_simplex(target, "target")
    _check_simplex(pred, "pred")
    loss = -(target * np.log(np.clip(pred, PROB_FLOOR, 1.0))).sum(axis=-1)
    grad_logits = pred - target
    return loss, grad_logits


def similarity_loss(z_s, z_plus, z_minus, tau):
    """Two-class softmax log loss over neighbor similarities.

    With s+ = z_s . z_plus and s- = z_s . z_minus, the loss is
    -log(exp(s+/tau) / (exp(s+/tau) + exp(s-/tau))), evaluated in
    log-sum-exp form. Inputs are expected to be L2-normalized; the gradient
    is returned for z_s only (z_plus, z_minus are teacher constants).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    z_s = np.asarray(z_s, dtype=np.float64)
    z_plus = np.asarray(z_plus, dtype=np.float64)
    z_minus = np.asarray(z_minus, dtype=np.float64)
    if z_s.shape != z_plus.shape or z_s.shape != z_minus.shape:
        raise ValueError("embedding shapes differ")
    s_plus = (z_s * z_plus).sum(axis=-1)
    s_minus = (z_s * z_minus).sum(axis=-1)
    margin = (s_minus - s_plus) / tau
    loss = np.logaddexp(0.0, margin)
    # sigmoid(margin), computed without overflow for large |margin|
    sig = np.exp(margin - loss)
    coeff = sig / tau
    grad_z_s = coeff[..., None] * (z_minus - z_plus)
    return loss, grad_z_s


def similarity_loss_full(z_s, z_pluses, z_minuses, tau):
    """Reference form of the similarity loss with full neighbor bags.

    -log( sum_i exp(s_i+/tau) / (sum_i exp(s_i+/tau) + sum_j exp(s_j-/tau)) ).
    Evaluation-only: used by tests to check the sampled one-vs-one loss, not
    on the training path.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    z_s = np.asarray(z_s, dtype=np.float64)
    sp = np.asarray([z_s @ np.asarray(z) for z in z_pluses], dtype=np.float64) / tau
    sm = np.asarray([z_s @ np.asarray(z) for z in z_minuses], dtype=np.float64) / tau
    top = np.logaddexp.reduce(sp)
    total = np.logaddexp(top, np.logaddexp.reduce(sm))
    return total - top


def consistency_loss(z_t, z_s):
    """Squared L2 distance between teacher and student embeddings.

    Gradient is returned for z_s; used by the mean-teacher style variants on
    raw (unnormalized) embeddings.
    """
    z_t = np.asarray(z_t, dtype=np.float64)
    z_s = np.asarray(z_s, dtype=np.float64)
    if z_t.shape != z_s.shape:
        raise ValueError("embedding shapes differ")
    diff = z_s - z_t
    loss = (diff * diff).sum(axis=-1)
    return loss, 2.0 * diff


def overall_loss(label, pseudo_label, pred, z_s, z_plus, z_minus, tau):
    """Unweighted composite: CE(label, pred) + CE(pseudo, pred) + similarity."""
    ce_label, _ = cross_entropy(label, pred)
    ce_pseudo, _ = cross_entropy(pseudo_label, pred)
    sim, _ = similarity_loss(z_s, z_plus, z_minus, tau)
    return ce_label + ce_pseudo + sim


def l2_normalize(z):
    """Unit-normalize along the last axis."""
    z = np.asarray(z, dtype=np.float64)
    norm = np.sqrt((z * z).sum(axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise ValueError("cannot normalize a zero embedding")
    return z / norm


def l2_normalize_grad(z_raw, grad_unit):
    """Chain a gradient w.r.t. the normalized vector back to the raw vector.

    d(z/|z|)/dz applied to grad_unit: (g - u (u.g)) / |z| with u = z/|z|.
    """
    z_raw = np.asarray(z_raw, dtype=np.float64)
    grad_unit = np.asarray(grad_unit, dtype=np.float64)
    norm = np.sqrt((z_raw * z_raw).sum(axis=-1, keepdims=True))
    unit = z_raw / norm
    radial = (unit * grad_unit).sum(axis=-1, keepdims=True)
    return (grad_unit - unit * radial) / norm
