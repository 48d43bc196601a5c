"""Small from-scratch classifier with analytic gradients.

Two architectures share one flat-parameter representation:

  conv (default): conv 3->8 3x3 pad 1, ReLU, 2x2 max-pool;
                  conv 8->16 3x3 pad 1, ReLU, 2x2 max-pool; flatten 1024;
                  fc 1024->64 (the embedding), ReLU, dropout, fc 64->2.
  mlp  (fast, for property tests): flatten 3072 -> fc 256, ReLU,
                  fc 256->64 (the embedding), ReLU, dropout, fc 64->2.

Everything runs in float64. Inputs are (batch, 32, 32, 3) rasters in [0, 1].
The 64-d pre-logit fully-connected output is exposed as the embedding.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

INPUT_SIZE = 32
INPUT_CHANNELS = 3
EMBED_DIM = 64
N_CLASSES = 2

CHECKPOINT_MAGIC = b"SSCK"
CHECKPOINT_VERSION = 1

_LAYOUTS = {
    "conv": (
        ("conv1_w", (8, 3, 3, 3)),
        ("conv1_b", (8,)),
        ("conv2_w", (16, 8, 3, 3)),
        ("conv2_b", (16,)),
        ("fc1_w", (1024, EMBED_DIM)),
        ("fc1_b", (EMBED_DIM,)),
        ("fc2_w", (EMBED_DIM, N_CLASSES)),
        ("fc2_b", (N_CLASSES,)),
    ),
    "mlp": (
        ("fc0_w", (INPUT_SIZE * INPUT_SIZE * INPUT_CHANNELS, 256)),
        ("fc0_b", (256,)),
        ("fc1_w", (256, EMBED_DIM)),
        ("fc1_b", (EMBED_DIM,)),
        ("fc2_w", (EMBED_DIM, N_CLASSES)),
        ("fc2_b", (N_CLASSES,)),
    ),
}


class ModelParams:
    """Flat float64 parameter vector plus the layer layout that shapes it."""

    def __init__(self, arch: str, values: np.ndarray):
        if arch not in _LAYOUTS:
            raise ValueError(f"unknown architecture {arch!r}")
        self.arch = arch
        self._offsets = {}
        offset = 0
        for name, shape in _LAYOUTS[arch]:
            size = int(np.prod(shape))
            self._offsets[name] = (offset, shape)
            offset += size
        self.size = offset
        values = np.ascontiguousarray(values, dtype=np.float64)
        if values.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("parameters must be finite")
        self.values = values

    def view(self, name: str) -> np.ndarray:
        offset, shape = self._offsets[name]
        return self.values[offset : offset + int(np.prod(shape))].reshape(shape)

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, self.values.copy())

    def tensor_names(self):
        return [name for name, _ in _LAYOUTS[self.arch]]


def param_count(arch: str) -> int:
    return sum(int(np.prod(shape)) for _, shape in _LAYOUTS[arch])


def init_params(arch: str = "conv", seed: int = 0) -> ModelParams:
    """He-normal weights, zero biases; deterministic for a fixed seed."""
    rng = np.random.default_rng(seed)
    chunks = []
    for name, shape in _LAYOUTS[arch]:
        if name.endswith("_b"):
            chunks.append(np.zeros(shape, dtype=np.float64).ravel())
        else:
            if len(shape) == 4:
                fan_in = shape[1] * shape[2] * shape[3]
            else:
                fan_in = shape[0]
            std = np.sqrt(2.0 / fan_in)
            chunks.append(rng.normal(0.0, std, size=shape).ravel())
    return ModelParams(arch, np.concatenate(chunks))


@dataclass
class ForwardOutput:
    probs: np.ndarray       # (B, 2) softmax probabilities
    embedding: np.ndarray   # (B, 64) pre-logit fc activations
    cache: dict | None = field(default=None, repr=False)


def _im2col3(x_padded, out_h, out_w):
    """All 3x3 neighborhoods of a padded (B, C, H+2, W+2) map.

    Returns (B, C*9, out_h*out_w), contiguous for the GEMM.
    """
    b, c = x_padded.shape[:2]
    cols = np.empty((b, c, 3, 3, out_h, out_w), dtype=np.float64)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, ki, kj] = x_padded[:, :, ki : ki + out_h, kj : kj + out_w]
    return cols.reshape(b, c * 9, out_h * out_w)


def _col2im3(dcols, b, c, h, w):
    """Adjoint of _im2col3: scatter-add column gradients back to the padded map."""
    dcols = dcols.reshape(b, c, 3, 3, h, w)
    dx_padded = np.zeros((b, c, h + 2, w + 2), dtype=np.float64)
    for ki in range(3):
        for kj in range(3):
            dx_padded[:, :, ki : ki + h, kj : kj + w] += dcols[:, :, ki, kj]
    return dx_padded[:, :, 1 : h + 1, 1 : w + 1]


def _conv3x3(x, w, bias):
    """Same-padding 3x3 convolution via im2col + GEMM. x: (B, C, H, W)."""
    b, c, h, w_dim = x.shape
    x_padded = np.zeros((b, c, h + 2, w_dim + 2), dtype=np.float64)
    x_padded[:, :, 1 : h + 1, 1 : w_dim + 1] = x
    cols = _im2col3(x_padded, h, w_dim)
    w_mat = w.reshape(w.shape[0], -1)
    out = np.matmul(w_mat, cols) + bias[None, :, None]
    return out.reshape(b, w.shape[0], h, w_dim), cols


def _maxpool2(x):
    """2x2 stride-2 max pooling with cached argmax (first max wins ties)."""
    b, c, h, w = x.shape
    windows = (
        x.reshape(b, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, h // 2, w // 2, 4)
    )
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _maxpool2_backward(dout, idx, h, w):
    b, c, h2, w2 = dout.shape
    dwin = np.zeros((b, c, h2, w2, 4), dtype=np.float64)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    return (
        dwin.reshape(b, c, h2, w2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, h, w)
    )


def _softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def forward(
    params: ModelParams,
    batch,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    train_mode: bool = False,
) -> ForwardOutput:
    """Run the classifier on a batch of (32, 32, 3) rasters.

    Dropout (inverted scaling) is applied to the post-ReLU embedding only in
    train_mode; eval mode consumes no randomness. The activation cache needed
    by backward() is populated only in train_mode.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != (INPUT_SIZE, INPUT_SIZE, INPUT_CHANNELS):
        raise ValueError(f"expected (B, 32, 32, 3) input, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite values in input batch")
    if not (0.0 <= dropout_rate < 1.0):
        raise ValueError("dropout_rate must be in [0, 1)")
    b = x.shape[0]
    cache = {"arch": params.arch, "n_params": params.size, "batch": b}

    if params.arch == "conv":
        x_chw = np.ascontiguousarray(x.transpose(0, 3, 1, 2))
        a1, cols1 = _conv3x3(x_chw, params.view("conv1_w"), params.view("conv1_b"))
        mask1 = a1 > 0
        r1 = a1 * mask1
        p1, idx1 = _maxpool2(r1)
        a2, cols2 = _conv3x3(p1, params.view("conv2_w"), params.view("conv2_b"))
        mask2 = a2 > 0
        r2 = a2 * mask2
        p2, idx2 = _maxpool2(r2)
        flat = p2.reshape(b, -1)
        cache.update(cols1=cols1, mask1=mask1, idx1=idx1, p1=p1,
                     cols2=cols2, mask2=mask2, idx2=idx2)
    else:
        flat0 = x.reshape(b, -1)
        a0 = flat0 @ params.view("fc0_w") + params.view("fc0_b")
        mask0 = a0 > 0
        flat = a0 * mask0
        cache.update(flat0=flat0, mask0=mask0)

    z = flat @ params.view("fc1_w") + params.view("fc1_b")
    hz = np.maximum(z, 0.0)
    mask_z = z > 0
    if train_mode and dropout_rate > 0.0:
        if rng is None:
            raise ValueError("train-mode dropout requires an rng")
        keep = rng.random(hz.shape) >= dropout_rate
        drop_mask = keep / (1.0 - dropout_rate)
        h = hz * drop_mask
    else:
        drop_mask = None
        h = hz
    logits = h @ params.view("fc2_w") + params.view("fc2_b")
    probs = _softmax(logits)

    if train_mode:
        cache.update(flat=flat, mask_z=mask_z, drop_mask=drop_mask, h=h, probs=probs)
    else:
        cache = None
    return ForwardOutput(probs=probs, embedding=z, cache=cache)


def backward(
    output: ForwardOutput,
    params: ModelParams,
    grad_logits=None,
    grad_probs=None,
    grad_embedding=None,
) -> np.ndarray:
    """Backpropagate loss gradients to a flat parameter-gradient vector.

    Accepts gradients w.r.t. the logits, the softmax probabilities, or the
    embedding (any combination; missing ones are zero). Gradients never flow
    to the input, so teacher-side inputs stay constant by construction.
    """
    cache = output.cache
    if cache is None:
        raise ValueError("backward requires a train-mode forward cache")
    if cache["arch"] != params.arch or cache["n_params"] != params.size:
        raise ValueError("cache does not match params layout")
    b = cache["batch"]

    g_logits = np.zeros((b, N_CLASSES), dtype=np.float64)
    if grad_logits is not None:
        g_logits += np.asarray(grad_logits, dtype=np.float64)
    if grad_probs is not None:
        gp = np.asarray(grad_probs, dtype=np.float64)
        p = cache["probs"]
        g_logits += p * (gp - (gp * p).sum(axis=-1, keepdims=True))

    grads = np.zeros(params.size, dtype=np.float64)
    out = ModelParams(params.arch, grads)  # views into the gradient vector

    h = cache["h"]
    out.view("fc2_w")[:] = h.T @ g_logits
    out.view("fc2_b")[:] = g_logits.sum(axis=0)
    dh = g_logits @ params.view("fc2_w").T
    if cache["drop_mask"] is not None:
        dh = dh * cache["drop_mask"]
    dz = dh * cache["mask_z"]
    if grad_embedding is not None:
        dz = dz + np.asarray(grad_embedding, dtype=np.float64)

    flat = cache["flat"]
    out.view("fc1_w")[:] = flat.T @ dz
    out.view("fc1_b")[:] = dz.sum(axis=0)
    dflat = dz @ params.view("fc1_w").T

    if params.arch == "conv":
        dp2 = dflat.reshape(b, 16, 8, 8)
        dr2 = _maxpool2_backward(dp2, cache["idx2"], 16, 16)
        da2 = dr2 * cache["mask2"]
        dmat2 = da2.reshape(b, 16, -1)
        out.view("conv2_w")[:] = (
            np.matmul(dmat2, cache["cols2"].transpose(0, 2, 1)).sum(axis=0)
        ).reshape(16, 8, 3, 3)
        out.view("conv2_b")[:] = da2.sum(axis=(0, 2, 3))
        w2_mat = params.view("conv2_w").reshape(16, -1)
        dcols2 = np.matmul(w2_mat.T, dmat2)
        dp1 = _col2im3(dcols2, b, 8, 16, 16)
        dr1 = _maxpool2_backward(dp1, cache["idx1"], 32, 32)
        da1 = dr1 * cache["mask1"]
        dmat1 = da1.reshape(b, 8, -1)
        out.view("conv1_w")[:] = (
            np.matmul(dmat1, cache["cols1"].transpose(0, 2, 1)).sum(axis=0)
        ).reshape(8, 3, 3, 3)
        out.view("conv1_b")[:] = da1.sum(axis=(0, 2, 3))
    else:
        da0 = dflat * cache["mask0"]
        out.view("fc0_w")[:] = cache["flat0"].T @ da0
        out.view("fc0_b")[:] = da0.sum(axis=0)

    return grads


@dataclass
class OptimizerState:
    """Adam state: first/second moments, step counter, lr, weight decay."""

    m: np.ndarray
    v: np.ndarray
    step: int
    lr: float
    weight_decay: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(params: ModelParams, lr: float = 1e-4,
                   weight_decay: float = 4e-5) -> OptimizerState:
    return OptimizerState(
        m=np.zeros(params.size, dtype=np.float64),
        v=np.zeros(params.size, dtype=np.float64),
        step=0,
        lr=lr,
        weight_decay=weight_decay,
    )


def adam_step(opt: OptimizerState, params: ModelParams, grads) -> ModelParams:
    """Bias-corrected Adam update; weight decay is coupled into the gradient.

    Mutates params.values and the optimizer moments in place and returns
    params for chaining.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.values.shape:
        raise ValueError("gradient/parameter shape mismatch")
    if not np.all(np.isfinite(grads)):
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        raise FloatingPointError(f"non-finite gradient at parameter index {bad}")
    g = grads + opt.weight_decay * params.values
    opt.step += 1
    opt.m = opt.beta1 * opt.m + (1.0 - opt.beta1) * g
    opt.v = opt.beta2 * opt.v + (1.0 - opt.beta2) * (g * g)
    m_hat = opt.m / (1.0 - opt.beta1 ** opt.step)
    v_hat = opt.v / (1.0 - opt.beta2 ** opt.step)
    params.values -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return params


def lr_at(epoch: int, base_lr: float = 1e-4) -> float:
    """Step schedule: the learning rate halves every 50 epochs."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return base_lr * 0.5 ** (epoch // 50)


def save_checkpoint(
    path,
    student: ModelParams,
    teacher: ModelParams,
    opt: OptimizerState,
    predictions: np.ndarray | None = None,
    pseudo_labels: np.ndarray | None = None,
    meta: dict | None = None,
) -> None:
    """Binary container: header, student/adam/teacher vectors, ensemble
    state arrays, then a JSON trailer with run metadata."""
    if teacher.size != student.size or teacher.arch != student.arch:
        raise ValueError("student/teacher layout mismatch")
    n_patches = 0 if predictions is None else int(predictions.shape[0])
    meta = dict(meta or {})
    meta.setdefault("arch", student.arch)
    meta["lr"] = opt.lr
    meta["weight_decay"] = opt.weight_decay
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIQ", CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                             student.size))
        fh.write(student.values.astype("<f8").tobytes())
        fh.write(opt.m.astype("<f8").tobytes())
        fh.write(opt.v.astype("<f8").tobytes())
        fh.write(teacher.values.astype("<f8").tobytes())
        fh.write(struct.pack("<QQ", opt.step, n_patches))
        if n_patches:
            fh.write(np.ascontiguousarray(predictions, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(pseudo_labels, dtype="<f8").tobytes())
        fh.write(json.dumps(meta, sort_keys=True).encode("utf-8"))


def load_checkpoint(path) -> dict:
    """Inverse of save_checkpoint; returns a dict of the stored pieces."""
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, version, n = struct.unpack_from("<4sIQ", blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 16

    def take(count):
        nonlocal pos
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(
            np.float64
        )
        pos += count * 8
        return arr

    student_values = take(n)
    m = take(n)
    v = take(n)
    teacher_values = take(n)
    step, n_patches = struct.unpack_from("<QQ", blob, pos)
    pos += 16
    predictions = pseudo = None
    if n_patches:
        predictions = take(2 * n_patches).reshape(n_patches, 2)
        pseudo = take(2 * n_patches).reshape(n_patches, 2)
    meta = json.loads(blob[pos:].decode("utf-8"))
    arch = meta.get("arch", "conv")
    student = ModelParams(arch, student_values)
    if student.size != n:
        raise ValueError("parameter count does not match architecture")
    opt = init_optimizer(student, lr=meta.get("lr", 1e-4),
                         weight_decay=meta.get("weight_decay", 4e-5))
    opt.m, opt.v, opt.step = m, v, int(step)
    return {
        "student": student,
        "teacher": ModelParams(arch, teacher_values),
        "optimizer": opt,
        "predictions": predictions,
        "pseudo_labels": pseudo,
        "meta": meta,
    }
