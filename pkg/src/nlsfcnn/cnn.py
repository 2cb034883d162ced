"""Three-layer convolutional network trained from scratch with numpy.

The network maps a pre-filtered patch to a clean patch::

    F1 = relu(W1 * P  + B1)      64 filters, 9x9
    F2 = relu(W2 * F1 + B2)      32 filters, 1x1
    F3 = relu(W3 * F2 + B3)       1 filter,  5x5

``*`` is a valid (unpadded) cross-correlation, so the output is 12 pixels
smaller than the input in each dimension.  Gradients of the MSE loss are
derived by hand; see :func:`loss_and_grads`.

Arrays are channel-first: a single sample is ``(C, H, W)``, a batch is
``(B, C, H, W)``.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .image import as_image, atomic_write, mirror_pad, patch_origins, reconstruct, PatchGrid
from .nlsf import NlsfConfig, nlsf
from .noise import NoiseSpec, derive_seed, detect, inject, rng

log = logging.getLogger(__name__)

MODEL_MAGIC = b"NLSFCNN1"
# (out, in, kernel) per layer
ARCHITECTURE = ((64, 1, 9), (32, 64, 1), (1, 32, 5))


class ModelFormatError(ValueError):
    pass


@dataclass
class ConvLayer:
    weights: np.ndarray  # (out, in, k, k)
    biases: np.ndarray  # (out,)

    def __post_init__(self):
        w, b = self.weights, self.biases
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ValueError(f"weights must be (out, in, k, k), got {w.shape}")
        if b.shape != (w.shape[0],):
            raise ValueError(f"biases must be ({w.shape[0]},), got {b.shape}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> int:
        return self.weights.shape[2]

    def copy(self) -> "ConvLayer":
        return ConvLayer(self.weights.copy(), self.biases.copy())


@dataclass
class ModelMeta:
    density: float = 0.0
    seed: int = 0
    steps: int = 0


@dataclass
class CnnModel:
    layers: list[ConvLayer]
    meta: ModelMeta = field(default_factory=ModelMeta)
    # (step, minibatch loss) pairs from the last training run; not serialized
    history: list[tuple[int, float]] = field(default_factory=list, compare=False)

    @classmethod
    def init(cls, seed: int = 0, architecture=ARCHITECTURE, std: float = 1e-3) -> "CnnModel":
        """Gaussian(0, std) weights and zero biases."""
        g = rng(seed)
        layers = [ConvLayer(g.normal(0.0, std, size=(o, i, k, k)), np.zeros(o))
                  for o, i, k in architecture]
        return cls(layers, ModelMeta(seed=seed))

    @classmethod
    def identity(cls, seed: int = 0, architecture=ARCHITECTURE, std: float = 1e-3) -> "CnnModel":
        """Gaussian init plus a pass-through path.

        The kernel from input channel 0 to output channel 0 of every layer is
        a centred delta, so (inputs being non-negative) the untrained network
        returns the centre crop of its input up to an O(std) perturbation.
        """
        model = cls.init(seed, architecture, std)
        for layer in model.layers:
            k = layer.kernel
            layer.weights[0, 0] = 0.0
            layer.weights[0, 0, k // 2, k // 2] = 1.0
        return model

    @property
    def shrink(self) -> int:
        """Pixels lost per spatial dimension through the valid convolutions."""
        return sum(layer.kernel - 1 for layer in self.layers)

    @property
    def architecture(self):
        return tuple((l.out_channels, l.in_channels, l.kernel) for l in self.layers)

    def params(self) -> list[np.ndarray]:
        return [p for l in self.layers for p in (l.weights, l.biases)]

    def copy(self) -> "CnnModel":
        return CnnModel([l.copy() for l in self.layers], replace(self.meta), list(self.history))


def _batched(x: np.ndarray):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (C, H, W) or (B, C, H, W), got shape {x.shape}")


# Internally activations are channel-major, (C, B, H, W), so every matrix
# product below runs on contiguous (C, B*H*W) planes.

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(C, B, H, W) -> (C*k*k, B*H'*W') window matrix."""
    c, b, h, w = x.shape
    ho, wo = h - k + 1, w - k + 1
    cols = np.empty((c, k, k, b, ho, wo), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            cols[:, u, v] = x[:, :, u:u + ho, v:v + wo]
    return cols.reshape(c * k * k, b * ho * wo)


def _conv_cm(x: np.ndarray, layer: ConvLayer):
    """Valid cross-correlation on a channel-major batch; returns (z, cols)."""
    o, c, k, _ = layer.weights.shape
    _, b, h, w = x.shape
    ho, wo = h - k + 1, w - k + 1
    cols = None
    if k == 1:
        z = (layer.weights[:, :, 0, 0] @ x.reshape(c, -1)).reshape(o, b, h, w)
    elif c <= o:
        cols = _im2col(x, k)
        z = (layer.weights.reshape(o, -1) @ cols).reshape(o, b, ho, wo)
    else:
        # few outputs: contract channels for every kernel tap, then shift-add
        taps = layer.weights.transpose(2, 3, 0, 1).reshape(k * k * o, c) @ x.reshape(c, -1)
        taps = taps.reshape(k, k, o, b, h, w)
        z = np.zeros((o, b, ho, wo), dtype=np.result_type(x, layer.weights))
        for u in range(k):
            for v in range(k):
                z += taps[u, v, :, :, u:u + ho, v:v + wo]
    z += layer.biases.astype(z.dtype, copy=False)[:, None, None, None]
    return z, cols


def _conv_grads(dz: np.ndarray, a_in: np.ndarray, cols, layer: ConvLayer, need_input: bool):
    """Gradients w.r.t. weights, biases and (optionally) the layer input, channel-major."""
    o, c, k, _ = layer.weights.shape
    _, b, h, w = a_in.shape
    ho, wo = dz.shape[2], dz.shape[3]
    db = dz.sum(axis=(1, 2, 3))
    dz2 = dz.reshape(o, -1)
    da = None
    if k == 1:
        x2 = a_in.reshape(c, -1)
        dw = (dz2 @ x2.T)[:, :, None, None]
        if need_input:
            da = (layer.weights[:, :, 0, 0].T @ dz2).reshape(c, b, h, w)
        return dw, db, da
    if cols is not None:
        dw = (dz2 @ cols.T).reshape(o, c, k, k)
    else:
        # shifted copies of the (small) output gradient, laid out on the input grid
        shifted = np.zeros((k, k, o, b, h, w), dtype=dz.dtype)
        for u in range(k):
            for v in range(k):
                shifted[u, v, :, :, u:u + ho, v:v + wo] = dz
        dw = (shifted.reshape(k * k * o, -1) @ a_in.reshape(c, -1).T).reshape(k, k, o, c).transpose(2, 3, 0, 1)
    if need_input:
        if c <= o:
            da = np.zeros((c, b, h, w), dtype=dw.dtype)
            for u in range(k):
                for v in range(k):
                    da[:, :, u:u + ho, v:v + wo] += (layer.weights[:, :, u, v].T @ dz2).reshape(c, b, ho, wo)
        else:
            da = (layer.weights.transpose(1, 2, 3, 0).reshape(c, k * k * o)
                  @ shifted.reshape(k * k * o, -1)).reshape(c, b, h, w)
    return dw, db, da


def conv2d_valid(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """``out[o, i, j] = b[o] + sum_{c,u,v} w[o, c, u, v] * x[c, i+u, j+v]``."""
    xb, single = _batched(x)
    k = layer.kernel
    if xb.shape[1] != layer.in_channels:
        raise ValueError(f"input has {xb.shape[1]} channels, layer expects {layer.in_channels}")
    if xb.shape[2] < k or xb.shape[3] < k:
        raise ValueError(f"input {xb.shape[2:]} smaller than kernel {k}x{k}")
    z, _ = _conv_cm(np.ascontiguousarray(xb.transpose(1, 0, 2, 3)), layer)
    out = z.transpose(1, 0, 2, 3)
    return out[0] if single else out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _forward_cache(xb: np.ndarray, model: CnnModel):
    """Forward pass on a (B, C, H, W) batch keeping what backprop needs."""
    acts = [np.ascontiguousarray(xb.transpose(1, 0, 2, 3))]
    pre, cols = [], []
    for layer in model.layers:
        z, c = _conv_cm(acts[-1], layer)
        pre.append(z)
        cols.append(c)
        acts.append(relu(z))
    return acts, pre, cols


def forward(patch: np.ndarray, model: CnnModel) -> np.ndarray:
    xb, single = _batched(patch)
    if xb.shape[1] != 1:
        raise ValueError("network input must be single-channel")
    if min(xb.shape[2:]) <= model.shrink:
        raise ValueError(f"input {xb.shape[2:]} too small: need at least {model.shrink + 1} pixels per side")
    acts, _, _ = _forward_cache(xb, model)
    out = acts[-1].transpose(1, 0, 2, 3)
    return out[0] if single else out


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    d = pred - target
    return float(np.mean(d * d))


def loss_and_grads(x: np.ndarray, target: np.ndarray, model: CnnModel):
    """Mean batch MSE and its exact gradients ``[(dW1, dB1), (dW2, dB2), (dW3, dB3)]``.

    ``x`` is ``(B, 1, H, W)``, ``target`` is ``(B, 1, H-12, W-12)``.  The
    loss is the per-sample MSE averaged over the batch.  ReLU contributes a
    subgradient of 0 at 0.
    """
    xb, _ = _batched(x)
    tb, _ = _batched(target)
    acts, pre, cols = _forward_cache(xb, model)
    tcm = tb.transpose(1, 0, 2, 3)
    if acts[-1].shape != tcm.shape:
        raise ValueError(f"target shape {tb.shape} does not match output shape "
                         f"{acts[-1].transpose(1, 0, 2, 3).shape}")
    diff = acts[-1] - tcm
    loss = float(np.mean(diff * diff))
    grad = (2.0 / diff.size) * diff
    grads = []
    for i in reversed(range(len(model.layers))):
        dz = grad * (pre[i] > 0)
        dw, db, grad = _conv_grads(dz, acts[i], cols[i], model.layers[i], need_input=i > 0)
        grads.append((dw, db))
    return loss, grads[::-1]


def backward(patch: np.ndarray, target: np.ndarray, model: CnnModel):
    """Gradients of ``mse_loss(forward(patch), target)`` for a single sample."""
    _, grads = loss_and_grads(patch, target, model)
    return grads


@dataclass(frozen=True)
class TrainConfig:
    input_patch: int = 64
    stride: int = 32
    learning_rate: float = 1e-4
    steps: int = 2000
    batch: int = 16
    seed: int = 0
    density: float = 0.5
    optimizer: str = "adam"  # "adam" or "sgd" (with momentum)
    momentum: float = 0.9
    init: str = "identity"  # "identity" or "gaussian"
    init_std: float = 1e-3
    log_every: int = 100

    def __post_init__(self):
        if self.input_patch <= 12:
            raise ValueError("input_patch must exceed the 12-pixel network shrinkage")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch < 1 or self.steps < 0 or self.stride < 1:
            raise ValueError("batch and stride must be >= 1, steps >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.init not in ("gaussian", "identity"):
            raise ValueError(f"unknown init {self.init!r}")


class SGD:
    def __init__(self, params, lr, momentum=0.9):
        self.lr, self.momentum = lr, momentum
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        for p, g, v in zip(params, grads, self.velocity):
            v *= self.momentum
            v -= self.lr * g
            p += v


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def training_pairs(images, cfg: TrainConfig, nlsf_cfg: NlsfConfig, threads=None):
    """Stack of (pre-filtered input, clean centre target) patch pairs.

    Each clean image is corrupted at ``cfg.density`` with a seed derived from
    ``cfg.seed`` and its index, detected, and NLSF-filtered; inputs are
    ``input_patch``-sized windows of the filtered image and targets the
    matching centre crop of the clean image.
    """
    k, s = cfg.input_patch, 6
    inputs, targets = [], []
    for idx, clean in enumerate(images):
        clean = as_image(clean)
        noisy = inject(clean, NoiseSpec(cfg.density, seed=derive_seed(cfg.seed, "train", idx)))
        filtered = nlsf(noisy, detect(noisy, nlsf_cfg.delta), nlsf_cfg, threads=threads)
        for r, c in patch_origins(*clean.shape, k, cfg.stride):
            inputs.append(filtered[r:r + k, c:c + k])
            targets.append(clean[r + s:r + k - s, c + s:c + k - s])
    return np.stack(inputs)[:, None], np.stack(targets)[:, None]


def fit(model: CnnModel, inputs: np.ndarray, targets: np.ndarray, cfg: TrainConfig) -> CnnModel:
    """Run ``cfg.steps`` minibatch steps on prepared patch pairs; returns a new model."""
    model = model.copy()
    params = model.params()
    opt = (SGD(params, cfg.learning_rate, cfg.momentum) if cfg.optimizer == "sgd"
           else Adam(params, cfg.learning_rate))
    g = rng(derive_seed(cfg.seed, "batches"))
    n = len(inputs)
    order, pos = g.permutation(n), 0
    history = []
    for step in range(cfg.steps):
        if pos + cfg.batch > n:
            order, pos = g.permutation(n), 0
        idx = np.sort(order[pos:pos + cfg.batch]) if cfg.batch <= n else g.integers(0, n, cfg.batch)
        pos += cfg.batch
        loss, grads = loss_and_grads(inputs[idx], targets[idx], model)
        opt.step(params, [t for pair in grads for t in pair])
        history.append((step, loss))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d loss %.6g", step, loss)
    model.history = history
    model.meta = ModelMeta(density=cfg.density, seed=cfg.seed, steps=model.meta.steps + cfg.steps)
    return model


def train(images, cfg: TrainConfig, nlsf_cfg: NlsfConfig | None = None, model: CnnModel | None = None,
          threads=None) -> CnnModel:
    images = list(images)
    if not images:
        raise ValueError("training corpus is empty")
    nlsf_cfg = nlsf_cfg or NlsfConfig.for_density(cfg.density)
    for img in images:
        if min(np.shape(img)) < cfg.input_patch:
            raise ValueError(f"image of shape {np.shape(img)} is smaller than the {cfg.input_patch}px input patch")
    inputs, targets = training_pairs(images, cfg, nlsf_cfg, threads=threads)
    log.info("training on %d patch pairs", len(inputs))
    if model is None:
        make = CnnModel.identity if cfg.init == "identity" else CnnModel.init
        model = make(cfg.seed, std=cfg.init_std)
    return fit(model, inputs, targets, cfg)


def write_loss_history(history, path) -> None:
    lines = ["step,loss"] + [f"{s},{l!r}" for s, l in history]
    atomic_write(path, ("\n".join(lines) + "\n").encode())


def predict_image(filtered: np.ndarray, model: CnnModel, input_patch: int = 64, stride: int = 26,
                  batch: int = 32) -> np.ndarray:
    """Run the network over a whole image with mirror padding and overlap averaging."""
    filtered = as_image(filtered)
    m = model.shrink // 2
    padded = mirror_pad(filtered, m)
    h, w = filtered.shape
    if min(padded.shape) < input_patch:
        raise ValueError(f"image {h}x{w} too small: needs {input_patch - 2 * m} pixels per side")
    origins = patch_origins(*padded.shape, input_patch, stride)
    outs = []
    for i in range(0, len(origins), batch):
        chunk = np.stack([padded[r:r + input_patch, c:c + input_patch] for r, c in origins[i:i + batch]])
        outs.append(forward(chunk[:, None], model)[:, 0])
    # the output window of a padded-image origin starts at the same coordinates in the original image
    grid = PatchGrid(input_patch - 2 * m, stride, origins, np.concatenate(outs))
    return reconstruct(grid, w, h)


def denoise_image(noisy: np.ndarray, model: CnnModel, nlsf_cfg: NlsfConfig | None = None,
                  switch_output: bool = True, threads=None, input_patch: int = 64,
                  stride: int = 26) -> np.ndarray:
    """Detect, NLSF pre-filter, then refine with the network.

    With ``switch_output`` (the default) only flagged pixels take the
    network's estimate; unflagged pixels keep their input values, as in the
    switching filter itself.  Without ``nlsf_cfg`` the pre-filter patch size
    follows the density the model was trained at.
    """
    noisy = as_image(noisy)
    nlsf_cfg = nlsf_cfg or NlsfConfig.for_density(model.meta.density)
    mask = detect(noisy, nlsf_cfg.delta)
    filtered = nlsf(noisy, mask, nlsf_cfg, threads=threads)
    out = predict_image(filtered, model, input_patch, stride)
    if switch_output:
        out = np.where(mask, out, noisy)
    return out


def model_bytes(model: CnnModel) -> bytes:
    parts = [MODEL_MAGIC]
    for layer in model.layers:
        o, i, kh, kw = layer.weights.shape
        parts.append(struct.pack("<4I", o, i, kh, kw))
        parts.append(np.ascontiguousarray(layer.weights, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(layer.biases, dtype="<f4").tobytes())
    m = model.meta
    parts.append(struct.pack("<QIf", m.seed, m.steps, m.density))
    return b"".join(parts)


def save_model(model: CnnModel, path) -> None:
    atomic_write(path, model_bytes(model))


def parse_model(data: bytes, architecture=ARCHITECTURE) -> CnnModel:
    """Decode a model file; ``architecture=None`` accepts any layer shapes."""
    if data[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ModelFormatError("bad magic: not an NLSFCNN1 model file")
    pos = len(MODEL_MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise ModelFormatError(f"truncated model file: needed {pos + n} bytes, have {len(data)}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    layers = []
    n_layers = len(architecture) if architecture is not None else 3
    for li in range(n_layers):
        o, i, kh, kw = struct.unpack("<4I", take(16))
        if kh != kw:
            raise ModelFormatError(f"layer {li + 1}: non-square kernel {kh}x{kw}")
        if architecture is not None and (o, i, kh) != tuple(architecture[li]):
            raise ModelFormatError(f"layer {li + 1}: dimensions {(o, i, kh, kw)} do not match the "
                                   f"fixed architecture {architecture[li]}")
        w = np.frombuffer(take(4 * o * i * kh * kw), dtype="<f4").reshape(o, i, kh, kw)
        b = np.frombuffer(take(4 * o), dtype="<f4")
        layers.append(ConvLayer(w.astype(np.float64), b.astype(np.float64)))
    seed, steps, density = struct.unpack("<QIf", take(16))
    if pos != len(data):
        raise ModelFormatError(f"{len(data) - pos} trailing bytes after model payload")
    return CnnModel(layers, ModelMeta(density=float(density), seed=seed, steps=steps))


def load_model(path, architecture=ARCHITECTURE) -> CnnModel:
    return parse_model(Path(path).read_bytes(), architecture)
