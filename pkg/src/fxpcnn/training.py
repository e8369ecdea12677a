"""On-the-fly MNIST augmentation and SGD training of bias-free CNNs.

Backpropagation is written out by hand against the layer set in ``nn``;
``grad_check`` compares it with central finite differences in float64.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage

from .nn import (
    Conv3x3,
    Dense,
    GlobalMaxPool,
    MaxPool2,
    ModelConfig,
    WeightSet,
    check_weights,
    im2col,
    init_weights,
)

log = logging.getLogger(__name__)

IMAGE_SIDE = 28


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class AugmentationConfig:
    invert: bool = True
    max_rotation_deg: float = 10.0
    max_resize_px: int = 4
    max_intensity_shift: int = 80
    max_noise_fraction: float = 0.10
    # "toward-background" subtracts on dark backgrounds and adds on inverted ones
    intensity_mode: str = "toward-background"
    mix_camera_images: bool = False

    def __post_init__(self):
        for name in ("max_rotation_deg", "max_resize_px", "max_intensity_shift", "max_noise_fraction"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.max_noise_fraction > 1:
            raise ValueError("max_noise_fraction must be <= 1")
        if self.max_resize_px >= IMAGE_SIDE:
            raise ValueError("max_resize_px must be smaller than the image")
        if self.intensity_mode not in ("toward-background", "add", "subtract"):
            raise ValueError(f"unknown intensity_mode {self.intensity_mode!r}")
        if self.mix_camera_images:
            raise NotImplementedError("mixing camera frames into batches is not supported")

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls(invert=False, max_rotation_deg=0.0, max_resize_px=0,
                   max_intensity_shift=0, max_noise_fraction=0.0)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.02
    momentum: float = 0.9
    seed: int = 0
    # multiplicative learning-rate decay applied after every epoch
    lr_decay: float = 1.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ValueError("learning_rate must be >= 0 and momentum in [0, 1)")


@dataclass
class LabeledDataset:
    images: np.ndarray  # (n, H, W) uint8
    labels: np.ndarray  # (n,) int
    name: str = field(default="dataset", compare=False)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3:
            raise ValueError(f"images must be (n, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.dtype != np.uint8:
            if self.images.size and (self.images.min() < 0 or self.images.max() > 255):
                raise ValueError("pixel values must lie in [0, 255]")
            self.images = self.images.astype(np.uint8)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], name=self.name)


# -- augmentation ----------------------------------------------------------

def _to_bytes(a: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(a), 0, 255)


def _fit_to_side(a: np.ndarray, side: int, fill: float) -> np.ndarray:
    n = a.shape[0]
    if n > side:
        off = (n - side) // 2
        return a[off:off + side, off:off + side]
    if n < side:
        out = np.full((side, side), fill, dtype=a.dtype)
        off = (side - n) // 2
        out[off:off + n, off:off + n] = a
        return out
    return a


def augment(image: np.ndarray, cfg: AugmentationConfig, seed) -> np.ndarray:
    """Apply the augmentation chain to one 28x28 byte image.

    Order: inversion, rotation, resize, intensity shift, random-pixel noise.
    All random draws happen unconditionally so the stream for a given seed
    does not depend on which filters are enabled.
    """
    # bounded integer draws consume a range-dependent number of bits, so
    # every parameter is derived from one fixed block of uniforms instead
    u = np.random.default_rng(seed).random(5)
    angle = (2.0 * u[0] - 1.0) * cfg.max_rotation_deg
    k = cfg.max_resize_px
    resize = min(int(u[1] * (2 * k + 1)), 2 * k) - k
    shift = min(int(u[2] * (cfg.max_intensity_shift + 1)), cfg.max_intensity_shift)
    noise_frac = u[3] * cfg.max_noise_fraction
    noise_seed = int(u[4] * 2**53)

    img = np.asarray(image, dtype=np.float64)
    if img.shape != (IMAGE_SIDE, IMAGE_SIDE):
        raise ValueError(f"augment expects a 28x28 image, got {img.shape}")
    background = 0.0
    if cfg.invert:
        img = 255.0 - img
        background = 255.0
    if angle != 0.0:
        img = _to_bytes(ndimage.rotate(img, angle, reshape=False, order=1,
                                       mode="constant", cval=background))
    if resize != 0:
        new = IMAGE_SIDE + resize
        zoomed = ndimage.zoom(img, new / IMAGE_SIDE, order=1, mode="nearest", grid_mode=True)
        img = _to_bytes(_fit_to_side(zoomed, IMAGE_SIDE, background))
    if shift:
        mode = cfg.intensity_mode
        if mode == "toward-background":
            mode = "add" if cfg.invert else "subtract"
        img = img + shift if mode == "add" else img - shift
    n_noise = int(round(noise_frac * img.size))
    if n_noise:
        nrng = np.random.default_rng(noise_seed)
        flat = img.ravel().copy()
        where = nrng.choice(flat.size, size=n_noise, replace=False)
        flat[where] = nrng.integers(0, 256, size=n_noise)
        img = flat.reshape(img.shape)
    return _to_bytes(img).astype(np.uint8)


def augment_batch(images: np.ndarray, cfg: AugmentationConfig, seeds) -> np.ndarray:
    return np.stack([augment(im, cfg, s) for im, s in zip(images, seeds)])


def augmented_copy(data: LabeledDataset, cfg: AugmentationConfig, seed: int) -> LabeledDataset:
    """Deterministically augmented copy of a dataset; image i uses seed (seed, i)."""
    seeds = [(seed, i) for i in range(len(data))]
    return LabeledDataset(augment_batch(data.images, cfg, seeds), data.labels.copy(),
                          name=f"{data.name}+aug{seed}")


# -- backprop --------------------------------------------------------------

def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _col2im(dcols: np.ndarray, c: int, h: int, w: int, zero_pad: bool) -> np.ndarray:
    b, ho, wo, _ = dcols.shape
    d = dcols.reshape(b, ho, wo, c, 3, 3).transpose(0, 3, 4, 5, 1, 2)  # B, C, 3, 3, Ho, Wo
    hp, wp = (h + 2, w + 2) if zero_pad else (h, w)
    dx = np.zeros((b, c, hp, wp), dtype=dcols.dtype)
    for ky in range(3):
        for kx in range(3):
            dx[:, :, ky:ky + ho, kx:kx + wo] += d[:, :, ky, kx]
    return dx[:, :, 1:-1, 1:-1] if zero_pad else dx


def loss_and_grads(model: ModelConfig, weights: WeightSet, x: np.ndarray, y: np.ndarray,
                   need_logits: bool = False):
    """Mean softmax cross-entropy of a batch and its gradient for every layer.

    Softmax appears only here; inference paths use argmax.
    """
    dtype = x.dtype
    caches = []
    a = x
    for layer, w in zip(model.layers, weights):
        if isinstance(layer, Conv3x3):
            b, c, h, wd = a.shape
            cols = im2col(a, layer.zero_pad)
            z = cols @ w.reshape(layer.c_out, -1).T.astype(dtype, copy=False)  # B, Ho, Wo, Cout
            out = np.maximum(z, 0) if layer.relu else z
            caches.append((cols, (c, h, wd), z > 0 if layer.relu else None))
            a = out.transpose(0, 3, 1, 2)
        elif isinstance(layer, MaxPool2):
            b, c, h, wd = a.shape
            blocks = a.reshape(b, c, h // 2, 2, wd // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, wd // 2, 4)
            idx = blocks.argmax(axis=-1)
            caches.append((idx, a.shape))
            a = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        elif isinstance(layer, GlobalMaxPool):
            b, c = a.shape[:2]
            flat = a.reshape(b, c, -1)
            idx = flat.argmax(axis=-1)
            caches.append((idx, a.shape))
            a = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        elif isinstance(layer, Dense):
            v = a.reshape(a.shape[0], -1)
            caches.append((v, a.shape))
            a = v @ w.T.astype(dtype, copy=False)
        else:
            raise TypeError(f"unknown layer {layer!r}")

    logits = a
    p = _softmax(logits)
    n = len(y)
    loss = float(-np.mean(np.log(np.maximum(p[np.arange(n), y], 1e-300))))
    g = p
    g[np.arange(n), y] -= 1.0
    g /= n

    grads: list = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer, w, cache = model.layers[i], weights[i], caches[i]
        if isinstance(layer, Dense):
            v, in_shape = cache
            grads[i] = g.T @ v
            g = (g @ w.astype(dtype, copy=False)).reshape(in_shape)
        elif isinstance(layer, GlobalMaxPool):
            idx, in_shape = cache
            b, c = in_shape[:2]
            dx = np.zeros((b, c, int(np.prod(in_shape[2:]))), dtype=dtype)
            np.put_along_axis(dx, idx[..., None], g[..., None], axis=-1)
            g = dx.reshape(in_shape)
        elif isinstance(layer, MaxPool2):
            idx, in_shape = cache
            b, c, h, wd = in_shape
            dx = np.zeros((b, c, h // 2, wd // 2, 4), dtype=dtype)
            np.put_along_axis(dx, idx[..., None], g[..., None], axis=-1)
            g = dx.reshape(b, c, h // 2, wd // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(in_shape)
        elif isinstance(layer, Conv3x3):
            cols, (c, h, wd), mask = cache
            gz = g.transpose(0, 2, 3, 1)  # B, Ho, Wo, Cout
            if mask is not None:
                gz = gz * mask
            gz2 = gz.reshape(-1, layer.c_out)
            grads[i] = (gz2.T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)
            if i > 0:
                dcols = gz @ w.reshape(layer.c_out, -1).astype(dtype, copy=False)
                g = _col2im(dcols, c, h, wd, layer.zero_pad)
    if need_logits:
        return loss, grads, logits
    return loss, grads


# -- training --------------------------------------------------------------

def _batch_input(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    return (images.astype(dtype) / dtype(256.0))[:, None]


def evaluate(model: ModelConfig, weights: WeightSet, data: LabeledDataset, batch_size: int = 1000) -> float:
    from .nn import predict_logits

    if len(data) == 0:
        return float("nan")
    pred = predict_logits(model, weights, data.images, batch_size).argmax(axis=1)
    return float(np.mean(pred == data.labels))


def train(
    model: ModelConfig,
    data: LabeledDataset,
    aug: AugmentationConfig,
    cfg: TrainConfig,
    test_data: LabeledDataset | None = None,
    weights: WeightSet | None = None,
    progress: Callable[[dict], None] | None = None,
):
    """Mini-batch SGD with momentum on softmax cross-entropy.

    Every mini-batch is augmented freshly. Returns the final weights (rounded
    to float32 values, which is what a bundle stores) and the per-epoch trace
    of ``{"epoch", "loss", "train_acc", "test_acc"}`` dicts. ``test_data`` is
    evaluated as given; augment it beforehand for an augmented test split.
    """
    n_classes = model.num_outputs
    if len(data) == 0:
        raise ValueError("empty training set")
    if data.labels.min() < 0 or data.labels.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    rng = np.random.default_rng(cfg.seed)
    if weights is None:
        weights = init_weights(model, rng)
    check_weights(model, weights)
    params = [None if w is None else np.asarray(w, dtype=np.float32).copy() for w in weights]
    velocity = [None if w is None else np.zeros_like(w) for w in params]

    trace = []
    lr = cfg.learning_rate
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(data))
        loss_sum, correct, seen = 0.0, 0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            seeds = rng.integers(0, 2**63 - 1, size=len(idx))
            batch = augment_batch(data.images[idx], aug, seeds)
            x = _batch_input(batch)
            y = data.labels[idx]
            loss, grads, logits = loss_and_grads(model, params, x, y, need_logits=True)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, sample {start}; lower the learning rate "
                    f"(currently {lr:g})")
            for p, v, g in zip(params, velocity, grads):
                if p is None:
                    continue
                v *= cfg.momentum
                v -= lr * g
                p += v
            loss_sum += loss * len(idx)
            correct += int(np.sum(logits.argmax(axis=1) == y))
            seen += len(idx)
        lr *= cfg.lr_decay
        current = [None if p is None else p.astype(np.float64) for p in params]
        row = {
            "epoch": epoch,
            "loss": loss_sum / seen,
            "train_acc": correct / seen,
            "test_acc": evaluate(model, current, test_data) if test_data is not None else float("nan"),
            "seconds": time.perf_counter() - t0,
        }
        trace.append(row)
        log.info("epoch %d loss %.4f train %.4f test %.4f (%.1fs)", epoch, row["loss"],
                 row["train_acc"], row["test_acc"], row["seconds"])
        if progress is not None:
            progress(row)
    final = [None if p is None else p.astype(np.float64) for p in params]
    return final, trace


def write_trace_csv(trace: list[dict], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_acc", "test_acc"])
        for row in trace:
            writer.writerow([row["epoch"], f"{row['train_acc']:.6f}", f"{row['test_acc']:.6f}"])


# -- gradient verification -------------------------------------------------

def sample_loss(model: ModelConfig, weights: WeightSet, image: np.ndarray, label: int) -> float:
    from .nn import forward_batch

    x = np.asarray(image, dtype=np.float64).reshape((1,) + model.input_shape)
    z = forward_batch(model, weights, x)[0]
    z = z - z.max()
    return float(np.log(np.exp(z).sum()) - z[label])


def grad_check(model: ModelConfig, weights: WeightSet, image: np.ndarray, label: int,
               epsilon: float = 1e-5, n_check: int = 100, seed: int = 0) -> float:
    """Worst relative error between backprop and central differences.

    ``image`` holds input values (already scaled to [0, 1)). At least
    ``n_check`` weights (or all of them, if fewer) are probed.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-6, 1e-3]")
    check_weights(model, weights)
    w64 = [None if w is None else np.array(w, dtype=np.float64) for w in weights]
    x = np.asarray(image, dtype=np.float64).reshape((1,) + model.input_shape)
    _, grads = loss_and_grads(model, w64, x, np.array([label]))

    slots = [(i, j) for i, w in enumerate(w64) if w is not None for j in range(w.size)]
    rng = np.random.default_rng(seed)
    if len(slots) > n_check:
        slots = [slots[k] for k in rng.choice(len(slots), size=n_check, replace=False)]

    worst = 0.0
    for i, j in slots:
        flat = w64[i].reshape(-1)
        orig = flat[j]
        flat[j] = orig + epsilon
        up = sample_loss(model, w64, image, label)
        flat[j] = orig - epsilon
        down = sample_loss(model, w64, image, label)
        flat[j] = orig
        numeric = (up - down) / (2 * epsilon)
        analytic = grads[i].reshape(-1)[j]
        denom = max(abs(numeric), abs(analytic), 1e-6)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst
