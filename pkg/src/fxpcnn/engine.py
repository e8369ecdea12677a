"""Bit-exact fixed-point forward pass.

All arithmetic is on int64 mantissas. Two rounding disciplines:

* per-operation: every product is rescaled by 2**N (rounded), the nine
  products of a 3x3 window are summed with saturating adds (one dot-9
  unit), and the per-input-channel dot-9 results are again summed with
  saturating adds;
* at-end: all c_in * 9 raw products of an output pixel are summed exactly,
  then rounded once and saturated.

Dense layers reuse the dot-9 grouping: each output neuron's inputs are cut
into blocks of 9, the last block zero-padded.

When every partial sum provably fits in 53 bits the exact integer
accumulation is delegated to a float64 matmul; integers of that size are
represented exactly, so the result is identical to integer arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fixedpoint import QFormat, RoundingStrategy, round_shift_array
from .nn import Conv3x3, Dense, GlobalMaxPool, MaxPool2, im2col, maxpool2_batch
from .quantization import QuantizedModel

# elements of the per-operation product tensor processed at once
_CHUNK_ELEMENTS = 1 << 18


@dataclass(frozen=True)
class InferenceOutcome:
    cls: int
    fxp_logits: np.ndarray
    overflow_events: int


@dataclass(frozen=True)
class FxpTensor:
    mantissas: np.ndarray
    fmt: QFormat

    def __post_init__(self):
        if np.abs(self.mantissas).max(initial=0) > self.fmt.limit:
            raise ValueError("mantissa outside the format range")

    @property
    def shape(self) -> tuple:
        return self.mantissas.shape

    def to_float(self) -> np.ndarray:
        return np.ldexp(self.mantissas.astype(np.float64), -self.fmt.frac_bits)


def quantize_pixels(images: np.ndarray, fmt: QFormat) -> np.ndarray:
    """Byte pixels p -> mantissa of p/256, rounded half away from zero."""
    p = np.asarray(images, dtype=np.int64)
    return round_shift_array(p << fmt.frac_bits, 8)


def _exact_matmul(a: np.ndarray, b: np.ndarray, frac_bits: int) -> np.ndarray:
    """Exact int64 a @ b for operands bounded by 2**frac_bits."""
    k = a.shape[-1]
    if k * (1 << (2 * frac_bits)) <= (1 << 53):
        return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.int64)
    if k * (1 << (2 * frac_bits)) >= (1 << 63):
        raise OverflowError(f"{k} products of {frac_bits}-bit mantissas overflow a 64-bit accumulator")
    return a @ b


def _saturate_counting(y: np.ndarray, lim: int, counts: np.ndarray) -> np.ndarray:
    over = (y > lim) | (y < -lim)
    if over.any():
        counts += over.reshape(len(y), -1).sum(axis=1)
        y = np.clip(y, -lim, lim)
    return y


def _grouped_saturating_sum(r: np.ndarray, lim: int, counts: np.ndarray) -> np.ndarray:
    """r: (B, ..., G, 9) rounded products. Sequential saturating adds inside
    each group of 9, then across the G group results."""
    s = r[..., 0]
    for k in range(1, 9):
        s = _saturate_counting(s + r[..., k], lim, counts)
    acc = s[..., 0]
    for g in range(1, s.shape[-1]):
        acc = _saturate_counting(acc + s[..., g], lim, counts)
    return acc


def _linear_at_end(cols: np.ndarray, w2: np.ndarray, fmt: QFormat, counts: np.ndarray) -> np.ndarray:
    acc = _exact_matmul(cols, w2.T, fmt.frac_bits)
    return _saturate_counting(round_shift_array(acc, fmt.frac_bits), fmt.limit, counts)


def _linear_per_operation(cols: np.ndarray, w2: np.ndarray, fmt: QFormat, counts: np.ndarray) -> np.ndarray:
    """cols: (B, ..., K) with K a multiple of 9; w2: (n_out, K)."""
    n_out, k = w2.shape
    lead = cols.shape[:-1]
    b = lead[0]
    per_image = int(np.prod(lead[1:], dtype=np.int64)) * n_out * k
    step = max(1, _CHUNK_ELEMENTS // max(per_image, 1))
    out = np.empty(lead + (n_out,), dtype=np.int64)
    # sum |x_i| / 2**N + K/2 bounds every running sum of rounded products
    bound = _exact_matmul(np.abs(cols), np.abs(w2).T, fmt.frac_bits)
    risky = (bound + k * (1 << (fmt.frac_bits - 1))) >> fmt.frac_bits >= fmt.limit
    risky = risky.reshape(b, -1).any(axis=1)
    # products and their rounding fit in int32 up to N = 14, halving memory traffic
    narrow = np.int32 if 2 * fmt.frac_bits + 1 < 31 else np.int64
    cols_n, w_n = cols.astype(narrow, copy=False), w2.astype(narrow, copy=False)
    for start in range(0, b, step):
        sl = slice(start, start + step)
        prods = cols_n[sl][..., None, :] * w_n  # (b, ..., n_out, K), exact: |p| <= 2**(2N)
        r = _round_in_place(prods, fmt.frac_bits)
        out[sl] = r.sum(axis=-1, dtype=np.int64)
        hit = np.flatnonzero(risky[sl])
        if hit.size:
            sub = counts[sl][hit]
            grouped = r[hit].astype(np.int64).reshape(r[hit].shape[:-1] + (k // 9, 9))
            out[start + hit] = _grouped_saturating_sum(grouped, fmt.limit, sub)
            counts[start + hit] = sub
    return out


def _round_in_place(x: np.ndarray, shift: int) -> np.ndarray:
    """round_shift_array without temporaries; overwrites x.

    For negative x, floor((x + h - 1) / 2**s) with h = 2**(s-1) rounds ties
    away from zero; the arithmetic sign shift supplies the -1 exactly for negatives.
    """
    x += x >> (8 * x.dtype.itemsize - 1)
    x += np.int64(1 << (shift - 1))
    x >>= shift
    return x


def _pad_to_blocks(v: np.ndarray, w2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n_in = w2.shape[1]
    padded = -(-n_in // 9) * 9
    if padded == n_in:
        return v, w2
    v = np.concatenate([v, np.zeros(v.shape[:-1] + (padded - n_in,), dtype=v.dtype)], axis=-1)
    w2 = np.concatenate([w2, np.zeros((w2.shape[0], padded - n_in), dtype=w2.dtype)], axis=1)
    return v, w2


def forward_fxp(qm: QuantizedModel, x: np.ndarray, strategy: RoundingStrategy,
                record: bool = False):
    """Run quantized layers on input mantissas x of shape (B, C, H, W).

    Returns (output mantissas, per-image overflow counts[, per-layer outputs]).
    """
    strategy = RoundingStrategy.parse(strategy)
    fmt = qm.fmt
    counts = np.zeros(len(x), dtype=np.int64)
    x = np.asarray(x, dtype=np.int64)
    trace = []
    linear = _linear_at_end if strategy is RoundingStrategy.AT_END else _linear_per_operation
    for layer, w in zip(qm.config.layers, qm.mantissas):
        if isinstance(layer, Conv3x3):
            cols = im2col(x, layer.zero_pad)  # (B, Ho, Wo, C*9), already grouped per channel
            y = linear(cols, w.reshape(layer.c_out, -1), fmt, counts)
            if layer.relu:
                y = np.maximum(y, 0)
            x = y.transpose(0, 3, 1, 2)
        elif isinstance(layer, MaxPool2):
            x = maxpool2_batch(x)
        elif isinstance(layer, GlobalMaxPool):
            x = x.reshape(x.shape[0], x.shape[1], -1).max(axis=2)
        elif isinstance(layer, Dense):
            v = x.reshape(len(x), -1)
            if strategy is RoundingStrategy.PER_OPERATION:
                v, w2 = _pad_to_blocks(v, w)
            else:
                w2 = w
            x = linear(v, w2, fmt, counts)
        else:
            raise TypeError(f"unknown layer {layer!r}")
        if record:
            trace.append(x.copy())
    if record:
        return x, counts, trace
    return x, counts


def _as_batch(qm: QuantizedModel, images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    shape = qm.config.input_shape
    if images.shape == shape or images.shape == shape[1:]:
        images = images.reshape((1,) + shape)
    elif images.ndim == len(shape):  # (B, H, W) with a single input channel
        images = images.reshape((len(images),) + shape)
    if images.shape[1:] != shape:
        raise ValueError(f"images of shape {images.shape} do not fit model input {shape}")
    if images.size and (images.min() < 0 or images.max() > 255):
        raise ValueError("pixel values must be bytes in [0, 255]")
    return images


def infer_fxp_batch(qm: QuantizedModel, images: np.ndarray, strategy, batch_size: int = 500):
    """Fixed-point logits (mantissas) and per-image overflow counts for byte images."""
    images = _as_batch(qm, images)
    logits, overflow = [], []
    for start in range(0, len(images), batch_size):
        x = quantize_pixels(images[start:start + batch_size], qm.fmt)
        out, counts = forward_fxp(qm, x, strategy)
        logits.append(out.reshape(len(out), -1))
        overflow.append(counts)
    if not logits:
        return np.zeros((0, qm.config.num_outputs), dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(logits), np.concatenate(overflow)


def infer_fxp(qm: QuantizedModel, image: np.ndarray, strategy) -> InferenceOutcome:
    logits, overflow = infer_fxp_batch(qm, image, strategy)
    if len(logits) != 1:
        raise ValueError("infer_fxp takes a single image; use infer_fxp_batch")
    return InferenceOutcome(int(np.argmax(logits[0])), logits[0], int(overflow[0]))


def mismatch_rate(qm: QuantizedModel, strategy, data, float_ref) -> float:
    """Fraction of images whose fixed-point class differs from the float network's."""
    from .nn import predict_logits

    images = data.images if hasattr(data, "images") else np.asarray(data)
    if len(images) == 0:
        raise ValueError("empty dataset")
    model, weights = float_ref
    ref = predict_logits(model, weights, images).argmax(axis=1)
    logits, _ = infer_fxp_batch(qm, images, strategy)
    return float(np.mean(logits.argmax(axis=1) != ref))


def overflow_audit(qm: QuantizedModel, strategy, data) -> int:
    images = data.images if hasattr(data, "images") else np.asarray(data)
    _, overflow = infer_fxp_batch(qm, images, strategy)
    return int(overflow.sum())


def dump_mantissas(qm: QuantizedModel, image: np.ndarray, strategy, path) -> Path:
    """Write every layer's output mantissas, one integer per line.

    Each layer starts with a ``# layer <k> <kind> shape <dims>`` line; the
    quantized input comes first as layer -1.
    """
    x = quantize_pixels(_as_batch(qm, image), qm.fmt)
    _, _, trace = forward_fxp(qm, x, strategy, record=True)
    lines = [f"# layer -1 input shape {' '.join(map(str, x.shape[1:]))}"]
    lines.extend(str(int(v)) for v in x[0].ravel())
    for k, (layer, out) in enumerate(zip(qm.config.layers, trace)):
        lines.append(f"# layer {k} {layer.kind} shape {' '.join(map(str, out.shape[1:]))}")
        lines.extend(str(int(v)) for v in out[0].ravel())
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path
