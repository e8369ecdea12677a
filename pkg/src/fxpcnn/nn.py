"""Bias-free float reference network and the LWDD architecture.

Tensors are (C, H, W) for a single image and (B, C, H, W) for batches.
Conv kernels are stored as (c_out, c_in, 3, 3) and dense matrices as
(n_out, n_in). There is no bias anywhere: the architecture forbids it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class Conv3x3:
    c_in: int
    c_out: int
    relu: bool = True
    zero_pad: bool = True

    kind = "conv3x3"


@dataclass(frozen=True)
class MaxPool2:
    kind = "maxpool2"


@dataclass(frozen=True)
class GlobalMaxPool:
    kind = "globalmaxpool"


@dataclass(frozen=True)
class Dense:
    n_in: int
    n_out: int

    kind = "dense"


LayerSpec = Union[Conv3x3, MaxPool2, GlobalMaxPool, Dense]
WeightSet = list  # per layer: ndarray for Conv3x3/Dense, None for pools

_LAYER_TYPES = {cls.kind: cls for cls in (Conv3x3, MaxPool2, GlobalMaxPool, Dense)}


class ShapeError(ValueError):
    pass


def has_weights(layer: LayerSpec) -> bool:
    return isinstance(layer, (Conv3x3, Dense))


def layer_output_shape(layer: LayerSpec, shape: tuple) -> tuple:
    if isinstance(layer, Conv3x3):
        if len(shape) != 3 or shape[0] != layer.c_in:
            raise ShapeError(f"{layer} cannot consume shape {shape}")
        c, h, w = shape
        if not layer.zero_pad:
            h, w = h - 2, w - 2
            if h < 1 or w < 1:
                raise ShapeError(f"valid conv on {shape} leaves nothing")
        return (layer.c_out, h, w)
    if isinstance(layer, MaxPool2):
        if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
            raise ShapeError(f"MaxPool2 needs even H and W, got {shape}")
        return (shape[0], shape[1] // 2, shape[2] // 2)
    if isinstance(layer, GlobalMaxPool):
        if len(shape) != 3:
            raise ShapeError(f"GlobalMaxPool needs a (C, H, W) input, got {shape}")
        return (shape[0],)
    if isinstance(layer, Dense):
        n = int(np.prod(shape))
        if n != layer.n_in:
            raise ShapeError(f"{layer} cannot consume {n} features")
        return (layer.n_out,)
    raise TypeError(f"unknown layer {layer!r}")


def weight_shape(layer: LayerSpec) -> tuple | None:
    if isinstance(layer, Conv3x3):
        return (layer.c_out, layer.c_in, 3, 3)
    if isinstance(layer, Dense):
        return (layer.n_out, layer.n_in)
    return None


@dataclass(frozen=True)
class ModelConfig:
    layers: tuple
    input_shape: tuple = (1, 28, 28)
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        self.shapes()  # validates the chain

    def shapes(self) -> list[tuple]:
        """Input shape followed by the output shape of every layer."""
        out = [self.input_shape]
        for layer in self.layers:
            out.append(layer_output_shape(layer, out[-1]))
        return out

    @property
    def num_outputs(self) -> int:
        return int(np.prod(self.shapes()[-1]))

    @property
    def weighted_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if has_weights(layer)]

    def count_weights(self) -> int:
        return sum(int(np.prod(weight_shape(l))) for l in self.layers if has_weights(l))

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            d = {"type": layer.kind}
            d.update({k: v for k, v in layer.__dict__.items()})
            layers.append(d)
        return {"name": self.name, "input_shape": list(self.input_shape), "layers": layers}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        layers = []
        for spec in d["layers"]:
            spec = dict(spec)
            layers.append(_LAYER_TYPES[spec.pop("type")](**spec))
        return cls(layers=layers, input_shape=tuple(d["input_shape"]), name=d.get("name", "custom"))


LWDD_CHANNELS = (4, 4, 8, 8, 16, 16)


def build_lwdd(num_classes: int = 10, channels: Sequence[int] = LWDD_CHANNELS) -> ModelConfig:
    """Low Weight Digit Detector: six 3x3 convs in pairs, two max pools,
    global max pooling and a single dense classifier."""
    if num_classes not in (10, 11):
        raise ValueError("num_classes must be 10 or 11")
    if len(channels) != 6:
        raise ValueError("LWDD needs six conv widths")
    c = list(channels)
    layers = [
        Conv3x3(1, c[0]), Conv3x3(c[0], c[1]), MaxPool2(),
        Conv3x3(c[1], c[2]), Conv3x3(c[2], c[3]), MaxPool2(),
        Conv3x3(c[3], c[4]), Conv3x3(c[4], c[5]), GlobalMaxPool(),
        Dense(c[5], num_classes),
    ]
    return ModelConfig(layers=layers, input_shape=(1, 28, 28), name="lwdd")


def init_weights(model: ModelConfig, seed: int | np.random.Generator = 0) -> WeightSet:
    """He-normal initialisation."""
    rng = np.random.default_rng(seed)
    weights = []
    for layer in model.layers:
        shape = weight_shape(layer)
        if shape is None:
            weights.append(None)
            continue
        fan_in = int(np.prod(shape[1:]))
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))
    return weights


def check_weights(model: ModelConfig, weights: WeightSet) -> None:
    if len(weights) != len(model.layers):
        raise ShapeError(f"{len(weights)} weight entries for {len(model.layers)} layers")
    for i, (layer, w) in enumerate(zip(model.layers, weights)):
        shape = weight_shape(layer)
        if shape is None:
            if w is not None:
                raise ShapeError(f"layer {i} ({layer.kind}) takes no weights")
        elif w is None or tuple(np.shape(w)) != shape:
            raise ShapeError(f"layer {i}: expected weights {shape}, got {None if w is None else np.shape(w)}")


# -- primitives ------------------------------------------------------------

def im2col(x: np.ndarray, zero_pad: bool = True) -> np.ndarray:
    """(B, C, H, W) -> (B, Ho, Wo, C*9); the last axis is ordered (c, ky, kx)."""
    if zero_pad:
        x = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(x, (3, 3), axis=(2, 3))  # B, C, Ho, Wo, 3, 3
    b, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho, wo, c * 9)


def conv_batch(x: np.ndarray, kernels: np.ndarray, relu: bool, zero_pad: bool = True) -> np.ndarray:
    c_out, c_in = kernels.shape[:2]
    if x.shape[1] != c_in:
        raise ShapeError(f"input has {x.shape[1]} channels, kernels expect {c_in}")
    y = im2col(x, zero_pad) @ kernels.reshape(c_out, c_in * 9).T
    y = y.transpose(0, 3, 1, 2)
    return np.maximum(y, 0.0) if relu else y


def maxpool2_batch(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"MaxPool2 needs even H and W, got {h}x{w}")
    return x.reshape(b, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))


def conv3x3_same(x: np.ndarray, kernels: np.ndarray, relu: bool = False) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return conv_batch(x[None], np.asarray(kernels, dtype=np.float64), relu)[0]


def maxpool2(x: np.ndarray) -> np.ndarray:
    return maxpool2_batch(np.asarray(x)[None])[0]


def global_max_pool(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return x.reshape(x.shape[0], -1).max(axis=1)


def dense(v: np.ndarray, w: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).ravel()
    w = np.asarray(w, dtype=np.float64)
    if w.shape[1] != v.size:
        raise ShapeError(f"dense expects {w.shape[1]} inputs, got {v.size}")
    return w @ v


def argmax_first(logits: np.ndarray) -> np.ndarray:
    """Argmax along the last axis; np.argmax already returns the lowest index on ties."""
    return np.argmax(logits, axis=-1)


# -- network ---------------------------------------------------------------

def forward_batch(model: ModelConfig, weights: WeightSet, x: np.ndarray, record: bool = False):
    """Run the network on a (B, C, H, W) batch.

    With ``record=True`` also returns the list of pre-activation outputs of
    every weighted layer (the values a reduction coefficient must cover).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != model.input_shape:
        raise ShapeError(f"batch shape {x.shape[1:]} does not match model input {model.input_shape}")
    pre = []
    for layer, w in zip(model.layers, weights):
        if isinstance(layer, Conv3x3):
            y = conv_batch(x, w, relu=False, zero_pad=layer.zero_pad)
            if record:
                pre.append(y)
            x = np.maximum(y, 0.0) if layer.relu else y
        elif isinstance(layer, MaxPool2):
            x = maxpool2_batch(x)
        elif isinstance(layer, GlobalMaxPool):
            x = x.reshape(x.shape[0], x.shape[1], -1).max(axis=2)
        elif isinstance(layer, Dense):
            x = x.reshape(x.shape[0], -1) @ np.asarray(w, dtype=np.float64).T
            if record:
                pre.append(x)
        else:
            raise TypeError(f"unknown layer {layer!r}")
    return (x, pre) if record else x


def images_to_input(images: np.ndarray, model: ModelConfig | None = None) -> np.ndarray:
    """Byte images (B, H, W) or (B, C, H, W) -> floats p/256 in [0, 1)."""
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    if images.ndim == 3:
        images = images[:, None]
    return images.astype(np.float64) / 256.0


def predict_logits(model: ModelConfig, weights: WeightSet, images: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    images = np.asarray(images)
    out = []
    for start in range(0, len(images), batch_size):
        out.append(forward_batch(model, weights, images_to_input(images[start:start + batch_size])))
    if not out:
        return np.zeros((0, model.num_outputs))
    return np.concatenate(out)


def infer_float(model: ModelConfig, weights: WeightSet, image: np.ndarray) -> tuple[np.ndarray, int]:
    """Float inference on a single image with values in [0, 1).

    Returns the logits and the index of the largest one (lowest index on ties).
    """
    check_weights(model, weights)
    x = np.asarray(image, dtype=np.float64).reshape(model.input_shape)
    logits = forward_batch(model, weights, x[None])[0]
    return logits, int(argmax_first(logits))
