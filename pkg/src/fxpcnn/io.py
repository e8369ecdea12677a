"""File formats: MNIST IDX, model bundles and packed weight memory images.

Bundle layout (a directory)::

    manifest.json      format tag + version, model config, kind (float|quantized),
                       frac_bits, reduction profile, provenance, and one blob
                       entry {file, dtype, shape, sha256} per weighted layer
    layer<k>.bin       raw little-endian payload: float32 (float bundles) or
                       int32 mantissas (quantized bundles)

Packed memory image (text)::

    # fxpcnn packed weights frac_bits <N> field_bits <N+2> word_bits <9(N+2)>
    # layer <k> blocks <n>
    <hex word>          one line per 9-weight block, w00 in the most
    ...                 significant field, fields (N+2)-bit two's complement

docs/formats.md has byte-level examples of every format.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fixedpoint import QFormat
from .nn import Conv3x3, Dense, ModelConfig, ShapeError, check_weights, weight_shape

BUNDLE_FORMAT = "fxpcnn-bundle"
BUNDLE_VERSION = 1


class IdxError(ValueError):
    """Malformed IDX stream."""


class BadMagic(IdxError):
    pass


class TruncatedPayload(IdxError):
    pass


class DimensionOverflow(IdxError):
    pass


class BundleError(ValueError):
    pass


class ChecksumError(BundleError):
    pass


class VersionMismatch(BundleError):
    pass


# -- IDX -------------------------------------------------------------------

IMAGE_MAGIC = b"\x00\x00\x08\x03"
LABEL_MAGIC = b"\x00\x00\x08\x01"
_MAX_ELEMENTS = 1 << 31


def parse_idx(data: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX stream (MNIST images or labels)."""
    data = bytes(data)
    if len(data) < 4:
        raise TruncatedPayload("truncated: missing magic number")
    magic = data[:4]
    if magic not in (IMAGE_MAGIC, LABEL_MAGIC):
        raise BadMagic(f"bad magic {magic.hex()}; expected {IMAGE_MAGIC.hex()} or {LABEL_MAGIC.hex()}")
    ndim = magic[3]
    header = 4 + 4 * ndim
    if len(data) < header:
        raise TruncatedPayload("truncated: incomplete dimension header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = 1
    for d in dims:
        count *= d
        if count > _MAX_ELEMENTS:
            raise DimensionOverflow(f"dimensions {dims} exceed {_MAX_ELEMENTS} elements")
    if len(data) - header < count:
        raise TruncatedPayload(f"truncated: payload has {len(data) - header} of {count} bytes")
    if len(data) - header > count:
        raise IdxError(f"{len(data) - header - count} trailing bytes after payload")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims).copy()


def write_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("only unsigned-byte IDX payloads are supported")
    if array.ndim not in (1, 3):
        raise ValueError("IDX writer supports label vectors and image stacks only")
    magic = LABEL_MAGIC if array.ndim == 1 else IMAGE_MAGIC
    return magic + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()


def read_idx(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        import gzip

        raw = gzip.decompress(raw)
    return parse_idx(raw)


def load_labeled(images_path, labels_path, name: str | None = None):
    from .training import LabeledDataset

    images, labels = read_idx(images_path), read_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise IdxError("expected an image file (3-d) and a label file (1-d)")
    if len(images) != len(labels):
        raise IdxError(f"{len(images)} images but {len(labels)} labels")
    return LabeledDataset(images, labels, name=name or Path(images_path).name)


def _find(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / f"{stem}.gz",
                      directory / stem.replace("-idx", ".idx")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{stem} not found in {directory}")


def load_mnist(directory, split: str = "train"):
    """Load the standard MNIST file pair for ``split`` ('train' or 'test')."""
    directory = Path(directory)
    prefix = {"train": "train", "test": "t10k"}[split]
    return load_labeled(_find(directory, f"{prefix}-images-idx3-ubyte"),
                        _find(directory, f"{prefix}-labels-idx1-ubyte"), name=f"mnist-{split}")


def default_mnist_dir() -> Path | None:
    """$FXPCNN_MNIST_DIR, else ./data/mnist if present."""
    env = os.environ.get("FXPCNN_MNIST_DIR")
    candidates = [Path(env)] if env else []
    candidates.append(Path(__file__).resolve().parents[2] / "data" / "mnist")
    candidates.append(Path.cwd() / "data" / "mnist")
    for c in candidates:
        if (c / "t10k-labels-idx1-ubyte").exists() or (c / "t10k-labels-idx1-ubyte.gz").exists():
            return c
    return None


# -- bundles ---------------------------------------------------------------

@dataclass
class ModelBundle:
    config: ModelConfig
    weights: list  # float arrays, or int mantissas for quantized bundles
    frac_bits: int | None = None
    profile: dict | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return "float" if self.frac_bits is None else "quantized"

    def __eq__(self, other):
        if not isinstance(other, ModelBundle):
            return NotImplemented
        if (self.config != other.config or self.frac_bits != other.frac_bits
                or self.profile != other.profile or self.provenance != other.provenance):
            return False
        for a, b in zip(self.weights, other.weights):
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return True


def _sha256(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def save_bundle(bundle: ModelBundle, path) -> Path:
    path = Path(path)
    check_weights(bundle.config, bundle.weights)
    path.mkdir(parents=True, exist_ok=True)
    quantized = bundle.frac_bits is not None
    dtype = "<i4" if quantized else "<f4"
    blobs = {}
    for k, w in enumerate(bundle.weights):
        if w is None:
            continue
        arr = np.asarray(w)
        if quantized:
            if not np.issubdtype(arr.dtype, np.integer):
                raise BundleError("quantized bundles store integer mantissas")
            lim = 1 << bundle.frac_bits
            if np.abs(arr).max(initial=0) > lim:
                raise BundleError(f"layer {k}: mantissa outside +/-2^{bundle.frac_bits}")
        raw = arr.astype(dtype).tobytes()
        name = f"layer{k}.bin"
        (path / name).write_bytes(raw)
        blobs[str(k)] = {"file": name, "dtype": dtype, "shape": list(arr.shape), "sha256": _sha256(raw)}
    manifest = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "kind": bundle.kind,
        "model": bundle.config.to_dict(),
        "frac_bits": bundle.frac_bits,
        "profile": bundle.profile,
        "provenance": bundle.provenance,
        "blobs": blobs,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_bundle(path) -> ModelBundle:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise BundleError(f"no manifest.json in {path}") from None
    except json.JSONDecodeError as exc:
        raise BundleError(f"unreadable manifest: {exc}") from None
    if manifest.get("format") != BUNDLE_FORMAT:
        raise BundleError(f"{path} is not a {BUNDLE_FORMAT}")
    if manifest.get("version") != BUNDLE_VERSION:
        raise VersionMismatch(f"bundle version {manifest.get('version')} != {BUNDLE_VERSION}")
    try:
        config = ModelConfig.from_dict(manifest["model"])
    except ShapeError as exc:
        raise BundleError(f"shape-chain violation: {exc}") from None
    frac_bits = manifest.get("frac_bits")
    if (frac_bits is None) != (manifest.get("kind") == "float"):
        raise BundleError("kind and frac_bits disagree")
    if frac_bits is not None:
        QFormat(frac_bits)
    weights = []
    for k, layer in enumerate(config.layers):
        meta = manifest["blobs"].get(str(k))
        shape = weight_shape(layer)
        if shape is None:
            if meta is not None:
                raise BundleError(f"layer {k} has no weights but a blob is listed")
            weights.append(None)
            continue
        if meta is None:
            raise BundleError(f"missing weights for layer {k}")
        raw = (path / meta["file"]).read_bytes()
        if _sha256(raw) != meta["sha256"]:
            raise ChecksumError(f"checksum mismatch for {meta['file']}")
        if tuple(meta["shape"]) != shape:
            raise BundleError(f"layer {k}: blob shape {meta['shape']} != {shape}")
        arr = np.frombuffer(raw, dtype=meta["dtype"]).reshape(shape)
        weights.append(arr.astype(np.int64 if frac_bits is not None else np.float64))
    return ModelBundle(config, weights, frac_bits, manifest.get("profile"), manifest.get("provenance", {}))


# -- packed memory image ---------------------------------------------------

def layer_blocks(layer, w: np.ndarray) -> np.ndarray:
    """Split a layer's weights into 9-weight blocks (rows of the result).

    Conv: one block per (output, input) channel pair, w00..w22 in order.
    Dense: each output row is cut into ceil(n_in / 9) blocks, the last one
    zero-padded, which is how a dot-9 unit consumes it.
    """
    w = np.asarray(w)
    if isinstance(layer, Conv3x3):
        return w.reshape(-1, 9)
    if isinstance(layer, Dense):
        per_row = -(-layer.n_in // 9)
        padded = np.zeros((layer.n_out, per_row * 9), dtype=w.dtype)
        padded[:, :layer.n_in] = w
        return padded.reshape(-1, 9)
    raise TypeError(f"{layer!r} has no weights")


def _pack_word(block, field_bits: int) -> int:
    mask = (1 << field_bits) - 1
    word = 0
    for m in block:
        word = (word << field_bits) | (int(m) & mask)
    return word


def _unpack_word(word: int, field_bits: int) -> list[int]:
    mask = (1 << field_bits) - 1
    sign = 1 << (field_bits - 1)
    out = []
    for k in range(9):
        v = (word >> (field_bits * (8 - k))) & mask
        out.append(v - (1 << field_bits) if v & sign else v)
    return out


def export_packed(config: ModelConfig, mantissas: list, frac_bits: int, path) -> Path:
    """Write the 9-weights-per-word memory image of a quantized model."""
    fmt = QFormat(frac_bits)
    field_bits = fmt.word_bits
    lo, hi = -(1 << (field_bits - 1)), (1 << (field_bits - 1)) - 1
    hex_digits = -(-9 * field_bits // 4)
    lines = [f"# fxpcnn packed weights frac_bits {frac_bits} field_bits {field_bits} word_bits {9 * field_bits}"]
    for k, (layer, w) in enumerate(zip(config.layers, mantissas)):
        if w is None:
            continue
        blocks = layer_blocks(layer, w)
        if blocks.size and (blocks.min() < lo or blocks.max() > hi):
            raise OverflowError(f"layer {k}: mantissa does not fit a {field_bits}-bit field")
        lines.append(f"# layer {k} blocks {len(blocks)}")
        lines.extend(format(_pack_word(b, field_bits), f"0{hex_digits}x") for b in blocks)
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def import_packed(path, config: ModelConfig) -> tuple[list, int]:
    """Inverse of ``export_packed``: (mantissas per layer, frac_bits)."""
    lines = Path(path).read_text().splitlines()
    head = lines[0].split()
    frac_bits = int(head[head.index("frac_bits") + 1])
    field_bits = QFormat(frac_bits).word_bits
    sections: dict[int, list[list[int]]] = {}
    current = None
    for line in lines[1:]:
        if line.startswith("# layer"):
            parts = line.split()
            current = int(parts[2])
            sections[current] = []
        elif line.strip():
            sections[current].append(_unpack_word(int(line, 16), field_bits))
    out = []
    for k, layer in enumerate(config.layers):
        shape = weight_shape(layer)
        if shape is None:
            out.append(None)
            continue
        blocks = np.array(sections[k], dtype=np.int64)
        if isinstance(layer, Dense):
            per_row = -(-layer.n_in // 9)
            out.append(blocks.reshape(layer.n_out, per_row * 9)[:, :layer.n_in].copy())
        else:
            out.append(blocks.reshape(shape))
    return out, frac_bits
