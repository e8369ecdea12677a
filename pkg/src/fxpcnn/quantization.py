"""Per-layer range reduction and weight quantization.

Every weighted layer k gets a reduction coefficient M_k. Coefficients are
computed in cascade: layer k is analysed with all upstream layers already
divided by their own coefficients, so every layer's running range sits in
[-1, 1] and a single Q-format can hold every intermediate value. Because the
network has no bias and only ReLU / max operations, dividing a layer's
weights by a positive constant divides every downstream value by the same
constant, and the arg-max of the logits never moves.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .fixedpoint import QFormat, RoundingStrategy, from_fixed_array, to_fixed_array
from .nn import (
    Conv3x3,
    Dense,
    GlobalMaxPool,
    MaxPool2,
    ModelConfig,
    WeightSet,
    check_weights,
    forward_batch,
    images_to_input,
)


class DegenerateLayer(ValueError):
    """A layer whose output range is identically zero (M = 0)."""


@dataclass(frozen=True)
class LayerRange:
    layer: int  # index into ModelConfig.layers
    mn: float
    mx: float
    M: float


@dataclass(frozen=True)
class ReductionProfile:
    layers: tuple
    method: str = "worst-case"  # worst-case | three-sigma | percent
    percent: float | None = None
    dataset_id: str | None = None
    fit_weights: bool = False  # coefficients floored at the layer's largest |weight|

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        for r in self.layers:
            if not r.M > 0:
                raise DegenerateLayer(f"degenerate layer {r.layer}: M = {r.M}")

    @property
    def coefficients(self) -> dict[int, float]:
        return {r.layer: r.M for r in self.layers}

    @property
    def label(self) -> str:
        base = f"percent:{self.percent:g}" if self.method == "percent" else self.method
        return base + ("+fit" if self.fit_weights else "")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "percent": self.percent,
            "dataset_id": self.dataset_id,
            "fit_weights": self.fit_weights,
            "layers": [asdict(r) for r in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReductionProfile":
        return cls(layers=[LayerRange(**r) for r in d["layers"]], method=d["method"],
                   percent=d.get("percent"), dataset_id=d.get("dataset_id"),
                   fit_weights=bool(d.get("fit_weights", False)))


def wants_fit(spec: str) -> bool:
    return spec.strip().lower().endswith("+fit")


def parse_margin(spec: str) -> tuple[str, float | None]:
    """'worst-case', 'three-sigma' or 'percent:P' (P a fraction, 0.05 = 5%).

    Calibrated margins accept a '+fit' suffix, see ``calibrated_ranges``.
    """
    spec = spec.strip().lower()
    if spec.endswith("+fit"):
        spec = spec[:-4]
        if spec.startswith("worst"):
            raise ValueError("'+fit' applies to calibrated profiles only")
    if spec in ("worst-case", "worstcase", "three-sigma", "3sigma", "threesigma"):
        return ("worst-case" if spec.startswith("worst") else "three-sigma"), None
    if spec.startswith("percent"):
        _, _, p = spec.partition(":")
        p = float(p) if p else 0.0
        if p < 0:
            raise ValueError("percent margin must be non-negative")
        return "percent", p
    raise ValueError(f"unknown profile {spec!r}; use worst-case, three-sigma or percent:P")


# -- range analysis --------------------------------------------------------

def _interval_linear(w2: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bounds of w2 @ v for v in the box [lo, hi]; w2 is (n_out, n_in)."""
    pos, neg = np.maximum(w2, 0.0), np.minimum(w2, 0.0)
    return pos @ lo + neg @ hi, pos @ hi + neg @ lo


def worst_case_ranges(model: ModelConfig, weights: WeightSet, input_range=(0.0, 1.0)) -> ReductionProfile:
    """Sound per-layer ranges by interval arithmetic over all inputs in ``input_range``.

    Intervals are tracked per channel. Zero padding contributes the value 0,
    so padded convolutions widen each channel interval to include 0. After
    a layer is reduced its outputs are only known to lie in [-1, 1] (keeping
    the sign of the range, and [0, 1] past a ReLU); carrying the tighter per-channel bounds forward would give
    coefficients below the next layer's largest weight, and those weights
    would then not fit the fixed-point range.
    """
    check_weights(model, weights)
    c0 = model.input_shape[0]
    lo = np.full(c0, float(input_range[0]))
    hi = np.full(c0, float(input_range[1]))
    ranges = []
    for k, (layer, w) in enumerate(zip(model.layers, weights)):
        if isinstance(layer, Conv3x3):
            if layer.zero_pad:
                lo, hi = np.minimum(lo, 0.0), np.maximum(hi, 0.0)
            w2 = np.asarray(w, dtype=np.float64).reshape(layer.c_out, -1)
            lo, hi = _interval_linear(w2, np.repeat(lo, 9), np.repeat(hi, 9))
        elif isinstance(layer, Dense):
            w2 = np.asarray(w, dtype=np.float64)
            spatial = layer.n_in // len(lo)  # flattened (C, H, W) inputs share their channel's bounds
            lo, hi = _interval_linear(w2, np.repeat(lo, spatial), np.repeat(hi, spatial))
        elif isinstance(layer, (MaxPool2, GlobalMaxPool)):
            continue
        mn, mx = float(lo.min()), float(hi.max())
        M = max(abs(mn), abs(mx))
        if M == 0:
            raise DegenerateLayer(f"degenerate layer {k}: all-zero output range")
        ranges.append(LayerRange(k, mn, mx, M))
        lo = np.full(len(lo), -1.0 if mn < 0 else 0.0)
        hi = np.full(len(hi), 1.0 if mx > 0 else 0.0)
        if getattr(layer, "relu", False):
            lo = np.zeros_like(lo)
    return ReductionProfile(ranges, method="worst-case")


def layer_extrema(model: ModelConfig, weights: WeightSet, images: np.ndarray,
                  batch_size: int = 500) -> tuple[np.ndarray, np.ndarray]:
    """Per-image minimum and maximum of every weighted layer's pre-activation.

    Returns two arrays of shape (n_weighted_layers, n_images).
    """
    mins, maxs = [], []
    for start in range(0, len(images), batch_size):
        x = images_to_input(images[start:start + batch_size])
        _, pre = forward_batch(model, weights, x, record=True)
        mins.append(np.stack([p.reshape(len(p), -1).min(axis=1) for p in pre]))
        maxs.append(np.stack([p.reshape(len(p), -1).max(axis=1) for p in pre]))
    return np.concatenate(mins, axis=1), np.concatenate(maxs, axis=1)


def calibrated_ranges(model: ModelConfig, weights: WeightSet, data, margin: str = "percent:0.05",
                      batch_size: int = 500) -> ReductionProfile:
    """Data-driven ranges from float inference over a calibration set.

    ``percent:P`` takes the largest observed magnitude times (1 + P);
    ``three-sigma`` takes mean + 3 std of the per-image largest magnitude.
    With a ``+fit`` suffix no coefficient is allowed below the largest
    |weight| of its layer, so the reduced weights stay inside [-1, 1]
    instead of being clipped by the quantizer.
    One float pass suffices: the cascaded network's values are the plain
    network's values divided by the product of upstream coefficients.
    """
    method, p = parse_margin(margin)
    if method == "worst-case":
        return worst_case_ranges(model, weights)
    fit = wants_fit(margin)
    check_weights(model, weights)
    images = data.images if hasattr(data, "images") else np.asarray(data)
    if len(images) == 0:
        raise ValueError("empty calibration set")
    mins, maxs = layer_extrema(model, weights, images, batch_size)
    scale = 1.0
    ranges = []
    for row, k in enumerate(model.weighted_layers):
        lo, hi = mins[row] / scale, maxs[row] / scale
        extreme = np.maximum(np.abs(lo), np.abs(hi))
        if method == "percent":
            M = float(extreme.max()) * (1.0 + p)
        else:
            M = float(extreme.mean() + 3.0 * extreme.std())
        if fit:
            M = max(M, float(np.abs(weights[k]).max()))
        if M == 0:
            raise DegenerateLayer(f"degenerate layer {k}: zero activity on the calibration set")
        ranges.append(LayerRange(k, float(lo.min()), float(hi.max()), M))
        scale *= M
    return ReductionProfile(ranges, method=method, percent=p,
                            dataset_id=getattr(data, "name", None), fit_weights=fit)


def make_profile(model: ModelConfig, weights: WeightSet, spec: str, data=None) -> ReductionProfile:
    method, _ = parse_margin(spec)
    if method == "worst-case":
        return worst_case_ranges(model, weights)
    if data is None:
        raise ValueError(f"profile {spec!r} needs a calibration set")
    return calibrated_ranges(model, weights, data, spec)


def reduce_weights(weights: WeightSet, profile: ReductionProfile) -> WeightSet:
    coeffs = profile.coefficients
    missing = [k for k, w in enumerate(weights) if w is not None and k not in coeffs]
    if missing:
        raise ValueError(f"profile has no coefficient for layers {missing}")
    out = []
    for k, w in enumerate(weights):
        if w is None:
            out.append(None)
            continue
        if coeffs[k] == 0:
            raise DegenerateLayer(f"degenerate layer {k}: M = 0")
        out.append(np.asarray(w, dtype=np.float64) / coeffs[k])
    return out


# -- quantization ----------------------------------------------------------

@dataclass(frozen=True)
class QuantizedModel:
    config: ModelConfig
    mantissas: tuple  # int64 arrays per layer (None for pools)
    profile: ReductionProfile
    fmt: QFormat
    weight_saturations: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mantissas", tuple(self.mantissas))
        check_weights(self.config, list(self.mantissas))
        lim = self.fmt.limit
        for m in self.mantissas:
            if m is not None and np.abs(m).max(initial=0) > lim:
                raise ValueError("weight mantissa outside the format range")

    def dequantized(self) -> WeightSet:
        return [None if m is None else from_fixed_array(m, self.fmt) for m in self.mantissas]


def quantize(model: ModelConfig, weights: WeightSet, profile: ReductionProfile,
             fmt: QFormat | int) -> QuantizedModel:
    """Reduce by the profile, then round every weight into ``fmt``.

    Weights pushed outside [-1, 1] by a calibrated profile saturate; the
    number of such clips is kept on the result.
    """
    if not isinstance(fmt, QFormat):
        fmt = QFormat(int(fmt))
    check_weights(model, weights)
    reduced = reduce_weights(weights, profile)
    mantissas, clipped = [], 0
    for w in reduced:
        if w is None:
            mantissas.append(None)
            continue
        m, n = to_fixed_array(w, fmt)
        mantissas.append(m)
        clipped += n
    return QuantizedModel(model, mantissas, profile, fmt, clipped)


# -- bit-width sweep -------------------------------------------------------

@dataclass(frozen=True)
class MismatchRow:
    frac_bits: int
    strategy: RoundingStrategy
    mismatch_ratio: float
    samples: int
    mismatches: int
    overflow_events: int = 0


@dataclass
class MismatchReport:
    rows: list = field(default_factory=list)
    profile: str = ""

    def ratio(self, frac_bits: int, strategy) -> float:
        strategy = RoundingStrategy.parse(strategy)
        for r in self.rows:
            if r.frac_bits == frac_bits and r.strategy is strategy:
                return r.mismatch_ratio
        raise KeyError((frac_bits, strategy))

    def widths(self) -> list[int]:
        return sorted({r.frac_bits for r in self.rows})

    def zero_threshold(self, strategy) -> int | None:
        """Smallest tested width from which every larger tested width has zero mismatches."""
        strategy = RoundingStrategy.parse(strategy)
        rows = sorted((r for r in self.rows if r.strategy is strategy), key=lambda r: r.frac_bits)
        best = None
        for r in reversed(rows):
            if r.mismatches:
                break
            best = r.frac_bits
        return best

    def first_zero(self, strategy) -> int | None:
        strategy = RoundingStrategy.parse(strategy)
        zeros = [r.frac_bits for r in self.rows if r.strategy is strategy and r.mismatches == 0]
        return min(zeros) if zeros else None

    def to_csv(self) -> str:
        """Table layout: one line per width, percent mismatches per strategy."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        strategies = [s for s in RoundingStrategy if any(r.strategy is s for r in self.rows)]
        writer.writerow(["bits"] + [f"{s.value}_pct" for s in strategies])
        for n in self.widths():
            row = [n]
            for s in strategies:
                try:
                    row.append(f"{100.0 * self.ratio(n, s):.2f}")
                except KeyError:
                    row.append("")
            writer.writerow(row)
        return buf.getvalue()

    def to_long_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["frac_bits", "strategy", "mismatch_ratio", "mismatches", "samples", "overflow_events"])
        for r in self.rows:
            writer.writerow([r.frac_bits, r.strategy.value, f"{r.mismatch_ratio:.6f}", r.mismatches,
                             r.samples, r.overflow_events])
        return buf.getvalue()


def sweep_bitwidths(model: ModelConfig, weights: WeightSet, profile: ReductionProfile, data,
                    n_range: Iterable[int], strategies: Sequence = tuple(RoundingStrategy),
                    float_classes: np.ndarray | None = None, progress=None) -> MismatchReport:
    """Fixed-point vs float arg-max disagreement for every (width, strategy) cell.

    A mismatch is a disagreement with the float network, not with the label.
    """
    from .engine import infer_fxp_batch
    from .nn import predict_logits

    images = data.images if hasattr(data, "images") else np.asarray(data)
    if len(images) == 0:
        raise ValueError("empty test set")
    if float_classes is None:
        float_classes = predict_logits(model, weights, images).argmax(axis=1)
    report = MismatchReport(profile=profile.label)
    for n in n_range:
        qm = quantize(model, weights, profile, QFormat(n))
        for s in strategies:
            s = RoundingStrategy.parse(s)
            logits, overflow = infer_fxp_batch(qm, images, s)
            mism = int(np.count_nonzero(logits.argmax(axis=1) != float_classes))
            row = MismatchRow(n, s, mism / len(images), len(images), mism, int(overflow.sum()))
            report.rows.append(row)
            if progress is not None:
                progress(row)
    return report
