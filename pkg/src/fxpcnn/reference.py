"""Slow, obviously-correct fixed-point inference on Python integers.

Loops over every output element and uses only the scalar operations of
``fixedpoint``. Python ints never overflow, so the at-end accumulator is
exact by construction. Used as the oracle for the vectorized engine.
"""

from __future__ import annotations

import numpy as np

from .fixedpoint import (
    FxpValue,
    OverflowCounter,
    RoundingStrategy,
    accumulate_at_end,
    dot9,
    fxp_add,
    to_fixed,
)
from .nn import Conv3x3, Dense, GlobalMaxPool, MaxPool2
from .quantization import QuantizedModel


def _relu(v: FxpValue) -> FxpValue:
    return v if v.mantissa > 0 else FxpValue(0, v.fmt)


def _sum_blocks(pixel_blocks, weight_blocks, strategy, fmt, ctr):
    if strategy is RoundingStrategy.AT_END:
        ps = [p for block in pixel_blocks for p in block]
        ws = [w for block in weight_blocks for w in block]
        return accumulate_at_end(ps, ws, fmt, ctr)
    acc = None
    for pb, wb in zip(pixel_blocks, weight_blocks):
        d = dot9(pb, wb, strategy, ctr)
        acc = d if acc is None else fxp_add(acc, d, ctr)
    return acc


def reference_infer(qm: QuantizedModel, image, strategy) -> tuple[list[int], int, list]:
    """Returns (logit mantissas, overflow events, per-layer outputs as nested lists)."""
    strategy = RoundingStrategy.parse(strategy)
    fmt = qm.fmt
    ctr = OverflowCounter()
    zero = FxpValue(0, fmt)
    c0, h0, w0 = qm.config.input_shape
    flat = [int(v) for v in np.asarray(image).ravel()]
    # x[c][i][j]
    x = [[[to_fixed(flat[(c * h0 + i) * w0 + j] / 256, fmt, ctr) for j in range(w0)]
          for i in range(h0)] for c in range(c0)]
    outputs = []
    for layer, wm in zip(qm.config.layers, qm.mantissas):
        if isinstance(layer, Conv3x3):
            cin, h, w = len(x), len(x[0]), len(x[0][0])
            pad = 1 if layer.zero_pad else 0
            ho, wo = (h, w) if layer.zero_pad else (h - 2, w - 2)

            def pixel(c, i, j):
                if 0 <= i < h and 0 <= j < w:
                    return x[c][i][j]
                return zero

            y = []
            for o in range(layer.c_out):
                plane = []
                for i in range(ho):
                    row = []
                    for j in range(wo):
                        pblocks, wblocks = [], []
                        for c in range(cin):
                            pblocks.append([pixel(c, i - pad + dy, j - pad + dx)
                                            for dy in range(3) for dx in range(3)])
                            wblocks.append([FxpValue(int(wm[o, c, dy, dx]), fmt)
                                            for dy in range(3) for dx in range(3)])
                        v = _sum_blocks(pblocks, wblocks, strategy, fmt, ctr)
                        row.append(_relu(v) if layer.relu else v)
                    plane.append(row)
                y.append(plane)
            x = y
        elif isinstance(layer, MaxPool2):
            x = [[[max(plane[2 * i][2 * j], plane[2 * i][2 * j + 1],
                       plane[2 * i + 1][2 * j], plane[2 * i + 1][2 * j + 1], key=lambda v: v.mantissa)
                   for j in range(len(plane[0]) // 2)] for i in range(len(plane) // 2)] for plane in x]
        elif isinstance(layer, GlobalMaxPool):
            x = [max((v for row in plane for v in row), key=lambda v: v.mantissa) for plane in x]
        elif isinstance(layer, Dense):
            if x and isinstance(x[0], list):
                x = [v for plane in x for row in plane for v in row]
            y = []
            for o in range(layer.n_out):
                ws = [FxpValue(int(m), fmt) for m in wm[o]]
                pblocks, wblocks = [], []
                for start in range(0, layer.n_in, 9):
                    pb, wb = x[start:start + 9], ws[start:start + 9]
                    pad = 9 - len(pb)
                    pblocks.append(pb + [zero] * pad)
                    wblocks.append(wb + [zero] * pad)
                y.append(_sum_blocks(pblocks, wblocks, strategy, fmt, ctr))
            x = y
        outputs.append(_mantissas(x))
    logits = _mantissas(x)
    return logits, ctr.count, outputs


def _mantissas(x):
    if isinstance(x, FxpValue):
        return x.mantissa
    return [_mantissas(v) for v in x]
