"""Clock-cycle model of the FPGA pipeline.

Convolution and weight-loading costs are formulas fitted to the measured
single-block stage table; image load, max pooling, the dense layer and the
result write-back are table constants. With several convolution blocks the
conv and pooling stages split across blocks (one output channel per block);
loads and the dense layer stay serial.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

from .nn import Conv3x3, Dense, GlobalMaxPool, MaxPool2, ModelConfig


@dataclass(frozen=True)
class CycleConstants:
    cycles_per_dot9: int = 4
    per_channel_pair_overhead: int = 15
    stage_initial_penalty: int = 1
    load_cycles_per_block: int = 18
    load_fixed_overhead: int = 4
    image_load: int = 1570
    maxpool: tuple = (3164, 1623)  # consumed in order; later pools use the fallback
    dense_load: int = 356
    dense_process: int = 244
    save: int = 16

    def __post_init__(self):
        values = [v for v in self.__dict__.values() if isinstance(v, int)] + list(self.maxpool)
        if any(v < 0 for v in values):
            raise ValueError("cycle constants must be non-negative")


@dataclass(frozen=True)
class Stage:
    name: str
    cycles: int
    parallel: bool = False


@dataclass
class CycleReport:
    stages: list = field(default_factory=list)
    conv_blocks: int = 1
    baseline_total: int | None = None

    @property
    def total(self) -> int:
        return sum(s.cycles for s in self.stages)

    @property
    def speedup(self) -> float:
        base = self.baseline_total if self.baseline_total is not None else self.total
        return base / self.total

    def fps(self, clock_mhz: float) -> float:
        return fps(self, clock_mhz)

    def to_text(self, clock_mhz: float | None = None) -> str:
        width = max(len(s.name) for s in self.stages + [Stage("Total", 0)])
        lines = [f"{'Stage of processing':<{width}}  Number of clock cycles"]
        lines += [f"{s.name:<{width}}  {s.cycles}" for s in self.stages]
        lines.append(f"{'Total':<{width}}  {self.total}")
        if self.conv_blocks > 1:
            lines.append(f"{'Speed-up vs 1 block':<{width}}  {self.speedup:.2f}")
        if clock_mhz:
            lines.append(f"{f'Frames/s at {clock_mhz:g} MHz':<{width}}  {self.fps(clock_mhz):.1f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "cycles"])
        for s in self.stages:
            w.writerow([s.name, s.cycles])
        w.writerow(["Total", self.total])
        return buf.getvalue()


def conv_cycles(h: int, w: int, c_in: int, c_out: int, stage_initial: bool,
                consts: CycleConstants = CycleConstants()) -> int:
    """One dot-9 per output pixel and channel pair, at ``cycles_per_dot9`` each."""
    if min(h, w, c_in, c_out) <= 0:
        raise ValueError("dimensions must be positive")
    pairs = c_in * c_out
    cycles = consts.cycles_per_dot9 * h * w * pairs + consts.per_channel_pair_overhead * pairs
    return cycles + (consts.stage_initial_penalty if stage_initial else 0)


def pack_layout(n_weights: int) -> tuple[int, int]:
    """(number of 9-weight words, total word slots incl. zero padding)."""
    if n_weights < 0:
        raise ValueError("n_weights must be >= 0")
    blocks = -(-n_weights // 9)
    return blocks, blocks * 9


def layer_blocks(layer) -> int:
    """Memory words of one layer; dense rows are padded individually."""
    if isinstance(layer, Conv3x3):
        return layer.c_in * layer.c_out
    if isinstance(layer, Dense):
        return layer.n_out * -(-layer.n_in // 9)
    return 0


def load_cycles(n_weights: int, consts: CycleConstants = CycleConstants()) -> int:
    if n_weights <= 0:
        raise ValueError("n_weights must be positive")
    blocks, _ = pack_layout(n_weights)
    return consts.load_cycles_per_block * blocks + consts.load_fixed_overhead


def _ordinal(n: int) -> str:
    suffix = "th" if 10 <= n % 100 <= 20 else {1: "st", 2: "nd", 3: "rd"}.get(n % 10, "th")
    return f"{n}{suffix}"


def total_cycles(model: ModelConfig, n_conv_blocks: int = 1,
                 consts: CycleConstants = CycleConstants()) -> CycleReport:
    if n_conv_blocks < 1:
        raise ValueError("need at least one convolution block")
    shapes = model.shapes()
    stages = [Stage("Initial image loading", consts.image_load)]
    pools = iter(consts.maxpool)
    initial = True
    number = 0
    for k, layer in enumerate(model.layers):
        if isinstance(layer, GlobalMaxPool):
            # folded into the preceding convolution
            if stages and stages[-1].name.startswith("Processing"):
                last = stages[-1]
                stages[-1] = Stage(last.name + " (+GlobalMaxPooling)", last.cycles, last.parallel)
            continue
        number += 1
        tag = _ordinal(number)
        c, h, w = (shapes[k] + (1, 1))[:3]
        if isinstance(layer, Conv3x3):
            _, ho, wo = shapes[k + 1]
            stages.append(Stage(f"Loading weights for the {tag} conv layer",
                                load_cycles(9 * layer.c_in * layer.c_out, consts)))
            cyc = conv_cycles(ho, wo, layer.c_in, layer.c_out, initial, consts)
            lanes = min(n_conv_blocks, layer.c_out)
            stages.append(Stage(f"Processing {tag} conv layer", math.ceil(cyc / lanes), True))
            initial = False
        elif isinstance(layer, MaxPool2):
            cyc = next(pools, None)
            if cyc is None:
                cyc = c * h * w + h  # fallback: one cycle per input element plus one per row
            lanes = min(n_conv_blocks, c)
            stages.append(Stage(f"Processing {tag} maxpooling layer", math.ceil(cyc / lanes), True))
            initial = True
        elif isinstance(layer, Dense):
            stages.append(Stage(f"Loading weights for the {tag} dense layer", consts.dense_load))
            stages.append(Stage(f"Processing {tag} dense layer", consts.dense_process))
    stages.append(Stage("Saving result", consts.save))
    report = CycleReport(stages, n_conv_blocks)
    if n_conv_blocks > 1:
        report.baseline_total = total_cycles(model, 1, consts).total
    return report


def fps(report: CycleReport, clock_mhz: float) -> float:
    if clock_mhz <= 0:
        raise ValueError("clock frequency must be positive")
    return clock_mhz * 1e6 / report.total
