"""Weight mapping and dot products on RRAM crossbars.

Signed weights use a single crossbar: ``u = q + qmax`` is stored unipolar,
bit-sliced across ``bits_per_cell`` cells when needed, and the digital DIFF
stage subtracts ``active_inputs * qmax`` after readout.  A column may be
complement-encoded (``G' = g_min + g_max - G``), in which case the readout is
mirrored before the subtraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError
from ..snn import LayerSpec, SnnModel
from .nodal import network


@dataclass(frozen=True)
class CrossbarConfig:
    rows: int = 64
    cols: int = 64
    g_min: float = 5e-6        # S, 200 kOhm high-resistance state
    g_max: float = 5e-5        # S, 20 kOhm low-resistance state
    bits_per_cell: int = 4
    r_wire_ohm: float = 1.0
    r_source_ohm: float = 1.0
    r_sink_ohm: float = 1.0
    read_noise_sigma: float = 0.1
    v_read: float = 0.2
    adc_bits: int = 8
    dac_bits: int = 8
    adc_mode: str = "exact"    # "exact" or "quantized"

    def __post_init__(self):
        if not 0 < self.g_min < self.g_max:
            raise ContractError("need 0 < g_min < g_max")
        if min(self.r_wire_ohm, self.r_source_ohm, self.r_sink_ohm) < 0:
            raise ContractError("parasitic resistances must be >= 0")
        if self.read_noise_sigma < 0:
            raise ContractError("read_noise_sigma must be >= 0")
        if self.rows < 1 or self.cols < 1 or self.bits_per_cell < 1:
            raise ContractError("crossbar geometry must be positive")
        if self.adc_mode not in ("exact", "quantized"):
            raise ContractError(f"adc_mode must be 'exact' or 'quantized', got {self.adc_mode!r}")
        if self.v_read <= 0 or self.adc_bits < 1 or self.dac_bits < 1:
            raise ContractError("v_read, adc_bits and dac_bits must be positive")

    @property
    def g_mid(self) -> float:
        return 0.5 * (self.g_min + self.g_max)

    @property
    def ideal(self) -> bool:
        return (self.read_noise_sigma == 0 and self.r_wire_ohm == 0
                and self.r_source_ohm == 0 and self.r_sink_ohm == 0)


@dataclass(frozen=True)
class SliceFormat:
    """How a ``bits``-bit signed weight is spread over cells."""

    qmax: int
    slices: int
    digit_max: int   # largest digit stored in one cell
    base: int        # place value ratio between consecutive slices

    @classmethod
    def for_bits(cls, bits: int, bits_per_cell: int) -> "SliceFormat":
        qmax = 2 ** (bits - 1) - 1
        if bits_per_cell >= bits:
            return cls(qmax, 1, 2 * qmax, 1)
        return cls(qmax, math.ceil(bits / bits_per_cell), 2 ** bits_per_cell - 1, 2 ** bits_per_cell)

    def digits(self, q: np.ndarray) -> np.ndarray:
        """Split ``q + qmax`` into (slices, ...) digits, least significant first."""
        u = np.asarray(q, dtype=np.int64) + self.qmax
        if self.slices == 1:
            return u[None]
        return np.stack([(u // self.base ** s) % self.base for s in range(self.slices)])

    def place_values(self) -> np.ndarray:
        return np.array([self.base ** s for s in range(self.slices)], dtype=np.float64)


@dataclass
class Encoding:
    """Conductances for one unrolled weight matrix, crossbar rows = fan-in."""

    g: np.ndarray               # (slices, fan_in, out) conductances as programmed
    complement: np.ndarray      # (slices, fan_in_tiles, out) bool
    fmt: SliceFormat
    g_offset: float             # midpoint conductance, the q = 0 reference


def digits_to_conductance(d: np.ndarray, digit_max: int, cfg: CrossbarConfig) -> np.ndarray:
    return cfg.g_min + d / digit_max * (cfg.g_max - cfg.g_min)


def weight_to_conductance(q: np.ndarray, cfg: CrossbarConfig, bits: int = 8,
                          complement: np.ndarray | None = None) -> Encoding:
    """Map an integer (fan_in, out) matrix to conductances.

    ``complement`` flags, shape (slices, fan_in_tiles, out), select mirrored
    columns; by default every column is encoded directly.
    """
    q = np.asarray(q)
    fmt = SliceFormat.for_bits(bits, cfg.bits_per_cell)
    if q.size and np.abs(q).max() > fmt.qmax:
        raise ContractError(f"weights outside the signed {bits}-bit range +-{fmt.qmax}")
    d = fmt.digits(q)
    n_rt = max(1, math.ceil(q.shape[0] / cfg.rows))
    if complement is None:
        complement = np.zeros((fmt.slices, n_rt, q.shape[1]), dtype=bool)
    flip = np.repeat(complement, cfg.rows, axis=1)[:, :q.shape[0]]
    d = np.where(flip, fmt.digit_max - d, d)
    return Encoding(digits_to_conductance(d, fmt.digit_max, cfg), complement.copy(), fmt, cfg.g_mid)


def conductance_to_weight(enc: Encoding, cfg: CrossbarConfig) -> np.ndarray:
    """Invert the affine map; the exact inverse of ``weight_to_conductance``."""
    d = np.rint((enc.g - cfg.g_min) / (cfg.g_max - cfg.g_min) * enc.fmt.digit_max).astype(np.int64)
    flip = np.repeat(enc.complement, cfg.rows, axis=1)[:, :enc.g.shape[1]]
    d = np.where(flip, enc.fmt.digit_max - d, d)
    u = np.tensordot(enc.fmt.place_values().astype(np.int64), d, axes=1)
    return u - enc.fmt.qmax


def ideal_mvm(g: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Column currents of a lossless crossbar: I_j = sum_i G_ij V_i."""
    return np.asarray(g, dtype=np.float64).T @ np.asarray(v, dtype=np.float64)


def perturb(g: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return g
    return g * rng.lognormal(0.0, sigma, size=g.shape)


def nonideal_mvm(g: np.ndarray, v: np.ndarray, cfg: CrossbarConfig,
                 rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Column currents with lognormal read noise and IR drop (one noise draw per call)."""
    rng = np.random.default_rng(rng)
    g_read = perturb(np.asarray(g, dtype=np.float64), cfg.read_noise_sigma, rng)
    if cfg.r_wire_ohm == cfg.r_source_ohm == cfg.r_sink_ohm == 0:
        return ideal_mvm(g_read, v)
    return network(g_read, cfg.r_wire_ohm, cfg.r_source_ohm, cfg.r_sink_ohm).currents(v)


def adc_quantize(current: np.ndarray, bits: int, lo, hi) -> tuple[np.ndarray, int]:
    """Uniform mid-rise conversion to ``2**bits`` codes; returns (codes, saturated count)."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(hi <= lo):
        raise ContractError("ADC range needs max > min")
    levels = 2 ** bits
    raw = np.floor((np.asarray(current, dtype=np.float64) - lo) / (hi - lo) * levels)
    saturated = int(np.count_nonzero((raw < 0) | (raw > levels - 1)))
    return np.clip(raw, 0, levels - 1).astype(np.int64), saturated


def adc_dequantize(codes: np.ndarray, bits: int, lo, hi) -> np.ndarray:
    lsb = (np.asarray(hi, dtype=np.float64) - lo) / 2 ** bits
    return lo + (codes + 0.5) * lsb


@dataclass(frozen=True)
class DiffMeta:
    fmt: SliceFormat
    complement: np.ndarray  # (slices, out) for the crossbar column group being corrected


def diff_correct(digit_sums: np.ndarray, active: np.ndarray, meta: DiffMeta | None) -> np.ndarray:
    """Signed dot products from per-slice digit sums of one row tile.

    digit_sums: (slices, out, positions) column readouts in digit units;
    active: (positions,) number of driven rows.
    """
    if meta is None:
        raise ContractError("DIFF correction needs the offset/encoding metadata of the tile")
    fmt = meta.fmt
    d = np.asarray(digit_sums, dtype=np.float64)
    active = np.asarray(active, dtype=np.float64)
    mirrored = active[None, None, :] * fmt.digit_max - d
    d = np.where(meta.complement[:, :, None], mirrored, d)
    u = np.tensordot(fmt.place_values(), d, axes=1)
    return u - active[None, :] * fmt.qmax


# ----------------------------------------------------------------------------
# model mapping

@dataclass
class LayerMapping:
    index: int
    fan_in: int
    out: int
    row_tiles: int
    col_tiles: int
    fmt: SliceFormat
    encoding: Encoding
    input_levels: int       # 1 for binary spikes, else DAC levels of the integer input grid
    encoding_mode: str = "naive"

    @property
    def slices(self) -> int:
        return self.fmt.slices

    @property
    def crossbars(self) -> int:
        return self.row_tiles * self.col_tiles * self.fmt.slices

    @property
    def input_planes(self) -> int:
        return 1 if self.input_levels == 1 else int(self.input_levels).bit_length()

    def utilization(self, cfg: CrossbarConfig) -> float:
        return self.fan_in * self.out / (self.row_tiles * self.col_tiles * cfg.rows * cfg.cols)

    def row_slices(self, cfg: CrossbarConfig):
        for rt in range(self.row_tiles):
            yield rt, slice(rt * cfg.rows, min((rt + 1) * cfg.rows, self.fan_in))

    def col_slices(self, cfg: CrossbarConfig):
        for ct in range(self.col_tiles):
            yield ct, slice(ct * cfg.cols, min((ct + 1) * cfg.cols, self.out))


@dataclass
class TilePlan:
    config: CrossbarConfig
    layers: dict[int, LayerMapping] = field(default_factory=dict)

    @property
    def crossbars(self) -> int:
        return sum(m.crossbars for m in self.layers.values())

    def high_resistance_fraction(self) -> float:
        below = sum(int((m.encoding.g < self.config.g_mid).sum()) for m in self.layers.values())
        total = sum(m.encoding.g.size for m in self.layers.values())
        return below / total


def _input_levels(model: SnnModel, cfg: CrossbarConfig) -> list[int]:
    """Integer grid size of every layer's input (1 means binary spikes)."""
    full = 2 ** cfg.dac_bits - 1
    levels, cur = [], full
    for layer in model.layers:
        levels.append(cur)
        if layer.kind == "avgpool":
            cur = min(full, cur * layer.kernel * layer.kernel)
        elif layer.neuron is not None:
            cur = 1
        else:
            cur = full
    return levels


def map_layer(index: int, layer: LayerSpec, cfg: CrossbarConfig, input_levels: int = 1,
              complement: np.ndarray | None = None) -> LayerMapping:
    q = layer.matrix().T  # (fan_in, out)
    fmt = SliceFormat.for_bits(layer.weight_bits, cfg.bits_per_cell)
    enc = weight_to_conductance(q, cfg, layer.weight_bits, complement)
    return LayerMapping(index, q.shape[0], q.shape[1], math.ceil(q.shape[0] / cfg.rows),
                        math.ceil(q.shape[1] / cfg.cols), fmt, enc, input_levels,
                        "naive" if complement is None else "ni_aware")


def map_model(model: SnnModel, cfg: CrossbarConfig) -> TilePlan:
    levels = _input_levels(model, cfg)
    plan = TilePlan(cfg)
    for i, layer in enumerate(model.layers):
        if layer.is_weighted:
            plan.layers[i] = map_layer(i, layer, cfg, levels[i])
    return plan


# ----------------------------------------------------------------------------
# functional provider

@dataclass
class ReadoutStats:
    saturated: int = 0
    clipped_inputs: int = 0


class CrossbarMvm:
    """MVM provider running each mapped layer through its crossbars.

    One call evaluates every tile once: a fresh read-noise sample per crossbar
    is shared by all positions and input bit planes of that call.
    """

    def __init__(self, plan: TilePlan, nonideal: bool = False,
                 rng: np.random.Generator | None = None):
        self.plan = plan
        self.cfg = plan.config
        self.nonideal = nonideal
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.stats = ReadoutStats()

    def _planes(self, m: LayerMapping, cols: np.ndarray):
        if m.input_levels == 1:
            if np.any((cols != 0) & (cols != 1)):
                raise ContractError(f"layer {m.index} expects binary spikes")
            return [(cols, 1.0)]
        lv = m.input_levels
        xi = np.rint(cols * lv)
        bad = (xi < 0) | (xi > lv)
        self.stats.clipped_inputs += int(bad.sum())
        xi = np.clip(xi, 0, lv).astype(np.int64)
        return [(((xi >> b) & 1).astype(np.float64), 2.0 ** b / lv) for b in range(m.input_planes)]

    def _tile_currents(self, g: np.ndarray, v: np.ndarray) -> np.ndarray:
        if not self.nonideal:
            return ideal_mvm(g, v)
        return nonideal_mvm(g, v, self.cfg, self.rng)

    def _readout(self, g: np.ndarray, current: np.ndarray, active: np.ndarray, fmt: SliceFormat):
        cfg = self.cfg
        vr = cfg.v_read
        if cfg.adc_mode == "quantized":
            hi = (vr * g.sum(axis=0))[:, None]
            codes, sat = adc_quantize(current, cfg.adc_bits, 0.0, hi)
            self.stats.saturated += sat
            current = adc_dequantize(codes, cfg.adc_bits, 0.0, hi)
        d = (current / vr - active[None, :] * cfg.g_min) * fmt.digit_max / (cfg.g_max - cfg.g_min)
        return np.rint(d) if cfg.adc_mode == "exact" else d

    def layer_sums(self, m: LayerMapping, cols: np.ndarray) -> np.ndarray:
        """Integer-unit dot products (out, positions) of ``q @ cols``."""
        cfg = self.cfg
        planes = self._planes(m, cols)
        p = cols.shape[1]
        stacked = np.concatenate([pl for pl, _ in planes], axis=1)  # (fan_in, planes*p)
        total = np.zeros((m.out, stacked.shape[1]))
        for rt, rs in m.row_slices(cfg):
            x = stacked[rs]
            active = x.sum(axis=0)
            for ct, cs in m.col_slices(cfg):
                digit_sums = []
                for s in range(m.slices):
                    g = m.encoding.g[s, rs, cs]
                    cur = self._tile_currents(g, cfg.v_read * x)
                    digit_sums.append(self._readout(g, cur, active, m.fmt))
                meta = DiffMeta(m.fmt, m.encoding.complement[:, rt, cs])
                total[cs] += diff_correct(np.stack(digit_sums), active, meta)
        out = np.zeros((m.out, p))
        for k, (_, weight) in enumerate(planes):
            out += weight * total[:, k * p:(k + 1) * p]
        return out

    def __call__(self, index: int, layer: LayerSpec, cols: np.ndarray) -> np.ndarray:
        m = self.plan.layers[index]
        return layer.weights.scale * self.layer_sums(m, cols)
