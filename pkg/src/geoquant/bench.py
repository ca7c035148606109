"""Memory-bandwidth microbenchmarks and the latency breakdown.

The GEMV kernels isolate weight-memory traffic: the same single-threaded
loop nest reads float32, int8, or packed int4 weights, so the wall-time
ratio between bit widths measures the bandwidth multiplier directly.
Byte counts are always computed from shapes and bit widths, never measured.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from . import quantizers as qz
from .model import EquivariantModel, PhaseTimer, param_shapes

DEFAULT_CACHE_BYTES = 32 * 1024 * 1024
MEMORY_BOUND_FACTOR = 8  # benched-width weight bytes must exceed this multiple of cache


def detect_cache_bytes() -> int:
    """Last-level cache size from sysfs, with a conservative fallback and cap."""
    for index in ("index3", "index2"):
        path = Path(f"/sys/devices/system/cpu/cpu0/cache/{index}/size")
        try:
            text = path.read_text().strip()
        except OSError:
            continue
        if text.endswith("K"):
            return min(int(text[:-1]) * 1024, 64 * 1024 * 1024)
        if text.endswith("M"):
            return min(int(text[:-1]) * 1024 * 1024, 64 * 1024 * 1024)
    return DEFAULT_CACHE_BYTES


@njit(cache=True, fastmath=True)
def _gemv_f32(w, x, y):
    rows, cols = w.shape
    for r in range(rows):
        acc = np.float32(0.0)
        for c in range(cols):
            acc += w[r, c] * x[c]
        y[r] = acc


@njit(cache=True, fastmath=True)
def _gemv_i8(w, scales, x, y):
    rows, cols = w.shape
    for r in range(rows):
        acc = np.float32(0.0)
        for c in range(cols):
            acc += np.float32(w[r, c]) * x[c]
        y[r] = scales[r] * acc


@njit(cache=True, fastmath=True)
def _gemv_i4(packed, scales, x, y):
    rows, half = packed.shape
    lut = np.empty(16, dtype=np.float32)
    for r in range(rows):
        s = scales[r]
        for v in range(16):
            code = v - 16 if v >= 8 else v
            lut[v] = s * code
        acc = np.float32(0.0)
        for b in range(half):
            byte = packed[r, b]
            acc += lut[byte & 0xF] * x[2 * b] + lut[byte >> 4] * x[2 * b + 1]
        y[r] = acc


@dataclass
class BenchReport:
    op_name: str
    bits: int
    rows: int
    cols: int
    bytes_moved: int
    us_median: float
    us_p10: float
    us_p90: float
    speedup_vs_fp32: float = 0.0
    memory_bound: bool = True
    max_abs_error: float = 0.0
    error_bound: float = 0.0


def _time_kernel(fn, trials: int, warmup: int) -> tuple[float, float, float]:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(trials):
        t0 = time.perf_counter_ns()
        fn()
        times.append((time.perf_counter_ns() - t0) / 1e3)
    times = np.sort(np.array(times))
    return (
        float(np.median(times)),
        float(times[max(0, int(0.1 * len(times)) - 1)]),
        float(times[min(len(times) - 1, int(0.9 * len(times)))]),
    )


def bench_gemv(
    rows: int,
    cols: int,
    bits: int,
    trials: int = 30,
    warmup: int = 5,
    seed: int = 0,
    cache_bytes: int | None = None,
) -> BenchReport:
    """Time a packed k-bit weight x float activation matrix-vector product.

    The weight matrix is quantized per output channel; results are checked
    against a float64 reference of the unquantized weights, with the error
    bounded by the per-channel scale times the column count.
    """
    if bits not in (4, 8, 32):
        raise ValueError("bench_gemv supports bits in {4, 8, 32}")
    if cols % 2:
        raise ValueError("cols must be even for nibble packing")
    cache = cache_bytes if cache_bytes is not None else detect_cache_bytes()
    memory_bound = rows * cols * bits // 8 >= MEMORY_BOUND_FACTOR * cache

    rng = np.random.default_rng(seed)
    w = rng.standard_normal((rows, cols))
    x = rng.uniform(-1.0, 1.0, cols)
    reference = w @ x  # float64 oracle on the unquantized weights

    activation_bytes = cols * 4 + rows * 4
    weight_bytes = rows * cols * bits // 8
    x32 = x.astype(np.float32)
    y = np.empty(rows, dtype=np.float32)

    if bits == 32:
        w32 = w.astype(np.float32)
        fn = lambda: _gemv_f32(w32, x32, y)
        scales = np.full(rows, 2.0 ** -20)
    else:
        scales = np.max(np.abs(w), axis=1) / qz.qmax(bits)
        codes = np.clip(np.round(w / scales[:, None]), -qz.qmax(bits), qz.qmax(bits))
        scales32 = scales.astype(np.float32)
        if bits == 8:
            w8 = codes.astype(np.int8)
            fn = lambda: _gemv_i8(w8, scales32, x32, y)
        else:
            unsigned = (codes.astype(np.int64) & 0xF).astype(np.uint8)
            packed = (unsigned[:, 0::2] | (unsigned[:, 1::2] << 4)).astype(np.uint8)
            fn = lambda: _gemv_i4(packed, scales32, x32, y)

    med, p10, p90 = _time_kernel(fn, trials, warmup)
    fn()
    max_err = float(np.max(np.abs(y.astype(np.float64) - reference)))
    bound = float(np.max(scales) * cols)
    return BenchReport(
        op_name="gemv",
        bits=bits,
        rows=rows,
        cols=cols,
        bytes_moved=weight_bytes + activation_bytes,
        us_median=med,
        us_p10=p10,
        us_p90=p90,
        memory_bound=memory_bound,
        max_abs_error=max_err,
        error_bound=bound,
    )


def bench_gemv_suite(
    rows: int,
    cols: int,
    trials: int = 30,
    warmup: int = 5,
    seed: int = 0,
    cache_bytes: int | None = None,
) -> list[BenchReport]:
    """fp32 / int8 / int4 on the same shape, with speedups relative to fp32."""
    reports = [
        bench_gemv(rows, cols, bits, trials, warmup, seed, cache_bytes)
        for bits in (32, 8, 4)
    ]
    base = reports[0].us_median
    for r in reports:
        r.speedup_vs_fp32 = base / r.us_median if r.us_median > 0 else 0.0
    return reports


BENCH_CSV_HEADER = "op,bits,rows,cols,bytes,us_median,us_p10,us_p90,speedup_vs_fp32"


def bench_reports_csv(reports: list[BenchReport]) -> list[str]:
    rows = [BENCH_CSV_HEADER]
    for r in reports:
        rows.append(
            f"{r.op_name},{r.bits},{r.rows},{r.cols},{r.bytes_moved},"
            f"{r.us_median:.9g},{r.us_p10:.9g},{r.us_p90:.9g},{r.speedup_vs_fp32:.9g}"
        )
    return rows


# --- per-phase model latency -------------------------------------------------


PHASE_LABELS = {
    "weights": "Memory I/O (Weights)",
    "compute": "Compute (GEMM)",
    "quant": "Quant Overhead",
    "attention": "Attention",
}


@dataclass
class PhaseReport:
    phase: str
    us_median: float
    bytes_moved: int


def model_weight_bytes(model: EquivariantModel) -> int:
    """Declared weight traffic per forward: 32-bit in fp32 mode, else the
    quantized width for matrices (biases stay full precision)."""
    bits = model.quant_state.weight_bits or 32
    total = 0
    for name, shape in param_shapes(model.config):
        count = int(np.prod(shape))
        if name.split(".")[-1].startswith("b_"):
            total += count * 4
        else:
            total += count * bits // 8
    return total


def _materialize_weights(model: EquivariantModel) -> dict[str, np.ndarray]:
    """The per-forward weight fetch: a copy in fp32 mode, unpack+dequantize
    of the packed codes in quantized modes."""
    state = model.quant_state
    out = {}
    for name, _ in param_shapes(model.config):
        if name.split(".")[-1].startswith("b_"):
            continue
        value = model.params[name].value
        if state.weight_bits is None:
            out[name] = value.copy()
            continue
        if state.weight_per_channel and value.ndim == 2:
            maxabs = np.max(np.abs(value), axis=0)
        else:
            maxabs = float(np.max(np.abs(value)))
        scheme = qz.linear_scheme_from_maxabs(state.weight_bits, maxabs)
        packed = qz.pack_codes(qz.linear_codes(value, scheme), state.weight_bits)
        codes = qz.unpack_codes(packed, value.size, state.weight_bits).reshape(value.shape)
        out[name] = codes * np.asarray(scheme.scale)
    return out


def bench_model_breakdown(
    model: EquivariantModel, frame, trials: int = 30, warmup: int = 5
) -> tuple[list[PhaseReport], float]:
    """Median per-phase forward latency plus the total, in microseconds."""
    totals = []
    phase_samples: dict[str, list[float]] = {p: [] for p in PhaseTimer.PHASES}
    for i in range(warmup + trials):
        timer = PhaseTimer()
        t0 = time.perf_counter_ns()
        with timer.section("weights"):
            mats = _materialize_weights(model)
        model.predict(frame, timer=timer, overrides=mats)
        total_us = (time.perf_counter_ns() - t0) / 1e3
        if i < warmup:
            continue
        totals.append(total_us)
        for p in PhaseTimer.PHASES:
            phase_samples[p].append(timer.ns[p] / 1e3)
    weight_bytes = model_weight_bytes(model)
    reports = []
    for p in PhaseTimer.PHASES:
        reports.append(
            PhaseReport(
                phase=PHASE_LABELS[p],
                us_median=float(np.median(phase_samples[p])),
                bytes_moved=weight_bytes if p == "weights" else 0,
            )
        )
    return reports, float(np.median(totals))


def breakdown_csv(reports: list[PhaseReport], total_us: float) -> list[str]:
    rows = ["phase,us_median,bytes"]
    for r in reports:
        rows.append(f"{r.phase},{r.us_median:.9g},{r.bytes_moved}")
    rows.append(f"Total,{total_us:.9g},0")
    return rows


# --- closed-form per-layer costs ----------------------------------------------


ARCH_COSTS = {
    "painn": lambda l, f: 4.0 * f,
    "spookynet": lambda l, f: (l + 1) ** 2 * f,
    "nequip": lambda l, f: (l + 1) ** 6 * f,
    "so3krates": lambda l, f: (l + 1) ** 2 + f,
}


@dataclass
class ComplexityRow:
    arch: str
    l_max: int
    feature_width: int
    n_atoms: int
    avg_neighbors: float
    k_bits: int
    cost_full: float = field(init=False)
    rho: float = field(init=False)
    cost_quant: float = field(init=False)

    def __post_init__(self):
        if self.arch not in ARCH_COSTS:
            raise ValueError(f"unknown architecture tag {self.arch!r}")
        per_edge = ARCH_COSTS[self.arch](self.l_max, self.feature_width)
        self.cost_full = self.n_atoms * self.avg_neighbors * per_edge
        self.rho = self.k_bits / 32.0
        self.cost_quant = self.cost_full * self.rho


def complexity_table(configs: list[tuple[str, int, int, int, float, int]]) -> list[ComplexityRow]:
    return [ComplexityRow(*cfg) for cfg in configs]


def complexity_csv(rows: list[ComplexityRow]) -> list[str]:
    out = ["arch,l_max,F,n,avg_neighbors,k,cost_full,rho,cost_quant,gain"]
    for r in rows:
        out.append(
            f"{r.arch},{r.l_max},{r.feature_width},{r.n_atoms},{r.avg_neighbors:.9g},"
            f"{r.k_bits},{r.cost_full:.9g},{r.rho:.9g},{r.cost_quant:.9g},{r.rho:.9g}"
        )
    return out
