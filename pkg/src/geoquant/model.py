"""A two-branch equivariant transformer over molecular graphs.

Each atom carries invariant scalar channels and equivariant vector channels.
Attention and all gates are computed from invariants only; the vector branch
is updated along unit bond directions and by mixing neighbour vectors with
invariant coefficients, which makes the architecture exactly equivariant in
full precision. Vector magnitudes re-enter the scalar branch as invariant
features, so a quantizer that preserves magnitudes exactly keeps the whole
scalar branch (and the energy) rotation-invariant even at low precision.

Three quantization modes share one forward path:
  fp32        no quantizers anywhere,
  naive-int8  symmetric per-tensor grids on every feature, including raw
              Cartesian vector components (the symmetry-breaking baseline),
  gaq-w4a8    4-bit per-channel weights, 8-bit scalar activations, and
              magnitude/direction decoupled 8-bit vector activations on a
              spherical codebook with tangent-projected gradients.
"""

from __future__ import annotations

import struct
import time
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np

from . import quantizers as qz
from . import tape
from .codebook import SphericalCodebook, build as build_codebook, codebook_id
from .dataset import MAX_SPECIES, MolecularFrame, rotate_frame
from .errors import CheckpointLoadError, ShapeMismatchError
from .tape import Var

QUANT_MODES = ("fp32", "naive-int8", "gaq-w4a8")
NORM_EPS = 1e-8

# Unit vectors have max component 1, so the geometry-blind grid needs no calibration.
_UNIT_GRID_SCHEME = qz.linear_scheme_from_maxabs(8, 1.0)


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    f0: int = 32
    f1: int = 8
    rbf_count: int = 16
    cutoff: float = 4.0          # Angstrom
    tau: float = 10.0
    quant_mode: str = "fp32"
    codebook: str = "fibonacci(256)"
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.cutoff <= 0 or self.tau <= 0:
            raise ValueError("cutoff and tau must be positive")
        if self.quant_mode not in QUANT_MODES:
            raise ValueError(f"unknown quant mode {self.quant_mode!r}")


@dataclass
class IrrepFeatures:
    scalars: Var   # (n, f0)
    vectors: Var   # (n, f1, 3)


@dataclass
class EdgeSet:
    recv: np.ndarray      # (E,) message destination i
    send: np.ndarray      # (E,) message source j
    unit: np.ndarray      # (E, 3) unit vector from i towards j
    dist: np.ndarray      # (E,)
    rbf: np.ndarray       # (E, rbf_count)


def neighbor_list(frame: MolecularFrame, cutoff: float):
    """All ordered pairs (i, j), i != j, with |r_j - r_i| <= cutoff."""
    pos = frame.positions
    delta = pos[None, :, :] - pos[:, None, :]
    dist = np.linalg.norm(delta, axis=-1)
    mask = (dist <= cutoff) & ~np.eye(frame.n_atoms, dtype=bool)
    recv, send = np.nonzero(mask)
    return recv, send, delta[recv, send], dist[recv, send]


def radial_basis(d: np.ndarray, rbf_count: int, cutoff: float) -> np.ndarray:
    """Gaussian basis on (0, cutoff] under a cosine envelope that vanishes at the cutoff."""
    d = np.atleast_1d(np.asarray(d, dtype=np.float64))
    centers = cutoff * (np.arange(rbf_count) + 1.0) / rbf_count
    width = cutoff / rbf_count
    gauss = np.exp(-0.5 * ((d[:, None] - centers[None, :]) / width) ** 2)
    envelope = np.where(d < cutoff, 0.5 * (np.cos(np.pi * d / cutoff) + 1.0), 0.0)
    return gauss * envelope[:, None]


def build_edges(frame: MolecularFrame, config: ModelConfig) -> EdgeSet:
    recv, send, vec, dist = neighbor_list(frame, config.cutoff)
    unit = vec / dist[:, None] if len(dist) else vec.reshape(0, 3)
    return EdgeSet(recv, send, unit, dist, radial_basis(dist, config.rbf_count, config.cutoff))


# --- quantization state -------------------------------------------------------


@dataclass
class QuantState:
    mode: str = "fp32"
    weight_bits: int | None = None
    weight_per_channel: bool = True
    scalar_schemes: dict[str, qz.QuantScheme] = field(default_factory=dict)
    vector_mag_schemes: dict[str, qz.QuantScheme] = field(default_factory=dict)
    vector_linear_schemes: dict[str, qz.QuantScheme] = field(default_factory=dict)
    nu_schemes: dict[str, qz.QuantScheme] = field(default_factory=dict)
    vector_dir_scheme: qz.QuantScheme | None = None
    equivariant_branch_frozen: bool = False
    counters: dict[str, int] = field(default_factory=lambda: {"equivariant": 0, "scalar": 0})

    @classmethod
    def fp32(cls) -> "QuantState":
        return cls(mode="fp32")

    def reset_counters(self) -> None:
        self.counters = {"equivariant": 0, "scalar": 0}


class CalibrationCollector:
    """Accumulates per-site activation statistics during full-precision forwards."""

    def __init__(self):
        self.scalar_maxabs: dict[str, np.ndarray] = {}
        self.scalar_tensor_maxabs: dict[str, float] = {}
        self.vector_mag_lo: dict[str, np.ndarray] = {}
        self.vector_mag_hi: dict[str, np.ndarray] = {}
        self.vector_comp_maxabs: dict[str, float] = {}
        self.nu_maxabs: dict[str, float] = {}

    def record_scalar(self, name: str, x: np.ndarray) -> None:
        per_channel = np.max(np.abs(x), axis=0) if x.shape[0] else np.zeros(x.shape[-1])
        if name in self.scalar_maxabs:
            self.scalar_maxabs[name] = np.maximum(self.scalar_maxabs[name], per_channel)
        else:
            self.scalar_maxabs[name] = per_channel
        self.scalar_tensor_maxabs[name] = max(
            self.scalar_tensor_maxabs.get(name, 0.0), float(per_channel.max(initial=0.0))
        )

    def record_vector(self, name: str, v: np.ndarray) -> None:
        mags = np.linalg.norm(v, axis=-1)          # (n, f1)
        masked = np.where(mags > 0, mags, np.inf)
        lo = np.min(masked, axis=0) if v.shape[0] else np.full(v.shape[1], np.inf)
        hi = np.max(mags, axis=0) if v.shape[0] else np.zeros(v.shape[1])
        if name in self.vector_mag_lo:
            self.vector_mag_lo[name] = np.minimum(self.vector_mag_lo[name], lo)
            self.vector_mag_hi[name] = np.maximum(self.vector_mag_hi[name], hi)
        else:
            self.vector_mag_lo[name] = lo
            self.vector_mag_hi[name] = hi
        self.vector_comp_maxabs[name] = max(
            self.vector_comp_maxabs.get(name, 0.0), float(np.max(np.abs(v), initial=0.0))
        )
        self.nu_maxabs[name] = max(
            self.nu_maxabs.get(name, 0.0), float(mags.max(initial=0.0))
        )


def quant_state_from_stats(
    mode: str, collector: CalibrationCollector, codebook: SphericalCodebook
) -> QuantState:
    """Build the per-site schemes for a mode from collected statistics."""
    if mode == "fp32":
        return QuantState.fp32()
    state = QuantState(mode=mode)
    if mode == "gaq-w4a8":
        state.weight_bits = 4
        state.weight_per_channel = True
        for name, maxabs in collector.scalar_maxabs.items():
            state.scalar_schemes[name] = qz.linear_scheme_from_maxabs(8, maxabs)
        for name in collector.vector_mag_lo:
            lo = collector.vector_mag_lo[name]
            hi = collector.vector_mag_hi[name]
            lo = np.where(np.isfinite(lo), lo, qz.MAGNITUDE_FLOOR)
            hi = np.where(hi > 0, hi, 1.0)
            # Headroom: magnitudes drift during training and the log grid is
            # cheap to widen (constant relative error across its span).
            state.vector_mag_schemes[name] = qz.magnitude_scheme(8, lo / 8.0, hi * 8.0)
        state.vector_dir_scheme = qz.direction_scheme(8, codebook)
    elif mode == "naive-int8":
        state.weight_bits = 8
        state.weight_per_channel = False
        for name, maxabs in collector.scalar_tensor_maxabs.items():
            state.scalar_schemes[name] = qz.linear_scheme_from_maxabs(8, maxabs)
        for name, maxabs in collector.vector_comp_maxabs.items():
            state.vector_linear_schemes[name] = qz.linear_scheme_from_maxabs(8, maxabs)
        for name, maxabs in collector.nu_maxabs.items():
            state.nu_schemes[name] = qz.linear_scheme_from_maxabs(8, maxabs)
    else:
        raise ValueError(f"unknown quant mode {mode!r}")
    return state


# --- parameters ---------------------------------------------------------------


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    f0, f1, k = config.f0, config.f1, config.rbf_count
    t = f0 + f1
    shapes: list[tuple[str, tuple[int, ...]]] = [("embed", (MAX_SPECIES, f0))]
    for layer in range(config.layers):
        p = f"l{layer}."
        shapes += [
            (p + "w_q", (t, f0)),
            (p + "w_k", (t, f0)),
            (p + "w_v", (t, f0)),
            (p + "w_rbf", (k, f0)),
            (p + "w_s1", (f0, f0)),
            (p + "b_s1", (f0,)),
            (p + "w_s2", (f0, f0)),
            (p + "b_s2", (f0,)),
            (p + "w_g", (2 * t + k, f0)),
            (p + "b_g", (f0,)),
            (p + "w_gd", (f0, f1)),
            (p + "b_gd", (f1,)),
            (p + "w_gv", (f0, f1)),
            (p + "b_gv", (f1,)),
        ]
    shapes += [
        ("head.w_e1", (f0, f0)),
        ("head.b_e1", (f0,)),
        ("head.w_e2", (f0, 1)),
        ("head.b_e2", (1,)),
        ("head.w_f", (f0, f1)),
        ("head.b_f", (f1,)),
    ]
    return shapes


def init_params(config: ModelConfig) -> dict[str, Var]:
    rng = np.random.default_rng(config.seed)
    params: dict[str, Var] = {}
    for name, shape in param_shapes(config):
        if name.endswith(("b_s1", "b_s2", "b_g", "b_gd", "b_gv", "b_e1", "b_e2", "b_f")):
            value = np.zeros(shape)
        elif name.endswith("w_gv"):
            # The neighbour-vector mixing head starts silent (zero-init residual
            # branch); training opens it only where it actually earns its keep.
            value = np.zeros(shape)
        elif name == "embed":
            value = rng.standard_normal(shape)
        else:
            fan_in = shape[0]
            value = rng.standard_normal(shape) / np.sqrt(fan_in)
        params[name] = Var(value)
    return params


# --- instrumentation ----------------------------------------------------------


class _Section:
    __slots__ = ("ns", "name", "t0")

    def __init__(self, ns: dict, name: str):
        self.ns = ns
        self.name = name

    def __enter__(self):
        self.t0 = time.perf_counter_ns()

    def __exit__(self, *exc):
        self.ns[self.name] += time.perf_counter_ns() - self.t0
        return False


class PhaseTimer:
    """Accumulates wall time per forward phase, for the latency breakdown."""

    PHASES = ("weights", "compute", "quant", "attention")

    def __init__(self):
        self.ns = dict.fromkeys(self.PHASES, 0)

    def section(self, name: str) -> _Section:
        return _Section(self.ns, name)

    def total_us(self) -> float:
        return sum(self.ns.values()) / 1e3


_NULL_SECTION = nullcontext()


def _section(timer: PhaseTimer | None, name: str):
    return timer.section(name) if timer is not None else _NULL_SECTION


# --- the model ------------------------------------------------------------------


class EquivariantModel:
    def __init__(
        self,
        config: ModelConfig,
        params: dict[str, Var] | None = None,
        quant_state: QuantState | None = None,
    ):
        self.config = config
        self.params = params if params is not None else init_params(config)
        for name, shape in param_shapes(config):
            if name not in self.params or self.params[name].value.shape != shape:
                raise ShapeMismatchError(f"parameter {name} missing or misshaped")
        # Without calibrated schemes the model runs in full precision even if
        # the config asks for a quantized mode; calibration swaps the state in.
        self.quant_state = quant_state if quant_state is not None else QuantState.fp32()
        self._codebook_cache: SphericalCodebook | None = None

    def codebook(self) -> SphericalCodebook:
        if self._codebook_cache is None:
            self._codebook_cache = build_codebook(self.config.codebook)
        return self._codebook_cache

    # -- quantization sites --

    def _weight(self, name: str, overrides, timer) -> Var:
        if overrides is not None and name in overrides:
            return Var(overrides[name])
        w = self.params[name]
        bits = self.quant_state.weight_bits
        if bits is None or name.split(".")[-1].startswith("b_"):
            return w
        with _section(timer, "weights"):
            value = w.value
            if self.quant_state.weight_per_channel:
                maxabs = np.max(np.abs(value), axis=0) if value.ndim == 2 else np.abs(value)
            else:
                maxabs = float(np.max(np.abs(value)))
            scheme = qz.linear_scheme_from_maxabs(bits, maxabs)
            return tape.quantize_linear_ste(w, scheme)

    def _site_scalar(self, name: str, x: Var, collector, timer) -> Var:
        if collector is not None:
            collector.record_scalar(name, x.value)
            return x
        scheme = self.quant_state.scalar_schemes.get(name)
        if scheme is None:
            return x
        with _section(timer, "quant"):
            self.quant_state.counters["scalar"] += 1
            return tape.quantize_linear_ste(x, scheme)

    def _site_vector(self, name: str, v: Var, collector, timer) -> tuple[Var, Var]:
        """Quantized message operand and invariant magnitudes for a vector tensor.

        The returned vectors are the copies consumed by the equivariant message
        path; the caller keeps the residual stream itself at full precision
        (it is a cheap per-node accumulator, not a memory-heavy operand).
        """
        state = self.quant_state
        if collector is not None:
            collector.record_vector(name, v.value)
            return v, tape.vnorm(v)
        if state.equivariant_branch_frozen:
            return v, tape.vnorm(v)
        if state.mode == "gaq-w4a8" and name in state.vector_mag_schemes:
            with _section(timer, "quant"):
                state.counters["equivariant"] += 1
                m = tape.vnorm(v)
                u = tape.vdir(v)
                m_hat = tape.quantize_magnitude_ste(m, state.vector_mag_schemes[name])
                c = tape.quantize_direction_ste(u, state.vector_dir_scheme)
                return tape.expand_dims(m_hat, -1) * c, m_hat
        if state.mode == "naive-int8" and name in state.vector_linear_schemes:
            with _section(timer, "quant"):
                state.counters["equivariant"] += 1
                v_hat = tape.quantize_linear_ste(v, state.vector_linear_schemes[name])
                nu = tape.quantize_linear_ste(tape.vnorm(v_hat), state.nu_schemes[name])
                return v_hat, nu
        return v, tape.vnorm(v)

    def _bond_directions(self, edges: EdgeSet, timer) -> Var:
        """Unit bond directions; the geometry-blind mode grids them like any feature."""
        state = self.quant_state
        unit = Var(edges.unit)
        if state.mode == "naive-int8" and not state.equivariant_branch_frozen:
            with _section(timer, "quant"):
                state.counters["equivariant"] += 1
                return tape.quantize_linear_ste(unit, _UNIT_GRID_SCHEME)
        return unit

    # -- forward --

    def layer_forward(
        self,
        feat: IrrepFeatures,
        edges: EdgeSet,
        layer: int,
        n_atoms: int,
        collector=None,
        timer: PhaseTimer | None = None,
        overrides=None,
    ) -> IrrepFeatures:
        cfg = self.config
        p = f"l{layer}."
        w_q = self._weight(p + "w_q", overrides, timer)
        w_k = self._weight(p + "w_k", overrides, timer)
        w_v = self._weight(p + "w_v", overrides, timer)
        w_rbf = self._weight(p + "w_rbf", overrides, timer)
        w_s1 = self._weight(p + "w_s1", overrides, timer)
        w_s2 = self._weight(p + "w_s2", overrides, timer)
        w_g = self._weight(p + "w_g", overrides, timer)
        w_gd = self._weight(p + "w_gd", overrides, timer)
        w_gv = self._weight(p + "w_gv", overrides, timer)
        b_s1, b_s2 = self.params[p + "b_s1"], self.params[p + "b_s2"]
        b_g, b_gd, b_gv = self.params[p + "b_g"], self.params[p + "b_gd"], self.params[p + "b_gv"]

        s = self._site_scalar(p + "s", feat.scalars, collector, timer)
        v_mix, nu = self._site_vector(p + "v", feat.vectors, collector, timer)

        with _section(timer, "compute"):
            t = tape.concat([s, nu], axis=1)                 # (n, f0+f1) invariants
            q = t @ w_q
            k = t @ w_k
            val = t @ w_v
            rbf = Var(edges.rbf)

        with _section(timer, "attention"):
            # Quadrature epsilon keeps the cosine exactly invariant to query
            # and key magnitude while still protecting the zero vector.
            qn = q / tape.expand_dims(
                tape.sqrt(tape.sum_(q * q, axis=1) + tape.as_var(NORM_EPS**2)), -1
            )
            kn = k / tape.expand_dims(
                tape.sqrt(tape.sum_(k * k, axis=1) + tape.as_var(NORM_EPS**2)), -1
            )
            logits = tape.as_var(cfg.tau) * tape.sum_(
                tape.gather(qn, edges.recv) * tape.gather(kn, edges.send), axis=1
            )
            alpha = segment_softmax(logits, edges.recv, n_atoms)

        with _section(timer, "compute"):
            gate = rbf @ w_rbf                               # no bias: vanishes at the cutoff
            msg = tape.segment_sum(
                tape.expand_dims(alpha, -1) * tape.gather(val, edges.send) * gate,
                edges.recv,
                n_atoms,
            )
        msg = self._site_scalar(p + "m", msg, collector, timer)
        with _section(timer, "compute"):
            hidden = tape.silu(msg @ w_s1 + b_s1)
            s_out = s + hidden @ w_s2 + b_s2

            pair = tape.concat(
                [tape.gather(t, edges.recv), tape.gather(t, edges.send), rbf], axis=1
            )
            g_hidden = tape.silu(pair @ w_g + b_g)
            g_dir = g_hidden @ w_gd + b_gd                   # coefficient on the bond direction
            g_mix = g_hidden @ w_gv + b_gv                   # coefficient on the neighbour vectors
            a_dir = tape.expand_dims(tape.expand_dims(alpha, -1) * g_dir, -1)
            a_mix = tape.expand_dims(tape.expand_dims(alpha, -1) * g_mix, -1)
        unit = tape.expand_dims(self._bond_directions(edges, timer), 1)  # (E, 1, 3)
        with _section(timer, "compute"):
            dv = tape.segment_sum(
                a_dir * unit + a_mix * tape.gather(v_mix, edges.send),
                edges.recv,
                n_atoms,
            )
            v_out = feat.vectors + dv
        return IrrepFeatures(s_out, v_out)

    def forward(
        self,
        frame: MolecularFrame,
        collector=None,
        timer: PhaseTimer | None = None,
        overrides=None,
    ) -> tuple[Var, Var]:
        """Energy (scalar Var) and per-atom forces ((n, 3) Var)."""
        cfg = self.config
        if np.any(frame.species >= MAX_SPECIES) or np.any(frame.species < 0):
            raise ShapeMismatchError("species index outside the embedding vocabulary")
        n = frame.n_atoms
        with _section(timer, "compute"):
            edges = build_edges(frame, cfg)
        embed = self._weight("embed", overrides, timer)
        with _section(timer, "compute"):
            feat = IrrepFeatures(
                scalars=tape.gather(embed, frame.species),
                vectors=Var(np.zeros((n, cfg.f1, 3))),
            )
        for layer in range(cfg.layers):
            feat = self.layer_forward(feat, edges, layer, n, collector, timer, overrides)

        w_e1 = self._weight("head.w_e1", overrides, timer)
        w_e2 = self._weight("head.w_e2", overrides, timer)
        w_f = self._weight("head.w_f", overrides, timer)
        b_e1, b_e2, b_f = self.params["head.b_e1"], self.params["head.b_e2"], self.params["head.b_f"]

        # The output layer is exempt from activation quantization: both heads
        # read the (exactly invariant) scalar stream, and the final vector
        # features enter the force head at full precision.
        s = self._site_scalar("head.s", feat.scalars, collector, timer)
        with _section(timer, "compute"):
            e_hidden = tape.silu(s @ w_e1 + b_e1)
            energy = tape.sum_(e_hidden @ w_e2 + b_e2)
            gates = s @ w_f + b_f             # (n, f1), invariant
            forces = tape.sum_(tape.expand_dims(gates, -1) * feat.vectors, axis=1)
        return energy, forces

    def predict(self, frame: MolecularFrame, timer: PhaseTimer | None = None, overrides=None):
        with tape.no_grad():
            energy, forces = self.forward(frame, timer=timer, overrides=overrides)
        return float(energy.value), forces.value


def segment_softmax(logits: Var, idx: np.ndarray, n: int) -> Var:
    """Softmax over edges grouped by receiver; the per-group max is detached."""
    peak = np.full(n, -np.inf)
    np.maximum.at(peak, idx, logits.value)
    z = tape.exp(logits - Var(peak[idx]))
    denom = tape.segment_sum(z, idx, n)
    return z / tape.gather(denom, idx)


# --- model-level metrics ---------------------------------------------------------


def local_equivariance_error(
    model: EquivariantModel, frame: MolecularFrame, rotations: list[np.ndarray]
) -> np.ndarray:
    """One force-equivariance residual per rotation (concatenated 2-norm)."""
    _, f0 = model.predict(frame)
    out = []
    for r in rotations:
        _, fr = model.predict(rotate_frame(frame, r))
        out.append(float(np.linalg.norm(fr - f0 @ np.asarray(r).T)))
    return np.array(out)


# --- checkpoint format ------------------------------------------------------------

_MAGIC = b"EQMD"
_VERSION = 1
_MODE_CODES = {"fp32": 0, "naive-int8": 1, "gaq-w4a8": 2}
_MODE_NAMES = {v: k for k, v in _MODE_CODES.items()}
_SITE_ROLES = {"scalar": 0, "vector-mag": 1, "vector-linear": 2, "nu": 3}
_ROLE_NAMES = {v: k for k, v in _SITE_ROLES.items()}


def _write_str(f, s: str) -> None:
    raw = s.encode("utf-8")
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)


def _read_str(f) -> str:
    (n,) = struct.unpack("<H", f.read(2))
    return f.read(n).decode("utf-8")


def save_checkpoint(model: EquivariantModel, path: str) -> None:
    cfg = model.config
    state = model.quant_state
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<H", _VERSION))
        f.write(struct.pack("<HHHH", cfg.layers, cfg.f0, cfg.f1, cfg.rbf_count))
        f.write(struct.pack("<dd", cfg.cutoff, cfg.tau))
        f.write(struct.pack("<B", _MODE_CODES[state.mode]))
        _write_str(f, cfg.codebook)
        f.write(struct.pack("<q", cfg.seed))
        names = [name for name, _ in param_shapes(cfg)]
        f.write(struct.pack("<I", len(names)))
        for name in names:
            value = model.params[name].value
            _write_str(f, name)
            f.write(struct.pack("<B", value.ndim))
            for d in value.shape:
                f.write(struct.pack("<I", d))
            f.write(value.astype("<f8").tobytes())
        if state.mode == "fp32":
            return
        f.write(struct.pack("<I", codebook_id(cfg.codebook)))
        packed = _pack_weights(model)
        f.write(struct.pack("<I", len(packed)))
        for name, tensor in packed:
            _write_str(f, name)
            qz.write_packed(tensor, f)
        sites: list[tuple[str, str, int, np.ndarray]] = []
        for name, sch in state.scalar_schemes.items():
            sites.append((name, "scalar", sch.bits, np.atleast_1d(np.asarray(sch.scale))))
        for name, sch in state.vector_mag_schemes.items():
            sites.append((name, "vector-mag", sch.bits, np.atleast_1d(np.asarray(sch.scale))))
        for name, sch in state.vector_linear_schemes.items():
            sites.append((name, "vector-linear", sch.bits, np.atleast_1d(np.asarray(sch.scale))))
        for name, sch in state.nu_schemes.items():
            sites.append((name, "nu", sch.bits, np.atleast_1d(np.asarray(sch.scale))))
        f.write(struct.pack("<I", len(sites)))
        for name, role, bits, scales in sites:
            _write_str(f, name)
            f.write(struct.pack("<BBI", _SITE_ROLES[role], bits, scales.size))
            f.write(scales.astype("<f8").tobytes())


def _pack_weights(model: EquivariantModel) -> list[tuple[str, qz.PackedTensor]]:
    state = model.quant_state
    out = []
    for name, _ in param_shapes(model.config):
        if name.split(".")[-1].startswith("b_"):
            continue
        value = model.params[name].value
        if state.weight_per_channel and value.ndim == 2:
            maxabs = np.max(np.abs(value), axis=0)
        else:
            maxabs = float(np.max(np.abs(value)))
        scheme = qz.linear_scheme_from_maxabs(state.weight_bits, maxabs)
        codes = qz.linear_codes(value, scheme)
        scales = np.atleast_1d(np.asarray(scheme.scale))
        schemes = [qz.linear_scheme(state.weight_bits, float(s)) for s in scales]
        out.append((name, qz.pack_tensor(codes, state.weight_bits, schemes)))
    return out


def load_checkpoint(path: str) -> EquivariantModel:
    try:
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != _MAGIC:
                raise CheckpointLoadError(f"bad checkpoint magic {magic!r}")
            (version,) = struct.unpack("<H", f.read(2))
            if version != _VERSION:
                raise CheckpointLoadError(f"unsupported checkpoint version {version}")
            layers, f0, f1, rbf_count = struct.unpack("<HHHH", f.read(8))
            cutoff, tau = struct.unpack("<dd", f.read(16))
            (mode_code,) = struct.unpack("<B", f.read(1))
            codebook_tag = _read_str(f)
            (seed,) = struct.unpack("<q", f.read(8))
            mode = _MODE_NAMES[mode_code]
            cfg = ModelConfig(
                layers=layers, f0=f0, f1=f1, rbf_count=rbf_count, cutoff=cutoff,
                tau=tau, quant_mode=mode, codebook=codebook_tag, seed=seed,
            )
            (n_params,) = struct.unpack("<I", f.read(4))
            params: dict[str, Var] = {}
            for _ in range(n_params):
                name = _read_str(f)
                (rank,) = struct.unpack("<B", f.read(1))
                shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(rank))
                count = int(np.prod(shape)) if shape else 1
                data = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape)
                params[name] = Var(data.copy())
            if mode == "fp32":
                return EquivariantModel(cfg, params, QuantState.fp32())
            (cb_id,) = struct.unpack("<I", f.read(4))
            if cb_id != codebook_id(codebook_tag):
                raise CheckpointLoadError("codebook id does not match construction tag")
            (n_packed,) = struct.unpack("<I", f.read(4))
            for _ in range(n_packed):
                _read_str(f)
                qz.read_packed(f)
            state = QuantState(mode=mode)
            state.weight_bits = 4 if mode == "gaq-w4a8" else 8
            state.weight_per_channel = mode == "gaq-w4a8"
            if mode == "gaq-w4a8":
                state.vector_dir_scheme = qz.direction_scheme(8, build_codebook(codebook_tag))
            (n_sites,) = struct.unpack("<I", f.read(4))
            for _ in range(n_sites):
                name = _read_str(f)
                role_code, bits, n_scales = struct.unpack("<BBI", f.read(6))
                scales = np.frombuffer(f.read(8 * n_scales), dtype="<f8").copy()
                scale = float(scales[0]) if n_scales == 1 else scales
                role = _ROLE_NAMES[role_code]
                if role == "scalar":
                    state.scalar_schemes[name] = qz.linear_scheme(bits, scale)
                elif role == "vector-mag":
                    state.vector_mag_schemes[name] = qz.QuantScheme(
                        kind=qz.KIND_MAGNITUDE, bits=bits, scale=scale
                    )
                elif role == "vector-linear":
                    state.vector_linear_schemes[name] = qz.linear_scheme(bits, scale)
                else:
                    state.nu_schemes[name] = qz.linear_scheme(bits, scale)
            return EquivariantModel(cfg, params, state)
    except (OSError, struct.error) as exc:
        raise CheckpointLoadError(f"cannot load checkpoint {path}: {exc}") from exc
