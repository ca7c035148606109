"""Quantization-aware training with a branch-separated schedule.

The scalar branch quantizes from the first step; the vector branch stays in
full precision for the first n_warm epochs and its magnitude grids are
calibrated from the warmed-up activations at the moment it unfreezes. An
optional rotation-consistency penalty (sampled over Haar rotations) is added
to the energy/force loss to suppress the residual equivariance error of the
quantized model.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field

import numpy as np

from . import tape
from .dataset import MolecularFrame, rotate_frame
from .errors import DivergedLossError, EmptyCalibrationSetError
from .geom import HaarSampler
from .model import (
    CalibrationCollector,
    EquivariantModel,
    QuantState,
    local_equivariance_error,
    quant_state_from_stats,
    save_checkpoint,
)
from .tape import Var

MIN_CALIBRATION_FRAMES = 16


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    n_warm: int = 10
    lr: float = 5e-3
    lr_decay: float = 0.97
    lee_weight: float = 0.01
    lee_rotations: int = 1
    batch_size: int = 8
    force_weight: float = 10.0
    recalibrate_every: int = 10   # refresh activation ranges as they drift
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.n_warm <= self.epochs:
            raise ValueError("n_warm must lie in [0, epochs]")
        if self.lee_weight < 0:
            raise ValueError("lee_weight must be non-negative")


class Adam:
    def __init__(self, params: dict[str, Var], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            m_hat = self.m[name] / (1 - self.b1**self.t)
            v_hat = self.v[name] / (1 - self.b2**self.t)
            p.value = p.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None


def calibrate(model: EquivariantModel, frames: list[MolecularFrame]) -> QuantState:
    """Collect activation statistics in full precision and build quantizer schemes."""
    if len(frames) == 0:
        raise EmptyCalibrationSetError("calibration set is empty")
    if len(frames) < MIN_CALIBRATION_FRAMES:
        raise EmptyCalibrationSetError(
            f"calibration needs at least {MIN_CALIBRATION_FRAMES} frames, got {len(frames)}"
        )
    collector = collect_stats(model, frames)
    mode = model.config.quant_mode
    codebook = model.codebook() if mode == "gaq-w4a8" else None
    return quant_state_from_stats(mode, collector, codebook)


def collect_stats(model: EquivariantModel, frames: list[MolecularFrame]) -> CalibrationCollector:
    collector = CalibrationCollector()
    saved = model.quant_state
    model.quant_state = QuantState.fp32()
    try:
        with tape.no_grad():
            for frame in frames:
                model.forward(frame, collector=collector)
    finally:
        model.quant_state = saved
    return collector


def lee_loss(
    model: EquivariantModel,
    frame: MolecularFrame,
    n_rot: int,
    sampler: HaarSampler,
    base_forces: Var | None = None,
) -> Var:
    """Mean rotation-consistency residual of the force output, on the tape."""
    if base_forces is None:
        _, base_forces = model.forward(frame)
    total = tape.as_var(0.0)
    for _ in range(n_rot):
        r = sampler.rotation()
        _, rotated = model.forward(rotate_frame(frame, r))
        diff = rotated - base_forces @ Var(np.asarray(r).T)
        total = total + tape.fnorm(diff)
    return total * tape.as_var(1.0 / n_rot)


def evaluate_mae(model: EquivariantModel, frames: list[MolecularFrame]) -> tuple[float, float]:
    e_err, f_err = [], []
    for frame in frames:
        energy, forces = model.predict(frame)
        e_err.append(abs(energy - frame.energy))
        f_err.append(np.mean(np.abs(forces - frame.forces)))
    return float(np.mean(e_err)), float(np.mean(f_err))


def evaluate_lee(
    model: EquivariantModel,
    frames: list[MolecularFrame],
    n_rotations: int,
    seed: int,
    identity_only: bool = False,
) -> dict[str, float]:
    sampler = HaarSampler(seed)
    values = []
    for frame in frames:
        rotations = (
            [np.eye(3) for _ in range(n_rotations)]
            if identity_only
            else [sampler.rotation() for _ in range(n_rotations)]
        )
        values.append(local_equivariance_error(model, frame, rotations))
    values = np.concatenate(values)
    return {
        "mean": float(values.mean()),
        "max": float(values.max()),
        "std": float(values.std()),
        "n_frames": len(frames),
        "n_rotations": n_rotations,
    }


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    final_checkpoint: str | None = None


METRICS_HEADER = "epoch,loss,e_mae,f_mae,lee"


def metrics_rows(history: list[dict]) -> list[str]:
    rows = [METRICS_HEADER]
    for h in history:
        rows.append(
            f"{h['epoch']},{h['loss']:.9g},{h['e_mae']:.9g},{h['f_mae']:.9g},{h['lee']:.9g}"
        )
    return rows


def write_metrics(history: list[dict], path: str) -> None:
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(metrics_rows(history)) + "\n")


def train(
    model: EquivariantModel,
    frames: list[MolecularFrame],
    tc: TrainConfig,
    checkpoint_dir: str | None = None,
) -> TrainResult:
    """Run QAT (or plain training in fp32 mode) and return per-epoch metrics."""
    if any(frame.energy is None for frame in frames):
        raise ValueError("training frames must carry energy and force labels")
    mode = model.config.quant_mode
    quantized = mode != "fp32"
    if quantized:
        model.quant_state = calibrate(model, frames)
        model.quant_state.equivariant_branch_frozen = tc.n_warm > 0
    tape.debug_checks = True
    tape.reset_gste_stats()
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)

    rng = np.random.default_rng(tc.seed)
    batch_sampler = HaarSampler(tc.seed * 2 + 1)
    metrics_sampler_seed = tc.seed * 2 + 7919
    opt = Adam(model.params, lr=tc.lr)
    last_good = {k: p.value.copy() for k, p in model.params.items()}
    result = TrainResult()

    for epoch in range(tc.epochs):
        if quantized:
            at_unfreeze = epoch == tc.n_warm and tc.n_warm > 0
            periodic = (
                tc.recalibrate_every > 0
                and epoch > 0
                and epoch % tc.recalibrate_every == 0
            )
            if at_unfreeze or periodic:
                # Quantizer grids track the drifting activation statistics.
                refreshed = calibrate(model, frames)
                refreshed.counters = model.quant_state.counters
                model.quant_state = refreshed
            model.quant_state.equivariant_branch_frozen = epoch < tc.n_warm
        opt.lr = tc.lr * tc.lr_decay**epoch
        order = rng.permutation(len(frames))
        batch_losses = []
        for start in range(0, len(order), tc.batch_size):
            batch = order[start : start + tc.batch_size]
            loss = tape.as_var(0.0)
            for idx in batch:
                frame = frames[int(idx)]
                energy, forces = model.forward(frame)
                e_term = tape.abs_(energy - tape.as_var(frame.energy))
                f_term = tape.mean_(tape.abs_(forces - Var(frame.forces)))
                frame_loss = e_term + tape.as_var(tc.force_weight) * f_term
                if tc.lee_weight > 0:
                    penalty = lee_loss(model, frame, tc.lee_rotations, batch_sampler, forces)
                    frame_loss = frame_loss + tape.as_var(tc.lee_weight) * penalty
                loss = loss + frame_loss
            loss = loss * tape.as_var(1.0 / len(batch))
            if not np.isfinite(loss.value):
                for k, p in model.params.items():
                    p.value = last_good[k]
                if checkpoint_dir:
                    path = os.path.join(checkpoint_dir, "last_good.ckpt")
                    save_checkpoint(model, path)
                raise DivergedLossError(f"loss became non-finite at epoch {epoch}")
            tape.backward(loss)
            opt.step()
            batch_losses.append(float(loss.value))
        e_mae, f_mae = evaluate_mae(model, frames)
        lee_stats = evaluate_lee(
            model, frames[: min(8, len(frames))], 2, metrics_sampler_seed + epoch
        )
        result.history.append(
            {
                "epoch": epoch,
                "loss": float(np.mean(batch_losses)),
                "e_mae": e_mae,
                "f_mae": f_mae,
                "lee": lee_stats["mean"],
            }
        )
        last_good = {k: p.value.copy() for k, p in model.params.items()}
    tape.debug_checks = False
    if checkpoint_dir:
        path = os.path.join(checkpoint_dir, "final.ckpt")
        save_checkpoint(model, path)
        result.final_checkpoint = path
    return result


def clone_model(model: EquivariantModel) -> EquivariantModel:
    """Deep copy of parameters and quantization state for paired comparisons."""
    params = {k: Var(p.value.copy()) for k, p in model.params.items()}
    return EquivariantModel(model.config, params, copy.deepcopy(model.quant_state))
