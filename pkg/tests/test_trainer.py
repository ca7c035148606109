"""Training loop: calibration, schedules, the consistency penalty, metrics."""

import dataclasses
import os

import numpy as np
import pytest

from geoquant import tape
from geoquant.dataset import SyntheticDatasetSpec, generate_dataset
from geoquant.errors import DivergedLossError, EmptyCalibrationSetError
from geoquant.geom import HaarSampler
from geoquant.model import EquivariantModel, ModelConfig, load_checkpoint
from geoquant.quantizers import linear_scheme_from_maxabs, qmax
from geoquant.tape import Var
from geoquant.trainer import (
    TrainConfig,
    calibrate,
    clone_model,
    collect_stats,
    evaluate_lee,
    lee_loss,
    metrics_rows,
    train,
    write_metrics,
)

SMALL = ModelConfig(layers=2, f0=16, f1=4, rbf_count=8, seed=7)


@pytest.fixture(scope="module")
def frames():
    return generate_dataset(SyntheticDatasetSpec(n_frames=16, atoms_per_frame=4, seed=3))


def test_calibration_scale_arithmetic():
    # constant activation 1.0 at 8 bits puts the top code on the value itself
    scheme = linear_scheme_from_maxabs(8, 1.0)
    assert scheme.scale == 1.0 / qmax(8)


def test_calibrate_rejects_empty_and_tiny(frames):
    model = EquivariantModel(dataclasses.replace(SMALL, quant_mode="gaq-w4a8"))
    with pytest.raises(EmptyCalibrationSetError):
        calibrate(model, [])
    with pytest.raises(EmptyCalibrationSetError):
        calibrate(model, frames[:4])


def test_all_zero_vector_channel_falls_back(frames):
    model = EquivariantModel(dataclasses.replace(SMALL, quant_mode="gaq-w4a8"))
    state = calibrate(model, frames)
    # layer-0 vectors are identically zero; its magnitude grid must still exist
    scheme = state.vector_mag_schemes["l0.v"]
    assert np.all(np.asarray(scheme.scale) > 0)


def test_calibration_matches_single_pass_scan(frames):
    model = EquivariantModel(dataclasses.replace(SMALL, quant_mode="gaq-w4a8"))
    collector = collect_stats(model, frames)
    state = calibrate(model, frames)
    for name, maxabs in collector.scalar_maxabs.items():
        expected = np.where(maxabs > 0, maxabs, 1.0) / qmax(8)
        np.testing.assert_allclose(np.asarray(state.scalar_schemes[name].scale), expected)


def test_lee_loss_fp32_is_tiny(frames):
    model = EquivariantModel(SMALL)
    value = lee_loss(model, frames[0], 2, HaarSampler(0))
    assert float(value.value) <= 1e-8


def test_lee_loss_identity_sampler_is_exactly_zero(frames):
    class IdentitySampler:
        def rotation(self):
            return np.eye(3)

    model = EquivariantModel(SMALL)
    value = lee_loss(model, frames[0], 1, IdentitySampler())
    assert float(value.value) == 0.0


def test_lee_loss_positive_for_naive_mode(frames):
    model = EquivariantModel(dataclasses.replace(SMALL, quant_mode="naive-int8"))
    model.quant_state = calibrate(model, frames)
    value = lee_loss(model, frames[0], 4, HaarSampler(1))
    assert float(value.value) > 0.0


def test_fp32_overfit_improves_energy(frames):
    model = EquivariantModel(ModelConfig(layers=1, f0=16, f1=4, rbf_count=8, seed=7))
    tc = TrainConfig(epochs=5, n_warm=0, lr=1e-2, lee_weight=0.0, batch_size=2, seed=0)
    result = train(model, frames[:2], tc)
    assert result.history[-1]["e_mae"] < result.history[0]["e_mae"]


def test_warm_up_contract_never_quantizes_vectors(frames):
    model = EquivariantModel(dataclasses.replace(SMALL, quant_mode="gaq-w4a8"))
    tc = TrainConfig(epochs=3, n_warm=3, lr=1e-3, lee_weight=0.0, batch_size=8, seed=0)
    train(model, frames, tc)
    assert model.quant_state.counters["equivariant"] == 0
    assert model.quant_state.counters["scalar"] > 0
    assert model.quant_state.equivariant_branch_frozen


def test_unfreeze_after_warm_up_quantizes_vectors(frames):
    model = EquivariantModel(dataclasses.replace(SMALL, quant_mode="gaq-w4a8"))
    tc = TrainConfig(epochs=3, n_warm=1, lr=1e-3, lee_weight=0.0, batch_size=8, seed=0)
    train(model, frames, tc)
    assert model.quant_state.counters["equivariant"] > 0


def test_gste_orthogonality_holds_every_step(frames):
    model = EquivariantModel(dataclasses.replace(SMALL, quant_mode="gaq-w4a8"))
    tc = TrainConfig(epochs=2, n_warm=0, lr=1e-3, lee_weight=0.1, batch_size=8, seed=0)
    train(model, frames, tc)
    assert tape.gste_stats["count"] > 0
    assert tape.gste_stats["max_abs_dot"] <= 1e-10


def test_training_is_bit_reproducible(frames):
    histories = []
    finals = []
    for _ in range(2):
        model = EquivariantModel(dataclasses.replace(SMALL, quant_mode="gaq-w4a8"))
        tc = TrainConfig(epochs=3, n_warm=1, lr=2e-3, lee_weight=0.01, batch_size=8, seed=4)
        result = train(model, frames, tc)
        histories.append(metrics_rows(result.history))
        finals.append(b"".join(p.value.tobytes() for p in model.params.values()))
    assert histories[0] == histories[1]
    assert finals[0] == finals[1]


def test_metrics_rows_format(frames, tmp_path):
    model = EquivariantModel(ModelConfig(layers=1, f0=8, f1=2, rbf_count=4, seed=1))
    tc = TrainConfig(epochs=2, n_warm=0, lr=1e-3, lee_weight=0.0, batch_size=8, seed=0)
    result = train(model, frames, tc)
    rows = metrics_rows(result.history)
    assert rows[0] == "epoch,loss,e_mae,f_mae,lee"
    assert rows[1].startswith("0,")
    assert [int(r.split(",")[0]) for r in rows[1:]] == [0, 1]
    path = str(tmp_path / "metrics.csv")
    write_metrics(result.history, path)
    assert open(path).read().splitlines() == rows


def test_diverged_loss_aborts_with_checkpoint(frames, tmp_path):
    model = EquivariantModel(ModelConfig(layers=1, f0=8, f1=2, rbf_count=4, seed=1))
    tc = TrainConfig(epochs=5, n_warm=0, lr=1e200, lee_weight=0.0, batch_size=8, seed=0)
    ckpt_dir = str(tmp_path / "ckpts")
    with pytest.raises(DivergedLossError):
        train(model, frames, tc, checkpoint_dir=ckpt_dir)
    rescued = load_checkpoint(os.path.join(ckpt_dir, "last_good.ckpt"))
    assert np.all(np.isfinite(rescued.params["embed"].value))


def test_lee_regularizer_not_worse_than_unregularized(frames):
    results = {}
    for lam in (0.01, 0.0):
        model = EquivariantModel(dataclasses.replace(SMALL, quant_mode="gaq-w4a8", seed=13))
        tc = TrainConfig(
            epochs=12, n_warm=2, lr=3e-3, lr_decay=0.98, lee_weight=lam,
            lee_rotations=1, batch_size=8, seed=5,
        )
        train(model, frames, tc)
        results[lam] = evaluate_lee(model, frames[:6], 20, seed=42)["mean"]
    assert results[0.01] <= 1.05 * results[0.0]


def test_paired_qat_lee_ratio_at_equal_bits(frames):
    """Identical trained weights, two quantization schemes: the geometry-aware
    one keeps at least ten times less rotation error than the per-axis grid."""
    model = EquivariantModel(dataclasses.replace(SMALL, quant_mode="gaq-w4a8", seed=21))
    tc = TrainConfig(
        epochs=40, n_warm=0, lr=4e-3, lr_decay=0.985, lee_weight=8.0,
        lee_rotations=2, batch_size=8, seed=1,
    )
    train(model, frames, tc)
    naive = EquivariantModel(
        dataclasses.replace(SMALL, quant_mode="naive-int8", seed=21),
        {k: Var(p.value.copy()) for k, p in model.params.items()},
    )
    naive.quant_state = calibrate(naive, frames)
    lee_gaq = evaluate_lee(model, frames[:8], 25, seed=99)["mean"]
    lee_naive = evaluate_lee(naive, frames[:8], 25, seed=99)["mean"]
    assert lee_gaq <= 0.1 * lee_naive


def test_clone_model_is_independent(frames):
    model = EquivariantModel(SMALL)
    twin = clone_model(model)
    twin.params["embed"].value += 1.0
    assert not np.allclose(twin.params["embed"].value, model.params["embed"].value)
