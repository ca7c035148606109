"""Command-line interface: dataset generation, training, quantization,
evaluation, molecular dynamics, benchmarks, and codebook construction.

Every command takes an optional --config file plus repeatable --set
key=value overrides, writes its outputs under a run directory, and echoes
the effective configuration there for exact reproduction. Exit codes:
0 success, 2 usage/configuration errors, 1 runtime failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from .codebook import build as build_codebook, estimate_covering_radius, save_codebook
from .config import RunConfig
from .dataset import (
    SPECIES_SYMBOLS,
    SyntheticDatasetSpec,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .errors import GeoquantError, UsageError
from .model import EquivariantModel, ModelConfig, load_checkpoint, save_checkpoint
from .trainer import (
    TrainConfig,
    calibrate,
    evaluate_lee,
    evaluate_mae,
    train,
    write_metrics,
)

RUN_ROOT_ENV = "GEOQUANT_RUN_ROOT"


def _resolve_out(path: str) -> str:
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not os.path.isabs(path):
        path = os.path.join(root, path)
    os.makedirs(path, exist_ok=True)
    return path


def _require_file(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(
        layers=cfg.get("model.layers"),
        f0=cfg.get("model.f0"),
        f1=cfg.get("model.f1"),
        rbf_count=cfg.get("model.rbf"),
        cutoff=cfg.get("model.cutoff"),
        tau=cfg.get("model.tau"),
        quant_mode=cfg.get("model.quant_mode"),
        codebook=cfg.get("model.codebook"),
        seed=cfg.get("model.seed"),
    )


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        epochs=cfg.get("train.epochs"),
        n_warm=cfg.get("train.n_warm"),
        lr=cfg.get("train.lr"),
        lr_decay=cfg.get("train.lr_decay"),
        lee_weight=cfg.get("train.lee_weight"),
        lee_rotations=cfg.get("train.lee_rotations"),
        batch_size=cfg.get("train.batch_size"),
        force_weight=cfg.get("train.force_weight"),
        seed=cfg.get("train.seed"),
    )


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = _resolve_out(args.out)
    spec = SyntheticDatasetSpec(
        n_frames=cfg.get("data.n_frames"),
        atoms_per_frame=cfg.get("data.atoms"),
        potential=cfg.get("data.potential"),
        amplitude=cfg.get("data.amplitude"),
        seed=cfg.get("data.seed"),
    )
    frames = generate_dataset(spec)
    save_dataset(frames, os.path.join(out, "dataset.xyz"))
    cfg.write_echo(os.path.join(out, "config.echo"))
    print(f"wrote {len(frames)} frames to {out}/dataset.xyz")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    out = _resolve_out(args.out)
    frames = load_dataset(_require_file(args.dataset, "dataset"))
    model_cfg = _model_config(cfg)
    if args.from_checkpoint:
        base = load_checkpoint(_require_file(args.from_checkpoint, "checkpoint"))
        model = EquivariantModel(model_cfg, base.params)
    else:
        model = EquivariantModel(model_cfg)
    result = train(model, frames, _train_config(cfg), checkpoint_dir=os.path.join(out, "checkpoints"))
    write_metrics(result.history, os.path.join(out, "metrics.csv"))
    cfg.write_echo(os.path.join(out, "config.echo"))
    last = result.history[-1]
    print(
        f"trained {len(result.history)} epochs: e_mae={last['e_mae']:.6g} "
        f"f_mae={last['f_mae']:.6g} lee={last['lee']:.6g}"
    )
    print(f"checkpoint: {result.final_checkpoint}")
    return 0


def cmd_quantize(args, cfg: RunConfig) -> int:
    out = _resolve_out(args.out)
    base = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    frames = load_dataset(_require_file(args.dataset, "calibration dataset"))
    target_cfg = dataclasses.replace(base.config, quant_mode=args.mode)
    model = EquivariantModel(target_cfg, base.params)
    model.quant_state = calibrate(model, frames)
    path = os.path.join(out, f"{args.mode}.ckpt")
    save_checkpoint(model, path)
    cfg.write_echo(os.path.join(out, "config.echo"))
    print(f"quantized checkpoint: {path}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    out = _resolve_out(args.out)
    model = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    frames = load_dataset(_require_file(args.dataset, "dataset"))
    e_mae, f_mae = evaluate_mae(model, frames)
    with open(os.path.join(out, "eval.csv"), "w", encoding="ascii") as f:
        f.write("e_mae,f_mae,n_frames\n")
        f.write(f"{e_mae:.9g},{f_mae:.9g},{len(frames)}\n")
    cfg.write_echo(os.path.join(out, "config.echo"))
    print(f"e_mae={e_mae:.9g} f_mae={f_mae:.9g} over {len(frames)} frames")
    return 0


def cmd_eval_lee(args, cfg: RunConfig) -> int:
    out = _resolve_out(args.out)
    model = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    frames = load_dataset(_require_file(args.dataset, "dataset"))
    stats = evaluate_lee(
        model,
        frames,
        n_rotations=cfg.get("eval.rotations"),
        seed=cfg.get("eval.seed"),
        identity_only=args.identity_rotations,
    )
    with open(os.path.join(out, "lee.csv"), "w", encoding="ascii") as f:
        f.write("mean_lee,max_lee,std_lee,n_frames,n_rotations\n")
        f.write(
            f"{stats['mean']:.9g},{stats['max']:.9g},{stats['std']:.9g},"
            f"{stats['n_frames']},{stats['n_rotations']}\n"
        )
    cfg.write_echo(os.path.join(out, "config.echo"))
    print(f"lee mean={stats['mean']:.9g} max={stats['max']:.9g} std={stats['std']:.9g}")
    return 0


def cmd_md(args, cfg: RunConfig) -> int:
    from .dynamics import (
        MDState,
        maxwell_boltzmann_velocities,
        model_force_provider,
        run_nve,
        write_energy_csv,
        write_trajectory_frame,
    )
    from .potentials import make_provider

    out = _resolve_out(args.out)
    frames = load_dataset(_require_file(args.dataset, "dataset"))
    index = cfg.get("md.frame_index")
    if not 0 <= index < len(frames):
        raise UsageError(f"md.frame_index {index} outside dataset of {len(frames)} frames")
    frame = frames[index]
    if args.checkpoint:
        model = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
        provider = model_force_provider(model, frame.species)
    elif args.potential:
        provider = make_provider(args.potential, frame.species)
    else:
        raise UsageError("md needs --checkpoint or --potential")
    rng = np.random.default_rng(cfg.get("md.seed"))
    masses = frame.masses()
    state = MDState(
        positions=frame.positions.copy(),
        velocities=maxwell_boltzmann_velocities(masses, cfg.get("md.temperature"), rng),
        masses=masses,
        dt=cfg.get("md.dt"),
    )
    symbols = [SPECIES_SYMBOLS[z] for z in frame.species]
    traj_path = os.path.join(out, "trajectory.xyz")
    with open(traj_path, "w", encoding="ascii") as traj:
        result = run_nve(
            state,
            provider,
            n_steps=cfg.get("md.steps"),
            report_every=cfg.get("md.report_every"),
            frame_callback=lambda st, ek, ep: write_trajectory_frame(traj, symbols, st, ek, ep),
        )
    write_energy_csv(result.samples, os.path.join(out, "energies.csv"))
    rep = result.report
    with open(os.path.join(out, "md_summary.csv"), "w", encoding="ascii") as f:
        f.write("drift_rate_mev_atom_ps,max_excursion_mev_atom,exploded,halted_step,n_steps,n_atoms\n")
        f.write(
            f"{rep.drift_rate:.9g},{rep.max_excursion:.9g},{int(rep.exploded)},"
            f"{rep.halted_step},{rep.n_steps},{rep.n_atoms}\n"
        )
    cfg.write_echo(os.path.join(out, "config.echo"))
    print(
        f"md: steps={rep.halted_step if rep.exploded else rep.n_steps} "
        f"drift={rep.drift_rate:.6g} meV/atom/ps exploded={rep.exploded}"
    )
    return 0


def cmd_bench(args, cfg: RunConfig) -> int:
    from .bench import (
        bench_gemv_suite,
        bench_model_breakdown,
        bench_reports_csv,
        breakdown_csv,
        complexity_csv,
        complexity_table,
    )

    out = _resolve_out(args.out)
    wrote = []
    if args.gemv:
        reports = bench_gemv_suite(
            rows=cfg.get("bench.rows"),
            cols=cfg.get("bench.cols"),
            trials=cfg.get("bench.trials"),
            warmup=cfg.get("bench.warmup"),
            seed=cfg.get("bench.seed"),
        )
        with open(os.path.join(out, "bench.csv"), "w", encoding="ascii") as f:
            f.write("\n".join(bench_reports_csv(reports)) + "\n")
        for r in reports:
            print(
                f"gemv bits={r.bits}: {r.us_median:.3g} us, bytes={r.bytes_moved}, "
                f"speedup={r.speedup_vs_fp32:.3g}"
            )
        wrote.append("bench.csv")
    if args.model:
        model = load_checkpoint(_require_file(args.model, "checkpoint"))
        frames = load_dataset(_require_file(args.dataset, "dataset"))
        phases, total = bench_model_breakdown(
            model, frames[0], trials=cfg.get("bench.trials"), warmup=cfg.get("bench.warmup")
        )
        with open(os.path.join(out, "breakdown.csv"), "w", encoding="ascii") as f:
            f.write("\n".join(breakdown_csv(phases, total)) + "\n")
        for p in phases:
            print(f"{p.phase}: {p.us_median:.3g} us")
        print(f"Total: {total:.3g} us")
        wrote.append("breakdown.csv")
    if args.complexity:
        n, avg_n = 100, 30.0
        rows = complexity_table(
            [
                ("painn", 1, 32, n, avg_n, 8),
                ("spookynet", 2, 32, n, avg_n, 8),
                ("nequip", 3, 32, n, avg_n, 8),
                ("so3krates", 1, 32, n, avg_n, 8),
            ]
        )
        with open(os.path.join(out, "complexity.csv"), "w", encoding="ascii") as f:
            f.write("\n".join(complexity_csv(rows)) + "\n")
        for r in rows:
            print(
                f"{r.arch}: cost_full={r.cost_full:.6g} rho={r.rho:.4g} "
                f"cost_quant={r.cost_quant:.6g}"
            )
        wrote.append("complexity.csv")
    if not wrote:
        raise UsageError("bench needs at least one of --gemv, --model, --complexity")
    cfg.write_echo(os.path.join(out, "config.echo"))
    return 0


def cmd_codebook(args, cfg: RunConfig) -> int:
    out = _resolve_out(args.out)
    cb = build_codebook(cfg.get("codebook.construction"))
    radius = estimate_covering_radius(cb, cfg.get("codebook.samples"), cfg.get("codebook.seed"))
    path = os.path.join(out, "codebook.txt")
    save_codebook(cb, path)
    cfg.write_echo(os.path.join(out, "config.echo"))
    print(f"codebook {cb.construction}: {len(cb)} codewords, covering radius est {radius:.6g} rad")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geoquant",
        description="Symmetry-preserving quantization toolkit for equivariant force fields",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, needs_out: bool = True):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        if needs_out:
            p.add_argument("--out", required=True, help="run directory")

    p = sub.add_parser("gen-data", help="generate a labelled synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train (QAT when model.quant_mode is quantized)")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset .xyz path")
    p.add_argument("--from-checkpoint", help="initialise parameters from a checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("quantize", help="calibrate and write a quantized checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="calibration dataset .xyz path")
    p.add_argument("--mode", required=True, choices=["naive-int8", "gaq-w4a8"])
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", help="energy/force MAE of a checkpoint on a dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("eval-lee", help="rotation-equivariance error statistics")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--identity-rotations", action="store_true", help="debug: rotate by identity only")
    p.set_defaults(func=cmd_eval_lee)

    p = sub.add_parser("md", help="NVE molecular dynamics with drift accounting")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset providing the initial frame")
    p.add_argument("--checkpoint", help="model force provider")
    p.add_argument("--potential", help="analytic force provider tag")
    p.set_defaults(func=cmd_md)

    p = sub.add_parser("bench", help="bandwidth, latency breakdown, and cost-model tables")
    common(p)
    p.add_argument("--gemv", action="store_true")
    p.add_argument("--model", help="checkpoint for the per-phase breakdown")
    p.add_argument("--dataset", help="dataset for the breakdown input frame")
    p.add_argument("--complexity", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("codebook", help="build a spherical codebook and estimate its covering radius")
    common(p)
    p.set_defaults(func=cmd_codebook)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, args.overrides)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except GeoquantError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
