"""Command-line pipeline: teacher-train, calibrate, quantize, finetune, sample, analyze.

Every command reads one RunConfig, writes under ``paths.out_dir`` and stamps
its outputs with a provenance block. Re-running a command with the same
config and seed rewrites byte-identical files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import analysis
from .autograd import ContractError, NonFiniteError
from .binfmt import FormatError
from .calibration import generate_calibration, load_calibration, save_calibration
from .checkpoint import Checkpoint, ConfigMismatchError, load_checkpoint, save_checkpoint
from .config import RunConfig
from .diffusion import (TeacherTrainingError, denoising_loss, make_dataset, make_schedule, sample, timesteps,
                        train_teacher, trajectory_mse)
from .finetune import Evaluator, NonFiniteLossError, attach_and_init, run_stage, write_log_csv

log = logging.getLogger("tinyquest")

ANALYSES = ("taylor", "decomposition", "sweep", "te_ablation", "dist")
PROBE_SEEDS = (0, 1, 2, 3, 4)
DECOMPOSITION_KS = (1, 4, 16, 64)

# sections each artifact depends on; a mismatch in any of them invalidates it
TEACHER_SECTIONS = ("task",)
QUANT_SECTIONS = ("task", "quant")
FULL_SECTIONS = ("task", "quant", "train")


class MissingArtifactError(FileNotFoundError):
    def __init__(self, path: Path, what: str, command: str):
        super().__init__(f"missing {what} at {path}; produce it with `tinyquest {command}`")
        self.path = path
        self.what = what
        self.command = command


def _require(path: Path, what: str, command: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, what, command)
    return path


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _provenance(cfg: RunConfig, command: str, sections, inputs: dict[str, Path]) -> dict:
    return {"command": command, "config_hash": cfg.hash(sections), "seed": cfg.seed, "config": cfg.to_dict(),
            "inputs": {name: _digest(p) for name, p in sorted(inputs.items())}}


def _write_json(obj, path: Path) -> Path:
    analysis.write_json(obj, path)
    return path


def _schedule(cfg: RunConfig):
    return make_schedule(cfg.task.T, cfg.task.beta_start, cfg.task.beta_end)


def _evaluator(cfg: RunConfig, teacher, seed: int | None = None) -> Evaluator:
    return Evaluator(teacher, _schedule(cfg), cfg.task.num_steps, cfg.task.eval_samples,
                     cfg.seed if seed is None else seed)


def _load_teacher(cfg: RunConfig, allow_mismatch: bool) -> Checkpoint:
    path = _require(cfg.teacher_path, "teacher checkpoint", "teacher-train")
    ckpt = load_checkpoint(path)
    ckpt.check_hash(cfg.hash(TEACHER_SECTIONS), path, allow_mismatch)
    return ckpt


def _load_calibration(cfg: RunConfig):
    return load_calibration(_require(cfg.calibration_path, "calibration file", "calibrate"))


def _load_quantized(cfg: RunConfig, path: Path, command: str, sections, allow_mismatch: bool) -> Checkpoint:
    ckpt = load_checkpoint(_require(path, "quantized checkpoint", command))
    ckpt.check_hash(cfg.hash(sections), path, allow_mismatch)
    return ckpt


# -- commands -------------------------------------------------------------------------

def cmd_teacher_train(cfg: RunConfig) -> Path:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    t = cfg.task
    data = make_dataset(t.dataset, t.dataset_size, t.resolution, seed=cfg.stream("data"))
    teacher_cfg = cfg.teacher_config()
    teacher = train_teacher(data, teacher_cfg, seed=cfg.stream("teacher"))
    save_checkpoint(cfg.teacher_path, teacher, _provenance(cfg, "teacher-train", TEACHER_SECTIONS, {}))
    held_out = denoising_loss(teacher, data, _schedule(cfg), 512, seed=cfg.stream("teacher/eval"))
    _write_json({"held_out_loss": held_out, "final_train_loss": teacher_cfg.history[-1]},
                cfg.out_dir / "teacher_report.json")
    return cfg.teacher_path


def cmd_calibrate(cfg: RunConfig, allow_mismatch: bool = False) -> Path:
    teacher_ckpt = _load_teacher(cfg, allow_mismatch)
    steps = timesteps(cfg.task.T, cfg.task.num_steps)
    calib = generate_calibration(teacher_ckpt.teacher, _schedule(cfg), cfg.task.calib_per_step, steps,
                                 seed=cfg.stream("calibration"), num_steps=cfg.task.num_steps)
    cfg.calibration_path.parent.mkdir(parents=True, exist_ok=True)
    save_calibration(calib, cfg.calibration_path)
    return cfg.calibration_path


def cmd_quantize(cfg: RunConfig, allow_mismatch: bool = False) -> Path:
    teacher = _load_teacher(cfg, allow_mismatch).teacher
    calib = _load_calibration(cfg)
    qm = attach_and_init(teacher, calib, cfg.train_config())
    save_checkpoint(cfg.ptq_path, qm, _provenance(cfg, "quantize", QUANT_SECTIONS,
                                                  {"teacher": cfg.teacher_path, "calibration": cfg.calibration_path}))
    return cfg.ptq_path


def cmd_finetune(cfg: RunConfig, allow_mismatch: bool = False) -> Path:
    calib = _load_calibration(cfg)
    teacher = _load_teacher(cfg, allow_mismatch).teacher
    qm = _load_quantized(cfg, cfg.ptq_path, "quantize", QUANT_SECTIONS, allow_mismatch).model
    tcfg = cfg.train_config()
    evaluator = _evaluator(cfg, teacher)
    rows: list[dict] = []
    mse = {"taquant": evaluator(qm)}
    for stage, key in (("TE", "sla_te"), ("A", "sla_a")):
        run_stage(qm, calib, tcfg, stage, rows)
        mse[key] = evaluator(qm)
    save_checkpoint(cfg.quest_path, qm, _provenance(cfg, "finetune", FULL_SECTIONS,
                                                    {"teacher": cfg.teacher_path, "calibration": cfg.calibration_path,
                                                     "ptq": cfg.ptq_path}))
    write_log_csv(rows, cfg.out_dir / "finetune_log.csv")
    _write_json({"trajectory_mse": mse, "trainable_fraction": qm.trainable_fraction(),
                 "stage_history": qm.history}, cfg.out_dir / "finetune_report.json")
    return cfg.quest_path


def cmd_sample(cfg: RunConfig, checkpoint: Path | None = None, seeds=(0,), allow_mismatch: bool = False) -> Path:
    teacher = _load_teacher(cfg, allow_mismatch).teacher
    path = Path(checkpoint) if checkpoint is not None else cfg.quest_path
    ckpt = load_checkpoint(_require(path, "checkpoint to sample from", "finetune"))
    per_seed = {}
    for seed in seeds:
        ev = _evaluator(cfg, teacher, seed)
        if ckpt.quantized:
            traj = ev.trajectory(ckpt.model)
        else:
            traj = sample(ckpt.teacher, ev.schedule, ev.num_steps, x_T=ev.noise)
        per_seed[str(seed)] = trajectory_mse(ev.reference, traj)
        np.save(cfg.out_dir / f"samples_{path.stem}_seed{seed}.npy", traj[-1])
    report = {"checkpoint": path.name, "seeds": list(seeds), "trajectory_mse": per_seed,
              "mean_trajectory_mse": float(np.mean(list(per_seed.values())))}
    return _write_json(report, cfg.out_dir / f"sample_report_{path.stem}.json")


def cmd_analyze(cfg: RunConfig, which: str, allow_mismatch: bool = False) -> Path:
    if which not in ANALYSES:
        raise ContractError(f"analysis must be one of {ANALYSES}, got {which!r}")
    out = cfg.out_dir / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / f"{which}.csv", out / f"{which}.json"

    if which == "taylor":
        rows, summary = [], {}
        for seed in PROBE_SEEDS:
            net, z, _ = analysis.make_probe(seed)
            loss = analysis.fp_loss(net, z)
            direction = analysis.random_direction(z.shape, 1.0, seed)
            slope, reports = analysis.fit_residual_exponent(net, loss, z, direction)
            large = analysis.taylor_check(net, loss, z, direction)
            for r in reports + [large]:
                rows.append({"seed": seed, **r.__dict__, "relative_residual": r.relative_residual})
            summary[str(seed)] = {"fitted_exponent": slope, "relative_residual_at_1": large.relative_residual}
        analysis.write_csv(rows, csv_path)
        return _write_json(summary, json_path)

    if which == "decomposition":
        rows, summary = [], {}
        for seed in PROBE_SEEDS:
            net, z, _ = analysis.make_probe(seed)
            delta = analysis.random_direction(z.shape, 1.0, seed)
            gaps = {}
            for K in DECOMPOSITION_KS:
                rep = analysis.decomposition_check(net, z, delta, K)
                gaps[str(K)] = rep.gap
                rows.append({"seed": seed, "K": K, "epsilon_norm": rep.epsilon_norm, "lhs": rep.lhs,
                             "rhs": rep.rhs, "gap": rep.gap})
            summary[str(seed)] = {"gap": gaps, "metadata": rep.metadata}
        analysis.write_csv(rows, csv_path)
        return _write_json(summary, json_path)

    teacher = _load_teacher(cfg, allow_mismatch).teacher
    calib = _load_calibration(cfg)
    tcfg = cfg.train_config()
    evaluator = _evaluator(cfg, teacher)

    if which == "sweep":
        rep = analysis.sensitivity_sweep(teacher, calib, evaluator, cfg=tcfg)
        analysis.write_csv(rep.rows(), csv_path)
        return _write_json({"baseline": rep.baseline, "groups": rep.groups, "degradation": rep.degradation,
                            "ranking_at_6_bits": rep.ranking(6)}, json_path)

    if which == "te_ablation":
        result = analysis.te_ablation(teacher, calib, tcfg, evaluator)
        analysis.write_csv([{"run": k, "trajectory_mse": v} for k, v in result.items()], csv_path)
        return _write_json(result, json_path)

    before = _load_quantized(cfg, cfg.ptq_path, "quantize", QUANT_SECTIONS, allow_mismatch).model
    after = _load_quantized(cfg, cfg.quest_path, "finetune", FULL_SECTIONS, allow_mismatch).model
    layers = sorted(before.selection.C_A)
    stats_b = analysis.distribution_stats(before, calib, layers)
    stats_a = analysis.distribution_stats(after, calib, layers)
    analysis.write_csv(analysis.compare_distributions(stats_b, stats_a), csv_path)
    return _write_json({"before": {k: {**v.__dict__, "histogram": v.histogram()} for k, v in stats_b.items()},
                        "after": {k: {**v.__dict__, "histogram": v.histogram()} for k, v in stats_a.items()}},
                       json_path)


# -- entry point ----------------------------------------------------------------------

EXPECTED_ERRORS = (MissingArtifactError, ContractError, FormatError, ConfigMismatchError, TeacherTrainingError,
                   NonFiniteLossError, NonFiniteError, OSError)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("--allow-config-mismatch", action="store_true",
                        help="use upstream artifacts produced under a different config")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tinyquest", description="Quantize and finetune a toy diffusion model.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("teacher-train", parents=[common], help="train the full-precision teacher")
    sub.add_parser("calibrate", parents=[common], help="draw the calibration set from teacher trajectories")
    sub.add_parser("quantize", parents=[common], help="attach and initialize quantizers (PTQ checkpoint)")
    sub.add_parser("finetune", parents=[common], help="run both alignment stages on the PTQ checkpoint")
    p = sub.add_parser("sample", parents=[common], help="sample and report trajectory MSE to the teacher")
    p.add_argument("--checkpoint", type=Path, help="checkpoint to sample from (default: the finetuned one)")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p = sub.add_parser("analyze", parents=[common], help="write an analysis report")
    p.add_argument("which", choices=ANALYSES)
    p = sub.add_parser("write-config", help="print the default configuration as YAML")
    p.add_argument("--set", dest="overrides", action="append", default=[])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "write-config":
            cfg = RunConfig.load(None, args.overrides)
            sys.stdout.write(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
            return 0
        cfg = RunConfig.load(args.config, args.overrides)
        allow = args.allow_config_mismatch
        if args.command == "teacher-train":
            out = cmd_teacher_train(cfg)
        elif args.command == "calibrate":
            out = cmd_calibrate(cfg, allow)
        elif args.command == "quantize":
            out = cmd_quantize(cfg, allow)
        elif args.command == "finetune":
            out = cmd_finetune(cfg, allow)
        elif args.command == "sample":
            out = cmd_sample(cfg, args.checkpoint, args.seeds, allow)
        else:
            out = cmd_analyze(cfg, args.which, allow)
    except EXPECTED_ERRORS as exc:
        error = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        if isinstance(exc, MissingArtifactError):
            error.update(artifact=str(exc.path), produced_by=exc.command)
        sys.stderr.write(json.dumps(error) + "\n")
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
