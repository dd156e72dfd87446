"""Command-line front end.

Exit codes: 0 success, 1 data/config/usage error, 2 numerical abort.
Every output lands under ``--out``.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import COMPONENTS, RunConfig, load_config, to_flat
from .dataio import Dataset, generate_synthetic, load_csv, save_csv
from .errors import ConfigError, CrossKDError, NumericalError
from .metrics import evaluate, grad_cam, write_heatmap_text, write_pgm
from .models import StudentModel
from .report import ReportRow, SCHEMA_VERSION, dump_json, measure_efficiency, write_report
from .training import (
    ABLATIONS,
    FoldResult,
    aggregate,
    build_teacher,
    combo_name,
    fold_splits,
    heuristic_weights,
    initial_teacher_state,
    load_teacher,
    resolve_lambdas,
    run_ablation,
    run_fold,
    stratified_split,
    student_config,
    train_teacher,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.data.source == "synthetic":
        return generate_synthetic(cfg.data.synthetic_spec())
    if cfg.data.source == "csv":
        if not cfg.data.path:
            raise ConfigError("data.source=csv needs data.path")
        return load_csv(cfg.data.path, channels=cfg.data.channels)
    raise ConfigError(f"data.source must be synthetic or csv, got {cfg.data.source!r}")


def _manifest(command: str, cfg: RunConfig, ds: Dataset, **extra) -> dict:
    return {"schema_version": SCHEMA_VERSION, "command": command, "config": to_flat(cfg),
            "dataset": ds.manifest(), **extra}


def _slug(name: str) -> str:
    return name.lower().replace("+", "_")


def _holdout(cfg: RunConfig, ds: Dataset):
    tr, va = stratified_split(ds.labels, cfg.cv.val_fraction, cfg.seed)
    return ds.subset(tr), ds.subset(va)


def _teacher_for(cfg: RunConfig, ds: Dataset, train: Dataset, val: Dataset):
    if cfg.cv.teacher_mode == "checkpoint":
        return load_teacher(cfg, ds, cfg.cv.teacher_checkpoint)
    return train_teacher(cfg, train, val, seed=cfg.seed, init_state=initial_teacher_state(cfg, ds))


def _write_runs(out: Path, runs: dict[str, tuple[list[FoldResult], dict]], single: bool) -> dict:
    folds_dir, ckpt_dir = out / "folds", out / "checkpoints"
    folds_dir.mkdir(exist_ok=True)
    ckpt_dir.mkdir(exist_ok=True)
    manifest_runs = {}
    for name, (results, agg) in runs.items():
        for r in results:
            stem = f"fold{r.fold}" if single else f"{_slug(name)}_fold{r.fold}"
            dump_json(r.to_dict(timing=True), folds_dir / f"{stem}.json")
            if r.student_state is not None:
                save_checkpoint(ckpt_dir / f"student_{stem}.ckpt", r.student_state)
            if r.teacher_state is not None:
                save_checkpoint(ckpt_dir / f"teacher_fold{r.fold}.ckpt", r.teacher_state)
        manifest_runs[name] = {
            "components": list(results[0].components) if results else [],
            "folds": [r.to_dict(timing=False) for r in results],
            "aggregate": agg,
        }
    return manifest_runs


def _efficiency(cfg: RunConfig, ds: Dataset):
    teacher = build_teacher(cfg, ds, seed=0)
    student = StudentModel(student_config(cfg, ds), ds.num_classes, seed=0, expected_grid=teacher.grid)
    return measure_efficiency(teacher, student, cfg.report.measure_latency, cfg.report.latency_iters)


def _finish_runs(command: str, cfg: RunConfig, ds: Dataset, out: Path, runs, single: bool) -> dict:
    manifest_runs = _write_runs(out, runs, single)
    eff = _efficiency(cfg, ds)
    rows = [ReportRow(name, list(info["components"]), info["aggregate"]) for name, info in manifest_runs.items()]
    write_report(rows, out / "report.csv", eff)
    manifest = _manifest(command, cfg, ds, runs=manifest_runs, efficiency=eff.to_dict(timing=False))
    dump_json(manifest, out / "manifest.json")
    return manifest


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(cfg: RunConfig, args, out: Path) -> int:
    ds = load_dataset(cfg)
    save_csv(ds, out / "data.csv")
    dump_json(_manifest("gen-data", cfg, ds), out / "manifest.json")
    print(f"wrote {len(ds)} samples to {out / 'data.csv'}")
    return 0


def cmd_train_teacher(cfg: RunConfig, args, out: Path) -> int:
    ds = load_dataset(cfg)
    train, val = _holdout(cfg, ds)
    init = initial_teacher_state(cfg, ds)
    teacher = train_teacher(cfg, train, val, seed=cfg.seed, init_state=init)
    (out / "checkpoints").mkdir(exist_ok=True)
    save_checkpoint(out / "checkpoints" / "teacher.ckpt", teacher.state_dict())
    scores = evaluate(teacher, val)
    dump_json(_manifest("train-teacher", cfg, ds, teacher={"best_epoch": teacher.best_epoch, "val": scores,
                                                         "pretrained": init is not None,
                                                         "trace": teacher.history}), out / "manifest.json")
    print(f"teacher val accuracy {scores['accuracy']:.4f} macro-F1 {scores['macro_f1']:.4f}")
    return 0


def _format_lambdas(lam) -> str:
    return "(" + ", ".join(f"{v:.4f}" for v in lam) + ")"


def cmd_heuristic(cfg: RunConfig, args, out: Path) -> int:
    ds = load_dataset(cfg)
    if cfg.kd.heuristic_scores is not None:
        scores = [float(s) for s in cfg.kd.heuristic_scores]
        lam = heuristic_weights(scores)
        measured = False
    else:
        cfg.kd.lambda_source = "heuristic"
        train, val = _holdout(cfg, ds)
        teacher = _teacher_for(cfg, ds, train, val)
        lam, scores = resolve_lambdas(cfg, teacher, train, val, cfg.seed)
        measured = True
    dump_json(_manifest("heuristic", cfg, ds, heuristic={"measured": measured,
                                                         "scores": dict(zip(COMPONENTS, scores)),
                                                         "lambdas": dict(zip(COMPONENTS, lam.tolist()))}),
              out / "manifest.json")
    print("scores  " + " ".join(f"{c}={s:.4f}" for c, s in zip(COMPONENTS, scores)))
    print("lambdas " + " ".join(f"{c}={v:.4f}" for c, v in zip(COMPONENTS, lam)))
    print(_format_lambdas(lam))
    return 0


def cmd_distill(cfg: RunConfig, args, out: Path) -> int:
    ds = load_dataset(cfg)
    split = fold_splits(cfg, ds)[0]
    results = run_fold(cfg, ds, split, [tuple(cfg.kd.components)], initial_teacher_state(cfg, ds))
    res = results[0]
    runs = {combo_name(res.components): (results, aggregate(results))}
    _finish_runs("distill", cfg, ds, out, runs, single=True)
    print(f"test accuracy {res.test_accuracy:.4f} macro-F1 {res.test_macro_f1:.4f} (best epoch {res.best_epoch})")
    return 0


def _print_runs(runs) -> None:
    for name, (results, agg) in runs.items():
        print(
            f"{name}: accuracy {agg['test_accuracy_mean']:.4f} +- {agg['test_accuracy_std']:.4f}, "
            f"macro-F1 {agg['test_macro_f1_mean']:.4f} +- {agg['test_macro_f1_std']:.4f} over {len(results)} folds"
        )


def cmd_cv(cfg: RunConfig, args, out: Path) -> int:
    ds = load_dataset(cfg)
    combo = tuple(cfg.kd.components)
    name = combo_name(combo)
    runs = _run_with_partial(cfg, ds, out, {name: combo})
    _finish_runs("cv", cfg, ds, out, runs, single=True)
    _print_runs(runs)
    return 0


def _run_with_partial(cfg: RunConfig, ds: Dataset, out: Path, combos: dict):
    """Run the folds, writing each fold file as soon as it finishes."""
    single = len(combos) == 1
    names = list(combos)

    def on_fold(k, results):
        _write_runs(out, {n: ([r], {}) for n, r in zip(names, results)}, single)

    return run_ablation(cfg, ds, combos, on_fold=on_fold)


def _parse_components(text: str) -> tuple[str, ...]:
    parts = [p.strip().lower() for p in text.split(",") if p.strip()]
    unknown = sorted(set(parts) - set(COMPONENTS))
    if unknown or not parts:
        raise ConfigError(f"--components takes a comma list from {list(COMPONENTS)}, got {text!r}")
    return tuple(c for c in COMPONENTS if c in parts)


def cmd_ablate(cfg: RunConfig, args, out: Path) -> int:
    ds = load_dataset(cfg)
    if args.components:
        combo = _parse_components(args.components)
        combos = {combo_name(combo): combo}
    else:
        combos = dict(ABLATIONS)
    runs = _run_with_partial(cfg, ds, out, combos)
    _finish_runs("ablate", cfg, ds, out, runs, single=False)
    _print_runs(runs)
    return 0


def _load_student(cfg: RunConfig, ds: Dataset, path: str) -> StudentModel:
    student = StudentModel(student_config(cfg, ds), ds.num_classes, seed=0)
    student.load_state_dict(load_checkpoint(path))
    return student.eval()


def cmd_eval(cfg: RunConfig, args, out: Path) -> int:
    ds = load_dataset(cfg)
    student = _load_student(cfg, ds, args.checkpoint)
    scores = evaluate(student, ds)
    dump_json(_manifest("eval", cfg, ds, checkpoint=str(args.checkpoint), metrics=scores), out / "manifest.json")
    print(f"accuracy {scores['accuracy']:.4f} macro-F1 {scores['macro_f1']:.4f}")
    return 0


def cmd_gradcam(cfg: RunConfig, args, out: Path) -> int:
    ds = load_dataset(cfg)
    student = _load_student(cfg, ds, args.checkpoint)
    indices = args.index if args.index else list(range(min(4, len(ds))))
    cam_dir = out / "gradcam"
    cam_dir.mkdir(exist_ok=True)
    entries = []
    for i in indices:
        if not 0 <= i < len(ds):
            raise ConfigError(f"sample index {i} outside [0, {len(ds)})")
        image = ds.images[i : i + 1]
        target = args.target if args.target is not None else int(student(image).logits.data.argmax())
        cam = grad_cam(student, image, target)
        write_pgm(cam, cam_dir / f"sample{i}_class{target}.pgm")
        write_heatmap_text(cam, cam_dir / f"sample{i}_class{target}.txt")
        entries.append({"index": i, "label": int(ds.labels[i]), "target": target, "map": cam.tolist()})
    dump_json(_manifest("gradcam", cfg, ds, checkpoint=str(args.checkpoint), maps=entries), out / "manifest.json")
    print(f"wrote {len(entries)} heat maps to {cam_dir}")
    return 0


def cmd_bench(cfg: RunConfig, args, out: Path) -> int:
    ds = load_dataset(cfg)
    eff = _efficiency(cfg, ds)
    write_report([ReportRow("bench", [], {})], out / "report.csv", eff)
    dump_json(_manifest("bench", cfg, ds, efficiency=eff.to_dict(timing=False)), out / "manifest.json")
    print(f"params  student {eff.student_params}  teacher {eff.teacher_params}  ratio {eff.params_ratio:.2f}")
    print(f"MACs    student {eff.student_macs}  teacher {eff.teacher_macs}  ratio {eff.macs_ratio:.2f}")
    if eff.latency_ratio is not None:
        print(
            f"latency student {eff.student_latency_ms:.3f} ms  teacher {eff.teacher_latency_ms:.3f} ms  "
            f"ratio {eff.latency_ratio:.2f}"
        )
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the configured synthetic dataset as CSV"),
    "train-teacher": (cmd_train_teacher, "train (and freeze) a teacher on a 90/10 split"),
    "heuristic": (cmd_heuristic, "print heuristic loss weights from measured or injected scores"),
    "distill": (cmd_distill, "distill one student on the first cross-validation fold"),
    "cv": (cmd_cv, "stratified k-fold distillation"),
    "ablate": (cmd_ablate, "loss-component ablation (all seven combinations by default)"),
    "eval": (cmd_eval, "evaluate a student checkpoint on the dataset"),
    "gradcam": (cmd_gradcam, "Grad-CAM heat maps of a student checkpoint"),
    "bench": (cmd_bench, "parameter, MAC and latency comparison"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crosskd", description="Transformer-to-CNN knowledge distillation at desk scale.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON file of dotted config keys")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (value parsed as JSON); repeatable")
        p.add_argument("--out", default=f"runs/{name}", help="output directory (default: %(default)s)")
        if name in ("cv", "ablate", "distill"):
            p.add_argument("--jobs", type=int, help="worker processes for folds (sets cv.jobs)")
        if name == "ablate":
            p.add_argument("--components", help="comma list, e.g. ce,logits; other lambdas are forced to 0")
        if name in ("eval", "gradcam"):
            p.add_argument("--checkpoint", required=True, help="student checkpoint file")
        if name == "gradcam":
            p.add_argument("--index", type=int, action="append", help="sample index; repeatable")
            p.add_argument("--target", type=int, help="class to explain (default: predicted class)")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = list(args.set)
        if getattr(args, "jobs", None) is not None:
            overrides.append(f"cv.jobs={args.jobs}")
        cfg = load_config(args.config, overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        handler = COMMANDS[args.command][0]
        return handler(cfg, args, out)
    except NumericalError as exc:
        print(f"error: numerical abort: {exc}", file=sys.stderr)
        return 2
    except (CrossKDError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
