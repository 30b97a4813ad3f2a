"""Command-line entry point: data synthesis, training, evaluation, analysis,
ablations, and latency benchmarking, each emitting a reproducibility manifest.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numerical
failure. Config precedence: built-in defaults < config file < command-line
flags; the resolved configuration lands in the manifest beside the outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .analysis import (
    AnalysisError,
    label_flip,
    pca_2d,
    snapshot_embeddings,
    striation_score,
    write_attention_json,
    write_pca_csv,
)
from .camphead import CampModel, ModelConfig, ModelError, build_model, predict
from .context import Layout, LayoutError
from .encoder import EncoderError
from .evalsuite import (
    MetricError,
    benchmark_latency,
    evaluate_sweep,
    write_latency_csv,
    write_sweep_csv,
)
from .moldata import (
    DataError,
    Episode,
    TaskSet,
    load_tasks,
    make_synthetic_tasks,
    sample_episode,
    save_tasks,
    split_tasks,
)
from .tensorcore import (
    CheckpointError,
    NonFiniteError,
    OptimizerError,
    TensorError,
    load_checkpoint,
    save_checkpoint,
)
from .trainer import (
    TrainConfig,
    TrainError,
    run_training,
    write_history_csv,
)
from .transformer import TransformerError

USAGE_EXIT = 1
DATA_EXIT = 2
NUMERIC_EXIT = 3

_DATA_ERRORS = (
    DataError,
    CheckpointError,
    LayoutError,
    MetricError,
    ModelError,
    EncoderError,
    TransformerError,
    AnalysisError,
    ValueError,
)
_NUMERIC_ERRORS = (NonFiniteError, OptimizerError)


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors, per the CLI contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


# ---------------------------------------------------------------------------
# config plumbing


def _parse_value(raw: str):
    raw = raw.strip()
    lowered = raw.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    if "," in raw:
        return tuple(_parse_value(part) for part in raw.split(",") if part.strip())
    return raw


def read_config_file(path) -> dict[str, object]:
    """Flat ``dotted.key = value`` lines; '#' starts a comment."""
    out: dict[str, object] = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise DataError(f"{path}:{line_no}: expected 'key = value'")
        key, raw = body.split("=", 1)
        out[key.strip()] = _parse_value(raw)
    return out


def _scoped_kwargs(config: dict[str, object], scope: str, target_cls) -> dict:
    valid = {f.name for f in dataclasses.fields(target_cls)}
    out: dict[str, object] = {}
    for key, value in config.items():
        if not key.startswith(scope + "."):
            continue
        name = key[len(scope) + 1 :]
        if name not in valid:
            raise DataError(f"unknown config key {key!r}")
        if name == "layout" and isinstance(value, str):
            value = Layout(value.replace("-", "_"))
        if name == "support_sizes" and isinstance(value, (int, float)):
            value = (int(value),)
        out[name] = value
    return out


def _sha256(path) -> str:
    digest = hashlib.sha256()
    digest.update(Path(path).read_bytes())
    return digest.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _config_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, Layout):
            value = value.value
        if isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


def write_manifest(
    out_dir: Path,
    command: str,
    args: argparse.Namespace,
    config: dict,
    inputs: Sequence[Path],
    outputs: Sequence[Path],
    started: str,
    extra: Optional[dict] = None,
) -> Path:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "tool_version": __version__,
        "seed": getattr(args, "seed", None),
        "threads": getattr(args, "threads", 1),
        "config": config,
        "input_digests": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "started_at": started,
        "finished_at": _now(),
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def _limit_threads(n: int) -> None:
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=max(1, n))
    except Exception:  # pragma: no cover - advisory only
        print("warning: could not limit BLAS threads", file=sys.stderr)


# ---------------------------------------------------------------------------
# model/config resolution shared by subcommands


def _resolve_configs(
    args: argparse.Namespace, tasks: TaskSet
) -> tuple[ModelConfig, TrainConfig]:
    """Precedence: built-in defaults < profile < config file < flags."""
    file_config = read_config_file(args.config) if args.config else {}
    for key in file_config:
        scope = key.split(".", 1)[0]
        if scope not in ("model", "train") and key != "data.split_fractions":
            raise DataError(f"unknown config key {key!r}")
    model_kwargs = _scoped_kwargs(file_config, "model", ModelConfig)
    train_kwargs = _scoped_kwargs(file_config, "train", TrainConfig)
    train_kwargs["seed"] = args.seed
    if getattr(args, "support_sizes", None):
        train_kwargs["support_sizes"] = tuple(
            int(s) for s in args.support_sizes.split(",") if s
        )
    variant = getattr(args, "variant", None)
    if variant is not None:
        if variant not in ("camp", "naive-icl", "positional"):
            raise DataError(f"unknown variant {variant!r}")
        model_kwargs["layout"] = (
            Layout.NAIVE_ICL if variant == "naive-icl" else Layout.CAMP
        )
        model_kwargs["use_positional"] = variant == "positional"
    if args.profile == "paper":
        model_cfg = ModelConfig.full_scale(
            tasks.atom_feature_dim, tasks.n_bond_types, **model_kwargs
        )
        train_cfg = TrainConfig.full_scale(**train_kwargs)
    else:
        model_cfg = ModelConfig(
            tasks.atom_feature_dim, tasks.n_bond_types, **model_kwargs
        )
        train_cfg = TrainConfig(**train_kwargs)
    return model_cfg, train_cfg


def _split_fractions(args) -> tuple[float, float, float]:
    if args.config:
        cfg = read_config_file(args.config)
        if "data.split_fractions" in cfg:
            fracs = cfg["data.split_fractions"]
            return tuple(float(f) for f in fracs)  # type: ignore[return-value]
    return (0.8, 0.1, 0.1)


def _model_from_checkpoint(ckpt_path: Path) -> CampModel:
    values = load_checkpoint(ckpt_path)
    meta_path = ckpt_path.with_suffix(ckpt_path.suffix + ".meta.json")
    if not meta_path.exists():
        raise CheckpointError(f"missing model metadata file {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    meta["layout"] = Layout(meta["layout"])
    config = ModelConfig(**meta)
    model = build_model(config, seed=0)
    model.load_values(values)
    return model


def _save_model(model: CampModel, path: Path) -> list[Path]:
    save_checkpoint(model.params, path)
    meta = _config_dict(model.config)
    meta_path = path.with_suffix(path.suffix + ".meta.json")
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return [path, meta_path]


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args) -> int:
    started = _now()
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    tasks = make_synthetic_tasks(
        n_tasks=args.tasks,
        molecules_per_task=args.molecules,
        atom_feature_dim=args.feature_dim,
        rng=rng,
        n_bond_types=args.bond_types,
        noise_std=args.noise,
        motif_separation=args.separation,
    )
    save_tasks(tasks, out_path)
    write_manifest(
        out_path.parent, "synth-data", args,
        config=dict(
            tasks=args.tasks, molecules=args.molecules, feature_dim=args.feature_dim,
            bond_types=args.bond_types, noise=args.noise, separation=args.separation,
        ),
        inputs=[], outputs=[out_path], started=started,
    )
    print(f"wrote {len(tasks)} tasks to {out_path}")
    return 0


def cmd_train(args) -> int:
    started = _now()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    data_path = Path(args.data)
    tasks = load_tasks(data_path)
    model_cfg, train_cfg = _resolve_configs(args, tasks)
    train, valid, test = split_tasks(
        tasks.tasks, _split_fractions(args), np.random.default_rng(args.seed)
    )
    model = build_model(model_cfg, seed=args.seed)
    best_values, history = run_training(train, valid, model, train_cfg)
    model.load_values(best_values)

    history_path = out_dir / "history.csv"
    write_history_csv(history, history_path)
    outputs = [history_path]
    outputs += _save_model(model, out_dir / "model.ckpt")
    for split_set, name in ((valid, "valid"), (test, "test")):
        path = out_dir / f"{name}_tasks.jsonl"
        split_set.atom_feature_dim = tasks.atom_feature_dim
        split_set.n_bond_types = tasks.n_bond_types
        save_tasks(split_set, path)
        outputs.append(path)
    write_manifest(
        out_dir, "train", args,
        config={"model": _config_dict(model_cfg), "train": _config_dict(train_cfg)},
        inputs=[data_path], outputs=outputs, started=started,
        extra={
            "best_epoch": history.best_epoch,
            "best_val_loss": history.best_val_loss(),
            "stopped_early": history.stopped_early,
            "epoch_seconds": [r.seconds for r in history.records],
        },
    )
    print(f"best validation loss {history.best_val_loss():.4f} at epoch {history.best_epoch}")
    return 0


def cmd_evaluate(args) -> int:
    started = _now()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    data_path = Path(args.data)
    tasks = load_tasks(data_path, split="test")
    model = _model_from_checkpoint(Path(args.model))
    sizes = [int(s) for s in args.support_sizes.split(",") if s]
    report = evaluate_sweep(model, tasks, sizes, n_seeds=args.seeds, base_seed=args.seed)
    sweep_path = out_dir / "sweep.csv"
    write_sweep_csv(report, sweep_path)
    outputs = [sweep_path]
    if args.plots:
        from .evalsuite import plot_sweep_svg

        plot_sweep_svg(report, out_dir / "sweep.svg")
        outputs.append(out_dir / "sweep.svg")
    write_manifest(
        out_dir, "evaluate", args,
        config={"support_sizes": sizes, "n_seeds": args.seeds},
        inputs=[data_path, Path(args.model)], outputs=outputs, started=started,
    )
    for agg in report.aggregates:
        print(
            f"support {agg.support_size:3d}: dAUPRC "
            f"{agg.mean_delta_auprc:.4f} +/- {agg.stderr_delta_auprc:.4f} "
            f"({agg.n_seeds} seeds)"
        )
    return 0


def cmd_analyze(args) -> int:
    started = _now()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    data_path = Path(args.data)
    tasks = load_tasks(data_path)
    model = _model_from_checkpoint(Path(args.model))
    rng = np.random.default_rng(args.seed)
    task = tasks.tasks[args.task_index % len(tasks.tasks)]
    episode = sample_episode(task, args.support_size, rng)

    snap = snapshot_embeddings(model, episode)
    pca_dir = out_dir / "pca"
    pca_dir.mkdir(exist_ok=True)
    write_pca_csv(pca_2d(snap.pre_rows), snap.roles, pca_dir / "pre_encoder.csv")
    write_pca_csv(pca_2d(snap.post_rows), snap.roles, pca_dir / "post_encoder.csv")
    attention_paths = write_attention_json(snap.attention, out_dir / "attention")

    class_ids = [
        2 if role == "query" else (1 if role == "positive" else 0)
        for role in snap.roles
    ]
    striation_lines = ["layer,head,striation_score"]
    for rec in snap.attention:
        striation_lines.append(
            f"{rec.layer},{rec.head},{striation_score(rec, class_ids):.6f}"
        )
    striation_path = out_dir / "striation.csv"
    striation_path.write_text("\n".join(striation_lines) + "\n", encoding="utf-8")

    flip_index = args.flip_index if args.flip_index is not None else 1
    report = label_flip(model, episode, flip_index)
    axes = pca_2d(report.before.post_rows)
    before_coords = axes.coordinates
    after_coords = axes.project(report.after.post_rows)
    flip_doc = {
        "flip_index": report.flip_index,
        "prediction_before": report.before.prediction.probability_positive,
        "prediction_after": report.after.prediction.probability_positive,
        "pre_rows_changed": report.pre_rows_changed().tolist(),
        "post_row_displacements": report.post_row_displacements().tolist(),
        "pca_before": before_coords.tolist(),
        "pca_after": after_coords.tolist(),
    }
    flip_path = out_dir / "label_flip.json"
    flip_path.write_text(json.dumps(flip_doc, indent=2), encoding="utf-8")

    outputs = [striation_path, flip_path, pca_dir / "pre_encoder.csv",
               pca_dir / "post_encoder.csv"] + attention_paths
    if args.plots:
        from .analysis import plot_label_flip_svg, plot_snapshot_svg

        plot_snapshot_svg(snap, out_dir / "snapshot.svg")
        plot_label_flip_svg(report, out_dir / "label_flip.svg")
        outputs += [out_dir / "snapshot.svg", out_dir / "label_flip.svg"]
    write_manifest(
        out_dir, "analyze", args,
        config={"support_size": args.support_size, "task_index": args.task_index,
                "flip_index": flip_index},
        inputs=[data_path, Path(args.model)], outputs=outputs, started=started,
    )
    print(f"analysis artifacts under {out_dir}")
    return 0


def cmd_ablate(args) -> int:
    started = _now()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    data_path = Path(args.data)
    tasks = load_tasks(data_path)
    variants = ["camp", args.variant] if args.variant != "camp" else ["camp"]
    outputs: list[Path] = []
    histories = {}
    models = {}
    for variant in variants:
        args.variant = variant
        model_cfg, train_cfg = _resolve_configs(args, tasks)
        train, valid, _ = split_tasks(
            tasks.tasks, _split_fractions(args), np.random.default_rng(args.seed)
        )
        model = build_model(model_cfg, seed=args.seed)
        best_values, history = run_training(train, valid, model, train_cfg)
        model.load_values(best_values)
        histories[variant] = history
        models[variant] = model
        path = out_dir / f"history_{variant.replace('-', '_')}.csv"
        write_history_csv(history, path)
        outputs.append(path)

    report_lines = [f"ablation report: {' vs '.join(variants)}"]
    for variant, history in histories.items():
        report_lines.append(
            f"  {variant}: best val loss {history.best_val_loss():.4f} "
            f"at epoch {history.best_epoch} "
            f"({'early stop' if history.stopped_early else 'ran to max'})"
        )
    if "positional" in models:
        check = _invariance_check(models["camp"], models["positional"], tasks, args.seed)
        report_lines += check
    report_path = out_dir / "ablation_report.txt"
    report_path.write_text("\n".join(report_lines) + "\n", encoding="utf-8")
    outputs.append(report_path)
    write_manifest(
        out_dir, "ablate", args,
        config={"variants": variants},
        inputs=[data_path], outputs=outputs, started=started,
    )
    print("\n".join(report_lines))
    return 0


def _invariance_check(
    camp_model: CampModel, positional_model: CampModel, tasks: TaskSet, seed: int,
    cases: int = 50,
) -> list[str]:
    """Criterion check: the plain model is permutation-invariant (< 1e-6),
    the positional variant measurably is not (> 1e-6 in >= 45 of 50 cases)."""
    rng = np.random.default_rng(seed)
    eligible = [t for t in tasks.tasks if len(t.molecules) >= 7]
    camp_max = 0.0
    violations = 0
    for case in range(cases):
        task = eligible[case % len(eligible)]
        episode = sample_episode(task, 6, rng)
        order = rng.permutation(6)
        while (order == np.arange(6)).all():
            order = rng.permutation(6)
        shuffled = Episode(
            support=[episode.support[i] for i in order], query=episode.query
        )
        camp_dev = float(
            np.abs(
                predict(shuffled, camp_model).logits - predict(episode, camp_model).logits
            ).max()
        )
        camp_max = max(camp_max, camp_dev)
        pos_dev = float(
            np.abs(
                predict(shuffled, positional_model).logits
                - predict(episode, positional_model).logits
            ).max()
        )
        violations += pos_dev > 1e-6
    ok = camp_max < 1e-6 and violations >= int(0.9 * cases)
    return [
        f"  invariance check over {cases} permutation cases:",
        f"    plain layout max |delta logit| = {camp_max:.3e} (must be < 1e-6)",
        f"    positional variant cases > 1e-6: {violations}/{cases} (must be >= {int(0.9 * cases)})",
        f"    verdict: {'PASS' if ok else 'FAIL'}",
    ]


def cmd_bench_latency(args) -> int:
    started = _now()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    data_path = Path(args.data)
    tasks = load_tasks(data_path, split="test")
    model = _model_from_checkpoint(Path(args.model))
    sizes = [int(s) for s in args.support_sizes.split(",") if s]
    report = benchmark_latency(
        model, tasks, sizes, repeats=args.repeats, base_seed=args.seed
    )
    latency_path = out_dir / "latency.csv"
    write_latency_csv(report, latency_path)
    write_manifest(
        out_dir, "bench-latency", args,
        config={"support_sizes": sizes, "repeats": args.repeats},
        inputs=[data_path, Path(args.model)], outputs=[latency_path], started=started,
    )
    for size in sizes:
        print(
            f"support {size:3d}: median {report.median_us_per_episode(size):.0f} "
            "us/episode"
        )
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="camp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=False, data=True):
        if data:
            p.add_argument("--data", required=True, help="task dataset (jsonl)")
        if model:
            p.add_argument("--model", required=True, help="model checkpoint path")
        p.add_argument("--out", required=True, help="output directory or file")
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--profile", choices=("desk", "paper"), default="desk")

    p = sub.add_parser("synth-data", help="generate synthetic motif tasks")
    p.add_argument("--tasks", type=int, required=True)
    p.add_argument("--molecules", type=int, default=64)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--bond-types", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--separation", type=float, default=2.0)
    common(p, data=False)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train on a dataset with early stopping")
    common(p)
    p.add_argument("--support-sizes", default=None, help="comma list, e.g. 4,8,16")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="support-size sweep on a task set")
    common(p, model=True)
    p.add_argument("--support-sizes", default="4,8,16")
    p.add_argument("--seeds", type=int, default=5, help="evaluation seeds per size")
    p.add_argument("--plots", action="store_true", help="also emit SVG figures")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="PCA, attention, striation, label flip")
    common(p, model=True)
    p.add_argument("--support-size", type=int, default=8)
    p.add_argument("--task-index", type=int, default=0)
    p.add_argument("--flip-index", type=int, default=None)
    p.add_argument("--plots", action="store_true", help="also emit SVG figures")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("ablate", help="train a variant and compare to the control")
    common(p)
    p.add_argument(
        "--variant", choices=("camp", "naive-icl", "positional"), required=True
    )
    p.add_argument("--support-sizes", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench-latency", help="wall-clock per-episode timings")
    common(p, model=True)
    p.add_argument("--support-sizes", default="4,8,16,32")
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_bench_latency)

    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _limit_threads(getattr(args, "threads", 1))
    try:
        return args.func(args)
    except TrainError as exc:
        code = NUMERIC_EXIT if isinstance(exc.__cause__, NonFiniteError) else DATA_EXIT
        print(f"error: {exc}", file=sys.stderr)
        return code
    except _NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERIC_EXIT
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT
    except TensorError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERIC_EXIT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT


def main() -> None:
    raise SystemExit(run())


if __name__ == "__main__":
    main()
