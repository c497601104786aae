"""``idtrack`` command line: synth, train, track, eval and ablate.

Every subcommand reads an optional flat ``key = value`` config, resolves
paths against ``--workdir`` and writes ``manifest.json`` into its output
directory before starting and again when finished. ``IDTRACK_SEED``
overrides the config seed.

Exit codes: 0 success, 1 other failure, 2 config error, 3 data error,
4 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from . import __version__
from .baselines import BaselineConfig, reid_baseline_tracker
from .config import build_dataclass, read_flat_config
from .dataset import read_dataset, read_mot_file, write_dataset
from .decoder import DecoderConfig
from .errors import (
    CapacityError,
    CheckpointError,
    ConfigError,
    FormatError,
    IDTrackError,
    NumericError,
    UndefinedMetricError,
)
from .inference import InferenceConfig, TrackingResult, run_sequence
from .metrics import EvalReport, evaluate, rows_to_frames
from .scene import LabeledSequence, SceneConfig, generate_corpus
from .training import EmbeddingEncoder, TrainConfig, load_model, train

log = logging.getLogger("idtrack")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

SECTIONS = (SceneConfig, DecoderConfig, TrainConfig, InferenceConfig)


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Keys that belong to the command line driver rather than a module."""

    num_sequences: int = 200
    base_seed: int = -1  # -1 means use seed
    deterministic: bool = False
    test_sequences: int = 20
    test_base_seed: int = -1  # -1 means base_seed + 100000
    grid_self_attention: tuple[bool, ...] = ()
    grid_hungarian: tuple[bool, ...] = ()
    grid_augmentation: tuple[bool, ...] = ()
    grid_lambda_occ: tuple[float, ...] = ()
    grid_lambda_sw: tuple[float, ...] = ()


class DataError(IDTrackError):
    """Missing or inconsistent input data."""


# --------------------------------------------------------------------------- config


@dataclasses.dataclass
class Resolved:
    values: dict[str, str]
    scene: SceneConfig
    decoder: DecoderConfig
    train: TrainConfig
    inference: InferenceConfig
    run: RunConfig
    test_scene: SceneConfig

    @property
    def seed(self) -> int:
        return self.train.seed

    @property
    def base_seed(self) -> int:
        return self.run.base_seed if self.run.base_seed >= 0 else self.seed

    @property
    def test_base_seed(self) -> int:
        return self.run.test_base_seed if self.run.test_base_seed >= 0 else self.base_seed + 100000


def resolve_config(values: dict[str, str], overrides: dict[str, str] | None = None) -> Resolved:
    """Split flat values among the module configs; unknown keys raise :class:`ConfigError`.

    Keys shared by several configs (``seed``, ``feature_dim``) apply to all
    of them. ``test_<key>`` overrides a scene key for held-out data only.
    """
    values = dict(values)
    values.update(overrides or {})
    env_seed = os.environ.get("IDTRACK_SEED")
    if env_seed is not None:
        values["seed"] = env_seed
    known = {f.name for cls in (*SECTIONS, RunConfig) for f in dataclasses.fields(cls)}
    scene_fields = {f.name for f in dataclasses.fields(SceneConfig)}
    test_overrides = {}
    for key in values:
        if key in known:
            continue
        if key.startswith("test_") and key[5:] in scene_fields:
            test_overrides[key[5:]] = values[key]
            continue
        raise ConfigError(key, "unknown config key")

    def pick(cls):
        names = {f.name for f in dataclasses.fields(cls)}
        return {k: v for k, v in values.items() if k in names}

    run = build_dataclass(RunConfig, pick(RunConfig))
    dec_values = pick(DecoderConfig)
    if run.deterministic:
        dec_values["dtype"] = "float64"
    scene = build_dataclass(SceneConfig, pick(SceneConfig)).validate()
    decoder = build_dataclass(DecoderConfig, dec_values).validate()
    train_cfg = build_dataclass(TrainConfig, pick(TrainConfig)).validate()
    inference = build_dataclass(InferenceConfig, pick(InferenceConfig)).validate()
    test_scene = build_dataclass(SceneConfig, {**pick(SceneConfig), **test_overrides}).validate()
    resolved = {k: values[k] for k in sorted(values)}
    return Resolved(resolved, scene, decoder, train_cfg, inference, run, test_scene)


def load_config(path: Path | None, overrides: dict[str, str] | None = None) -> Resolved:
    values = read_flat_config(path) if path is not None else {}
    return resolve_config(values, overrides)


def set_deterministic(enabled: bool) -> None:
    torch.set_num_threads(1)
    if enabled:
        torch.use_deterministic_algorithms(True)


# --------------------------------------------------------------------------- manifest


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


MANIFEST_NAME = "manifest.json"


class RunManifest:
    """Provenance record written into the output directory of every run."""

    def __init__(self, subcommand: str, out_dir: Path, config: dict[str, str], seed: int | None, inputs: dict[str, str]):
        self.path = out_dir / MANIFEST_NAME
        self.data: dict[str, Any] = {
            "subcommand": subcommand,
            "version": __version__,
            "config": config,
            "seed": seed,
            "inputs": inputs,
            "output_dir": str(out_dir),
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "finished": None,
            "status": "running",
            "exit_code": None,
            "checksums": {},
        }

    def _write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        tmp.replace(self.path)

    def start(self) -> None:
        self._write()

    def finish(self, exit_code: int, error: str | None = None) -> None:
        out = self.path.parent
        checksums = {}
        for p in sorted(out.rglob("*")):
            if p.is_file() and p.name != MANIFEST_NAME and p.suffix != ".tmp":
                checksums[str(p.relative_to(out))] = sha256_file(p)
        self.data.update(
            finished=time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            status="ok" if exit_code == 0 else "failed",
            exit_code=exit_code,
            checksums=checksums,
        )
        if error:
            self.data["error"] = error
        self._write()


def verify_manifest(out_dir: str | Path) -> list[str]:
    """Paths whose checksum no longer matches the manifest (empty when consistent)."""
    out = Path(out_dir)
    data = json.loads((out / MANIFEST_NAME).read_text())
    bad = []
    for rel, digest in data["checksums"].items():
        p = out / rel
        if not p.is_file() or sha256_file(p) != digest:
            bad.append(rel)
    return bad


# --------------------------------------------------------------------------- plots


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path: Path) -> None:
    # no software/date metadata, so reruns give identical bytes
    fig.savefig(path, dpi=100, metadata={"Software": None})


def plot_loss_curve(metrics_log: Path, out_path: Path) -> None:
    steps, losses = [], []
    for line in metrics_log.read_text().splitlines():
        parts = line.split()
        if len(parts) >= 2:
            steps.append(int(parts[0]))
            losses.append(float(parts[1]))
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, losses, lw=0.8)
    if len(losses) >= 20:
        k = max(len(losses) // 50, 5)
        smooth = np.convolve(losses, np.ones(k) / k, mode="valid")
        ax.plot(steps[k - 1 :], smooth, lw=1.5)
    ax.set_xlabel("step")
    ax.set_ylabel("ID loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, out_path)
    plt.close(fig)


def plot_eval(report: EvalReport, out_path: Path) -> None:
    plt = _pyplot()
    names = [s.name for s in report.per_sequence]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(6, 0.4 * len(names)), 4))
    ax.bar(x - 0.2, [s.idf1 for s in report.per_sequence], 0.4, label="IDF1")
    ax.bar(x + 0.2, [s.association_accuracy for s in report.per_sequence], 0.4, label="assoc. acc.")
    ax.set_xticks(x, names, rotation=90, fontsize=7)
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    _save(fig, out_path)
    plt.close(fig)


def plot_ablation(rows: list[dict], out_dir: Path, grids: dict[str, list]) -> list[Path]:
    """One metric-vs-value line plot per swept hyperparameter."""
    plt = _pyplot()
    written = []
    for key, values in grids.items():
        if len(values) < 2:
            continue
        others = [k for k in grids if k != key]
        fig, ax = plt.subplots(figsize=(6, 4))
        series: dict[tuple, list] = {}
        for row in rows:
            series.setdefault(tuple(row[k] for k in others), []).append(row)
        for fixed, members in sorted(series.items(), key=lambda kv: str(kv[0])):
            members = sorted(members, key=lambda r: float(r[key]))
            xs = [float(r[key]) for r in members]
            label = ", ".join(f"{k}={v}" for k, v in zip(others, fixed)) or "IDF1"
            ax.plot(xs, [r["idf1"] for r in members], marker="o", label=label)
        ax.set_xlabel(key)
        ax.set_ylabel("IDF1")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"ablation_{key}.png"
        _save(fig, path)
        plt.close(fig)
        written.append(path)
    return written


# --------------------------------------------------------------------------- commands


def _gt_rows(seq: LabeledSequence):
    from .dataset import MOTRow

    rows = []
    for f, frame in enumerate(seq.frames, 1):
        for i in range(len(frame)):
            rows.append(MOTRow(f, int(frame.gt_ids[i]), tuple(float(v) for v in frame.boxes[i]), float(frame.scores[i])))
    return rows


def _result_rows(result: TrackingResult):
    from .dataset import MOTRow

    return [MOTRow(f, tid, box, conf) for f, tid, box, conf in result.rows]


def evaluate_results(sequences: Sequence[LabeledSequence], results: dict[str, TrackingResult]) -> EvalReport:
    pairs = {s.name: rows_to_frames(_gt_rows(s), _result_rows(results[s.name]), len(s)) for s in sequences}
    return evaluate(pairs)


def cmd_synth(cfg: Resolved, out_dir: Path) -> None:
    corpus = generate_corpus(cfg.scene, cfg.run.num_sequences, cfg.base_seed)
    write_dataset(corpus, out_dir)
    log.info("wrote %d sequences to %s", len(corpus), out_dir)


def _read_data(path: Path) -> list[LabeledSequence]:
    if not path.is_dir():
        raise DataError(f"{path}: dataset directory not found")
    return read_dataset(path)


def cmd_train(cfg: Resolved, data_dir: Path, out_dir: Path, resume: Path | None = None) -> Path:
    corpus = _read_data(data_dir)
    if corpus and corpus[0].feature_dim != cfg.decoder.feature_dim:
        raise ConfigError("feature_dim", f"data has {corpus[0].feature_dim}-dim features, config says {cfg.decoder.feature_dim}")
    result = train(corpus, cfg.train, cfg.decoder, out_dir=out_dir, resume=resume)
    plot_loss_curve(out_dir / "metrics.log", out_dir / "loss.png")
    log.info("trained %d steps; checkpoint %s", result.steps, result.checkpoint)
    return result.checkpoint


def track_sequences(model, meta: dict, sequences: Sequence[LabeledSequence], inference: InferenceConfig) -> dict[str, TrackingResult]:
    results = {}
    for seq in sequences:
        if isinstance(model, EmbeddingEncoder):
            base = BaselineConfig(
                window=int(meta["train"]["T"]),
                use_hungarian=inference.use_hungarian,
                lambda_det=inference.lambda_det,
                lambda_new=inference.lambda_new,
                miss_tolerance=inference.miss_tolerance,
            )
            results[seq.name] = reid_baseline_tracker(seq, model.embed, base)
        else:
            results[seq.name] = run_sequence(seq, model, inference)
    return results


def cmd_track(cfg: Resolved, checkpoint: Path, data_dir: Path, out_dir: Path) -> None:
    if not checkpoint.is_file():
        raise DataError(f"{checkpoint}: checkpoint not found")
    model, meta, _ = load_model(checkpoint)
    model.eval()
    sequences = _read_data(data_dir)
    results = track_sequences(model, meta, sequences, cfg.inference)
    for name, result in results.items():
        result.write(out_dir / f"{name}.txt")
    log.info("tracked %d sequences into %s", len(results), out_dir)


def cmd_eval(results_dir: Path, gt_dir: Path, out_dir: Path) -> EvalReport:
    sequences = _read_data(gt_dir)
    if not results_dir.is_dir():
        raise DataError(f"{results_dir}: results directory not found")
    gt_names = {s.name for s in sequences}
    res_names = {p.stem for p in results_dir.glob("*.txt")}
    orphans = sorted(gt_names ^ res_names)
    if orphans:
        detail = ", ".join(f"{n} ({'no result' if n in gt_names else 'no ground truth'})" for n in orphans)
        raise DataError(f"unmatched sequences: {detail}")
    pairs = {}
    for seq in sequences:
        pred = read_mot_file(results_dir / f"{seq.name}.txt")
        pairs[seq.name] = rows_to_frames(_gt_rows(seq), pred, len(seq))
    report = evaluate(pairs)
    (out_dir / "report.txt").write_text(report.text())
    report.write_csv(out_dir / "report.csv")
    plot_eval(report, out_dir / "report.png")
    sys.stdout.write(report.text())
    return report


ABLATION_COLUMNS = ["self_attention", "hungarian", "augmentation", "lambda_occ", "lambda_sw", "idf1", "mota", "id_switches", "association_accuracy"]


def ablation_grid(cfg: Resolved) -> dict[str, list]:
    r = cfg.run
    return {
        "self_attention": list(r.grid_self_attention) or [cfg.decoder.self_attention_enabled],
        "hungarian": list(r.grid_hungarian) or [cfg.inference.use_hungarian],
        "augmentation": list(r.grid_augmentation) or [True],
        "lambda_occ": list(r.grid_lambda_occ) or [cfg.train.lambda_occ],
        "lambda_sw": list(r.grid_lambda_sw) or [cfg.train.lambda_sw],
    }


def cmd_ablate(cfg: Resolved, out_dir: Path) -> list[dict]:
    """Train one model per training setting, track the held-out split with each inference setting."""
    grids = ablation_grid(cfg)
    train_corpus = generate_corpus(cfg.scene, cfg.run.num_sequences, cfg.base_seed)
    test_corpus = generate_corpus(cfg.test_scene, cfg.run.test_sequences, cfg.test_base_seed)
    models: dict[tuple, Any] = {}
    rows = []
    for sa, hung, aug, occ, sw in itertools.product(*grids.values()):
        occ_eff, sw_eff = (occ, sw) if aug else (0.0, 0.0)
        key = (sa, occ_eff, sw_eff)
        if key not in models:
            dec = dataclasses.replace(cfg.decoder, self_attention_enabled=sa)
            tc = dataclasses.replace(cfg.train, lambda_occ=occ_eff, lambda_sw=sw_eff)
            log.info("training self_attention=%s lambda_occ=%s lambda_sw=%s", sa, occ_eff, sw_eff)
            models[key] = train(train_corpus, tc, dec).model
        inference = dataclasses.replace(cfg.inference, use_hungarian=hung)
        results = {s.name: run_sequence(s, models[key], inference) for s in test_corpus}
        report = evaluate_results(test_corpus, results)
        rows.append(
            {
                "self_attention": sa,
                "hungarian": hung,
                "augmentation": aug,
                "lambda_occ": occ,
                "lambda_sw": sw,
                "idf1": report.idf1,
                "mota": report.mota,
                "id_switches": report.id_switches,
                "association_accuracy": report.association_accuracy,
            }
        )
    write_ablation_csv(rows, out_dir / "ablation.csv")
    plot_ablation(rows, out_dir, grids)
    return rows


def write_ablation_csv(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_ablation_csv(path: Path) -> list[dict]:
    conv = {"self_attention": _bool, "hungarian": _bool, "augmentation": _bool, "id_switches": int}
    with open(path, newline="") as fh:
        return [{k: conv.get(k, float)(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _bool(s: str) -> bool:
    return s == "True"


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="idtrack", description="Multi-object tracking by in-context ID prediction.")
    p.add_argument("--workdir", type=Path, default=Path("."), help="base for all relative paths")
    p.add_argument("--verbose", "-v", action="store_true")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config", type=Path)
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("train", help="train an ID predictor")
    s.add_argument("--config", type=Path)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--resume", type=Path)

    s = sub.add_parser("track", help="track sequences with a checkpoint")
    s.add_argument("--config", type=Path)
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--lambda-det", type=float)
    s.add_argument("--lambda-new", type=float)
    s.add_argument("--lambda-id", type=float)
    s.add_argument("--hungarian", action=argparse.BooleanOptionalAction, default=None)
    s.add_argument("--miss-tolerance", type=int)

    s = sub.add_parser("eval", help="score MOT result files against ground truth")
    s.add_argument("--results", type=Path, required=True)
    s.add_argument("--gt", type=Path, required=True)
    s.add_argument("--out", type=Path, help="report directory (default: <results>/eval)")

    s = sub.add_parser("ablate", help="train and evaluate a grid of settings")
    s.add_argument("--config", type=Path)
    s.add_argument("--out", type=Path, required=True)
    return p


def _flag_overrides(args: argparse.Namespace) -> dict[str, str]:
    out = {}
    for attr, key in (
        ("lambda_det", "lambda_det"),
        ("lambda_new", "lambda_new"),
        ("lambda_id", "lambda_id"),
        ("hungarian", "use_hungarian"),
        ("miss_tolerance", "miss_tolerance"),
    ):
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = str(value)
    return out


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    wd = args.workdir

    def at(path: Path | None) -> Path | None:
        return None if path is None else (path if path.is_absolute() else wd / path)

    out_dir = at(args.out) if args.out is not None else at(args.results) / "eval"
    manifest = None
    code = EXIT_OK
    error = None
    try:
        inputs = {k: str(at(v)) for k, v in vars(args).items() if isinstance(v, Path) and k not in ("workdir", "out")}
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(args.command, out_dir, {}, None, inputs)
        manifest.start()
        cfg = load_config(at(getattr(args, "config", None)), _flag_overrides(args)) if args.command != "eval" else None
        if cfg is not None:
            manifest.data.update(config=cfg.values, seed=cfg.seed)
            manifest.start()
            set_deterministic(cfg.run.deterministic)
        if args.command == "synth":
            cmd_synth(cfg, out_dir)
        elif args.command == "train":
            cmd_train(cfg, at(args.data), out_dir, at(args.resume))
        elif args.command == "track":
            cmd_track(cfg, at(args.checkpoint), at(args.data), out_dir)
        elif args.command == "eval":
            cmd_eval(at(args.results), at(args.gt), out_dir)
        elif args.command == "ablate":
            cmd_ablate(cfg, out_dir)
    except ConfigError as err:
        code, error = EXIT_CONFIG, f"config error: {err}"
    except (DataError, FormatError, CheckpointError, UndefinedMetricError, CapacityError, FileNotFoundError) as err:
        code, error = EXIT_DATA, f"data error: {err}"
    except NumericError as err:
        code, error = EXIT_NUMERIC, f"numeric divergence: {err}"
    except IDTrackError as err:
        code, error = EXIT_FAIL, f"error: {err}"
    if error:
        print(f"idtrack {args.command}: {error}", file=sys.stderr)
    if manifest is not None:
        manifest.finish(code, error)
    return code


if __name__ == "__main__":
    sys.exit(main())
