"""Experiment orchestration: config loading, pretraining, task loop, result files."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .benchmark import StreamConfig, TaskStream, build_pretext, build_stream
from .estimator import ContinualLearner
from .methods import MethodSpec
from .metrics import ResultMatrix, adjusted_forgetting, final_average_pwjs, predict_labels, pwjs
from .vit import ViTConfig, parameter_checksum, save_checkpoint

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid config:\n  " + "\n  ".join(problems))
        self.problems = problems


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    cache_dir: str = ".scadcl_cache"

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.epochs < 1 or self.lr <= 0 or self.batch_size < 1:
            raise ValueError("epochs, lr and batch_size must be positive")


@dataclass(frozen=True)
class OptimizerConfig:
    """Stream-training SGD settings for backbone and adapters."""
    lr: float = 0.03
    clip_norm: float | None = 1.0
    adapter_lr: float | None = None  # null: adapters share lr

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive or null")
        if self.adapter_lr is not None and self.adapter_lr <= 0:
            raise ValueError("adapter_lr must be positive or null")


_OPTIMIZER_KEYS = {f.name for f in fields(OptimizerConfig)}


@dataclass(frozen=True)
class ExperimentConfig:
    stream: StreamConfig = field(default_factory=StreamConfig)
    backbone: ViTConfig = field(default_factory=ViTConfig)
    method: MethodSpec = field(default_factory=MethodSpec)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    def to_dict(self) -> dict:
        backbone = asdict(self.backbone)
        backbone.pop("total_classes")
        method = asdict(self.method)
        if method["layers"] is not None:
            method["layers"] = list(method["layers"])
        optimizer = {k: method.pop(k) for k in sorted(_OPTIMIZER_KEYS)}
        return {"stream": asdict(self.stream), "backbone": backbone, "method": method,
                "optimizer": optimizer, "pretrain": asdict(self.pretrain)}


# optimizer precedes method: its validated values are folded into MethodSpec
_SECTIONS = {"stream": StreamConfig, "backbone": ViTConfig, "optimizer": OptimizerConfig, "method": MethodSpec,
             "pretrain": PretrainConfig}


def config_from_dict(raw: dict | None) -> ExperimentConfig:
    """Validate every field first, then build; all problems are reported together."""
    raw = raw or {}
    problems = []
    if not isinstance(raw, dict):
        raise ConfigError(["top level must be a mapping of sections"])
    for key in raw:
        if key not in _SECTIONS:
            problems.append(f"unknown section {key!r} (expected one of {sorted(_SECTIONS)})")
    built = {}
    for name, cls in _SECTIONS.items():
        section = raw.get(name) or {}
        if not isinstance(section, dict):
            problems.append(f"{name}: must be a mapping")
            continue
        allowed = {f.name: f for f in fields(cls)}
        if cls is ViTConfig:
            allowed.pop("total_classes")
        if cls is MethodSpec:
            for key in _OPTIMIZER_KEYS:
                allowed.pop(key)
        kwargs = {}
        for key, value in section.items():
            if key not in allowed:
                problems.append(f"{name}.{key}: unknown key")
                continue
            default = allowed[key].default
            if isinstance(default, bool) and not isinstance(value, bool):
                problems.append(f"{name}.{key}: expected a boolean, got {value!r}")
            elif isinstance(default, (int, float)) and not isinstance(default, bool) and \
                    not (isinstance(value, (int, float)) and not isinstance(value, bool)) and \
                    not (value is None and key in ("clip_norm", "adapter_lr")):
                problems.append(f"{name}.{key}: expected a number, got {value!r}")
            elif isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float) \
                    and not value.is_integer():
                problems.append(f"{name}.{key}: expected an integer, got {value!r}")
            else:
                if key == "layers" and value is not None:
                    value = tuple(int(v) for v in value)
                elif isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float):
                    value = int(value)
                kwargs[key] = value
        if cls is ViTConfig:
            kwargs["total_classes"] = 1
        if cls is MethodSpec:
            if "optimizer" not in built:
                continue
            kwargs.update(asdict(built["optimizer"]))
        try:
            built[name] = cls(**kwargs)
        except (ValueError, TypeError) as exc:
            problems.append(f"{name}: {exc}")
    if problems:
        raise ConfigError(problems)
    stream = built["stream"]
    backbone = ViTConfig(**{**asdict(built["backbone"]), "total_classes": stream.num_labels})
    if backbone.image_size != stream.image_size:
        raise ConfigError([f"backbone.image_size {backbone.image_size} != stream.image_size {stream.image_size}"])
    return ExperimentConfig(stream, backbone, built["method"], built["pretrain"])


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return config_from_dict(yaml.safe_load(fh))


# --------------------------------------------------------------------------
# pretraining

def _pretrain_key(config: ExperimentConfig) -> str:
    s = config.stream
    payload = {
        "backbone": asdict(config.backbone),
        "pretext": [s.image_size, s.seed, s.num_labels, s.pretext_classes, s.pretext_train_per_class,
                    s.pretext_test_per_class],
        "pretrain": {k: v for k, v in asdict(config.pretrain).items() if k != "cache_dir"},
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def pretrain_teacher(config: ExperimentConfig) -> tuple[Path, dict]:
    """Train the backbone on the pretext label set; cached by config hash.

    Returns the checkpoint path (pretext head attached) and a report with the
    pretext PWJS before and after training.
    """
    cache = Path(config.pretrain.cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    key = _pretrain_key(config)
    ckpt, report_path = cache / f"pretrain_{key}.npz", cache / f"pretrain_{key}.json"
    if ckpt.exists() and report_path.exists():
        return ckpt, json.loads(report_path.read_text())
    x_tr, y_tr, x_te, y_te, label_ids = build_pretext(config.stream)
    overlap = set(label_ids) & set(range(config.stream.num_labels))
    if overlap:
        raise ValueError(f"pretext labels overlap stream labels: {sorted(overlap)}")
    p = config.pretrain
    backbone = {k: v for k, v in asdict(config.backbone).items() if k != "total_classes"}
    est = ContinualLearner(method="joint", buffer_size=0, lr=p.lr, clip_norm=config.method.clip_norm,
                           optimizer=p.optimizer, epochs=p.epochs, batch_size=p.batch_size, backbone=backbone, random_state=p.seed)
    untrained = ContinualLearner(method="joint", buffer_size=0, epochs=1, backbone=backbone, random_state=p.seed)
    untrained._initialize(y_tr.shape[1])
    untrained.seen_classes_ = list(range(y_tr.shape[1]))
    before = untrained.score(x_te, y_te)
    t0 = time.perf_counter()
    est.fit(x_tr, y_tr)
    report = {"pretext_pwjs_untrained": before, "pretext_pwjs": est.score(x_te, y_te),
              "seconds": time.perf_counter() - t0, "key": key}
    tmp = ckpt.with_suffix(".tmp")
    save_checkpoint(est.student_, tmp)
    tmp.replace(ckpt)
    report_path.write_text(json.dumps(report, indent=1))
    log.info("pretrained backbone %s: %s", key, report)
    return ckpt, report


# --------------------------------------------------------------------------
# runs

@dataclass
class RunRecord:
    config: dict
    seed: int
    method: str
    matrix: ResultMatrix
    ar_f: float
    fg_f: float | None
    task_seconds: list[float]
    loss_history: list[dict]
    teacher_checksum_start: str | None
    teacher_checksum_end: str | None
    pretrain: dict
    checkpoint: str | None = None
    learner: ContinualLearner | None = field(default=None, repr=False, compare=False)

    def summary(self) -> dict:
        return {"method": self.method, "seed": self.seed, "ar_f": self.ar_f, "fg_f": self.fg_f,
                "task_seconds": self.task_seconds, "loss_history": self.loss_history,
                "teacher_checksum_start": self.teacher_checksum_start,
                "teacher_checksum_end": self.teacher_checksum_end, "pretrain": self.pretrain,
                "checkpoint": self.checkpoint, "config": self.config}


def evaluate_row(est: ContinualLearner, stream: TaskStream, j: int, threshold: float) -> list[float]:
    """PWJS on every task k <= j after training on task j (all 1-based)."""
    allowed = stream.introduced_mask(j)
    row = []
    for k in range(1, j + 1):
        task = stream.tasks[k - 1]
        pred = predict_labels(est.decision_function(task.x_test), threshold, allowed)
        row.append(pwjs(stream.test_targets(k, j), pred))
    return row


def make_learner(config: ExperimentConfig, seed: int, init_checkpoint) -> ContinualLearner:
    m = config.method
    backbone = {k: v for k, v in asdict(config.backbone).items() if k != "total_classes"}
    params = {f.name: getattr(m, f.name) for f in fields(m) if f.name != "kind"}
    return ContinualLearner(method=m.kind, backbone=backbone, init_checkpoint=str(init_checkpoint),
                            random_state=seed, **params)


def run_experiment(config: ExperimentConfig | str | Path, seed: int = 0, out_dir=None,
                   resume_from=None, snapshots: bool = True, stream: TaskStream | None = None) -> RunRecord:
    """Pretrain (cached), train every task, evaluate after each, write result files.

    ``resume_from`` is a snapshot directory written by an earlier run after some task.
    """
    if not isinstance(config, ExperimentConfig):
        config = load_config(config)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if stream is None:
        stream = build_stream(config.stream)
    if config.method.kind == "joint":
        stream = stream.joint()
    ckpt, pre_report = pretrain_teacher(config)
    n = len(stream)
    matrix = ResultMatrix(n)
    times: list[float] = []
    start_task = 1
    if resume_from is not None:
        resume = Path(resume_from)
        est = ContinualLearner.load_state(resume)
        progress = json.loads((resume / "progress.json").read_text())
        matrix = ResultMatrix.from_array(np.array(progress["matrix"], dtype=np.float64)) \
            if progress["matrix"] else matrix
        if matrix.num_tasks != n:
            raise ValueError("snapshot belongs to a stream with a different number of tasks")
        times = progress["task_seconds"]
        start_task = est.n_tasks_seen_ + 1
        checksum_start = progress["teacher_checksum_start"]
    else:
        est = make_learner(config, seed, ckpt)
        est._initialize(stream.num_classes)
        checksum_start = _teacher_checksum(est)
    for j in range(start_task, n + 1):
        task = stream.tasks[j - 1]
        t0 = time.perf_counter()
        est.partial_fit(task.x_train, task.y_stream, introduced=task.introduced, task_id=j)
        times.append(time.perf_counter() - t0)
        for k, score in enumerate(evaluate_row(est, stream, j, config.method.threshold), start=1):
            matrix[j - 1, k - 1] = score
        log.info("%s seed %d task %d/%d: R=%s", config.method.kind, seed, j, n,
                 np.round(matrix.values[j - 1, :j], 2).tolist())
        if out is not None and snapshots and j < n:
            snap = out / "snapshots" / f"task_{j:02d}"
            est.save_state(snap)
            (snap / "progress.json").write_text(json.dumps({
                "matrix": np.where(np.isfinite(matrix.values), matrix.values, np.nan).tolist(),
                "task_seconds": times, "teacher_checksum_start": checksum_start}))
    record = RunRecord(
        config=config.to_dict(), seed=seed, method=config.method.kind, matrix=matrix,
        ar_f=final_average_pwjs(matrix), fg_f=adjusted_forgetting(matrix) if n >= 2 else None,
        task_seconds=times, loss_history=est.loss_history_, teacher_checksum_start=checksum_start,
        teacher_checksum_end=_teacher_checksum(est), pretrain=pre_report)
    if out is not None:
        matrix.to_csv(out / "results_matrix.csv")
        save_checkpoint(est.student_, out / "student.npz")
        record.checkpoint = str(out / "student.npz")
        (out / "summary.json").write_text(json.dumps(record.summary(), indent=1, allow_nan=False))
    record.learner = est
    return record


def _teacher_checksum(est: ContinualLearner) -> str | None:
    return parameter_checksum(est.teacher_) if est.teacher_ is not None else None


def evaluate_checkpoint(checkpoint, stream: TaskStream, threshold: float = 0.5) -> dict:
    """Score a saved student on every test set of ``stream`` with all its classes introduced."""
    est = ContinualLearner(method="joint", buffer_size=0, init_checkpoint=str(checkpoint))
    est._initialize(stream.num_classes)
    est.seen_classes_ = list(range(stream.num_classes))
    n = len(stream)
    per_task = evaluate_row(est, stream, n, threshold)
    return {"per_task_pwjs": per_task, "mean_pwjs": float(np.mean(per_task))}


def report(run_dirs, out_csv=None) -> list[dict]:
    """Mean and sample standard deviation of AR_f and FG_f per method."""
    groups: dict[str, list[dict]] = {}
    for d in run_dirs:
        for summary_path in sorted(Path(d).rglob("summary.json")):
            s = json.loads(summary_path.read_text())
            groups.setdefault(s["method"], []).append(s)
    rows = []
    for method, runs in sorted(groups.items()):
        ar = [r["ar_f"] for r in runs]
        fg = [r["fg_f"] for r in runs if r["fg_f"] is not None]
        rows.append({
            "method": method, "runs": len(runs),
            "ar_f_mean": statistics.fmean(ar), "ar_f_std": statistics.stdev(ar) if len(ar) > 1 else 0.0,
            "fg_f_mean": statistics.fmean(fg) if fg else None,
            "fg_f_std": (statistics.stdev(fg) if len(fg) > 1 else 0.0) if fg else None,
        })
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["method", "runs", "ar_f_mean", "ar_f_std", "fg_f_mean", "fg_f_std"])
            w.writeheader()
            for r in rows:
                w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else ("" if v is None else v))
                            for k, v in r.items()})
    return rows
