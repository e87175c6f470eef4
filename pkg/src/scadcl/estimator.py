"""scikit-learn compatible continual multi-label learner.

``partial_fit`` trains on one task of a stream; ``fit`` trains a single
offline task (the joint upper bound when given all the data).

>>> clf = ContinualLearner(method="scad", buffer_size=200, init_checkpoint="pretrained.npz")
>>> for task in stream.tasks:
...     clf.partial_fit(task.x_train, task.y_stream, introduced=task.introduced)
>>> clf.predict(x_test)  # multi-hot over the classes introduced so far
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import numcore as nc
from .distill import AdapterBank, adapter_forward, compute_masks
from .methods import TERMS, MethodSpec, total_loss
from .metrics import predict_labels, pwjs
from .rehearsal import BufferEntry, ReplayBuffer, sample_batch
from .validation import check_class_list, check_images, check_multilabel
from .vit import ViTConfig, VisionTransformer, clone_into_teacher, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def augment_batch(x: np.ndarray, rng: np.random.Generator, max_shift: int = 2) -> np.ndarray:
    """Random horizontal flip and a small translation per image."""
    out = x.copy()
    flip = rng.random(len(x)) < 0.5
    out[flip] = out[flip, :, :, ::-1]
    shifts = rng.integers(-max_shift, max_shift + 1, size=(len(x), 2))
    for i, (dy, dx) in enumerate(shifts):
        out[i] = np.roll(out[i], (int(dy), int(dx)), axis=(1, 2))
    return out


class ContinualLearner(ClassifierMixin, BaseEstimator):
    """Multi-label ViT learner trained task by task.

    Parameters mirror :class:`~scadcl.methods.MethodSpec` plus the backbone
    shape; ``init_checkpoint`` points at pretrained weights (its head is
    replaced when the class count differs).
    """

    def __init__(self, method="scad", alpha=1.0, beta=1.0, lambda_fp=0.5, lambda_fp_rep=0.1,
                 buffer_size=500, lr=0.03, clip_norm=1.0, adapter_lr=None, epochs=5, batch_size=32, replay_batch_size=32,
                 temperature=1.0, layers=None, threshold=0.5, adapter_kind="affine", keep_bias=0.0,
                 augment=False, backbone=None, init_checkpoint=None, dtype="float32", optimizer="sgd",
                 random_state=0):
        self.method = method
        self.alpha = alpha
        self.beta = beta
        self.lambda_fp = lambda_fp
        self.lambda_fp_rep = lambda_fp_rep
        self.buffer_size = buffer_size
        self.lr = lr
        self.clip_norm = clip_norm
        self.adapter_lr = adapter_lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.replay_batch_size = replay_batch_size
        self.temperature = temperature
        self.layers = layers
        self.threshold = threshold
        self.adapter_kind = adapter_kind
        self.keep_bias = keep_bias
        self.augment = augment
        self.backbone = backbone
        self.init_checkpoint = init_checkpoint
        self.dtype = dtype
        self.optimizer = optimizer
        self.random_state = random_state

    # ------------------------------------------------------------------ setup

    def method_spec(self) -> MethodSpec:
        return MethodSpec(
            kind=self.method, alpha=self.alpha, beta=self.beta, lambda_fp=self.lambda_fp,
            lambda_fp_rep=self.lambda_fp_rep, buffer_size=self.buffer_size, lr=self.lr,
            clip_norm=self.clip_norm, adapter_lr=self.adapter_lr, epochs=self.epochs, batch_size=self.batch_size,
            replay_batch_size=self.replay_batch_size, temperature=self.temperature,
            layers=None if self.layers is None else tuple(self.layers), threshold=self.threshold,
            adapter_kind=self.adapter_kind, keep_bias=self.keep_bias, augment=self.augment,
        )

    def _initialize(self, n_classes: int) -> None:
        spec = self.spec_ = self.method_spec()
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
        tdtype = _DTYPES[self.dtype]
        seed = int(self.random_state)
        if self.init_checkpoint is not None:
            student = load_checkpoint(self.init_checkpoint)
            if self.backbone is not None:
                want = _as_config(self.backbone, student.config.total_classes)
                if want != student.config:
                    raise ValueError(f"backbone {want} does not match checkpoint {student.config}")
        else:
            student = VisionTransformer(_as_config(self.backbone, n_classes), seed=seed)
        if student.config.total_classes != n_classes:
            student.reset_head(n_classes, seed=seed)
        self.student_ = student.to(tdtype).train()
        self.config_ = self.student_.config
        self.n_classes_ = n_classes
        self.classes_ = np.arange(n_classes)
        self.layers_ = list(spec.layers) if spec.layers is not None else list(range(self.config_.num_blocks))
        if any(not 0 <= l < self.config_.num_blocks for l in self.layers_):
            raise ValueError(f"layers {self.layers_} outside the {self.config_.num_blocks} blocks")
        self.teacher_ = clone_into_teacher(self.student_) if spec.uses_fp else None
        self.adapters_ = None
        if spec.uses_adapters:
            self.adapters_ = AdapterBank(self.layers_, self.config_.seq_len, spec.temperature,
                                         spec.adapter_kind, spec.keep_bias).to(tdtype)
        self.buffer_ = ReplayBuffer(spec.buffer_size)
        self.rng_ = np.random.default_rng(seed)
        self.torch_gen_ = torch.Generator().manual_seed(seed)
        for blk in self.student_.blocks:
            blk.generator = self.torch_gen_
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.optimizer == "adam" and spec.adapter_lr is not None:
            raise ValueError("adapter_lr is only supported with the sgd optimizer")
        self.adam_ = None
        self.seen_classes_: list[int] = []
        self.n_tasks_seen_ = 0
        self.loss_history_: list[dict] = []

    def _trainable(self):
        params = list(self.student_.parameters())
        if self.adapters_ is not None:
            params += list(self.adapters_.parameters())
        return params

    # --------------------------------------------------------------- training

    def fit(self, X, Y, introduced=None):
        """Forget any previous state and train one task on (X, Y)."""
        for attr in ("student_", "n_tasks_seen_"):
            if hasattr(self, attr):
                delattr(self, attr)
        if introduced is None:
            introduced = range(np.asarray(Y).shape[1])
        return self.partial_fit(X, Y, introduced=introduced)

    def partial_fit(self, X, Y, introduced=None, task_id=None):
        """Train on the next task; ``introduced`` lists the classes it adds."""
        first = not hasattr(self, "student_")
        if first:
            Y = check_multilabel(Y)
            self._initialize(Y.shape[1])
        X = check_images(X, self.config_.image_size, self.config_.channels)
        Y = check_multilabel(Y, len(X), self.n_classes_)
        if task_id is not None and task_id != self.n_tasks_seen_ + 1:
            raise ValueError(f"tasks must arrive in order: expected task {self.n_tasks_seen_ + 1}, got {task_id}")
        if introduced is None:
            introduced = np.flatnonzero(Y.any(axis=0))
        introduced = check_class_list(introduced, self.n_classes_)
        self.seen_classes_ = sorted(set(self.seen_classes_) | set(introduced))
        self.n_tasks_seen_ += 1
        self._train_task(X, Y)
        return self

    def _train_task(self, X: np.ndarray, Y: np.ndarray) -> None:
        spec = self.spec_
        dtype = _DTYPES[self.dtype]
        task = self.n_tasks_seen_
        self.student_.train()
        if self.adapters_ is not None:
            self.adapters_.train()
        params = self._trainable()
        for epoch in range(spec.epochs):
            order = self.rng_.permutation(len(X))
            sums = dict.fromkeys(TERMS, 0.0)
            sums["total"] = 0.0
            steps = 0
            for start in range(0, len(X), spec.batch_size):
                idx = order[start:start + spec.batch_size]
                x_raw, yb = X[idx], Y[idx]
                x_in = augment_batch(x_raw, self.rng_) if spec.augment else x_raw
                replay = None
                if spec.uses_buffer:
                    replay = sample_batch(self.buffer_, spec.replay_batch_size, self.rng_, dtype)
                    if replay is not None and spec.augment:
                        replay.samples = torch.from_numpy(augment_batch(replay.samples.numpy(), self.rng_))
                xt = torch.from_numpy(x_in).to(dtype)
                yt = torch.from_numpy(yb).to(dtype)
                out = total_loss(spec, self.student_, xt, yt, self.seen_classes_, replay,
                                 self.teacher_, self.adapters_, self.layers_, self.torch_gen_)
                if spec.uses_buffer:
                    self._insert(x_raw, yb, out, dtype, task)
                out.total.backward()
                self._step(params)
                for k, v in out.terms.items():
                    sums[k] += v
                sums["total"] += float(out.total.detach())
                steps += 1
            record = {"task": task, "epoch": epoch + 1, **{k: v / max(steps, 1) for k, v in sums.items()}}
            self.loss_history_.append(record)
            log.debug("task %d epoch %d: %s", task, epoch + 1, record)

    def _step(self, params) -> None:
        spec = self.spec_
        if self.optimizer == "sgd":
            lr = spec.lr
            if spec.adapter_lr is not None and self.adapters_ is not None:
                n_student = sum(1 for _ in self.student_.parameters())
                lr = [spec.lr] * n_student + [spec.adapter_lr] * (len(params) - n_student)
            nc.sgd_step(params, lr, spec.clip_norm)
            return
        if self.adam_ is None:
            self.adam_ = torch.optim.Adam([p for p in params if p.requires_grad], lr=spec.lr)
        if spec.clip_norm is not None:
            torch.nn.utils.clip_grad_norm_(params, spec.clip_norm)
        self.adam_.step()
        self.adam_.zero_grad()

    @torch.no_grad()
    def _insert(self, x_raw: np.ndarray, yb: np.ndarray, out, dtype, task: int) -> None:
        """Offer stream samples to the buffer with eval-mode logits and masks."""
        spec = self.spec_
        reuse = not spec.augment and self.config_.drop_path == 0.0
        if reuse:
            logits = out.stream_logits
        else:
            self.student_.eval()
            logits = self.student_(torch.from_numpy(x_raw).to(dtype))
            self.student_.train()
        masks = None
        if self.adapters_ is not None:
            if reuse and out.stream_teacher_attention is not None:
                bits = [adapter_forward(self.adapters_[l], out.stream_teacher_attention[:, i], "eval")[0]
                        for i, l in enumerate(self.layers_)]
                masks = torch.stack(bits, dim=1)
            else:
                masks = compute_masks(self.teacher_, torch.from_numpy(x_raw).to(dtype), self.adapters_, self.layers_)
            masks = masks.numpy().astype(np.uint8)
        logits = logits.numpy().astype(np.float32)
        base = self.buffer_.seen_count
        entries = [BufferEntry(x_raw[i].copy(), yb[i].copy(), logits[i], None if masks is None else masks[i],
                               base + i, task) for i in range(len(x_raw))]
        self.buffer_.extend(entries, self.rng_)

    # -------------------------------------------------------------- inference

    @torch.no_grad()
    def decision_function(self, X, batch_size: int = 256) -> np.ndarray:
        """Raw logits over all classes, eval mode."""
        check_is_fitted(self, "student_")
        X = check_images(X, self.config_.image_size, self.config_.channels)
        dtype = _DTYPES[self.dtype]
        was_training = self.student_.training
        self.student_.eval()
        try:
            chunks = [self.student_(torch.from_numpy(X[i:i + batch_size]).to(dtype)).double().numpy()
                      for i in range(0, len(X), batch_size)]
        finally:
            self.student_.train(was_training)
        return np.concatenate(chunks) if chunks else np.zeros((0, self.n_classes_))

    def predict_proba(self, X) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.decision_function(X)))

    def seen_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_classes_, dtype=bool)
        mask[self.seen_classes_] = True
        return mask

    def predict(self, X) -> np.ndarray:
        """Multi-hot predictions restricted to the classes seen so far."""
        return predict_labels(self.decision_function(X), self.threshold, self.seen_mask()).astype(np.uint8)

    def score(self, X, Y, sample_weight=None) -> float:
        """PWJS (percent) of :meth:`predict` against ``Y``."""
        if sample_weight is not None:
            raise ValueError("sample weights are not supported")
        return pwjs(np.asarray(Y, dtype=bool), self.predict(X).astype(bool))

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.target_tags.multi_output = True
        return tags

    # ------------------------------------------------------------ persistence

    def save_state(self, directory) -> None:
        """Write everything needed to continue training bit-exactly."""
        check_is_fitted(self, "student_")
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.student_, d / "student.npz")
        if self.teacher_ is not None:
            save_checkpoint(self.teacher_, d / "teacher.npz")
        if self.adapters_ is not None:
            np.savez(d / "adapters.npz", **{k: v.numpy() for k, v in self.adapters_.state_dict().items()})
        self.buffer_.save(d / "buffer.npz", rng_state=self.rng_.bit_generator.state)
        np.save(d / "torch_rng.npy", self.torch_gen_.get_state().numpy())
        if self.adam_ is not None:
            torch.save(self.adam_.state_dict(), d / "adam.pt")
        state = {"params": _jsonable(self.get_params()), "seen_classes": self.seen_classes_,
                 "n_tasks_seen": self.n_tasks_seen_, "n_classes": self.n_classes_,
                 "loss_history": self.loss_history_}
        (d / "state.json").write_text(json.dumps(state, indent=1))

    @classmethod
    def load_state(cls, directory) -> "ContinualLearner":
        d = Path(directory)
        state = json.loads((d / "state.json").read_text())
        params = dict(state["params"])
        params["init_checkpoint"] = str(d / "student.npz")
        est = cls(**params)
        est._initialize(state["n_classes"])
        dtype = _DTYPES[est.dtype]
        if est.teacher_ is not None:
            teacher = load_checkpoint(d / "teacher.npz").to(dtype)
            est.teacher_.load_state_dict(teacher.state_dict())
        if est.adapters_ is not None:
            with np.load(d / "adapters.npz") as z:
                est.adapters_.load_state_dict({k: torch.from_numpy(z[k].copy()) for k in z.files})
        est.buffer_, rng_state = ReplayBuffer.load(d / "buffer.npz")
        est.rng_.bit_generator.state = rng_state
        est.torch_gen_.set_state(torch.from_numpy(np.load(d / "torch_rng.npy")))
        if (d / "adam.pt").exists():
            est.adam_ = torch.optim.Adam([p for p in est._trainable() if p.requires_grad], lr=est.lr)
            est.adam_.load_state_dict(torch.load(d / "adam.pt"))
        est.seen_classes_ = state["seen_classes"]
        est.n_tasks_seen_ = state["n_tasks_seen"]
        est.loss_history_ = state["loss_history"]
        est.init_checkpoint = state["params"]["init_checkpoint"]
        return est


def _as_config(backbone, n_classes: int) -> ViTConfig:
    if backbone is None:
        return ViTConfig(total_classes=n_classes)
    if isinstance(backbone, ViTConfig):
        return ViTConfig(**{**asdict(backbone), "total_classes": n_classes})
    return ViTConfig(**{**dict(backbone), "total_classes": n_classes})


def _jsonable(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        if isinstance(v, ViTConfig):
            v = asdict(v)
        elif isinstance(v, Path):
            v = str(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[k] = v
    return out
