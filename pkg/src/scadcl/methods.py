"""Method registry and assembly of the total training loss.

    L = L_clf + alpha * L_der + beta * L_er + lambda_fp * L_FP + lambda_fp_rep * L_FP_rep
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch

from . import numcore as nc
from .distill import AdapterBank, loss_fp, loss_fp_replay
from .rehearsal import ReplayBatch, ace_class_mask, loss_der, loss_er, seen_mask

METHOD_KINDS = ("joint", "finetune", "finetune_ace", "er", "er_ace", "derpp_ace", "scad", "scad_no_masks")
_BUFFERED = {"er", "er_ace", "derpp_ace", "scad", "scad_no_masks"}
_ACE = {"finetune_ace", "er_ace", "derpp_ace", "scad", "scad_no_masks"}
_DER = {"derpp_ace", "scad", "scad_no_masks"}
_FP = {"scad", "scad_no_masks"}

TERMS = ("clf", "der", "er", "fp", "fp_rep")


@dataclass(frozen=True)
class MethodSpec:
    kind: str = "scad"
    alpha: float = 1.0
    beta: float = 1.0
    lambda_fp: float = 0.5
    lambda_fp_rep: float = 0.1
    buffer_size: int = 500
    lr: float = 0.03
    clip_norm: float | None = 1.0
    adapter_lr: float | None = None
    epochs: int = 5
    batch_size: int = 32
    replay_batch_size: int = 32
    temperature: float = 1.0
    layers: tuple[int, ...] | None = None
    threshold: float = 0.5
    adapter_kind: str = "affine"
    keep_bias: float = 0.0
    augment: bool = False

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ValueError(f"unknown method {self.kind!r}; choose from {METHOD_KINDS}")
        if self.kind in _BUFFERED and self.buffer_size <= 0:
            raise ValueError(f"method {self.kind} replays from a buffer and needs buffer_size > 0")
        if self.kind not in _BUFFERED and self.buffer_size > 0:
            raise ValueError(f"method {self.kind} has no buffer; buffer_size must be 0")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1 or self.replay_batch_size < 1:
            raise ValueError("lr, epochs, batch_size and replay_batch_size must be positive")
        if self.adapter_lr is not None and self.adapter_lr <= 0:
            raise ValueError("adapter_lr must be positive or null")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")

    @property
    def uses_buffer(self) -> bool:
        return self.kind in _BUFFERED

    @property
    def uses_ace(self) -> bool:
        return self.kind in _ACE

    @property
    def uses_der(self) -> bool:
        return self.kind in _DER

    @property
    def uses_fp(self) -> bool:
        return self.kind in _FP

    @property
    def uses_adapters(self) -> bool:
        return self.kind == "scad"

    @property
    def weights(self) -> dict[str, float]:
        return {
            "clf": 1.0,
            "der": self.alpha if self.uses_der else 0.0,
            "er": self.beta if self.uses_buffer else 0.0,
            "fp": self.lambda_fp if self.uses_fp else 0.0,
            "fp_rep": self.lambda_fp_rep if self.uses_adapters else 0.0,
        }


@dataclass
class LossOutput:
    total: torch.Tensor
    terms: dict[str, float]  # unweighted values
    summands: dict[str, float]  # weight * value, these add up to ``total``
    stream_logits: torch.Tensor  # detached
    stream_teacher_attention: torch.Tensor | None = None  # (B, |L|, S+1), detached
    extras: dict = field(default_factory=dict)


def total_loss(
    spec: MethodSpec,
    student,
    x: torch.Tensor,
    y: torch.Tensor,
    seen_classes: Sequence[int],
    replay: ReplayBatch | None = None,
    teacher=None,
    adapters: AdapterBank | None = None,
    layers: Sequence[int] | None = None,
    generator: torch.Generator | None = None,
) -> LossOutput:
    """Loss for one stream batch (plus an optional replay batch) under ``spec``."""
    if replay is not None and not spec.uses_buffer:
        raise ValueError(f"method {spec.kind} takes no replay batch")
    if spec.uses_fp and teacher is None:
        raise ValueError(f"method {spec.kind} needs a frozen teacher")
    if spec.uses_adapters and adapters is None:
        raise ValueError("scad needs adapters")
    n_stream = x.shape[0]
    n_classes = y.shape[1]
    has_replay = replay is not None and len(replay) > 0
    inputs = torch.cat([x, replay.samples]) if has_replay else x

    if spec.uses_fp:
        logits, s_trace = student(inputs, collect_traces=True)
        with torch.no_grad():
            _, t_trace = teacher(inputs, collect_traces=True)
    else:
        logits = student(inputs)
    s_logits = logits[:n_stream]

    if spec.uses_ace:
        cmask = ace_class_mask(y, seen_classes, "stream")
    else:
        cmask = seen_mask(seen_classes, n_classes, y.dtype)
    zero = logits.sum() * 0.0
    terms = {"clf": nc.bce_with_logits(s_logits, y, cmask)}
    terms["er"] = loss_er(student, replay, seen_classes, logits[n_stream:]) if has_replay and spec.uses_buffer else zero
    terms["der"] = loss_der(student, replay, logits[n_stream:]) if has_replay and spec.uses_der else zero
    terms["fp"] = zero
    terms["fp_rep"] = zero
    t_attn = None
    if spec.uses_fp:
        L = list(layers) if layers is not None else list(range(len(s_trace.block_outputs)))
        masks = None
        if not spec.uses_adapters:
            S1 = s_trace.block_outputs[0].shape[1]
            masks = torch.ones(inputs.shape[0], len(L), S1, dtype=logits.dtype)
        fp = loss_fp(t_trace.block_outputs, s_trace.block_outputs, adapters, L, "train", generator, masks)
        terms["fp"] = fp.loss
        t_attn = fp.teacher_attention[:n_stream]
        if spec.uses_adapters and has_replay:
            terms["fp_rep"] = loss_fp_replay(fp.keep_prob[n_stream:], replay.masks)

    w = spec.weights
    total = terms["clf"]
    for name in TERMS[1:]:
        total = total + w[name] * terms[name]
    values = {k: float(v.detach()) for k, v in terms.items()}
    return LossOutput(
        total=total,
        terms=values,
        summands={k: w[k] * values[k] for k in TERMS},
        stream_logits=s_logits.detach(),
        stream_teacher_attention=t_attn,
    )
