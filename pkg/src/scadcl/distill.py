"""Selective class-attention distillation between a frozen teacher and a student."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from . import numcore as nc


def correlation_map(features: torch.Tensor) -> torch.Tensor:
    """Token cosine-similarity matrix: (..., S+1, D) -> (..., S+1, S+1)."""
    unit = nc.l2_normalize_rows(features)
    return unit @ unit.transpose(-1, -2)


def class_attention(corr: torch.Tensor) -> torch.Tensor:
    """Row 0 of a correlation map, self-correlation entry included."""
    return corr[..., 0, :]


def attention_distance(r_teacher: torch.Tensor, r_student: torch.Tensor) -> torch.Tensor:
    """Teacher minus student class attention over the patch tokens (index 0 dropped).

    The teacher side is detached.
    """
    if r_teacher.shape != r_student.shape:
        raise nc.ShapeError("attention_distance", r_teacher.shape, r_student.shape)
    return r_teacher.detach()[..., 1:] - r_student[..., 1:]


class Adapter(nn.Module):
    """Maps a teacher class-attention vector to (drop, keep) logit pairs per token.

    ``kind="affine"`` uses two full affine maps R^{S+1} -> R^{S+1};
    ``kind="diagonal"`` uses one scale and bias per position and channel.
    """

    def __init__(self, seq_len: int, layer: int = 0, temperature: float = 1.0,
                 kind: str = "affine", keep_bias: float = 0.0):
        super().__init__()
        if kind not in ("affine", "diagonal"):
            raise ValueError(f"unknown adapter kind {kind!r}")
        self.layer = layer
        self.seq_len = seq_len
        self.temperature = temperature
        self.kind = kind
        wshape = (2, seq_len, seq_len) if kind == "affine" else (2, seq_len)
        self.weight = nn.Parameter(torch.zeros(wshape))
        bias = torch.zeros(2, seq_len)
        bias[nc.KEEP] = keep_bias
        self.bias = nn.Parameter(bias)

    def forward(self, r: torch.Tensor) -> torch.Tensor:
        if r.shape[-1] != self.seq_len:
            raise nc.ShapeError("adapter", r.shape, (self.seq_len,))
        if self.kind == "affine":
            logits = torch.einsum("kij,...j->...ki", self.weight, r)
        else:
            logits = self.weight * r.unsqueeze(-2)
        logits = logits + self.bias
        return logits.transpose(-1, -2)  # (..., S+1, 2)


def adapter_forward(adapter: Adapter, r_teacher: torch.Tensor, mode: str = "train",
                    generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Hard bits and keep probabilities, each shaped like ``r_teacher``."""
    pairs = adapter(r_teacher.detach())
    return nc.gumbel_binary(pairs, adapter.temperature, mode, generator)


class AdapterBank(nn.Module):
    """One adapter per distilled block index."""

    def __init__(self, layers: Sequence[int], seq_len: int, temperature: float = 1.0,
                 kind: str = "affine", keep_bias: float = 0.0):
        super().__init__()
        self.layers = list(layers)
        self.adapters = nn.ModuleDict(
            {str(l): Adapter(seq_len, l, temperature, kind, keep_bias) for l in self.layers}
        )

    def __getitem__(self, layer: int) -> Adapter:
        try:
            return self.adapters[str(layer)]
        except KeyError:
            raise KeyError(f"no adapter for layer {layer}") from None

    def __contains__(self, layer: int) -> bool:
        return str(layer) in self.adapters

    def force(self, keep: bool) -> None:
        """Saturate every adapter so it emits all-keep (or all-drop) masks."""
        with torch.no_grad():
            for a in self.adapters.values():
                a.weight.zero_()
                a.bias.zero_()
                a.bias[nc.KEEP if keep else nc.DROP] = float("inf")


@dataclass
class FPOutput:
    loss: torch.Tensor
    masks: torch.Tensor  # (B, |L|, S+1) hard bits
    keep_prob: torch.Tensor  # (B, |L|, S+1)
    teacher_attention: torch.Tensor  # (B, |L|, S+1), detached


def loss_fp(
    teacher_traces: Sequence[torch.Tensor],
    student_traces: Sequence[torch.Tensor],
    adapters: AdapterBank | None,
    layers: Sequence[int],
    mode: str = "train",
    generator: torch.Generator | None = None,
    masks: torch.Tensor | None = None,
) -> FPOutput:
    """Masked class-attention distillation averaged over batch and layers.

    If ``masks`` (B, |L|, S+1) is given it replaces the adapter output; this is
    how the unmasked ablation runs (all ones).
    """
    if not layers:
        raise ValueError("loss_fp needs at least one layer")
    total = 0.0
    out_masks, out_probs, out_r = [], [], []
    for i, l in enumerate(layers):
        r_t = class_attention(correlation_map(teacher_traces[l].detach()))
        r_s = class_attention(correlation_map(student_traces[l]))
        if masks is None:
            if adapters is None or l not in adapters:
                raise KeyError(f"loss_fp: no adapter for layer {l}")
            hard, prob = adapter_forward(adapters[l], r_t, mode, generator)
        else:
            hard = masks[:, i].to(r_s.dtype)
            prob = hard
        dist = attention_distance(r_t, r_s)
        total = total + ((hard[..., 1:] * dist) ** 2).sum(dim=-1).mean()
        out_masks.append(hard)
        out_probs.append(prob)
        out_r.append(r_t)
    return FPOutput(
        loss=total / len(layers),
        masks=torch.stack(out_masks, dim=1),
        keep_prob=torch.stack(out_probs, dim=1),
        teacher_attention=torch.stack(out_r, dim=1),
    )


def loss_fp_replay(keep_prob: torch.Tensor, stored_masks: torch.Tensor) -> torch.Tensor:
    """BCE between current keep probabilities and stored hard masks, (B, |L|, S+1)."""
    if keep_prob.shape != stored_masks.shape:
        raise nc.ShapeError("loss_fp_replay", keep_prob.shape, stored_masks.shape)
    return nc.bce_probs(keep_prob, stored_masks.to(keep_prob.dtype))


def replay_masks_loss(samples: torch.Tensor, stored_masks: torch.Tensor, teacher: nn.Module,
                      adapters: AdapterBank, layers: Sequence[int], mode: str = "train",
                      generator: torch.Generator | None = None) -> torch.Tensor:
    """Recompute teacher attention on buffered samples and score the adapters against stored masks."""
    seq_len = teacher.config.seq_len
    if stored_masks.shape[-1] != seq_len or stored_masks.shape[-2] != len(layers):
        raise nc.ShapeError("loss_fp_replay", stored_masks.shape, (len(layers), seq_len))
    with torch.no_grad():
        _, trace = teacher(samples, collect_traces=True)
    probs = []
    for l in layers:
        r_t = class_attention(correlation_map(trace.block_outputs[l]))
        probs.append(adapter_forward(adapters[l], r_t, mode, generator)[1])
    return loss_fp_replay(torch.stack(probs, dim=1), stored_masks)


@torch.no_grad()
def compute_masks(teacher: nn.Module, samples: torch.Tensor, adapters: AdapterBank,
                  layers: Sequence[int]) -> torch.Tensor:
    """Eval-mode adapter masks for a batch, (B, |L|, S+1); what the buffer stores."""
    _, trace = teacher(samples, collect_traces=True)
    bits = []
    for l in layers:
        r_t = class_attention(correlation_map(trace.block_outputs[l]))
        bits.append(adapter_forward(adapters[l], r_t, "eval")[0])
    return torch.stack(bits, dim=1)
