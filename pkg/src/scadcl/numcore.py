"""Differentiable tensor primitives used across the package.

Tensors are plain ``torch.Tensor`` objects; this module adds the handful of
operations whose exact semantics matter here (masked BCE, degenerate-row
normalisation, straight-through binary Gumbel sampling, clipped SGD) plus a
finite-difference gradient checker.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Iterator, Sequence

import torch
import torch.nn.functional as F

# Channel order for binary Gumbel sampling, fixed project-wide.
DROP, KEEP = 0, 1

_NORM_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""

    def __init__(self, op: str, a, b):
        super().__init__(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")
        self.op = op
        self.shapes = (tuple(a), tuple(b))


class NonFiniteGradientError(FloatingPointError):
    pass


@contextlib.contextmanager
def double_precision() -> Iterator[None]:
    """Build and run everything inside the block in float64."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


# --------------------------------------------------------------------------
# shape-checked primitives

def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def _check_broadcast(op: str, a: torch.Tensor, b: torch.Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_broadcast("add", a, b)
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_broadcast("mul", a, b)
    return a * b


def concat(tensors: list[torch.Tensor], axis: int = 0) -> torch.Tensor:
    ref = tensors[0]
    for t in tensors[1:]:
        if t.dim() != ref.dim() or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref.shape)) if i != axis % ref.dim()
        ):
            raise ShapeError("concat", ref.shape, t.shape)
    return torch.cat(tensors, dim=axis)


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=axis)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    if weight.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError("layer_norm", x.shape, weight.shape)
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def l2_normalize_rows(x: torch.Tensor) -> torch.Tensor:
    """Scale every row (last axis) to unit L2 norm.

    Rows with norm <= 1e-12 are returned unchanged and pass no gradient.
    """
    sq = (x * x).sum(dim=-1, keepdim=True)
    ok = sq > _NORM_FLOOR**2
    norm = torch.sqrt(torch.where(ok, sq, torch.ones_like(sq)))
    return torch.where(ok, x / norm, x.detach())


def multi_head_attention(
    x: torch.Tensor,
    w_qkv: torch.Tensor,
    b_qkv: torch.Tensor,
    w_out: torch.Tensor,
    b_out: torch.Tensor,
    num_heads: int,
) -> torch.Tensor:
    """Scaled dot-product self-attention over tokens of ``x`` (..., T, D).

    Weights follow the ``nn.Linear`` layout: ``w_qkv`` is (3D, D), ``w_out`` (D, D).
    """
    *lead, T, D = x.shape
    if D % num_heads:
        raise ShapeError("multi_head_attention", x.shape, (num_heads,))
    if w_qkv.shape != (3 * D, D):
        raise ShapeError("multi_head_attention", x.shape, w_qkv.shape)
    hd = D // num_heads
    qkv = F.linear(x, w_qkv, b_qkv).reshape(*lead, T, 3, num_heads, hd)
    q, k, v = qkv.unbind(dim=-3)
    q, k, v = (t.transpose(-3, -2) for t in (q, k, v))  # (..., H, T, hd)
    att = softmax((q @ k.transpose(-1, -2)) / math.sqrt(hd), axis=-1)
    out = (att @ v).transpose(-3, -2).reshape(*lead, T, D)
    return F.linear(out, w_out, b_out)


# --------------------------------------------------------------------------
# losses

def bce_with_logits(
    logits: torch.Tensor,
    targets: torch.Tensor,
    class_mask: torch.Tensor | None = None,
    return_count: bool = False,
):
    """Mean binary cross-entropy over the unmasked positions.

    ``class_mask`` broadcasts against the trailing (class) axis. When every
    position is masked the loss is an exact zero with zero gradient; pass
    ``return_count=True`` to also get the number of active positions.
    """
    if logits.shape != targets.shape:
        raise ShapeError("bce_with_logits", logits.shape, targets.shape)
    elem = logits.clamp(min=0) - logits * targets + torch.log1p(torch.exp(-logits.abs()))
    if class_mask is None:
        active = torch.ones_like(elem, dtype=torch.bool)
    else:
        if class_mask.shape[-1] != logits.shape[-1]:
            raise ShapeError("bce_with_logits", logits.shape, class_mask.shape)
        active = torch.broadcast_to(class_mask > 0, elem.shape)
    count = int(active.sum())
    if count == 0:
        loss = (logits * 0.0).sum()
    else:
        loss = torch.where(active, elem, torch.zeros_like(elem)).sum() / count
    return (loss, count) if return_count else loss


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError("mse", a.shape, b.shape)
    return ((a - b) ** 2).mean()


def bce_probs(probs: torch.Tensor, targets: torch.Tensor, clamp: float = 1e-6) -> torch.Tensor:
    """Mean BCE with predictions given as probabilities, clamped away from {0, 1}."""
    if probs.shape != targets.shape:
        raise ShapeError("bce_probs", probs.shape, targets.shape)
    p = probs.clamp(clamp, 1.0 - clamp)
    return -(targets * torch.log(p) + (1 - targets) * torch.log1p(-p)).mean()


# --------------------------------------------------------------------------
# straight-through binary Gumbel-Softmax

class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, soft, hard):
        return hard

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def sample_gumbel(shape, generator: torch.Generator | None = None, dtype=None) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=dtype)
    tiny = torch.finfo(u.dtype).tiny
    e = -torch.log(u.clamp_min(tiny))
    return -torch.log(e.clamp_min(tiny))


def gumbel_binary(
    logit_pairs: torch.Tensor,
    temperature: float = 1.0,
    mode: str = "train",
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample hard keep/drop bits from (..., 2) logits ordered (drop, keep).

    Returns ``(hard_bits, keep_prob)``. In train mode Gumbel noise is added to
    both channels before the tempered softmax and the backward pass of the
    hard bits is that of ``keep_prob``. Eval mode is noise-free; ties go to keep.
    """
    if temperature <= 0:
        raise ValueError(f"gumbel_binary: temperature must be positive, got {temperature}")
    if logit_pairs.shape[-1] != 2:
        raise ShapeError("gumbel_binary", logit_pairs.shape, (2,))
    if mode not in ("train", "eval"):
        raise ValueError(f"gumbel_binary: unknown mode {mode!r}")
    drop, keep = logit_pairs[..., DROP], logit_pairs[..., KEEP]
    if mode == "train":
        g = sample_gumbel(logit_pairs.shape, generator, dtype=logit_pairs.dtype)
        drop = drop + g[..., DROP]
        keep = keep + g[..., KEEP]
    # two-way softmax over (drop, keep) equals the sigmoid of their difference
    margin = (keep - drop) / temperature
    keep_prob = torch.sigmoid(margin)
    hard = (margin >= 0).to(keep_prob.dtype)
    return _StraightThrough.apply(keep_prob, hard), keep_prob


# --------------------------------------------------------------------------
# optimisation

def global_grad_norm(params: Iterable[torch.Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.double() ** 2).sum())
    return math.sqrt(total)


def sgd_step(params: Iterable[torch.nn.Parameter], lr: float | Sequence[float],
             clip_norm: float | None = None) -> float:
    """Plain SGD with optional global-norm clipping; returns the pre-clip norm.

    ``lr`` is one rate or one per parameter. Frozen parameters
    (``requires_grad`` false) are skipped. Gradients are zeroed after the update.
    """
    params = list(params)
    lrs = [float(lr)] * len(params) if isinstance(lr, (int, float)) else [float(v) for v in lr]
    if len(lrs) != len(params):
        raise ValueError(f"sgd_step: {len(lrs)} learning rates for {len(params)} parameters")
    pairs = [(p, r) for p, r in zip(params, lrs) if p.requires_grad and p.grad is not None]
    live = [p for p, _ in pairs]
    for p in live:
        if not torch.isfinite(p.grad).all():
            raise NonFiniteGradientError(f"sgd_step: non-finite gradient in tensor of shape {tuple(p.shape)}")
    norm = global_grad_norm(live)
    scale = 1.0
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm
    with torch.no_grad():
        for p, r in pairs:
            p.add_(p.grad, alpha=-r * scale)
            p.grad.zero_()
    return norm


# --------------------------------------------------------------------------
# finite differences

def gradient_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float = 1e-5,
                   indices=None) -> float:
    """Max relative error between autograd and central differences of ``f`` at ``x``.

    The denominator per coordinate is ``max(|analytic|, |numeric|, 1e-8)``.
    ``indices`` limits the check to those flat coordinates.
    """
    x0 = x.detach().clone()
    xa = x0.clone().requires_grad_(True)
    out = f(xa)
    if out.numel() != 1:
        raise ValueError("gradient_check: f must return a scalar")
    (analytic,) = torch.autograd.grad(out, xa, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x0)
    analytic = analytic.reshape(-1)
    flat = x0.reshape(-1)
    worst = 0.0
    with torch.no_grad():
        for i in (range(flat.numel()) if indices is None else indices):
            i = int(i)
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = float(f(x0))
            flat[i] = orig - eps
            lo = float(f(x0))
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            a = float(analytic[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
