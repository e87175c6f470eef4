"""Tiny pre-norm Vision Transformer with per-block trace capture."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import numcore as nc


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 96
    num_blocks: int = 6
    num_heads: int = 4
    mlp_ratio: float = 4.0
    total_classes: int = 25
    drop_path: float = 0.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"patch_size {self.patch_size} does not divide image_size {self.image_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if min(self.image_size, self.patch_size, self.channels, self.embed_dim, self.num_blocks,
               self.num_heads, self.total_classes) < 1:
            raise ValueError("ViTConfig extents must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1


@dataclass
class ForwardTrace:
    """Block outputs F^l, each (batch, S+1, D), and the logits (batch, |Y|)."""

    block_outputs: list[torch.Tensor] = field(default_factory=list)
    logits: torch.Tensor | None = None


def _trunc_normal(shape, generator, std=0.02):
    t = torch.empty(shape)
    nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std, generator=generator)
    return t


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, drop_path: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.num_heads = num_heads
        self.drop_path = drop_path
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.generator: torch.Generator | None = None

    def _drop(self, branch: torch.Tensor) -> torch.Tensor:
        if not self.training or self.drop_path == 0.0:
            return branch
        keep = 1.0 - self.drop_path
        shape = (branch.shape[0],) + (1,) * (branch.dim() - 1)
        bern = (torch.rand(shape, generator=self.generator, dtype=branch.dtype) < keep).to(branch.dtype)
        return branch * bern / keep

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = nc.layer_norm(x, self.norm1.weight, self.norm1.bias, self.norm1.eps)
        h = nc.multi_head_attention(h, self.qkv.weight, self.qkv.bias, self.proj.weight, self.proj.bias,
                                    self.num_heads)
        x = x + self._drop(h)
        h = nc.layer_norm(x, self.norm2.weight, self.norm2.bias, self.norm2.eps)
        h = self.fc2(nc.gelu(self.fc1(h)))
        return x + self._drop(h)


class VisionTransformer(nn.Module):
    def __init__(self, config: ViTConfig, seed: int = 0):
        super().__init__()
        self.config = config
        c = config
        g = torch.Generator().manual_seed(seed)
        self.patch_embed = nn.Linear(c.channels * c.patch_size**2, c.embed_dim)
        self.cls_token = nn.Parameter(_trunc_normal((1, 1, c.embed_dim), g))
        self.pos_embed = nn.Parameter(_trunc_normal((1, c.seq_len, c.embed_dim), g))
        self.blocks = nn.ModuleList(
            Block(c.embed_dim, c.num_heads, c.mlp_ratio, c.drop_path) for _ in range(c.num_blocks)
        )
        self.norm = nn.LayerNorm(c.embed_dim, eps=1e-6)
        self.head = nn.Linear(c.embed_dim, c.total_classes)
        for name, mod in self.named_modules():
            if isinstance(mod, nn.Linear):
                with torch.no_grad():
                    mod.weight.copy_(_trunc_normal(mod.weight.shape, g))
                    mod.bias.zero_()

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) images to (B, S+1, D) tokens; index 0 is the class token."""
        c = self.config
        if images.dim() != 4 or tuple(images.shape[1:]) != (c.channels, c.image_size, c.image_size):
            raise nc.ShapeError("patchify", images.shape, (c.channels, c.image_size, c.image_size))
        B, p, n = images.shape[0], c.patch_size, c.image_size // c.patch_size
        patches = images.reshape(B, c.channels, n, p, n, p).permute(0, 2, 4, 1, 3, 5)
        tokens = self.patch_embed(patches.reshape(B, n * n, c.channels * p * p))
        cls = self.cls_token.expand(B, -1, -1)
        return torch.cat([cls, tokens], dim=1) + self.pos_embed

    def forward(self, images: torch.Tensor, collect_traces: bool = False):
        x = self.patchify(images)
        traces = []
        for blk in self.blocks:
            x = blk(x)
            if collect_traces:
                traces.append(x)
        x = nc.layer_norm(x, self.norm.weight, self.norm.bias, self.norm.eps)
        logits = self.head(x[:, 0])
        if collect_traces:
            return logits, ForwardTrace(traces, logits)
        return logits

    def reset_head(self, total_classes: int, seed: int = 0) -> None:
        """Replace the classifier with a fresh one over ``total_classes`` outputs."""
        g = torch.Generator().manual_seed(seed)
        head = nn.Linear(self.config.embed_dim, total_classes)
        with torch.no_grad():
            head.weight.copy_(_trunc_normal(head.weight.shape, g))
            head.bias.zero_()
        self.head = head.to(self.pos_embed.dtype)
        self.config = ViTConfig(**{**asdict(self.config), "total_classes": total_classes})


def clone_into_teacher(student: VisionTransformer) -> VisionTransformer:
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
        p.grad = None
    return teacher.eval()


def parameter_checksum(model: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# checkpoints: an .npz archive of named float arrays plus the JSON config under "__config__"

def save_checkpoint(model: VisionTransformer, path, extra: dict[str, np.ndarray] | None = None) -> None:
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    arrays.update(extra or {})
    arrays["__config__"] = np.array(json.dumps(asdict(model.config)))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, config: ViTConfig | None = None) -> VisionTransformer:
    with np.load(Path(path), allow_pickle=False) as data:
        stored = ViTConfig(**json.loads(str(data["__config__"])))
        if config is not None and config != stored:
            raise ValueError(f"checkpoint config {stored} does not match requested {config}")
        dtype = torch.from_numpy(data["head.weight"]).dtype
        model = VisionTransformer(stored).to(dtype)
        state = {k: torch.from_numpy(data[k].copy()) for k in model.state_dict()}
    model.load_state_dict(state)
    return model
