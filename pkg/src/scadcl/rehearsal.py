"""Reservoir replay memory and the rehearsal loss terms (ER, DER, ACE masking)."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Iterable, Sequence

import numpy as np
import torch

from . import numcore as nc


@dataclass(frozen=True)
class BufferEntry:
    sample: np.ndarray  # (C, H, W), non-augmented
    label: np.ndarray  # (|Y|,) multi-hot uint8
    logits: np.ndarray  # (|Y|,) student eval-mode logits at insertion
    masks: np.ndarray | None  # (|L|, S+1) uint8 adapter bits, or None
    stream_index: int
    task_id: int

    def __post_init__(self):
        if not np.isin(self.label, (0, 1)).all():
            raise ValueError("buffer labels must be {0,1}-valued")
        if self.logits.shape != self.label.shape:
            raise ValueError(f"logits shape {self.logits.shape} != label shape {self.label.shape}")
        for arr in (self.sample, self.label, self.logits, self.masks):
            if arr is not None:
                arr.setflags(write=False)


@dataclass
class ReplayBatch:
    samples: torch.Tensor
    labels: torch.Tensor
    logits: torch.Tensor
    masks: torch.Tensor | None
    task_ids: np.ndarray

    def __len__(self) -> int:
        return self.samples.shape[0]


class ReplayBuffer:
    """Fixed-capacity memory filled by reservoir sampling (Vitter's algorithm R)."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self.entries: list[Any] = []
        self.seen_count = 0

    def __len__(self) -> int:
        return len(self.entries)

    def is_empty(self) -> bool:
        return not self.entries

    def insert(self, entry, rng: np.random.Generator) -> int:
        """Offer one item; returns the slot it landed in or -1."""
        n = self.seen_count
        self.seen_count += 1
        if n < self.capacity:
            self.entries.append(entry)
            return n
        j = int(rng.integers(0, n + 1))
        if j < self.capacity:
            self.entries[j] = entry
            return j
        return -1

    def extend(self, entries: Sequence, rng: np.random.Generator) -> np.ndarray:
        """Offer a run of items in order; same law as repeated :meth:`insert`.

        Draws are vectorised, so this is the path used by training loops.
        """
        entries = list(entries)
        n0 = self.seen_count
        slots = np.full(len(entries), -1, dtype=np.int64)
        fill = max(0, min(len(entries), self.capacity - n0))
        for i in range(fill):
            self.entries.append(entries[i])
            slots[i] = n0 + i
        if fill < len(entries):
            ns = np.arange(n0 + fill, n0 + len(entries))
            js = rng.integers(0, ns + 1)
            for i in np.flatnonzero(js < self.capacity):
                self.entries[js[i]] = entries[fill + i]
                slots[fill + i] = js[i]
        self.seen_count = n0 + len(entries)
        return slots

    def sample(self, k: int, rng: np.random.Generator) -> list:
        """Uniform draw of ``k`` entries; without replacement when possible."""
        if not self.entries or k <= 0:
            return []
        idx = rng.choice(len(self.entries), size=k, replace=k > len(self.entries))
        return [self.entries[i] for i in idx]

    # -- snapshots ---------------------------------------------------------

    def save(self, path, rng_state: dict | None = None) -> None:
        """Write entries, capacity, seen_count and an optional RNG state to ``.npz``."""
        meta = {"capacity": self.capacity, "seen_count": self.seen_count, "rng_state": rng_state,
                "has_masks": bool(self.entries) and self.entries[0].masks is not None}
        arrays: dict[str, np.ndarray] = {"__meta__": np.array(json.dumps(meta))}
        if self.entries:
            arrays["samples"] = np.stack([e.sample for e in self.entries])
            arrays["labels"] = np.stack([e.label for e in self.entries])
            arrays["logits"] = np.stack([e.logits for e in self.entries])
            arrays["stream_index"] = np.array([e.stream_index for e in self.entries], dtype=np.int64)
            arrays["task_id"] = np.array([e.task_id for e in self.entries], dtype=np.int64)
            if meta["has_masks"]:
                arrays["masks"] = np.stack([e.masks for e in self.entries])
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> tuple["ReplayBuffer", dict | None]:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            buf = cls(meta["capacity"])
            buf.seen_count = meta["seen_count"]
            if "samples" in data:
                masks = data["masks"] if meta["has_masks"] else [None] * len(data["samples"])
                for s, y, h, m, si, t in zip(data["samples"], data["labels"], data["logits"], masks,
                                             data["stream_index"], data["task_id"]):
                    buf.entries.append(BufferEntry(s.copy(), y.copy(), h.copy(),
                                                   None if m is None else m.copy(), int(si), int(t)))
        return buf, meta["rng_state"]


def reservoir_insert(buffer: ReplayBuffer, entry, rng: np.random.Generator) -> ReplayBuffer:
    buffer.insert(entry, rng)
    return buffer


def sample_batch(buffer: ReplayBuffer, k: int, rng: np.random.Generator, dtype=torch.float32) -> ReplayBatch | None:
    """Stack ``k`` sampled entries into tensors; ``None`` for an empty buffer."""
    entries = buffer.sample(k, rng)
    if not entries:
        return None
    masks = None
    if entries[0].masks is not None:
        masks = torch.from_numpy(np.stack([e.masks for e in entries])).to(dtype)
    return ReplayBatch(
        samples=torch.from_numpy(np.stack([e.sample for e in entries])).to(dtype),
        labels=torch.from_numpy(np.stack([e.label for e in entries])).to(dtype),
        logits=torch.from_numpy(np.stack([e.logits for e in entries])).to(dtype),
        masks=masks,
        task_ids=np.array([e.task_id for e in entries]),
    )


def ace_class_mask(batch_labels: torch.Tensor, seen_classes: Iterable[int], source: str,
                   num_classes: int | None = None) -> torch.Tensor:
    """Class mask for the classification loss.

    ``stream``: the classes positive somewhere in the batch.
    ``buffer``: every class seen so far.
    """
    if source == "stream":
        return (batch_labels.sum(dim=0) > 0).to(batch_labels.dtype)
    if source == "buffer":
        n = batch_labels.shape[-1] if num_classes is None else num_classes
        return seen_mask(seen_classes, n, batch_labels.dtype)
    raise ValueError(f"unknown mask source {source!r}")


def seen_mask(seen_classes: Iterable[int], num_classes: int, dtype=torch.float32) -> torch.Tensor:
    mask = torch.zeros(num_classes, dtype=dtype)
    idx = list(seen_classes)
    if idx:
        mask[idx] = 1
    return mask


def loss_er(model, batch: ReplayBatch | None, seen_classes: Iterable[int],
            logits: torch.Tensor | None = None) -> torch.Tensor:
    """BCE of current outputs on buffered samples against their stored labels."""
    if batch is None or len(batch) == 0:
        return torch.zeros(())
    if logits is None:
        logits = model(batch.samples)
    mask = ace_class_mask(batch.labels, seen_classes, "buffer")
    return nc.bce_with_logits(logits, batch.labels, mask)


def loss_der(model, batch: ReplayBatch | None, logits: torch.Tensor | None = None) -> torch.Tensor:
    """MSE between current logits and the logits stored at insertion, all classes."""
    if batch is None or len(batch) == 0:
        return torch.zeros(())
    if logits is None:
        logits = model(batch.samples)
    return nc.mse(logits, batch.logits)
