"""Procedural incremental multi-label benchmark and a JSON-lines manifest format.

Images are rendered glyphs: the superclass fixes the shape family (and, past
five superclasses, a texture), the subclass fixes a hue band, and a per-sample
seed jitters pose, scale, colour and noise.

Manifest layout (``manifest.jsonl``, one JSON object per line)::

    {"record": "header", "num_classes": 25, "mode": "iirc_incomplete",
     "tasks": [{"task": 1, "introduced": [0, 1, 2, 3, 4]}, ...],
     "config": {...}}                         # config optional
    {"record": "sample", "split": "train", "task": 1, "path": "images/train_000000.npy",
     "stream_labels": [3], "full_labels": [3, 17]}

Task ids are 1-based. ``path`` is relative to the manifest's directory and may
point at ``.npy`` arrays (C, H, W) or any image file Pillow can read. Test
records carry ``full_labels`` only.
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

STREAM_SHAPES = ("circle", "triangle", "bar", "cross", "ring")
PRETEXT_SHAPES = ("square", "dots", "crescent", "halfdisk")
TEXTURES = ("solid", "hstripes", "vstripes", "checker")

MODES = ("iirc_incomplete", "complete")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class StreamConfig:
    mode: str = "iirc_incomplete"
    num_tasks: int = 6
    num_superclasses: int = 5
    subclasses_per_superclass: int = 4
    train_per_subclass: int = 200
    test_per_subclass: int = 50
    superclass_share: float = 0.5
    image_size: int = 32
    seed: int = 0
    pretext_classes: int = 12
    pretext_train_per_class: int = 150
    pretext_test_per_class: int = 30

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.num_superclasses < 1 or self.subclasses_per_superclass < 1:
            raise ValueError("superclass and subclass counts must be >= 1")
        if self.num_superclasses > len(STREAM_SHAPES) * len(TEXTURES):
            raise ValueError(f"at most {len(STREAM_SHAPES) * len(TEXTURES)} superclasses are renderable")
        if self.num_tasks < 1:
            raise ValueError("num_tasks must be >= 1")
        if self.mode == "iirc_incomplete" and self.num_tasks < 2:
            raise ValueError("iirc_incomplete needs a superclass task plus at least one subclass task")
        if not 0.0 < self.superclass_share < 1.0:
            raise ValueError("superclass_share must lie in (0, 1)")
        if self.train_per_subclass < 2 or self.test_per_subclass < 2:
            raise ValueError("need at least two train and test samples per subclass")

    @property
    def num_labels(self) -> int:
        return self.num_superclasses * (1 + self.subclasses_per_superclass)


@dataclass
class LabelHierarchy:
    superclasses: list[int]
    subclasses: list[int]
    parent: dict[int, int]
    family: dict[int, int]  # superclass -> index into STREAM_SHAPES x TEXTURES
    hue: dict[int, float]  # subclass -> hue band centre
    hue_width: float

    @property
    def num_labels(self) -> int:
        return len(self.superclasses) + len(self.subclasses)


def generate_hierarchy(config: StreamConfig) -> LabelHierarchy:
    """Superclasses take labels ``0..S-1``; subclasses follow, grouped by parent."""
    ns, k = config.num_superclasses, config.subclasses_per_superclass
    rng = np.random.default_rng([config.seed, 1])
    supers = list(range(ns))
    subs = list(range(ns, ns + ns * k))
    parent = {ns + s * k + i: s for s in range(ns) for i in range(k)}
    offsets = rng.random(ns)
    hue = {ns + s * k + i: float((offsets[s] + i / k) % 1.0) for s in range(ns) for i in range(k)}
    return LabelHierarchy(supers, subs, parent, {s: s for s in supers}, hue, 1.0 / k)


# --------------------------------------------------------------------------
# rendering

def _shape_mask(name: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    d = np.sqrt(u**2 + v**2)
    if name == "circle":
        return d <= r
    if name == "ring":
        return (d <= r) & (d >= 0.6 * r)
    if name == "triangle":
        return (v <= 0.8 * r) & (v >= -0.8 * r + 2.0 * np.abs(u) * 0.9)
    if name == "bar":
        return (np.abs(u) <= 1.1 * r) & (np.abs(v) <= 0.3 * r)
    if name == "cross":
        w = 0.28 * r
        return ((np.abs(u) <= w) & (np.abs(v) <= r)) | ((np.abs(v) <= w) & (np.abs(u) <= r))
    if name == "square":
        return (np.abs(u) <= 0.75 * r) & (np.abs(v) <= 0.75 * r)
    if name == "dots":
        return (np.sqrt((u - 0.5 * r) ** 2 + v**2) <= 0.4 * r) | (np.sqrt((u + 0.5 * r) ** 2 + v**2) <= 0.4 * r)
    if name == "crescent":
        return (d <= r) & (np.sqrt((u - 0.45 * r) ** 2 + v**2) > 0.8 * r)
    if name == "halfdisk":
        return (d <= r) & (v >= 0)
    raise ValueError(f"unknown shape {name!r}")


def _texture(name: str, u: np.ndarray, v: np.ndarray, period: float) -> np.ndarray:
    if name == "solid":
        return np.ones_like(u)
    if name == "hstripes":
        return 0.55 + 0.45 * (np.sin(2 * np.pi * v / period) > 0)
    if name == "vstripes":
        return 0.55 + 0.45 * (np.sin(2 * np.pi * u / period) > 0)
    return 0.55 + 0.45 * ((np.sin(2 * np.pi * u / period) > 0) ^ (np.sin(2 * np.pi * v / period) > 0))


def render_glyph(shape: str, texture: str, hue: float, hue_jitter: float, instance_seed: int,
                 image_size: int) -> np.ndarray:
    """One (3, H, W) float32 image in [0, 1]."""
    rng = np.random.default_rng(instance_seed)
    n = image_size
    cx, cy = 0.5 * n + rng.uniform(-0.12, 0.12, size=2) * n
    r = rng.uniform(0.24, 0.36) * n
    theta = rng.uniform(-0.35, 0.35)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    mask = _shape_mask(shape, u, v, r).astype(np.float64)
    h = (hue + rng.uniform(-hue_jitter, hue_jitter)) % 1.0
    rgb = np.array(colorsys.hsv_to_rgb(h, rng.uniform(0.65, 1.0), rng.uniform(0.75, 1.0)))
    shade = _texture(texture, u, v, period=max(2.0, n / 8))
    bg = rng.uniform(0.05, 0.3, size=3)
    img = bg[:, None, None] * (1 - mask) + rgb[:, None, None] * (mask * shade)
    img = img + rng.normal(0.0, 0.04, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_sample(hierarchy: LabelHierarchy, subclass: int, instance_seed: int, image_size: int = 32) -> np.ndarray:
    if subclass not in hierarchy.parent:
        raise ValueError(f"unknown subclass {subclass}")
    fam = hierarchy.family[hierarchy.parent[subclass]]
    shape = STREAM_SHAPES[fam % len(STREAM_SHAPES)]
    texture = TEXTURES[fam // len(STREAM_SHAPES)]
    return render_glyph(shape, texture, hierarchy.hue[subclass], 0.3 * hierarchy.hue_width,
                        instance_seed, image_size)


def _instance_seed(seed: int, label: int, index: int, split: int) -> int:
    return int(np.random.SeedSequence([seed, label, index, split]).generate_state(1)[0])


# --------------------------------------------------------------------------
# streams

@dataclass
class TaskSpec:
    task_id: int  # 1-based
    introduced: list[int]
    x_train: np.ndarray
    y_stream: np.ndarray  # (n, |Y|) uint8, labels visible during training
    y_full: np.ndarray  # (n, |Y|) uint8, every true label
    x_test: np.ndarray
    y_test: np.ndarray  # (m, |Y|) uint8, every true label
    train_ids: list[tuple[int, int]] = field(default_factory=list)
    test_ids: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class TaskStream:
    tasks: list[TaskSpec]
    num_classes: int
    mode: str
    config: StreamConfig | None = None

    def __len__(self) -> int:
        return len(self.tasks)

    def introduced_mask(self, upto: int) -> np.ndarray:
        """Boolean mask of classes introduced in tasks ``1..upto``."""
        mask = np.zeros(self.num_classes, dtype=bool)
        for t in self.tasks[:upto]:
            mask[t.introduced] = True
        return mask

    def test_targets(self, k: int, j: int) -> np.ndarray:
        """Ground truth for task ``k``'s test set when evaluated after task ``j`` (1-based)."""
        return self.tasks[k - 1].y_test.astype(bool) & self.introduced_mask(j)

    def joint(self) -> "TaskStream":
        """All training and test data as one task with full labels."""
        t = self.tasks
        y_full = np.concatenate([s.y_full for s in t])
        return TaskStream(
            [TaskSpec(1, sorted(c for s in t for c in s.introduced),
                      np.concatenate([s.x_train for s in t]), y_full.copy(), y_full,
                      np.concatenate([s.x_test for s in t]), np.concatenate([s.y_test for s in t]),
                      [i for s in t for i in s.train_ids], [i for s in t for i in s.test_ids])],
            self.num_classes, "joint", self.config)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TaskStream):
            return NotImplemented
        if (self.num_classes, self.mode, len(self)) != (other.num_classes, other.mode, len(other)):
            return False
        for a, b in zip(self.tasks, other.tasks):
            if a.task_id != b.task_id or sorted(a.introduced) != sorted(b.introduced):
                return False
            for name in ("x_train", "y_stream", "y_full", "x_test", "y_test"):
                if not np.array_equal(getattr(a, name), getattr(b, name)):
                    return False
        return True


def _multihot(rows: list[list[int]], n: int) -> np.ndarray:
    y = np.zeros((len(rows), n), dtype=np.uint8)
    for i, r in enumerate(rows):
        y[i, r] = 1
    return y


def _stack(images, config: StreamConfig) -> np.ndarray:
    if not images:
        return np.zeros((0, 3, config.image_size, config.image_size), dtype=np.float32)
    return np.stack(images)


def build_iirc_stream(hierarchy: LabelHierarchy, config: StreamConfig) -> TaskStream:
    """Superclass task first, then the subclasses partitioned over the remaining tasks.

    Each subclass's samples are split: a ``superclass_share`` fraction appears in
    task 1 labelled with its superclass only, the rest in the subclass's own
    task labelled with the subclass only.
    """
    if config.mode != "iirc_incomplete":
        raise ValueError("build_iirc_stream needs mode='iirc_incomplete'")
    n_lab = hierarchy.num_labels
    rng = np.random.default_rng([config.seed, 2])
    order = list(rng.permutation(hierarchy.subclasses))
    n_sub_tasks = config.num_tasks - 1
    per = max(1, len(order) // n_sub_tasks)
    groups = [order[i * per:(i + 1) * per] for i in range(n_sub_tasks - 1)]
    groups.append(order[(n_sub_tasks - 1) * per:])
    if any(not g for g in groups):
        raise ValueError("more subclass tasks than subclasses")
    introduced = [sorted(hierarchy.superclasses)] + [sorted(int(c) for c in g) for g in groups]
    task_of = {int(c): i + 2 for i, g in enumerate(groups) for c in g}

    buckets = {t: {"x": [], "ys": [], "yf": [], "xt": [], "yt": [], "ids": [], "tids": []}
               for t in range(1, config.num_tasks + 1)}
    n_super_train = max(1, int(round(config.superclass_share * config.train_per_subclass)))
    n_super_test = max(1, int(round(config.superclass_share * config.test_per_subclass)))
    for sub in hierarchy.subclasses:
        sup = hierarchy.parent[sub]
        full = [sup, sub]
        for i in range(config.train_per_subclass):
            t = 1 if i < n_super_train else task_of[sub]
            b = buckets[t]
            b["x"].append(render_sample(hierarchy, sub, _instance_seed(config.seed, sub, i, 0), config.image_size))
            b["ys"].append([sup] if t == 1 else [sub])
            b["yf"].append(full)
            b["ids"].append((sub, i))
        for i in range(config.test_per_subclass):
            t = 1 if i < n_super_test else task_of[sub]
            b = buckets[t]
            b["xt"].append(render_sample(hierarchy, sub, _instance_seed(config.seed, sub, i, 1), config.image_size))
            b["yt"].append(full)
            b["tids"].append((sub, i))
    tasks = []
    for t in range(1, config.num_tasks + 1):
        b = buckets[t]
        tasks.append(TaskSpec(t, introduced[t - 1], _stack(b["x"], config), _multihot(b["ys"], n_lab),
                              _multihot(b["yf"], n_lab), _stack(b["xt"], config), _multihot(b["yt"], n_lab),
                              b["ids"], b["tids"]))
    stream = TaskStream(tasks, n_lab, config.mode, config)
    validate_stream(stream)
    return stream


def build_complete_stream(hierarchy: LabelHierarchy, config: StreamConfig) -> TaskStream:
    """Every task introduces a share of all labels; a sample placed in task i
    carries all of its labels introduced up to i.

    A sample is eligible for task i once any of its labels has been introduced;
    it is placed uniformly at random among its eligible tasks.
    """
    n_lab = hierarchy.num_labels
    rng = np.random.default_rng([config.seed, 3])
    perm = rng.permutation(n_lab)
    introduced = [sorted(int(c) for c in g) for g in np.array_split(perm, config.num_tasks)]
    if any(not g for g in introduced):
        raise ValueError("more tasks than labels")
    first = {c: i for i, g in enumerate(introduced) for c in g}
    cum = [set().union(*introduced[: i + 1]) for i in range(config.num_tasks)]

    buckets = {t: {"x": [], "y": [], "yf": [], "xt": [], "yt": [], "ids": [], "tids": []}
               for t in range(config.num_tasks)}
    for sub in hierarchy.subclasses:
        tags = [hierarchy.parent[sub], sub]
        start = min(first[c] for c in tags)
        for split, count in ((0, config.train_per_subclass), (1, config.test_per_subclass)):
            for i in range(count):
                t = int(rng.integers(start, config.num_tasks))
                img = render_sample(hierarchy, sub, _instance_seed(config.seed, sub, i, split), config.image_size)
                b = buckets[t]
                if split == 0:
                    b["x"].append(img)
                    b["y"].append(sorted(c for c in tags if c in cum[t]))
                    b["yf"].append(tags)
                    b["ids"].append((sub, i))
                else:
                    b["xt"].append(img)
                    b["yt"].append(tags)
                    b["tids"].append((sub, i))
    tasks = []
    for t in range(config.num_tasks):
        b = buckets[t]
        tasks.append(TaskSpec(t + 1, introduced[t], _stack(b["x"], config), _multihot(b["y"], n_lab),
                              _multihot(b["yf"], n_lab), _stack(b["xt"], config), _multihot(b["yt"], n_lab),
                              b["ids"], b["tids"]))
    stream = TaskStream(tasks, n_lab, "complete", config)
    validate_stream(stream)
    return stream


def build_stream(config: StreamConfig) -> TaskStream:
    hierarchy = generate_hierarchy(config)
    if config.mode == "iirc_incomplete":
        return build_iirc_stream(hierarchy, config)
    return build_complete_stream(hierarchy, config)


def build_pretext(config: StreamConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, list[int]]:
    """Pretraining data over a label set disjoint from the stream's.

    Pretext classes are (shape, hue band) pairs over shapes the stream never
    uses; their global label ids start after the stream labels. Returns
    ``(x_train, y_train, x_test, y_test, label_ids)`` with one-hot targets over
    the pretext classes.
    """
    n_shapes = len(PRETEXT_SHAPES)
    n_hues = max(1, -(-config.pretext_classes // n_shapes))
    label_ids = [config.num_labels + c for c in range(config.pretext_classes)]
    xs, ys, xt, yt = [], [], [], []
    for c in range(config.pretext_classes):
        shape, band = PRETEXT_SHAPES[c % n_shapes], c // n_shapes
        hue = (band + 0.5) / n_hues
        for split, count, X, Y in ((0, config.pretext_train_per_class, xs, ys),
                                   (1, config.pretext_test_per_class, xt, yt)):
            for i in range(count):
                seed = _instance_seed(config.seed + 7919, label_ids[c], i, split)
                X.append(render_glyph(shape, "solid", hue, 0.3 / n_hues, seed, config.image_size))
                Y.append(c)
    eye = np.eye(config.pretext_classes, dtype=np.uint8)
    return np.stack(xs), eye[ys], np.stack(xt), eye[yt], label_ids


def validate_stream(stream: TaskStream) -> None:
    """Check the task-structure invariants; raise ``ValueError`` naming the rule broken."""
    seen: set[int] = set()
    for t in stream.tasks:
        intro = set(t.introduced)
        if any(not 0 <= c < stream.num_classes for c in intro):
            raise ValueError(f"task {t.task_id}: introduced label outside [0, {stream.num_classes})")
        if intro & seen:
            raise ValueError(f"task {t.task_id}: introduced labels overlap earlier tasks: {sorted(intro & seen)}")
        seen |= intro
        cum = np.zeros(stream.num_classes, dtype=bool)
        cum[sorted(seen)] = True
        for name in ("y_stream", "y_full", "y_test"):
            arr = getattr(t, name)
            if arr.ndim != 2 or arr.shape[1] != stream.num_classes:
                raise ValueError(f"task {t.task_id}: {name} must have {stream.num_classes} columns")
            if not np.isin(arr, (0, 1)).all():
                raise ValueError(f"task {t.task_id}: {name} must be 0/1 valued")
        ys = t.y_stream.astype(bool)
        if stream.mode == "iirc_incomplete":
            if (ys.sum(axis=1) != 1).any():
                raise ValueError(f"task {t.task_id}: incomplete-information labels must be one-hot")
            if ys[:, ~np.isin(np.arange(stream.num_classes), t.introduced)].any():
                raise ValueError(f"task {t.task_id}: stream label outside the task's introduced labels")
        else:
            if len(ys) and (ys.sum(axis=1) < 1).any():
                raise ValueError(f"task {t.task_id}: every training sample needs a positive label")
            if ys[:, ~cum].any():
                raise ValueError(f"task {t.task_id}: stream label not introduced yet")
        if (ys & ~t.y_full.astype(bool)).any():
            raise ValueError(f"task {t.task_id}: stream labels must be a subset of full labels")
        if len(t.x_train) != len(ys) or len(t.x_test) != len(t.y_test):
            raise ValueError(f"task {t.task_id}: sample and label counts differ")


# --------------------------------------------------------------------------
# manifests

def export_manifest(stream: TaskStream, out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    header = {"record": "header", "num_classes": stream.num_classes, "mode": stream.mode,
              "tasks": [{"task": t.task_id, "introduced": [int(c) for c in t.introduced]} for t in stream.tasks]}
    if stream.config is not None:
        header["config"] = asdict(stream.config)
    lines = [json.dumps(header)]
    counter = 0
    for t in stream.tasks:
        for split, X, Y in (("train", t.x_train, t.y_stream), ("test", t.x_test, t.y_test)):
            for i in range(len(X)):
                rel = f"images/{split}_{counter:06d}.npy"
                counter += 1
                np.save(out / rel, X[i])
                rec = {"record": "sample", "split": split, "task": t.task_id, "path": rel}
                if split == "train":
                    rec["stream_labels"] = np.flatnonzero(Y[i]).tolist()
                    rec["full_labels"] = np.flatnonzero(t.y_full[i]).tolist()
                else:
                    rec["full_labels"] = np.flatnonzero(Y[i]).tolist()
                lines.append(json.dumps(rec))
    path = out / "manifest.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


def _load_image(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path).astype(np.float32)
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def load_manifest(path) -> TaskStream:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    root = path.parent
    header = None
    samples: list[tuple[int, dict]] = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
        if not isinstance(rec, dict) or rec.get("record") not in ("header", "sample"):
            raise ManifestError(f"{path}:{lineno}: record must be an object with record=header|sample")
        if rec["record"] == "header":
            if header is not None:
                raise ManifestError(f"{path}:{lineno}: duplicate header")
            header = rec
        else:
            samples.append((lineno, rec))
    if header is None and not samples:
        raise ManifestError(f"{path}: empty manifest")
    if header is None:
        raise ManifestError(f"{path}: missing header record")
    if not samples:
        raise ManifestError(f"{path}: manifest has no samples")
    try:
        n = int(header["num_classes"])
        mode = header["mode"]
        task_intro = {int(t["task"]): [int(c) for c in t["introduced"]] for t in header["tasks"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: bad header ({exc})") from None
    data = {t: {"x": [], "ys": [], "yf": [], "xt": [], "yt": []} for t in task_intro}
    for lineno, rec in samples:
        try:
            task, split, rel = int(rec["task"]), rec["split"], rec["path"]
            full = [int(c) for c in rec["full_labels"]]
            stream_labels = [int(c) for c in rec.get("stream_labels", full)]
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{path}:{lineno}: malformed record ({exc})") from None
        if task not in data:
            raise ManifestError(f"{path}:{lineno}: task {task} not declared in header")
        for c in full + stream_labels:
            if not 0 <= c < n:
                raise ManifestError(f"{path}:{lineno}: label {c} outside [0, {n})")
        img_path = root / rel
        if not img_path.exists():
            raise ManifestError(f"{path}:{lineno}: image {rel} not found")
        b = data[task]
        if split == "train":
            b["x"].append(_load_image(img_path))
            b["ys"].append(stream_labels)
            b["yf"].append(full)
        elif split == "test":
            b["xt"].append(_load_image(img_path))
            b["yt"].append(full)
        else:
            raise ManifestError(f"{path}:{lineno}: split must be train or test")
    cfg = None
    if "config" in header:
        known = {f.name for f in fields(StreamConfig)}
        cfg = StreamConfig(**{k: v for k, v in header["config"].items() if k in known})

    def stack(xs):
        return np.stack(xs) if xs else np.zeros((0, 3, 1, 1), dtype=np.float32)

    tasks = [TaskSpec(t, task_intro[t], stack(b["x"]), _multihot(b["ys"], n), _multihot(b["yf"], n),
                      stack(b["xt"]), _multihot(b["yt"], n)) for t, b in sorted(data.items())]
    stream = TaskStream(tasks, n, mode, cfg)
    try:
        validate_stream(stream)
    except ValueError as exc:
        raise ManifestError(f"{path}: {exc}") from None
    return stream
