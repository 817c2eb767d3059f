"""Synthetic image/caption world plus an optional CIFAR-10 binary reader.

Every sample is a set of objects drawn from shared latent factors
(shape, color, position, distance), so captions, class labels, boxes,
masks and depth maps all describe the same underlying scene.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow")
RGB = {"red": (0.9, 0.15, 0.1), "green": (0.15, 0.8, 0.2), "blue": (0.15, 0.25, 0.9),
       "yellow": (0.9, 0.85, 0.1)}
NUM_CLASSES = len(SHAPES) * len(COLORS)

SPECIALS = ("<pad>", "<mask>", "<bos>", "<eos>")
WORDS = ("a", "at", "near", "far") + COLORS + SHAPES + ("top", "bottom", "left", "right", "and")
VOCAB = SPECIALS + WORDS
TOKEN = {w: i for i, w in enumerate(VOCAB)}
PAD, MASK = TOKEN["<pad>"], TOKEN["<mask>"]
CAPTION_LEN = 9


def class_of(shape: int, color: int) -> int:
    return shape * len(COLORS) + color


@dataclass(frozen=True)
class ObjectLatent:
    shape: int
    color: int
    cx: float       # centre, fraction of width
    cy: float
    distance: float  # 0 near .. 1 far

    @property
    def label(self) -> int:
        return class_of(self.shape, self.color)

    def radius(self, size: int) -> float:
        # far objects look smaller
        return size * (0.26 - 0.13 * self.distance)


def _shape_mask(obj: ObjectLatent, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) + 0.5
    r = obj.radius(size)
    dx, dy = xx - obj.cx * size, yy - obj.cy * size
    if SHAPES[obj.shape] == "circle":
        return dx * dx + dy * dy <= r * r
    if SHAPES[obj.shape] == "square":
        return (np.abs(dx) <= r * 0.85) & (np.abs(dy) <= r * 0.85)
    if SHAPES[obj.shape] == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.55)
    return ((np.abs(dx) <= r * 0.3) & (np.abs(dy) <= r)) | ((np.abs(dy) <= r * 0.3) & (np.abs(dx) <= r))


@dataclass
class Scene:
    image: np.ndarray          # (3, H, W) float32, centred around 0
    objects: list[ObjectLatent]
    masks: list[np.ndarray]    # per object boolean (H, W), after occlusion
    depth: np.ndarray          # (H, W)

    def boxes(self) -> np.ndarray:
        out = []
        for m in self.masks:
            ys, xs = np.nonzero(m)
            out.append((xs.min(), ys.min(), xs.max() + 1, ys.max() + 1))
        return np.asarray(out, dtype=np.float32).reshape(-1, 4)

    def label_map(self) -> np.ndarray:
        lab = np.zeros(self.depth.shape, dtype=np.int64)
        for obj, m in zip(self.objects, self.masks):
            lab[m] = obj.label + 1
        return lab


class SyntheticWorld:
    """Seeded renderer; identical seeds give identical corpora."""

    def __init__(self, seed: int, size: int = 64, noise: float = 0.04):
        self.rng = np.random.default_rng(seed)
        self.size = size
        self.noise = noise

    def sample_object(self, label: int | None = None) -> ObjectLatent:
        rng = self.rng
        label = int(rng.integers(NUM_CLASSES)) if label is None else label
        return ObjectLatent(label // len(COLORS), label % len(COLORS), float(rng.uniform(0.3, 0.7)),
                            float(rng.uniform(0.3, 0.7)), float(rng.uniform(0, 1)))

    def render(self, objects: list[ObjectLatent]) -> Scene:
        size = self.size
        img = np.full((3, size, size), 0.45, dtype=np.float32)
        img += self.rng.normal(0, self.noise, img.shape).astype(np.float32)
        depth = np.ones((size, size), dtype=np.float32)
        owner = np.full((size, size), -1)
        # paint far to near so near objects occlude
        order = sorted(range(len(objects)), key=lambda i: -objects[i].distance)
        for i in order:
            obj = objects[i]
            m = _shape_mask(obj, size)
            shade = 1.0 - 0.35 * obj.distance
            for ch in range(3):
                img[ch][m] = RGB[COLORS[obj.color]][ch] * shade
            depth[m] = 0.2 + 0.6 * obj.distance
            owner[m] = i
        masks = [owner == i for i in range(len(objects))]
        img -= 0.5
        return Scene(img, objects, masks, depth)

    def scene(self, n_objects: int = 1, label: int | None = None) -> Scene:
        if n_objects == 1:
            return self.render([self.sample_object(label)])
        objs = []
        # spread objects over distinct quadrants so none is fully hidden
        quads = self.rng.permutation(4)[:n_objects]
        for q in quads:
            o = self.sample_object()
            cx = (0.27 if q % 2 == 0 else 0.73) + self.rng.uniform(-0.05, 0.05)
            cy = (0.27 if q // 2 == 0 else 0.73) + self.rng.uniform(-0.05, 0.05)
            objs.append(ObjectLatent(o.shape, o.color, float(cx), float(cy), o.distance))
        return self.render(objs)


def caption_tokens(objects: list[ObjectLatent], length: int = CAPTION_LEN) -> np.ndarray:
    """"a near red circle at top left"; extra objects appended with "and"."""
    words = []
    for i, o in enumerate(objects):
        if i:
            words.append("and")
        words += ["a", "near" if o.distance < 0.5 else "far", COLORS[o.color], SHAPES[o.shape], "at",
                  "top" if o.cy < 0.5 else "bottom", "left" if o.cx < 0.5 else "right"]
    toks = [TOKEN["<bos>"]] + [TOKEN[w] for w in words] + [TOKEN["<eos>"]]
    toks = toks[:length] + [PAD] * max(0, length - len(toks))
    return np.asarray(toks, dtype=np.int64)


def decode_caption(tokens) -> list[str]:
    return [VOCAB[t] for t in tokens if t not in (PAD, TOKEN["<bos>"], TOKEN["<eos>"])]


@dataclass
class MultimodalCorpus:
    images: np.ndarray     # (N, 3, H, W)
    captions: np.ndarray   # (N, L) int64
    labels: np.ndarray     # (N,) latent class


def gen_multimodal(seed: int, n: int, size: int = 64) -> MultimodalCorpus:
    if n < 1:
        raise ValueError("n must be >= 1")
    world = SyntheticWorld(seed, size)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    caps = np.empty((n, CAPTION_LEN), dtype=np.int64)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        sc = world.scene(1)
        images[i] = sc.image
        caps[i] = caption_tokens(sc.objects)
        labels[i] = sc.objects[0].label
    return MultimodalCorpus(images, caps, labels)


def mask_tokens(captions: np.ndarray, rng: np.random.Generator, rate: float = 0.15):
    """BERT-style masking of content tokens. Returns (masked, targets) with -1 where unmasked."""
    content = captions >= len(SPECIALS)
    pick = (rng.random(captions.shape) < rate) & content
    # guarantee one masked position per row when possible
    for i in np.nonzero(~pick.any(axis=1) & content.any(axis=1))[0]:
        pick[i, rng.choice(np.nonzero(content[i])[0])] = True
    masked = np.where(pick, MASK, captions)
    targets = np.where(pick, captions, -1)
    return masked, targets


# -- task suite -------------------------------------------------------------------------------

@dataclass
class TaskData:
    name: str
    task_type: str              # classification | patchwise | pixelwise | depth
    images: np.ndarray
    num_classes: int
    labels: np.ndarray | None = None          # classification targets
    boxes: list[np.ndarray] = field(default_factory=list)
    box_labels: list[np.ndarray] = field(default_factory=list)
    label_maps: np.ndarray | None = None
    depth: np.ndarray | None = None
    train_idx: np.ndarray | None = None
    val_idx: np.ndarray | None = None

    def __len__(self):
        return len(self.images)

    def subset(self, idx, name: str | None = None) -> "TaskData":
        idx = np.asarray(idx, dtype=np.int64)
        pick = lambda a: None if a is None else a[idx]
        return TaskData(name or self.name, self.task_type, self.images[idx], self.num_classes, pick(self.labels),
                        [self.boxes[i] for i in idx] if self.boxes else [],
                        [self.box_labels[i] for i in idx] if self.box_labels else [],
                        pick(self.label_maps), pick(self.depth))

    def train(self) -> "TaskData":
        return self.subset(self.train_idx, self.name + "/train")

    def val(self) -> "TaskData":
        return self.subset(self.val_idx, self.name + "/val")


def _split(n: int, rng: np.random.Generator, val_frac: float):
    perm = rng.permutation(n)
    nv = max(1, int(round(n * val_frac)))
    return np.sort(perm[nv:]), np.sort(perm[:nv])


def gen_task_suite(seed: int, n: int = 512, size: int = 64, val_frac: float = 0.25,
                   tasks=("classification", "patchwise", "pixelwise", "depth")) -> dict[str, TaskData]:
    """One dataset per task type drawn from the same latent world.

    The depth set is for held-out evaluation only; upstream stages never see it.
    """
    out = {}
    for t_i, task in enumerate(tasks):
        world = SyntheticWorld(seed * 1009 + t_i, size)
        n_obj = 2 if task in ("patchwise", "pixelwise") else 1
        scenes = []
        for i in range(n):
            # class-balanced labels for the single-object sets
            scenes.append(world.scene(n_obj, label=i % NUM_CLASSES if n_obj == 1 else None))
        images = np.stack([s.image for s in scenes])
        td = TaskData(f"syn-{task}", task, images, NUM_CLASSES)
        if task == "classification":
            td.labels = np.asarray([s.objects[0].label for s in scenes], dtype=np.int64)
        if task == "patchwise":
            td.boxes = [s.boxes() for s in scenes]
            td.box_labels = [np.asarray([o.label for o in s.objects], dtype=np.int64) for s in scenes]
        if task in ("patchwise", "pixelwise"):
            td.label_maps = np.stack([s.label_map() for s in scenes])
        if task == "depth":
            td.depth = np.stack([s.depth for s in scenes])
        td.train_idx, td.val_idx = _split(n, world.rng, val_frac)
        out[task] = td
    return out


# -- CIFAR-10 binary layout ---------------------------------------------------------------

CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class CifarSet:
    images: np.ndarray   # (N, 3, 32, 32) uint8
    labels: np.ndarray   # (N,) int64

    def encode(self) -> bytes:
        recs = np.concatenate([self.labels.astype(np.uint8)[:, None], self.images.reshape(len(self.labels), -1)],
                              axis=1)
        return recs.tobytes()


def parse_cifar_bytes(raw: bytes) -> CifarSet:
    if len(raw) % CIFAR_RECORD:
        raise ValueError(f"byte length {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record")
    recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise ValueError(f"label {labels.max()} out of range for 10 classes")
    return CifarSet(recs[:, 1:].reshape(-1, 3, 32, 32).copy(), labels)


def load_cifar_binary(path) -> dict[str, CifarSet]:
    """Read a cifar-10-batches-bin directory (or one batch file) into train/test sets."""
    path = os.fspath(path)
    if os.path.isfile(path):
        with open(path, "rb") as fh:
            return {"train": parse_cifar_bytes(fh.read())}
    out = {}
    train_files = [os.path.join(path, f"data_batch_{i}.bin") for i in range(1, 6)]
    parts = []
    for f in train_files:
        if os.path.exists(f):
            with open(f, "rb") as fh:
                parts.append(parse_cifar_bytes(fh.read()))
    if parts:
        out["train"] = CifarSet(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))
    test = os.path.join(path, "test_batch.bin")
    if os.path.exists(test):
        with open(test, "rb") as fh:
            out["test"] = parse_cifar_bytes(fh.read())
    if not out:
        raise FileNotFoundError(f"no CIFAR-10 binary batches under {path}")
    return out


def cifar_shaped_labels(per_class: int = 5000, classes: int = 10, seed: int = 0) -> np.ndarray:
    """Label vector with the CIFAR-10 train layout, shuffled."""
    return np.random.default_rng(seed).permutation(np.repeat(np.arange(classes), per_class))


# -- augmentation -----------------------------------------------------------------------------

def augment(images: np.ndarray, rng: np.random.Generator, max_shift: int = 4, jitter: float = 0.1) -> np.ndarray:
    """Random translation (edge padding) plus brightness jitter and pixel noise."""
    n, c, h, w = images.shape
    pad = np.pad(images, ((0, 0), (0, 0), (max_shift, max_shift), (max_shift, max_shift)), mode="edge")
    out = np.empty_like(images)
    shifts = rng.integers(0, 2 * max_shift + 1, size=(n, 2))
    for i, (dy, dx) in enumerate(shifts):
        out[i] = pad[i, :, dy:dy + h, dx:dx + w]
    out *= (1 + rng.uniform(-jitter, jitter, size=(n, 1, 1, 1))).astype(images.dtype)
    out += rng.normal(0, 0.02, size=out.shape).astype(images.dtype)
    return out
