"""Procedural scenes with uniquely-referring attribute expressions.

A scene is a dark canvas with 2..5 colored shapes; each (scene, expression)
pair is built so the expression's token set picks out exactly one object.
Ground-truth boxes and masks ride along for detector pretraining, the
pseudo-mask oracle and evaluation; the weak training loop never reads them
as grounding supervision.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

FORMAT_VERSION = "wgl1"

COLOR_RGB = {
    "red": (0.90, 0.12, 0.12),
    "green": (0.12, 0.85, 0.12),
    "blue": (0.15, 0.20, 0.90),
    "yellow": (0.92, 0.90, 0.12),
    "magenta": (0.88, 0.15, 0.85),
    "cyan": (0.12, 0.85, 0.88),
    "white": (0.95, 0.95, 0.95),
    "gray": (0.55, 0.55, 0.55),
}
COLORS = tuple(COLOR_RGB)
SHAPES = ("rectangle", "ellipse", "triangle")
SIZES = ("small", "medium", "large")
POSITIONALS = ("leftmost", "rightmost", "topmost", "bottommost", "center")

BACKGROUND = (0.10, 0.10, 0.10)

# mask pixel count as a fraction of image area, per size class
SIZE_BANDS = {"small": (0.0, 0.06), "medium": (0.06, 0.15), "large": (0.15, 1.0)}
# sampling targets sit inside the bands with margin so rasterization noise
# cannot push a shape across a band edge
SIZE_TARGETS = {"small": (0.024, 0.052), "medium": (0.072, 0.142), "large": (0.158, 0.235)}

MAX_SCENE_ATTEMPTS = 1000


class GenerationError(RuntimeError):
    pass


class IntegrityError(RuntimeError):
    """Expression does not resolve to exactly one object (dataset corruption)."""


class DatasetParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class DatasetVersionError(ValueError):
    pass


class Vocabulary:
    """Fixed token table: colors, shapes, sizes, then positional words."""

    def __init__(self):
        self.tokens: tuple[str, ...] = COLORS + SHAPES + SIZES + POSITIONALS
        self.index: dict[str, int] = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def ids(self, words) -> list[int]:
        return [self.index[w] for w in words]

    def words(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def to_table(self) -> dict[str, int]:
        return dict(self.index)


VOCAB = Vocabulary()


@dataclass
class ObjectRecord:
    shape_kind: str
    color: str
    size_class: str
    gt_box: tuple[int, int, int, int]  # (x, y, w, h), top-left origin
    gt_mask: np.ndarray  # (H, W) uint8

    def center(self) -> tuple[float, float]:
        x, y, w, h = self.gt_box
        return (x + w / 2.0, y + h / 2.0)


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    objects: list[ObjectRecord]
    seed: int

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass
class Expression:
    tokens: list[int]
    target_index: int

    def words(self) -> list[str]:
        return VOCAB.words(self.tokens)


@dataclass
class Pair:
    scene: Scene
    expression: Expression


@dataclass
class Dataset:
    train: list[Pair]
    val: list[Pair]
    test: list[Pair]
    seed: int
    config: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Pair]:
        if name not in ("train", "val", "test"):
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    def counts(self) -> dict[str, int]:
        return {"train": len(self.train), "val": len(self.val), "test": len(self.test)}


# ---------------------------------------------------------------------------
# shape rasterization (pixel centers, hard binary, no anti-aliasing)


def _raster_rectangle(h_img, w_img, rng, area):
    aspect = rng.uniform(0.5, 2.0)
    w = max(3, int(round(np.sqrt(area * aspect))))
    h = max(3, int(round(area / w)))
    if w >= w_img - 2 or h >= h_img - 2:
        return None
    x0 = int(rng.integers(1, w_img - w))
    y0 = int(rng.integers(1, h_img - h))
    mask = np.zeros((h_img, w_img), dtype=np.uint8)
    mask[y0:y0 + h, x0:x0 + w] = 1
    return mask


def _raster_ellipse(h_img, w_img, rng, area):
    aspect = rng.uniform(0.6, 1.7)
    rx = np.sqrt(area * aspect / np.pi)
    ry = area / (np.pi * rx)
    if rx < 2.0 or ry < 2.0 or 2 * rx >= w_img - 3 or 2 * ry >= h_img - 3:
        return None
    cx = rng.uniform(1.5 + rx, w_img - 1.5 - rx)
    cy = rng.uniform(1.5 + ry, h_img - 1.5 - ry)
    yy, xx = np.mgrid[0:h_img, 0:w_img]
    dist = ((xx + 0.5 - cx) / rx) ** 2 + ((yy + 0.5 - cy) / ry) ** 2
    return (dist <= 1.0).astype(np.uint8)


def _raster_triangle(h_img, w_img, rng, area):
    aspect = rng.uniform(0.8, 1.6)
    base = np.sqrt(2.0 * area * aspect)
    height = 2.0 * area / base
    if base < 5.0 or height < 5.0 or base >= w_img - 3 or height >= h_img - 3:
        return None
    cx = rng.uniform(1.5 + base / 2, w_img - 1.5 - base / 2)
    y0 = rng.uniform(1.5, h_img - 1.5 - height)
    apex_up = bool(rng.integers(2))
    if apex_up:
        ax, ay = cx, y0
        bx, by = cx - base / 2, y0 + height
        cx2, cy2 = cx + base / 2, y0 + height
    else:
        ax, ay = cx, y0 + height
        bx, by = cx - base / 2, y0
        cx2, cy2 = cx + base / 2, y0
    yy, xx = np.mgrid[0:h_img, 0:w_img]
    px, py = xx + 0.5, yy + 0.5

    def half_plane(x1, y1, x2, y2):
        return (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)

    d1 = half_plane(ax, ay, bx, by)
    d2 = half_plane(bx, by, cx2, cy2)
    d3 = half_plane(cx2, cy2, ax, ay)
    inside = ((d1 <= 0) & (d2 <= 0) & (d3 <= 0)) | ((d1 >= 0) & (d2 >= 0) & (d3 >= 0))
    return inside.astype(np.uint8)


_RASTER = {"rectangle": _raster_rectangle, "ellipse": _raster_ellipse,
           "triangle": _raster_triangle}


def tight_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return (0, 0, 0, 0)
    return (int(cols[0]), int(rows[0]),
            int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))


def _size_ok(mask, size_class, image_area) -> bool:
    lo, hi = SIZE_BANDS[size_class]
    frac = mask.sum() / image_area
    if size_class == "small":
        return frac < hi
    if size_class == "medium":
        return lo <= frac <= hi
    return frac > lo


# ---------------------------------------------------------------------------
# expression matching


def match_expression(token_ids, objects, image_size) -> list[int]:
    """Indices of the objects matched by a token set.

    Attribute tokens filter objects; each positional token then selects one
    object of the filtered subset (argmin/argmax of box centers, ties broken
    by lower object index). A match must survive every positional selector.
    """
    words = VOCAB.words(token_ids)
    attrs = [w for w in words if w not in POSITIONALS]
    positionals = [w for w in words if w in POSITIONALS]

    def has_attrs(o: ObjectRecord) -> bool:
        return all(w in (o.color, o.shape_kind, o.size_class) for w in attrs)

    subset = [i for i, o in enumerate(objects) if has_attrs(o)]
    if not subset:
        return []
    h, w = image_size
    centers = {i: objects[i].center() for i in subset}

    def select(word: str) -> int:
        if word == "leftmost":
            key = lambda i: (centers[i][0], i)
        elif word == "rightmost":
            key = lambda i: (-centers[i][0], i)
        elif word == "topmost":
            key = lambda i: (centers[i][1], i)
        elif word == "bottommost":
            key = lambda i: (-centers[i][1], i)
        else:  # center: nearest to the image midpoint
            key = lambda i: ((centers[i][0] - w / 2.0) ** 2
                             + (centers[i][1] - h / 2.0) ** 2, i)
        return min(subset, key=key)

    matched = subset
    for word in positionals:
        chosen = select(word)
        matched = [i for i in matched if i == chosen]
    return matched


def resolve(expression: Expression, scene: Scene) -> int:
    """Evaluation oracle: the unique object matching the expression tokens."""
    matched = match_expression(expression.tokens, scene.objects,
                               (scene.height, scene.width))
    if len(matched) != 1:
        raise IntegrityError(
            f"expression {expression.words()} matched {len(matched)} objects")
    return matched[0]


# ---------------------------------------------------------------------------
# scene + expression construction


def _build_scene(rng: np.random.Generator, image_size: int,
                 min_objects: int, max_objects: int) -> Scene | None:
    h = w = image_size
    area = h * w
    n = int(rng.integers(min_objects, max_objects + 1))
    objects: list[ObjectRecord] = []
    attempts = 0
    while len(objects) < n:
        attempts += 1
        if attempts > MAX_SCENE_ATTEMPTS:
            return None
        shape = SHAPES[rng.integers(len(SHAPES))]
        color = COLORS[rng.integers(len(COLORS))]
        size = SIZES[rng.integers(len(SIZES))]
        lo, hi = SIZE_TARGETS[size]
        mask = _RASTER[shape](h, w, rng, rng.uniform(lo, hi) * area)
        if mask is None or not _size_ok(mask, size, area):
            continue
        if ndimage.label(mask)[1] != 1:
            continue
        count = int(mask.sum())
        ok = True
        for prev in objects:
            overlap = int((mask & prev.gt_mask).sum())
            if overlap > 0.2 * min(count, int(prev.gt_mask.sum())):
                ok = False
                break
        if not ok:
            continue
        objects.append(ObjectRecord(shape, color, size, tight_box(mask), mask))

    image = np.empty((h, w, 3), dtype=np.float32)
    image[:] = BACKGROUND
    for obj in objects:  # later objects draw over earlier ones
        image[obj.gt_mask.astype(bool)] = COLOR_RGB[obj.color]
    return Scene(image=image, objects=objects, seed=0)


def _build_expression(rng: np.random.Generator, scene: Scene) -> Expression | None:
    n = len(scene.objects)
    target = int(rng.integers(n))
    attr_subsets = [(), ("color",), ("shape",), ("size",),
                    ("color", "shape"), ("color", "size"), ("shape", "size"),
                    ("color", "shape", "size")]
    candidates = []
    for attrs in attr_subsets:
        for pos in (None,) + POSITIONALS:
            if not attrs and pos is None:
                continue
            candidates.append((attrs, pos))
    order = rng.permutation(len(candidates))
    obj = scene.objects[target]
    attr_word = {"color": obj.color, "shape": obj.shape_kind, "size": obj.size_class}
    for idx in order:
        attrs, pos = candidates[idx]
        words = [attr_word[a] for a in attrs]
        if pos is not None:
            words.append(pos)
        ids = VOCAB.ids(words)
        if match_expression(ids, scene.objects, (scene.height, scene.width)) == [target]:
            ids = [ids[i] for i in rng.permutation(len(ids))]
            return Expression(tokens=ids, target_index=target)
    return None


def _scene_seed(seed: int, split_id: int, index: int, attempt: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=(seed, split_id, index, attempt))


def make_pair(seed: int, split_id: int, index: int, image_size: int,
              min_objects: int, max_objects: int) -> Pair:
    for attempt in range(200):
        ss = _scene_seed(seed, split_id, index, attempt)
        rng = np.random.default_rng(ss)
        scene = _build_scene(rng, image_size, min_objects, max_objects)
        if scene is None:
            continue
        expression = _build_expression(rng, scene)
        if expression is None:
            continue
        scene.seed = int(ss.generate_state(1, np.uint64)[0])
        return Pair(scene=scene, expression=expression)
    raise GenerationError(
        f"could not build a valid scene for split {split_id} index {index}")


def generate(seed: int, count: int, *, image_size: int = 64, min_objects: int = 2,
             max_objects: int = 4, split_fractions=(0.8, 0.0, 0.2)) -> Dataset:
    """Deterministic train/val/test dataset of (scene, expression) pairs."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if image_size < 8:
        raise ValueError("image_size too small")
    if not np.isclose(sum(split_fractions), 1.0):
        raise ValueError(f"split_fractions must sum to 1, got {split_fractions}")
    n_train = int(round(split_fractions[0] * count))
    n_val = int(round(split_fractions[1] * count))
    n_test = count - n_train - n_val
    config = {"image_size": image_size, "min_objects": min_objects,
              "max_objects": max_objects, "count": count,
              "split_fractions": list(split_fractions)}
    splits = []
    for split_id, n in enumerate((n_train, n_val, n_test)):
        splits.append([make_pair(seed, split_id, i, image_size, min_objects,
                                 max_objects) for i in range(n)])
    return Dataset(train=splits[0], val=splits[1], test=splits[2],
                   seed=seed, config=config)


# ---------------------------------------------------------------------------
# serialization


def save(dataset: Dataset, path) -> None:
    """Write the binary container plus the vocabulary JSON sidecar."""
    path = Path(path)
    header = {
        "format_version": FORMAT_VERSION,
        "seed": dataset.seed,
        "config": dataset.config,
        "counts": dataset.counts(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    chunks = [struct.pack("<I", len(header_bytes)), header_bytes]
    for split in ("train", "val", "test"):
        for pair in dataset.split(split):
            sc, ex = pair.scene, pair.expression
            chunks.append(struct.pack("<QHH", sc.seed, sc.height, sc.width))
            chunks.append(sc.image.astype("<f4").tobytes())
            chunks.append(struct.pack("<B", len(sc.objects)))
            for obj in sc.objects:
                chunks.append(struct.pack(
                    "<BBB", SHAPES.index(obj.shape_kind), COLORS.index(obj.color),
                    SIZES.index(obj.size_class)))
                chunks.append(struct.pack("<4f", *obj.gt_box))
                chunks.append(np.packbits(obj.gt_mask.reshape(-1)).tobytes())
            chunks.append(struct.pack("<B", len(ex.tokens)))
            chunks.append(struct.pack(f"<{len(ex.tokens)}H", *ex.tokens))
            chunks.append(struct.pack("<B", ex.target_index))
    path.write_bytes(b"".join(chunks))
    sidecar = path.with_name(path.name + ".vocab.json")
    sidecar.write_text(json.dumps(VOCAB.to_table(), sort_keys=True, indent=1) + "\n")


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.blob):
            raise DatasetParseError(
                f"truncated file: needed {n} bytes", self.offset)
        out = self.blob[self.offset:self.offset + n]
        self.offset += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path) -> Dataset:
    """Read a dataset container; raises on truncation or version mismatch."""
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    (header_len,) = r.unpack("<I")
    try:
        header = json.loads(r.take(header_len))
    except json.JSONDecodeError as e:
        raise DatasetParseError(f"bad header JSON: {e.msg}", r.offset) from e
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetVersionError(
            f"unsupported dataset version {version!r}, expected {FORMAT_VERSION!r}")
    counts = header["counts"]
    splits: dict[str, list[Pair]] = {}
    for split in ("train", "val", "test"):
        pairs = []
        for _ in range(counts[split]):
            seed, h, w = r.unpack("<QHH")
            image = np.frombuffer(r.take(h * w * 3 * 4), dtype="<f4")
            image = image.reshape(h, w, 3).copy()
            (n_obj,) = r.unpack("<B")
            objects = []
            for _ in range(n_obj):
                si, ci, zi = r.unpack("<BBB")
                box = tuple(int(v) for v in r.unpack("<4f"))
                bits = np.frombuffer(r.take((h * w + 7) // 8), dtype=np.uint8)
                mask = np.unpackbits(bits, count=h * w).reshape(h, w)
                objects.append(ObjectRecord(SHAPES[si], COLORS[ci], SIZES[zi],
                                            box, mask))
            (n_tok,) = r.unpack("<B")
            tokens = list(r.unpack(f"<{n_tok}H"))
            (target,) = r.unpack("<B")
            scene = Scene(image=image, objects=objects, seed=seed)
            pairs.append(Pair(scene=scene, expression=Expression(tokens, target)))
        splits[split] = pairs
    if r.offset != len(blob):
        raise DatasetParseError("trailing bytes after last record", r.offset)
    return Dataset(train=splits["train"], val=splits["val"], test=splits["test"],
                   seed=header["seed"], config=header["config"])
