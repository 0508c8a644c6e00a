"""Deterministic moving-sprites dataset with exact ground truth.

Sprites are hard-edged shapes on a static tiled background. Each class has a
unique color, moving sprites travel linearly and bounce off the playfield
edges, and optional static HUD objects sit in a top margin band and are
labelled irrelevant. Every sequence draws from its own random stream derived
from the master seed, so sequences can be generated independently.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .core import BoundingBox, Frame, FrameSequence
from .pnm import PNMError, decode_ppm, encode_ppm, sha256

SHAPES = ("rectangle", "disc", "cross")
DATASET_FORMAT = "moc-sprites"
DATASET_VERSION = 1
_DECIMALS = 6


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SpriteClass:
    """Template for one sprite class; ``size`` is the normalized width."""

    class_id: int
    shape: str
    color: tuple[int, int, int]
    size: float
    aspect: float = 1.0
    moving: bool = True
    speed: tuple[float, float] = (0.02, 0.04)
    count: int = 1

    @property
    def extent(self) -> tuple[float, float]:
        return (self.size, self.size * self.aspect)


@dataclass(frozen=True)
class HudObject:
    class_id: int
    shape: str
    color: tuple[int, int, int]
    size: float
    aspect: float
    center: tuple[float, float]


@dataclass(frozen=True)
class SpriteSpec:
    """One sprite instance in a sequence."""

    class_id: int
    shape: str
    color: tuple[int, int, int]
    size: tuple[float, float]
    position: tuple[float, float]
    velocity: tuple[float, float]
    moving: bool

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if min(self.size) <= 0:
            raise ValueError("sprite size must be positive")
        if (math.hypot(*self.velocity) > 0) != self.moving:
            raise ValueError("velocity must be nonzero exactly when the sprite moves")


@dataclass(frozen=True)
class GroundTruthObject:
    box: BoundingBox
    class_id: int
    relevant: bool = True


DEFAULT_CLASSES = (
    SpriteClass(0, "disc", (230, 50, 50), 0.055),
    SpriteClass(1, "rectangle", (50, 230, 80), 0.03125, aspect=2.0),
    SpriteClass(2, "cross", (235, 220, 40), 0.0625),
    SpriteClass(3, "disc", (70, 120, 255), 0.0625),
    SpriteClass(4, "rectangle", (250, 70, 220), 0.047),
)
DEFAULT_HUD = (
    HudObject(5, "rectangle", (220, 220, 220), 0.12, 0.4, (0.15, 0.05)),
    HudObject(6, "disc", (60, 220, 230), 0.05, 1.0, (0.85, 0.05)),
)


@dataclass(frozen=True)
class GeneratorConfig:
    height: int = 128
    width: int = 128
    seq_len: int = 4
    n_train: int = 256
    n_test: int = 64
    classes: tuple[SpriteClass, ...] = DEFAULT_CLASSES
    hud: tuple[HudObject, ...] = DEFAULT_HUD
    hud_margin: float = 0.1
    background: tuple[tuple[int, int, int], ...] = ((18, 18, 30), (36, 32, 48))
    tile: int = 16
    allow_overlap: bool = False
    max_tries: int = 200

    def __post_init__(self):
        # accept plain lists/dicts (e.g. from JSON) for nested fields
        conv = lambda cls, items: tuple(
            cls(**_tuplify(x)) if isinstance(x, Mapping) else x for x in items
        )
        object.__setattr__(self, "classes", conv(SpriteClass, self.classes))
        object.__setattr__(self, "hud", conv(HudObject, self.hud))
        object.__setattr__(self, "background", tuple(tuple(c) for c in self.background))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self):
        if min(self.height, self.width, self.seq_len, self.tile) < 1 or min(self.n_train, self.n_test) < 0:
            raise ValueError("frame size, seq_len and tile must be positive and sequence counts nonnegative")
        if len(self.classes) < 2:
            raise ValueError("at least two sprite classes are required")
        if not any(c.moving for c in self.classes):
            raise ValueError("at least one sprite class must move")
        playfield_h = 1.0 - self.hud_margin
        colors = [c.color for c in self.classes] + [h.color for h in self.hud]
        if len(set(colors)) != len(colors):
            raise ValueError("sprite colors must be pairwise distinct")
        if set(colors) & set(self.background):
            raise ValueError("sprite colors must differ from the background palette")
        for c in self.classes:
            if c.shape not in SHAPES:
                raise ValueError(f"class {c.class_id}: unknown shape {c.shape!r}")
            w, h = c.extent
            if c.size <= 0 or w > 1.0 or h > playfield_h:
                raise ValueError(f"class {c.class_id}: sprite size exceeds the frame")
        for o in self.hud:
            if o.size * o.aspect > self.hud_margin:
                raise ValueError(f"HUD object {o.class_id} does not fit in the margin band")


def _tuplify(d: Mapping) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


@dataclass(frozen=True, eq=False)
class LabeledSequence:
    """Frames (T, h, w, 3) uint8 plus per-frame labels.

    Labels of every frame list objects in spawn order (HUD objects first), so
    an object's position in the list identifies it across frames.
    """

    pixels: np.ndarray
    labels: tuple[tuple[GroundTruthObject, ...], ...]
    seed: int

    def __post_init__(self):
        if len(self.labels) != len(self.pixels):
            raise ValueError("one label list per frame is required")
        self.pixels.setflags(write=False)

    @property
    def sequence(self) -> FrameSequence:
        return FrameSequence(tuple(Frame.from_uint8(p) for p in self.pixels))

    def __eq__(self, other):
        return (
            isinstance(other, LabeledSequence)
            and self.seed == other.seed
            and np.array_equal(self.pixels, other.pixels)
            and self.labels == other.labels
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    config: GeneratorConfig
    seed: int
    train: tuple[LabeledSequence, ...]
    test: tuple[LabeledSequence, ...]

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.seed == other.seed
            and self.config == other.config
            and self.train == other.train
            and self.test == other.test
        )

    def __len__(self):
        return len(self.train) + len(self.test)

    def split(self, name: str) -> tuple[LabeledSequence, ...]:
        return {"train": self.train, "test": self.test}[name]


def background_image(config: GeneratorConfig) -> np.ndarray:
    rows = np.arange(config.height)[:, None] // config.tile
    cols = np.arange(config.width)[None, :] // config.tile
    palette = np.array(config.background, dtype=np.uint8)
    return palette[(rows + cols) % len(palette)]


def _shape_mask(shape, center, size, height, width) -> np.ndarray:
    cx, cy = center
    hw, hh = size[0] / 2.0, size[1] / 2.0
    xs = (np.arange(width) + 0.5) / width
    ys = (np.arange(height) + 0.5) / height
    dx = xs[None, :] - cx
    dy = ys[:, None] - cy
    inside = (np.abs(dx) <= hw) & (np.abs(dy) <= hh)
    if shape == "disc":
        return (dx / hw) ** 2 + (dy / hh) ** 2 <= 1.0
    if shape == "cross":
        return inside & ((np.abs(dx) <= hw / 3.0) | (np.abs(dy) <= hh / 3.0))
    return inside


def _box(center, size) -> BoundingBox:
    cx, cy = center
    r = lambda v: round(min(1.0, max(0.0, v)), _DECIMALS)
    return BoundingBox(r(cx - size[0] / 2), r(cy - size[1] / 2), r(cx + size[0] / 2), r(cy + size[1] / 2))


def _bounce(p, v, lo, hi):
    """Advance one coordinate by one frame, reflecting off [lo, hi]."""
    p = p + v
    for _ in range(8):
        if p < lo:
            p, v = 2 * lo - p, -v
        elif p > hi:
            p, v = 2 * hi - p, -v
        else:
            break
    return p, v


def trajectories(sprites: Sequence[SpriteSpec], steps: int, y_floor: float = 0.0) -> list[list[tuple[float, float]]]:
    """Center positions of every sprite over ``steps`` frames."""
    out = []
    for s in sprites:
        (x, y), (vx, vy) = s.position, s.velocity
        lo_x, hi_x = s.size[0] / 2, 1.0 - s.size[0] / 2
        lo_y, hi_y = y_floor + s.size[1] / 2, 1.0 - s.size[1] / 2
        path = [(x, y)]
        for _ in range(steps - 1):
            x, vx = _bounce(x, vx, lo_x, hi_x)
            y, vy = _bounce(y, vy, lo_y, hi_y)
            path.append((x, y))
        out.append(path)
    return out


def render_sequence(
    sprites: Sequence[SpriteSpec],
    config: GeneratorConfig,
    seed: int = 0,
    hud: Iterable[HudObject] | None = None,
) -> LabeledSequence:
    """Render sprites (drawn in list order, later ones occlude) over a sequence."""
    hud = tuple(config.hud if hud is None else hud)
    bg = background_image(config)
    h, w = config.height, config.width
    y_floor = config.hud_margin if hud else 0.0
    paths = trajectories(sprites, config.seq_len, y_floor)
    pixels = np.empty((config.seq_len, h, w, 3), dtype=np.uint8)
    labels = []
    for t in range(config.seq_len):
        img = bg.copy()
        objs = []
        for o in hud:
            size = (o.size, o.size * o.aspect)
            img[_shape_mask(o.shape, o.center, size, h, w)] = o.color
            objs.append(GroundTruthObject(_box(o.center, size), o.class_id, relevant=False))
        for s, path in zip(sprites, paths):
            img[_shape_mask(s.shape, path[t], s.size, h, w)] = s.color
            objs.append(GroundTruthObject(_box(path[t], s.size), s.class_id, relevant=True))
        pixels[t] = img
        labels.append(tuple(objs))
    return LabeledSequence(pixels, tuple(labels), seed)


def _sample_sprites(config: GeneratorConfig, rng: np.random.Generator) -> list[SpriteSpec]:
    y_floor = config.hud_margin if config.hud else 0.0
    gap = 1.5 / min(config.height, config.width)
    for _ in range(config.max_tries):
        sprites = []
        for c in config.classes:
            for _ in range(c.count):
                w, h = c.extent
                x = rng.uniform(w / 2, 1.0 - w / 2)
                y = rng.uniform(y_floor + h / 2, 1.0 - h / 2)
                if c.moving:
                    speed = rng.uniform(*c.speed)
                    angle = rng.uniform(0.0, 2.0 * math.pi)
                    v = (speed * math.cos(angle), speed * math.sin(angle))
                else:
                    v = (0.0, 0.0)
                sprites.append(SpriteSpec(c.class_id, c.shape, c.color, (w, h), (x, y), v, c.moving))
        if config.allow_overlap or not _overlaps(sprites, config.seq_len, y_floor, gap):
            return sprites
    raise RuntimeError("could not place non-overlapping sprites; lower the sprite count or allow overlap")


def _overlaps(sprites, steps, y_floor, gap) -> bool:
    paths = trajectories(sprites, steps, y_floor)
    for t in range(steps):
        for i in range(len(sprites)):
            for j in range(i + 1, len(sprites)):
                (xi, yi), (xj, yj) = paths[i][t], paths[j][t]
                wi, hi = sprites[i].size
                wj, hj = sprites[j].size
                if abs(xi - xj) < (wi + wj) / 2 + gap and abs(yi - yj) < (hi + hj) / 2 + gap:
                    return True
    return False


def sequence_seed(seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([seed, {"train": 0, "test": 1}[split], index])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def generate_sequence(config: GeneratorConfig, seed: int) -> LabeledSequence:
    rng = np.random.default_rng(seed)
    return render_sequence(_sample_sprites(config, rng), config, seed)


def generate_dataset(config: GeneratorConfig = GeneratorConfig(), seed: int = 0) -> Dataset:
    config.validate()
    splits = {}
    for split, n in (("train", config.n_train), ("test", config.n_test)):
        splits[split] = tuple(
            generate_sequence(config, sequence_seed(seed, split, k)) for k in range(n)
        )
    return Dataset(config, seed, splits["train"], splits["test"])


# --- color-keyed labelling -------------------------------------------------


@dataclass(frozen=True)
class ColorKey:
    """How to recognise one class by color; size bounds are in pixels."""

    class_id: int
    color: tuple[int, int, int]
    min_size: tuple[int, int] = (1, 1)
    max_size: tuple[int, int] = (10**9, 10**9)
    y_range: tuple[float, float] = (0.0, 1.0)
    relevant: bool = True

    def accepts(self, box: BoundingBox, px_w: int, px_h: int) -> bool:
        cy = box.center[1]
        return (
            self.min_size[0] <= px_w <= self.max_size[0]
            and self.min_size[1] <= px_h <= self.max_size[1]
            and self.y_range[0] <= cy <= self.y_range[1]
        )


def palette_from_config(config: GeneratorConfig, slack: int = 2) -> list[ColorKey]:
    keys = []
    for c in config.classes:
        w, h = round(c.extent[0] * config.width), round(c.extent[1] * config.height)
        keys.append(ColorKey(c.class_id, c.color, (max(1, w - slack), max(1, h - slack)), (w + slack, h + slack)))
    for o in config.hud:
        keys.append(ColorKey(o.class_id, o.color, relevant=False))
    return keys


_EIGHT = np.ones((3, 3), dtype=bool)


def color_label(frame, palette, size_filters: Mapping[int, tuple] | None = None) -> list[GroundTruthObject]:
    """Label objects by connected components of exactly-matching color.

    ``palette`` is a sequence of :class:`ColorKey` or a plain mapping
    ``class_id -> color``; ``size_filters`` optionally maps class ids to
    ``(min_size, max_size)`` pixel bounds for mapping palettes. When several
    keys share a color, each component goes to the first key whose size and
    position bounds accept it.
    """
    if not palette:
        raise ValueError("palette must not be empty")
    if isinstance(palette, Mapping):
        size_filters = size_filters or {}
        keys = []
        for cid, color in palette.items():
            lo, hi = size_filters.get(cid, ((1, 1), (10**9, 10**9)))
            keys.append(ColorKey(cid, tuple(color), tuple(lo), tuple(hi)))
    else:
        keys = list(palette)
    data = frame.data if isinstance(frame, Frame) else np.asarray(frame)
    pixels = data if data.dtype == np.uint8 else np.rint(data * 255.0).astype(np.uint8)
    h, w = pixels.shape[:2]
    by_color: dict[tuple, list[ColorKey]] = {}
    for k in keys:
        by_color.setdefault(tuple(k.color), []).append(k)
    found = []
    for color, candidates in by_color.items():
        hit = np.all(pixels == np.array(color, dtype=np.uint8), axis=-1)
        labels, n = ndimage.label(hit, structure=_EIGHT)
        for sl in ndimage.find_objects(labels):
            rows, cols = sl
            box = BoundingBox(cols.start / w, rows.start / h, cols.stop / w, rows.stop / h)
            px_w, px_h = cols.stop - cols.start, rows.stop - rows.start
            for k in candidates:
                if k.accepts(box, px_w, px_h):
                    found.append(GroundTruthObject(box, k.class_id, k.relevant))
                    break
    found.sort(key=lambda o: (o.box.y_min, o.box.x_min, o.class_id))
    return found


# --- relevance -------------------------------------------------------------


@dataclass(frozen=True)
class YBand:
    """Conjunction of bounds on a box's ``y_min`` (written ``y``) and ``y_max``."""

    y_above: float | None = None
    y_below: float | None = None
    y_max_below: float | None = None

    def __call__(self, box: BoundingBox) -> bool:
        if self.y_above is not None and not self.y_above < box.y_min:
            return False
        if self.y_below is not None and not box.y_min < self.y_below:
            return False
        if self.y_max_below is not None and not box.y_max < self.y_max_below:
            return False
        return True


@dataclass(frozen=True)
class RelevanceCondition:
    """Disjunction of y-bands, optionally overridden per class."""

    bands: tuple[YBand, ...] = (YBand(),)
    per_class: Mapping[int, tuple[YBand, ...]] = field(default_factory=dict)

    def __call__(self, obj: GroundTruthObject) -> bool:
        bands = self.per_class.get(obj.class_id, self.bands)
        return any(b(obj.box) for b in bands)


def relevance_filter(
    objects: Sequence[GroundTruthObject],
    condition: Callable[[GroundTruthObject], bool],
) -> list[GroundTruthObject]:
    """Mark objects failing ``condition`` as irrelevant; others keep their flag."""
    return [o if condition(o) else dataclasses.replace(o, relevant=False) for o in objects]


def default_relevance(config: GeneratorConfig) -> RelevanceCondition:
    return RelevanceCondition((YBand(y_above=config.hud_margin),))


# --- serialization -----------------------------------------------------------


def _labels_jsonl(labels) -> bytes:
    lines = []
    for t, objs in enumerate(labels):
        rec = {
            "frame": t,
            "objects": [
                {
                    "x_min": round(o.box.x_min, _DECIMALS),
                    "y_min": round(o.box.y_min, _DECIMALS),
                    "x_max": round(o.box.x_max, _DECIMALS),
                    "y_max": round(o.box.y_max, _DECIMALS),
                    "class": o.class_id,
                    "relevant": o.relevant,
                }
                for o in objs
            ],
        }
        lines.append(json.dumps(rec))
    return ("\n".join(lines) + "\n").encode() if lines else b""


def _parse_labels(data: bytes, path, n_frames: int):
    labels = []
    lines = data.decode().splitlines()
    for lineno, line in enumerate(lines, start=1):
        try:
            rec = json.loads(line)
            if rec["frame"] != lineno - 1:
                raise ValueError(f"expected frame {lineno - 1}, got {rec['frame']}")
            objs = tuple(
                GroundTruthObject(
                    BoundingBox(o["x_min"], o["y_min"], o["x_max"], o["y_max"]),
                    int(o["class"]),
                    bool(o["relevant"]),
                )
                for o in rec["objects"]
            )
        except (ValueError, KeyError, TypeError) as e:
            raise DatasetError(f"{path}:{lineno}: malformed label record ({e})") from e
        labels.append(objs)
    if len(labels) != n_frames:
        raise DatasetError(f"{path}:{len(lines) + 1}: expected {n_frames} frames, found {len(labels)}")
    return tuple(labels)


def save_dataset(dataset: Dataset, path) -> Path:
    """Write the dataset directory: manifest plus ``seq_<k>/`` folders."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    files, seeds, splits = {}, [], {"train": [], "test": []}
    k = 0
    for split in ("train", "test"):
        for seq in dataset.split(split):
            d = root / f"seq_{k}"
            d.mkdir(exist_ok=True)
            for t, px in enumerate(seq.pixels):
                blob = encode_ppm(px)
                (d / f"frame_{t}.ppm").write_bytes(blob)
                files[f"seq_{k}/frame_{t}.ppm"] = sha256(blob)
            blob = _labels_jsonl(seq.labels)
            (d / "labels.jsonl").write_bytes(blob)
            files[f"seq_{k}/labels.jsonl"] = sha256(blob)
            seeds.append(seq.seed)
            splits[split].append(k)
            k += 1
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "seed": dataset.seed,
        "config": dataset.config.to_dict(),
        "counts": {"train": len(dataset.train), "test": len(dataset.test)},
        "splits": splits,
        "sequence_seeds": seeds,
        "files": files,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def load_dataset(path, verify: bool = True) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError as e:
        raise DatasetError(f"{mpath}: no dataset manifest") from e
    except json.JSONDecodeError as e:
        raise DatasetError(f"{mpath}:{e.lineno}: malformed manifest ({e.msg})") from e
    if manifest.get("format") != DATASET_FORMAT:
        raise DatasetError(f"{mpath}: not a {DATASET_FORMAT} dataset")
    config = GeneratorConfig(**_tuplify(manifest["config"]))
    files = manifest["files"]
    split_seqs = {}
    for split in ("train", "test"):
        seqs = []
        for k in manifest["splits"][split]:
            frames = []
            for t in range(config.seq_len):
                rel = f"seq_{k}/frame_{t}.ppm"
                blob = _read(root / rel)
                try:
                    frames.append(decode_ppm(blob, root / rel))
                except PNMError as e:
                    raise DatasetError(str(e)) from e
                _verify(verify, files, rel, blob, root)
            rel = f"seq_{k}/labels.jsonl"
            blob = _read(root / rel)
            labels = _parse_labels(blob, root / rel, config.seq_len)
            _verify(verify, files, rel, blob, root)
            seqs.append(LabeledSequence(np.stack(frames), labels, manifest["sequence_seeds"][k]))
        split_seqs[split] = tuple(seqs)
    return Dataset(config, manifest["seed"], split_seqs["train"], split_seqs["test"])


def _read(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as e:
        raise DatasetError(f"{path}: {e.strerror}") from e


def _verify(verify, files, rel, blob, root):
    if verify and files.get(rel) != sha256(blob):
        raise DatasetError(f"{root / rel}: checksum mismatch")
