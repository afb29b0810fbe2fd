"""Synthetic multi-object shape scenes, mask geometry, and the RLE codec.

The class inventory is 24 = 4 shapes x 6 colors. Six fixed shape-color
combos are held out as novel classes; every shape and every color still
occurs among the 18 base classes, so novel recognition has to come from
compositional text knowledge rather than seen pixels.

Masks are binary uint8 grids of *visible* pixels: instances are drawn in
list order and later instances occlude earlier ones. Boxes are tight
half-open pixel boxes (x1, y1, x2, y2) of the visible mask.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .rng import CounterRng

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan")

# RGB anchors in [0,1]; per-instance jitter is applied on top.
COLOR_RGB = {
    "red": (0.88, 0.10, 0.12),
    "green": (0.10, 0.78, 0.16),
    "blue": (0.14, 0.22, 0.90),
    "yellow": (0.92, 0.86, 0.10),
    "magenta": (0.86, 0.12, 0.80),
    "cyan": (0.10, 0.80, 0.86),
}

# class_id = shape_index * 6 + color_index; name = "{color} {shape}"
CLASS_NAMES = tuple(f"{color} {shape}" for shape in SHAPES for color in COLORS)
NUM_CLASSES = len(CLASS_NAMES)

CAPTION_TEMPLATE = "a photo of a {color} {shape}"

# Fixed held-out combos; every shape and color keeps >=1 base entry.
NOVEL_CLASS_NAMES = (
    "cyan circle",
    "magenta circle",
    "red square",
    "yellow square",
    "green triangle",
    "blue cross",
)

FORMAT_VERSION = 1


def class_id_of(name: str) -> int:
    return CLASS_NAMES.index(name)


def class_caption(class_id: int) -> str:
    color, shape = CLASS_NAMES[class_id].split()
    return CAPTION_TEMPLATE.format(color=color, shape=shape)


def default_class_split() -> "ClassSplit":
    novel = tuple(sorted(class_id_of(n) for n in NOVEL_CLASS_NAMES))
    base = tuple(i for i in range(NUM_CLASSES) if i not in novel)
    return ClassSplit(base_ids=base, novel_ids=novel)


@dataclass(frozen=True)
class ClassSplit:
    base_ids: tuple[int, ...]
    novel_ids: tuple[int, ...]

    def validate(self) -> None:
        base, novel = set(self.base_ids), set(self.novel_ids)
        if base & novel:
            raise ValueError("base and novel class ids overlap")
        if base | novel != set(range(NUM_CLASSES)):
            raise ValueError("class split does not cover all classes")
        if len(novel) != 6:
            raise ValueError(f"expected 6 novel classes, got {len(novel)}")
        base_shapes = {CLASS_NAMES[i].split()[1] for i in base}
        base_colors = {CLASS_NAMES[i].split()[0] for i in base}
        if base_shapes != set(SHAPES) or base_colors != set(COLORS):
            raise ValueError("every shape and color must appear in a base class")

    def is_base(self, class_id: int) -> bool:
        return class_id in set(self.base_ids)

    def to_json(self) -> dict:
        return {"base": list(self.base_ids), "novel": list(self.novel_ids)}

    @staticmethod
    def from_json(d: dict) -> "ClassSplit":
        return ClassSplit(base_ids=tuple(d["base"]), novel_ids=tuple(d["novel"]))


@dataclass
class Instance:
    mask: np.ndarray  # H x W uint8 in {0,1}, visible pixels
    box: tuple[int, int, int, int]  # (x1, y1, x2, y2) half-open
    class_id: int
    area: int

    def validate(self, image_size: int, min_area: int = 100) -> None:
        if self.mask.shape != (image_size, image_size):
            raise ValueError("mask dims do not match scene dims")
        if self.area != int(self.mask.sum()):
            raise ValueError("area does not match mask pixel count")
        if self.area < min_area:
            raise ValueError(f"instance area {self.area} < min_area {min_area}")
        if mask_to_box(self.mask) != self.box:
            raise ValueError("box is not the tight bounding box of the mask")
        if not (0 <= self.class_id < NUM_CLASSES):
            raise ValueError(f"class_id {self.class_id} out of range")


@dataclass
class Scene:
    image: np.ndarray  # H x W x 3 float32 in [0,1], quantized to 8-bit levels
    instances: list[Instance]
    scene_id: str

    def validate(self, params: "GenParams") -> None:
        h, w, c = self.image.shape
        if h != w or c != 3:
            raise ValueError("image must be square HxWx3")
        if not (1 <= len(self.instances) <= params.max_objects):
            raise ValueError(f"scene has {len(self.instances)} instances")
        for inst in self.instances:
            inst.validate(h, params.min_area)
        boxes = [inst.box for inst in self.instances]
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                if box_iou(boxes[i], boxes[j]) > params.max_box_iou + 1e-9:
                    raise ValueError("pairwise box IoU above limit")


@dataclass
class GenParams:
    image_size: int = 128
    min_objects: int = 1
    max_objects: int = 5
    max_box_iou: float = 0.3
    min_area: int = 100
    max_attempts: int = 1000
    # multiplier range on shape extents; single-object pretraining splits
    # use larger objects so masked crops stay in-distribution
    size_scale_range: tuple[float, float] = (1.0, 1.0)

    def validate(self) -> None:
        if self.image_size < 64:
            raise ValueError("image_size must be >= 64")
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError("invalid object count range")
        if self.size_scale_range[0] <= 0 or self.size_scale_range[1] < self.size_scale_range[0]:
            raise ValueError("invalid size_scale_range")


class GenerationError(RuntimeError):
    pass


class RleFormatError(ValueError):
    pass


class EmptyMaskError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Geometry utilities


def mask_to_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight half-open bounding box (x1, y1, x2, y2) of the true pixels."""
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise EmptyMaskError("mask has no true pixels")
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def box_iou(a: tuple, b: tuple) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = max(0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """|a & b| / |a | b|; 1.0 when both masks are empty."""
    if a.shape != b.shape:
        raise ValueError(f"mask dims differ: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return inter / union


def l1_distance_transform(mask: np.ndarray) -> np.ndarray:
    """City-block distance of each true pixel to the nearest background
    pixel, with virtual background outside the image. Two-pass DP."""
    h, w = mask.shape
    inf = h + w + 2
    d = np.where(mask.astype(bool), inf, 0).astype(np.int64)
    # forward pass
    for y in range(h):
        for x in range(w):
            if d[y, x] == 0:
                continue
            up = d[y - 1, x] if y > 0 else 0
            left = d[y, x - 1] if x > 0 else 0
            d[y, x] = min(d[y, x], up + 1, left + 1)
    # backward pass
    for y in range(h - 1, -1, -1):
        for x in range(w - 1, -1, -1):
            down = d[y + 1, x] if y < h - 1 else 0
            right = d[y, x + 1] if x < w - 1 else 0
            d[y, x] = min(d[y, x], down + 1, right + 1)
    return d


def _l1_distance_transform_fast(mask: np.ndarray) -> np.ndarray:
    """Vectorized row/column sweep version of l1_distance_transform."""
    h, w = mask.shape
    inf = h + w + 2
    d = np.where(mask.astype(bool), inf, 0).astype(np.int64)
    for y in range(h):
        row = d[y]
        prev = d[y - 1] if y > 0 else np.zeros(w, dtype=np.int64)
        row = np.minimum(row, prev + 1)
        row[0] = min(row[0], 1)  # virtual background left of the image
        run = np.minimum.accumulate(row - np.arange(w)) + np.arange(w)
        d[y] = np.minimum(row, run)
    for y in range(h - 1, -1, -1):
        row = d[y]
        nxt = d[y + 1] if y < h - 1 else np.zeros(w, dtype=np.int64)
        row = np.minimum(row, nxt + 1)
        row[-1] = min(row[-1], 1)  # virtual background right of the image
        rev = row[::-1]
        run = (np.minimum.accumulate(rev - np.arange(w)) + np.arange(w))[::-1]
        d[y] = np.minimum(row, run)
    return d


def mask_center_point(mask: np.ndarray) -> tuple[int, int]:
    """Interior point maximizing the L1 distance transform; ties broken by
    smallest (y, then x). Always lands inside the mask, unlike a centroid."""
    if int(mask.sum()) == 0:
        raise EmptyMaskError("mask has no true pixels")
    d = _l1_distance_transform_fast(mask)
    flat = int(np.argmax(d))  # first max in C order = smallest y, then x
    y, x = divmod(flat, mask.shape[1])
    return (int(x), int(y))


# ---------------------------------------------------------------------------
# RLE codec (column-major, leading zero-run)


def rle_encode(mask: np.ndarray) -> dict:
    """Uncompressed column-major RLE: alternating run lengths starting with
    a 0-run. JSON shape: {"size": [H, W], "counts": [...]}."""
    h, w = mask.shape
    if h == 0 or w == 0:
        raise ValueError("mask dims must be positive")
    flat = mask.astype(bool).ravel(order="F")
    counts: list[int] = []
    if flat[0]:
        counts.append(0)
    changes = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    counts.extend(int(b - a) for a, b in zip(bounds[:-1], bounds[1:]))
    return {"size": [int(h), int(w)], "counts": counts}


def rle_decode(rle: dict, h: int, w: int) -> np.ndarray:
    counts = rle["counts"]
    if sum(counts) != h * w:
        raise RleFormatError(f"count sum {sum(counts)} != {h}*{w}")
    flat = np.zeros(h * w, dtype=np.uint8)
    pos = 0
    value = 0
    for c in counts:
        if value:
            flat[pos : pos + c] = 1
        pos += c
        value ^= 1
    return flat.reshape((h, w), order="F")


# ---------------------------------------------------------------------------
# Shape rasterization (pixel (x, y) has center (x + 0.5, y + 0.5))


def _raster_circle(size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return ((xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r).astype(np.uint8)


def _raster_square(size: int, cx: float, cy: float, half: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return (
        (np.abs(xx + 0.5 - cx) <= half) & (np.abs(yy + 0.5 - cy) <= half)
    ).astype(np.uint8)


def _raster_triangle(size: int, cx: float, cy: float, hw: float, hh: float) -> np.ndarray:
    # apex up: vertices (cx, cy-hh), (cx-hw, cy+hh), (cx+hw, cy+hh)
    yy, xx = np.mgrid[0:size, 0:size]
    px = xx + 0.5 - cx
    py = yy + 0.5 - cy
    below_apex = py >= -hh
    above_base = py <= hh
    # left/right edges: |px| / hw <= (py + hh) / (2*hh)
    inside_sides = np.abs(px) * 2.0 * hh <= (py + hh) * hw
    return (below_apex & above_base & inside_sides).astype(np.uint8)


def _raster_cross(size: int, cx: float, cy: float, arm: float, thick: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    px = np.abs(xx + 0.5 - cx)
    py = np.abs(yy + 0.5 - cy)
    horiz = (px <= arm) & (py <= thick)
    vert = (py <= arm) & (px <= thick)
    return (horiz | vert).astype(np.uint8)


def _sample_shape_mask(
    rng: CounterRng, shape: str, size: int, scale_range: tuple[float, float] = (1.0, 1.0)
) -> np.ndarray:
    margin = 3
    s = size / 128.0  # extent ranges are calibrated at 128 px
    if scale_range != (1.0, 1.0):  # degenerate range draws nothing
        s *= rng.uniform(*scale_range)
        s = min(s, (size / 2.0 - margin - 1.0) / 30.0)  # largest extent must fit
    if shape == "circle":
        r = rng.uniform(8.0 * s, 28.0 * s)
        ext = r
    elif shape == "square":
        half = rng.uniform(7.0 * s, 26.0 * s)
        ext = half
    elif shape == "triangle":
        hw = rng.uniform(10.0 * s, 30.0 * s)
        hh = rng.uniform(max(9.0 * s, 0.7 * hw), min(27.0 * s, 1.3 * hw))
        ext = max(hw, hh)
    elif shape == "cross":
        arm = rng.uniform(9.0 * s, 26.0 * s)
        thick = max(4.0 * s, 0.38 * arm)
        ext = arm
    else:
        raise ValueError(f"unknown shape {shape!r}")
    cx = rng.uniform(margin + ext, size - margin - ext)
    cy = rng.uniform(margin + ext, size - margin - ext)
    if shape == "circle":
        return _raster_circle(size, cx, cy, r)
    if shape == "square":
        return _raster_square(size, cx, cy, half)
    if shape == "triangle":
        return _raster_triangle(size, cx, cy, hw, hh)
    return _raster_cross(size, cx, cy, arm, thick)


def _bilinear_upsample_np(grid: np.ndarray, out: int) -> np.ndarray:
    """Half-pixel-center bilinear upsampling of a small (g, g, c) grid."""
    g = grid.shape[0]
    scale = g / out
    coords = (np.arange(out) + 0.5) * scale - 0.5
    lo = np.floor(coords).astype(int)
    frac = coords - lo
    lo0 = np.clip(lo, 0, g - 1)
    lo1 = np.clip(lo + 1, 0, g - 1)
    rows = grid[lo0][:, lo0] * ((1 - frac)[:, None, None] * (1 - frac)[None, :, None])
    rows += grid[lo0][:, lo1] * ((1 - frac)[:, None, None] * frac[None, :, None])
    rows += grid[lo1][:, lo0] * (frac[:, None, None] * (1 - frac)[None, :, None])
    rows += grid[lo1][:, lo1] * (frac[:, None, None] * frac[None, :, None])
    return rows


def _background(rng: CounterRng, size: int) -> np.ndarray:
    # near-neutral luminance noise: a strong color cast would alias with
    # object color identity
    lum = np.repeat(rng.array_uniform((4, 4, 1), 0.18, 0.45), 3, axis=2)
    fine = np.repeat(rng.array_uniform((16, 16, 1), -0.03, 0.03), 3, axis=2)
    tint = rng.array_uniform((1, 1, 3), -0.03, 0.03)
    bg = _bilinear_upsample_np(lum, size) + _bilinear_upsample_np(fine, size) + tint
    return np.clip(bg, 0.05, 0.6)


def generate_scene(rng_seed: int, class_pool, params: GenParams | None = None) -> Scene:
    """Deterministically generate one scene from a seed.

    Instances are rejection-sampled so pairwise tight-box IoU stays within
    params.max_box_iou; later instances occlude earlier ones and every
    visible mask must keep at least params.min_area pixels.
    """
    params = params or GenParams()
    params.validate()
    pool = sorted(class_pool)
    if not pool:
        raise ValueError("class_pool must be non-empty")
    rng = CounterRng(rng_seed)
    size = params.image_size

    for attempt in range(params.max_attempts):
        n = rng.randint(params.min_objects, params.max_objects)
        full_masks: list[np.ndarray] = []
        boxes: list[tuple] = []
        class_ids: list[int] = []
        colors: list[np.ndarray] = []
        ok = True
        for _ in range(n):
            placed = False
            for _try in range(60):
                cid = rng.choice(pool)
                color_name, shape = CLASS_NAMES[cid].split()
                mask = _sample_shape_mask(rng, shape, size, params.size_scale_range)
                if int(mask.sum()) < params.min_area:
                    continue
                box = mask_to_box(mask)
                if all(box_iou(box, b) <= params.max_box_iou for b in boxes):
                    base = np.array(COLOR_RGB[color_name])
                    jitter = np.array([rng.uniform(-0.07, 0.07) for _ in range(3)])
                    full_masks.append(mask)
                    boxes.append(box)
                    class_ids.append(cid)
                    colors.append(np.clip(base + jitter, 0.04, 0.98))
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if not ok:
            continue

        # visibility: later instances occlude earlier ones
        visible: list[np.ndarray] = []
        occluder = np.zeros((size, size), dtype=bool)
        for m in reversed(full_masks):
            vis = np.logical_and(m.astype(bool), ~occluder)
            visible.append(vis.astype(np.uint8))
            occluder |= m.astype(bool)
        visible.reverse()

        if any(int(v.sum()) < params.min_area for v in visible):
            continue
        vis_boxes = [mask_to_box(v) for v in visible]
        pair_ok = all(
            box_iou(vis_boxes[i], vis_boxes[j]) <= params.max_box_iou
            for i in range(len(vis_boxes))
            for j in range(i + 1, len(vis_boxes))
        )
        if not pair_ok:
            continue

        image = _background(rng.derive("bg", attempt), size)
        for m, c in zip(full_masks, colors):
            image[m.astype(bool)] = c
        # quantize to 8-bit levels so PNG round-trips exactly
        image = np.round(image * 255.0) / 255.0
        instances = [
            Instance(mask=v, box=b, class_id=cid, area=int(v.sum()))
            for v, b, cid in zip(visible, vis_boxes, class_ids)
        ]
        return Scene(image=image.astype(np.float32), instances=instances, scene_id="")

    raise GenerationError(
        f"could not place instances for seed {rng_seed} "
        f"after {params.max_attempts} attempts"
    )


# ---------------------------------------------------------------------------
# Dataset builds


@dataclass
class DatasetManifest:
    name: str
    entries: list[tuple[str, str]]  # (scene path, annotation path) relative to root
    seed: int
    class_split: ClassSplit
    root: Path = field(default=Path("."))

    def validate(self) -> None:
        if not self.entries:
            raise ValueError("manifest has no entries")
        self.class_split.validate()

    def scene_path(self, i: int) -> Path:
        return self.root / self.entries[i][0]

    def ann_path(self, i: int) -> Path:
        return self.root / self.entries[i][1]

    def __len__(self) -> int:
        return len(self.entries)


SPLIT_SIZES = {
    "clip_pretrain": 4000,
    "sa_like": 2000,
    "seg_labeled": 1500,
    "cls_only": 2000,
    "eval": 500,
}


def _split_params(split: str) -> GenParams:
    if split == "clip_pretrain":
        return GenParams(min_objects=1, max_objects=1, size_scale_range=(1.0, 2.8))
    if split == "cls_only":
        return GenParams(min_objects=1, max_objects=1, size_scale_range=(1.6, 2.8))
    return GenParams()


def _ann_record(scene: Scene, split: str) -> dict:
    h, w, _ = scene.image.shape
    insts = []
    for inst in scene.instances:
        rec: dict = {"box": list(inst.box)}
        if split in ("seg_labeled", "eval", "clip_pretrain", "cls_only"):
            rec["class_id"] = inst.class_id
        if split in ("sa_like", "seg_labeled", "eval"):
            rec["area"] = inst.area
            rec["rle"] = rle_encode(inst.mask)
        insts.append(rec)
    rec = {"scene_id": scene.scene_id, "size": [h, w], "instances": insts}
    if split == "clip_pretrain":
        rec["caption"] = class_caption(scene.instances[0].class_id)
    return rec


def save_scene_png(scene: Scene, path: Path) -> None:
    arr = np.round(scene.image * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_scene_image(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def load_annotation(path: Path) -> dict:
    with open(path) as f:
        return json.load(f)


def load_scene(manifest: DatasetManifest, i: int) -> tuple[np.ndarray, dict]:
    return load_scene_image(manifest.scene_path(i)), load_annotation(manifest.ann_path(i))


def ann_to_instances(ann: dict) -> list[Instance]:
    h, w = ann["size"]
    out = []
    for rec in ann["instances"]:
        mask = rle_decode(rec["rle"], h, w) if "rle" in rec else np.zeros((h, w), np.uint8)
        out.append(
            Instance(
                mask=mask,
                box=tuple(rec["box"]),
                class_id=rec.get("class_id", -1),
                area=rec.get("area", int(mask.sum())),
            )
        )
    return out


def build_datasets(
    root: Path | str,
    seed: int,
    split: ClassSplit | None = None,
    scale: float = 1.0,
) -> dict[str, DatasetManifest]:
    """Generate the five corpora under root. scale < 1 shrinks every split
    proportionally (for fast smoke runs); defaults match the documented
    counts (4000, 2000, 1500, 2000, 500)."""
    root = Path(root)
    split = split or default_class_split()
    split.validate()
    manifests: dict[str, DatasetManifest] = {}
    master = CounterRng(seed)

    for split_idx, (name, count) in enumerate(SPLIT_SIZES.items()):
        n = max(2, int(round(count * scale)))
        params = _split_params(name)
        if name in ("seg_labeled", "cls_only"):
            pool = list(split.base_ids)
        else:
            pool = list(range(NUM_CLASSES))
        scene_dir = root / name / "scenes"
        ann_dir = root / name / "ann"
        try:
            scene_dir.mkdir(parents=True, exist_ok=True)
            ann_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise OSError(f"cannot create dataset dirs under {root}: {e}") from e

        entries = []
        for i in range(n):
            child_seed = master.derive(split_idx, i).seed
            scene = generate_scene(child_seed, pool, params)
            scene.scene_id = f"{name}_{i:05d}"
            scene_rel = f"{name}/scenes/{scene.scene_id}.png"
            ann_rel = f"{name}/ann/{scene.scene_id}.json"
            try:
                save_scene_png(scene, root / scene_rel)
                with open(root / ann_rel, "w") as f:
                    json.dump(_ann_record(scene, name), f)
            except OSError as e:
                raise OSError(f"failed writing {root / scene_rel}: {e}") from e
            entries.append((scene_rel, ann_rel))

        manifest = DatasetManifest(
            name=name, entries=entries, seed=seed, class_split=split, root=root
        )
        manifest.validate()
        with open(root / name / "manifest.json", "w") as f:
            json.dump(
                {
                    "name": name,
                    "entries": entries,
                    "seed": seed,
                    "class_split": split.to_json(),
                    "format_version": FORMAT_VERSION,
                },
                f,
            )
        manifests[name] = manifest
    return manifests


def load_manifest(root: Path | str, name: str) -> DatasetManifest:
    root = Path(root)
    path = root / name / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    with open(path) as f:
        d = json.load(f)
    m = DatasetManifest(
        name=d["name"],
        entries=[tuple(e) for e in d["entries"]],
        seed=d["seed"],
        class_split=ClassSplit.from_json(d["class_split"]),
        root=root,
    )
    m.validate()
    return m
