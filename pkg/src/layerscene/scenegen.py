"""Synthetic layered scenes with exact ground truth.

Three recipes are provided: ``polygons`` (two overlapping regular polygons on
a 64x64 black canvas), ``sprites`` (squares, ellipses, triangles and hearts at
random poses) and ``two-squares`` (a small 32x32 toy set for smoke tests).

Coordinates are continuous ``(x, y)`` with pixel ``(row, col)`` centred at
``(col + 0.5, row + 0.5)``. A pixel belongs to a shape iff its centre is
inside; boundaries on the low-x and low-y sides are inclusive.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

GENERATOR_VERSION = "1"
KINDS = ("polygons", "sprites", "two-squares")
SPRITE_SHAPES = ("square", "ellipse", "triangle", "heart")
TWO_SQUARES_PALETTE = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0), (1.0, 1.0, 0.0))


class DatasetIOError(OSError):
    """Reading or writing a dataset directory failed."""


@dataclass
class ObjectSpec:
    shape: str  # "polygon", "square", "triangle", "ellipse" or "heart"
    center: tuple[float, float]  # (x, y)
    radius: float
    rotation: float
    color: tuple[float, float, float]
    edges: int | None = None
    aspect: float = 1.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["center"] = list(self.center)
        d["color"] = list(self.color)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectSpec":
        d = dict(d)
        d["center"] = tuple(d["center"])
        d["color"] = tuple(d["color"])
        return cls(**d)


@dataclass
class SceneSpec:
    objects: list[ObjectSpec]
    order: list[int]  # back-to-front object indices
    size: int
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    kind: str = "polygons"

    def __post_init__(self):
        if sorted(self.order) != list(range(len(self.objects))):
            raise ValueError("order must be a permutation of the object indices")
        for o in self.objects:
            if not all(0.0 <= c <= 1.0 for c in o.color):
                raise ValueError(f"color out of [0,1]: {o.color}")

    @property
    def depth_ranks(self) -> list[int]:
        """Rank 0 is the nearest object (drawn last)."""
        R = len(self.objects)
        ranks = [0] * R
        for pos, idx in enumerate(self.order):
            ranks[idx] = R - 1 - pos
        return ranks

    def to_dict(self) -> dict:
        return {"kind": self.kind, "size": self.size, "background": list(self.background),
                "order": list(self.order), "objects": [o.to_dict() for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(objects=[ObjectSpec.from_dict(o) for o in d["objects"]], order=list(d["order"]),
                   size=int(d["size"]), background=tuple(d["background"]), kind=d["kind"])


@dataclass
class RenderedScene:
    image: np.ndarray  # [3, N, N] float64 in [0, 1]
    amodal: np.ndarray  # [R, N, N] bool
    modal: np.ndarray  # [R, N, N] bool
    depth_ranks: list[int]
    spec: SceneSpec
    meta: dict = field(default_factory=dict)

    @property
    def depths(self) -> np.ndarray:
        """Rank ``r`` of ``R`` objects mapped to ``(r + 1) / (R + 1)``; nearer is smaller."""
        R = len(self.depth_ranks)
        return np.array([(r + 1) / (R + 1) for r in self.depth_ranks])


# ----------------------------------------------------------------- sampling
def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _color(rng) -> tuple[float, float, float]:
    return tuple(float(c) for c in rng.uniform(0.0, 1.0, size=3))


def sample_polygon_scene(seed, size: int = 64, n_objects: int = 2) -> SceneSpec:
    """Two filled polygons with 3-6 edges, radius in [7.5, 12.5], centres within 5 px of the middle."""
    rng = _rng(seed)
    objects = []
    for _ in range(n_objects):
        edges = int(rng.integers(3, 7))
        radius = float(rng.uniform(7.5, 12.5))
        off = rng.uniform(-5.0, 5.0, size=2)
        rotation = float(rng.uniform(0.0, 2 * math.pi))
        objects.append(ObjectSpec("polygon", (size / 2 + float(off[0]), size / 2 + float(off[1])),
                                  radius, rotation, _color(rng), edges=edges))
    order = [int(i) for i in rng.permutation(n_objects)]
    return SceneSpec(objects, order, size, kind="polygons")


def sample_sprite_scene(seed, min_objects: int = 2, max_objects: int = 4, size: int = 64,
                        max_slots: int | None = None,
                        shapes: Sequence[str] = SPRITE_SHAPES) -> SceneSpec:
    """Random sprites (square/ellipse/triangle/heart) with random pose, colour and order."""
    limit = max_slots if max_slots is not None else max_objects
    if not 1 <= min_objects <= max_objects <= limit:
        raise ValueError(f"invalid object bounds: min={min_objects} max={max_objects} "
                         f"slots={limit}")
    rng = _rng(seed)
    n = int(rng.integers(min_objects, max_objects + 1))
    scale = size / 64.0
    objects = []
    for _ in range(n):
        shape = str(shapes[int(rng.integers(len(shapes)))])
        radius = float(rng.uniform(5.0, 10.0)) * scale
        margin = radius * 0.5
        cx, cy = (float(v) for v in rng.uniform(margin, size - margin, size=2))
        rotation = float(rng.uniform(0.0, 2 * math.pi))
        aspect = float(rng.uniform(0.5, 1.0)) if shape == "ellipse" else 1.0
        objects.append(ObjectSpec(shape, (cx, cy), radius, rotation, _color(rng), aspect=aspect))
    order = [int(i) for i in rng.permutation(n)]
    return SceneSpec(objects, order, size, kind="sprites")


def sample_two_squares_scene(seed, size: int = 32, side: int = 8,
                             max_overlap: float = 0.25) -> SceneSpec:
    """Two axis-aligned squares of fixed side in two distinct palette colours.

    Squares are disjoint or overlap by at most ``max_overlap`` of their area.
    """
    rng = _rng(seed)
    half = side // 2
    while True:
        centers = rng.integers(half, size - half + 1, size=(2, 2))
        dx = max(0, side - abs(int(centers[0, 0] - centers[1, 0])))
        dy = max(0, side - abs(int(centers[0, 1] - centers[1, 1])))
        if dx * dy <= max_overlap * side * side:
            break
    colors = rng.choice(len(TWO_SQUARES_PALETTE), size=2, replace=False)
    objects = [ObjectSpec("square", (float(c[0]), float(c[1])), half * math.sqrt(2), math.pi / 4,
                          TWO_SQUARES_PALETTE[int(k)]) for c, k in zip(centers, colors)]
    order = [int(i) for i in rng.permutation(2)]
    return SceneSpec(objects, order, size, kind="two-squares")


def sample_scene(kind: str, seed, **kwargs) -> SceneSpec:
    if kind == "polygons":
        return sample_polygon_scene(seed, **kwargs)
    if kind == "sprites":
        return sample_sprite_scene(seed, **kwargs)
    if kind == "two-squares":
        return sample_two_squares_scene(seed, **kwargs)
    raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")


# -------------------------------------------------------------- rasterising
def pixel_centers(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = np.arange(size) + 0.5
    return np.meshgrid(c, c)  # px (x varies along columns), py


def polygon_vertices(obj: ObjectSpec) -> np.ndarray:
    k = {"polygon": obj.edges, "square": 4, "triangle": 3}[obj.shape]
    ang = obj.rotation + 2 * math.pi * np.arange(k) / k
    return np.stack([obj.center[0] + obj.radius * np.cos(ang),
                     obj.center[1] + obj.radius * np.sin(ang)], axis=1)


def points_in_polygon(px: np.ndarray, py: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Crossing-number test with half-open edges."""
    inside = np.zeros(px.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        if not np.any(crosses):
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < xint)
    return inside


def rasterize(obj: ObjectSpec, size: int) -> np.ndarray:
    px, py = pixel_centers(size)
    if obj.shape in ("polygon", "square", "triangle"):
        return points_in_polygon(px, py, polygon_vertices(obj))
    # implicit shapes in the object's rotated frame
    dx, dy = px - obj.center[0], py - obj.center[1]
    c, s = math.cos(obj.rotation), math.sin(obj.rotation)
    u = (c * dx + s * dy) / obj.radius
    v = (-s * dx + c * dy) / obj.radius
    if obj.shape == "ellipse":
        return u * u + (v / obj.aspect) ** 2 < 1.0
    if obj.shape == "heart":
        u, v = 1.2 * u, -1.2 * v + 0.25
        return (u * u + v * v - 1) ** 3 - u * u * v ** 3 < 0
    raise ValueError(f"unknown shape {obj.shape!r}")


def render(spec: SceneSpec) -> RenderedScene:
    """Painter's-algorithm rendering with amodal and modal masks."""
    N = spec.size
    image = np.empty((3, N, N))
    image[:] = np.asarray(spec.background, dtype=np.float64)[:, None, None]
    amodal = np.stack([rasterize(o, N) for o in spec.objects]) if spec.objects \
        else np.zeros((0, N, N), dtype=bool)
    for idx in spec.order:
        image[:, amodal[idx]] = np.asarray(spec.objects[idx].color)[:, None]
    modal = np.zeros_like(amodal)
    covered = np.zeros((N, N), dtype=bool)
    for idx in reversed(spec.order):  # front to back
        modal[idx] = amodal[idx] & ~covered
        covered |= amodal[idx]
    return RenderedScene(image, amodal, modal, spec.depth_ranks, spec)


# ------------------------------------------------------------------ on disk
def split_counts(count: int) -> tuple[int, int]:
    n_train = count * 9 // 10
    return n_train, count - n_train


def _to_png(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def quantize(image: np.ndarray) -> np.ndarray:
    """The float image a PNG round trip yields."""
    return _to_png(image).astype(np.float64) / 255.0


def write_dataset(scenes: Sequence[RenderedScene], directory, seeds: Sequence | None = None,
                  manifest_extra: dict | None = None) -> dict:
    """Write images, masks, ``meta.jsonl`` and ``manifest.json``; returns the manifest.

    The first 90% of scenes (by index) form the training split, the rest the
    evaluation split.
    """
    root = Path(directory)
    n_train, n_eval = split_counts(len(scenes))
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
        with open(root / "meta.jsonl", "w", encoding="utf-8") as meta:
            for i, sc in enumerate(scenes):
                Image.fromarray(_to_png(sc.image).transpose(1, 2, 0), "RGB").save(
                    root / "images" / f"{i:06d}.png")
                for j in range(len(sc.spec.objects)):
                    for kind, m in (("modal", sc.modal[j]), ("amodal", sc.amodal[j])):
                        Image.fromarray(m.astype(np.uint8) * 255, "L").save(
                            root / "masks" / f"{i:06d}_obj{j:02d}_{kind}.png")
                rec = {"index": i, "split": "train" if i < n_train else "eval",
                       "depth_ranks": list(sc.depth_ranks), "spec": sc.spec.to_dict()}
                if seeds is not None:
                    rec["seed"] = seeds[i]
                meta.write(json.dumps(rec, sort_keys=True) + "\n")
        manifest = {"generator": "layerscene.scenegen", "generator_version": GENERATOR_VERSION,
                    "count": len(scenes), "train": n_train, "eval": n_eval}
        manifest.update(manifest_extra or {})
        with open(root / "manifest.json", "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as exc:
        raise DatasetIOError(f"failed writing dataset at {exc.filename or root}: {exc}") from exc
    return manifest


def scene_seed(seed: int, index: int) -> list[int]:
    """Per-scene generator seed; each scene is independent of the others."""
    return [int(seed), int(index)]


def generate_dataset(kind: str, count: int, seed: int, directory, **kwargs) -> dict:
    if count < 1:
        raise ValueError("count must be >= 1")
    seeds = [scene_seed(seed, i) for i in range(count)]
    scenes = [render(sample_scene(kind, np.random.default_rng(s), **kwargs)) for s in seeds]
    extra = {"kind": kind, "seed": int(seed), "params": dict(kwargs),
             "size": scenes[0].spec.size}
    return write_dataset(scenes, directory, seeds, extra)


def regenerate(manifest_path) -> list[RenderedScene]:
    """Re-create every scene of a dataset from the seeds recorded in its manifest."""
    manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    kind, seed, params = manifest["kind"], manifest["seed"], manifest.get("params", {})
    return [render(sample_scene(kind, np.random.default_rng(scene_seed(seed, i)), **params))
            for i in range(manifest["count"])]


def _read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im)
    except OSError as exc:
        raise DatasetIOError(f"cannot read {path}: {exc}") from exc


def read_dataset(directory, split: str | None = None) -> list[RenderedScene]:
    """Load scenes from disk. Images are the 8-bit PNG contents scaled to [0, 1]."""
    root = Path(directory)
    meta_path = root / "meta.jsonl"
    try:
        lines = meta_path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DatasetIOError(f"cannot read {meta_path}: {exc}") from exc
    out = []
    for line in lines:
        rec = json.loads(line)
        if split is not None and rec["split"] != split:
            continue
        i = rec["index"]
        spec = SceneSpec.from_dict(rec["spec"])
        img = _read_png(root / "images" / f"{i:06d}.png").transpose(2, 0, 1) / 255.0
        R = len(spec.objects)
        modal = np.stack([_read_png(root / "masks" / f"{i:06d}_obj{j:02d}_modal.png") > 127
                          for j in range(R)])
        amodal = np.stack([_read_png(root / "masks" / f"{i:06d}_obj{j:02d}_amodal.png") > 127
                           for j in range(R)])
        out.append(RenderedScene(img, amodal, modal, rec["depth_ranks"], spec,
                                 meta={"index": i, "split": rec["split"]}))
    return out


def load_scenes(directory, split: str | None = None) -> list[RenderedScene]:
    """Scenes of a dataset as exact float renders.

    Datasets written by :func:`generate_dataset` are re-rendered from their
    recorded seeds, so no 8-bit quantisation enters training or metrics;
    anything else is read from its PNG files.
    """
    root = Path(directory)
    try:
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise DatasetIOError(f"cannot read {root / 'manifest.json'}: {exc}") from exc
    if "kind" not in manifest or "seed" not in manifest:
        return read_dataset(root, split)
    n_train = manifest["train"]
    out = []
    for i, sc in enumerate(regenerate(root / "manifest.json")):
        sc.meta = {"index": i, "split": "train" if i < n_train else "eval"}
        if split is None or sc.meta["split"] == split:
            out.append(sc)
    return out


def load_images(directory, split: str | None = "train", dtype=np.float32) -> np.ndarray:
    """Stack of dataset images ``[n, 3, N, N]``."""
    scenes = load_scenes(directory, split)
    if not scenes:
        raise DatasetIOError(f"no {split or 'any'} images under {directory}")
    return np.stack([s.image for s in scenes]).astype(dtype)


def save_png(path, image: np.ndarray) -> None:
    """Write a ``[3, N, N]`` or ``[N, N]`` float image in [0, 1] as 8-bit PNG."""
    arr = _to_png(np.asarray(image, dtype=np.float64))
    if arr.ndim == 3:
        img = Image.fromarray(arr.transpose(1, 2, 0), "RGB")
    else:
        img = Image.fromarray(arr, "L")
    try:
        img.save(path)
    except OSError as exc:
        raise DatasetIOError(f"cannot write {path}: {exc}") from exc


def check_scene_invariants(sc: RenderedScene) -> list[str]:
    """Return human-readable violations of the rendering invariants (empty if none)."""
    problems = []
    if np.any(sc.modal & ~sc.amodal):
        problems.append("modal mask not contained in amodal mask")
    counts = sc.modal.sum(axis=0)
    if np.any(counts > 1):
        problems.append("modal masks overlap")
    occupied = sc.amodal.any(axis=0)
    if np.any((counts == 1) != occupied):
        problems.append("modal masks do not cover the occupied pixels")
    for j, obj in enumerate(sc.spec.objects):
        if np.any(sc.image[:, sc.modal[j]] != np.asarray(obj.color)[:, None]):
            problems.append(f"object {j} visible pixels do not carry its colour")
    bg = np.asarray(sc.spec.background)[:, None]
    if np.any(sc.image[:, ~occupied] != bg):
        problems.append("unoccupied pixels differ from background")
    return problems


__all__ = [
    "DatasetIOError", "KINDS", "ObjectSpec", "RenderedScene", "SceneSpec",
    "check_scene_invariants", "generate_dataset", "load_images", "points_in_polygon",
    "polygon_vertices", "quantize", "rasterize", "read_dataset", "regenerate", "render",
    "sample_polygon_scene", "sample_scene", "sample_sprite_scene", "sample_two_squares_scene",
    "save_png", "split_counts", "write_dataset",
]
