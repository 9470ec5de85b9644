"""Synthetic bi-temporal change-detection scenes with text prompts.

Each scene is a textured ground plane photographed twice; between the
two dates objects appear or disappear.  Every object class has a fixed
shape and color family (building -> square block, road -> full-span
band, tank -> disk) so prompts are visually groundable: a model must
read the prompt to know which class's changes to mark.  Rectilinear
geometry follows an urban 4-pixel layout grid; see _sample_geometry.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import pngio
from .errors import ConfigError, DatasetError, GenerationError

CLASS_SHAPES = {"building": "square", "road": "line", "tank": "disk"}
EVENTS = ("appear", "disappear")
CHANGE_PROMPT = "change"

# Mean RGB per class; rendering jitters these per object.
CLASS_COLORS = {
    "building": (0.72, 0.34, 0.24),
    "road": (0.20, 0.20, 0.24),
    "tank": (0.78, 0.80, 0.86),
}
BACKGROUND_COLOR = (0.32, 0.42, 0.27)
NOISE_AMPLITUDE = 0.015


@dataclass
class ObjectEvent:
    cls: str
    event: str  # "appear" (only in img_b) or "disappear" (only in img_a)
    geometry: dict
    color: tuple

    def __post_init__(self):
        if self.cls not in CLASS_SHAPES:
            raise GenerationError(f"unknown class {self.cls!r}, expected one of {sorted(CLASS_SHAPES)}")
        if self.event not in EVENTS:
            raise GenerationError(f"unknown event {self.event!r}, expected one of {EVENTS}")


@dataclass
class SceneSpec:
    scene_id: str
    seed: int
    objects: list = field(default_factory=list)


@dataclass
class BiTemporalPair:
    img_a: np.ndarray   # (3, H, W) float32 in [0, 1]
    img_b: np.ndarray
    prompt: str
    mask: np.ndarray    # (1, H, W) float32 in {0, 1}
    scene_id: str
    seed: int


def footprint(obj, h, w):
    """Boolean (h, w) pixel mask of one object."""
    yy, xx = np.mgrid[0:h, 0:w]
    yy = yy + 0.5
    xx = xx + 0.5
    g = obj.geometry
    shape = CLASS_SHAPES[obj.cls]
    if shape == "square":
        return (np.abs(xx - g["cx"]) <= g["half"]) & (np.abs(yy - g["cy"]) <= g["half"])
    if shape == "disk":
        return (xx - g["cx"]) ** 2 + (yy - g["cy"]) ** 2 <= g["r"] ** 2
    # line: distance from the pixel center to the segment
    x0, y0, x1, y1 = g["x0"], g["y0"], g["x1"], g["y1"]
    dx, dy = x1 - x0, y1 - y0
    length_sq = max(dx * dx + dy * dy, 1e-9)
    t = np.clip(((xx - x0) * dx + (yy - y0) * dy) / length_sq, 0.0, 1.0)
    dist_sq = (xx - (x0 + t * dx)) ** 2 + (yy - (y0 + t * dy)) ** 2
    return dist_sq <= (g["width"] / 2.0) ** 2


def _background(rng, h, w):
    """Ground plane: base color, a coarse blotch layer, fine grain."""
    img = np.empty((3, h, w), dtype=np.float64)
    coarse_h, coarse_w = max(h // 8, 1), max(w // 8, 1)
    for c in range(3):
        blotch = rng.uniform(-0.05, 0.05, size=(coarse_h, coarse_w))
        blotch = np.repeat(np.repeat(blotch, h // coarse_h + 1, axis=0), w // coarse_w + 1, axis=1)
        img[c] = BACKGROUND_COLOR[c] + blotch[:h, :w]
    return img


def _paint(img, fp, color):
    for c in range(3):
        img[c][fp] = color[c]


def generate_scene(spec, h, w):
    """Render one scene and emit a BiTemporalPair per class present.

    Change is defined per class: each pair's mask covers exactly the
    pixels where that class appeared or disappeared.  A scene without
    events yields one pair prompted "change" with an all-zero mask.
    Deterministic in (spec, seed): the same spec renders bit-identically.
    """
    if h % 32 or w % 32:
        raise ConfigError(f"scene size must be divisible by 32, got {h}x{w}")

    prints = [footprint(obj, h, w) for obj in spec.objects]
    for i in range(len(prints)):
        for j in range(i + 1, len(prints)):
            if np.any(prints[i] & prints[j]):
                raise GenerationError(
                    f"scene {spec.scene_id}: objects {i} ({spec.objects[i].cls}) and "
                    f"{j} ({spec.objects[j].cls}) overlap")

    rng = np.random.default_rng(spec.seed)
    img_a = _background(rng, h, w)
    img_b = img_a.copy()
    for obj, fp in zip(spec.objects, prints):
        if obj.event == "appear":
            _paint(img_b, fp, obj.color)
        else:
            _paint(img_a, fp, obj.color)
    img_a += rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=img_a.shape)
    img_b += rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=img_b.shape)
    img_a = np.clip(img_a, 0.0, 1.0).astype(np.float32)
    img_b = np.clip(img_b, 0.0, 1.0).astype(np.float32)

    classes = []
    for obj in spec.objects:
        if obj.cls not in classes:
            classes.append(obj.cls)

    pairs = []
    if not classes:
        zero = np.zeros((1, h, w), dtype=np.float32)
        return [BiTemporalPair(img_a, img_b, CHANGE_PROMPT, zero, spec.scene_id, spec.seed)]
    for cls in classes:
        mask = np.zeros((h, w), dtype=bool)
        for obj, fp in zip(spec.objects, prints):
            if obj.cls == cls:
                mask |= fp
        pairs.append(BiTemporalPair(
            img_a, img_b, cls, mask[None].astype(np.float32), spec.scene_id, spec.seed))
    return pairs


def sample_scene_spec(scene_id, rng, h, w, classes=("building", "road"),
                      events_per_class=1, max_tries=200):
    """Draw a random SceneSpec with non-overlapping objects.

    Object geometry is rejection-sampled against the footprints already
    placed; persistent failure raises GenerationError.
    """
    seed = int(rng.integers(0, 2 ** 31 - 1))
    objects = []
    placed = np.zeros((h, w), dtype=bool)
    margin = 4
    for cls in classes:
        for _ in range(events_per_class):
            event = EVENTS[int(rng.integers(0, 2))]
            base = CLASS_COLORS[cls]
            color = tuple(float(np.clip(base[c] + rng.uniform(-0.05, 0.05), 0.0, 1.0)) for c in range(3))
            for attempt in range(max_tries):
                geometry = _sample_geometry(cls, rng, h, w, margin)
                candidate = ObjectEvent(cls, event, geometry, color)
                fp = footprint(candidate, h, w)
                if not np.any(fp & placed):
                    placed |= fp
                    objects.append(candidate)
                    break
            else:
                raise GenerationError(
                    f"scene {scene_id}: could not place a {cls} without overlap after {max_tries} tries")
    return SceneSpec(scene_id=scene_id, seed=seed, objects=objects)


LAYOUT_GRID = 4


def _sample_geometry(cls, rng, h, w, margin):
    """Draw object geometry on an urban layout grid.

    Buildings are axis-aligned blocks and roads full-span axis-aligned
    bands, both snapped to a 4-pixel grid.  Snapping puts every mask
    edge on a boundary of the model's stride-4 output cells, so the
    upsampled probability maps can represent each footprint exactly;
    with free-floating edges the interpolation error, not learning,
    caps the reachable IoU.  Tanks stay circular and unsnapped, which
    leaves them slightly harder than the rectilinear classes.
    """
    g = LAYOUT_GRID
    shape = CLASS_SHAPES[cls]
    if shape == "square":
        side_units = rng.integers(4, min(6, (min(h, w) // 2) // g) + 1)
        side = g * int(side_units)
        x0 = g * int(rng.integers(margin // g, (w - margin - side) // g + 1))
        y0 = g * int(rng.integers(margin // g, (h - margin - side) // g + 1))
        half = side / 2.0
        return {"cx": x0 + half, "cy": y0 + half, "half": half}
    if shape == "disk":
        r = float(rng.uniform(8.0, min(14.0, min(h, w) / 4.0)))
        return {
            "cx": float(rng.uniform(margin + r, w - margin - r)),
            "cy": float(rng.uniform(margin + r, h - margin - r)),
            "r": r,
        }
    # road: a band crossing the full image, horizontal or vertical, with
    # the segment endpoints pushed past the canvas so the round caps of
    # the distance test fall outside the visible area
    width_hi = min(5, max(2, (min(h, w) // 3) // g))
    width_units = rng.integers(min(3, width_hi), width_hi + 1)
    width = g * int(width_units)
    horizontal = bool(rng.integers(0, 2))
    extent = h if horizontal else w
    edge0 = g * int(rng.integers(0, (extent - width) // g + 1))
    center = edge0 + width / 2.0
    over = float(width)
    if horizontal:
        return {"x0": -over, "y0": center, "x1": w + over, "y1": center, "width": float(width)}
    return {"x0": center, "y0": -over, "x1": center, "y1": h + over, "width": float(width)}


def augment(pair, rng, flip_prob=0.5, crop_size=None):
    """Random flips and an optional random crop, applied identically to
    img_a, img_b and mask so pixel-label correspondence is preserved."""
    a, b, m = pair.img_a, pair.img_b, pair.mask
    if rng.random() < flip_prob:  # horizontal (width axis)
        a, b, m = a[:, :, ::-1], b[:, :, ::-1], m[:, :, ::-1]
    if rng.random() < flip_prob:  # vertical (height axis)
        a, b, m = a[:, ::-1, :], b[:, ::-1, :], m[:, ::-1, :]
    if crop_size is not None:
        h, w = a.shape[1], a.shape[2]
        ch = cw = int(crop_size)
        if ch % 32 or ch <= 0:
            raise ConfigError(f"crop size must be a positive multiple of 32, got {crop_size}")
        if ch > h or cw > w:
            raise ConfigError(f"crop size {crop_size} exceeds image size {h}x{w}")
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        a = a[:, y0:y0 + ch, x0:x0 + cw]
        b = b[:, y0:y0 + ch, x0:x0 + cw]
        m = m[:, y0:y0 + ch, x0:x0 + cw]
    return BiTemporalPair(np.ascontiguousarray(a), np.ascontiguousarray(b),
                          pair.prompt, np.ascontiguousarray(m), pair.scene_id, pair.seed)


@dataclass
class DatasetSample:
    sample_id: str
    prompt: str
    scene: str
    path_a: str
    path_b: str
    path_label: str


class Dataset:
    """Handle over an on-disk dataset; loads lazily and caches arrays."""

    def __init__(self, samples, root):
        self.samples = samples
        self.root = root
        self._cache = {}

    def __len__(self):
        return len(self.samples)

    def prompts(self):
        return sorted({s.prompt for s in self.samples})

    def load(self, i):
        """Returns (img_a (3,H,W), img_b (3,H,W), mask (1,H,W))."""
        if i not in self._cache:
            s = self.samples[i]
            try:
                img_a = pngio.load_rgb(s.path_a)
                img_b = pngio.load_rgb(s.path_b)
                mask = pngio.load_mask(s.path_label)[None]
            except OSError as exc:
                raise DatasetError(f"sample {s.sample_id}: cannot read {exc.filename or exc}") from exc
            self._cache[i] = (img_a, img_b, mask)
        return self._cache[i]

    def pair(self, i):
        s = self.samples[i]
        img_a, img_b, mask = self.load(i)
        return BiTemporalPair(img_a, img_b, s.prompt, mask, s.scene, 0)


def write_dataset(pairs, out_dir):
    """Lay out pairs as A/<id>.png, B/<id>.png, label/<id>.png plus an
    index.json of {id, prompt, scene} records.  Sample ids are
    "<scene_id>_<prompt>" and must be unique."""
    for sub in ("A", "B", "label"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    index = []
    seen = set()
    for pair in pairs:
        sample_id = f"{pair.scene_id}_{pair.prompt}"
        if sample_id in seen:
            raise DatasetError(f"duplicate sample id {sample_id}")
        seen.add(sample_id)
        pngio.save_rgb(os.path.join(out_dir, "A", f"{sample_id}.png"), pair.img_a)
        pngio.save_rgb(os.path.join(out_dir, "B", f"{sample_id}.png"), pair.img_b)
        pngio.save_mask(os.path.join(out_dir, "label", f"{sample_id}.png"), pair.mask)
        index.append({"id": sample_id, "prompt": pair.prompt, "scene": pair.scene_id})
    with open(os.path.join(out_dir, "index.json"), "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=1, ensure_ascii=False)
    return len(index)


def read_dataset(root):
    index_path = os.path.join(root, "index.json")
    if not os.path.isfile(index_path):
        raise DatasetError(f"missing index file {index_path}")
    try:
        with open(index_path, encoding="utf-8") as fh:
            index = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot parse {index_path}: {exc}") from exc
    if not isinstance(index, list):
        raise DatasetError(f"{index_path}: expected a list of samples")

    samples = []
    for k, entry in enumerate(index):
        if not isinstance(entry, dict) or "id" not in entry or "prompt" not in entry:
            raise DatasetError(f"{index_path}: entry {k} malformed, needs id and prompt: {entry!r}")
        sid = entry["id"]
        paths = {sub: os.path.join(root, sub, f"{sid}.png") for sub in ("A", "B", "label")}
        for sub, path in paths.items():
            if not os.path.isfile(path):
                raise DatasetError(f"sample {sid}: missing file {path}")
        samples.append(DatasetSample(
            sample_id=sid, prompt=entry["prompt"], scene=entry.get("scene", sid),
            path_a=paths["A"], path_b=paths["B"], path_label=paths["label"]))
    return Dataset(samples, root)


def generate_dataset(out_dir, scenes, h, w, seed, classes=("building", "road"),
                     no_event_fraction=0.0):
    """Sample scene specs, render them, and write a dataset directory.

    Returns the number of samples written.  With no_event_fraction > 0 a
    matching share of scenes carries no events and contributes all-zero
    "change" pairs.
    """
    rng = np.random.default_rng(seed)
    pairs = []
    for k in range(scenes):
        scene_id = f"scene{k:05d}"
        if rng.random() < no_event_fraction:
            spec = SceneSpec(scene_id=scene_id, seed=int(rng.integers(0, 2 ** 31 - 1)))
        else:
            spec = sample_scene_spec(scene_id, rng, h, w, classes=classes)
        pairs.extend(generate_scene(spec, h, w))
    return write_dataset(pairs, out_dir)
