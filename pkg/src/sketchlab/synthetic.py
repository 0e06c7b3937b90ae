"""Synthetic paired photo/sketch instances standing in for real FG-SBIR data.

Each class owns a template composed of 2-4 primitive outlines (ellipse,
polygon, zig-zag); each instance draws continuous parameters around the
template, renders a filled photo and a jittered outline sketch from the same
parameters, and optionally appends short random scribbles flagged as noise.
All shapes live inside a 5% margin of the unit canvas.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sketch import RasterCanvas, VectorSketch, rasterize, sketch_from_arrays

MARGIN = 0.05
_MIN_RADIUS = 0.04  # degenerate-shape rejection floor


@dataclass(frozen=True)
class SyntheticInstance:
    instance_id: int
    class_id: int
    photo: RasterCanvas
    sketch: VectorSketch
    noise_mask: tuple

    def __post_init__(self):
        mask = tuple(bool(b) for b in self.noise_mask)
        if len(mask) != self.sketch.num_strokes:
            raise ValueError("noise_mask length must equal the stroke count")
        if mask and all(mask):
            raise ValueError("an instance needs at least one non-noise stroke")
        object.__setattr__(self, "noise_mask", mask)

    def clean_sketch(self) -> VectorSketch:
        """Sketch with the injected noise strokes removed."""
        return self.sketch.select([not m for m in self.noise_mask])


def _clip01(a):
    return np.clip(a, 0.0, 1.0)


def _ellipse_outline(cx, cy, rx, ry, rot, n_pts=16):
    t = np.linspace(0.0, 2.0 * np.pi, n_pts)
    x = rx * np.cos(t)
    y = ry * np.sin(t)
    xr = cx + x * np.cos(rot) - y * np.sin(rot)
    yr = cy + x * np.sin(rot) + y * np.cos(rot)
    return np.stack([xr, yr], axis=1)


def _polygon_vertices(cx, cy, radius, n_vert, phase):
    t = phase + np.linspace(0.0, 2.0 * np.pi, n_vert, endpoint=False)
    pts = np.stack([cx + radius * np.cos(t), cy + radius * np.sin(t)], axis=1)
    return np.concatenate([pts, pts[:1]], axis=0)  # closed outline


def _zigzag(x0, y0, angle, length, n_teeth, amplitude):
    steps = np.linspace(0.0, length, 2 * n_teeth + 1)
    offs = amplitude * np.where(np.arange(len(steps)) % 2 == 1, 1.0, -1.0)
    offs[0] = 0.0
    ca, sa = np.cos(angle), np.sin(angle)
    x = x0 + steps * ca - offs * sa
    y = y0 + steps * sa + offs * ca
    return np.stack([x, y], axis=1)


def _fill_ellipse(grid, cx, cy, rx, ry, rot):
    h, w = grid.shape
    ys, xs = np.mgrid[0:h, 0:w]
    x = xs / (w - 1) - cx
    y = ys / (h - 1) - cy
    u = x * np.cos(rot) + y * np.sin(rot)
    v = -x * np.sin(rot) + y * np.cos(rot)
    grid[(u / rx) ** 2 + (v / ry) ** 2 <= 1.0] = 1.0


def _fill_polygon(grid, verts):
    # even-odd ray casting, vectorised over the pixel grid
    h, w = grid.shape
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs / (w - 1)
    py = ys / (h - 1)
    inside = np.zeros(grid.shape, dtype=bool)
    v = verts[:-1] if np.allclose(verts[0], verts[-1]) else verts
    n = len(v)
    for i in range(n):
        x0, y0 = v[i]
        x1, y1 = v[(i + 1) % n]
        cond = (y0 <= py) != (y1 <= py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xcross = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= cond & (px < xcross)
    grid[inside] = 1.0


class _Primitive:
    """One outline primitive: base parameters plus per-instance jitter."""

    def __init__(self, kind, base, jitter):
        self.kind = kind
        self.base = np.asarray(base, dtype=np.float64)
        self.jitter = np.asarray(jitter, dtype=np.float64)

    def sample_params(self, rng):
        return self.base + self.jitter * rng.standard_normal(len(self.base))


def _make_class_template(rng) -> list:
    """Random composition of 2-4 primitives inside the margin box."""
    n_prims = int(rng.integers(2, 5))
    prims = []
    for _ in range(n_prims):
        kind = ["ellipse", "polygon", "zigzag"][int(rng.integers(0, 3))]
        cx, cy = rng.uniform(0.25, 0.75, size=2)
        if kind == "ellipse":
            base = [cx, cy, rng.uniform(0.08, 0.2), rng.uniform(0.08, 0.2),
                    rng.uniform(0.0, np.pi)]
            jitter = [0.01, 0.01, 0.02, 0.02, 0.05]
        elif kind == "polygon":
            n_vert = int(rng.integers(3, 6))
            base = [cx, cy, rng.uniform(0.09, 0.2), float(n_vert),
                    rng.uniform(0.0, 2.0 * np.pi)]
            jitter = [0.01, 0.01, 0.02, 0.0, 0.08]
        else:
            base = [rng.uniform(0.1, 0.4), rng.uniform(0.15, 0.85),
                    rng.uniform(-0.4, 0.4), rng.uniform(0.3, 0.55),
                    float(rng.integers(3, 6)), rng.uniform(0.03, 0.07)]
            jitter = [0.01, 0.01, 0.04, 0.03, 0.0, 0.008]
        prims.append(_Primitive(kind, base, jitter))
    return prims


def _instance_geometry(template, rng):
    """Sample instance parameters, resampling degenerate (zero-area) draws."""
    outlines = []
    fills = []
    for prim in template:
        for _ in range(32):
            p = prim.sample_params(rng)
            if prim.kind == "ellipse" and min(p[2], p[3]) >= _MIN_RADIUS:
                break
            if prim.kind == "polygon" and p[2] >= _MIN_RADIUS:
                break
            if prim.kind == "zigzag" and p[3] >= 0.1 and p[5] >= 0.01:
                break
        else:
            raise RuntimeError("could not sample a non-degenerate primitive")
        if prim.kind == "ellipse":
            outlines.append(_ellipse_outline(*p))
            fills.append(("ellipse", p))
        elif prim.kind == "polygon":
            verts = _polygon_vertices(p[0], p[1], p[2], int(p[3]), p[4])
            outlines.append(verts)
            fills.append(("polygon", verts))
        else:
            zz = _zigzag(p[0], p[1], p[2], p[3], int(p[4]), p[5])
            outlines.append(zz)
            fills.append(("zigzag", zz))
    return outlines, fills


def _render_photo(fills, height, width) -> RasterCanvas:
    grid = np.zeros((height, width), dtype=np.float64)
    for kind, payload in fills:
        if kind == "ellipse":
            cx, cy, rx, ry, rot = payload
            _fill_ellipse(grid, cx, cy, rx, ry, rot)
        elif kind == "polygon":
            _fill_polygon(grid, payload)
        else:
            stroke_canvas = rasterize(sketch_from_arrays([_clip01(payload)]),
                                      height, width, line_width=2)
            grid = np.maximum(grid, stroke_canvas.intensities)
    return RasterCanvas(grid)


def make_noise_stroke(rng) -> np.ndarray:
    """Short random scribble: 3-6 points random-walking across the canvas."""
    n = int(rng.integers(3, 7))
    pts = np.zeros((n, 2))
    pts[0] = rng.uniform(MARGIN, 1.0 - MARGIN, size=2)
    steps = rng.uniform(-0.15, 0.15, size=(n - 1, 2))
    pts[1:] = pts[0] + np.cumsum(steps, axis=0)
    return _clip01(pts)


def gen_synthetic_dataset(seed: int, n_classes: int, n_instances_per_class: int,
                          noise_strokes_per_sketch: int = 0,
                          height: int = 32, width: int = 32,
                          jitter: float = 0.006) -> list[SyntheticInstance]:
    """Deterministic instance-level dataset of paired photos and sketches."""
    if n_classes < 1 or n_instances_per_class < 1:
        raise ValueError("counts must be >= 1")
    if noise_strokes_per_sketch < 0:
        raise ValueError("noise_strokes_per_sketch must be >= 0")
    rng = np.random.Generator(np.random.PCG64(seed))
    instances = []
    next_id = 0
    for class_id in range(n_classes):
        template = _make_class_template(rng)
        for _ in range(n_instances_per_class):
            outlines, fills = _instance_geometry(template, rng)
            photo = _render_photo(fills, height, width)
            strokes = [_clip01(o + jitter * rng.standard_normal(o.shape)) for o in outlines]
            mask = [False] * len(strokes)
            for _ in range(noise_strokes_per_sketch):
                strokes.append(make_noise_stroke(rng))
                mask.append(True)
            instances.append(SyntheticInstance(
                instance_id=next_id, class_id=class_id,
                photo=photo, sketch=sketch_from_arrays(strokes),
                noise_mask=tuple(mask)))
            next_id += 1
    return instances


def with_fresh_noise(instance: SyntheticInstance, n_strokes: int, rng) -> SyntheticInstance:
    """Copy of an instance with its noise strokes replaced by fresh scribbles.

    Decouples query-time noise from whatever a model may have memorised about
    the training draws; the clean strokes and the photo are unchanged.
    """
    clean = [s.coords() for s, m in zip(instance.sketch.strokes, instance.noise_mask) if not m]
    strokes = clean + [make_noise_stroke(rng) for _ in range(n_strokes)]
    mask = [False] * len(clean) + [True] * n_strokes
    return SyntheticInstance(instance.instance_id, instance.class_id,
                             instance.photo, sketch_from_arrays(strokes), tuple(mask))


def inject_donor_noise(instance: SyntheticInstance, donor: SyntheticInstance,
                       n_strokes: int, rng) -> SyntheticInstance:
    """Replace noise strokes with strokes lifted from a distractor's sketch.

    Used to build the hard case where noise pixels overlap another gallery
    item: the donor's own outline strokes are appended, flagged as noise.
    """
    clean = [s.coords() for s, m in zip(instance.sketch.strokes, instance.noise_mask) if not m]
    donor_strokes = [s.coords() for s, m in zip(donor.sketch.strokes, donor.noise_mask) if not m]
    picks = rng.choice(len(donor_strokes), size=min(n_strokes, len(donor_strokes)), replace=False)
    noisy = clean + [donor_strokes[i] for i in picks]
    mask = [False] * len(clean) + [True] * len(picks)
    return SyntheticInstance(instance.instance_id, instance.class_id,
                             instance.photo, sketch_from_arrays(noisy), tuple(mask))


# -- file io -----------------------------------------------------------------
#
# Sketches: line-delimited JSON records; photos: 8-bit grayscale PGM files
# named "<instance_id>.pgm" in the same directory.

def save_dataset(instances, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "sketches.jsonl"
    with open(path, "w") as f:
        for inst in instances:
            rec = {
                "instance_id": inst.instance_id,
                "class_id": inst.class_id,
                "strokes": [[[float(x), float(y)] for x, y in s.coords()]
                            for s in inst.sketch.strokes],
                "noise_mask": list(inst.noise_mask),
            }
            f.write(json.dumps(rec) + "\n")
            (directory / f"{inst.instance_id}.pgm").write_bytes(inst.photo.to_pgm_bytes())
    return path


def load_dataset(directory) -> list[SyntheticInstance]:
    directory = Path(directory)
    instances = []
    with open(directory / "sketches.jsonl") as f:
        for line in f:
            rec = json.loads(line)
            photo = RasterCanvas.from_pgm_bytes(
                (directory / f"{rec['instance_id']}.pgm").read_bytes())
            instances.append(SyntheticInstance(
                instance_id=rec["instance_id"], class_id=rec["class_id"],
                photo=photo, sketch=VectorSketch.from_point_lists(rec["strokes"]),
                noise_mask=tuple(rec["noise_mask"])))
    return instances
