"""Vector/raster sketch data model and geometric preprocessing.

A sketch lives in a normalised [0,1] x [0,1] canvas as an ordered list of
strokes; each stroke is an ordered run of pen points.  Pen state follows the
three-way one-hot convention (touching / lifted / end-of-drawing): every
interior point of a stroke is `touching`, the last point of a stroke is
`lifted`, and only the last point of the last stroke carries `end`.

Rasterization maps normalised coordinates to pixels with round-half-up on
x*(W-1) and draws binary-intensity segments with integer (Bresenham) line
traversal, so pixel-exact tests are possible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PEN_TOUCH = (1.0, 0.0, 0.0)
PEN_LIFT = (0.0, 1.0, 0.0)
PEN_END = (0.0, 0.0, 1.0)


@dataclass(frozen=True)
class PenPoint:
    x: float
    y: float
    pen_state: tuple = PEN_TOUCH

    def __post_init__(self):
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ValueError(f"point ({self.x}, {self.y}) outside the unit canvas")
        s = tuple(self.pen_state)
        if sorted(s) != [0.0, 0.0, 1.0]:
            raise ValueError(f"pen_state {s} is not one-hot")
        object.__setattr__(self, "pen_state", s)


@dataclass(frozen=True)
class Stroke:
    points: tuple

    def __post_init__(self):
        pts = tuple(self.points)
        if len(pts) < 1:
            raise ValueError("a stroke needs at least one point")
        for p in pts[:-1]:
            if p.pen_state != PEN_TOUCH:
                raise ValueError("interior stroke points must be pen-touching")
        if pts[-1].pen_state == PEN_TOUCH:
            raise ValueError("the final stroke point must be lifted or end-of-drawing")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    def coords(self) -> np.ndarray:
        """(N, 2) float64 array of the stroke's x,y coordinates."""
        return np.array([[p.x, p.y] for p in self.points], dtype=np.float64)


@dataclass(frozen=True)
class VectorSketch:
    strokes: tuple

    def __post_init__(self):
        strokes = tuple(self.strokes)
        for i, s in enumerate(strokes):
            last = s.points[-1].pen_state
            if i < len(strokes) - 1 and last == PEN_END:
                raise ValueError("end-of-drawing may only appear on the final stroke")
        object.__setattr__(self, "strokes", strokes)

    @property
    def num_strokes(self) -> int:
        return len(self.strokes)

    @property
    def total_points(self) -> int:
        return sum(len(s) for s in self.strokes)

    def is_empty(self) -> bool:
        return len(self.strokes) == 0

    def stroke_arrays(self) -> list[np.ndarray]:
        return [s.coords() for s in self.strokes]

    def point_array(self) -> np.ndarray:
        if not self.strokes:
            return np.zeros((0, 2), dtype=np.float64)
        return np.concatenate([s.coords() for s in self.strokes], axis=0)

    def five_element(self) -> np.ndarray:
        """(N, 5) rows of (x, y, q_touch, q_lift, q_end)."""
        rows = []
        for s in self.strokes:
            for p in s.points:
                rows.append((p.x, p.y) + p.pen_state)
        return np.array(rows, dtype=np.float64).reshape(-1, 5)

    def select(self, mask) -> "VectorSketch":
        """Sketch restricted to strokes where mask is true."""
        kept = [s.coords() for s, m in zip(self.strokes, mask) if m]
        return sketch_from_arrays(kept)

    @staticmethod
    def from_point_lists(point_lists) -> "VectorSketch":
        return sketch_from_arrays([np.asarray(pl, dtype=np.float64) for pl in point_lists])


def _canonical_stroke(coords: np.ndarray, is_last: bool) -> Stroke:
    pts = []
    n = len(coords)
    for i, (x, y) in enumerate(coords):
        if i < n - 1:
            state = PEN_TOUCH
        else:
            state = PEN_END if is_last else PEN_LIFT
        pts.append(PenPoint(float(x), float(y), state))
    return Stroke(tuple(pts))


def sketch_from_arrays(stroke_coords) -> VectorSketch:
    """Build a sketch from (N_i, 2) arrays, assigning canonical pen states."""
    stroke_coords = [np.asarray(c, dtype=np.float64).reshape(-1, 2) for c in stroke_coords]
    stroke_coords = [c for c in stroke_coords if len(c) > 0]
    k = len(stroke_coords)
    return VectorSketch(tuple(
        _canonical_stroke(c, is_last=(i == k - 1)) for i, c in enumerate(stroke_coords)
    ))


@dataclass(frozen=True)
class RasterCanvas:
    intensities: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.intensities, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("canvas must be a 2-D intensity grid")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("canvas intensities must lie in [0, 1]")
        object.__setattr__(self, "intensities", arr)

    @property
    def height(self) -> int:
        return self.intensities.shape[0]

    @property
    def width(self) -> int:
        return self.intensities.shape[1]

    def to_pgm_bytes(self) -> bytes:
        h, w = self.intensities.shape
        pixels = np.floor(self.intensities * 255.0 + 0.5).astype(np.uint8)
        return b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes()

    @staticmethod
    def from_pgm_bytes(raw: bytes) -> "RasterCanvas":
        fields = []
        pos = 0
        while len(fields) < 4:
            while pos < len(raw) and raw[pos:pos + 1].isspace():
                pos += 1
            if raw[pos:pos + 1] == b"#":
                while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                    pos += 1
                continue
            start = pos
            while pos < len(raw) and not raw[pos:pos + 1].isspace():
                pos += 1
            fields.append(raw[start:pos])
        pos += 1  # single whitespace after maxval
        magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
        if magic != b"P5":
            raise ValueError("not a binary PGM (P5) file")
        pixels = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=pos)
        return RasterCanvas(pixels.reshape(h, w).astype(np.float64) / float(maxval))


# -- geometry ops ------------------------------------------------------------

def _perp_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Perpendicular distance of each point from segment line a-b."""
    d = b - a
    seg_len = np.hypot(d[0], d[1])
    if seg_len == 0.0:
        return np.hypot(points[:, 0] - a[0], points[:, 1] - a[1])
    return np.abs(d[0] * (a[1] - points[:, 1]) - d[1] * (a[0] - points[:, 0])) / seg_len


def rdp_simplify(stroke: Stroke, epsilon: float) -> Stroke:
    """Ramer-Douglas-Peucker polyline simplification.

    Keeps the first and last points; every removed point lies within `epsilon`
    perpendicular distance of the simplified polyline.  Single-point strokes
    are returned unchanged.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    coords = stroke.coords()
    n = len(coords)
    if n <= 2:
        return stroke
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        lo, hi = stack.pop()
        if hi - lo < 2:
            continue
        mid = coords[lo + 1:hi]
        dists = _perp_distance(mid, coords[lo], coords[hi])
        imax = int(np.argmax(dists))
        if dists[imax] > epsilon:
            split = lo + 1 + imax
            keep[split] = True
            stack.append((lo, split))
            stack.append((split, hi))
    kept_idx = np.flatnonzero(keep)
    pts = tuple(stroke.points[i] for i in kept_idx)
    return Stroke(pts)


def _pixel(value: float, extent: int) -> int:
    # round-half-up of value * (extent - 1)
    return int(np.floor(value * (extent - 1) + 0.5))


def _bresenham(r0: int, c0: int, r1: int, c1: int):
    """Integer line traversal; yields (row, col) including both endpoints."""
    dr = abs(r1 - r0)
    dc = abs(c1 - c0)
    sr = 1 if r1 >= r0 else -1
    sc = 1 if c1 >= c0 else -1
    if dc >= dr:
        err = dc // 2
        r = r0
        for c in range(c0, c1 + sc, sc):
            yield r, c
            err -= dr
            if err < 0:
                r += sr
                err += dc
    else:
        err = dr // 2
        c = c0
        for r in range(r0, r1 + sr, sr):
            yield r, c
            err -= dc
            if err < 0:
                c += sc
                err += dr


def rasterize(sketch: VectorSketch, height: int = 32, width: int = 32,
              line_width: int = 1) -> RasterCanvas:
    """Render a vector sketch to a binary-intensity pixel grid.

    Segments are drawn only between consecutive points of the same stroke, so
    pen-up gaps stay blank.  An empty sketch gives an all-background canvas.
    """
    if height < 8 or width < 8:
        raise ValueError("canvas must be at least 8x8")
    if line_width < 1:
        raise ValueError("line_width must be >= 1")
    grid = np.zeros((height, width), dtype=np.float64)
    lo = -((line_width - 1) // 2)
    hi = line_width // 2
    for coords in sketch.stroke_arrays():
        px = [( _pixel(y, height), _pixel(x, width)) for x, y in coords]
        if len(px) == 1:
            segs = [(px[0], px[0])]
        else:
            segs = list(zip(px[:-1], px[1:]))
        for (r0, c0), (r1, c1) in segs:
            for r, c in _bresenham(r0, c0, r1, c1):
                grid[max(0, r + lo):min(height, r + hi + 1),
                     max(0, c + lo):min(width, c + hi + 1)] = 1.0
    return RasterCanvas(grid)


def stroke_pixel_masks(sketch: VectorSketch, height: int = 32, width: int = 32,
                       line_width: int = 1) -> np.ndarray:
    """(K, H, W) boolean pixel coverage of each stroke rendered alone.

    Because rendering is a binary per-stroke union, the canvas of any stroke
    subset is the elementwise OR of these masks; this makes exhaustive
    subset enumeration cheap.
    """
    masks = []
    for coords in sketch.stroke_arrays():
        single = rasterize(sketch_from_arrays([coords]), height, width, line_width)
        masks.append(single.intensities == 1.0)
    if not masks:
        return np.zeros((0, height, width), dtype=bool)
    return np.stack(masks, axis=0)


def partial_prefix(sketch: VectorSketch, t: int, total_steps: int) -> VectorSketch:
    """First floor(t*N/total_steps) points, regrouped into strokes.

    Original stroke boundaries are preserved; a stroke cut mid-way contributes
    its leading run as one stroke.  t=0 gives the empty sketch, t=total_steps
    the full one.
    """
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not (0 <= t <= total_steps):
        raise ValueError("t must lie in [0, total_steps]")
    n_keep = (t * sketch.total_points) // total_steps
    out = []
    remaining = n_keep
    for coords in sketch.stroke_arrays():
        if remaining <= 0:
            break
        take_n = min(len(coords), remaining)
        out.append(coords[:take_n])
        remaining -= take_n
    return sketch_from_arrays(out)


# -- offset representation ------------------------------------------------------

@dataclass(frozen=True)
class OffsetSequence:
    """Offset encoding of a sketch: an origin point plus per-step deltas.

    `offsets` rows are (dx, dy, q_touch, q_lift, q_end) where the pen state is
    that of the destination point.
    """
    origin_x: float
    origin_y: float
    origin_pen: tuple
    offsets: np.ndarray

    def __len__(self):
        return len(self.offsets)


def to_offsets(sketch: VectorSketch) -> OffsetSequence:
    five = sketch.five_element()
    if len(five) == 0:
        raise ValueError("cannot encode an empty sketch as offsets")
    deltas = five[1:].copy()
    deltas[:, 0] -= five[:-1, 0]
    deltas[:, 1] -= five[:-1, 1]
    return OffsetSequence(float(five[0, 0]), float(five[0, 1]),
                          tuple(five[0, 2:5]), deltas)


def to_absolute(seq: OffsetSequence) -> VectorSketch:
    n = len(seq.offsets) + 1
    pts = np.zeros((n, 5), dtype=np.float64)
    pts[0, 0] = seq.origin_x
    pts[0, 1] = seq.origin_y
    pts[0, 2:5] = seq.origin_pen
    if n > 1:
        pts[1:, 0] = seq.origin_x + np.cumsum(seq.offsets[:, 0])
        pts[1:, 1] = seq.origin_y + np.cumsum(seq.offsets[:, 1])
        pts[1:, 2:5] = seq.offsets[:, 2:5]
    # cumsum round-off can nudge a boundary coordinate past 1.0 by ~1e-16
    pts[:, 0:2] = np.clip(pts[:, 0:2], 0.0, 1.0)
    strokes = []
    current = []
    for x, y, q1, q2, q3 in pts:
        current.append((x, y))
        if q2 == 1.0 or q3 == 1.0:
            strokes.append(np.array(current))
            current = []
    if current:
        strokes.append(np.array(current))
    return sketch_from_arrays(strokes)
