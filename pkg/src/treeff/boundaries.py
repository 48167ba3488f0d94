"""Decision-boundary export for 2-D inputs.

Every node with children splits its reachable region along the line
w.x + b = 0.  Walking each tree root-to-leaf and clipping the input
square against the half-planes chosen so far yields, per node, both the
split line and the polygon in which that split is actually reachable.

Models usually see an affine image of the raw task domain (the
checkerboard pipeline feeds 2x - 1), so every export takes the transform
x_block = scale * x_raw + offset and returns raw-domain coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from treeff.fff import ForestParams, forward_sequential, num_leaves, num_nodes

UNIT_SQUARE = ((0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0))
IDENTITY = (1.0, (0.0, 0.0))
CENTERED = (2.0, (-1.0, -1.0))  # raw [0,1)^2 -> block [-1,1)^2


@dataclass
class BoundarySegment:
    """One routing split mapped to the raw input domain.

    (w1, w2, b) describe the line w.x + b = 0 in raw coordinates; clip_poly
    is the polygon of raw inputs that reach this node, so the drawable part
    of the line is its intersection with clip_poly.
    """

    tree: int
    level: int
    slot: int
    w1: float
    w2: float
    b: float
    clip_poly: list[tuple[float, float]]


def line_to_raw(w: np.ndarray, b: float, transform=IDENTITY) -> tuple[np.ndarray, float]:
    """Rewrite w.(s*x + o) + b = 0 as w_raw.x + b_raw = 0."""
    scale, offset = transform
    w = np.asarray(w, dtype=np.float64)
    off = np.asarray(offset, dtype=np.float64)
    return scale * w, float(w @ off + b)


def clip_polygon(poly, w, b, keep_nonneg: bool) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clip of a convex polygon against w.x + b >= 0
    (or the complementary half-plane when keep_nonneg is False)."""
    w = np.asarray(w, dtype=np.float64)
    sign = 1.0 if keep_nonneg else -1.0
    out = []
    k = len(poly)
    for i in range(k):
        a = np.asarray(poly[i], dtype=np.float64)
        c = np.asarray(poly[(i + 1) % k], dtype=np.float64)
        fa = sign * (w @ a + b)
        fc = sign * (w @ c + b)
        if fa >= 0.0:
            out.append((float(a[0]), float(a[1])))
        if (fa >= 0.0) != (fc >= 0.0) and fa != fc:
            t = fa / (fa - fc)
            p = a + t * (c - a)
            out.append((float(p[0]), float(p[1])))
    return out


def boundary_segments(
    params: ForestParams,
    transform=IDENTITY,
    square=UNIT_SQUARE,
) -> list[BoundarySegment]:
    """All routing splits of a 2-input forest, each clipped to the region
    of the raw domain that reaches it.  Nodes whose region collapses to
    fewer than 3 vertices (unreachable under the square) are skipped."""
    if params.d_in != 2:
        raise ValueError(f"boundary export needs d_in=2, got {params.d_in}")
    segments = []
    for p in range(params.trees):

        def walk(node: int, level: int, poly) -> None:
            if len(poly) < 3:
                return
            w_raw, b_raw = line_to_raw(params.w_in[p, node], params.b_in[p, node], transform)
            if level < params.depth:
                segments.append(BoundarySegment(
                    tree=p,
                    level=level,
                    slot=node - (2**level - 1),
                    w1=float(w_raw[0]),
                    w2=float(w_raw[1]),
                    b=float(b_raw),
                    clip_poly=list(poly),
                ))
                # z >= 0 routes to the higher-index child
                walk(2 * node + 2, level + 1, clip_polygon(poly, w_raw, b_raw, True))
                walk(2 * node + 1, level + 1, clip_polygon(poly, w_raw, b_raw, False))

        walk(0, 0, [tuple(map(float, v)) for v in square])
    return segments


def segment_on_region(seg: BoundarySegment) -> list[tuple[float, float]]:
    """Endpoints of the split line inside its clip polygon (empty if the
    line misses the region)."""
    w = np.array([seg.w1, seg.w2])
    pts = []
    k = len(seg.clip_poly)
    for i in range(k):
        a = np.asarray(seg.clip_poly[i])
        c = np.asarray(seg.clip_poly[(i + 1) % k])
        fa = float(w @ a + seg.b)
        fc = float(w @ c + seg.b)
        if (fa >= 0.0) != (fc >= 0.0) and fa != fc:
            t = fa / (fa - fc)
            p = a + t * (c - a)
            pts.append((float(p[0]), float(p[1])))
    if len(pts) < 2:
        return []
    arr = np.array(pts)
    spread = arr.max(axis=0) - arr.min(axis=0)
    axis = int(np.argmax(spread))
    order = np.argsort(arr[:, axis])
    return [tuple(arr[order[0]]), tuple(arr[order[-1]])]


def _poly_str(poly) -> str:
    return "|".join(f"{x:.17g}:{y:.17g}" for x, y in poly)


def segments_to_csv(segments: list[BoundarySegment]) -> str:
    lines = ["tree,level,slot,w1,w2,b,clip_poly"]
    for s in segments:
        lines.append(
            f"{s.tree},{s.level},{s.slot},{s.w1:.17g},{s.w2:.17g},{s.b:.17g},"
            f"{_poly_str(s.clip_poly)}"
        )
    return "\n".join(lines) + "\n"


def raster_leaf_ids(
    params: ForestParams,
    resolution: int = 128,
    transform=IDENTITY,
) -> np.ndarray:
    """(P, resolution, resolution) leaf slot reached from each pixel center
    of the raw unit square; row 0 is y=0 (image bottom)."""
    if params.d_in != 2:
        raise ValueError(f"raster export needs d_in=2, got {params.d_in}")
    scale, offset = transform
    centers = (np.arange(resolution) + 0.5) / resolution
    gx, gy = np.meshgrid(centers, centers)
    raw = np.stack([gx.ravel(), gy.ravel()], axis=1)
    x = scale * raw + np.asarray(offset, dtype=np.float64)
    _, cache = forward_sequential(params, x, check=False)
    first_leaf = num_nodes(params.depth - 1) if params.depth > 0 else 0
    slots = cache.route.paths[:, :, -1] - first_leaf  # (pixels, P)
    return slots.T.reshape(params.trees, resolution, resolution)


def raster_to_pgm(grid: np.ndarray, maxval: int | None = None) -> str:
    """Plain-text (P2) PGM of one tree's leaf-id raster."""
    if grid.ndim != 2:
        raise ValueError(f"expected a 2-D raster, got shape {grid.shape}")
    if maxval is None:
        maxval = max(1, int(grid.max()))
    if grid.min() < 0 or grid.max() > maxval:
        raise ValueError("raster values out of PGM range")
    h, w = grid.shape
    lines = [f"P2", f"{w} {h}", f"{maxval}"]
    for row in grid:
        lines.append(" ".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


def palette_json(params: ForestParams) -> dict:
    """Gray level -> leaf identity mapping shared by all per-tree rasters."""
    return {
        "maxval": max(1, num_leaves(params.depth) - 1),
        "leaves": {
            str(slot): {"level": params.depth, "slot": slot}
            for slot in range(num_leaves(params.depth))
        },
    }
