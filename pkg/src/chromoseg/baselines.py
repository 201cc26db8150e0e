"""Non-neural comparison methods.

Both work on the merged three-class problem (background, chromosome, overlap)
because neither can tell which chromosome is which.  Predictions use label 1
for "either chromosome" and 3 for overlap.

Geometric resolver pipeline: binarise, trace the outer contour, simplify it
with Douglas-Peucker, pick the concave (reflex) vertices, and fill the
quadrilateral spanned by four of them as the crossing domain.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .dataset import to_u8
from .errors import ChromosegError, ConfigError, StructuralError
from .evaluation import evaluate, merge_chromosomes

# clockwise as displayed (rows down), starting west
_MOORE = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)]


class MethodInapplicable(ChromosegError):
    """The contour method cannot produce a crossing domain for this input."""


@dataclass(frozen=True)
class ThresholdModel:
    t_low: float
    t_high: float

    def __post_init__(self):
        if not 0 <= self.t_low < self.t_high <= 1:
            raise ConfigError(f"need 0 <= t_low < t_high <= 1, got {self.t_low}, {self.t_high}")

    @property
    def levels(self):
        """Thresholds as byte levels."""
        return int(round(self.t_low * 255)), int(round(self.t_high * 255))


def fit_threshold(images, labels):
    """Exhaustive search over byte-level threshold pairs ``a < b``.

    A pixel of byte value ``v`` is predicted background if ``v <= a``,
    chromosome if ``a < v <= b`` and overlap otherwise.  The pair with the
    fewest misclassified training pixels wins; ties go to the lexicographically
    smallest ``(a, b)``.
    """
    v = to_u8(images).ravel()
    y = merge_chromosomes(labels).ravel()
    hist = {c: np.bincount(v[y == c], minlength=256).astype(np.int64) for c in (0, 1, 3)}
    c0 = np.cumsum(hist[0])
    c1 = np.cumsum(hist[1])
    c3 = np.cumsum(hist[3])
    correct = c0[:, None] + (c1[None, :] - c1[:, None]) + (c3[-1] - c3[None, :])
    a_idx, b_idx = np.indices((256, 256))
    correct = np.where(a_idx < b_idx, correct, -1)
    a, b = np.unravel_index(int(np.argmax(correct)), correct.shape)
    return ThresholdModel(a / 255, b / 255)


def threshold_predict(model, image):
    v = to_u8(image)
    a, b = model.levels
    return np.where(v <= a, 0, np.where(v <= b, 1, 3)).astype(np.uint8)


@dataclass
class Polygon:
    """Closed polygon; ``vertices`` is ``(k, 2)`` as (x, y) = (column, row)."""

    vertices: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 2)

    def __len__(self):
        return len(self.vertices)

    @property
    def degenerate(self):
        return len(self.vertices) < 3

    def signed_area(self):
        """Shoelace area in (x, y); negative means counterclockwise on screen."""
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def trace_contour(mask):
    """Outer boundary of a single 4-connected blob by Moore-neighbour tracing.

    The result lists boundary pixel centres counterclockwise as displayed,
    starting from the top-most, left-most pixel.  Consecutive vertices are
    8-adjacent.  A one-pixel blob gives a one-vertex (degenerate) polygon.
    """
    mask = np.asarray(mask, bool)
    _, n = ndimage.label(mask)
    if n != 1:
        raise StructuralError(f"mask must contain exactly one 4-connected component, found {n}")
    padded = np.pad(mask, 1)
    rows, cols = np.nonzero(padded)
    start = (int(rows[0]), int(cols[0]))

    contour = [start]
    p, back = start, 0  # west of the first raster pixel is background
    second = None
    while True:
        for step in range(8):
            d = (back + step) % 8
            q = (p[0] + _MOORE[d][0], p[1] + _MOORE[d][1])
            if padded[q]:
                break
        else:
            break  # isolated pixel
        # stop when leaving the start pixel the same way as the first time
        if p == start and q == second:
            break
        if second is None:
            second = q
        # the neighbour examined just before the hit is background; resume
        # the scan from it, expressed relative to the new pixel
        prev = _MOORE[(d + 7) % 8]
        back = _MOORE.index((p[0] + prev[0] - q[0], p[1] + prev[1] - q[1]))
        contour.append(q)
        p = q
    if len(contour) > 1 and contour[-1] == start:
        contour.pop()
    pts = np.array([(c - 1, r - 1) for r, c in contour], dtype=np.float64)
    # tracing runs clockwise on screen; reverse but keep the start first
    pts = np.concatenate([pts[:1], pts[1:][::-1]])
    return Polygon(pts)


def _segment_distance(pts, a, b):
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.hypot(*(pts - a).T)
    t = np.clip((pts - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.hypot(*(pts - proj).T)


def douglas_peucker(points, epsilon):
    """Simplify an open polyline, keeping both endpoints.

    Returns the indices of the kept vertices.  Every dropped vertex lies within
    ``epsilon`` of the segment that replaces it.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n <= 2:
        return list(range(n))
    keep = np.zeros(n, bool)
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        i, j = stack.pop()
        if j - i < 2:
            continue
        d = _segment_distance(points[i + 1:j], points[i], points[j])
        k = int(np.argmax(d))
        if d[k] > epsilon:
            m = i + 1 + k
            keep[m] = True
            stack += [(i, m), (m, j)]
    return [int(i) for i in np.nonzero(keep)[0]]


def polygonal_approx(polygon, epsilon=2.0):
    """Douglas-Peucker on a closed polygon.

    The ring is cut at vertex 0 and at the vertex farthest from it, and both
    halves are simplified.  Output vertices are a subset of the input in the
    same order; ``epsilon == 0`` returns the input unchanged.
    """
    v = polygon.vertices
    if epsilon <= 0 or len(v) < 4:
        return Polygon(v.copy())
    far = int(np.argmax(np.hypot(*(v - v[0]).T)))
    if far == 0:
        return Polygon(v[:1].copy())
    first = douglas_peucker(v[:far + 1], epsilon)
    ring2 = np.concatenate([v[far:], v[:1]])
    second = [far + i for i in douglas_peucker(ring2, epsilon)][1:-1]
    return Polygon(v[first + second])


def interior_angles(polygon):
    """Interior angle at every vertex in degrees, for either orientation."""
    v = polygon.vertices
    e1 = v - np.roll(v, 1, axis=0)
    e2 = np.roll(v, -1, axis=0) - v
    cross = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    dot = (e1 * e2).sum(axis=1)
    turn = np.degrees(np.arctan2(cross, dot))
    sign = 1.0 if polygon.signed_area() >= 0 else -1.0
    return 180.0 - sign * turn


def find_remarkable_points(polygon, margin=10.0):
    """Indices of reflex vertices: interior angle above 180 + ``margin`` degrees."""
    if polygon.degenerate:
        return []
    return [int(i) for i in np.nonzero(interior_angles(polygon) > 180.0 + margin)[0]]


def _order_quad(points):
    points = np.asarray(points, dtype=np.float64)
    c = points.mean(axis=0)
    ang = np.arctan2(points[:, 1] - c[1], points[:, 0] - c[0])
    return points[np.argsort(ang, kind="stable")]


def crossing_domain(points, mask, tolerance=0.5):
    """Mask pixels inside the quadrilateral spanned by four points.

    The points are ordered by angle about their centroid.  A pixel belongs to
    the domain if its centre is inside the quadrilateral by the even-odd rule
    or within ``tolerance`` pixels of its boundary.

    Raises:
        MethodInapplicable: not exactly four points, or they span no area.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) != 4:
        raise MethodInapplicable(f"need exactly 4 remarkable points, got {len(points)}")
    quad = _order_quad(points)
    if abs(Polygon(quad).signed_area()) < 1e-9:
        raise MethodInapplicable("the four points are collinear (zero-area crossing domain)")
    mask = np.asarray(mask, bool)
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    px, py = xx.ravel(), yy.ravel()
    pts = np.stack([px, py], axis=1)
    inside = np.zeros(px.size, bool)
    near = np.zeros(px.size, bool)
    for k in range(4):
        (x1, y1), (x2, y2) = quad[k], quad[(k + 1) % 4]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < xint)
        near |= _segment_distance(pts, quad[k], quad[(k + 1) % 4]) <= tolerance
    return (inside | near).reshape(h, w) & mask


def enumerate_pairings(arms):
    """The three ways to join four arms into two chromosomes."""
    arms = list(arms)
    if len(arms) != 4 or len(set(arms)) != 4:
        raise StructuralError("need exactly four distinct arm ids")
    a = arms[0]
    out = []
    for b in arms[1:]:
        rest = tuple(x for x in arms[1:] if x != b)
        out.append(((a, b), rest))
    return out


def snap_to_concave_corners(points, mask, radius=1.5):
    """Move each point onto the nearest concave-corner pixel within ``radius``.

    An 8-connected boundary walks diagonally past the inner corner of a
    notch, so reflex vertices sit one pixel off it.  A concave-corner pixel is
    foreground with all four edge neighbours foreground and exactly one
    diagonal neighbour background.  Points with no such pixel nearby stay put.
    """
    mask = np.asarray(mask, bool)
    p = np.pad(mask, 1)
    h, w = mask.shape
    sh = lambda dy, dx: p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
    edges = sh(-1, 0) & sh(1, 0) & sh(0, -1) & sh(0, 1)
    diag_bg = sum((~sh(dy, dx)).astype(int) for dy in (-1, 1) for dx in (-1, 1))
    rows, cols = np.nonzero(mask & edges & (diag_bg == 1))
    corners = np.stack([cols, rows], axis=1).astype(np.float64)
    out = np.asarray(points, dtype=np.float64).copy()
    if not len(corners):
        return out
    for k, pt in enumerate(out):
        d = np.hypot(*(corners - pt).T)
        j = int(np.argmin(d))
        if d[j] <= radius:
            out[k] = corners[j]
    return out


def resolve_mask(fg, epsilon=2.0, margin=10.0):
    """Crossing domain of a binary foreground, or raise MethodInapplicable."""
    from .datagen import largest_component

    blob = ndimage.binary_fill_holes(largest_component(fg))
    if not blob.any():
        raise MethodInapplicable("empty foreground")
    poly = polygonal_approx(trace_contour(blob), epsilon)
    idx = find_remarkable_points(poly, margin)
    if len(idx) < 4:
        raise MethodInapplicable(f"only {len(idx)} remarkable points")
    if len(idx) > 4:
        angles = interior_angles(poly)
        # sharpest reflex vertices first; stable on polygon order
        idx = sorted(sorted(idx, key=lambda i: -angles[i])[:4])
    domain = crossing_domain(snap_to_concave_corners(poly.vertices[idx], blob), blob)
    if not domain.any():
        raise MethodInapplicable("crossing domain misses the foreground")
    return domain


def geometric_resolve(image, model, epsilon=2.0, margin=10.0):
    """Three-class prediction from contour geometry.

    Returns ``(prediction, applicable)``.  When the contour method does not
    apply, the prediction falls back to :func:`threshold_predict`.
    """
    fg = to_u8(image) > model.levels[0]
    try:
        domain = resolve_mask(fg, epsilon, margin)
    except (MethodInapplicable, StructuralError):
        return threshold_predict(model, image), False
    pred = fg.astype(np.uint8)
    pred[domain] = 3
    return pred, True


def threshold_report(model, images, labels):
    preds = np.stack([threshold_predict(model, im) for im in images]) if len(images) else \
        np.zeros_like(labels)
    return evaluate(preds, merge_chromosomes(labels))


def geometric_report(model, images, labels, epsilon=2.0, margin=10.0):
    preds, flags = [], []
    for im in images:
        p, ok = geometric_resolve(im, model, epsilon, margin)
        preds.append(p)
        flags.append(ok)
    preds = np.stack(preds) if preds else np.zeros_like(labels)
    frac = float(np.mean(flags)) if flags else 0.0
    return evaluate(preds, merge_chromosomes(labels), applicable_fraction=frac)
