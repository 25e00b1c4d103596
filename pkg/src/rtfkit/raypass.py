"""Ray-pass (vignetting) models on the ray-pass plane.

Grouping the dataset's input rays by field height and intersecting them
with the pass plane yields, per height, a set of passing and blocked
points. Two representations of the passing set are provided:

* an ellipse per tabulated height, linearly interpolated in between
  (robust for convex pupils);
* an intersection of circles whose centers drift linearly with field
  height (physically motivated; handles pupils cut by several apertures).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

PASS_TOL = 1e-9


class DegenerateInputError(ValueError):
    """Too few or collinear points for an ellipse fit."""


class CircleFitError(RuntimeError):
    """No tangent circle enclosing the points within iteration limits."""


@dataclass(frozen=True)
class Ellipse:
    """Axis-aligned ellipse with center on the y axis (meridional symmetry)."""

    center_y: float
    radius_x: float
    radius_y: float

    def __post_init__(self):
        if self.radius_x <= 0 or self.radius_y <= 0:
            raise ValueError("ellipse radii must be positive")

    def contains(self, x, y, tol=0.0):
        q = (np.asarray(x) / self.radius_x) ** 2 + (
            (np.asarray(y) - self.center_y) / self.radius_y
        ) ** 2
        return q <= 1.0 + tol

    @property
    def area(self):
        return math.pi * self.radius_x * self.radius_y


def min_vol_ellipse(points, tolerance=1e-6, max_iterations=10_000):
    """Minimum-volume enclosing ellipse, Khachiyan iteration.

    Points are mirrored about the y axis first, which forces the optimum to
    be axis-aligned with its center on the y axis; the returned radii are
    inflated minimally so that every input point is inside.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if pts.shape[0] < 3:
        raise DegenerateInputError(f"need >= 3 points, got {pts.shape[0]}")
    sym = np.vstack([pts, pts * np.array([-1.0, 1.0])])
    centered = sym - sym.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals[1] <= 1e-12 * max(svals[0], 1.0):
        raise DegenerateInputError("points are collinear")

    P = sym
    if P.shape[0] > 16:
        # the optimum depends only on hull vertices; shrinking the active
        # set keeps the iteration cost flat regardless of cloud size
        from scipy.spatial import ConvexHull, QhullError

        try:
            P = P[ConvexHull(P).vertices]
        except QhullError as e:
            raise DegenerateInputError(str(e)) from e
    N, d = P.shape
    Q = np.vstack([P.T, np.ones(N)])
    u = np.full(N, 1.0 / N)
    for _ in range(max_iterations):
        X = Q @ (u[:, None] * Q.T)
        M = np.einsum("ij,ji->i", Q.T, np.linalg.solve(X, Q))
        j = int(np.argmax(M))
        maximum = M[j]
        step = (maximum - d - 1.0) / ((d + 1.0) * (maximum - 1.0))
        new_u = (1.0 - step) * u
        new_u[j] += step
        if np.linalg.norm(new_u - u) < tolerance:
            u = new_u
            break
        u = new_u

    center = P.T @ u
    A = np.linalg.inv(P.T @ (u[:, None] * P) - np.outer(center, center)) / d
    # symmetry makes A diagonal and center_x zero up to iteration error;
    # enforce it exactly, then re-inflate so containment is guaranteed
    c_y = float(center[1])
    rx = 1.0 / math.sqrt(A[0, 0])
    ry = 1.0 / math.sqrt(A[1, 1])
    q = (pts[:, 0] / rx) ** 2 + ((pts[:, 1] - c_y) / ry) ** 2
    grow = math.sqrt(max(float(q.max()), 1.0)) * (1.0 + 1e-12)
    return Ellipse(center_y=c_y, radius_x=rx * grow, radius_y=ry * grow)


@dataclass(frozen=True)
class EllipseTable:
    """Per-field-height ellipses; None entries mark fully blocked heights."""

    positions: tuple[float, ...]
    ellipses: tuple[Ellipse | None, ...]
    pass_plane_offset: float

    def __post_init__(self):
        if len(self.positions) < 2:
            raise ValueError("need at least two tabulated positions")
        if len(self.positions) != len(self.ellipses):
            raise ValueError("positions and ellipses must align")
        if not all(b > a for a, b in zip(self.positions, self.positions[1:])):
            raise ValueError("positions must be strictly increasing")

    def _interpolate(self, y_hat):
        pos = self.positions
        if y_hat > pos[-1]:
            return None  # beyond the sampled field: the image circle ends here
        if y_hat <= pos[0]:
            return self.ellipses[0]
        i = int(np.searchsorted(pos, y_hat, side="right")) - 1
        i = min(i, len(pos) - 2)
        t = (y_hat - pos[i]) / (pos[i + 1] - pos[i])
        if t <= 0.0:
            return self.ellipses[i]
        if t >= 1.0:
            return self.ellipses[i + 1]
        lo, hi = self.ellipses[i], self.ellipses[i + 1]
        if lo is None or hi is None:
            return None
        return Ellipse(
            center_y=(1 - t) * lo.center_y + t * hi.center_y,
            radius_x=(1 - t) * lo.radius_x + t * hi.radius_x,
            radius_y=(1 - t) * lo.radius_y + t * hi.radius_y,
        )

    def passes(self, y_hat, point):
        ell = self._interpolate(float(y_hat))
        if ell is None:
            return False
        return bool(ell.contains(point[0], point[1], tol=PASS_TOL))

    def _arrays(self):
        cache = self.__dict__.get("_cached_arrays")
        if cache is None:
            pos = np.array(self.positions)
            blocked = np.array([e is None for e in self.ellipses])
            cy = np.array([0.0 if e is None else e.center_y for e in self.ellipses])
            rx = np.array([1.0 if e is None else e.radius_x for e in self.ellipses])
            ry = np.array([1.0 if e is None else e.radius_y for e in self.ellipses])
            cache = (pos, blocked, cy, rx, ry)
            self.__dict__["_cached_arrays"] = cache
        return cache

    def passes_batch(self, y_hat, px, py):
        y_hat = np.asarray(y_hat, dtype=float)
        px = np.asarray(px, dtype=float)
        py = np.asarray(py, dtype=float)
        pos, blocked, cy, rx, ry = self._arrays()
        n = len(pos)
        beyond = y_hat > pos[-1]
        yc = np.clip(y_hat, pos[0], pos[-1])
        i = np.clip(np.searchsorted(pos, yc, side="right") - 1, 0, n - 2)
        t = (yc - pos[i]) / (pos[i + 1] - pos[i])
        # at the exact endpoints use the single tabulated entry, so a
        # blocked neighbor cannot poison a tabulated passing height
        at_lo = t <= 0.0
        at_hi = t >= 1.0
        blk = np.where(
            at_lo, blocked[i], np.where(at_hi, blocked[i + 1], blocked[i] | blocked[i + 1])
        )
        cyv = (1 - t) * cy[i] + t * cy[i + 1]
        rxv = (1 - t) * rx[i] + t * rx[i + 1]
        ryv = (1 - t) * ry[i] + t * ry[i + 1]
        q = (px / rxv) ** 2 + ((py - cyv) / ryv) ** 2
        return ~beyond & ~blk & (q <= 1.0 + PASS_TOL)

    def field_limit(self):
        """Last tabulated height with a pass region (the image circle)."""
        limit = 0.0
        for p, e in zip(self.positions, self.ellipses):
            if e is not None:
                limit = p
        return limit

    def max_extent(self):
        """Radius of a disc (about the axis) covering every tabulated ellipse."""
        r = 0.0
        for e in self.ellipses:
            if e is not None:
                r = max(r, e.radius_x, abs(e.center_y) + e.radius_y)
        return r


def ellipse_pass(table, y_hat, point):
    """Containment test with linearly interpolated ellipse parameters."""
    return table.passes(y_hat, point)


def project_to_pass_plane(ds):
    """Group records by field height; returns {y_hat: (pass_xy, block_xy)}.

    Each input ray is advanced from the input plane by the pass-plane offset
    (a signed projection: virtual pupils behind the input plane work too).
    """
    offset = ds.planes.raypass_offset
    t = offset / ds.inputs[:, 5]
    px = ds.inputs[:, 0] + t * ds.inputs[:, 3]
    py = ds.inputs[:, 1] + t * ds.inputs[:, 4]
    blocked = ds.blocked_mask
    groups = {}
    for y_hat in ds.field_heights():
        m = ds.field_mask(y_hat)
        pts = np.stack([px[m], py[m]], axis=1)
        groups[float(y_hat)] = (pts[~blocked[m]], pts[blocked[m]])
    return groups


def fit_ellipse_table(ds, tolerance=1e-6):
    """One minimum-volume ellipse per field height with >= 3 passing rays."""
    groups = project_to_pass_plane(ds)
    positions, ellipses = [], []
    for y_hat in sorted(groups):
        passing, _ = groups[y_hat]
        positions.append(y_hat)
        if passing.shape[0] < 3:
            ellipses.append(None)
            continue
        try:
            ellipses.append(min_vol_ellipse(passing, tolerance=tolerance))
        except DegenerateInputError as e:
            warnings.warn(
                f"field height {y_hat:g}: degenerate ellipse fit ({e}); marked blocked",
                stacklevel=2,
            )
            ellipses.append(None)
    return EllipseTable(
        positions=tuple(positions),
        ellipses=tuple(ellipses),
        pass_plane_offset=ds.planes.raypass_offset,
    )


@dataclass(frozen=True)
class CirclePassModel:
    """Pass region = intersection of discs with linearly drifting centers.

    Disc i sits at (0, sensitivity_i * y_hat) with radius radius_i.
    """

    circles: tuple[tuple[float, float], ...]  # (radius, sensitivity)
    pass_plane_offset: float

    def __post_init__(self):
        if not self.circles:
            raise ValueError("need at least one circle")
        if any(r <= 0 for r, _ in self.circles):
            raise ValueError("circle radii must be positive")

    def passes(self, y_hat, point):
        x, y = float(point[0]), float(point[1])
        for r, s in self.circles:
            if math.hypot(x, y - s * y_hat) > r + PASS_TOL:
                return False
        return True

    def passes_batch(self, y_hat, px, py):
        y_hat = np.asarray(y_hat, dtype=float)
        px = np.asarray(px, dtype=float)
        py = np.asarray(py, dtype=float)
        ok = np.ones(y_hat.shape, dtype=bool)
        for r, s in self.circles:
            ok &= np.hypot(px, py - s * y_hat) <= r + PASS_TOL
        return ok

    def field_limit(self):
        """Largest height at which the disc intersection is still nonempty."""
        limit = math.inf
        for (ri, si) in self.circles:
            for (rj, sj) in self.circles:
                if si != sj:
                    limit = min(limit, (ri + rj) / abs(si - sj))
        return limit

    def max_extent(self, y_max=None):
        """Disc radius about the axis covering the regions up to y_max."""
        cap = self.field_limit()
        if y_max is not None:
            cap = min(cap, y_max)
        if not math.isfinite(cap):
            cap = 0.0
        ys = np.linspace(0.0, cap, 64)
        top = np.min([s * ys + r for r, s in self.circles], axis=0)
        bottom = np.max([s * ys - r for r, s in self.circles], axis=0)
        r_min = min(r for r, _ in self.circles)
        nonempty = top >= bottom
        extent = float(np.max(np.abs(np.concatenate([top[nonempty], bottom[nonempty]]))))
        return max(extent, r_min)


def circle_pass(model, y_hat, point):
    """True iff the point lies in every drifting disc at this field height."""
    return model.passes(y_hat, point)


def _min_tangent_circle(points, edge_y, side, rel_tol=1e-12, max_doublings=60):
    """Smallest circle tangent to the horizontal edge that encloses points.

    side +1: the edge is the top of the region (center below it);
    side -1: the edge is the bottom (center above it). Solved by bisection
    on the radius with a containment check.
    """
    pts = np.asarray(points, dtype=float)

    def uncovered(r):
        cy = edge_y - side * r
        dist = np.hypot(pts[:, 0], pts[:, 1] - cy)
        return float(dist.max()) - r

    r_hi = max(1.0, float(np.abs(pts).max()))
    for _ in range(max_doublings):
        if uncovered(r_hi) <= PASS_TOL:
            break
        r_hi *= 2.0
    else:
        raise CircleFitError("no enclosing tangent circle found")
    r_lo = 1e-9
    if uncovered(r_lo) <= PASS_TOL:
        return r_lo
    while (r_hi - r_lo) > rel_tol * r_hi:
        mid = 0.5 * (r_lo + r_hi)
        if uncovered(mid) <= PASS_TOL:
            r_hi = mid
        else:
            r_lo = mid
    return r_hi


def _refined_extreme(passing, blocked, side, x_window):
    """Edge estimate: midpoint between the extreme passing point and the
    nearest blocked sample beyond it (within a central x window)."""
    ys = passing[:, 1]
    extreme = float(ys.max() if side > 0 else ys.min())
    if blocked.shape[0]:
        sel = np.abs(blocked[:, 0]) <= x_window
        beyond = blocked[sel & ((blocked[:, 1] > extreme) if side > 0 else (blocked[:, 1] < extreme))]
        if beyond.shape[0]:
            neighbor = float(beyond[:, 1].min() if side > 0 else beyond[:, 1].max())
            if abs(neighbor - extreme) < 0.25 * (ys.max() - ys.min() + 1e-12):
                return 0.5 * (extreme + neighbor)
    return extreme


def _sample_step(points):
    ys = np.unique(np.round(points[:, 1], 9))
    if ys.size < 2:
        return 0.1
    return float(np.median(np.diff(ys)))


def _grow_edge_segment(edges, seed_h, tol):
    """Extend a field-height window around seed_h while the measured edge
    stays on one straight line (one aperture cutting)."""
    hs = sorted(edges)
    i0 = hs.index(seed_h)
    chosen = [i0]

    def accept(j):
        if len(chosen) < 2:
            return True  # no slope information yet
        xs = np.array([hs[i] for i in chosen])
        ys = np.array([edges[hs[i]] for i in chosen])
        a, b = np.polyfit(xs, ys, 1)
        return abs(edges[hs[j]] - (a * hs[j] + b)) <= tol

    for step in (+1, -1):
        j = i0 + step
        while 0 <= j < len(hs):
            if not accept(j):
                break
            chosen.append(j)
            chosen.sort()
            j += step
    return [hs[i] for i in chosen]


def fit_circle_model(ds, breakpoints=None, uncut_height_ratio=0.97):
    """Estimate the drifting-circle model from a projected dataset.

    Circle 1 is the on-axis pass boundary; its sensitivity comes from the
    region's center drift at low field heights (or from the drift of the
    widest-x points when every height is already cut). Each breakpoint adds
    one cutting circle: the minimal tangent circle enclosing the points at
    the nearest sampled height seeds the fit, and (radius, sensitivity) are
    then refined by a straight-line fit of the cutting-edge position over
    the surrounding heights where that aperture stays the active cutter --
    the edge is exactly sensitivity * y_hat +/- radius, and pooling heights
    conditions the radius far better than a single shallow arc can.
    """
    groups = project_to_pass_plane(ds)
    heights = [h for h in sorted(groups)]
    if not heights or groups[heights[0]][0].shape[0] == 0:
        raise CircleFitError("no passing rays at the lowest field height")

    pass0, block0 = groups[heights[0]]
    r_pass = float(np.hypot(pass0[:, 0], pass0[:, 1]).max())
    r1 = r_pass
    if block0.shape[0]:
        rb = np.hypot(block0[:, 0], block0[:, 1])
        beyond = rb[rb > r_pass]
        if beyond.size:
            r1 = 0.5 * (r_pass + float(beyond.min()))

    # sensitivity of circle 1: center drift while the region is uncut,
    # falling back to the drift of the widest-x (waist) points, which stay
    # on the most limiting circle even when top and bottom are cut
    drifts = []
    for y_hat in heights[1:]:
        passing, _ = groups[y_hat]
        if passing.shape[0] < 8:
            continue
        half_height = 0.5 * (passing[:, 1].max() - passing[:, 1].min())
        if half_height < uncut_height_ratio * r1:
            continue
        drifts.append(float(passing[:, 1].mean()) / y_hat)
    if not drifts:
        for y_hat in heights[1:]:
            passing, _ = groups[y_hat]
            if passing.shape[0] < 8:
                continue
            xa = np.abs(passing[:, 0])
            waist = passing[xa >= 0.98 * xa.max(), 1]
            drifts.append(float(np.median(waist)) / y_hat)
    s1 = float(np.median(drifts)) if drifts else 0.0
    circles = [(r1, s1)]

    if breakpoints is None:
        breakpoints = propose_breakpoints(ds)
    usable = [h for h in heights if h > 0 and groups[h][0].shape[0] >= 8]
    for y_b in breakpoints:
        if not usable:
            raise CircleFitError("no usable field heights for breakpoints")
        y_seed = min(usable, key=lambda h: abs(h - y_b))
        passing, blocked = groups[y_seed]
        top_dev = (s1 * y_seed + r1) - passing[:, 1].max()
        bot_dev = passing[:, 1].min() - (s1 * y_seed - r1)
        side = 1 if top_dev >= bot_dev else -1
        x_window = 0.15 * max(r1, float(np.abs(passing[:, 0]).max()))
        step = _sample_step(np.vstack([passing, blocked]) if blocked.size else passing)

        edges = {}
        for h in usable:
            p_h, b_h = groups[h]
            edges[h] = _refined_extreme(p_h, b_h, side, x_window)
        segment = _grow_edge_segment(edges, y_seed, tol=max(1.5 * step, 1e-6))
        if len(segment) >= 5:
            segment = segment[1:-1]  # end fields straddle the kinks
        if len(segment) >= 3:
            xs = np.array(segment)
            ys = np.array([edges[h] for h in segment])
            slope, intercept = np.polyfit(xs, ys, 1)
            radius = side * float(intercept)
            sensitivity = float(slope)
            if radius <= 0:
                radius = None  # fall back to the single-height tangent fit
        else:
            radius = None
        if radius is None:
            edge = edges[y_seed]
            radius = _min_tangent_circle(passing, edge, side)
            sensitivity = (edge - side * radius) / y_seed
        circles.append((radius, sensitivity))
    return CirclePassModel(circles=tuple(circles), pass_plane_offset=ds.planes.raypass_offset)


def propose_breakpoints(ds, max_breaks=3, kink_factor=4.0):
    """Suggest field heights where a new aperture starts cutting the pupil.

    Scans the pass fraction versus field height for kinks (second-difference
    spikes above kink_factor times the median) and returns heights just past
    each kink. Heuristic; callers may always supply explicit breakpoints.
    """
    groups = project_to_pass_plane(ds)
    heights = sorted(groups)
    fracs = []
    for h in heights:
        passing, blocked = groups[h]
        total = passing.shape[0] + blocked.shape[0]
        fracs.append(passing.shape[0] / total if total else 0.0)
    f = np.array(fracs)
    nonempty = f > 0
    if nonempty.sum() < 4:
        return []
    d2 = np.abs(np.diff(f, n=2))
    threshold = max(kink_factor * float(np.median(d2)), 1e-12)
    order = np.argsort(d2)[::-1]
    picks = []
    for idx in order:
        h = heights[idx + 1]
        if d2[idx] < threshold or not nonempty[idx + 1]:
            continue
        if any(abs(h - p) < (heights[-1] - heights[0]) / 6 for p in picks):
            continue
        picks.append(h)
        if len(picks) >= max_breaks:
            break
    # report positions slightly past the kink where the cut is developed
    last_pass = max(h for h, keep in zip(heights, nonempty) if keep)
    span = heights[-1] - heights[0]
    return [min(p + span / 10, last_pass) for p in sorted(picks)]
