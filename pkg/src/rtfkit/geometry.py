"""Exact 3D ray primitives: plane/sphere intersection, Snell refraction, and
rotation of rays into the meridional plane.

Positions are in millimeters, directions are unit vectors. Everything here is
pure and operates on plain numpy arrays, so it is safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

POSITION_TOL = 1e-9  # mm
AXIS_TOL = 1e-9      # radial distance below which a point counts as on-axis

# Value outcomes of intersect_sphere (identity-compared by callers).
MISS = "miss"
CLIPPED = "clipped"


class TotalInternalReflection(Exception):
    """Snell's law has no real transmitted solution at this interface."""


def vec3(x, y, z):
    return np.array([float(x), float(y), float(z)])


def normalize(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def rotate_about_z(v, phi):
    """Rotate vector(s) about the optical (z) axis by angle phi (radians).

    Accepts a single (3,) vector or an (..., 3) array; phi may broadcast.
    """
    v = np.asarray(v, dtype=float)
    c, s = np.cos(phi), np.sin(phi)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    return np.stack([c * x - s * y, s * x + c * y, z * np.ones_like(c)], axis=-1)


@dataclass(frozen=True)
class Ray:
    """A ray with origin (mm) and unit direction."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.array(self.origin, dtype=float)
        d = np.array(self.direction, dtype=float)
        if o.shape != (3,) or d.shape != (3,):
            raise ValueError("Ray origin and direction must be 3-vectors")
        n = math.sqrt(float(d @ d))
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"ray direction must be unit length, |d| = {n!r}")
        o.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t):
        return self.origin + t * self.direction


def ray_towards(origin, target):
    """Ray starting at origin, pointing at target."""
    origin = np.asarray(origin, dtype=float)
    return Ray(origin, normalize(np.asarray(target, dtype=float) - origin))


@dataclass(frozen=True)
class MeridionalRay:
    """A ray reduced to the meridional frame: origin rotated onto the +y axis.

    phi is the rotation that was applied about z; rotate_back(-phi) restores
    the original azimuth.
    """

    y_hat: float
    dx_hat: float
    dy_hat: float
    phi: float

    def __post_init__(self):
        if self.y_hat < 0:
            raise ValueError("y_hat must be >= 0")
        if self.dx_hat**2 + self.dy_hat**2 > 1 + 1e-9:
            raise ValueError("transverse direction components exceed unit norm")


def intersect_plane(ray, plane_z):
    """Forward intersection of ray with the plane z = plane_z.

    Returns the hit point, or None when the ray is parallel to the plane or
    the intersection lies behind the origin.
    """
    dz = ray.direction[2]
    if dz == 0.0:
        return None
    t = (plane_z - ray.origin[2]) / dz
    if t < 0.0:
        return None
    return ray.at(t)


def _height_at_vertex_plane(ray, vertex_z):
    # Radial height where the ray crosses the surface's vertex plane; used to
    # tell an aperture clip from a geometric miss.
    dz = ray.direction[2]
    if dz != 0.0:
        t = (vertex_z - ray.origin[2]) / dz
        if t >= 0.0:
            p = ray.at(t)
            return math.hypot(p[0], p[1])
    return math.hypot(ray.origin[0], ray.origin[1])


def intersect_sphere(ray, vertex_z, curvature_radius, semi_aperture):
    """Intersect a ray with a spherical cap centered on the optical axis.

    The sphere has its vertex at (0, 0, vertex_z) and center of curvature at
    (0, 0, vertex_z + curvature_radius); positive radius bends toward +z.
    Returns (point, normal) with the normal oriented against the incoming
    direction, or MISS / CLIPPED. Roots are restricted to the physical cap
    |z_hit - vertex_z| <= |R| and the root nearest the vertex is kept, which
    handles rays that start inside the sphere.
    """
    R = float(curvature_radius)
    if R == 0.0:
        raise ValueError("curvature_radius must be nonzero; use a planar surface instead")
    center = vec3(0.0, 0.0, vertex_z + R)
    vertex = vec3(0.0, 0.0, vertex_z)
    oc = ray.origin - center
    b = float(oc @ ray.direction)
    c = float(oc @ oc) - R * R
    disc = b * b - c

    def _no_hit():
        if _height_at_vertex_plane(ray, vertex_z) > semi_aperture:
            return CLIPPED
        return MISS

    if disc < 0.0:
        return _no_hit()
    s = math.sqrt(disc)
    best = None
    for t in (-b - s, -b + s):
        if t < -POSITION_TOL:
            continue
        p = ray.at(t)
        if abs(p[2] - vertex_z) > abs(R) + POSITION_TOL:
            continue
        dist = float(np.linalg.norm(p - vertex))
        if best is None or dist < best[0]:
            best = (dist, p)
    if best is None:
        return _no_hit()
    p = best[1]
    if math.hypot(p[0], p[1]) > semi_aperture:
        return CLIPPED
    n = normalize(p - center)
    if float(n @ ray.direction) > 0.0:
        n = -n
    return p, n


def refract(direction, normal, n1, n2):
    """Vector form of Snell's law.

    direction and normal must be unit with direction . normal < 0 (normal on
    the incoming side). Raises TotalInternalReflection past the critical
    angle. The transmitted direction is returned unit-length.
    """
    direction = np.asarray(direction, dtype=float)
    normal = np.asarray(normal, dtype=float)
    mu = n1 / n2
    cos_i = -float(direction @ normal)
    if cos_i <= 0.0:
        raise ValueError("surface normal must oppose the incoming direction")
    sin2_t = mu * mu * (1.0 - cos_i * cos_i)
    if sin2_t > 1.0:
        raise TotalInternalReflection(
            f"n1 sin(theta_i) = {n1 * math.sqrt(1 - cos_i**2):.6g} exceeds n2 = {n2:.6g}"
        )
    cos_t = math.sqrt(1.0 - sin2_t)
    return mu * direction + (mu * cos_i - cos_t) * normal


def meridional_phi(origin, direction):
    """Rotation angle about z that maps origin onto the +y half-axis.

    On-axis rays (radial distance < AXIS_TOL) use the direction instead: phi
    is chosen so the rotated direction has zero x-component and dy >= 0; a
    fully axial ray keeps phi = 0.
    """
    x, y = float(origin[0]), float(origin[1])
    if math.hypot(x, y) > AXIS_TOL:
        return math.pi / 2 - math.atan2(y, x)
    dx, dy = float(direction[0]), float(direction[1])
    if math.hypot(dx, dy) > AXIS_TOL:
        return math.pi / 2 - math.atan2(dy, dx)
    return 0.0


def meridional_phi_batch(origins, directions):
    """Vectorized meridional_phi over (N, 3) arrays."""
    origins = np.asarray(origins, dtype=float)
    directions = np.asarray(directions, dtype=float)
    r = np.hypot(origins[..., 0], origins[..., 1])
    dr = np.hypot(directions[..., 0], directions[..., 1])
    phi_pos = np.pi / 2 - np.arctan2(origins[..., 1], origins[..., 0])
    phi_dir = np.pi / 2 - np.arctan2(directions[..., 1], directions[..., 0])
    return np.where(r > AXIS_TOL, phi_pos, np.where(dr > AXIS_TOL, phi_dir, 0.0))


def rotate_meridional(ray):
    """Reduce a ray to the meridional frame (Eq.-free rotational symmetry).

    The returned MeridionalRay records y_hat = radial origin distance, the
    rotated transverse direction components, and the applied angle phi.
    """
    phi = meridional_phi(ray.origin, ray.direction)
    y_hat = math.hypot(float(ray.origin[0]), float(ray.origin[1]))
    d = rotate_about_z(ray.direction, phi)
    return MeridionalRay(y_hat=y_hat, dx_hat=float(d[0]), dy_hat=float(d[1]), phi=phi)


def rotate_back(origin, direction, phi):
    """Undo a meridional rotation: rotate an (origin, direction) pair by -phi."""
    return Ray(rotate_about_z(origin, -phi), rotate_about_z(direction, -phi))
