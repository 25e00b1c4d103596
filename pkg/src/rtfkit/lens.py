"""Sequential ray tracing through a known spherical-lens prescription.

This is the exact, ground-truth side of the toolkit: the stand-in for the
vendor's black box. It also provides the paraxial ABCD matrix of a
prescription (reduced-angle convention) and paraxial pupil location, which
the sampling and evaluation stages rely on.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import (
    CLIPPED,
    MISS,
    Ray,
    TotalInternalReflection,
    intersect_plane,
    intersect_sphere,
    refract,
)

APERTURE_CLIP = "aperture_clip"
CAP_MISS = "cap_miss"
TIR = "total_internal_reflection"

_REASON_CODES = {1: APERTURE_CLIP, 2: CAP_MISS, 3: TIR}


class LensFileError(ValueError):
    """A lens prescription file failed validation."""


class PupilImagingError(RuntimeError):
    """The aperture stop images to infinity from the requested side."""


@dataclass(frozen=True)
class LensSurface:
    """One refracting surface. radius is None for a planar surface.

    thickness is the axial gap to the next surface; for the last surface it
    is the nominal distance to the image plane. n_after is the refractive
    index of the medium behind the surface at the design wavelength.
    """

    radius: float | None
    thickness: float
    n_after: float
    semi_aperture: float
    is_stop: bool = False

    def __post_init__(self):
        if self.radius is not None and self.radius == 0.0:
            raise ValueError("radius must be nonzero (use radius=None for planar)")
        if self.thickness < 0:
            raise ValueError("thickness must be >= 0")
        if self.n_after <= 0:
            raise ValueError("n_after must be > 0")
        if self.semi_aperture <= 0:
            raise ValueError("semi_aperture must be > 0")


@dataclass(frozen=True)
class LensPrescription:
    name: str
    surfaces: tuple[LensSurface, ...]
    wavelength_nm: float

    def __post_init__(self):
        object.__setattr__(self, "surfaces", tuple(self.surfaces))
        if sum(s.is_stop for s in self.surfaces) > 1:
            raise ValueError("a prescription may have at most one stop surface")

    @property
    def vertex_positions(self):
        """z of each surface vertex; the first surface sits at z = 0."""
        ts = [s.thickness for s in self.surfaces[:-1]]
        return np.concatenate([[0.0], np.cumsum(ts)]) if self.surfaces else np.zeros(0)

    @property
    def last_vertex_z(self):
        zs = self.vertex_positions
        return float(zs[-1]) if len(zs) else 0.0

    @property
    def back_focus(self):
        return self.surfaces[-1].thickness if self.surfaces else 0.0

    @property
    def stop_index(self):
        for i, s in enumerate(self.surfaces):
            if s.is_stop:
                return i
        return None

    def media(self):
        """Refractive index before each surface (air assumed in front)."""
        return [1.0] + [s.n_after for s in self.surfaces[:-1]]


@dataclass(frozen=True)
class Blocked:
    surface_index: int
    reason: str


def trace_lens(lens, ray):
    """Trace one ray through every surface; exact geometry, no paraxial terms.

    Returns the exit Ray (origin on the last surface) or Blocked with the
    first offending surface index and reason.
    """
    origin, direction = ray.origin, ray.direction
    n1 = 1.0
    for i, (surf, z_v) in enumerate(zip(lens.surfaces, lens.vertex_positions)):
        if surf.radius is None:
            p = intersect_plane(Ray(origin, direction), z_v)
            if p is None:
                return Blocked(i, CAP_MISS)
            if math.hypot(p[0], p[1]) > surf.semi_aperture:
                return Blocked(i, APERTURE_CLIP)
            normal = np.array([0.0, 0.0, -math.copysign(1.0, direction[2])])
        else:
            res = intersect_sphere(Ray(origin, direction), z_v, surf.radius, surf.semi_aperture)
            if res is MISS:
                return Blocked(i, CAP_MISS)
            if res is CLIPPED:
                return Blocked(i, APERTURE_CLIP)
            p, normal = res
        try:
            direction = refract(direction, normal, n1, surf.n_after)
        except TotalInternalReflection:
            return Blocked(i, TIR)
        origin = p
        n1 = surf.n_after
    return Ray(origin, direction)


def trace_lens_batch(lens, origins, directions):
    """Vectorized trace of N rays.

    Returns (origins, directions, blocked_at, reasons): exit geometry for
    surviving rays, blocked_at = -1 for survivors else the surface index, and
    reasons as small ints decoded by blocked_reason().
    """
    o = np.array(origins, dtype=float)
    d = np.array(directions, dtype=float)
    n = o.shape[0]
    blocked_at = np.full(n, -1, dtype=np.int64)
    reason = np.zeros(n, dtype=np.int8)
    alive = np.ones(n, dtype=bool)
    n1 = 1.0
    for i, (surf, z_v) in enumerate(zip(lens.surfaces, lens.vertex_positions)):
        if not alive.any():
            break
        ox, oy, oz = o[:, 0], o[:, 1], o[:, 2]
        dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]
        if surf.radius is None:
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (z_v - oz) / dz
            hit_ok = alive & (dz != 0.0) & (t >= 0.0)
            t = np.where(hit_ok, t, 0.0)
            p = o + t[:, None] * d
            clip = hit_ok & (np.hypot(p[:, 0], p[:, 1]) > surf.semi_aperture)
            miss = alive & ~hit_ok
            normal = np.zeros_like(d)
            normal[:, 2] = -np.sign(dz)
        else:
            R = surf.radius
            center = np.array([0.0, 0.0, z_v + R])
            oc = o - center
            b = np.einsum("ij,ij->i", oc, d)
            c = np.einsum("ij,ij->i", oc, oc) - R * R
            disc = b * b - c
            has_root = alive & (disc >= 0.0)
            s = np.sqrt(np.where(disc > 0.0, disc, 0.0))
            best_t = np.full(n, np.nan)
            best_dist = np.full(n, np.inf)
            for root in (-b - s, -b + s):
                p = o + root[:, None] * d
                on_cap = (
                    has_root
                    & (root >= -1e-9)
                    & (np.abs(p[:, 2] - z_v) <= abs(R) + 1e-9)
                )
                dist = np.where(
                    on_cap,
                    np.sqrt(p[:, 0] ** 2 + p[:, 1] ** 2 + (p[:, 2] - z_v) ** 2),
                    np.inf,
                )
                better = dist < best_dist
                best_dist = np.where(better, dist, best_dist)
                best_t = np.where(better, root, best_t)
            hit_ok = alive & np.isfinite(best_dist)
            p = o + np.where(hit_ok, best_t, 0.0)[:, None] * d
            hit_r = np.hypot(p[:, 0], p[:, 1])
            clip = hit_ok & (hit_r > surf.semi_aperture)
            # no-root rays: height at the vertex plane decides clip vs miss
            no_hit = alive & ~hit_ok
            with np.errstate(divide="ignore", invalid="ignore"):
                tv = (z_v - oz) / dz
            hv = np.where(
                (dz != 0.0) & (tv >= 0.0),
                np.hypot(ox + tv * dx, oy + tv * dy),
                np.hypot(ox, oy),
            )
            clip |= no_hit & (hv > surf.semi_aperture)
            miss = no_hit & (hv <= surf.semi_aperture)
            normal = p - center
            norm = np.linalg.norm(normal, axis=1)
            normal = normal / np.where(norm > 0, norm, 1.0)[:, None]
            flip = np.einsum("ij,ij->i", normal, d) > 0
            normal[flip] = -normal[flip]

        reason[alive & clip] = 1
        reason[miss] = 2
        blocked_at[alive & (clip | miss)] = i
        alive = alive & ~clip & ~miss

        # vector Snell for the survivors
        mu = n1 / surf.n_after
        cos_i = -np.einsum("ij,ij->i", d, normal)
        sin2_t = mu * mu * (1.0 - cos_i * cos_i)
        tir = alive & (sin2_t > 1.0)
        reason[tir] = 3
        blocked_at[tir] = i
        alive = alive & ~tir
        cos_t = np.sqrt(np.clip(1.0 - sin2_t, 0.0, None))
        d_new = mu * d + (mu * cos_i - cos_t)[:, None] * normal
        d = np.where(alive[:, None], d_new, d)
        o = np.where(alive[:, None], p, o)
        n1 = surf.n_after
    return o, d, blocked_at, reason


def blocked_reason(code):
    return _REASON_CODES.get(int(code))


def reverse_lens(lens):
    """Flip a prescription so it can be traced from the image side.

    Surface order reverses, radii negate, internal gaps re-align, and each
    surface's rear medium becomes the front medium of the matching original
    surface. Applying it twice returns the original (end media in air).
    """
    surfaces = lens.surfaces
    m = len(surfaces)
    if m == 0:
        return lens
    media_before = lens.media()
    new = []
    for j in range(m):
        src = surfaces[m - 1 - j]
        thickness = surfaces[m - 2 - j].thickness if j <= m - 2 else surfaces[m - 1].thickness
        new.append(
            LensSurface(
                radius=None if src.radius is None else -src.radius,
                thickness=thickness,
                n_after=media_before[m - 1 - j],
                semi_aperture=src.semi_aperture,
                is_stop=src.is_stop,
            )
        )
    return replace(lens, surfaces=tuple(new))


@dataclass(frozen=True)
class ParaxialMatrix:
    """2x2 ABCD matrix in the reduced-angle (n*u) convention."""

    A: float
    B: float
    C: float
    D: float

    @property
    def det(self):
        return self.A * self.D - self.B * self.C

    def as_array(self):
        return np.array([[self.A, self.B], [self.C, self.D]])

    def apply(self, height, reduced_angle):
        return (
            self.A * height + self.B * reduced_angle,
            self.C * height + self.D * reduced_angle,
        )

    @property
    def focal_length(self):
        if self.C == 0:
            return math.inf
        return -1.0 / self.C


def _gap(t, n):
    return np.array([[1.0, t / n], [0.0, 1.0]])


def _refraction(radius, n1, n2):
    power = 0.0 if radius is None else (n2 - n1) / radius
    return np.array([[1.0, 0.0], [-power, 1.0]])


def paraxial_matrix(lens, from_z=None, to_z=None):
    """ABCD matrix between the planes z = from_z and z = to_z.

    Defaults span first vertex to last vertex. Gap matrices use the reduced
    t/n form, so the determinant is exactly 1. Leading/trailing gaps are in
    air (front) and in the final medium (rear).
    """
    zs = lens.vertex_positions
    if from_z is None:
        from_z = float(zs[0]) if len(zs) else 0.0
    if to_z is None:
        to_z = float(zs[-1]) if len(zs) else 0.0
    M = np.eye(2)
    z_cur, n_cur = from_z, 1.0
    for surf, z_v in zip(lens.surfaces, zs):
        M = _gap(z_v - z_cur, n_cur) @ M
        M = _refraction(surf.radius, n_cur, surf.n_after) @ M
        z_cur, n_cur = z_v, surf.n_after
    M = _gap(to_z - z_cur, n_cur) @ M
    return ParaxialMatrix(A=M[0, 0], B=M[0, 1], C=M[1, 0], D=M[1, 1])


def paraxial_pupil(lens, viewpoint_plane_z):
    """Locate the paraxial image of the stop as seen from one side.

    Returns (pupil_z, pupil_radius). The subsystem between the stop and the
    viewpoint side is traversed from the stop outward; the pupil is where
    the stop images through it. Raises PupilImagingError when the stop
    images to infinity.
    """
    k = lens.stop_index
    if k is None:
        raise ValueError("prescription has no stop surface")
    zs = lens.vertex_positions
    media = lens.media()
    z_stop = float(zs[k])
    stop_r = lens.surfaces[k].semi_aperture

    M = np.eye(2)
    if viewpoint_plane_z <= z_stop:
        # walk toward -z through surfaces k-1 .. 0 in mirrored coordinates
        z_cur = z_stop
        n_cur = media[k]
        for i in range(k - 1, -1, -1):
            surf = lens.surfaces[i]
            M = _gap(z_cur - float(zs[i]), n_cur) @ M
            radius = None if surf.radius is None else -surf.radius
            M = _refraction(radius, n_cur, media[i]) @ M
            z_cur, n_cur = float(zs[i]), media[i]
        exit_z, exit_n, direction = z_cur, n_cur, -1.0
    else:
        z_cur = z_stop
        n_cur = lens.surfaces[k].n_after
        for i in range(k + 1, len(lens.surfaces)):
            surf = lens.surfaces[i]
            M = _gap(float(zs[i]) - z_cur, n_cur) @ M
            M = _refraction(surf.radius, n_cur, surf.n_after) @ M
            z_cur, n_cur = float(zs[i]), surf.n_after
        exit_z, exit_n, direction = z_cur, n_cur, 1.0

    A, B, C, D = M[0, 0], M[0, 1], M[1, 0], M[1, 1]
    if abs(D) < 1e-12:
        raise PupilImagingError("stop images to infinity on this side")
    d = -B / D * exit_n  # geometric image distance along the traversal
    magnification = 1.0 / D
    return exit_z + direction * d, stop_r * abs(magnification)


def load_lens_json(path):
    """Read a prescription from JSON, validating the single-stop invariant."""
    with open(path) as f:
        data = json.load(f)
    for key in ("name", "wavelength_nm", "surfaces"):
        if key not in data:
            raise LensFileError(f"lens file missing key: {key}")
    surfaces = []
    for i, s in enumerate(data["surfaces"]):
        planar = bool(s.get("planar", False))
        if not planar and "radius_mm" not in s:
            raise LensFileError(f"surface {i}: needs radius_mm or planar=true")
        for key in ("thickness_mm", "n_after", "semi_aperture_mm"):
            if key not in s:
                raise LensFileError(f"surface {i}: missing key {key}")
        try:
            surfaces.append(
                LensSurface(
                    radius=None if planar else float(s["radius_mm"]),
                    thickness=float(s["thickness_mm"]),
                    n_after=float(s["n_after"]),
                    semi_aperture=float(s["semi_aperture_mm"]),
                    is_stop=bool(s.get("is_stop", False)),
                )
            )
        except ValueError as e:
            raise LensFileError(f"surface {i}: {e}") from e
    n_stops = sum(s.is_stop for s in surfaces)
    if n_stops != 1:
        raise LensFileError(f"prescription must have exactly one stop, found {n_stops}")
    return LensPrescription(
        name=str(data["name"]),
        surfaces=tuple(surfaces),
        wavelength_nm=float(data["wavelength_nm"]),
    )


def save_lens_json(lens, path):
    surfaces = []
    for s in lens.surfaces:
        d = {}
        if s.radius is None:
            d["planar"] = True
        else:
            d["radius_mm"] = s.radius
        d.update(
            thickness_mm=s.thickness,
            n_after=s.n_after,
            semi_aperture_mm=s.semi_aperture,
            is_stop=s.is_stop,
        )
        surfaces.append(d)
    payload = {
        "name": lens.name,
        "wavelength_nm": lens.wavelength_nm,
        "surfaces": surfaces,
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=1)
        f.write("\n")
