"""Assembled camera models: planes + polynomial map + ray-pass model.

A model maps a sensor point and a sample point on the ray-pass plane to an
output ray on the scene side, or to a blocked outcome. Models serialize to
a versioned JSON file that round-trips bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .dataset import PlaneConfig, PlaneOutput, SphereOutput
from .geometry import Ray, meridional_phi_batch, rotate_about_z
from .polynomial import OUTPUT_NAMES, MonomialBasis, PolynomialMap, fit_polynomial_map
from .raypass import CirclePassModel, Ellipse, EllipseTable, fit_circle_model, fit_ellipse_table

SCHEMA_VERSION = 1


class ModelSchemaError(ValueError):
    """A model file is malformed; the message names the offending key."""


class ModelVersionError(ValueError):
    pass


@dataclass(frozen=True)
class RtfModel:
    name: str
    lens_name: str
    wavelength_nm: float
    film_distance: float  # sensor to input plane, mm
    planes: PlaneConfig
    polymap: PolynomialMap
    raypass: EllipseTable | CirclePassModel

    def __post_init__(self):
        if self.film_distance <= 0:
            raise ValueError("film_distance must be > 0")
        if self.raypass.pass_plane_offset != self.planes.raypass_offset:
            raise ValueError("ray-pass model offset disagrees with the plane config")
        is_plane = isinstance(self.planes.output, PlaneOutput)
        has_plane_z = self.polymap.output_plane_z is not None
        if is_plane != has_plane_z:
            raise ValueError("polynomial output convention disagrees with the output surface")
        if has_plane_z and self.polymap.output_plane_z != self.planes.output.z:
            raise ValueError("polynomial output plane differs from the configured one")

    @property
    def sensor_z(self):
        return self.planes.input_z - self.film_distance

    @property
    def pass_plane_z(self):
        return self.planes.raypass_z


def set_film_distance(model, d):
    """Refocus: move the sensor without touching the fitted model."""
    if d <= 0:
        raise ValueError("film distance must be > 0")
    return replace(model, film_distance=d)


def generate_camera_rays(model, sensor_points, pupil_samples):
    """Vectorized sensor-to-scene ray generation.

    sensor_points: (N, 3) points on the sensor plane (z = sensor_z);
    pupil_samples: (N, 2) points on the ray-pass plane. Returns
    (origins, directions, ok): rows with ok False were gated off by the
    ray-pass model (or produced an out-of-domain direction) and carry
    unspecified geometry.
    """
    sensor = np.atleast_2d(np.asarray(sensor_points, dtype=float))
    samples = np.atleast_2d(np.asarray(pupil_samples, dtype=float))
    n = sensor.shape[0]
    pass_z = model.pass_plane_z
    targets = np.column_stack([samples, np.full(n, pass_z)])
    d = targets - sensor
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    d[d[:, 2] < 0] *= -1.0  # pass planes behind the sensor (virtual pupils)
    # input-plane point implied by the sample
    t = (model.planes.input_z - sensor[:, 2]) / d[:, 2]
    input_pts = sensor + t[:, None] * d

    phi = meridional_phi_batch(input_pts, d)
    y_hat = np.hypot(input_pts[:, 0], input_pts[:, 1])
    d_rot = rotate_about_z(d, phi)
    sample_rot = rotate_about_z(targets, phi)

    ok = model.raypass.passes_batch(y_hat, sample_rot[:, 0], sample_rot[:, 1])

    out = model.polymap.evaluate(y_hat, d_rot[:, 0], d_rot[:, 1])
    # directions whose transverse part exceeds unit norm left the fitted
    # domain; treat them as blocked rather than emit an unphysical ray
    ok &= out[:, 3] ** 2 + out[:, 4] ** 2 <= 1.0
    origins = rotate_about_z(out[:, :3], -phi)
    directions = rotate_about_z(out[:, 3:], -phi)
    if isinstance(model.planes.output, SphereOutput):
        norm = np.linalg.norm(directions, axis=1, keepdims=True)
        directions = directions / np.where(norm > 0, norm, 1.0)
    return origins, directions, ok


def generate_camera_ray(model, sensor_point, pupil_sample):
    """Single-ray pipeline; returns a Ray or None when gated off."""
    origins, directions, ok = generate_camera_rays(
        model, np.asarray(sensor_point, dtype=float)[None, :], np.asarray(pupil_sample, dtype=float)[None, :]
    )
    if not ok[0]:
        return None
    return Ray(origins[0], directions[0])


def assemble_model(
    ds,
    degree,
    raypass_method="ellipse",
    breakpoints=None,
    name=None,
    film_distance=1.0,
    input_scale=None,
):
    """Fit polynomial and ray-pass models from one dataset and box them up.

    film_distance is a refocusing parameter; pick the in-focus value later
    with set_film_distance once an object distance is chosen.
    """
    polymap, report = fit_polynomial_map(ds, degree, input_scale=input_scale)
    if raypass_method == "ellipse":
        raypass = fit_ellipse_table(ds)
    elif raypass_method == "circles":
        raypass = fit_circle_model(ds, breakpoints=breakpoints)
    else:
        raise ValueError(f"unknown raypass method {raypass_method!r}")
    model = RtfModel(
        name=name or f"{ds.lens_name}-rtf-d{degree}",
        lens_name=ds.lens_name,
        wavelength_nm=ds.wavelength_nm,
        film_distance=film_distance,
        planes=ds.planes,
        polymap=polymap,
        raypass=raypass,
    )
    return model, report


def _require(mapping, key, path):
    if key not in mapping:
        raise ModelSchemaError(f"missing key: {path}{key}")
    return mapping[key]


def _planes_payload(planes):
    if isinstance(planes.output, PlaneOutput):
        output = {"type": "plane", "z_mm": planes.output.z}
    else:
        output = {
            "type": "sphere",
            "center_z_mm": planes.output.center_z,
            "radius_mm": planes.output.radius,
        }
    return {
        "input_z_mm": planes.input_z,
        "output": output,
        "raypass_offset_mm": planes.raypass_offset,
    }


def _raypass_payload(raypass):
    if isinstance(raypass, EllipseTable):
        blocked = [e is None for e in raypass.ellipses]
        return {
            "method": "ellipse",
            "positions_mm": list(raypass.positions),
            "center_y_mm": [0.0 if e is None else e.center_y for e in raypass.ellipses],
            "radius_x_mm": [0.0 if e is None else e.radius_x for e in raypass.ellipses],
            "radius_y_mm": [0.0 if e is None else e.radius_y for e in raypass.ellipses],
            "blocked": blocked,
        }
    return {
        "method": "circles",
        "circles": [
            {"radius_mm": r, "sensitivity": s} for r, s in raypass.circles
        ],
    }


def save_rtf_json(model, path, config=None):
    """Write the camera model; floats round-trip at full precision."""
    payload = {
        "schema_version": SCHEMA_VERSION,
        "name": model.name,
        "lens_name": model.lens_name,
        "wavelength_nm": model.wavelength_nm,
        "film_distance_mm": model.film_distance,
        "planes": _planes_payload(model.planes),
        "polynomial": {
            "degree": model.polymap.basis.degree,
            "input_scale": list(model.polymap.input_scale),
            "exponents": [list(e) for e in model.polymap.basis.exponents],
            "coefficients": {
                k: model.polymap.coefficients[k].tolist() for k in OUTPUT_NAMES
            },
        },
        "raypass": _raypass_payload(model.raypass),
    }
    if config is not None:
        payload["config"] = config
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, allow_nan=False)
        f.write("\n")


def load_rtf_json(path):
    with open(path) as f:
        data = json.load(f)
    version = _require(data, "schema_version", "")
    if version != SCHEMA_VERSION:
        raise ModelVersionError(f"unsupported schema_version {version!r}")
    for key in ("name", "lens_name", "wavelength_nm", "film_distance_mm"):
        _require(data, key, "")

    planes_d = _require(data, "planes", "")
    for key in ("input_z_mm", "output", "raypass_offset_mm"):
        _require(planes_d, key, "planes.")
    out_d = planes_d["output"]
    out_type = _require(out_d, "type", "planes.output.")
    if out_type == "plane":
        output = PlaneOutput(z=float(_require(out_d, "z_mm", "planes.output.")))
    elif out_type == "sphere":
        output = SphereOutput(
            center_z=float(_require(out_d, "center_z_mm", "planes.output.")),
            radius=float(_require(out_d, "radius_mm", "planes.output.")),
        )
    else:
        raise ModelSchemaError(f"unknown output type {out_type!r}")
    planes = PlaneConfig(
        input_z=float(planes_d["input_z_mm"]),
        output=output,
        raypass_offset=float(planes_d["raypass_offset_mm"]),
    )

    poly_d = _require(data, "polynomial", "")
    for key in ("degree", "input_scale", "exponents", "coefficients"):
        _require(poly_d, key, "polynomial.")
    exponents = tuple(tuple(int(v) for v in e) for e in poly_d["exponents"])
    basis = MonomialBasis(degree=int(poly_d["degree"]), exponents=exponents)
    coeffs = {}
    for k in OUTPUT_NAMES:
        coeffs[k] = np.asarray(
            _require(poly_d["coefficients"], k, "polynomial.coefficients."), dtype=float
        )
    polymap = PolynomialMap(
        basis=basis,
        input_scale=tuple(float(v) for v in poly_d["input_scale"]),
        coefficients=coeffs,
        output_plane_z=output.z if out_type == "plane" else None,
    )

    rp_d = _require(data, "raypass", "")
    method = _require(rp_d, "method", "raypass.")
    if method == "ellipse":
        for key in ("positions_mm", "center_y_mm", "radius_x_mm", "radius_y_mm", "blocked"):
            _require(rp_d, key, "raypass.")
        ellipses = []
        for cy, rx, ry, blocked in zip(
            rp_d["center_y_mm"], rp_d["radius_x_mm"], rp_d["radius_y_mm"], rp_d["blocked"]
        ):
            ellipses.append(None if blocked else Ellipse(cy, rx, ry))
        raypass = EllipseTable(
            positions=tuple(float(p) for p in rp_d["positions_mm"]),
            ellipses=tuple(ellipses),
            pass_plane_offset=planes.raypass_offset,
        )
    elif method == "circles":
        circles = tuple(
            (float(_require(c, "radius_mm", "raypass.circles.")), float(_require(c, "sensitivity", "raypass.circles.")))
            for c in _require(rp_d, "circles", "raypass.")
        )
        raypass = CirclePassModel(circles=circles, pass_plane_offset=planes.raypass_offset)
    else:
        raise ModelSchemaError(f"unknown raypass method {method!r}")

    return RtfModel(
        name=str(data["name"]),
        lens_name=str(data["lens_name"]),
        wavelength_nm=float(data["wavelength_nm"]),
        film_distance=float(data["film_distance_mm"]),
        planes=planes,
        polymap=polymap,
        raypass=raypass,
    )
