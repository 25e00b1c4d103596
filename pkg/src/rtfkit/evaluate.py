"""Image-domain validation: relative illumination and edge-spread functions.

Both the exact lens and a fitted camera model are wrapped behind the same
adapter interface and rendered with identical, counter-based Monte Carlo
sample streams, so paired comparisons isolate model error from sampler
noise. Curves are normalized, making absolute radiometry irrelevant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .camera import assemble_model, generate_camera_rays
from .dataset import PlaneOutput, propagate_to_output
from .lens import paraxial_matrix, trace_lens_batch

SAMPLES_PER_PIXEL_DEFAULT = 4096


class EvaluationError(RuntimeError):
    """Degenerate evaluation (all-blocked axis, missing step, bad overlap)."""


@dataclass(frozen=True)
class EvalCurve:
    abscissa: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        a = np.asarray(self.abscissa, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if a.shape != v.shape:
            raise ValueError("abscissa and values must have equal length")
        if not np.isfinite(v).all():
            raise ValueError("curve values must be finite")
        object.__setattr__(self, "abscissa", a)
        object.__setattr__(self, "values", v)


class OracleCamera:
    """Exact-lens adapter: sensor point + pass-plane sample -> traced ray."""

    def __init__(self, lens, planes, film_distance, name="oracle"):
        self.lens = lens
        self.planes = planes
        self.film_distance = film_distance
        self.name = name

    @property
    def sensor_z(self):
        return self.planes.input_z - self.film_distance

    @property
    def pass_plane_z(self):
        return self.planes.raypass_z

    @property
    def scene_reference_z(self):
        return self.lens.last_vertex_z

    def trace_batch(self, sensor_points, samples):
        sensor = np.atleast_2d(np.asarray(sensor_points, dtype=float))
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        n = sensor.shape[0]
        targets = np.column_stack([samples, np.full(n, self.pass_plane_z)])
        d = targets - sensor
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        d[d[:, 2] < 0] *= -1.0
        o, dirs, blocked_at, _ = trace_lens_batch(self.lens, sensor, d)
        ok = blocked_at < 0
        pts, reach = propagate_to_output(o, dirs, self.planes.output)
        ok &= reach
        return pts, dirs, ok


class RtfCamera:
    """Fitted-model adapter with the same trace_batch contract."""

    def __init__(self, model, name=None):
        self.model = model
        self.name = name or model.name

    @property
    def sensor_z(self):
        return self.model.sensor_z

    @property
    def pass_plane_z(self):
        return self.model.pass_plane_z

    @property
    def scene_reference_z(self):
        out = self.model.planes.output
        return out.z if isinstance(out, PlaneOutput) else out.center_z

    def trace_batch(self, sensor_points, samples):
        return generate_camera_rays(self.model, sensor_points, samples)


def paired_cameras(lens, model, oracle_name="oracle"):
    """Oracle and RTF adapters sharing planes and film distance."""
    return (
        OracleCamera(lens, model.planes, model.film_distance, name=oracle_name),
        RtfCamera(model),
    )


def _disc_samples(seed, position_index, n_samples, radius, shared=False):
    """Uniform samples of the pass-plane disc, counter-keyed per position.

    shared=True freezes one sample set for every position (a quadrature-like
    mode with zero pixel-to-pixel variance on uniform scenes).
    """
    key_index = 0 if shared else position_index + 1
    gen = np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, 0, key_index]))
    u = gen.random((n_samples, 2))
    r = radius * np.sqrt(u[:, 0])
    th = 2.0 * np.pi * u[:, 1]
    return np.column_stack([r * np.cos(th), r * np.sin(th)])


def relative_illumination(cam, field_heights, n_samples=8192, seed=0, disc_radius=None):
    """Monte Carlo irradiance versus field height, normalized on-axis.

    Estimator: mean over disc samples of cos^4(theta) for rays the camera
    passes, theta measured between the sensor-to-sample segment and the
    axis. The common fixed disc makes paired estimates share their measure.
    """
    heights = np.asarray(field_heights, dtype=float)
    if not (heights == 0.0).any():
        raise ValueError("field_heights must include 0 for normalization")
    if disc_radius is None:
        raise ValueError("disc_radius is required (use the same one for paired cameras)")
    values = np.zeros(len(heights))
    sigmas = np.zeros(len(heights))
    L = cam.pass_plane_z - cam.sensor_z
    for i, h in enumerate(heights):
        samples = _disc_samples(seed, i, n_samples, disc_radius)
        sensors = np.tile([0.0, h, cam.sensor_z], (n_samples, 1))
        _, _, ok = cam.trace_batch(sensors, samples)
        dist = np.sqrt(
            samples[:, 0] ** 2 + (samples[:, 1] - h) ** 2 + L * L
        )
        w = (L / dist) ** 4 * ok
        values[i] = w.mean()
        sigmas[i] = w.std() / math.sqrt(n_samples)
    i0 = int(np.flatnonzero(heights == 0.0)[0])
    if values[i0] <= 0.0:
        raise EvaluationError("no rays pass on-axis; cannot normalize")
    scale = values[i0]
    rel_sigma = np.sqrt(
        (sigmas / np.maximum(values, 1e-300)) ** 2 + (sigmas[i0] / scale) ** 2
    ) * (values / scale)
    return EvalCurve(
        heights,
        values / scale,
        meta={
            "camera": cam.name,
            "n_samples": n_samples,
            "seed": seed,
            "disc_radius": disc_radius,
            "sigma": rel_sigma.tolist(),
        },
    )


def _render_row(cam, sensor_xs_mm, samples_per_px, seed, disc_radius, radiance_fn, shared=False):
    """Render one sensor row; radiance_fn maps (origins, dirs, ok) -> per-ray
    radiance (blocked rays contribute zero). Returns per-pixel means and the
    fraction of passing rays that failed to fetch radiance."""
    values = np.zeros(len(sensor_xs_mm))
    n_pass = 0
    n_miss = 0
    for i, x in enumerate(sensor_xs_mm):
        samples = _disc_samples(seed, i, samples_per_px, disc_radius, shared=shared)
        sensors = np.tile([x, 0.0, cam.sensor_z], (samples_per_px, 1))
        origins, dirs, ok = cam.trace_batch(sensors, samples)
        rad, fetched = radiance_fn(origins, dirs, ok)
        values[i] = rad.sum() / samples_per_px
        n_pass += int(ok.sum())
        n_miss += int((ok & ~fetched).sum())
    return values, n_pass, n_miss


def edge_spread(
    cam,
    object_distance,
    edge_x=0.0,
    sensor_xs_um=None,
    n_samples=SAMPLES_PER_PIXEL_DEFAULT,
    seed=0,
    disc_radius=None,
    object_plane_z=None,
):
    """Geometric edge-spread function for a radiance step at one object plane.

    object_distance is measured from the scene-side vertex; pass an explicit
    object_plane_z for exactly paired comparisons. The curve is min-max
    normalized using the medians of the outer 10% on each side.
    """
    if disc_radius is None:
        raise ValueError("disc_radius is required")
    if sensor_xs_um is None:
        sensor_xs_um = np.arange(-100.0, 101.0, 1.0)
    sensor_xs_um = np.asarray(sensor_xs_um, dtype=float)
    z_obj = (
        object_plane_z
        if object_plane_z is not None
        else cam.scene_reference_z + object_distance
    )

    def radiance(origins, dirs, ok):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (z_obj - origins[:, 2]) / dirs[:, 2]
        fetched = ok & (dirs[:, 2] > 0) & (t >= 0.0)
        x_obj = origins[:, 0] + np.where(fetched, t, 0.0) * dirs[:, 0]
        rad = np.where(fetched & (x_obj >= edge_x), 1.0, 0.0)
        return rad, fetched

    values, n_pass, n_miss = _render_row(
        cam, sensor_xs_um / 1000.0, n_samples, seed, disc_radius, radiance
    )
    if n_pass == 0 or n_miss > 0.5 * n_pass:
        raise EvaluationError(
            f"{n_miss} of {n_pass} passing rays failed to reach the object plane"
        )
    k = max(1, len(values) // 10)
    lo_med = float(np.median(values[:k]))
    hi_med = float(np.median(values[-k:]))
    low, high = min(lo_med, hi_med), max(lo_med, hi_med)
    if high - low <= 1e-12:
        raise EvaluationError("no radiance step across the rendered row")
    normalized = (values - low) / (high - low)
    return EvalCurve(
        sensor_xs_um,
        normalized,
        meta={
            "camera": cam.name,
            "n_samples": n_samples,
            "seed": seed,
            "disc_radius": disc_radius,
            "object_plane_z": z_obj,
            "n_no_intersect": n_miss,
        },
    )


def noise_floor(cam, sensor_xs_um=None, n_samples=SAMPLES_PER_PIXEL_DEFAULT, seed=0,
                disc_radius=None, jitter=True):
    """Std of a rendered uniform scene (pixel values / their mean).

    jitter=False reuses one frozen sample set for every pixel; the variance
    then collapses to zero, the quadrature limit.
    """
    if disc_radius is None:
        raise ValueError("disc_radius is required")
    if sensor_xs_um is None:
        sensor_xs_um = np.arange(-100.0, 101.0, 1.0)
    sensor_xs_um = np.asarray(sensor_xs_um, dtype=float)

    def radiance(origins, dirs, ok):
        return ok.astype(float), ok

    values, n_pass, _ = _render_row(
        cam, sensor_xs_um / 1000.0, n_samples, seed, disc_radius, radiance,
        shared=not jitter,
    )
    if n_pass == 0:
        raise EvaluationError("uniform scene rendered black")
    mean = values.mean()
    if mean <= 0:
        raise EvaluationError("uniform scene rendered black")
    return float(np.std(values / mean))


def rmse_compare(a, b):
    """RMS difference after resampling b onto a's abscissa (overlap only)."""
    lo = max(a.abscissa.min(), b.abscissa.min())
    hi = min(a.abscissa.max(), b.abscissa.max())
    sel = (a.abscissa >= lo) & (a.abscissa <= hi)
    if not sel.any():
        raise EvaluationError("curves do not overlap")
    resampled = np.interp(a.abscissa[sel], b.abscissa, b.values)
    return float(np.sqrt(np.mean((a.values[sel] - resampled) ** 2)))


def infocus_object_distance(lens, film_distance, input_offset=0.01):
    """Object distance (from the scene-side vertex) conjugate to the sensor."""
    M = paraxial_matrix(lens)
    u = film_distance + input_offset
    denom = M.C * u + M.D
    if abs(denom) < 1e-12:
        raise EvaluationError("sensor sits at the focal plane; conjugate at infinity")
    return -(M.A * u + M.B) / denom


def film_distance_for_object(lens, object_distance, input_offset=0.01):
    """Film distance focusing the lens on a plane at object_distance."""
    M = paraxial_matrix(lens)
    g = object_distance
    denom = M.A + g * M.C
    if abs(denom) < 1e-12:
        raise EvaluationError("object plane is conjugate to infinity")
    u = -(M.B + g * M.D) / denom
    fd = u - input_offset
    if fd <= 0:
        raise EvaluationError(f"object at {object_distance} mm needs film distance {fd}")
    return fd


def model_disc_radius(model, margin=1.02):
    """Sampling-disc radius covering the model's pass regions."""
    return margin * model.raypass.max_extent()


@dataclass(frozen=True)
class EsfSweepRow:
    degree: int
    object_distance: float
    rmse: float
    log10_rmse: float
    noise_floor: float
    error: str | None = None


def rmse_vs_degree_report(
    lens,
    ds,
    degrees,
    film_distance,
    object_distances=None,
    sensor_xs_um=None,
    n_samples=SAMPLES_PER_PIXEL_DEFAULT,
    seed=0,
    raypass_method="ellipse",
    breakpoints=None,
):
    """Fit per degree, render paired ESFs, and tabulate log10 RMSE.

    The noise floor per object distance comes from the oracle camera at the
    same sampling parameters and is constant across degrees.
    """
    if object_distances is None:
        g1 = infocus_object_distance(lens, film_distance, -ds.planes.input_z)
        object_distances = [g1, 2.0 * g1]
    if sensor_xs_um is None:
        sensor_xs_um = np.arange(-100.0, 101.0, 1.0)

    rows = []
    oracle_curves = {}
    floors = {}
    reference_model, _ = assemble_model(
        ds, degrees[0], raypass_method=raypass_method, breakpoints=breakpoints,
        film_distance=film_distance,
    )
    disc = model_disc_radius(reference_model)
    oracle = OracleCamera(lens, ds.planes, film_distance)
    for g in object_distances:
        z_obj = oracle.scene_reference_z + g
        oracle_curves[g] = edge_spread(
            oracle, g, sensor_xs_um=sensor_xs_um, n_samples=n_samples, seed=seed,
            disc_radius=disc, object_plane_z=z_obj,
        )
        floors[g] = noise_floor(
            oracle, sensor_xs_um=sensor_xs_um, n_samples=n_samples, seed=seed,
            disc_radius=disc,
        )
    for degree in degrees:
        try:
            model, _ = assemble_model(
                ds, degree, raypass_method=raypass_method, breakpoints=breakpoints,
                film_distance=film_distance,
            )
            cam = RtfCamera(model)
            for g in object_distances:
                z_obj = oracle.scene_reference_z + g
                curve = edge_spread(
                    cam, g, sensor_xs_um=sensor_xs_um, n_samples=n_samples, seed=seed,
                    disc_radius=disc, object_plane_z=z_obj,
                )
                rmse = rmse_compare(oracle_curves[g], curve)
                rows.append(
                    EsfSweepRow(
                        degree=degree,
                        object_distance=g,
                        rmse=rmse,
                        log10_rmse=math.log10(max(rmse, 1e-300)),
                        noise_floor=floors[g],
                    )
                )
        except (ValueError, RuntimeError) as e:
            for g in object_distances:
                rows.append(
                    EsfSweepRow(
                        degree=degree,
                        object_distance=g,
                        rmse=math.nan,
                        log10_rmse=math.nan,
                        noise_floor=floors.get(g, math.nan),
                        error=str(e),
                    )
                )
    return rows


def write_curves_csv(path, curves, labels, abscissa_name="abscissa", config=None,
                     delta=False):
    """CSV with one column per curve (resampled onto the first abscissa)."""
    base = curves[0]
    columns = [base.values]
    for c in curves[1:]:
        columns.append(np.interp(base.abscissa, c.abscissa, c.values))
    header = [abscissa_name] + list(labels)
    if delta and len(curves) >= 2:
        columns.append(columns[1] - columns[0])
        header.append("delta")
    lines = []
    if config is not None:
        import json

        lines.append("# config: " + json.dumps(config))
    lines.append(",".join(header))
    for i, x in enumerate(base.abscissa):
        lines.append(",".join([f"{x:.17g}"] + [f"{col[i]:.17g}" for col in columns]))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def write_curves_svg(path, curves, labels, title="", width=640, height=400):
    """Minimal overlaid line plot; deterministic output for golden testing."""
    pad = 50
    xs = np.concatenate([c.abscissa for c in curves])
    ys = np.concatenate([c.values for c in curves])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 - x0 <= 0:
        x1 = x0 + 1.0
    if y1 - y0 <= 0:
        y1 = y0 + 1.0
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"]

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width/2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{pad}" y1="{height-pad}" x2="{width-pad}" y2="{height-pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height-pad}" stroke="black"/>',
        f'<text x="{pad}" y="{height-pad+16}" font-size="10" text-anchor="middle">{x0:.4g}</text>',
        f'<text x="{width-pad}" y="{height-pad+16}" font-size="10" text-anchor="middle">{x1:.4g}</text>',
        f'<text x="{pad-6}" y="{height-pad}" font-size="10" text-anchor="end">{y0:.4g}</text>',
        f'<text x="{pad-6}" y="{pad+4}" font-size="10" text-anchor="end">{y1:.4g}</text>',
    ]
    for k, (curve, label) in enumerate(zip(curves, labels)):
        color = colors[k % len(colors)]
        pts = " ".join(
            f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(curve.abscissa, curve.values)
        )
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        ly = pad + 16 * k
        parts.append(
            f'<line x1="{width-pad-90}" y1="{ly}" x2="{width-pad-70}" y2="{ly}" '
            f'stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(
            f'<text x="{width-pad-64}" y="{ly+4}" font-size="11">{label}</text>'
        )
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts) + "\n")
