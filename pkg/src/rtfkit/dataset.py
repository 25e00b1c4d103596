"""Ray-pair dataset generation and its text serialization.

A dataset is the training material for the polynomial transfer function:
rows of (input ray, output ray) with all-NaN outputs for rays the lens
blocks. Inputs are sampled meridionally (x = 0, y >= 0) from the input
plane toward a polar grid over the (oversampled) pupil disc.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .lens import paraxial_pupil, trace_lens_batch

_HEADER_MAGIC = "# rtf-dataset v1"
_COLUMNS = "in_x in_y in_z in_dx in_dy in_dz out_x out_y out_z out_dx out_dy out_dz"


class DatasetConfigError(ValueError):
    """The sampling configuration cannot produce a dataset."""


class DatasetParseError(ValueError):
    def __init__(self, message, line_number=None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class PlaneOutput:
    z: float


@dataclass(frozen=True)
class SphereOutput:
    center_z: float
    radius: float


@dataclass(frozen=True)
class PlaneConfig:
    """Axial geometry of the camera model: input plane, output surface, and
    the offset (from the input plane) of the ray-pass plane."""

    input_z: float
    output: PlaneOutput | SphereOutput
    raypass_offset: float

    def __post_init__(self):
        if self.raypass_offset == 0.0:
            raise ValueError("raypass_offset must be nonzero")

    @property
    def raypass_z(self):
        return self.input_z + self.raypass_offset


@dataclass(frozen=True)
class SamplingConfig:
    n_field: int = 20
    y_max: float = 10.0
    n_pupil_radial: int = 10
    n_pupil_angular: int = 16
    pupil_margin: float = 1.2
    seed: int = 0
    jitter: bool = False
    grid_phase: float = 0.5
    pupil_z: float | None = None        # manual pupil override
    pupil_radius: float | None = None

    def __post_init__(self):
        if self.n_field < 2:
            raise ValueError("n_field must be >= 2")
        if self.pupil_margin < 1.0:
            raise ValueError("pupil_margin must be >= 1")


@dataclass(frozen=True)
class RayRecord:
    input: np.ndarray   # (6,) x y z dx dy dz
    output: np.ndarray  # (6,) or all-NaN

    @property
    def blocked(self):
        return bool(np.isnan(self.output[0]))


@dataclass(frozen=True)
class RtfDataset:
    inputs: np.ndarray   # (N, 6)
    outputs: np.ndarray  # (N, 6), all-NaN rows for blocked rays
    planes: PlaneConfig
    lens_name: str
    wavelength_nm: float
    sampling: SamplingConfig | None = None

    def __post_init__(self):
        object.__setattr__(self, "inputs", np.asarray(self.inputs, dtype=float))
        object.__setattr__(self, "outputs", np.asarray(self.outputs, dtype=float))
        if self.inputs.shape != self.outputs.shape or self.inputs.shape[1:] != (6,):
            raise ValueError("inputs and outputs must both be (N, 6)")

    def __len__(self):
        return self.inputs.shape[0]

    def __eq__(self, other):
        if not isinstance(other, RtfDataset):
            return NotImplemented
        return (
            np.array_equal(self.inputs, other.inputs)
            and np.array_equal(self.outputs, other.outputs, equal_nan=True)
            and self.planes == other.planes
            and self.lens_name == other.lens_name
            and self.wavelength_nm == other.wavelength_nm
            and self.sampling == other.sampling
        )

    @property
    def blocked_mask(self):
        return np.isnan(self.outputs[:, 0])

    def record(self, i):
        return RayRecord(self.inputs[i], self.outputs[i])

    def field_heights(self):
        return np.unique(self.inputs[:, 1])

    def field_mask(self, y_hat):
        return self.inputs[:, 1] == y_hat


def worker_count():
    """Thread budget: RTFKIT_THREADS, where 0 (or unset) means auto."""
    raw = os.environ.get("RTFKIT_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n <= 0:
        n = min(4, os.cpu_count() or 1)
    return n


def default_planes(
    lens,
    input_offset=0.01,
    output_offset=0.01,
    raypass_offset=None,
    spherical_output=False,
    sphere_radius=None,
):
    """PlaneConfig for an already-reversed lens with its first vertex at z=0.

    Planes sit input_offset before the first vertex and output_offset past
    the last, enlarged if a surface dome would poke through. raypass_offset
    defaults to the paraxial exit-pupil plane.
    """
    surfaces = lens.surfaces
    z_last = lens.last_vertex_z

    def _cap_reach(surf, direction):
        # axial extent of the cap beyond its vertex toward direction (+1/-1);
        # a cap with R > 0 pokes toward +z, R < 0 toward -z
        if surf.radius is None:
            return 0.0
        R = surf.radius
        sa = min(surf.semi_aperture, abs(R))
        reach = abs(R) - math.sqrt(R * R - sa * sa)
        return reach if (direction > 0) == (R > 0) else 0.0

    in_off = input_offset
    out_off = output_offset
    if surfaces:
        in_off = input_offset + _cap_reach(surfaces[0], -1)
        out_off = output_offset + _cap_reach(surfaces[-1], +1)
    input_z = -in_off
    if raypass_offset is None:
        pz, _ = paraxial_pupil(lens, input_z)
        raypass_offset = pz - input_z
        if abs(raypass_offset) < 1e-6:
            raypass_offset = max(1.0, z_last)
    if spherical_output:
        radius = sphere_radius
        if radius is None:
            radius = max((s.semi_aperture for s in surfaces), default=1.0) * 1.5
        output = SphereOutput(center_z=z_last, radius=radius)
    else:
        output = PlaneOutput(z=z_last + out_off)
    return PlaneConfig(input_z=input_z, output=output, raypass_offset=raypass_offset)


def _resolve_pupil(lens, planes, sampling):
    pz, pr = sampling.pupil_z, sampling.pupil_radius
    if pz is None or pr is None:
        try:
            auto_z, auto_r = paraxial_pupil(lens, planes.input_z)
        except (ValueError, RuntimeError) as e:
            if pz is None or pr is None:
                raise DatasetConfigError(
                    f"paraxial pupil unavailable ({e}); supply pupil_z and pupil_radius"
                ) from e
        pz = auto_z if pz is None else pz
        pr = auto_r if pr is None else pr
    if abs(pz - planes.input_z) < 1e-9:
        raise DatasetConfigError("pupil plane coincides with the input plane")
    return float(pz), float(pr)


def _pupil_grid(sampling, pupil_r, field_index):
    """Polar grid (optionally jittered) of aim points on the pupil disc."""
    nr, na = sampling.n_pupil_radial, sampling.n_pupil_angular
    kk, jj = np.meshgrid(np.arange(nr), np.arange(na), indexing="ij")
    kk = kk.ravel().astype(float)
    jj = jj.ravel().astype(float)
    if sampling.jitter:
        gen = np.random.Generator(
            np.random.Philox(key=sampling.seed, counter=[0, 0, 0, field_index])
        )
        kk = kk + gen.random(kk.size)
        jj = jj + gen.random(jj.size)
    else:
        kk = kk + sampling.grid_phase
        jj = jj + sampling.grid_phase
    radius = pupil_r * sampling.pupil_margin * np.sqrt(kk / nr)
    theta = 2.0 * np.pi * jj / na
    return radius * np.cos(theta), radius * np.sin(theta)


def propagate_to_output(origins, directions, output):
    """Advance exit rays to the output surface.

    Returns (points, ok): ok is False where the surface cannot be reached
    the physical way (plane outputs need dz > 0; sphere outputs need a
    forward intersection).
    """
    o = np.asarray(origins, dtype=float)
    d = np.asarray(directions, dtype=float)
    if isinstance(output, PlaneOutput):
        dz = d[:, 2]
        ok = dz > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (output.z - o[:, 2]) / dz
        ok &= t >= -1e-9
        t = np.where(ok, t, 0.0)
        return o + t[:, None] * d, ok
    center = np.array([0.0, 0.0, output.center_z])
    oc = o - center
    b = np.einsum("ij,ij->i", oc, d)
    c = np.einsum("ij,ij->i", oc, oc) - output.radius**2
    disc = b * b - c
    ok = disc >= 0
    s = np.sqrt(np.where(ok, disc, 0.0))
    t1, t2 = -b - s, -b + s
    # smallest forward parameter
    t = np.where(t1 >= -1e-9, t1, t2)
    ok &= t >= -1e-9
    t = np.where(ok, t, 0.0)
    return o + t[:, None] * d, ok


def generate_dataset(lens, planes, sampling):
    """Sample and trace the input/output ray pairs for one lens.

    The lens must already be reversed (sensor side first) with its first
    vertex at z = 0 and the input plane before it. Blocked rays keep their
    input row and get an all-NaN output row.
    """
    pupil_z, pupil_r = _resolve_pupil(lens, planes, sampling)
    field_ys = np.linspace(0.0, sampling.y_max, sampling.n_field)

    def _one_field(args):
        fi, y_hat = args
        px, py = _pupil_grid(sampling, pupil_r, fi)
        n = px.size
        origins = np.tile([0.0, y_hat, planes.input_z], (n, 1))
        targets = np.stack([px, py, np.full(n, pupil_z)], axis=1)
        d = targets - origins
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        d[d[:, 2] < 0] *= -1.0  # propagate toward the lens even for virtual pupils
        exit_o, exit_d, blocked_at, _ = trace_lens_batch(lens, origins, d)
        out = np.full((n, 6), np.nan)
        alive = blocked_at < 0
        pts, reach_ok = propagate_to_output(exit_o[alive], exit_d[alive], planes.output)
        ok_rows = np.flatnonzero(alive)[reach_ok]
        out[ok_rows, :3] = pts[reach_ok]
        out[ok_rows, 3:] = exit_d[alive][reach_ok]
        inputs = np.hstack([origins, d])
        n_unreachable = int((~reach_ok).sum())
        return inputs, out, n_unreachable

    jobs = list(enumerate(field_ys))
    threads = worker_count()
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_one_field, jobs))
    else:
        results = [_one_field(j) for j in jobs]

    inputs = np.vstack([r[0] for r in results])
    outputs = np.vstack([r[1] for r in results])
    n_unreachable = sum(r[2] for r in results)
    if n_unreachable:
        warnings.warn(
            f"{n_unreachable} traced rays could not reach the output surface "
            "and were recorded as blocked",
            stacklevel=2,
        )
    return RtfDataset(
        inputs=inputs,
        outputs=outputs,
        planes=planes,
        lens_name=lens.name,
        wavelength_nm=lens.wavelength_nm,
        sampling=sampling,
    )


def _fmt(v):
    if math.isnan(v):
        return "NaN"
    return f"{v:.17g}"


def _planes_to_dict(planes):
    if isinstance(planes.output, PlaneOutput):
        out = {"type": "plane", "z_mm": planes.output.z}
    else:
        out = {
            "type": "sphere",
            "center_z_mm": planes.output.center_z,
            "radius_mm": planes.output.radius,
        }
    return {
        "input_z_mm": planes.input_z,
        "output": out,
        "raypass_offset_mm": planes.raypass_offset,
    }


def _planes_from_dict(d):
    out = d["output"]
    if out["type"] == "plane":
        output = PlaneOutput(z=float(out["z_mm"]))
    elif out["type"] == "sphere":
        output = SphereOutput(
            center_z=float(out["center_z_mm"]), radius=float(out["radius_mm"])
        )
    else:
        raise DatasetParseError(f"unknown output surface type {out['type']!r}")
    return PlaneConfig(
        input_z=float(d["input_z_mm"]),
        output=output,
        raypass_offset=float(d["raypass_offset_mm"]),
    )


def write_dataset(ds, path):
    """Write the 12-column whitespace text format (NaN marks blocked)."""
    lines = [_HEADER_MAGIC]
    lines.append(f"# lens_name: {ds.lens_name}")
    lines.append(f"# wavelength_nm: {_fmt(ds.wavelength_nm)}")
    lines.append(f"# planes: {json.dumps(_planes_to_dict(ds.planes))}")
    if ds.sampling is not None:
        lines.append(f"# sampling: {json.dumps(ds.sampling.__dict__)}")
    lines.append(f"# columns: {_COLUMNS}")
    for inp, out in zip(ds.inputs, ds.outputs):
        lines.append(" ".join(_fmt(v) for v in inp) + " " + " ".join(_fmt(v) for v in out))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_dataset(path):
    lens_name = ""
    wavelength = float("nan")
    planes = None
    sampling = None
    rows = []
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("lens_name:"):
                    lens_name = body.split(":", 1)[1].strip()
                elif body.startswith("wavelength_nm:"):
                    wavelength = float(body.split(":", 1)[1])
                elif body.startswith("planes:"):
                    planes = _planes_from_dict(json.loads(body.split(":", 1)[1]))
                elif body.startswith("sampling:"):
                    sampling = SamplingConfig(**json.loads(body.split(":", 1)[1]))
                continue
            parts = line.split()
            if len(parts) != 12:
                raise DatasetParseError(
                    f"expected 12 columns, found {len(parts)}", line_number=line_no
                )
            try:
                rows.append([float(p) for p in parts])
            except ValueError as e:
                raise DatasetParseError(str(e), line_number=line_no) from e
    if planes is None:
        raise DatasetParseError("missing '# planes:' header")
    data = np.array(rows, dtype=float).reshape(-1, 12)
    return RtfDataset(
        inputs=data[:, :6],
        outputs=data[:, 6:],
        planes=planes,
        lens_name=lens_name,
        wavelength_nm=wavelength,
        sampling=sampling,
    )
