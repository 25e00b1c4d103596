"""Fitting and evaluating the six-output polynomial transfer function.

Inputs are reduced by rotational symmetry to (y_hat, dx_hat, dy_hat); each
of the six outputs (x, y, z, dx, dy, dz on the output surface) gets its own
dense monomial polynomial, fitted by QR least squares on the same design
matrix. There is no regularization: the training data is noise-free, so the
residual is pure model error.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .geometry import meridional_phi_batch, rotate_about_z
from .dataset import PlaneOutput

OUTPUT_NAMES = ("x", "y", "z", "dx", "dy", "dz")


class UnderdeterminedFitError(ValueError):
    """Fewer usable records than basis functions."""


class RankDeficiencyWarning(UserWarning):
    pass


@dataclass(frozen=True)
class MonomialBasis:
    """Dense monomials over (y_hat, dx_hat, dy_hat) up to a total degree.

    exponents are ordered graded-lexicographically (total degree ascending,
    then lexicographically descending within a degree), which is stable
    across runs and recorded verbatim in the serialized model.
    """

    degree: int
    exponents: tuple[tuple[int, int, int], ...]

    @classmethod
    def of_degree(cls, degree):
        if degree < 1:
            raise ValueError("degree must be >= 1")
        exps = []
        for total in range(degree + 1):
            for i in range(total, -1, -1):
                for j in range(total - i, -1, -1):
                    exps.append((i, j, total - i - j))
        return cls(degree=degree, exponents=tuple(exps))

    def __len__(self):
        return len(self.exponents)

    def design_matrix(self, y, dx, dy):
        y, dx, dy = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (y, dx, dy))
        dmax = self.degree
        ypow = np.vander(y, dmax + 1, increasing=True)
        xpow = np.vander(dx, dmax + 1, increasing=True)
        wpow = np.vander(dy, dmax + 1, increasing=True)
        cols = [ypow[:, i] * xpow[:, j] * wpow[:, k] for (i, j, k) in self.exponents]
        return np.stack(cols, axis=1)


@dataclass(frozen=True)
class PolynomialMap:
    """The fitted transfer function plus its input normalization.

    When output_plane_z is set the model uses the redundant-output
    convention: z is the stored plane position and dz is recomputed from
    sqrt(1 - dx^2 - dy^2), so plane-output directions are exactly unit.
    """

    basis: MonomialBasis
    input_scale: tuple[float, float, float]
    coefficients: dict[str, np.ndarray]
    output_plane_z: float | None = None

    def __post_init__(self):
        if set(self.coefficients) != set(OUTPUT_NAMES):
            raise ValueError(f"coefficients must have keys {OUTPUT_NAMES}")
        coeffs = {}
        for k, v in self.coefficients.items():
            v = np.asarray(v, dtype=float)
            if v.shape != (len(self.basis),):
                raise ValueError(f"coefficient vector {k!r} does not match the basis")
            v.setflags(write=False)
            coeffs[k] = v
        object.__setattr__(self, "coefficients", coeffs)
        if any(s <= 0 for s in self.input_scale):
            raise ValueError("input_scale components must be > 0")

    def __eq__(self, other):
        if not isinstance(other, PolynomialMap):
            return NotImplemented
        return (
            self.basis == other.basis
            and self.input_scale == other.input_scale
            and self.output_plane_z == other.output_plane_z
            and all(
                np.array_equal(self.coefficients[k], other.coefficients[k])
                for k in OUTPUT_NAMES
            )
        )

    def evaluate(self, y_hat, dx_hat, dy_hat):
        """Vectorized evaluation: returns an (N, 6) array (x y z dx dy dz)."""
        s = self.input_scale
        A = self.basis.design_matrix(
            np.asarray(y_hat, dtype=float) / s[0],
            np.asarray(dx_hat, dtype=float) / s[1],
            np.asarray(dy_hat, dtype=float) / s[2],
        )
        out = np.stack([A @ self.coefficients[k] for k in OUTPUT_NAMES], axis=1)
        if self.output_plane_z is not None:
            out[:, 2] = self.output_plane_z
            out[:, 5] = np.sqrt(np.clip(1.0 - out[:, 3] ** 2 - out[:, 4] ** 2, 0.0, None))
        return out

    def transfer(self, origin, direction):
        """Apply the full rotate / evaluate / unrotate pipeline to raw rays.

        origin, direction: (N, 3) arrays. No ray-pass gating happens here.
        Returns (origins_out, directions_out).
        """
        origin = np.atleast_2d(np.asarray(origin, dtype=float))
        direction = np.atleast_2d(np.asarray(direction, dtype=float))
        phi = meridional_phi_batch(origin, direction)
        y_hat = np.hypot(origin[:, 0], origin[:, 1])
        d_rot = rotate_about_z(direction, phi)
        out = self.evaluate(y_hat, d_rot[:, 0], d_rot[:, 1])
        origins = rotate_about_z(out[:, :3], -phi)
        dirs = rotate_about_z(out[:, 3:], -phi)
        return origins, dirs


def eval_polynomial_map(polymap, meridional):
    """Evaluate one reduced-input ray; returns the 6-vector output."""
    return polymap.evaluate(
        [meridional.y_hat], [meridional.dx_hat], [meridional.dy_hat]
    )[0]


@dataclass(frozen=True)
class FitReport:
    degree: int
    rms: dict[str, float]
    max_abs: dict[str, float]
    n_used: int
    n_blocked: int
    condition: float
    rank: int
    n_basis: int

    @property
    def rms_position(self):
        return math.sqrt(sum(self.rms[k] ** 2 for k in ("x", "y", "z")))

    @property
    def rms_direction(self):
        return math.sqrt(sum(self.rms[k] ** 2 for k in ("dx", "dy", "dz")))

    def summary(self):
        lines = [
            f"degree {self.degree}: {self.n_used} records used, "
            f"{self.n_blocked} blocked, {self.n_basis} basis terms, "
            f"rank {self.rank}, cond {self.condition:.3e}"
        ]
        for k in OUTPUT_NAMES:
            lines.append(f"  {k:>2}: rms {self.rms[k]:.6e}  max {self.max_abs[k]:.6e}")
        return "\n".join(lines)


def meridionalize_records(inputs, outputs):
    """Rotate record pairs into the meridional frame.

    Dataset rows are already meridional (x = 0, y >= 0), in which case this
    is the identity; arbitrary rays are supported for robustness.
    """
    inputs = np.asarray(inputs, dtype=float)
    outputs = np.asarray(outputs, dtype=float)
    phi = meridional_phi_batch(inputs[:, :3], inputs[:, 3:])
    y_hat = np.hypot(inputs[:, 0], inputs[:, 1])
    d_in = rotate_about_z(inputs[:, 3:], phi)
    out_o = rotate_about_z(outputs[:, :3], phi)
    out_d = rotate_about_z(outputs[:, 3:], phi)
    return y_hat, d_in[:, 0], d_in[:, 1], np.hstack([out_o, out_d])


def fit_polynomial_map(ds, degree, input_scale=None):
    """Least-squares fit of all six outputs on the non-blocked records.

    Returns (PolynomialMap, FitReport). The six solves share one QR
    factorization of the design matrix (scipy gelsy driver).
    """
    basis = MonomialBasis.of_degree(degree)
    mask = ~ds.blocked_mask
    n_used = int(mask.sum())
    n_blocked = len(ds) - n_used
    if n_used < len(basis):
        raise UnderdeterminedFitError(
            f"{n_used} usable records < {len(basis)} basis terms at degree {degree}"
        )
    y_hat, dx_hat, dy_hat, B = meridionalize_records(ds.inputs[mask], ds.outputs[mask])

    if input_scale is None:
        scale = tuple(
            float(s) if s > 0 else 1.0
            for s in (np.abs(y_hat).max(), np.abs(dx_hat).max(), np.abs(dy_hat).max())
        )
    else:
        scale = tuple(float(s) for s in input_scale)

    A = basis.design_matrix(y_hat / scale[0], dx_hat / scale[1], dy_hat / scale[2])
    coef, _, rank, _ = scipy.linalg.lstsq(A, B, lapack_driver="gelsy")
    if rank < len(basis):
        warnings.warn(
            f"design matrix rank {rank} < {len(basis)} basis terms",
            RankDeficiencyWarning,
            stacklevel=2,
        )
    condition = float(np.linalg.cond(A))

    residual = A @ coef - B
    rms = {k: float(np.sqrt(np.mean(residual[:, i] ** 2))) for i, k in enumerate(OUTPUT_NAMES)}
    max_abs = {k: float(np.abs(residual[:, i]).max()) for i, k in enumerate(OUTPUT_NAMES)}

    plane_z = ds.planes.output.z if isinstance(ds.planes.output, PlaneOutput) else None
    polymap = PolynomialMap(
        basis=basis,
        input_scale=scale,
        coefficients={k: coef[:, i] for i, k in enumerate(OUTPUT_NAMES)},
        output_plane_z=plane_z,
    )
    report = FitReport(
        degree=degree,
        rms=rms,
        max_abs=max_abs,
        n_used=n_used,
        n_blocked=n_blocked,
        condition=condition,
        rank=int(rank),
        n_basis=len(basis),
    )
    return polymap, report


def _positional_direction_rms(polymap, ds):
    mask = ~ds.blocked_mask
    y_hat, dx_hat, dy_hat, B = meridionalize_records(ds.inputs[mask], ds.outputs[mask])
    pred = polymap.evaluate(y_hat, dx_hat, dy_hat)
    dp = pred[:, :3] - B[:, :3]
    dd = pred[:, 3:] - B[:, 3:]
    return (
        float(np.sqrt(np.mean(np.sum(dp**2, axis=1)))),
        float(np.sqrt(np.mean(np.sum(dd**2, axis=1)))),
    )


@dataclass(frozen=True)
class SweepRow:
    degree: int
    train_rms: float
    validation_rms: float
    train_rms_direction: float = math.nan
    validation_rms_direction: float = math.nan
    error: str | None = None


def degree_sweep(ds, degrees, validation):
    """Fit at each degree and report train/validation positional RMS.

    The validation dataset should come from an offset sampling grid.
    Monotonic decline is reported, never enforced; failed fits surface as
    rows with an error message.
    """
    rows = []
    for degree in degrees:
        try:
            polymap, _ = fit_polynomial_map(ds, degree)
            train_pos, train_dir = _positional_direction_rms(polymap, ds)
            val_pos, val_dir = _positional_direction_rms(polymap, validation)
            rows.append(
                SweepRow(degree, train_pos, val_pos, train_dir, val_dir)
            )
        except (UnderdeterminedFitError, ValueError) as e:
            rows.append(
                SweepRow(degree, math.nan, math.nan, error=str(e))
            )
    return rows
