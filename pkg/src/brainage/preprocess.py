"""Desk-scale volume preprocessing: isotropic resampling, bias-field
correction, intensity normalization.

The bias correction is a log-domain polynomial least-squares fit, a
documented simplification of the usual smooth multiplicative-bias
correction; it is not N4. Resampling is trilinear (exact on affine
intensity fields), with edge clamping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .volume_io import Volume

MASK_FRACTION = 0.05  # brain mask: voxel > 5% of volume max


@dataclass
class PreprocessConfig:
    target_spacing_mm: float = 1.0
    bias_poly_degree: int = 2
    normalize: str = "zscore"  # zscore | minmax | none

    def validate(self):
        if self.target_spacing_mm <= 0:
            raise ConfigError(f"target_spacing_mm must be positive, got {self.target_spacing_mm}")
        if not 0 <= self.bias_poly_degree <= 3:
            raise ConfigError(f"bias_poly_degree must be in 0..3, got {self.bias_poly_degree}")
        if self.normalize not in ("zscore", "minmax", "none"):
            raise ConfigError(f"normalize must be zscore|minmax|none, got {self.normalize!r}")
        return self


def resample_isotropic(v: Volume, target_mm: float) -> Volume:
    """Resample to an isotropic grid via trilinear interpolation.

    Output extent i is round(dim_i * spacing_i / target) (at least 1);
    sampling uses the grid-point convention (input voxel i sits at
    physical i * spacing_i), so resampling at the current spacing on an
    already-isotropic volume is the identity. Coordinates outside the
    grid clamp to the edge.
    """
    if target_mm <= 0:
        raise ConfigError(f"target spacing must be positive, got {target_mm}")
    out_dims = tuple(max(1, int(round(d * s / target_mm))) for d, s in zip(v.dims, v.spacing))

    coords = [np.arange(n, dtype=np.float64) * target_mm / sp for n, sp in zip(out_dims, v.spacing)]
    out = _trilinear(v.voxels.astype(np.float64), coords)
    return Volume(out_dims, (target_mm,) * 3, v.modality, out.astype(np.float32))


def _trilinear(vox: np.ndarray, coords) -> np.ndarray:
    """Sample vox at the outer product of per-axis coordinates, clamped."""
    idx0, frac = [], []
    for axis, c in enumerate(coords):
        n = vox.shape[axis]
        c = np.clip(c, 0.0, n - 1.0)
        i0 = np.minimum(np.floor(c).astype(np.intp), n - 1 if n == 1 else n - 2)
        idx0.append(i0)
        frac.append(c - i0)

    x0, y0, z0 = np.ix_(idx0[0], idx0[1], idx0[2])
    fx, fy, fz = np.ix_(frac[0], frac[1], frac[2])
    x1 = np.minimum(x0 + 1, vox.shape[0] - 1)
    y1 = np.minimum(y0 + 1, vox.shape[1] - 1)
    z1 = np.minimum(z0 + 1, vox.shape[2] - 1)

    c00 = vox[x0, y0, z0] * (1 - fx) + vox[x1, y0, z0] * fx
    c10 = vox[x0, y1, z0] * (1 - fx) + vox[x1, y1, z0] * fx
    c01 = vox[x0, y0, z1] * (1 - fx) + vox[x1, y0, z1] * fx
    c11 = vox[x0, y1, z1] * (1 - fx) + vox[x1, y1, z1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def _poly_design(dims, degree: int, flat_index=None) -> np.ndarray:
    """Monomial design matrix x^a y^b z^c, a+b+c <= degree, on [-1, 1]^3."""
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in dims]
    grids = np.meshgrid(*axes, indexing="ij")
    flat = [g.ravel() for g in grids]
    if flat_index is not None:
        flat = [f[flat_index] for f in flat]
    cols = []
    for a in range(degree + 1):
        for b in range(degree + 1 - a):
            for c in range(degree + 1 - a - b):
                cols.append(flat[0] ** a * flat[1] ** b * flat[2] ** c)
    return np.stack(cols, axis=1)


def correct_bias(v: Volume, degree: int) -> Volume:
    """Remove a smooth multiplicative bias field.

    Fits a degree-d 3-D polynomial to the log-intensities of masked voxels
    by least squares and divides the whole volume by exp(fit). The masked
    mean log-intensity of the output is 0 (the fit includes a constant
    term). Degree 0 therefore divides by the geometric mean of the mask.
    """
    if not 0 <= degree <= 3:
        raise ConfigError(f"bias polynomial degree must be in 0..3, got {degree}")
    vox = v.voxels.astype(np.float64)
    mask = vox > MASK_FRACTION * vox.max()
    flat_index = np.flatnonzero(mask.ravel())
    n_coeff = sum(1 for a in range(degree + 1) for b in range(degree + 1 - a) for c in range(degree + 1 - a - b))
    if flat_index.size < n_coeff:
        raise DataError(f"bias fit underdetermined: {flat_index.size} masked voxels for {n_coeff} coefficients")

    masked_vals = vox.ravel()[flat_index]
    if np.any(masked_vals <= 0):
        raise DataError("bias correction needs positive intensities inside the brain mask")

    design = _poly_design(v.dims, degree, flat_index)
    coeff, *_ = np.linalg.lstsq(design, np.log(masked_vals), rcond=None)
    field = (_poly_design(v.dims, degree) @ coeff).reshape(v.dims)
    corrected = vox / np.exp(field)
    return Volume(v.dims, v.spacing, v.modality, corrected.astype(np.float32))


def normalize_intensity(v: Volume, mode: str) -> Volume:
    """Fix the intensity scale for model input.

    zscore: mean 0, std 1 over all voxels. minmax: [0, 1]. FA volumes are
    always min-max scaled and clamped to [0, 1] regardless of mode, since
    FA is a normalized index by definition.
    """
    if mode not in ("zscore", "minmax", "none"):
        raise ConfigError(f"normalize mode must be zscore|minmax|none, got {mode!r}")
    vox = v.voxels.astype(np.float64)

    if v.modality == "FA":
        mode = "minmax"
    if mode == "none":
        out = vox
    elif mode == "minmax":
        lo, hi = vox.min(), vox.max()
        out = np.zeros_like(vox) if hi == lo else (vox - lo) / (hi - lo)
    else:
        std = vox.std()
        if std == 0.0:
            raise DataError("z-score normalization of a constant volume")
        out = (vox - vox.mean()) / std

    if v.modality == "FA":
        out = np.clip(out, 0.0, 1.0)
    return Volume(v.dims, v.spacing, v.modality, out.astype(np.float32))
