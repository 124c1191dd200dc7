"""Deterministic synthetic lifespan cohort.

Each subject gets an age on the unified axis, per-modality 3-D phantoms
whose geometry and contrast encode that age, and an i.i.d. missing-modality
pattern. All randomness derives from per-subject seed streams so parallel
and serial generation agree.

Phantom law (all ramps piecewise-linear, clipped to [0, 1]):

  growth(a)  = ramp(a; -0.4 .. 18)      brain radius: grows until adulthood
  struct(a)  = ramp(a; -0.4 .. 2)       structural contrast maturation
  fa(a)      = ramp(a; -0.4 .. 25)      white-matter anisotropy maturation
  aging(a)   = ramp(a; 40 .. 100)       ventricle expansion past midlife

  brain radius    = (0.55 + 0.40 * growth) * (dim/2 - 2), axes x:y:z = 1 : 0.85 : 0.72
  ventricle radius= (0.04 + 0.52 * aging) * brain radius (same axis ratios)
  shell region    = normalized ellipsoid radius in (0.78, 1]
  T1w: core 0.55, shell 0.35 + 0.50 * struct, ventricle 0.02 (dark)
  T2w: core 0.45, shell 0.85 - 0.50 * struct, ventricle 0.95 (bright)
  FA : core 0.25, shell 0.10 + 0.70 * fa,     ventricle 0.02; clamped to [0, 1]

Boundaries are antialiased over roughly one voxel so sub-voxel radius
changes shift intensities continuously; the age signal stays resolvable
down to the narrow neonatal stage.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import staging
from .errors import ConfigError, DataError
from .staging import Stage, stage_of
from .volume_io import MODALITIES, Volume, read_vol, write_vol

GROWTH_RAMP = (-0.4, 18.0)
STRUCT_RAMP = (-0.4, 2.0)
FA_RAMP = (-0.4, 25.0)
AGING_RAMP = (40.0, 100.0)

BRAIN_AXIS_RATIOS = (1.0, 0.85, 0.72)
BRAIN_RADIUS_FRAC = (0.55, 0.40)  # base + gain * growth, times (dim/2 - 2)
VENTRICLE_RADIUS_FRAC = (0.04, 0.52)  # base + gain * aging, times brain radius
SHELL_RHO = 0.78

CORE_INTENSITY = {"T1w": 0.55, "T2w": 0.45, "FA": 0.25}
SHELL_LAW = {"T1w": (0.35, 0.50), "T2w": (0.85, -0.50), "FA": (0.10, 0.70)}
VENTRICLE_INTENSITY = {"T1w": 0.02, "T2w": 0.95, "FA": 0.02}

MANIFEST_HEADER = ("subject_id", "session_id", "age_years", "stage", "modality", "path")
MANIFEST_NAME = "manifest.csv"


def _ramp(age: float, bounds) -> float:
    lo, hi = bounds
    return float(np.clip((age - lo) / (hi - lo), 0.0, 1.0))


def growth_fraction(age: float) -> float:
    return _ramp(age, GROWTH_RAMP)


def aging_fraction(age: float) -> float:
    return _ramp(age, AGING_RAMP)


def shell_intensity(age: float, modality: str) -> float:
    base, gain = SHELL_LAW[modality]
    ramp = FA_RAMP if modality == "FA" else STRUCT_RAMP
    return base + gain * _ramp(age, ramp)


def brain_radius_vox(age: float, dim: int) -> float:
    base, gain = BRAIN_RADIUS_FRAC
    return (base + gain * growth_fraction(age)) * (dim / 2.0 - 2.0)


def ventricle_radius_vox(age: float, dim: int) -> float:
    base, gain = VENTRICLE_RADIUS_FRAC
    return (base + gain * aging_fraction(age)) * brain_radius_vox(age, dim)


@dataclass
class CohortConfig:
    n_per_stage: int
    volume_dim: int = 32
    noise_sigma: float = 0.0
    missing_prob: float = 0.0
    seed: int = 0

    def validate(self):
        if self.n_per_stage <= 0:
            raise ConfigError(f"n_per_stage must be positive, got {self.n_per_stage}")
        if self.volume_dim < 16:
            raise ConfigError(f"volume_dim must be >= 16, got {self.volume_dim}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 <= self.missing_prob < 1.0:
            raise ConfigError(f"missing_prob must be in [0, 1), got {self.missing_prob}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        return self


@dataclass
class Sample:
    """One subject-session: available modality volumes plus the age truth."""

    subject_id: str
    session_id: str
    age: float  # years on the unified axis
    stage: Stage
    volumes: dict[str, Volume] = field(repr=False)

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if m in self.volumes)


def _ellipsoid_rho(dim: int, radius_vox: float):
    center = (dim - 1) / 2.0
    ax = [radius_vox * r for r in BRAIN_AXIS_RATIOS]
    x = (np.arange(dim) - center)[:, None, None]
    y = (np.arange(dim) - center)[None, :, None]
    z = (np.arange(dim) - center)[None, None, :]
    return np.sqrt((x / ax[0]) ** 2 + (y / ax[1]) ** 2 + (z / ax[2]) ** 2)


_MEAN_RATIO = float(np.prod(BRAIN_AXIS_RATIOS) ** (1.0 / 3.0))


def _coverage(rho: np.ndarray, radius_vox: float) -> np.ndarray:
    # (rho - 1) * mean semi-axis approximates signed voxel distance to the
    # surface; ramp over ~1 voxel antialiases the boundary.
    return np.clip(0.5 - (rho - 1.0) * radius_vox * _MEAN_RATIO, 0.0, 1.0)


def render_phantom(age: float, modality: str, dim: int, noise_sigma: float, rng) -> Volume:
    """Render one age/modality phantom at 1 mm isotropic spacing."""
    if dim < 16:
        raise ConfigError(f"phantom dim must be >= 16, got {dim}")
    if modality not in MODALITIES:
        raise ConfigError(f"unknown modality {modality!r}")

    r_brain = brain_radius_vox(age, dim)
    r_vent = ventricle_radius_vox(age, dim)

    rho = _ellipsoid_rho(dim, r_brain)
    cov_brain = _coverage(rho, r_brain)
    rho_vent = _ellipsoid_rho(dim, r_vent)
    cov_vent = _coverage(rho_vent, r_vent)

    tissue = np.where(rho > SHELL_RHO, shell_intensity(age, modality), CORE_INTENSITY[modality])
    tissue = tissue * (1.0 - cov_vent) + VENTRICLE_INTENSITY[modality] * cov_vent
    img = tissue * cov_brain

    if noise_sigma > 0:
        img = img + rng.normal(0.0, noise_sigma, size=img.shape)
    if modality == "FA":
        img = np.clip(img, 0.0, 1.0)
    return Volume((dim, dim, dim), (1.0, 1.0, 1.0), modality, img.astype(np.float32))


def _subject_rng(seed: int, subject_index: int):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(subject_index,)))


def _round_age(age: float) -> float:
    # Manifest ages are printed with 9 significant digits; rounding at
    # generation makes that round-trip exact.
    return float(f"{age:.9g}")


def generate_cohort(cfg: CohortConfig, id_prefix: str = "") -> list[Sample]:
    """Generate n_per_stage samples per stage, deterministic in cfg.seed."""
    cfg.validate()
    samples = []
    for stage in staging.STAGES:
        lo, hi = stage.lower, stage.upper_eff
        for k in range(cfg.n_per_stage):
            index = stage.id * cfg.n_per_stage + k
            rng = _subject_rng(cfg.seed, index)

            age = _round_age(rng.uniform(lo, hi))
            while not stage.contains(age):  # 9-digit rounding can cross a boundary
                age = _round_age(rng.uniform(lo, hi))

            kept = ()
            while not kept:
                drops = rng.uniform(size=len(MODALITIES)) < cfg.missing_prob
                kept = tuple(m for m, drop in zip(MODALITIES, drops) if not drop)

            volumes = {
                m: render_phantom(age, m, cfg.volume_dim, cfg.noise_sigma, rng)
                for m in kept
            }
            samples.append(Sample(
                subject_id=f"sub-{id_prefix}{index:04d}",
                session_id="ses-01",
                age=age,
                stage=stage,
                volumes=volumes,
            ))
    return samples


def export_cohort(samples: list[Sample], out_dir) -> Path:
    """Write one .vol per (sample, modality) plus the manifest; returns its path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        for m in s.modalities:
            rel = f"{s.subject_id}_{s.session_id}_{m}.vol"
            write_vol(out_dir / rel, s.volumes[m])
            rows.append((s.subject_id, s.session_id, f"{s.age:.9g}", s.stage.name, m, rel))
    manifest = out_dir / MANIFEST_NAME
    with open(manifest, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)
    return manifest


def read_manifest(manifest_path) -> list[dict]:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    with open(manifest_path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != list(MANIFEST_HEADER):
            raise DataError(f"{manifest_path}: bad manifest header {header}")
        rows = [dict(zip(MANIFEST_HEADER, row)) for row in reader]
    if not rows:
        raise DataError(f"{manifest_path}: manifest has no rows")
    return rows


def load_cohort(manifest_path) -> list[Sample]:
    """Re-import an exported cohort, preserving manifest order."""
    manifest_path = Path(manifest_path)
    rows = read_manifest(manifest_path)
    base = manifest_path.parent

    grouped: dict[tuple[str, str], dict] = {}
    for row in rows:
        key = (row["subject_id"], row["session_id"])
        age = float(row["age_years"])
        entry = grouped.setdefault(key, {"age": age, "stage": row["stage"], "volumes": {}})
        if entry["age"] != age or entry["stage"] != row["stage"]:
            raise DataError(f"{manifest_path}: inconsistent age/stage for subject {key[0]}")
        if row["modality"] in entry["volumes"]:
            raise DataError(f"{manifest_path}: duplicate modality {row['modality']} for subject {key[0]}")
        entry["volumes"][row["modality"]] = read_vol(base / row["path"])

    samples = []
    for (subject_id, session_id), entry in grouped.items():
        stage = stage_of(entry["age"])
        if stage.name != entry["stage"]:
            raise DataError(
                f"{manifest_path}: subject {subject_id} labeled {entry['stage']} "
                f"but age {entry['age']} falls in {stage.name}"
            )
        dims = {v.dims for v in entry["volumes"].values()}
        spacings = {v.spacing for v in entry["volumes"].values()}
        if len(dims) != 1 or len(spacings) != 1:
            raise DataError(f"{manifest_path}: subject {subject_id} has mismatched volume grids")
        samples.append(Sample(subject_id, session_id, entry["age"], stage, entry["volumes"]))
    return samples
