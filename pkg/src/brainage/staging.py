"""Unified lifespan age axis and the six-stage taxonomy.

Ages live on a single axis in YEARS; negative values are prenatal. Fetal
ages arrive as gestational weeks w and map to (w - 40) weeks relative to
term, converted to years. Stage boundaries are half-open [lower, upper)
and gap-closed so that every age >= the fetal floor belongs to exactly
one stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ContractError

WEEKS_PER_YEAR = 52.1775  # mean Gregorian weeks per year

FETAL_FLOOR_YEARS = -0.40  # gestational week 20 mapped, then slightly padded
ELDERLY_CAP_YEARS = 100.0  # finite regression range for the unbounded stage


@dataclass(frozen=True)
class Stage:
    id: int
    name: str
    lower: float  # years, inclusive
    upper: float  # years, exclusive; math.inf for elderly

    @property
    def upper_eff(self) -> float:
        """Upper bound used for within-stage normalization (elderly capped)."""
        return ELDERLY_CAP_YEARS if math.isinf(self.upper) else self.upper

    @property
    def width(self) -> float:
        return self.upper_eff - self.lower

    def contains(self, years: float) -> bool:
        return self.lower <= years < self.upper


STAGES = (
    Stage(0, "fetal", FETAL_FLOOR_YEARS, 0.0),
    Stage(1, "neonatal", 0.0, 0.25),
    Stage(2, "infant", 0.25, 2.0),
    Stage(3, "child", 2.0, 18.0),
    Stage(4, "adult", 18.0, 65.0),
    Stage(5, "elderly", 65.0, math.inf),
)

STAGE_NAMES = tuple(s.name for s in STAGES)
N_STAGES = len(STAGES)
_BY_NAME = {s.name: s for s in STAGES}


def stage_by_name(name: str) -> Stage:
    try:
        return _BY_NAME[name]
    except KeyError:
        raise ContractError(f"unknown stage name {name!r}; expected one of {STAGE_NAMES}") from None


def stage_by_id(stage_id: int) -> Stage:
    if not 0 <= stage_id < N_STAGES:
        raise ContractError(f"stage id {stage_id} outside 0..{N_STAGES - 1}")
    return STAGES[stage_id]


def unify_fetal(weeks: float) -> float:
    """Map fetal gestational weeks to years on the unified axis.

    Term (week 40) maps to exactly 0.0.
    """
    if not 20.0 <= weeks <= 40.0:
        raise ValueError(f"gestational age {weeks} weeks outside the fetal range [20, 40]")
    return (weeks - 40.0) / WEEKS_PER_YEAR


def stage_of(years: float) -> Stage:
    """Return the unique stage whose [lower, upper) interval contains `years`."""
    if not math.isfinite(years) or years < FETAL_FLOOR_YEARS:
        raise ValueError(f"age {years} years is below the fetal floor {FETAL_FLOOR_YEARS}")
    for stage in STAGES:
        if stage.contains(years):
            return stage
    raise AssertionError("unreachable: stages partition the axis")


def normalize_within_stage(years: float, stage: Stage) -> float:
    """Affine map of the stage interval onto [0, 1)."""
    if stage_of(years) is not stage:
        raise ContractError(f"age {years} years is not in stage {stage.name}")
    return (years - stage.lower) / stage.width


def denormalize_within_stage(u: float, stage: Stage) -> float:
    """Inverse of normalize_within_stage (defined on [0, 1))."""
    return stage.lower + u * stage.width


def stage_table() -> list[dict]:
    """Taxonomy as plain data, embedded in metrics output for audit."""
    return [
        {
            "id": s.id,
            "name": s.name,
            "lower_years": s.lower,
            "upper_years": None if math.isinf(s.upper) else s.upper,
            "upper_eff_years": s.upper_eff,
        }
        for s in STAGES
    ]
