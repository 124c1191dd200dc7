"""Run configuration: a strict INI-style text file.

Grammar: `[section]` headers and `key = value` lines; values are ints,
floats, booleans or bare strings; `#`/`;` start comments. Unknown
sections or keys are errors so typos cannot silently fall back to
defaults. The fully resolved config (defaults filled in) is what gets
hashed into the checkpoint fingerprint and copied into the work dir.
"""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .backbone import BackboneConfig
from .cohort import CohortConfig
from .errors import ConfigError
from .preprocess import PreprocessConfig

WORKDIR_ENV = "BRAINAGE_WORKDIR"
RESOLVED_NAME = "resolved_config.ini"


@dataclass
class TrainConfig:
    pretrain_steps: int = 200
    pretrain_batch: int = 8
    stage1_epochs: int = 20
    stage2_epochs: int = 30
    batch_size: int = 16
    lr_pretrain: float = 1e-3
    lr_stage1: float = 1e-3
    lr_stage2: float = 5e-4
    seed: int = 42
    route_by: str = "truth"

    def validate(self):
        for name in ("pretrain_steps", "pretrain_batch", "stage1_epochs", "stage2_epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive, got {getattr(self, name)}")
        for name in ("lr_pretrain", "lr_stage1", "lr_stage2"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive, got {getattr(self, name)}")
        if self.route_by not in ("truth", "predicted"):
            raise ConfigError(f"train.route_by must be truth|predicted, got {self.route_by!r}")
        return self


@dataclass
class RunConfig:
    cohort: CohortConfig
    cohort_test: CohortConfig | None
    backbone: BackboneConfig
    preprocess: PreprocessConfig
    train: TrainConfig
    workdir: Path

    def backbone_cfg(self) -> BackboneConfig:
        """Backbone config bound to the cohort's volume size."""
        cfg = BackboneConfig(**{**_as_dict(self.backbone), "volume_dim": self.cohort.volume_dim})
        return cfg.validate()


_SECTIONS = {
    "cohort": CohortConfig,
    "cohort_test": CohortConfig,
    "backbone": BackboneConfig,
    "preprocess": PreprocessConfig,
    "train": TrainConfig,
    "paths": None,
}
_PATHS_KEYS = ("workdir",)

# backbone.volume_dim always follows the cohort section, so it is not a
# config-file key.
_HIDDEN_KEYS = {"backbone": ("volume_dim",)}


def _as_dict(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _section_keys(section: str):
    cls = _SECTIONS[section]
    hidden = _HIDDEN_KEYS.get(section, ())
    return [f for f in fields(cls) if f.name not in hidden]


_TYPE_NAMES = {"int": int, "float": float, "bool": bool, "str": str}


def _field_type(f) -> type:
    # `from __future__ import annotations` makes f.type a string
    name = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        return _TYPE_NAMES[name]
    except KeyError:
        raise AssertionError(f"unsupported config field type {name!r} for {f.name}") from None


def _coerce(section: str, key: str, text: str, target_type):
    text = text.strip()
    try:
        if target_type is int:
            return int(text)
        if target_type is float:
            return float(text)
        if target_type is bool:
            if text.lower() in ("true", "yes", "1", "on"):
                return True
            if text.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        return text
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {text!r} is not a valid {target_type.__name__}") from None


def _parse_section(parser, section: str, defaults: dict | None = None):
    cls = _SECTIONS[section]
    values = dict(defaults) if defaults else {}
    if parser.has_section(section):
        known = {f.name: f for f in _section_keys(section)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]; known keys: {sorted(known)}")
            values[key] = _coerce(section, key, raw, _field_type(known[key]))
    return cls, values


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None

    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]; known sections: {sorted(_SECTIONS)}")

    if not parser.has_section("cohort") or not parser.has_option("cohort", "n_per_stage"):
        raise ConfigError("config must set [cohort] n_per_stage")

    cls, vals = _parse_section(parser, "cohort")
    cohort = cls(**vals).validate()

    cohort_test = None
    if parser.has_section("cohort_test"):
        # inherits geometry/noise from [cohort]; n_per_stage and seed differ
        base = _as_dict(cohort)
        cls, vals = _parse_section(parser, "cohort_test", defaults=base)
        cohort_test = cls(**vals).validate()
        if cohort_test.volume_dim != cohort.volume_dim:
            raise ConfigError("[cohort_test] volume_dim must match [cohort]")

    cls, vals = _parse_section(parser, "backbone")
    backbone = cls(volume_dim=cohort.volume_dim, **vals).validate()

    cls, vals = _parse_section(parser, "preprocess")
    preproc = cls(**vals).validate()

    cls, vals = _parse_section(parser, "train")
    train = cls(**vals).validate()

    workdir = None
    if parser.has_section("paths"):
        for key, raw in parser.items("paths"):
            if key not in _PATHS_KEYS:
                raise ConfigError(f"unknown key {key!r} in [paths]; known keys: {list(_PATHS_KEYS)}")
            if key == "workdir":
                workdir = Path(raw.strip())
    if workdir is None:
        workdir = Path(os.environ.get(WORKDIR_ENV, "."))

    return RunConfig(cohort, cohort_test, backbone, preproc, train, workdir)


def resolved_text(cfg: RunConfig) -> str:
    """Canonical INI dump of the fully resolved config (fingerprint input).

    The workdir is excluded: moving a run directory must not change the
    fingerprint of its artifacts.
    """
    out = []
    sections = [("cohort", cfg.cohort), ("backbone", cfg.backbone),
                ("preprocess", cfg.preprocess), ("train", cfg.train)]
    if cfg.cohort_test is not None:
        sections.insert(1, ("cohort_test", cfg.cohort_test))
    for name, obj in sections:
        out.append(f"[{name}]")
        hidden = _HIDDEN_KEYS.get(name, ())
        for f in fields(obj):
            if f.name not in hidden:
                out.append(f"{f.name} = {getattr(obj, f.name)}")
        out.append("")
    return "\n".join(out)


def fingerprint(cfg: RunConfig) -> int:
    digest = hashlib.sha256(resolved_text(cfg).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def write_resolved(cfg: RunConfig) -> Path:
    cfg.workdir.mkdir(parents=True, exist_ok=True)
    path = cfg.workdir / RESOLVED_NAME
    path.write_text(resolved_text(cfg), encoding="utf-8")
    return path
