"""Two-stage pipeline orchestration.

Stage 1 trains a six-way stage classifier per (sample, modality) with
cross-entropy; Stage 2 reuses and fine-tunes the backbone and Modality
MoE while training the Age Stage MoE under an L1-in-years objective.
Inference classifies each available modality, aggregates the stage
distributions, regresses age conditioned on the aggregated stage, and
fuses per-modality ages by unweighted mean, so any non-empty modality
subset works without retraining.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import moe
from .autodiff import Adam, Tensor
from .cohort import Sample
from .errors import ContractError, DataError, FormatError, TrainingOrderError
from .preprocess import normalize_intensity
from .staging import N_STAGES, STAGE_NAMES, Stage, denormalize_within_stage, normalize_within_stage, stage_by_name
from .volume_io import MODALITIES, Volume

STAGE_TAGS = ("pretrain", "stage1", "stage2")

PREDICTION_COLUMNS = (
    "subject_id", "session_id", "true_age_years", "predicted_stage",
    "fused_age_years", "modalities_used",
    "age_T1w", "age_T2w", "age_FA",
    "stage_T1w", "stage_T2w", "stage_FA",
)


@dataclass
class AgePrediction:
    subject_id: str
    session_id: str
    true_age: float
    per_modality_age: dict[str, float]
    fused_age: float
    predicted_stage: Stage
    per_modality_stage_probs: dict[str, np.ndarray]
    solo_stages: dict[str, Stage]  # per-modality argmax, for Ours-S style evaluation

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if m in self.per_modality_age)


@dataclass
class Model:
    cfg: bb.BackboneConfig
    normalize: str
    params: dict[str, Tensor]
    stage_tag: str = "pretrain"
    modality_bank: moe.ExpertBank = field(init=False)
    stage_bank: moe.ExpertBank = field(init=False)

    def __post_init__(self):
        self.modality_bank = moe.modality_bank(self.cfg.embed_dim)
        self.stage_bank = moe.stage_bank(self.cfg.embed_dim)


def init_model(cfg: bb.BackboneConfig, normalize: str = "zscore", seed: int = 0) -> Model:
    """Build all parameter banks (backbone, decoder, both MoEs, heads)."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(101,)))
    params = init_params(cfg, rng)
    return Model(cfg=cfg, normalize=normalize, params=params)


def init_params(cfg: bb.BackboneConfig, rng) -> dict[str, Tensor]:
    params = bb.init_backbone_params(cfg, rng)
    params.update(bb.init_decoder_params(cfg, rng))
    params.update(moe.modality_bank(cfg.embed_dim).init_params(rng))
    params.update(moe.stage_bank(cfg.embed_dim).init_params(rng))
    params["stage1_head.weight"] = Tensor(rng.normal(0.0, 0.02, size=(cfg.embed_dim, N_STAGES)), requires_grad=True)
    params["stage1_head.bias"] = Tensor(np.zeros(N_STAGES), requires_grad=True)
    return params


def prepare_input(model: Model, volume: Volume) -> np.ndarray:
    """Normalized float64 voxel array ready for the encoder."""
    return normalize_intensity(volume, model.normalize).voxels.astype(np.float64)


# ---------------------------------------------------------------------------
# forward paths

def _stage_logits(model: Model, voxels: np.ndarray, modality: str) -> Tensor:
    latent = bb.encode(voxels, model.params, model.cfg)
    feat = moe.modality_moe_forward(model.modality_bank, model.params, latent, modality)
    return ad.add_bias(ad.matmul(feat, model.params["stage1_head.weight"]), model.params["stage1_head.bias"])


def classify_stage_per_modality(model: Model, volume: Volume, modality: str) -> np.ndarray:
    """Probability distribution over the six stages for one modality input."""
    probs = ad.softmax(_stage_logits(model, prepare_input(model, volume), modality))
    return probs.data.reshape(N_STAGES).copy()


def aggregate_stage(dists: dict[str, np.ndarray]) -> Stage:
    """argmax over the elementwise sum of per-modality stage distributions.

    Ties break toward the lower stage id (np.argmax returns the first max).
    """
    if not dists:
        raise ContractError("no modalities available: cannot aggregate stage distributions")
    total = np.zeros(N_STAGES)
    for m, p in dists.items():
        p = np.asarray(p, dtype=np.float64)
        if p.shape != (N_STAGES,):
            raise ContractError(f"stage distribution for {m} has shape {p.shape}, expected ({N_STAGES},)")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ContractError(f"stage distribution for {m} is not a probability vector")
        total += p
    return stage_by_name(STAGE_NAMES[int(np.argmax(total))])


def _predict_age_tensor(model: Model, voxels: np.ndarray, modality: str, stage: Stage) -> Tensor:
    latent = bb.encode(voxels, model.params, model.cfg)
    feat = moe.modality_moe_forward(model.modality_bank, model.params, latent, modality)
    u = moe.stage_moe_forward(model.stage_bank, model.params, feat, stage)
    return ad.shift(ad.scale(u, stage.width), stage.lower)  # denormalize to years


def predict_age_per_modality(model: Model, volume: Volume, modality: str, stage: Stage) -> float:
    """Stage-conditioned age in years; always inside the stage interval."""
    return _predict_age_tensor(model, prepare_input(model, volume), modality, stage).item()


def fuse_ages(per_modality: dict[str, float]) -> float:
    """Late fusion: unweighted arithmetic mean over available modalities."""
    if not per_modality:
        raise ContractError("no modalities available: cannot fuse ages")
    return float(np.mean(list(per_modality.values())))


def predict_subject(model: Model, sample: Sample) -> AgePrediction:
    """Full inference path: classify -> aggregate -> regress -> fuse."""
    if not sample.volumes:
        raise ContractError(f"subject {sample.subject_id} has no modalities")
    dists, solo = {}, {}
    for m in sample.modalities:
        p = classify_stage_per_modality(model, sample.volumes[m], m)
        dists[m] = p
        solo[m] = stage_by_name(STAGE_NAMES[int(np.argmax(p))])
    predicted = aggregate_stage(dists)
    ages = {m: predict_age_per_modality(model, sample.volumes[m], m, predicted) for m in sample.modalities}
    return AgePrediction(
        subject_id=sample.subject_id,
        session_id=sample.session_id,
        true_age=sample.age,
        per_modality_age=ages,
        fused_age=fuse_ages(ages),
        predicted_stage=predicted,
        per_modality_stage_probs=dists,
        solo_stages=solo,
    )


# ---------------------------------------------------------------------------
# training

def _items(cohort: list[Sample]) -> list[tuple[int, str]]:
    return [(i, m) for i, s in enumerate(cohort) for m in s.modalities]


def _onehot(stage: Stage) -> Tensor:
    v = np.zeros((1, N_STAGES))
    v[0, stage.id] = 1.0
    return Tensor(v)


def _ce_loss(model: Model, voxels: np.ndarray, modality: str, stage: Stage) -> Tensor:
    lsm = ad.log_softmax(_stage_logits(model, voxels, modality))
    return ad.neg(ad.sum_all(ad.mul(lsm, _onehot(stage))))


def _mean_loss_no_grad(loss_fn, items) -> float:
    total = 0.0
    for item in items:
        total += loss_fn(item).item()
    return total / len(items)


def _epoch_rng(seed: int, phase: int):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(phase,)))


def train_stage1(cohort: list[Sample], model: Model, epochs: int, lr: float,
                 seed: int, batch_size: int = 16) -> list[float]:
    """Cross-entropy stage classification over (sample, modality) items.

    Returns the loss curve; entry 0 is the pre-update cohort mean (close
    to ln 6 at random init), followed by one epoch-mean entry per epoch.
    """
    if not cohort:
        raise DataError("cannot train stage 1 on an empty cohort")
    items = _items(cohort)
    inputs = {(i, m): prepare_input(model, cohort[i].volumes[m]) for i, m in items}

    def item_loss(item):
        i, m = item
        return _ce_loss(model, inputs[item], m, cohort[i].stage)

    curve = [_mean_loss_no_grad(item_loss, items)]
    optimizer = Adam(model.params, lr=lr)
    rng = _epoch_rng(seed, 2)
    for _ in range(epochs):
        order = rng.permutation(len(items))
        epoch_total = 0.0
        for start in range(0, len(order), batch_size):
            batch = [items[j] for j in order[start:start + batch_size]]
            with ad.Tape() as tape:
                total = None
                for item in batch:
                    loss = item_loss(item)
                    total = loss if total is None else ad.add(total, loss)
                batch_loss = ad.scale(total, 1.0 / len(batch))
                tape.backward(batch_loss)
            optimizer.step()
            optimizer.zero_grad()
            epoch_total += batch_loss.item() * len(batch)
        curve.append(epoch_total / len(items))
    model.stage_tag = "stage1"
    return curve


def train_stage2(cohort: list[Sample], model: Model, epochs: int, lr: float,
                 seed: int, route_by: str = "truth", batch_size: int = 16) -> list[float]:
    """L1-in-years regression, fine-tuning backbone + Modality MoE jointly
    with the Age Stage MoE.

    route_by="truth" routes each item through its ground-truth stage
    expert (teacher forcing); "predicted" routes through the subject's
    aggregated stage prediction under the current weights.
    """
    if model.stage_tag != "stage1":
        raise TrainingOrderError(f"stage-2 training needs a stage1-tagged model, got {model.stage_tag!r}")
    if route_by not in ("truth", "predicted"):
        raise ContractError(f"route_by must be 'truth' or 'predicted', got {route_by!r}")
    if not cohort:
        raise DataError("cannot train stage 2 on an empty cohort")
    items = _items(cohort)
    inputs = {(i, m): prepare_input(model, cohort[i].volumes[m]) for i, m in items}

    def routed_stage(i: int, cache: dict) -> Stage:
        if route_by == "truth":
            return cohort[i].stage
        if i not in cache:
            dists = {m: ad.softmax(_stage_logits(model, inputs[(i, m)], m)).data.reshape(N_STAGES)
                     for m in cohort[i].modalities}
            cache[i] = aggregate_stage(dists)
        return cache[i]

    def item_loss(item, cache):
        i, m = item
        stage = routed_stage(i, cache)
        pred = _predict_age_tensor(model, inputs[item], m, stage)
        return ad.sum_all(ad.absolute(ad.sub(pred, Tensor(np.full((1, 1), cohort[i].age)))))

    init_cache: dict = {}
    curve = [_mean_loss_no_grad(lambda it: item_loss(it, init_cache), items)]
    optimizer = Adam(model.params, lr=lr)
    rng = _epoch_rng(seed, 3)
    for _ in range(epochs):
        order = rng.permutation(len(items))
        cache: dict = {}
        epoch_total = 0.0
        for start in range(0, len(order), batch_size):
            batch = [items[j] for j in order[start:start + batch_size]]
            with ad.Tape() as tape:
                total = None
                for item in batch:
                    loss = item_loss(item, cache)
                    total = loss if total is None else ad.add(total, loss)
                batch_loss = ad.scale(total, 1.0 / len(batch))
                tape.backward(batch_loss)
            optimizer.step()
            optimizer.zero_grad()
            epoch_total += batch_loss.item() * len(batch)
        curve.append(epoch_total / len(items))
    model.stage_tag = "stage2"
    return curve


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"BAGE"
_CKPT_VERSION = 1


@dataclass
class Checkpoint:
    format_version: int
    config_fingerprint: int
    stage_tag: str
    named_tensors: dict[str, np.ndarray]


def save_checkpoint(model: Model, path, fingerprint: int) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<IQB", _CKPT_VERSION, fingerprint, STAGE_TAGS.index(model.stage_tag)))
        f.write(struct.pack("<I", len(model.params)))
        for name, p in model.params.items():
            encoded = name.encode("utf-8")
            arr = np.ascontiguousarray(p.data, dtype="<f8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    view = memoryview(raw)
    pos = 0

    def take(n: int, what: str):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{path}: truncated checkpoint while reading {what} "
                              f"(needed {n} bytes at offset {pos}, have {len(raw) - pos})")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != _CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic, expected {_CKPT_MAGIC!r}")
    version, fingerprint, tag_code = struct.unpack("<IQB", take(13, "header"))
    if version > _CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if tag_code >= len(STAGE_TAGS):
        raise FormatError(f"{path}: unknown stage tag code {tag_code}")
    (count,) = struct.unpack("<I", take(4, "tensor count"))

    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "dims")) if rank else ()
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(8 * n, f"payload of {name}"), dtype="<f8").reshape(shape).astype(np.float64)
        if name in tensors:
            raise FormatError(f"{path}: duplicate tensor name {name!r}")
        tensors[name] = data
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes after last tensor")
    return Checkpoint(version, fingerprint, STAGE_TAGS[tag_code], tensors)


def model_from_checkpoint(ckpt: Checkpoint, cfg: bb.BackboneConfig, normalize: str) -> Model:
    """Rebuild a Model from checkpoint tensors; name sets must match exactly."""
    model = init_model(cfg, normalize=normalize, seed=0)
    expected = set(model.params)
    got = set(ckpt.named_tensors)
    if expected != got:
        missing = sorted(expected - got)[:3]
        extra = sorted(got - expected)[:3]
        raise ContractError(f"checkpoint does not match config: missing {missing}, unexpected {extra}")
    for name, p in model.params.items():
        arr = ckpt.named_tensors[name]
        if arr.shape != p.data.shape:
            raise ContractError(f"checkpoint tensor {name} has shape {arr.shape}, config expects {p.data.shape}")
        p.data = arr.copy()
    model.stage_tag = ckpt.stage_tag
    return model


# ---------------------------------------------------------------------------
# prediction CSV

def write_predictions(preds: list[AgePrediction], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(PREDICTION_COLUMNS)
        for p in preds:
            row = [
                p.subject_id, p.session_id, f"{p.true_age:.9g}",
                p.predicted_stage.name, repr(p.fused_age),
                "|".join(p.modalities),
            ]
            row += [repr(p.per_modality_age[m]) if m in p.per_modality_age else "" for m in MODALITIES]
            row += [p.solo_stages[m].name if m in p.solo_stages else "" for m in MODALITIES]
            writer.writerow(row)


def read_predictions(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"predictions not found: {path}")
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != list(PREDICTION_COLUMNS):
            raise DataError(f"{path}: bad predictions header {header}")
        rows = []
        for raw in reader:
            row = dict(zip(PREDICTION_COLUMNS, raw))
            rows.append({
                "subject_id": row["subject_id"],
                "session_id": row["session_id"],
                "true_age": float(row["true_age_years"]),
                "predicted_stage": row["predicted_stage"],
                "fused_age": float(row["fused_age_years"]),
                "modalities": tuple(row["modalities_used"].split("|")) if row["modalities_used"] else (),
                "per_modality_age": {m: float(row[f"age_{m}"]) for m in MODALITIES if row[f"age_{m}"]},
                "solo_stages": {m: row[f"stage_{m}"] for m in MODALITIES if row[f"stage_{m}"]},
            })
    if not rows:
        raise DataError(f"{path}: no prediction rows")
    return rows
