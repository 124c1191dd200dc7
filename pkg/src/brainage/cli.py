"""Command-line entry point wiring the pipeline into reproducible runs.

Subcommands mirror the two-stage protocol:

    synth -> pretrain -> train-stage1 -> train-stage2 -> predict -> evaluate

plus a standalone `preprocess`. Every command is deterministic given the
same config and seed. Exit codes: 0 success, 1 config error, 2 data or
manifest error, 3 file-format error, 4 training-contract error.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import cohort as cohort_mod
from . import config as config_mod
from . import figures as figures_mod
from . import metrics as metrics_mod
from . import pipeline as pl
from .backbone import mae_pretrain_step
from .errors import ConfigError, ContractError, DataError, FormatError
from .preprocess import correct_bias, normalize_intensity, resample_isotropic
from .volume_io import read_nifti1, read_vol, write_vol

import numpy as np

_EXIT_CODES = ((ConfigError, 1), (DataError, 2), (FormatError, 3), (ContractError, 4))


def _load_run(args) -> config_mod.RunConfig:
    cfg = config_mod.load_config(args.config)
    config_mod.write_resolved(cfg)
    return cfg


def _paths(cfg: config_mod.RunConfig) -> dict[str, Path]:
    w = cfg.workdir
    return {
        "train_manifest": w / "cohort_train" / cohort_mod.MANIFEST_NAME,
        "test_manifest": w / "cohort_test" / cohort_mod.MANIFEST_NAME,
        "pretrain": w / "checkpoints" / "pretrain.ckpt",
        "stage1": w / "checkpoints" / "stage1.ckpt",
        "stage2": w / "checkpoints" / "stage2.ckpt",
        "predictions": w / "predictions.csv",
    }


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise DataError(f"required artifact {path} not found; run `brainage {producer}` first")
    return path


def _load_train_cohort(cfg, paths):
    return cohort_mod.load_cohort(_require(paths["train_manifest"], "synth"))


def _check_fingerprint(ckpt, cfg, force: bool):
    expected = config_mod.fingerprint(cfg)
    if ckpt.config_fingerprint != expected and not force:
        raise ContractError(
            f"checkpoint fingerprint {ckpt.config_fingerprint:#018x} does not match the resolved "
            f"config ({expected:#018x}); pass --force to load anyway"
        )


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    cfg = _load_run(args)
    paths = _paths(cfg)
    train = cohort_mod.generate_cohort(cfg.cohort, id_prefix="tr")
    manifest = cohort_mod.export_cohort(train, paths["train_manifest"].parent)
    print(f"wrote {len(train)} train samples -> {manifest}")
    if cfg.cohort_test is not None:
        test = cohort_mod.generate_cohort(cfg.cohort_test, id_prefix="te")
        manifest = cohort_mod.export_cohort(test, paths["test_manifest"].parent)
        print(f"wrote {len(test)} test samples -> {manifest}")
    return 0


def cmd_preprocess(args) -> int:
    if args.config:
        cfg = _load_run(args).preprocess
    else:
        from .preprocess import PreprocessConfig
        cfg = PreprocessConfig()
    in_path = Path(args.input)
    if not in_path.exists():
        raise DataError(f"input volume not found: {in_path}")
    vol = read_nifti1(in_path) if in_path.suffix == ".nii" else read_vol(in_path)
    vol = resample_isotropic(vol, cfg.target_spacing_mm)
    vol = correct_bias(vol, cfg.bias_poly_degree)
    vol = normalize_intensity(vol, cfg.normalize)
    write_vol(args.output, vol)
    print(f"preprocessed {in_path} -> {args.output} (dims {vol.dims}, spacing {vol.spacing[0]:g} mm)")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_run(args)
    paths = _paths(cfg)
    cohort = cohort_mod.load_cohort(args.manifest or _require(paths["train_manifest"], "synth"))
    bcfg = cfg.backbone_cfg()
    model = pl.init_model(bcfg, normalize=cfg.preprocess.normalize, seed=cfg.train.seed)

    volumes = [pl.prepare_input(model, s.volumes[m]) for s in cohort for m in s.modalities]
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.train.seed, spawn_key=(11,)))
    optimizer = pl.Adam(model.params, lr=cfg.train.lr_pretrain)
    first = last = None
    for step in range(cfg.train.pretrain_steps):
        batch_idx = rng.choice(len(volumes), size=min(cfg.train.pretrain_batch, len(volumes)), replace=False)
        loss = mae_pretrain_step([volumes[i] for i in batch_idx], model.params, bcfg, rng)
        optimizer.step()
        optimizer.zero_grad()
        first = loss if first is None else first
        last = loss
    out = Path(args.out) if args.out else paths["pretrain"]
    pl.save_checkpoint(model, out, config_mod.fingerprint(cfg))
    print(f"pretrain: {cfg.train.pretrain_steps} steps, loss {first:.4f} -> {last:.4f}; saved {out}")
    return 0


def cmd_train_stage1(args) -> int:
    cfg = _load_run(args)
    paths = _paths(cfg)
    cohort = _load_train_cohort(cfg, paths)
    bcfg = cfg.backbone_cfg()

    init = args.init
    if init is None and paths["pretrain"].exists():
        init = paths["pretrain"]
    if init is not None:
        ckpt = pl.load_checkpoint(init)
        if ckpt.stage_tag != "pretrain":
            raise pl.TrainingOrderError(f"stage-1 init must be a pretrain checkpoint, got {ckpt.stage_tag!r}")
        _check_fingerprint(ckpt, cfg, args.force)
        model = pl.model_from_checkpoint(ckpt, bcfg, cfg.preprocess.normalize)
        print(f"initialized from {init}")
    else:
        model = pl.init_model(bcfg, normalize=cfg.preprocess.normalize, seed=cfg.train.seed)

    curve = pl.train_stage1(cohort, model, cfg.train.stage1_epochs, cfg.train.lr_stage1,
                            cfg.train.seed, cfg.train.batch_size)
    out = Path(args.out) if args.out else paths["stage1"]
    pl.save_checkpoint(model, out, config_mod.fingerprint(cfg))
    print(f"stage1: {cfg.train.stage1_epochs} epochs, CE {curve[0]:.4f} -> {curve[-1]:.4f}; saved {out}")
    return 0


def cmd_train_stage2(args) -> int:
    cfg = _load_run(args)
    paths = _paths(cfg)
    cohort = _load_train_cohort(cfg, paths)
    ckpt = pl.load_checkpoint(args.stage1 or _require(paths["stage1"], "train-stage1"))
    if ckpt.stage_tag != "stage1":
        raise pl.TrainingOrderError(
            f"stage-2 training needs a stage1 checkpoint, got {ckpt.stage_tag!r}; run `brainage train-stage1` first")
    _check_fingerprint(ckpt, cfg, args.force)
    model = pl.model_from_checkpoint(ckpt, cfg.backbone_cfg(), cfg.preprocess.normalize)
    curve = pl.train_stage2(cohort, model, cfg.train.stage2_epochs, cfg.train.lr_stage2,
                            cfg.train.seed, cfg.train.route_by, cfg.train.batch_size)
    out = Path(args.out) if args.out else paths["stage2"]
    pl.save_checkpoint(model, out, config_mod.fingerprint(cfg))
    print(f"stage2: {cfg.train.stage2_epochs} epochs, L1 {curve[0]:.4f} -> {curve[-1]:.4f} years; saved {out}")
    return 0


def _predict_chunk(payload):
    model, samples = payload
    return [pl.predict_subject(model, s) for s in samples]


def cmd_predict(args) -> int:
    cfg = _load_run(args)
    paths = _paths(cfg)
    ckpt = pl.load_checkpoint(args.checkpoint or _require(paths["stage2"], "train-stage2"))
    if ckpt.stage_tag != "stage2":
        raise pl.TrainingOrderError(
            f"predict needs a stage2 checkpoint, got {ckpt.stage_tag!r}; run `brainage train-stage2` first")
    _check_fingerprint(ckpt, cfg, args.force)
    model = pl.model_from_checkpoint(ckpt, cfg.backbone_cfg(), cfg.preprocess.normalize)

    manifest = args.manifest or _require(paths["test_manifest"], "synth")
    samples = cohort_mod.load_cohort(manifest)

    if args.workers > 1:
        chunks = [samples[i::args.workers] for i in range(args.workers)]
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_predict_chunk, [(model, c) for c in chunks]))
        by_id = {p.subject_id: p for chunk in results for p in chunk}
        preds = [by_id[s.subject_id] for s in samples]
    else:
        preds = [pl.predict_subject(model, s) for s in samples]

    out = Path(args.out) if args.out else paths["predictions"]
    pl.write_predictions(preds, out)
    print(f"predicted {len(preds)} subjects -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    rows = pl.read_predictions(args.predictions)
    manifest_rows = cohort_mod.read_manifest(args.manifest)
    expected = {(r["subject_id"], r["session_id"]) for r in manifest_rows}
    got = {(r["subject_id"], r["session_id"]) for r in rows}
    if expected != got:
        raise DataError(f"predictions cover {len(got)} subjects but the manifest lists {len(expected)}")

    age_pairs, stage_items = metrics_mod.report_inputs_from_predictions(rows, args.mode)
    report = metrics_mod.build_report(age_pairs, stage_items, args.mode)

    out_dir = Path(args.out_dir) if args.out_dir else Path(args.predictions).parent / f"eval_{args.mode}"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(metrics_mod.report_to_json(report), encoding="utf-8")
    text = metrics_mod.render_report(report)
    (out_dir / "report.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    if not args.no_figures:
        for p in figures_mod.render_figures(report, age_pairs, out_dir):
            print(f"figure: {p}")
    print(f"report: {out_dir / 'report.json'}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="brainage",
                                     description="two-stage multi-modal lifespan brain-age pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, required=True):
        p.add_argument("--config", required=required, help="run config file (INI grammar)")
        return p

    with_config(sub.add_parser("synth", help="generate the synthetic cohort(s)"))

    p = sub.add_parser("preprocess", help="resample + bias-correct + normalize one volume")
    p.add_argument("--input", required=True, help=".vol or .nii input")
    p.add_argument("--output", required=True, help=".vol output")
    with_config(p, required=False)

    p = with_config(sub.add_parser("pretrain", help="masked-autoencoder pretraining"))
    p.add_argument("--manifest", help="training manifest (default: workdir cohort)")
    p.add_argument("--out", help="checkpoint output path")

    p = with_config(sub.add_parser("train-stage1", help="train the stage classifier"))
    p.add_argument("--init", help="pretrain checkpoint (default: workdir pretrain.ckpt if present)")
    p.add_argument("--out", help="checkpoint output path")
    p.add_argument("--force", action="store_true", help="ignore fingerprint mismatches")

    p = with_config(sub.add_parser("train-stage2", help="train stage-conditioned age regression"))
    p.add_argument("--stage1", help="stage-1 checkpoint (default: workdir stage1.ckpt)")
    p.add_argument("--out", help="checkpoint output path")
    p.add_argument("--force", action="store_true", help="ignore fingerprint mismatches")

    p = with_config(sub.add_parser("predict", help="predict ages for a manifest"))
    p.add_argument("--checkpoint", help="stage-2 checkpoint (default: workdir stage2.ckpt)")
    p.add_argument("--manifest", help="manifest to predict (default: workdir test cohort)")
    p.add_argument("--out", help="predictions CSV path")
    p.add_argument("--workers", type=int, default=1, help="parallel prediction workers")
    p.add_argument("--force", action="store_true", help="ignore fingerprint mismatches")

    p = sub.add_parser("evaluate", help="MAE/STD table, confusion matrix, figures")
    p.add_argument("--predictions", required=True, help="predictions CSV from `brainage predict`")
    p.add_argument("--manifest", required=True, help="manifest with ground truth")
    p.add_argument("--mode", choices=metrics_mod.EVAL_MODES, default="per_subject")
    p.add_argument("--out-dir", help="report output directory")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "pretrain": cmd_pretrain,
    "train-stage1": cmd_train_stage1,
    "train-stage2": cmd_train_stage2,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except tuple(exc for exc, _ in _EXIT_CODES) as e:
        for exc_type, code in _EXIT_CODES:
            if isinstance(e, exc_type):
                print(f"error: {e}", file=sys.stderr)
                return code
        raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
