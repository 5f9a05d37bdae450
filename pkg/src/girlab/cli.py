"""Batch entry points: synth | pretrain | train | eval | plot.

Exit codes are a stable contract: 0 success, 2 usage or config error,
3 IO or data error, 4 numeric failure during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .evalkit import (
    CaseMetrics,
    dice,
    emit_report,
    load_metrics_csv,
    mde,
    partition_regions,
    random_walker_refine,
    tre,
)
from .grids import DataError, load_landmarks, load_portable
from .grids import DisplacementField, GridError, ImageGrid, ProbMask, warp
from .losses import LossWeights
from .networks import build_network, load_checkpoint, restore, save_checkpoint
from .synthdata import DatasetManifest, SynthConfig, build_dataset, load_manifest
from .trainer import (
    DataSettings,
    EvalSettings,
    NetworkSettings,
    RunConfig,
    StopGradFlags,
    TrainConfig,
    TrainingAbort,
    pretrain_epoch_losses,
    pretrain_inpainter,
    train,
)


class ConfigError(ValueError):
    """Configuration that fails schema validation."""


# ---------------------------------------------------------------------------
# run config files

def _build_section(cls, payload: dict, section: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {section!r} section: {sorted(unknown)}")
    try:
        return cls(**payload)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {section!r} section: {e}") from e


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    known = {"train", "weights", "networks", "data", "eval", "out_dir"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")

    train_doc = dict(doc.get("train", {}))
    if "stopgrad" in train_doc:
        train_doc["stopgrad"] = _build_section(StopGradFlags, dict(train_doc["stopgrad"]), "train.stopgrad")
    if "steps_per_net" in train_doc:
        train_doc["steps_per_net"] = dict(train_doc["steps_per_net"])
    if "pretrain_mask_area" in train_doc:
        train_doc["pretrain_mask_area"] = tuple(train_doc["pretrain_mask_area"])
    train_cfg = _build_section(TrainConfig, train_doc, "train")

    weights_doc = dict(doc.get("weights", {}))
    weights_doc.setdefault("lambda_sim", train_cfg.lambda_sim)
    weights = _build_section(LossWeights, weights_doc, "weights")

    networks = _build_section(NetworkSettings, dict(doc.get("networks", {})), "networks")
    data = _build_section(DataSettings, dict(doc.get("data", {})), "data")
    eval_cfg = _build_section(EvalSettings, dict(doc.get("eval", {})), "eval")

    base = path.parent

    def resolve(p):
        return str((base / p).resolve()) if p and not Path(p).is_absolute() else p

    data = dataclasses.replace(data, manifest=resolve(data.manifest))
    if train_cfg.pretrain_checkpoint:
        train_cfg = dataclasses.replace(
            train_cfg, pretrain_checkpoint=resolve(train_cfg.pretrain_checkpoint))
    out_dir = resolve(doc.get("out_dir", "runs/run"))
    try:
        return RunConfig(train=train_cfg, weights=weights, networks=networks,
                         data=data, eval=eval_cfg, out_dir=out_dir)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _manifest_from(run: RunConfig, override: str | None = None) -> DatasetManifest:
    manifest_path = override or run.data.manifest
    if not manifest_path:
        raise ConfigError("no dataset manifest configured (data.manifest) or passed via --manifest")
    return load_manifest(manifest_path)


# ---------------------------------------------------------------------------
# synth

def _parse_ints(text: str, flag: str) -> tuple:
    try:
        return tuple(int(p) for p in text.split(","))
    except ValueError as e:
        raise ConfigError(f"{flag} expects comma-separated integers, got {text!r}") from e


def _parse_floats(text: str, flag: str) -> tuple:
    try:
        return tuple(float(p) for p in text.split(","))
    except ValueError as e:
        raise ConfigError(f"{flag} expects comma-separated numbers, got {text!r}") from e


def cmd_synth(args) -> int:
    if args.cases < 1:
        raise ConfigError(f"--cases must be >= 1, got {args.cases}")
    dims = _parse_ints(args.dims, "--dims")
    n_val = round(0.2 * args.cases) if args.cases >= 2 else 0
    n_train = args.cases - n_val
    try:
        cfg = SynthConfig(
            out_dir=args.out,
            dims=dims,
            n_train=n_train,
            n_val=n_val,
            seed=args.seed,
            n_landmarks=args.landmarks,
            lesion_profiles=tuple(args.lesion_profiles.split(",")),
            lesion_softness=args.lesion_softness,
            template_gamma=args.template_gamma,
            export_nifti=args.export_nifti,
            spacing=_parse_floats(args.spacing, "--spacing") if args.spacing else None,
        )
    except (ValueError, GridError) as e:
        raise ConfigError(str(e)) from e
    manifest = build_dataset(cfg)
    print(Path(manifest.root) / "manifest.json")
    return 0


# ---------------------------------------------------------------------------
# pretrain / train

def _healthy_training_images(manifest: DatasetManifest):
    images = [load_portable(manifest.path(c.healthy_image)) for c in manifest.by_role("train")]
    images.append(load_portable(manifest.path(manifest.template_image)))
    return images


def cmd_pretrain(args) -> int:
    run = load_run_config(args.config)
    manifest = _manifest_from(run, args.manifest)
    images = _healthy_training_images(manifest)
    ckpt = pretrain_inpainter(images, run.train, run.networks)
    out = Path(args.out) if args.out else Path(run.out_dir) / "checkpoints" / "inp_pretrained.ckpt"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out)
    losses = pretrain_epoch_losses(ckpt)
    if losses:
        print(f"pretrained {ckpt.step} steps, epoch MSE {losses[0]:.5f} -> {losses[-1]:.5f}")
    print(out)
    return 0


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    manifest = _manifest_from(run, args.manifest)
    out = train(run, manifest, resume=args.resume, echo=not args.quiet)
    print(out)
    return 0


# ---------------------------------------------------------------------------
# eval

def _final_checkpoint(run_dir: Path, kind: str):
    candidates = []
    for p in (run_dir / "checkpoints").glob(f"{kind}_*.ckpt"):
        stem = p.stem.split("_")[-1]
        if stem.isdigit():
            candidates.append((int(stem), p))
    if not candidates:
        return None
    return max(candidates)[1]


class _RunPredictor:
    """Serves per-case predictions: saved val_outputs first, checkpoints second."""

    def __init__(self, run_dir: Path, ndim: int):
        self.run_dir = Path(run_dir)
        self.ndim = ndim
        if not self.run_dir.is_dir():
            raise DataError(f"run directory not found: {self.run_dir}")
        self.eval_defaults = {}
        config_path = self.run_dir / "config.json"
        if config_path.exists():
            doc = json.loads(config_path.read_text())
            self.integration_steps = doc.get("train", {}).get("integration_steps", 7)
            self.eval_defaults = doc.get("eval", {})
        else:
            self.integration_steps = 7
        self._nets = {}

    def _saved(self, case_id: str, name: str):
        p = self.run_dir / "val_outputs" / case_id / name
        return load_portable(p) if Path(str(p) + ".json").exists() else None

    def _net(self, kind: str):
        if kind not in self._nets:
            ckpt_path = _final_checkpoint(self.run_dir, kind)
            if ckpt_path is None:
                raise DataError(f"{self.run_dir}: no saved {kind} outputs and no {kind} checkpoint")
            ckpt = load_checkpoint(ckpt_path)
            net = build_network(ckpt.spec, self.ndim, seed=0)
            restore(net, ckpt)
            self._nets[kind] = net
        return self._nets[kind]

    def field(self, case_id: str, S: ImageGrid, T: ImageGrid) -> DisplacementField:
        saved = self._saved(case_id, "field_st.portable")
        if saved is not None:
            return saved
        from .grids import integrate_velocity
        from .networks import regnet_forward
        import torch
        with torch.no_grad():
            v = regnet_forward(self._net("reg"), S, T)
            return integrate_velocity(v, self.integration_steps)

    def mask(self, case_id: str, S: ImageGrid, B: ProbMask | None = None) -> ProbMask | None:
        saved = self._saved(case_id, "mask.portable")
        if saved is not None:
            return saved
        if _final_checkpoint(self.run_dir, "seg") is None:
            return None
        from .networks import segnet_forward
        import torch
        with torch.no_grad():
            theta = segnet_forward(self._net("seg"), S)
        if B is not None:
            theta = ProbMask(theta.data * B.data, theta.spacing)
        return theta


def _eval_cases(manifest: DatasetManifest):
    cases = manifest.by_role("test")
    return cases if cases else manifest.by_role("val")


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    ndim = len(manifest.dims)
    predictor = _RunPredictor(Path(args.run), ndim)
    naive = None
    naive_dir = Path(args.naive_run) if args.naive_run else Path(args.run) / "naive"
    if naive_dir.is_dir():
        naive = _RunPredictor(naive_dir, ndim)

    def knob(flag_value, key: str, default: float):
        if flag_value is not None:
            return flag_value
        return predictor.eval_defaults.get(key, default)

    threshold = knob(args.threshold, "threshold", 0.5)
    near_threshold = knob(args.near_threshold, "near_threshold", None)
    beta = knob(args.beta, "beta", 130.0)
    fg_th = knob(args.fg_th, "fg_th", 0.8)
    bg_th = knob(args.bg_th, "bg_th", 0.2)

    template = load_portable(manifest.path(manifest.template_image))
    template_brain = load_portable(manifest.path(manifest.template_brain_mask))
    cases = _eval_cases(manifest)
    if not cases:
        raise DataError(f"{args.manifest}: no test or val cases to evaluate")

    results = []
    for case in cases:
        S = load_portable(manifest.path(case.image))
        lesion_moving = load_portable(manifest.path(case.lesion_mask))
        gold = load_portable(manifest.path(case.gold_field))
        lm_fixed = load_landmarks(manifest.path(case.landmarks_fixed))
        lm_moving = load_landmarks(manifest.path(case.landmarks_moving))

        # fixed-space lesion: the moving-space mask pulled through the gold map
        lesion_fixed = warp(lesion_moving, gold)
        part = partition_regions(lesion_fixed, template_brain,
                                 threshold=near_threshold)

        values = {}
        field = predictor.field(case.id, S, template)
        for region, value in mde(field, gold, part, manifest.spacing).items():
            values[f"mde_{region}"] = value
        for region, value in tre(field, lm_fixed, lm_moving, part, manifest.spacing).items():
            values[f"tre_{region}"] = value

        brain = load_portable(manifest.path(case.brain_mask))
        mask = predictor.mask(case.id, S, brain)
        if mask is not None:
            values["dice_th"] = dice(mask, lesion_moving, threshold)
            if args.pp:
                refined = random_walker_refine(S, mask, beta=beta,
                                               fg_th=fg_th, bg_th=bg_th)
                values["dice_pp"] = dice(refined, lesion_moving, threshold)

        if naive is not None:
            nfield = naive.field(case.id, S, template)
            for region, value in mde(nfield, gold, part, manifest.spacing).items():
                values[f"mde_naive_{region}"] = value
            for region, value in tre(nfield, lm_fixed, lm_moving, part, manifest.spacing).items():
                values[f"tre_naive_{region}"] = value

        results.append(CaseMetrics(case.id, values))

    out_dir = Path(args.out) if args.out else Path(args.run) / "eval"
    emit_report(results, out_dir)
    print(out_dir / "metrics.csv")
    print(out_dir / "boxplot.json")
    return 0


# ---------------------------------------------------------------------------
# plot

def _metric_group(name: str) -> str:
    return name.split("_")[0]


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metrics_path = Path(args.metrics)
    try:
        load_metrics_csv(metrics_path)
    except ValueError as e:
        raise DataError(str(e)) from e
    box_path = metrics_path.parent / "boxplot.json"
    if not box_path.exists():
        raise DataError(f"boxplot data not found next to metrics: {box_path}")
    box = json.loads(box_path.read_text())

    groups = {}
    for metric in sorted(box):
        groups.setdefault(_metric_group(metric), []).append(metric)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for group, metrics in sorted(groups.items()):
        stats = []
        for m in metrics:
            b = box[m]
            stats.append({
                "label": m,
                "q1": b["q1"], "med": b["median"], "q3": b["q3"],
                "whislo": b["whisker_lo"], "whishi": b["whisker_hi"],
                "fliers": b["outliers"],
            })
        fig, ax = plt.subplots(figsize=(1.8 + 1.2 * len(stats), 4.0))
        ax.bxp(stats, showfliers=True)
        ax.set_title(group)
        ax.set_ylabel("value")
        ax.tick_params(axis="x", rotation=30)
        fig.tight_layout()
        target = out_dir / f"{group}.png"
        fig.savefig(target, dpi=120)
        plt.close(fig)
        written.append(target)
    for t in written:
        print(t)
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="girlab",
                                     description="lesion-aware registration toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--cases", type=int, default=50, help="total cases; 20%% become validation")
    p.add_argument("--dims", default="64,64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--landmarks", type=int, default=12)
    p.add_argument("--lesion-profiles", default="hyper")
    p.add_argument("--lesion-softness", type=float, default=1.0)
    p.add_argument("--template-gamma", type=float, default=1.0)
    p.add_argument("--spacing", default=None)
    p.add_argument("--export-nifti", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="pretrain the inpainter on healthy images")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="run co-training from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--resume", default=None, help="trainer state file to continue from")
    p.add_argument("--quiet", action="store_true", help="do not stream trace lines to stdout")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compute MDE/TRE/Dice for a finished run")
    p.add_argument("--run", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--pp", action="store_true", help="add random-walker refined Dice")
    p.add_argument("--naive-run", default=None,
                   help="baseline run directory (default: RUN/naive when present)")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--near-threshold", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--fg-th", type=float, default=None)
    p.add_argument("--bg-th", type=float, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render boxplots from an eval report")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"girlab: config error: {e}", file=sys.stderr)
        return 2
    except (DataError, OSError, json.JSONDecodeError) as e:
        print(f"girlab: data error: {e}", file=sys.stderr)
        return 3
    except (GridError, ValueError) as e:
        print(f"girlab: invalid input: {e}", file=sys.stderr)
        return 2
    except TrainingAbort as e:
        print(f"girlab: training aborted: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
