"""Co-training loop: inpainter descends, segmenter ascends, registrator re-aligns.

Each step runs, in order: field prediction, template warping plus intensity
matching, mask prediction, two conditional inpaints, then one optimizer pass
per network (inpainter first, then segmenter, then registrator). Gradient
isolation between the nets is governed by StopGradFlags; with the defaults
every cross-network tensor is handed over as a constant, so each backward
touches exactly one parameter set.

A step whose losses or gradients go non-finite is rolled back from a
state snapshot taken at step start and logged as an abort event; too many
consecutive aborts raise TrainingAbort.

Setting GIRLAB_DETERMINISTIC=1 pins thread counts and zeroes wall times so
two runs with the same seed produce byte-identical traces and checkpoints.
"""

from __future__ import annotations

import json
import math
import os
import pickle
import time
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch

from .grids import ImageGrid, ProbMask, integrate_velocity, warp
from .grids import load_portable, save_portable
from .losses import (
    LossReport,
    LossWeights,
    inp_loss,
    mse,
    mutual_information_diagnostic,
    reg_loss,
    seg_loss,
)
from .networks import (
    ModelCheckpoint,
    build_network,
    checkpoint_name,
    inpnet_forward,
    regnet_forward,
    restore,
    save_checkpoint,
    segnet_forward,
    snapshot,
    spec_for,
)
from .synthdata import DatasetManifest, histogram_match


class TrainingAbort(RuntimeError):
    """Raised when the NaN guard exhausts its retries."""


class _NonFinite(RuntimeError):
    pass


def deterministic_mode() -> bool:
    return os.environ.get("GIRLAB_DETERMINISTIC") == "1"


def poly_lr(step: int, total_steps: int, base_lr: float, power: float = 0.9) -> float:
    """Polynomial decay; reaches exactly 0 at step == total_steps."""
    if total_steps <= 0:
        return base_lr
    frac = min(max(step / total_steps, 0.0), 1.0)
    return base_lr * (1.0 - frac) ** power


@dataclass(frozen=True)
class StopGradFlags:
    mask_const_in_inp_loss: bool = True
    inpaint_const_in_reg_loss: bool = True
    fields_const_in_seg_loss: bool = True
    fields_const_in_inp_loss: bool = True
    inpaint_const_in_seg_loss: bool = True


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    decay: str = "poly"
    decay_power: float = 0.9
    weight_decay: float = 1e-2
    batch_size: int = 1
    epochs: int = 200
    lambda_sim: float = 100.0
    seed: int = 0
    steps_per_net: dict = dc_field(default_factory=lambda: {"inp": 1, "seg": 1, "reg": 1})
    stopgrad: StopGradFlags = dc_field(default_factory=StopGradFlags)
    device_hint: str = "cpu"
    mode: str = "gir"                 # "naive" trains the registrator alone
    use_histogram_matching: bool = True
    hm_bins: int = 256
    integration_steps: int = 7
    checkpoint_every_epochs: int = 0  # 0 keeps only the final checkpoint
    max_nan_retries: int = 10
    pretrain_epochs: int = 60
    pretrain_lr: float = 1e-3
    pretrain_mask_area: tuple = (0.05, 0.40)
    pretrain_checkpoint: str | None = None
    lr_overrides: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.decay != "poly":
            raise ValueError(f"only 'poly' decay is supported, got {self.decay!r}")
        if self.decay_power <= 0:
            raise ValueError("decay_power must be positive")
        if self.mode not in ("gir", "naive"):
            raise ValueError(f"mode must be gir|naive, got {self.mode!r}")
        spn = dict(self.steps_per_net)
        if set(spn) != {"inp", "seg", "reg"} or any(int(v) < 1 for v in spn.values()):
            raise ValueError(f"steps_per_net needs positive counts for inp/seg/reg, got {spn}")
        object.__setattr__(self, "steps_per_net", {k: int(v) for k, v in spn.items()})
        bad = set(self.lr_overrides) - {"inp", "seg", "reg"}
        if bad:
            raise ValueError(f"lr_overrides for unknown nets: {sorted(bad)}")
        for k, v in self.lr_overrides.items():
            if v < 0 or not math.isfinite(v):
                raise ValueError(f"lr override for {k} must be finite and >= 0")
        if self.integration_steps < 1:
            raise ValueError("integration_steps must be >= 1")
        lo, hi = self.pretrain_mask_area
        if not (0 <= lo <= hi <= 1):
            raise ValueError(f"pretrain_mask_area must be an increasing pair in [0,1], got {self.pretrain_mask_area}")


@dataclass(frozen=True)
class NetworkSettings:
    base_width: int = 16
    depth: int = 4

    def __post_init__(self):
        if self.base_width < 1 or self.depth < 2:
            raise ValueError("base_width must be >= 1 and depth >= 2")


@dataclass(frozen=True)
class EvalSettings:
    pp: bool = True
    threshold: float = 0.5
    beta: float = 130.0
    fg_th: float = 0.8
    bg_th: float = 0.2
    near_threshold: float | None = None


@dataclass(frozen=True)
class DataSettings:
    manifest: str | None = None


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    weights: LossWeights = dc_field(default_factory=LossWeights)
    networks: NetworkSettings = dc_field(default_factory=NetworkSettings)
    data: DataSettings = dc_field(default_factory=DataSettings)
    eval: EvalSettings = dc_field(default_factory=EvalSettings)
    out_dir: str = "runs/run"

    def __post_init__(self):
        if self.train.lambda_sim != self.weights.lambda_sim:
            raise ValueError(
                f"lambda_sim disagrees between the train section ({self.train.lambda_sim}) "
                f"and the weights section ({self.weights.lambda_sim})"
            )


@dataclass(frozen=True)
class StepTrace:
    step: int
    epoch: int
    reg: dict
    seg: dict
    inp: dict
    mi: float
    wall_time: float
    event: str = ""

    def json_line(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "epoch": self.epoch,
                "reg": self.reg,
                "seg": self.seg,
                "inp": self.inp,
                "mi": self.mi,
                "wall_time": self.wall_time,
                "event": self.event,
            },
            sort_keys=True,
        )


# ---------------------------------------------------------------------------
# inpainter pretraining

def _random_block_mask(rng: np.random.Generator, dims, area: float) -> np.ndarray:
    """Axis-aligned rectangle or ellipse covering roughly `area` of the grid."""
    ndim = len(dims)
    aspect = rng.uniform(0.7, 1.4, size=ndim)
    aspect = aspect / aspect.prod() ** (1.0 / ndim)
    use_ellipse = rng.random() < 0.5
    vol = float(np.prod(dims)) * area
    if use_ellipse:
        unit = math.pi / 4.0 if ndim == 2 else math.pi / 6.0
        semi = (vol / unit) ** (1.0 / ndim) * aspect / 2.0
    else:
        semi = vol ** (1.0 / ndim) * aspect / 2.0
    semi = np.minimum(semi, (np.asarray(dims) - 2) / 2.0)
    center = np.array([rng.uniform(s, d - s) for s, d in zip(semi, dims)])
    coords = np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij")
    if use_ellipse:
        rho2 = sum(((c - mu) / max(s, 0.5)) ** 2 for c, mu, s in zip(coords, center, semi))
        return (rho2 <= 1.0).astype(np.float32)
    inside = np.ones(dims, dtype=bool)
    for c, mu, s in zip(coords, center, semi):
        inside &= np.abs(c - mu) <= s
    return inside.astype(np.float32)


def pretrain_inpainter(images: list, cfg: TrainConfig,
                       settings: NetworkSettings | None = None) -> ModelCheckpoint:
    """Teach the inpainter to rebuild masked healthy images from the clean copy.

    Every sample pairs (image with a random 5-40% block zeroed, the intact
    image) against an MSE target of the intact image, so the net mostly
    learns to copy through and to fill holes from context.
    """
    if not images:
        raise ValueError("pretraining needs a non-empty dataset of healthy images")
    settings = settings or NetworkSettings()
    ndim = images[0].ndim
    net = build_network(spec_for("inp", ndim, settings.base_width, settings.depth), ndim, cfg.seed + 2)
    opt = torch.optim.AdamW(net.parameters(), lr=cfg.pretrain_lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 9999)
    total_steps = cfg.pretrain_epochs * len(images)
    step = 0
    epoch_means = []
    for _ in range(cfg.pretrain_epochs):
        order = rng.permutation(len(images))
        losses = []
        for idx in order:
            img = images[int(idx)]
            area = rng.uniform(*cfg.pretrain_mask_area)
            mask = torch.as_tensor(_random_block_mask(rng, img.dims, area))
            masked = ImageGrid(img.data * (1.0 - mask), img.spacing)
            out = inpnet_forward(net, masked, img)
            loss = mse(out, img)
            for g in opt.param_groups:
                g["lr"] = poly_lr(step, total_steps, cfg.pretrain_lr, cfg.decay_power)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            step += 1
        epoch_means.append(sum(losses) / len(losses))
    ckpt = snapshot(net, step)
    return ModelCheckpoint(ckpt.spec, ckpt.parameters, ckpt.step,
                           rng_state=pickle.dumps(epoch_means, protocol=4))


def pretrain_epoch_losses(ckpt: ModelCheckpoint) -> list:
    """Epoch-mean losses recorded by pretrain_inpainter (stored in rng_state)."""
    if ckpt.rng_state is None:
        return []
    return pickle.loads(ckpt.rng_state)


# ---------------------------------------------------------------------------
# the co-trainer

def _grads_finite(net) -> bool:
    for p in net.parameters():
        if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
            return False
    return True


class CoTrainer:
    """Owns the three nets and their optimizers; one train_step per batch."""

    def __init__(self, cfg: TrainConfig, weights: LossWeights, ndim: int,
                 settings: NetworkSettings | None = None,
                 inp_checkpoint: ModelCheckpoint | None = None):
        self.cfg = cfg
        self.weights = weights
        self.ndim = ndim
        settings = settings or NetworkSettings()
        kinds = ("reg",) if cfg.mode == "naive" else ("reg", "seg", "inp")
        self.nets = {}
        for offset, kind in enumerate(("reg", "seg", "inp")):
            if kind in kinds:
                spec = spec_for(kind, ndim, settings.base_width, settings.depth)
                self.nets[kind] = build_network(spec, ndim, cfg.seed + offset)
        if inp_checkpoint is not None and "inp" in self.nets:
            restore(self.nets["inp"], inp_checkpoint)
        self.opts = {
            kind: torch.optim.AdamW(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
            for kind, net in self.nets.items()
        }
        self.global_step = 0
        self.total_steps: int | None = None
        self.consecutive_aborts = 0

    # -- schedule ----------------------------------------------------------

    def set_schedule(self, total_steps: int) -> None:
        self.total_steps = int(total_steps)

    def current_lr(self, kind: str) -> float:
        base = self.cfg.lr_overrides.get(kind, self.cfg.lr)
        if self.total_steps is None:
            return base
        return poly_lr(self.global_step, self.total_steps, base, self.cfg.decay_power)

    def _apply_lr(self, kind: str) -> None:
        lr = self.current_lr(kind)
        for g in self.opts[kind].param_groups:
            g["lr"] = lr

    # -- forward contexts ---------------------------------------------------

    def _fields(self, S: ImageGrid, T: ImageGrid, grad: bool):
        ctx = torch.enable_grad() if grad else torch.no_grad()
        with ctx:
            v_st = regnet_forward(self.nets["reg"], S, T)
            v_ts = regnet_forward(self.nets["reg"], T, S)
            phi_st = integrate_velocity(v_st, self.cfg.integration_steps)
            phi_ts = integrate_velocity(v_ts, self.cfg.integration_steps)
            warped_T = warp(T, phi_ts)
        return phi_st, phi_ts, warped_T

    def _matched_template(self, warped_T: ImageGrid, S: ImageGrid) -> ImageGrid:
        # numpy CDF lookup: always a constant target, never differentiated
        frozen = ImageGrid(warped_T.data.detach(), warped_T.spacing)
        if not self.cfg.use_histogram_matching:
            return frozen
        return histogram_match(frozen, S, self.cfg.hm_bins)

    def _theta(self, S: ImageGrid, grad: bool, B: ProbMask | None = None) -> ProbMask:
        # B restricts the lesion hypothesis to the brain: flat background
        # windows score as maximally dissimilar under the local-correlation
        # convention, so an unrestricted mask drifts onto the background
        # instead of the lesion.
        ctx = torch.enable_grad() if grad else torch.no_grad()
        with ctx:
            theta = segnet_forward(self.nets["seg"], S)
            if B is not None:
                theta = ProbMask(theta.data * B.data, theta.spacing)
            return theta

    def _inpaints(self, S: ImageGrid, theta: ProbMask, warped_T: ImageGrid, grad: bool):
        # The multiplicative masks are binary (straight-through estimator for
        # the rare gradient-carrying caller). A soft mask leaks the covered
        # region at reduced contrast, and windowed correlation is affine
        # invariant per window, so the inpainter learns to read the leak and
        # reproduce exactly what the mask is supposed to hide.
        ctx = torch.enable_grad() if grad else torch.no_grad()
        with ctx:
            hard = (theta.data.detach() > 0.5).to(theta.data.dtype)
            hard = hard + theta.data - theta.data.detach()
            bg_kept = ImageGrid(S.data * (1.0 - hard), S.spacing)
            fg_kept = ImageGrid(S.data * hard, S.spacing)
            fg_from_bg = inpnet_forward(self.nets["inp"], bg_kept, warped_T)
            bg_from_fg = inpnet_forward(self.nets["inp"], fg_kept, warped_T)
        return fg_from_bg, bg_from_fg

    # -- optimizer plumbing --------------------------------------------------

    def _zero_all(self) -> None:
        for opt in self.opts.values():
            opt.zero_grad(set_to_none=True)

    def _step_net(self, kind: str, loss: torch.Tensor) -> None:
        if not bool(torch.isfinite(loss)):
            raise _NonFinite(f"{kind} objective went non-finite")
        self._zero_all()
        loss.backward()
        if not _grads_finite(self.nets[kind]):
            raise _NonFinite(f"{kind} gradients went non-finite")
        self._apply_lr(kind)
        self.opts[kind].step()

    def _snapshot_states(self):
        def clone_obj(obj):
            if torch.is_tensor(obj):
                return obj.detach().clone()
            if isinstance(obj, dict):
                return {k: clone_obj(v) for k, v in obj.items()}
            if isinstance(obj, list):
                return [clone_obj(v) for v in obj]
            return obj

        return {
            "nets": {k: {n: v.detach().clone() for n, v in net.state_dict().items()}
                     for k, net in self.nets.items()},
            "opts": {k: clone_obj(opt.state_dict()) for k, opt in self.opts.items()},
        }

    def _restore_states(self, snap) -> None:
        for k, net in self.nets.items():
            net.load_state_dict(snap["nets"][k])
        for k, opt in self.opts.items():
            opt.load_state_dict(snap["opts"][k])

    # -- phases --------------------------------------------------------------

    def _detached_image(self, img: ImageGrid) -> ImageGrid:
        return ImageGrid(img.data.detach(), img.spacing)

    def _phase_inp(self, batch) -> dict:
        flags = self.cfg.stopgrad
        last = {}
        for _ in range(self.cfg.steps_per_net["inp"]):
            total = 0.0
            for item in batch:
                S, T = item["S"], item["T"]
                phi_st, phi_ts, warped_T = self._fields(S, T, grad=not flags.fields_const_in_inp_loss)
                t_matched = self._matched_template(warped_T, S)
                theta = self._theta(S, grad=not flags.mask_const_in_inp_loss, B=item.get("B"))
                fg_from_bg, bg_from_fg = self._inpaints(S, theta, warped_T, grad=True)
                rep_inp = inp_loss(S, t_matched, theta, fg_from_bg, bg_from_fg, self.weights)
                rep_seg = seg_loss(S, theta, fg_from_bg, bg_from_fg,
                                   self.weights.lncc_window, self.weights.eps)
                # the inpainter sits on the minimizing side of the adversarial value
                total = total + (rep_inp.total + rep_seg.total) / len(batch)
                last = rep_inp.as_floats()
                last["seg_value"] = float(rep_seg.total.detach())
            self._step_net("inp", total)
        return last

    def _phase_seg(self, batch) -> dict:
        flags = self.cfg.stopgrad
        last = {}
        for _ in range(self.cfg.steps_per_net["seg"]):
            total = 0.0
            for item in batch:
                S, T = item["S"], item["T"]
                phi_st, phi_ts, warped_T = self._fields(S, T, grad=not flags.fields_const_in_seg_loss)
                theta = self._theta(S, grad=True, B=item.get("B"))
                grad_inp = not flags.inpaint_const_in_seg_loss
                theta_for_inp = theta if grad_inp else ProbMask(theta.data.detach(), theta.spacing)
                fg_from_bg, bg_from_fg = self._inpaints(S, theta_for_inp, warped_T, grad=grad_inp)
                rep = seg_loss(S, theta, fg_from_bg, bg_from_fg,
                               self.weights.lncc_window, self.weights.eps)
                # ascent: the optimizer minimizes the negated value
                total = total - rep.total / len(batch)
                last = rep.as_floats()
            self._step_net("seg", total)
        return last

    def _phase_reg(self, batch) -> dict:
        flags = self.cfg.stopgrad
        last = {}
        for _ in range(self.cfg.steps_per_net["reg"]):
            total = 0.0
            for item in batch:
                S, T = item["S"], item["T"]
                phi_st, phi_ts, warped_T = self._fields(S, T, grad=True)
                if self.cfg.mode == "naive":
                    zeros = ProbMask(torch.zeros_like(S.data), S.spacing)
                    rep = reg_loss(S, T, zeros, S, phi_st, phi_ts, self.weights)
                else:
                    theta = self._theta(S, grad=False, B=item.get("B"))
                    grad_inp = not flags.inpaint_const_in_reg_loss
                    cond = warped_T if grad_inp else ImageGrid(warped_T.data.detach(), warped_T.spacing)
                    fg_from_bg, _ = self._inpaints(S, theta, cond, grad=grad_inp)
                    rep = reg_loss(S, T, theta, fg_from_bg, phi_st, phi_ts, self.weights)
                total = total + rep.total / len(batch)
                last = rep.as_floats()
            self._step_net("reg", total)
        return last

    # -- the step ------------------------------------------------------------

    def train_step(self, batch, epoch: int = 0) -> StepTrace:
        if isinstance(batch, dict):
            batch = [batch]
        if not batch:
            raise ValueError("empty batch")
        t0 = time.perf_counter()
        snap = self._snapshot_states()
        step_index = self.global_step
        try:
            if self.cfg.mode == "naive":
                reg_rep = self._phase_reg(batch)
                seg_rep, inp_rep, mi = {}, {}, 0.0
            else:
                inp_rep = self._phase_inp(batch)
                seg_rep = self._phase_seg(batch)
                reg_rep = self._phase_reg(batch)
                S = batch[-1]["S"]
                theta = self._theta(S, grad=False)
                mi = mutual_information_diagnostic(
                    ImageGrid(S.data * theta.data, S.spacing),
                    ImageGrid(S.data * (1.0 - theta.data), S.spacing),
                )
        except _NonFinite as e:
            self._restore_states(snap)
            self.consecutive_aborts += 1
            self.global_step += 1
            if self.consecutive_aborts > self.cfg.max_nan_retries:
                raise TrainingAbort(
                    f"aborted {self.consecutive_aborts} consecutive steps; last cause: {e}"
                ) from e
            wall = 0.0 if deterministic_mode() else time.perf_counter() - t0
            return StepTrace(step_index, epoch, {}, {}, {}, 0.0, wall, event="nan_abort")
        self.consecutive_aborts = 0
        self.global_step += 1
        wall = 0.0 if deterministic_mode() else time.perf_counter() - t0
        return StepTrace(step_index, epoch, reg_rep, seg_rep, inp_rep, mi, wall)

    # -- inference helpers ----------------------------------------------------

    def predict_field(self, S: ImageGrid, T: ImageGrid):
        with torch.no_grad():
            v = regnet_forward(self.nets["reg"], S, T)
            return integrate_velocity(v, self.cfg.integration_steps)

    def predict_mask(self, S: ImageGrid, B: ProbMask | None = None) -> ProbMask:
        return self._theta(S, grad=False, B=B)


def train_step(batch, state: CoTrainer, epoch: int = 0) -> StepTrace:
    """Functional alias over CoTrainer.train_step."""
    return state.train_step(batch, epoch)


# ---------------------------------------------------------------------------
# trainer state (for resume)

def _to_numpy_tree(obj):
    if torch.is_tensor(obj):
        return obj.detach().cpu().numpy()
    if isinstance(obj, dict):
        return {k: _to_numpy_tree(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_numpy_tree(v) for v in obj]
    return obj


def _to_tensor_tree(obj):
    if isinstance(obj, np.ndarray):
        return torch.as_tensor(obj.copy())
    if isinstance(obj, dict):
        return {k: _to_tensor_tree(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_to_tensor_tree(v) for v in obj]
    return obj


def save_trainer_state(trainer: CoTrainer, epoch: int, path) -> None:
    state = {
        "format": "girlab-trainer-1",
        "epoch": int(epoch),
        "global_step": int(trainer.global_step),
        "consecutive_aborts": int(trainer.consecutive_aborts),
        "mode": trainer.cfg.mode,
        "nets": {k: _to_numpy_tree(net.state_dict()) for k, net in trainer.nets.items()},
        "opts": {k: _to_numpy_tree(opt.state_dict()) for k, opt in trainer.opts.items()},
        "torch_rng": torch.get_rng_state().numpy().tobytes(),
    }
    Path(path).write_bytes(pickle.dumps(state, protocol=4))


def load_trainer_state(path) -> dict:
    state = pickle.loads(Path(path).read_bytes())
    if not isinstance(state, dict) or state.get("format") != "girlab-trainer-1":
        raise ValueError(f"{path}: not a trainer state file")
    return state


def restore_trainer(trainer: CoTrainer, state: dict) -> int:
    """Load a saved state into the trainer; returns the next epoch to run."""
    if state["mode"] != trainer.cfg.mode:
        raise ValueError(f"cannot resume a {state['mode']!r} run with mode {trainer.cfg.mode!r}")
    if set(state["nets"]) != set(trainer.nets):
        raise ValueError("trainer state does not match the configured networks")
    for k, net in trainer.nets.items():
        net.load_state_dict(_to_tensor_tree(state["nets"][k]))
    for k, opt in trainer.opts.items():
        opt.load_state_dict(_to_tensor_tree(state["opts"][k]))
    trainer.global_step = state["global_step"]
    trainer.consecutive_aborts = state["consecutive_aborts"]
    torch.set_rng_state(torch.from_numpy(np.frombuffer(state["torch_rng"], dtype=np.uint8).copy()))
    return state["epoch"] + 1


# ---------------------------------------------------------------------------
# the full run

def _load_run_data(manifest: DatasetManifest):
    template = load_portable(manifest.path(manifest.template_image))
    train_cases, val_cases = [], []
    for case in manifest.cases:
        entry = {
            "id": case.id,
            "S": load_portable(manifest.path(case.image)),
            "B": load_portable(manifest.path(case.brain_mask)),
            "healthy": load_portable(manifest.path(case.healthy_image)),
        }
        (train_cases if case.role == "train" else val_cases).append(entry)
    return template, train_cases, val_cases


def train(run: RunConfig, manifest: DatasetManifest, resume: str | None = None,
          echo: bool = False) -> Path:
    """Execute the configured run; returns the run directory."""
    if deterministic_mode():
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    cfg = run.train
    torch.manual_seed(cfg.seed)
    out = Path(run.out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(asdict(run), indent=1, sort_keys=True) + "\n")

    template, train_cases, val_cases = _load_run_data(manifest)
    if not train_cases:
        raise ValueError("manifest has no training cases")
    ndim = len(manifest.dims)

    inp_ckpt = None
    if cfg.mode == "gir" and resume is None:
        if cfg.pretrain_checkpoint:
            from .networks import load_checkpoint
            inp_ckpt = load_checkpoint(cfg.pretrain_checkpoint)
        else:
            healthy = [c["healthy"] for c in train_cases] + [template]
            inp_ckpt = pretrain_inpainter(healthy, cfg, run.networks)
            save_checkpoint(inp_ckpt, ckpt_dir / "inp_pretrained.ckpt")

    trainer = CoTrainer(cfg, run.weights, ndim, run.networks, inp_checkpoint=inp_ckpt)
    steps_per_epoch = math.ceil(len(train_cases) / cfg.batch_size)
    trainer.set_schedule(cfg.epochs * steps_per_epoch)

    start_epoch = 0
    if resume is not None:
        start_epoch = restore_trainer(trainer, load_trainer_state(resume))

    def checkpoint_now(epoch: int) -> None:
        step = trainer.global_step
        for kind, net in trainer.nets.items():
            save_checkpoint(snapshot(net, step), ckpt_dir / checkpoint_name(kind, step))
        save_trainer_state(trainer, epoch, ckpt_dir / f"trainer_{step}.state")

    mode = "a" if resume is not None else "w"
    with open(out / "trace.jsonl", mode) as trace_fh:
        for epoch in range(start_epoch, cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_cases))
            for lo in range(0, len(order), cfg.batch_size):
                chunk = order[lo:lo + cfg.batch_size]
                batch = [{"S": train_cases[int(i)]["S"], "T": template,
                          "B": train_cases[int(i)]["B"]} for i in chunk]
                trace = trainer.train_step(batch, epoch)
                line = trace.json_line()
                trace_fh.write(line + "\n")
                if echo:
                    print(line)
            last = epoch == cfg.epochs - 1
            every = cfg.checkpoint_every_epochs
            if last or (every > 0 and (epoch + 1) % every == 0):
                checkpoint_now(epoch)

    for case in val_cases:
        case_dir = out / "val_outputs" / case["id"]
        case_dir.mkdir(parents=True, exist_ok=True)
        field = trainer.predict_field(case["S"], template)
        save_portable(field, case_dir / "field_st.portable")
        if cfg.mode == "gir":
            mask = trainer.predict_mask(case["S"], case["B"])
            save_portable(mask, case_dir / "mask.portable")
    return out
