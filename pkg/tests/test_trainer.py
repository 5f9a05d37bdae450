"""Co-training mechanics: config validation, schedule, pretraining probes,
adversarial sign, stop-gradient freezes, NaN rollback, and run/resume
determinism."""

import json
import math
from pathlib import Path

import numpy as np
import pytest
import torch

from girlab.grids import ImageGrid, ProbMask, warp
from girlab.losses import LossWeights, seg_loss
from girlab.networks import build_network, inpnet_forward, restore
from girlab.synthdata import (
    LesionSpec,
    SynthConfig,
    build_dataset,
    insert_lesion,
    load_manifest,
    make_gold_pair,
    make_phantom,
)
from girlab.trainer import (
    CoTrainer,
    RunConfig,
    StepTrace,
    TrainConfig,
    TrainingAbort,
    _random_block_mask,
    deterministic_mode,
    poly_lr,
    pretrain_epoch_losses,
    pretrain_inpainter,
    train,
)
from girlab.losses import mse


pytestmark = pytest.mark.usefixtures("force_deterministic")


@pytest.fixture(scope="session")
def force_deterministic():
    # all trainer tests run in the reproducible mode the artifacts promise
    import os

    os.environ["GIRLAB_DETERMINISTIC"] = "1"
    assert deterministic_mode()


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.lr == 1e-4
        assert cfg.weight_decay == 1e-2
        assert cfg.batch_size == 1
        assert cfg.epochs == 200
        assert cfg.lambda_sim == 100.0

    def test_epochs_zero_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)

    def test_bad_lr_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)
        with pytest.raises(ValueError):
            TrainConfig(lr=-1e-4)

    def test_bad_batch_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)

    def test_unknown_decay_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(decay="cosine")

    def test_bad_mode_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(mode="full")

    def test_steps_per_net_keys(self):
        with pytest.raises(ValueError):
            TrainConfig(steps_per_net={"inp": 1, "seg": 1})
        with pytest.raises(ValueError):
            TrainConfig(steps_per_net={"inp": 0, "seg": 1, "reg": 1})

    def test_lr_overrides_validated(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_overrides={"foo": 1e-4})
        with pytest.raises(ValueError):
            TrainConfig(lr_overrides={"seg": -1.0})
        TrainConfig(lr_overrides={"seg": 0.0})  # zero allowed: freeze knob

    def test_mask_area_ordering(self):
        with pytest.raises(ValueError):
            TrainConfig(pretrain_mask_area=(0.5, 0.2))


class TestPolyLr:
    def test_strictly_decreasing_to_zero(self):
        total = 500
        seq = [poly_lr(k, total, 1e-4) for k in range(total + 1)]
        assert all(b < a for a, b in zip(seq, seq[1:]))
        assert seq[0] == 1e-4
        assert seq[-1] < 1e-6 * 1e-4
        assert seq[-1] == 0.0

    def test_power_applied(self):
        assert abs(poly_lr(50, 100, 1.0, power=0.9) - 0.5 ** 0.9) < 1e-12

    def test_past_end_clamped(self):
        assert poly_lr(1000, 100, 1e-4) == 0.0


@pytest.fixture(scope="session")
def pretrain_images():
    return [make_phantom(s, (64, 64))["image"] for s in range(40)]


@pytest.fixture(scope="session")
def heldout_images():
    return [make_phantom(s, (64, 64))["image"] for s in range(100, 110)]


@pytest.fixture(scope="session")
def pretrained(pretrain_images):
    torch.manual_seed(0)
    cfg = TrainConfig(pretrain_epochs=30, seed=0)
    return pretrain_inpainter(pretrain_images, cfg)


class TestPretrain:
    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            pretrain_inpainter([], TrainConfig())

    def test_epoch_losses_mostly_non_increasing(self, pretrained):
        losses = pretrain_epoch_losses(pretrained)
        assert len(losses) == 30
        pairs = list(zip(losses, losses[1:]))
        ok = sum(1 for a, b in pairs if b <= a)
        assert ok / len(pairs) >= 0.90

    def test_heldout_reconstruction_mse(self, pretrained, heldout_images):
        model = build_network(pretrained.spec, ndim=2, seed=0)
        restore(model, pretrained)
        model.eval()
        rng = np.random.default_rng(77)
        with torch.no_grad():
            for img in heldout_images:
                m = torch.as_tensor(_random_block_mask(rng, (64, 64), 0.2))
                masked = ImageGrid(img.data * (1 - m))
                out = inpnet_forward(model, masked, img)
                assert float(mse(out, img)) < 0.01

    def test_zero_mask_near_copy(self, pretrained, heldout_images):
        model = build_network(pretrained.spec, ndim=2, seed=0)
        restore(model, pretrained)
        model.eval()
        with torch.no_grad():
            for img in heldout_images:
                out = inpnet_forward(model, img, img)
                assert float(mse(out, img)) < 1e-3


@pytest.fixture(scope="session")
def lesion_pair():
    tpl = make_phantom(60, (64, 64))
    gp = make_gold_pair(tpl["image"], 61)
    moving_brain = ProbMask(
        (warp(ProbMask(tpl["brain_mask"].data), gp["forward_field"]).data > 0.5).float())
    les = insert_lesion(gp["moving"], moving_brain,
                        LesionSpec((36, 30), (7, 6), 3, "hyper", 1.0))
    return {"S": les["pathological"], "T": tpl["image"],
            "lesion": les["lesion_mask"]}


def fresh_trainer(pretrained, schedule=50, **cfg_kwargs):
    torch.manual_seed(0)
    cfg = TrainConfig(seed=0, **cfg_kwargs)
    tr = CoTrainer(cfg, LossWeights(), ndim=2, inp_checkpoint=pretrained)
    tr.set_schedule(schedule)
    return tr


def seg_value_64bit(tr, S, T):
    """The adversarial value on a fixed batch, accumulated at 64-bit."""
    with torch.no_grad():
        _, _, warped_T = tr._fields(S, T, grad=False)
        theta = tr._theta(S, grad=False)
        fg, bg = tr._inpaints(S, theta, warped_T, grad=False)
        rep = seg_loss(
            ImageGrid(S.data.to(torch.float64)),
            ProbMask(theta.data.to(torch.float64)),
            ImageGrid(fg.data.to(torch.float64)),
            ImageGrid(bg.data.to(torch.float64)),
            window=tr.weights.lncc_window,
            eps=tr.weights.eps,
        )
    return float(rep.total)


class TestCoTraining:
    def test_healthy_pair_mask_collapses(self, pretrained):
        T = make_phantom(50, (64, 64))["image"]
        tr = fresh_trainer(pretrained, schedule=50)
        for _ in range(50):
            tr.train_step({"S": T, "T": T})
        theta = tr.predict_mask(T)
        assert float(theta.data.mean()) < 0.2

    def test_mi_diagnostic_decreases(self, pretrained, lesion_pair):
        tr = fresh_trainer(pretrained, schedule=50)
        mi = []
        for ep in range(50):
            trace = tr.train_step({"S": lesion_pair["S"], "T": lesion_pair["T"]},
                                  epoch=ep)
            mi.append(trace.mi)
        assert mi[-1] < mi[0]

    def test_seg_lr_zero_freezes_mask_exactly(self, pretrained, lesion_pair):
        tr = fresh_trainer(pretrained, schedule=10, lr_overrides={"seg": 0.0})
        before = {n: p.detach().clone()
                  for n, p in tr.nets["seg"].named_parameters()}
        theta_before = tr.predict_mask(lesion_pair["S"])
        for _ in range(5):
            tr.train_step({"S": lesion_pair["S"], "T": lesion_pair["T"]})
        for name, p in tr.nets["seg"].named_parameters():
            assert torch.equal(before[name], p), name
        theta_after = tr.predict_mask(lesion_pair["S"])
        assert torch.equal(theta_before.data, theta_after.data)

    def test_seg_step_ascends_value(self, pretrained, lesion_pair):
        # freeze the other two nets so the only change is SegNet's update
        tr = fresh_trainer(pretrained, schedule=10,
                           lr_overrides={"inp": 0.0, "reg": 0.0})
        S, T = lesion_pair["S"], lesion_pair["T"]
        v0 = seg_value_64bit(tr, S, T)
        tr.train_step({"S": S, "T": T})
        v1 = seg_value_64bit(tr, S, T)
        assert v1 >= v0

    def test_single_writer_per_optimizer(self, pretrained, lesion_pair):
        tr = fresh_trainer(pretrained, schedule=10,
                           lr_overrides={"inp": 0.0, "seg": 0.0})
        before = {
            kind: {n: p.detach().clone() for n, p in net.named_parameters()}
            for kind, net in tr.nets.items()
        }
        tr.train_step({"S": lesion_pair["S"], "T": lesion_pair["T"]})
        for kind in ("inp", "seg"):
            for name, p in tr.nets[kind].named_parameters():
                assert torch.equal(before[kind][name], p), (kind, name)
        changed = any(not torch.equal(before["reg"][n], p)
                      for n, p in tr.nets["reg"].named_parameters())
        assert changed

    def test_nan_batch_rolls_back_and_aborts(self, pretrained, lesion_pair,
                                             monkeypatch):
        # poison the last phase so the first two have already stepped their
        # optimizers; a real rollback must undo those updates
        import dataclasses

        import girlab.trainer as trainer_mod

        real_reg_loss = trainer_mod.reg_loss
        poison = {"on": True}

        def flaky_reg_loss(*args, **kwargs):
            rep = real_reg_loss(*args, **kwargs)
            if poison["on"]:
                rep = dataclasses.replace(rep, total=rep.total + float("nan"))
            return rep

        monkeypatch.setattr(trainer_mod, "reg_loss", flaky_reg_loss)
        tr = fresh_trainer(pretrained, schedule=20, max_nan_retries=2)
        before = {
            kind: {n: p.detach().clone() for n, p in net.named_parameters()}
            for kind, net in tr.nets.items()
        }
        batch = {"S": lesion_pair["S"], "T": lesion_pair["T"]}
        trace = tr.train_step(batch)
        assert trace.event == "nan_abort"
        assert trace.step == 0
        assert tr.global_step == 1  # aborted steps still advance the counter
        for kind, net in tr.nets.items():
            for name, p in net.named_parameters():
                assert torch.equal(before[kind][name], p), (kind, name)

        poison["on"] = False
        good = tr.train_step(batch)
        assert good.event == ""
        assert good.step == 1

        poison["on"] = True
        first = tr.train_step(batch)
        second = tr.train_step(batch)
        assert first.event == second.event == "nan_abort"
        with pytest.raises(TrainingAbort):
            tr.train_step(batch)

    def test_trace_json_line(self):
        tr = StepTrace(3, 1, {"total": 1.0}, {}, {}, 0.5, 0.0)
        doc = json.loads(tr.json_line())
        assert doc["step"] == 3
        assert doc["epoch"] == 1
        assert doc["reg"]["total"] == 1.0
        assert doc["event"] == ""

    def test_naive_mode_trains_reg_only(self, lesion_pair):
        torch.manual_seed(0)
        cfg = TrainConfig(seed=0, mode="naive")
        tr = CoTrainer(cfg, LossWeights(), ndim=2)
        tr.set_schedule(5)
        assert set(tr.nets) == {"reg"}
        trace = tr.train_step({"S": lesion_pair["S"], "T": lesion_pair["T"]})
        assert trace.reg and not trace.seg and not trace.inp


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("tinyds")
    cfg = SynthConfig(out_dir=str(root), n_train=3, n_val=1, seed=21,
                      n_landmarks=6)
    build_dataset(cfg)
    return root / "manifest.json"


def tiny_run_config(out_dir, epochs=4, **train_kwargs):
    cfg = TrainConfig(epochs=epochs, seed=5, checkpoint_every_epochs=2,
                      pretrain_epochs=8, **train_kwargs)
    return RunConfig(train=cfg, weights=LossWeights(), out_dir=str(out_dir))


class TestTrainRuns:
    def test_two_runs_byte_identical(self, tiny_manifest, tmp_path):
        manifest = load_manifest(tiny_manifest)
        outs = []
        for sub in ("a", "b"):
            run = tiny_run_config(tmp_path / sub, epochs=2)
            train(run, manifest)
            outs.append(tmp_path / sub)
        a_trace = (outs[0] / "trace.jsonl").read_bytes()
        b_trace = (outs[1] / "trace.jsonl").read_bytes()
        assert a_trace == b_trace
        a_ckpts = sorted(p.name for p in (outs[0] / "checkpoints").iterdir())
        b_ckpts = sorted(p.name for p in (outs[1] / "checkpoints").iterdir())
        assert a_ckpts == b_ckpts
        for name in a_ckpts:
            assert (outs[0] / "checkpoints" / name).read_bytes() == \
                (outs[1] / "checkpoints" / name).read_bytes(), name

    def test_resume_reproduces_traces(self, tiny_manifest, tmp_path):
        # re-enter a finished run at its mid-run checkpoint with the same
        # config: the appended epochs must replay the originals byte for byte
        manifest = load_manifest(tiny_manifest)
        out = tmp_path / "run"
        run = tiny_run_config(out, epochs=4)
        train(run, manifest)
        original = (out / "trace.jsonl").read_text().strip().splitlines()
        assert len(original) == 12  # 4 epochs x 3 cases
        final_state = (out / "checkpoints" / "trainer_12.state").read_bytes()

        train(run, manifest, resume=str(out / "checkpoints" / "trainer_6.state"))
        lines = (out / "trace.jsonl").read_text().strip().splitlines()
        assert lines[:12] == original
        assert lines[12:] == original[6:12]
        steps = [json.loads(l)["step"] for l in lines[12:]]
        assert steps == list(range(6, 12))
        refreshed = (out / "checkpoints" / "trainer_12.state").read_bytes()
        assert refreshed == final_state

    def test_val_outputs_written(self, tiny_manifest, tmp_path):
        manifest = load_manifest(tiny_manifest)
        out = tmp_path / "run"
        train(tiny_run_config(out, epochs=2), manifest)
        val_cases = [c for c in manifest.cases if c.role == "val"]
        for case in val_cases:
            assert (out / "val_outputs" / case.id / "field_st.portable").exists()
            assert (out / "val_outputs" / case.id / "mask.portable").exists()

    def test_config_json_round_trip(self, tiny_manifest, tmp_path):
        manifest = load_manifest(tiny_manifest)
        out = tmp_path / "run"
        run = tiny_run_config(out, epochs=2)
        train(run, manifest)
        doc = json.loads((out / "config.json").read_text())
        assert doc["train"]["epochs"] == 2
        assert doc["train"]["seed"] == 5
        assert doc["weights"]["lambda_sim"] == 100.0
