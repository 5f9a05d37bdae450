"""The three trainable nets: registration, soft segmentation, conditional inpainting.

All share the same skeleton: a U-Net with a 4-conv encoder (each conv followed
by 1/2 max-pooling) and a 7-conv decoder (4 upsample+conv stages back to full
resolution, then 3 plain 3x3 convs, the last being the head). There is no
normalization layer anywhere. The inpainter runs two encoders, one per input,
and fuses their feature pyramids by concatenation into a single decoder.

Upsampling is nearest-neighbour interpolation followed by a conv.

Checkpoints are pickled dicts of numpy arrays; unlike torch.save archives the
byte stream is reproducible across processes, which the deterministic-run
contract needs.
"""

from __future__ import annotations

import pickle
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .grids import GridError, ImageGrid, ProbMask, ShapeError, VelocityField

KINDS = ("reg", "seg", "inp")


@dataclass(frozen=True)
class NetworkSpec:
    kind: str
    in_channels: int
    out_channels: int
    base_width: int = 16
    depth: int = 4
    normalization: str = "none"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.base_width < 1:
            raise ValueError("base_width must be positive")
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.normalization != "none":
            raise ValueError("normalization is fixed to 'none'")

    def widths(self) -> list[int]:
        return [min(self.base_width * (2 ** i), 128) for i in range(self.depth)]


def spec_for(kind: str, ndim: int, base_width: int = 16, depth: int = 4) -> NetworkSpec:
    """Standard channel wiring: reg sees (S,T) stacked, seg/inp see single channels."""
    if kind == "reg":
        return NetworkSpec("reg", 2, ndim, base_width, depth)
    if kind == "seg":
        return NetworkSpec("seg", 1, 1, base_width, depth)
    if kind == "inp":
        return NetworkSpec("inp", 1, 1, base_width, depth)
    raise ValueError(f"unknown kind {kind!r}")


def _conv(ndim: int):
    return nn.Conv2d if ndim == 2 else nn.Conv3d


def _pool(ndim: int):
    return F.max_pool2d if ndim == 2 else F.max_pool3d


def _make_encoder(ndim: int, in_ch: int, widths: list[int]) -> nn.ModuleList:
    Conv = _conv(ndim)
    convs = []
    prev = in_ch
    for w in widths:
        convs.append(Conv(prev, w, 3, padding=1))
        prev = w
    return nn.ModuleList(convs)


def _decoder_plan(widths: list[int], bottom_ch: int, skip_scale: int) -> list[tuple[int, int]]:
    """(in_ch, out_ch) per upsample+conv stage, top to bottom order reversed."""
    plan = []
    prev = bottom_ch
    for i in reversed(range(len(widths))):
        out = widths[max(i - 1, 0)]
        plan.append((prev + skip_scale * widths[i], out))
        prev = out
    return plan


class _UNet(nn.Module):
    """Single- or dual-encoder U-Net; see the module docstring for the layer budget."""

    def __init__(self, spec: NetworkSpec, ndim: int, dual: bool):
        super().__init__()
        self.spec = spec
        self.ndim = ndim
        self.dual = dual
        widths = spec.widths()
        Conv = _conv(ndim)
        self.encoder = _make_encoder(ndim, spec.in_channels, widths)
        self.encoder_b = _make_encoder(ndim, spec.in_channels, widths) if dual else None
        mult = 2 if dual else 1
        plan = _decoder_plan(widths, mult * widths[-1], mult)
        self.decoder_up = nn.ModuleList(Conv(i, o, 3, padding=1) for i, o in plan)
        top = plan[-1][1]
        self.decoder_refine = nn.ModuleList(
            [Conv(top, top, 3, padding=1), Conv(top, top, 3, padding=1)]
        )
        self.head = Conv(top, spec.out_channels, 3, padding=1)
        slope = 0.0 if spec.kind == "seg" else 0.2
        self.act_slope = slope

    def _act(self, x):
        return F.leaky_relu(x, self.act_slope) if self.act_slope > 0 else F.relu(x)

    def _encode(self, encoder, x):
        pool = _pool(self.ndim)
        skips = []
        cur = x
        for conv in encoder:
            f = self._act(conv(cur))
            skips.append(f)
            cur = pool(f, 2)
        return cur, skips

    def forward(self, x, y=None):
        for d in x.shape[2:]:
            if d % (2 ** self.spec.depth) != 0:
                raise ShapeError(
                    f"spatial dims must be divisible by {2 ** self.spec.depth}, got {tuple(x.shape[2:])}"
                )
        cur, skips = self._encode(self.encoder, x)
        if self.dual:
            if y is None:
                raise ShapeError("dual-encoder network needs two inputs")
            cur_b, skips_b = self._encode(self.encoder_b, y)
            cur = torch.cat([cur, cur_b], dim=1)
            skips = [torch.cat([a, b], dim=1) for a, b in zip(skips, skips_b)]
        for conv, skip in zip(self.decoder_up, reversed(skips)):
            cur = F.interpolate(cur, scale_factor=2, mode="nearest")
            cur = self._act(conv(torch.cat([cur, skip], dim=1)))
        for conv in self.decoder_refine:
            cur = self._act(conv(cur))
        out = self.head(cur)
        if self.spec.kind == "seg":
            return torch.sigmoid(out)
        if self.spec.kind == "reg":
            return out * 0.1
        return out


def build_network(spec: NetworkSpec, ndim: int, seed: int) -> nn.Module:
    """Construct and initialize a net deterministically from (spec, seed)."""
    if ndim not in (2, 3):
        raise GridError(f"ndim must be 2 or 3, got {ndim}")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = _UNet(spec, ndim, dual=(spec.kind == "inp"))
        nonlin = "relu" if spec.kind == "seg" else "leaky_relu"
        slope = 0.0 if spec.kind == "seg" else 0.2
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.Conv3d)):
                nn.init.kaiming_uniform_(m.weight, a=slope, mode="fan_in", nonlinearity=nonlin)
                nn.init.zeros_(m.bias)
        if spec.kind == "reg":
            # near-identity initial deformation
            with torch.no_grad():
                net.head.weight.mul_(1e-3)
    return net


def has_normalization_layers(model: nn.Module) -> bool:
    norm_types = (
        nn.modules.batchnorm._BatchNorm,
        nn.GroupNorm,
        nn.LayerNorm,
        nn.modules.instancenorm._InstanceNorm,
        nn.LocalResponseNorm,
    )
    return any(isinstance(m, norm_types) for m in model.modules())


def _model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def regnet_forward(model: nn.Module, S: ImageGrid, T: ImageGrid) -> VelocityField:
    """Velocity for mapping S toward T; swap the arguments for the reverse field."""
    if model.spec.kind != "reg":
        raise ValueError("regnet_forward needs a 'reg' network")
    if S.dims != T.dims:
        raise ShapeError(f"image dims differ: {S.dims} vs {T.dims}")
    x = torch.stack([S.data, T.data]).unsqueeze(0).to(_model_dtype(model))
    out = model(x)[0]
    return VelocityField(out, S.spacing)


def segnet_forward(model: nn.Module, S: ImageGrid) -> ProbMask:
    if model.spec.kind != "seg":
        raise ValueError("segnet_forward needs a 'seg' network")
    x = S.data.unsqueeze(0).unsqueeze(0).to(_model_dtype(model))
    out = model(x)[0, 0]
    return ProbMask(out, S.spacing)


def inpnet_forward(model: nn.Module, masked_S: ImageGrid, warped_T: ImageGrid) -> ImageGrid:
    if model.spec.kind != "inp":
        raise ValueError("inpnet_forward needs an 'inp' network")
    if masked_S.dims != warped_T.dims:
        raise ShapeError(f"input dims differ: {masked_S.dims} vs {warped_T.dims}")
    dtype = _model_dtype(model)
    x = masked_S.data.unsqueeze(0).unsqueeze(0).to(dtype)
    y = warped_T.data.unsqueeze(0).unsqueeze(0).to(dtype)
    out = model(x, y)[0, 0]
    return ImageGrid(out, masked_S.spacing)


# ---------------------------------------------------------------------------
# checkpoints

@dataclass(frozen=True)
class ModelCheckpoint:
    spec: NetworkSpec
    parameters: dict
    step: int
    rng_state: bytes | None = None


def snapshot(model: nn.Module, step: int, rng_state: bytes | None = None) -> ModelCheckpoint:
    params = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
    return ModelCheckpoint(model.spec, params, step, rng_state)


def restore(model: nn.Module, ckpt: ModelCheckpoint) -> None:
    if model.spec != ckpt.spec:
        raise ValueError(f"checkpoint spec {ckpt.spec} does not match model spec {model.spec}")
    state = {k: torch.as_tensor(v) for k, v in ckpt.parameters.items()}
    model.load_state_dict(state)


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    payload = {
        "format": "girlab-ckpt-1",
        "spec": asdict(ckpt.spec),
        "step": int(ckpt.step),
        "rng_state": ckpt.rng_state,
        "parameters": {k: np.ascontiguousarray(v) for k, v in ckpt.parameters.items()},
    }
    Path(path).write_bytes(pickle.dumps(payload, protocol=4))


def load_checkpoint(path) -> ModelCheckpoint:
    payload = pickle.loads(Path(path).read_bytes())
    if not isinstance(payload, dict) or payload.get("format") != "girlab-ckpt-1":
        raise ValueError(f"{path}: not a recognized checkpoint file")
    spec = NetworkSpec(**payload["spec"])
    return ModelCheckpoint(spec, payload["parameters"], payload["step"], payload["rng_state"])


def checkpoint_name(kind: str, step: int) -> str:
    return f"{kind}_{step}.ckpt"
