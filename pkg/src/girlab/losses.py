"""Scalar objectives for the co-trained registration / segmentation / inpainting nets.

All losses return a LossReport whose total recomposes exactly from its named
components; everything is autograd-friendly torch except the histogram MI
diagnostic, which is numpy and never differentiated.

Correlation conventions: denominators are floored at eps, so well-conditioned
inputs match the eps-free textbook formula exactly and zero-variance inputs
yield correlation 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch
import torch.nn.functional as F

from .grids import (
    DisplacementField,
    ImageGrid,
    ProbMask,
    ShapeError,
    jacobian_determinant,
    warp,
)


@dataclass(frozen=True)
class LossWeights:
    lambda_sim: float = 100.0
    w_smooth: float = 1.0
    w_orient: float = 1000.0
    w_mag: float = 0.01
    lncc_window: int = 9
    eps: float = 1e-5

    def __post_init__(self):
        for name in ("lambda_sim", "w_smooth", "w_orient", "w_mag"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if self.lncc_window < 1 or self.lncc_window % 2 == 0:
            raise ValueError(f"lncc_window must be odd and positive, got {self.lncc_window}")
        if not (self.eps > 0 and math.isfinite(self.eps)):
            raise ValueError(f"eps must be a small positive number, got {self.eps}")


@dataclass(frozen=True, eq=False)
class LossReport:
    """A scalar objective plus the named sub-terms it recomposes from."""

    total: torch.Tensor
    components: dict = dc_field(default_factory=dict)

    def as_floats(self) -> dict:
        out = {"total": float(self.total.detach())}
        for k, v in self.components.items():
            out[k] = float(v.detach()) if torch.is_tensor(v) else float(v)
        return out

    def json_line(self, step: int, epoch: int) -> str:
        payload = {"step": step, "epoch": epoch}
        payload.update(self.as_floats())
        return json.dumps(payload, sort_keys=True)


def _match_dims(a, b, what: str):
    if a.dims != b.dims:
        raise ShapeError(f"{what}: dims {a.dims} vs {b.dims}")


def _scalar(x) -> torch.Tensor:
    return x if torch.is_tensor(x) else torch.as_tensor(float(x))


def lncc(a: ImageGrid, b: ImageGrid, window: int = 9, eps: float = 1e-5) -> ImageGrid:
    """Per-voxel squared local correlation over a cubic window.

    Local sums use zero padding; each window is normalized by its in-bounds
    voxel count so border statistics stay unbiased and constant images keep
    zero variance everywhere.
    """
    _match_dims(a, b, "lncc")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and positive, got {window}")
    dtype = torch.promote_types(a.data.dtype, b.data.dtype)
    x = a.data.to(dtype)
    y = b.data.to(dtype)
    ndim = x.dim()
    conv = F.conv2d if ndim == 2 else F.conv3d
    kernel = torch.ones((1, 1) + (window,) * ndim, dtype=dtype)
    pad = window // 2

    def sums(t):
        return conv(t.unsqueeze(0).unsqueeze(0), kernel, padding=pad)[0, 0]

    n = sums(torch.ones_like(x))
    sx = sums(x)
    sy = sums(y)
    sxx = sums(x * x)
    syy = sums(y * y)
    sxy = sums(x * y)
    cross = sxy - sx * sy / n
    var_x = (sxx - sx * sx / n).clamp(min=0.0)
    var_y = (syy - sy * sy / n).clamp(min=0.0)
    cc2 = cross * cross / (var_x * var_y).clamp(min=eps)
    return ImageGrid(cc2, a.spacing)


def lncc_distance(a: ImageGrid, b: ImageGrid, window: int = 9, eps: float = 1e-5) -> torch.Tensor:
    """Dissimilarity map 1 - lncc, as the distance function of the adversarial loss."""
    return 1.0 - lncc(a, b, window, eps).data


def ncc(a: ImageGrid, b: ImageGrid, eps: float = 1e-5) -> torch.Tensor:
    """Global Pearson correlation in [-1, 1]; zero-variance inputs give 0."""
    _match_dims(a, b, "ncc")
    dtype = torch.promote_types(a.data.dtype, b.data.dtype)
    x = a.data.to(dtype).reshape(-1)
    y = b.data.to(dtype).reshape(-1)
    xm = x - x.mean()
    ym = y - y.mean()
    denom = torch.sqrt((xm * xm).sum() * (ym * ym).sum()).clamp(min=eps)
    return (xm * ym).sum() / denom


def mse(a: ImageGrid, b: ImageGrid, mask: ProbMask | None = None) -> torch.Tensor:
    """Mean squared difference, optionally weighted by a soft mask."""
    _match_dims(a, b, "mse")
    d2 = (a.data - b.data) ** 2
    if mask is None:
        return d2.mean()
    _match_dims(a, mask, "mse mask")
    w = mask.data.to(d2.dtype)
    total_w = w.sum()
    if float(total_w) == 0.0:
        return torch.zeros((), dtype=d2.dtype)
    return (w * d2).sum() / total_w


# ---------------------------------------------------------------------------
# field penalties

def _field_penalties(fields: list[DisplacementField]) -> dict:
    """Smoothness / orientation / magnitude penalties averaged over the given fields.

    Smoothness acts on the generating velocity when the field carries one,
    otherwise on the displacement itself.
    """
    smooth = 0.0
    orient = 0.0
    mag = 0.0
    for f in fields:
        gen = f.velocity.data if f.velocity is not None else f.data
        grads = [torch.gradient(gen[i], dim=j)[0] for i in range(gen.shape[0]) for j in range(gen.dim() - 1)]
        smooth = smooth + torch.stack([g.pow(2).mean() for g in grads]).mean()
        jac = jacobian_determinant(f).data
        orient = orient + F.relu(-jac).mean()
        mag = mag + f.data.pow(2).sum(dim=0).mean()
    k = float(len(fields))
    return {"smoothness": smooth / k, "orientation": orient / k, "magnitude": mag / k}


def sym_loss(
    S: ImageGrid,
    T: ImageGrid,
    phi_st: DisplacementField,
    phi_ts: DisplacementField,
    w: LossWeights,
) -> LossReport:
    """Similarity of warp(S, phi_st) against T plus penalties over both fields."""
    _match_dims(S, T, "sym_loss")
    sim = 1.0 - lncc(warp(S, phi_st), T, w.lncc_window, w.eps).data.mean()
    pen = _field_penalties([phi_st, phi_ts])
    total = (
        sim
        + w.w_smooth * pen["smoothness"]
        + w.w_orient * pen["orientation"]
        + w.w_mag * pen["magnitude"]
    )
    return LossReport(total, {"sym_forward": sim, **pen})


def reg_loss(
    S: ImageGrid,
    T: ImageGrid,
    theta_S: ProbMask,
    inpaint_bg_given: ImageGrid,
    phi_st: DisplacementField,
    phi_ts: DisplacementField,
    w: LossWeights,
) -> LossReport:
    """Registration objective over the lesion-free reconstruction of S.

    ``inpaint_bg_given`` is the inpainter's output for the mask-complement
    input S*(1-theta) conditioned on warp(T, phi_ts); it stands in for S in
    both similarity directions. Penalties enter once, not once per direction.
    The caller is responsible for detaching the inpainted image so gradients
    reach only the registration parameters.
    """
    _match_dims(S, T, "reg_loss")
    _match_dims(S, theta_S, "reg_loss mask")
    _match_dims(S, inpaint_bg_given, "reg_loss inpaint")
    fwd = 1.0 - lncc(warp(inpaint_bg_given, phi_st), T, w.lncc_window, w.eps).data.mean()
    bwd = 1.0 - lncc(warp(T, phi_ts), inpaint_bg_given, w.lncc_window, w.eps).data.mean()
    pen = _field_penalties([phi_st, phi_ts])
    total = (
        fwd
        + bwd
        + w.w_smooth * pen["smoothness"]
        + w.w_orient * pen["orientation"]
        + w.w_mag * pen["magnitude"]
    )
    return LossReport(total, {"sym_forward": fwd, "sym_backward": bwd, **pen})


def seg_loss(
    S: ImageGrid,
    theta_S: ProbMask,
    inpaint_fg_from_bg: ImageGrid,
    inpaint_bg_from_fg: ImageGrid,
    window: int = 9,
    eps: float = 1e-5,
) -> LossReport:
    """Adversarial mask objective: masked dissimilarity minus complement dissimilarity.

    total = E[theta*D(S, inpaint_fg_from_bg)]/E[theta]
          - E[(1-theta)*D(S, inpaint_bg_from_fg)]/E[1-theta]

    with D = 1 - lncc and denominators floored at eps. The segmenter ascends
    this value; the inpainter descends it.
    """
    _match_dims(S, theta_S, "seg_loss")
    _match_dims(S, inpaint_fg_from_bg, "seg_loss fg inpaint")
    _match_dims(S, inpaint_bg_from_fg, "seg_loss bg inpaint")
    t = theta_S.data
    d_fg = lncc_distance(S, inpaint_fg_from_bg, window, eps)
    d_bg = lncc_distance(S, inpaint_bg_from_fg, window, eps)
    fg_term = (t * d_fg).mean() / t.mean().clamp(min=eps)
    bg_term = ((1.0 - t) * d_bg).mean() / (1.0 - t).mean().clamp(min=eps)
    return LossReport(fg_term - bg_term, {"seg_fg_term": fg_term, "seg_bg_term": bg_term})


def inp_loss(
    S: ImageGrid,
    T_matched: ImageGrid,
    theta_S: ProbMask,
    inpaint_fg_from_bg: ImageGrid,
    inpaint_bg_from_fg: ImageGrid,
    w: LossWeights,
) -> LossReport:
    """Inpainting objective: keep local correlation with S, match intensities of T_matched.

    total = (1-lncc(S, fg)) + (1-lncc(S, bg)) + lambda_sim*(mse(T_matched, fg) + mse(T_matched, bg))

    The correlation terms are windowed (same window as the registration
    similarity), not global Pearson: a global coefficient is satisfied by
    coarse structure alone, which lets the similarity term pin the output to
    the matched template and removes the subject anchoring the registration
    target depends on.
    """
    _match_dims(S, T_matched, "inp_loss")
    _match_dims(S, theta_S, "inp_loss mask")
    _match_dims(S, inpaint_fg_from_bg, "inp_loss fg inpaint")
    _match_dims(S, inpaint_bg_from_fg, "inp_loss bg inpaint")
    mi_fg = 1.0 - lncc(S, inpaint_fg_from_bg, w.lncc_window, w.eps).data.mean()
    mi_bg = 1.0 - lncc(S, inpaint_bg_from_fg, w.lncc_window, w.eps).data.mean()
    sim_fg = mse(T_matched, inpaint_fg_from_bg)
    sim_bg = mse(T_matched, inpaint_bg_from_fg)
    total = mi_fg + mi_bg + w.lambda_sim * (sim_fg + sim_bg)
    return LossReport(
        total,
        {"mi_fg": mi_fg, "mi_bg": mi_bg, "sim_fg": sim_fg, "sim_bg": sim_bg},
    )


def mutual_information_diagnostic(F_img: ImageGrid, B_img: ImageGrid, bins: int = 32) -> float:
    """Histogram estimate of I/H(F) + I/H(B); 0 when either marginal is degenerate.

    Diagnostic only: numpy, no gradients. Tracks how much the foreground
    still tells you about the background as the mask evolves.
    """
    _match_dims(F_img, B_img, "mutual_information_diagnostic")
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    f = F_img.data.detach().cpu().numpy().ravel()
    b = B_img.data.detach().cpu().numpy().ravel()
    joint, _, _ = np.histogram2d(f, b, bins=bins)
    p = joint / joint.sum()

    def entropy(q):
        q = q[q > 0]
        return float(-(q * np.log(q)).sum())

    h_f = entropy(p.sum(axis=1))
    h_b = entropy(p.sum(axis=0))
    if h_f < 1e-12 or h_b < 1e-12:
        return 0.0
    h_fb = entropy(p.ravel())
    mi = h_f + h_b - h_fb
    return float(mi / h_f + mi / h_b)
