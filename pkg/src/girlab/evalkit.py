"""Evaluation: region-partitioned deformation error, landmark error, Dice,
random-walker refinement, and report emission for boxplot rendering.

Regions are defined by Euclidean distance to the lesion support: the lesion
itself, a near band within a threshold (15 voxels in 2D, 30 in 3D), and the
remaining brain. Voxels outside the brain are excluded from every metric.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import distance_transform_edt
from scipy.sparse import coo_matrix, diags
from scipy.sparse.linalg import spsolve

from .grids import (
    DisplacementField,
    GridError,
    ImageGrid,
    LandmarkSet,
    ProbMask,
    ShapeError,
    warp_points,
)

log = logging.getLogger("girlab.evalkit")

OUTSIDE_BRAIN = 0
IN_TUMOR = 1
NEAR_TUMOR = 2
FAR_TUMOR = 3


@dataclass(frozen=True, eq=False)
class RegionPartition:
    labels: np.ndarray
    threshold: float

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if not np.isin(labels, [OUTSIDE_BRAIN, IN_TUMOR, NEAR_TUMOR, FAR_TUMOR]).all():
            raise ValueError("labels must be one of the four region codes")
        object.__setattr__(self, "labels", labels)

    def region(self, code: int) -> np.ndarray:
        return self.labels == code


def default_near_threshold(ndim: int) -> float:
    return 30.0 if ndim == 3 else 15.0


def partition_regions(lesion_mask: ProbMask, brain_mask: ProbMask,
                      threshold: float | None = None) -> RegionPartition:
    """Label every voxel as lesion / near / far / outside-brain."""
    if lesion_mask.dims != brain_mask.dims:
        raise ShapeError(f"mask dims differ: {lesion_mask.dims} vs {brain_mask.dims}")
    lesion = lesion_mask.data.detach().cpu().numpy() > 0.5
    brain = brain_mask.data.detach().cpu().numpy() > 0.5
    if not brain.any():
        raise ValueError("brain mask is empty")
    if threshold is None:
        threshold = default_near_threshold(lesion_mask.ndim)
    labels = np.full(lesion.shape, OUTSIDE_BRAIN, dtype=np.int8)
    if lesion.any():
        dist = distance_transform_edt(~lesion)
    else:
        dist = np.full(lesion.shape, np.inf)
    labels[brain & lesion] = IN_TUMOR
    labels[brain & ~lesion & (dist <= threshold)] = NEAR_TUMOR
    labels[brain & ~lesion & (dist > threshold)] = FAR_TUMOR
    return RegionPartition(labels, float(threshold))


_REGION_KEYS = {"in": IN_TUMOR, "near": NEAR_TUMOR, "far": FAR_TUMOR}


def mde(predicted: DisplacementField, gold: DisplacementField,
        partition: RegionPartition, spacing=None) -> dict:
    """Mean displacement-vector error in mm per region; empty regions are absent."""
    if predicted.dims != gold.dims or predicted.ndim != gold.ndim:
        raise ShapeError(f"field dims differ: {predicted.dims} vs {gold.dims}")
    if partition.labels.shape != predicted.dims:
        raise ShapeError("partition does not match the field grid")
    if spacing is None:
        spacing = predicted.spacing
    sp = np.asarray(spacing, dtype=np.float64).reshape(-1, *([1] * len(predicted.dims)))
    diff = (predicted.data.detach().cpu().numpy() - gold.data.detach().cpu().numpy()) * sp
    err = np.sqrt((diff ** 2).sum(axis=0))
    out = {}
    for key, code in _REGION_KEYS.items():
        region = partition.region(code)
        if region.any():
            out[key] = float(err[region].mean())
    return out


def _landmark_labels(points: np.ndarray, partition: RegionPartition) -> np.ndarray:
    shape = partition.labels.shape
    idx = []
    for ax in range(points.shape[1]):
        idx.append(np.clip(np.round(points[:, ax]).astype(int), 0, shape[ax] - 1))
    return partition.labels[tuple(idx)]


def tre(pred_field: DisplacementField, landmarks_fixed: LandmarkSet,
        landmarks_moving: LandmarkSet, partition: RegionPartition, spacing=None) -> dict:
    """Landmark registration error in mm, averaged per fixed-space region.

    Landmarks inside the lesion are reported under "tumor", never folded into
    near/far; landmarks outside the brain are dropped.
    """
    if landmarks_fixed.ids != landmarks_moving.ids:
        raise ValueError("landmark sets are not paired (ids differ)")
    if spacing is None:
        spacing = pred_field.spacing
    sp = np.asarray(spacing, dtype=np.float64)
    mapped = warp_points(landmarks_fixed, pred_field)
    delta = (mapped.points - landmarks_moving.points) * sp
    dist = np.sqrt((delta ** 2).sum(axis=1))
    labels = _landmark_labels(landmarks_fixed.points, partition)
    out = {}
    for key, code in (("near", NEAR_TUMOR), ("far", FAR_TUMOR), ("tumor", IN_TUMOR)):
        sel = labels == code
        if sel.any():
            out[key] = float(dist[sel].mean())
    return out


def dice(pred: ProbMask, truth: ProbMask, threshold: float = 0.5) -> float:
    """Overlap of the binarized masks; two empty masks count as perfect."""
    if pred.dims != truth.dims:
        raise ShapeError(f"mask dims differ: {pred.dims} vs {truth.dims}")
    a = pred.data.detach().cpu().numpy() > threshold
    b = truth.data.detach().cpu().numpy() > threshold
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * (a & b).sum() / total)


# ---------------------------------------------------------------------------
# random-walker refinement

def _nearest_seed_fill(fg: np.ndarray, bg: np.ndarray) -> np.ndarray:
    d_fg = distance_transform_edt(~fg)
    d_bg = distance_transform_edt(~bg)
    return (d_fg <= d_bg).astype(np.float64)


def random_walker_refine(image: ImageGrid, prob: ProbMask, beta: float = 130.0,
                         fg_th: float = 0.8, bg_th: float = 0.2) -> ProbMask:
    """Harmonic relabeling of unseeded voxels on an intensity-weighted lattice.

    Voxels with prob > fg_th / < bg_th act as Dirichlet boundary values 1/0;
    the rest solve the graph Laplacian system with edge weights
    exp(-beta * (dI)^2) over normalized intensities. Without both seed kinds
    the input is simply thresholded and a warning is raised.
    """
    if image.dims != prob.dims:
        raise ShapeError(f"image dims {image.dims} do not match prob dims {prob.dims}")
    img = image.data.detach().cpu().numpy().astype(np.float64)
    p = prob.data.detach().cpu().numpy().astype(np.float64)
    lo, hi = img.min(), img.max()
    img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)

    fg = p > fg_th
    bg = p < bg_th
    if not fg.any() or not bg.any():
        warnings.warn("random_walker_refine: need both seed kinds; returning thresholded input")
        return ProbMask((p > 0.5).astype(np.float32), prob.spacing)
    unseeded = ~(fg | bg)
    if not unseeded.any():
        return ProbMask(fg.astype(np.float32), prob.spacing)

    shape = img.shape
    n = img.size
    flat_index = np.arange(n).reshape(shape)
    rows_w, cols_w, vals_w = [], [], []
    for ax in range(img.ndim):
        sl_a = [slice(None)] * img.ndim
        sl_b = [slice(None)] * img.ndim
        sl_a[ax] = slice(0, -1)
        sl_b[ax] = slice(1, None)
        a = flat_index[tuple(sl_a)].ravel()
        b = flat_index[tuple(sl_b)].ravel()
        di = img.ravel()[a] - img.ravel()[b]
        w = np.exp(-beta * di * di) + 1e-10
        rows_w.append(a)
        cols_w.append(b)
        vals_w.append(w)
    rows = np.concatenate(rows_w)
    cols = np.concatenate(cols_w)
    vals = np.concatenate(vals_w)
    W = coo_matrix((np.concatenate([vals, vals]),
                    (np.concatenate([rows, cols]), np.concatenate([cols, rows]))),
                   shape=(n, n)).tocsr()
    degree = np.asarray(W.sum(axis=1)).ravel()

    useed = unseeded.ravel()
    seed_vals = fg.ravel().astype(np.float64)
    u_idx = np.where(useed)[0]
    s_idx = np.where(~useed)[0]
    L = (diags(degree) - W).tocsr()
    L_uu = L[u_idx][:, u_idx]
    L_us = L[u_idx][:, s_idx]
    rhs = -L_us @ seed_vals[s_idx]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            x = spsolve(L_uu.tocsc(), rhs)
        if not np.isfinite(x).all():
            raise FloatingPointError("non-finite harmonic solution")
    except Exception as e:  # singular or ill-conditioned system
        log.warning("random walker linear solve failed (%s); using nearest-seed labels", e)
        filled = _nearest_seed_fill(fg, bg)
        out = seed_vals.reshape(shape).copy()
        out[unseeded] = filled[unseeded]
        return ProbMask(out.astype(np.float32), prob.spacing)

    out = seed_vals.copy()
    out[u_idx] = np.clip(x, 0.0, 1.0)
    return ProbMask(out.reshape(shape).astype(np.float32), prob.spacing)


# ---------------------------------------------------------------------------
# reporting

@dataclass(frozen=True)
class CaseMetrics:
    case_id: str
    values: dict

    def __post_init__(self):
        for k, v in self.values.items():
            fv = float(v)
            if not np.isfinite(fv) or fv < 0:
                raise ValueError(f"{self.case_id}: metric {k} must be finite and >= 0, got {v}")
            if k.startswith("dice") and not (0.0 <= fv <= 1.0):
                raise ValueError(f"{self.case_id}: {k} must be in [0,1], got {v}")


@dataclass(frozen=True)
class MetricReport:
    per_case: tuple
    summary: dict = dc_field(default_factory=dict)

    def median(self, metric: str) -> float | None:
        entry = self.summary.get(metric)
        return None if entry is None else entry["median"]

    def metric_values(self, metric: str) -> list:
        return [c.values[metric] for c in self.per_case if metric in c.values]


def _box_stats(vals: list) -> dict:
    arr = np.asarray(sorted(vals), dtype=np.float64)
    q1, med, q3 = (float(v) for v in np.percentile(arr, [25, 50, 75]))
    iqr = q3 - q1
    in_lo = arr[arr >= q1 - 1.5 * iqr]
    in_hi = arr[arr <= q3 + 1.5 * iqr]
    whisk_lo = float(in_lo[0]) if in_lo.size else q1
    whisk_hi = float(in_hi[-1]) if in_hi.size else q3
    outliers = [float(v) for v in arr if v < whisk_lo or v > whisk_hi]
    return {"median": med, "q1": q1, "q3": q3,
            "whisker_lo": whisk_lo, "whisker_hi": whisk_hi,
            "outliers": outliers, "n": int(arr.size)}


def build_report(cases: list) -> MetricReport:
    if not cases:
        raise ValueError("no cases to report")
    metrics = sorted({k for c in cases for k in c.values})
    summary = {m: _box_stats([c.values[m] for c in cases if m in c.values]) for m in metrics}
    return MetricReport(tuple(cases), summary)


def emit_report(cases: list, out_dir) -> MetricReport:
    """Write metrics.csv (one row per case per metric) and boxplot.json."""
    report = build_report(cases)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "metric", "value"])
        for c in report.per_case:
            for metric in sorted(c.values):
                writer.writerow([c.case_id, metric, f"{float(c.values[metric]):.17g}"])
    (out / "boxplot.json").write_text(json.dumps(report.summary, indent=1, sort_keys=True) + "\n")
    return report


def load_metrics_csv(path) -> list:
    """Inverse of emit_report's CSV: rebuild the per-case metric table."""
    per_case: dict = {}
    order: list = []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["case_id", "metric", "value"]:
        raise ValueError(f"{path}: expected a metrics.csv with header case_id,metric,value")
    for row in rows[1:]:
        if len(row) != 3:
            raise ValueError(f"{path}: malformed row {row}")
        cid, metric, value = row
        if cid not in per_case:
            per_case[cid] = {}
            order.append(cid)
        per_case[cid][metric] = float(value)
    return [CaseMetrics(cid, per_case[cid]) for cid in order]
