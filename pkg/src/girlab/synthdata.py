"""Synthetic benchmark generation: healthy phantoms, lesion insertion, gold fields.

A dataset is built around one fixed template phantom. Each case warps the
template by a known random diffeomorphism (the inverse is stored as the gold
field for deformation-error evaluation), then pastes a procedurally textured
lesion into the warped copy. Landmark pairs are sampled in template space and
pushed through the gold field, so registration error against them is exact.

All intensities live in [0, 1] with background exactly 0; histogram support
is therefore the nonzero voxels.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import distance_transform_edt

from .grids import (
    DataError,
    DisplacementField,
    GridError,
    ImageGrid,
    LandmarkSet,
    ProbMask,
    VelocityField,
    integrate_velocity,
    load_landmarks,
    load_portable,
    save_landmarks,
    save_nifti,
    save_portable,
    warp,
    warp_points,
)


# ---------------------------------------------------------------------------
# histogram matching

def _match_values(values: np.ndarray, reference: np.ndarray, bins: int) -> np.ndarray:
    """Binned CDF matching of a value array onto a reference distribution.

    The forward position is the right-edge CDF of the value's own bin and the
    inverse is the first reference bin reaching that position. Sharing the
    bin-membership convention on both legs keeps re-matching to the same
    reference stable even across empty-bin runs in sparse tails.
    """
    s_min, s_max = float(values.min()), float(values.max())
    r_min, r_max = float(reference.min()), float(reference.max())
    if s_max == s_min:
        # a constant source sits at the middle of its own CDF
        pos = np.full(values.shape, 0.5)
    else:
        hist_s, edges_s = np.histogram(values, bins=bins, range=(s_min, s_max))
        cdf_s = np.cumsum(hist_s) / values.size
        idx_s = np.digitize(values, edges_s[1:-1], right=False)
        pos = cdf_s[idx_s]
    hist_r, edges_r = np.histogram(reference, bins=bins, range=(r_min, r_max))
    cdf_r = np.cumsum(hist_r) / reference.size
    centers_r = 0.5 * (edges_r[:-1] + edges_r[1:])
    idx_r = np.searchsorted(cdf_r, pos, side="left")
    return centers_r[np.clip(idx_r, 0, bins - 1)]


def histogram_match(source: ImageGrid, reference: ImageGrid, bins: int = 256) -> ImageGrid:
    """Match the source's nonzero-voxel histogram to the reference's.

    Zero voxels are treated as background and pass through unchanged. A
    constant (or empty) reference carries no histogram, so the source comes
    back unchanged with a warning.
    """
    if bins < 16:
        raise ValueError(f"bins must be >= 16, got {bins}")
    src = source.data.detach().cpu().numpy()
    ref = reference.data.detach().cpu().numpy()
    src_fg = src != 0
    ref_vals = ref[ref != 0]
    if ref_vals.size == 0 or float(ref_vals.max()) == float(ref_vals.min()):
        warnings.warn("histogram_match: reference has no usable histogram; source returned unchanged")
        return source
    if not src_fg.any():
        warnings.warn("histogram_match: source has no nonzero voxels; returned unchanged")
        return source
    out = src.astype(np.float64, copy=True)
    out[src_fg] = _match_values(src[src_fg].astype(np.float64), ref_vals.astype(np.float64), bins)
    return ImageGrid(out.astype(np.float32), source.spacing)


# ---------------------------------------------------------------------------
# phantoms

def _smooth_noise(rng: np.random.Generator, dims, n_channels: int, max_abs: float,
                  coarse: int = 8) -> np.ndarray:
    """Band-limited noise: coarse gaussian grid upsampled smoothly, peak-normalized."""
    coarse_dims = [max(2, int(np.ceil(d / coarse))) for d in dims]
    raw = rng.standard_normal((1, n_channels, *coarse_dims))
    t = torch.as_tensor(raw, dtype=torch.float32)
    mode = "bilinear" if len(dims) == 2 else "trilinear"
    up = F.interpolate(t, size=tuple(dims), mode=mode, align_corners=True)[0]
    arr = up.numpy()
    peak = float(np.abs(arr).max())
    if peak > 0 and max_abs > 0:
        arr = arr * (max_abs / peak)
    else:
        arr = np.zeros_like(arr)
    return arr


def _smoothstep(x: np.ndarray, edge: float, width: float) -> np.ndarray:
    t = np.clip((x - edge) / max(width, 1e-6), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def make_phantom(seed: int, dims) -> dict:
    """Healthy head-like phantom: nested tissue bands, texture, diffeomorphic jitter.

    Returns {"image": ImageGrid, "brain_mask": ProbMask}; both deterministic
    functions of (seed, dims). The mask is binary and covers roughly 30-70%
    of the grid by construction.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) not in (2, 3):
        raise GridError(f"dims must have 2 or 3 axes, got {dims}")
    if any(d < 32 for d in dims):
        raise GridError(f"every axis must be >= 32, got {dims}")
    ndim = len(dims)
    rng = np.random.default_rng(seed)

    if ndim == 2:
        frac = rng.uniform(0.72, 0.88, size=ndim)
    else:
        frac = rng.uniform(0.91, 0.97, size=ndim)
    center = np.array(dims) / 2.0 + rng.uniform(-1.5, 1.5, size=ndim)
    semi = frac * (np.array(dims) / 2.0 - 2.0)
    coords = np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij")
    rho = np.sqrt(sum(((c - mu) / s) ** 2 for c, mu, s in zip(coords, center, semi)))
    inside = rho <= 1.0

    core = rng.uniform(0.45, 0.60)
    band = rng.uniform(0.70, 0.85)
    rim = rng.uniform(0.20, 0.30)
    r1 = rng.uniform(0.50, 0.62)
    r2 = rng.uniform(0.78, 0.88)
    img = core + (band - core) * _smoothstep(rho, r1, 0.08) + (rim - band) * _smoothstep(rho, r2, 0.06)

    tex = np.zeros(dims)
    # finest control grid kept at 6 voxels: sharper texture does not survive
    # warp interpolation, which would spoil reconstruction fidelity checks
    for scale, amp in ((6, 0.05), (10, 0.035), (16, 0.02)):
        tex += _smooth_noise(rng, dims, 1, amp, coarse=scale)[0]
    img = np.clip(img + tex, 0.05, 0.98) * inside

    vel = _smooth_noise(rng, dims, ndim, rng.uniform(0.5, 1.8))
    flow = integrate_velocity(VelocityField(vel), 7)
    image = warp(ImageGrid(img.astype(np.float32)), flow)
    mask = warp(ProbMask(inside.astype(np.float32)), flow)
    mask_bin = (mask.data > 0.5).to(torch.float32)
    clean = image.data.clamp(0.0, 1.0) * mask_bin
    return {"image": ImageGrid(clean), "brain_mask": ProbMask(mask_bin)}


# ---------------------------------------------------------------------------
# lesions

@dataclass(frozen=True)
class LesionSpec:
    center: tuple
    radii: tuple
    texture_seed: int
    profile: str = "hyper"
    softness: float = 1.0

    def __post_init__(self):
        if self.profile not in ("hypo", "hyper", "mixed"):
            raise ValueError(f"profile must be hypo|hyper|mixed, got {self.profile!r}")
        radii = tuple(float(r) for r in self.radii)
        center = tuple(float(c) for c in self.center)
        if len(radii) != len(center):
            raise ValueError("center and radii must have the same length")
        if any(not np.isfinite(r) or r < 0 for r in radii):
            raise ValueError(f"radii must be finite and non-negative, got {radii}")
        if self.softness < 0:
            raise ValueError("softness must be >= 0")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "radii", radii)


def insert_lesion(image: ImageGrid, brain_mask: ProbMask, lesion: LesionSpec) -> dict:
    """Paste a textured lesion into the image; returns {pathological, lesion_mask}.

    The patch is intensity-matched to the tissue it replaces and then shifted
    per the profile until the masked mean moves by a clearly visible margin,
    so the contrast contract holds as long as the tissue leaves headroom.
    The binary mask is exactly the ellipsoidal support; `softness` only
    feathers the paste blend.
    """
    if image.dims != brain_mask.dims:
        raise GridError(f"image dims {image.dims} do not match mask dims {brain_mask.dims}")
    if len(lesion.center) != image.ndim:
        raise GridError(f"lesion is {len(lesion.center)}D but image is {image.ndim}D")
    dims = image.dims
    empty = ProbMask(np.zeros(dims, dtype=np.float32), image.spacing)
    if any(r == 0 for r in lesion.radii):
        return {"pathological": image, "lesion_mask": empty}

    coords = np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij")
    rho2 = sum(((c - mu) / r) ** 2 for c, mu, r in zip(coords, lesion.center, lesion.radii))
    support = rho2 <= 1.0
    if not support.any():
        return {"pathological": image, "lesion_mask": empty}
    brain = brain_mask.data.detach().cpu().numpy() > 0.5
    if (support & ~brain).any():
        raise GridError("lesion must lie entirely inside the brain mask")

    img = image.data.detach().cpu().numpy().astype(np.float64)
    local = img[support]
    rng = np.random.default_rng(lesion.texture_seed)
    noise = _smooth_noise(rng, dims, 1, 1.0, coarse=4)[0] + 0.35 * _smooth_noise(rng, dims, 1, 1.0, coarse=2)[0]
    pvals = noise[support]
    pvals = (pvals - pvals.min()) / max(pvals.max() - pvals.min(), 1e-9)
    matched = _match_values(pvals, local, 256)

    if lesion.profile == "mixed":
        sign = np.sign(_smooth_noise(rng, dims, 1, 1.0, coarse=6)[0][support] + 1e-9)
        patch = np.clip(matched + 0.25 * sign, 0.02, 1.0)
    else:
        direction = 1.0 if lesion.profile == "hyper" else -1.0
        target = direction * 0.28
        shift = target
        patch = matched
        for _ in range(8):
            patch = np.clip(matched + shift, 0.02, 1.0)
            gap = target - (patch.mean() - local.mean())
            if abs(gap) < 0.01:
                break
            shift += gap

    if lesion.softness > 0:
        depth = distance_transform_edt(support)
        alpha = np.clip(depth / lesion.softness, 0.0, 1.0)
    else:
        alpha = support.astype(np.float64)
    out = img.copy()
    full_patch = np.zeros(dims)
    full_patch[support] = patch
    out = out * (1.0 - alpha) + full_patch * alpha
    return {
        "pathological": ImageGrid(np.clip(out, 0.0, 1.0).astype(np.float32), image.spacing),
        "lesion_mask": ProbMask(support.astype(np.float32), image.spacing),
    }


# ---------------------------------------------------------------------------
# gold-standard deformations

def _gold_fields(healthy: ImageGrid, rng: np.random.Generator, max_disp: float | None):
    amp = rng.uniform(1.5, 2.8) if max_disp is None else float(max_disp)
    vel = _smooth_noise(rng, healthy.dims, healthy.ndim, amp)
    forward = integrate_velocity(VelocityField(vel), 7)
    gold = integrate_velocity(VelocityField(-vel), 7)
    return forward, gold


def make_gold_pair(healthy: ImageGrid, seed: int, max_disp: float | None = None) -> dict:
    """Warp a healthy image by a known smooth diffeomorphism.

    Returns {"moving": warped healthy image, "gold_field": the inverse
    displacement, "forward_field": the applied displacement}. Warping the
    moving image by the gold field recovers the input, so the gold field is
    the reference for moving-to-fixed registration. Velocity sup-norm stays
    under 3 voxels (``max_disp`` overrides the random amplitude; 0 gives the
    identity).
    """
    rng = np.random.default_rng(seed)
    forward, gold = _gold_fields(healthy, rng, max_disp)
    moving = warp(healthy, forward)
    return {"moving": moving, "gold_field": gold, "forward_field": forward}


# ---------------------------------------------------------------------------
# manifest

@dataclass(frozen=True)
class CaseEntry:
    id: str
    role: str
    image: str
    brain_mask: str
    lesion_mask: str
    gold_field: str
    healthy_image: str
    landmarks_fixed: str
    landmarks_moving: str

    def __post_init__(self):
        if self.role not in ("train", "val", "test"):
            raise ValueError(f"role must be train|val|test, got {self.role!r}")


@dataclass(frozen=True)
class DatasetManifest:
    version: int
    dims: tuple
    spacing: tuple
    template_image: str
    template_brain_mask: str
    cases: tuple
    root: Path | None = dc_field(default=None, compare=False)

    def __post_init__(self):
        ids = [c.id for c in self.cases]
        if len(set(ids)) != len(ids):
            raise DataError("case ids must be unique")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "cases", tuple(self.cases))

    def path(self, rel: str) -> Path:
        if self.root is None:
            raise DataError("manifest has no root directory; load it from disk first")
        return self.root / rel

    def by_role(self, *roles: str) -> list:
        return [c for c in self.cases if c.role in roles]


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    doc = {
        "version": manifest.version,
        "dims": list(manifest.dims),
        "spacing": list(manifest.spacing),
        "template_image": manifest.template_image,
        "template_brain_mask": manifest.template_brain_mask,
        "cases": [
            {
                "id": c.id,
                "role": c.role,
                "image": c.image,
                "brain_mask": c.brain_mask,
                "lesion_mask": c.lesion_mask,
                "gold_field": c.gold_field,
                "healthy_image": c.healthy_image,
                "landmarks_fixed": c.landmarks_fixed,
                "landmarks_moving": c.landmarks_moving,
            }
            for c in manifest.cases
        ],
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: {e}") from e
    try:
        cases = tuple(CaseEntry(**c) for c in doc["cases"])
        manifest = DatasetManifest(
            version=int(doc["version"]),
            dims=tuple(doc["dims"]),
            spacing=tuple(doc["spacing"]),
            template_image=doc["template_image"],
            template_brain_mask=doc["template_brain_mask"],
            cases=cases,
            root=path.parent,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{path}: malformed manifest ({e})") from e
    missing = []
    for rel in [manifest.template_image, manifest.template_brain_mask]:
        if not (path.parent / rel).exists():
            missing.append(rel)
    for c in manifest.cases:
        for rel in (c.image, c.brain_mask, c.lesion_mask, c.gold_field, c.healthy_image,
                    c.landmarks_fixed, c.landmarks_moving):
            if not (path.parent / rel).exists():
                missing.append(rel)
    if missing:
        raise DataError(f"{path}: missing referenced files: {missing[:5]}")
    return manifest


# ---------------------------------------------------------------------------
# dataset builder

@dataclass(frozen=True)
class SynthConfig:
    out_dir: str
    dims: tuple = (64, 64)
    n_train: int = 40
    n_val: int = 10
    seed: int = 0
    n_landmarks: int = 12
    lesion_radius_frac: tuple = (0.09, 0.16)
    lesion_softness: float = 1.0
    lesion_profiles: tuple = ("hyper",)
    max_disp: float | None = None
    template_gamma: float = 1.0
    export_nifti: bool = False
    spacing: tuple | None = None

    def __post_init__(self):
        if self.n_train < 1 or self.n_val < 0:
            raise ValueError("need at least one training case and a non-negative val count")
        if self.template_gamma <= 0:
            raise ValueError("template_gamma must be positive")
        for p in self.lesion_profiles:
            if p not in ("hypo", "hyper", "mixed"):
                raise ValueError(f"unknown lesion profile {p!r}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        sp = self.spacing if self.spacing is not None else (1.0,) * len(self.dims)
        object.__setattr__(self, "spacing", tuple(float(s) for s in sp))


def _near_threshold(ndim: int) -> float:
    return 30.0 if ndim == 3 else 15.0


def _sample_landmarks(rng, template_brain: np.ndarray, fixed_lesion: np.ndarray,
                      n_points: int) -> np.ndarray:
    """Integer landmark sites in template space, stratified across near/far bands."""
    interior = distance_transform_edt(template_brain) > 3.0
    dist = distance_transform_edt(~fixed_lesion) if fixed_lesion.any() else np.full(template_brain.shape, np.inf)
    thr = _near_threshold(template_brain.ndim)
    near = interior & ~fixed_lesion & (dist <= thr)
    far = interior & ~fixed_lesion & (dist > thr)
    tumor = interior & fixed_lesion

    def draw(region: np.ndarray, k: int) -> list:
        idx = np.argwhere(region)
        if idx.shape[0] == 0 or k <= 0:
            return []
        take = idx[rng.choice(idx.shape[0], size=min(k, idx.shape[0]), replace=False)]
        return [tuple(float(v) for v in row) for row in take]

    n_near = max(4, n_points // 3)
    n_far = max(4, n_points // 3)
    n_tum = min(2, max(0, n_points - n_near - n_far))
    pts = draw(near, n_near) + draw(far, n_far) + draw(tumor, n_tum)
    short = n_points - len(pts)
    if short > 0:
        pts += draw(interior, short)
    # de-duplicate while keeping order
    seen, uniq = set(), []
    for p in pts:
        if p not in seen:
            seen.add(p)
            uniq.append(p)
    return np.asarray(uniq[:n_points], dtype=np.float64)


def build_dataset(cfg: SynthConfig) -> DatasetManifest:
    """Generate the benchmark into cfg.out_dir and return the saved manifest."""
    out = Path(cfg.out_dir)
    (out / "template").mkdir(parents=True, exist_ok=True)
    master = np.random.default_rng(cfg.seed)
    ndim = len(cfg.dims)

    tpl = make_phantom(int(master.integers(2 ** 31)), cfg.dims)
    tpl_img, tpl_mask = tpl["image"], tpl["brain_mask"]
    if cfg.template_gamma != 1.0:
        shifted = tpl_img.data.detach().cpu().numpy() ** cfg.template_gamma
        tpl_img = ImageGrid(shifted.astype(np.float32), tpl_img.spacing)
    save_portable(ImageGrid(tpl_img.data, cfg.spacing), out / "template" / "image.portable")
    save_portable(ProbMask(tpl_mask.data, cfg.spacing), out / "template" / "brain_mask.portable")

    tpl_brain_np = tpl_mask.data.numpy() > 0.5
    min_dim = float(min(cfg.dims))
    cases = []
    total = cfg.n_train + cfg.n_val
    for i in range(total):
        role = "train" if i < cfg.n_train else "val"
        cid = f"case_{i:03d}"
        cdir = out / "cases" / cid
        cdir.mkdir(parents=True, exist_ok=True)
        crng = np.random.default_rng(int(master.integers(2 ** 31)))

        forward, gold = _gold_fields(tpl_img, crng, cfg.max_disp)
        healthy_moving = warp(tpl_img, forward)
        moving_brain = (warp(tpl_mask, forward).data > 0.5).to(torch.float32)
        brain_np = moving_brain.numpy() > 0.5

        radii = tuple(crng.uniform(*cfg.lesion_radius_frac) * min_dim for _ in range(ndim))
        profile = cfg.lesion_profiles[i % len(cfg.lesion_profiles)]
        lesion_mask = None
        pathological = healthy_moving
        for attempt in range(12):
            margin = max(radii) + cfg.lesion_softness + 2.0
            ok = distance_transform_edt(brain_np) > margin
            sites = np.argwhere(ok)
            if sites.shape[0] == 0:
                radii = tuple(r * 0.8 for r in radii)
                continue
            center = tuple(float(v) for v in sites[crng.integers(sites.shape[0])])
            spec = LesionSpec(center, radii, int(crng.integers(2 ** 31)), profile, cfg.lesion_softness)
            try:
                res = insert_lesion(healthy_moving, ProbMask(moving_brain), spec)
            except GridError:
                radii = tuple(r * 0.85 for r in radii)
                continue
            pathological, lesion_mask = res["pathological"], res["lesion_mask"]
            break
        if lesion_mask is None:
            raise GridError(f"{cid}: could not place a lesion inside the brain mask")

        fixed_lesion = (warp(lesion_mask, gold).data > 0.5).numpy()
        pts = _sample_landmarks(crng, tpl_brain_np, fixed_lesion, cfg.n_landmarks)
        ids = tuple(f"lm_{k:02d}" for k in range(pts.shape[0]))
        lms_fixed = LandmarkSet(ids, pts)
        lms_moving = warp_points(lms_fixed, gold)

        save_portable(ImageGrid(pathological.data, cfg.spacing), cdir / "image.portable")
        save_portable(ImageGrid(healthy_moving.data, cfg.spacing), cdir / "healthy.portable")
        save_portable(ProbMask(moving_brain, cfg.spacing), cdir / "brain_mask.portable")
        save_portable(ProbMask(lesion_mask.data, cfg.spacing), cdir / "lesion_mask.portable")
        save_portable(DisplacementField(gold.data, cfg.spacing), cdir / "gold_field.portable")
        save_landmarks(lms_fixed, cdir / "landmarks_fixed.csv")
        save_landmarks(lms_moving, cdir / "landmarks_moving.csv")
        if ndim == 3 and cfg.export_nifti:
            save_nifti(ImageGrid(pathological.data, cfg.spacing), cdir / "image.nii.gz")

        rel = f"cases/{cid}"
        cases.append(CaseEntry(
            id=cid,
            role=role,
            image=f"{rel}/image.portable",
            brain_mask=f"{rel}/brain_mask.portable",
            lesion_mask=f"{rel}/lesion_mask.portable",
            gold_field=f"{rel}/gold_field.portable",
            healthy_image=f"{rel}/healthy.portable",
            landmarks_fixed=f"{rel}/landmarks_fixed.csv",
            landmarks_moving=f"{rel}/landmarks_moving.csv",
        ))

    manifest = DatasetManifest(
        version=1,
        dims=cfg.dims,
        spacing=cfg.spacing,
        template_image="template/image.portable",
        template_brain_mask="template/brain_mask.portable",
        cases=tuple(cases),
        root=out,
    )
    save_manifest(manifest, out / "manifest.json")
    return manifest


def load_case_arrays(manifest: DatasetManifest, case: CaseEntry) -> dict:
    """Load every stored artifact of a case as grid objects."""
    return {
        "image": load_portable(manifest.path(case.image)),
        "brain_mask": load_portable(manifest.path(case.brain_mask)),
        "lesion_mask": load_portable(manifest.path(case.lesion_mask)),
        "gold_field": load_portable(manifest.path(case.gold_field)),
        "healthy_image": load_portable(manifest.path(case.healthy_image)),
        "landmarks_fixed": load_landmarks(manifest.path(case.landmarks_fixed)),
        "landmarks_moving": load_landmarks(manifest.path(case.landmarks_moving)),
    }
