"""Dense displacement/velocity fields on regular grids, and the warping ops built on them.

Conventions used throughout the package:

* images live on 2- or 3-axis grids, tensor axis order (y, x) or (z, y, x);
* vector fields are channels-first with shape (ndim, *dims), component c is the
  displacement along tensor axis c, measured in voxels;
* warping is backward: output(x) = input(x + u(x)), samples outside the grid
  clamp to the border;
* field composition follows (f o g)(x) = g(x) + f(x + g(x)), so warping with
  compose(f, g) equals warping with g first and f second.
"""

from __future__ import annotations

import csv
import gzip
import itertools
import json
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F


class GridError(ValueError):
    """Invalid grid construction or parameters."""


class ShapeError(GridError):
    """Operands live on incompatible grids."""


def _as_tensor(data) -> torch.Tensor:
    t = torch.as_tensor(data)
    if not torch.is_floating_point(t):
        t = t.to(torch.float32)
    return t


def _check_spacing(spacing, ndim: int) -> tuple[float, ...]:
    if spacing is None:
        return (1.0,) * ndim
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != ndim or any(s <= 0 for s in spacing):
        raise GridError(f"spacing must be {ndim} positive values, got {spacing}")
    return spacing


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """Scalar image on a 2D or 3D voxel grid."""

    data: torch.Tensor
    spacing: tuple[float, ...] = None

    def __post_init__(self):
        t = _as_tensor(self.data)
        if t.dim() not in (2, 3):
            raise GridError(f"expected 2 or 3 axes, got shape {tuple(t.shape)}")
        if not bool(torch.isfinite(t).all()):
            raise GridError("image contains non-finite values")
        object.__setattr__(self, "data", t)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing, t.dim()))

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.dim()


@dataclass(frozen=True, eq=False)
class ProbMask:
    """Soft segmentation mask, values in [0, 1], same grid layout as ImageGrid."""

    data: torch.Tensor
    spacing: tuple[float, ...] = None

    def __post_init__(self):
        t = _as_tensor(self.data)
        if t.dim() not in (2, 3):
            raise GridError(f"expected 2 or 3 axes, got shape {tuple(t.shape)}")
        if not bool(torch.isfinite(t).all()):
            raise GridError("mask contains non-finite values")
        if bool((t < 0).any()) or bool((t > 1).any()):
            raise GridError("mask values must lie in [0, 1]")
        object.__setattr__(self, "data", t)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing, t.dim()))

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.dim()

    def complement(self) -> "ProbMask":
        return ProbMask(1.0 - self.data, self.spacing)


def _check_field_tensor(data, what: str) -> torch.Tensor:
    t = _as_tensor(data)
    if t.dim() not in (3, 4) or t.shape[0] != t.dim() - 1:
        raise GridError(f"{what} must have shape (ndim, *dims), got {tuple(t.shape)}")
    if not bool(torch.isfinite(t).all()):
        raise GridError(f"{what} contains non-finite values")
    return t


@dataclass(frozen=True, eq=False)
class VelocityField:
    """Stationary velocity field, shape (ndim, *dims), voxel units."""

    data: torch.Tensor
    spacing: tuple[float, ...] = None

    def __post_init__(self):
        t = _check_field_tensor(self.data, "velocity field")
        object.__setattr__(self, "data", t)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing, t.shape[0]))

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.data.shape[1:])

    @property
    def ndim(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Dense displacement field, shape (ndim, *dims), voxel units.

    ``velocity`` optionally keeps the stationary velocity the field was
    integrated from, so regularizers can penalize the generator instead of
    the integrated displacement.
    """

    data: torch.Tensor
    spacing: tuple[float, ...] = None
    velocity: VelocityField | None = dc_field(default=None, repr=False)

    def __post_init__(self):
        t = _check_field_tensor(self.data, "displacement field")
        object.__setattr__(self, "data", t)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing, t.shape[0]))

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.data.shape[1:])

    @property
    def ndim(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """Named points in voxel coordinates, axis order matching the grid axes."""

    ids: tuple[str, ...]
    points: np.ndarray
    oob: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] not in (2, 3):
            raise GridError(f"points must be (n, 2) or (n, 3), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise GridError("landmark coordinates must be finite")
        ids = tuple(str(i) for i in self.ids)
        if len(ids) != pts.shape[0]:
            raise GridError("ids and points disagree in length")
        if len(set(ids)) != len(ids):
            raise GridError("landmark ids must be unique")
        oob = self.oob
        if oob is not None:
            oob = np.asarray(oob, dtype=bool)
            if oob.shape != (pts.shape[0],):
                raise GridError("oob flags must be one bool per point")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "oob", oob)

    @property
    def ndim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]


# ---------------------------------------------------------------------------
# warping ops

def _sample_locations(u: torch.Tensor) -> torch.Tensor:
    """Build the grid_sample lookup grid for voxel displacements u of shape (ndim, *dims)."""
    ndim = u.shape[0]
    dims = u.shape[1:]
    coords = torch.meshgrid(
        *[torch.arange(s, dtype=u.dtype, device=u.device) for s in dims],
        indexing="ij",
    )
    normalized = []
    for c in range(ndim):
        pos = coords[c] + u[c]
        # align_corners grid: -1 is voxel 0, +1 is voxel size-1
        denom = max(dims[c] - 1, 1)
        normalized.append(2.0 * pos / denom - 1.0)
    # grid_sample wants the fastest-varying axis first in the last dimension
    return torch.stack(normalized[::-1], dim=-1).unsqueeze(0)


def _warp_channels(data: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Backward-warp (C, *dims) channels by (ndim, *dims) voxel displacements."""
    if data.shape[1:] != u.shape[1:]:
        raise ShapeError(f"cannot warp {tuple(data.shape[1:])} data with a {tuple(u.shape[1:])} field")
    if not u.requires_grad and not bool(u.any()):
        # the zero field must reproduce the input bit-exactly; grid_sample's
        # coordinate round trip is off by an ulp on non-power-of-two extents
        return data.clone()
    grid = _sample_locations(u)
    out = F.grid_sample(
        data.unsqueeze(0).to(u.dtype),
        grid,
        mode="bilinear",
        padding_mode="border",
        align_corners=True,
    )
    return out.squeeze(0)


def warp(image, field: DisplacementField):
    """Backward-warp an ImageGrid or ProbMask: output(x) = input(x + u(x))."""
    if image.dims != field.dims:
        raise ShapeError(f"image dims {image.dims} do not match field dims {field.dims}")
    out = _warp_channels(image.data.unsqueeze(0), field.data).squeeze(0)
    if isinstance(image, ProbMask):
        # interpolation of [0,1] data is convex but float error can poke past the ends
        return ProbMask(out.clamp(0.0, 1.0), image.spacing)
    return ImageGrid(out, image.spacing)


def compose(f: DisplacementField, g: DisplacementField) -> DisplacementField:
    """Composite field for applying g first, then f: (f o g)(x) = g(x) + f(x + g(x))."""
    if f.dims != g.dims or f.ndim != g.ndim:
        raise ShapeError(f"cannot compose fields on grids {f.dims} and {g.dims}")
    u = g.data + _warp_channels(f.data, g.data)
    return DisplacementField(u, f.spacing)


def integrate_velocity(v: VelocityField, steps: int = 7) -> DisplacementField:
    """Scaling-and-squaring integration of a stationary velocity field."""
    if not isinstance(steps, int) or steps < 1:
        raise GridError(f"steps must be a positive integer, got {steps}")
    u = v.data / (2.0 ** steps)
    for _ in range(steps):
        u = u + _warp_channels(u, u)
    return DisplacementField(u, v.spacing, velocity=v)


def jacobian_determinant(field: DisplacementField) -> ImageGrid:
    """Pointwise determinant of d(x + u(x))/dx in voxel coordinates.

    Central differences in the interior, one-sided at the borders.
    """
    u = field.data
    ndim = field.ndim
    g = [[torch.gradient(u[i], dim=j)[0] for j in range(ndim)] for i in range(ndim)]
    if ndim == 2:
        a = 1.0 + g[0][0]
        b = g[0][1]
        c = g[1][0]
        d = 1.0 + g[1][1]
        det = a * d - b * c
    else:
        a = 1.0 + g[0][0]
        b = g[0][1]
        c = g[0][2]
        d = g[1][0]
        e = 1.0 + g[1][1]
        f = g[1][2]
        h = g[2][0]
        i = g[2][1]
        j = 1.0 + g[2][2]
        det = a * (e * j - f * i) - b * (d * j - f * h) + c * (d * i - e * h)
    return ImageGrid(det, field.spacing)


def _sample_at_points(u: torch.Tensor, pts: torch.Tensor) -> torch.Tensor:
    """Multilinear interpolation of (C, *dims) data at (n, ndim) voxel coordinates."""
    ndim = pts.shape[1]
    sizes = u.shape[1:]
    clamped = torch.stack(
        [pts[:, ax].clamp(0.0, float(sizes[ax] - 1)) for ax in range(ndim)], dim=1
    )
    lo = clamped.floor().long()
    frac = clamped - lo.to(clamped.dtype)
    out = torch.zeros(u.shape[0], pts.shape[0], dtype=u.dtype)
    for corner in itertools.product((0, 1), repeat=ndim):
        w = torch.ones(pts.shape[0], dtype=u.dtype)
        idx = []
        for ax, bit in enumerate(corner):
            i = (lo[:, ax] + bit).clamp(max=sizes[ax] - 1)
            w = w * (frac[:, ax] if bit else 1.0 - frac[:, ax])
            idx.append(i)
        out = out + w * u[(slice(None), *idx)]
    return out


def warp_points(landmarks: LandmarkSet, field: DisplacementField) -> LandmarkSet:
    """Map points p to p + u(p); points leaving the grid keep their true
    coordinates but come back flagged out-of-bounds."""
    if landmarks.ndim != field.ndim:
        raise ShapeError(f"{landmarks.ndim}D landmarks cannot be mapped by a {field.ndim}D field")
    pts = torch.as_tensor(landmarks.points, dtype=torch.float64)
    u = _sample_at_points(field.data.to(torch.float64), pts)
    mapped = pts + u.transpose(0, 1)
    sizes = torch.tensor([float(s - 1) for s in field.dims], dtype=torch.float64)
    oob = ((mapped < 0) | (mapped > sizes)).any(dim=1)
    return LandmarkSet(landmarks.ids, mapped.numpy(), oob.numpy())

# ---------------------------------------------------------------------------
# file formats: portable raw containers, a minimal NIfTI-1 codec, landmark CSV
#
# The portable container is a raw little-endian float32 payload (x varies
# fastest, matching C order over our (y, x) / (z, y, x) axes) next to a JSON
# sidecar at "<path>.json" describing dims, spacing and payload kind. Vector
# fields are stored component-major, components ordered like the grid axes.
# NIfTI-1 support is deliberately small: single-file .nii/.nii.gz, 3D scalar
# volumes, spacing from pixdim; orientation codes are ignored.

class DataError(ValueError):
    """Malformed or inconsistent file content."""


_KINDS = {
    ImageGrid: "image",
    ProbMask: "mask",
    DisplacementField: "displacement_field",
    VelocityField: "velocity_field",
}


def save_portable(obj, path) -> None:
    path = Path(path)
    kind = _KINDS.get(type(obj))
    if kind is None:
        raise DataError(f"cannot serialize {type(obj).__name__} as a portable container")
    arr = obj.data.detach().cpu().numpy().astype("<f4")
    if kind in ("image", "mask"):
        dims = list(arr.shape)
        components = None
    else:
        dims = list(arr.shape[1:])
        components = arr.shape[0]
    sidecar = {
        "kind": kind,
        "dims": dims,
        "components": components,
        "spacing": list(obj.spacing),
        "dtype": "float32",
        "endianness": "little",
        "axis_order": "x-fastest",
        "layout": "component-major",
    }
    path.write_bytes(arr.tobytes(order="C"))
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=1) + "\n")


def load_portable(path):
    path = Path(path)
    sidecar_path = Path(str(path) + ".json")
    if not path.exists() or not sidecar_path.exists():
        raise FileNotFoundError(f"missing portable container or sidecar for {path}")
    try:
        meta = json.loads(sidecar_path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"bad sidecar {sidecar_path}: {e}") from e
    for key in ("kind", "dims", "spacing"):
        if key not in meta:
            raise DataError(f"sidecar {sidecar_path} lacks '{key}'")
    if meta.get("dtype", "float32") != "float32" or meta.get("endianness", "little") != "little":
        raise DataError(f"unsupported payload encoding in {sidecar_path}")
    kind = meta["kind"]
    dims = tuple(int(d) for d in meta["dims"])
    spacing = tuple(float(s) for s in meta["spacing"])
    if kind in ("displacement_field", "velocity_field"):
        shape = (int(meta.get("components") or len(dims)),) + dims
    elif kind in ("image", "mask"):
        shape = dims
    else:
        raise DataError(f"unknown payload kind '{kind}' in {sidecar_path}")
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise DataError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    try:
        if kind == "image":
            return ImageGrid(arr, spacing)
        if kind == "mask":
            return ProbMask(arr, spacing)
        if kind == "displacement_field":
            return DisplacementField(arr, spacing)
        return VelocityField(arr, spacing)
    except GridError as e:
        raise DataError(f"{path}: {e}") from e


# ---------------------------------------------------------------------------
# NIfTI-1

_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64}


def save_nifti(image: ImageGrid, path) -> None:
    if image.ndim != 3:
        raise DataError("NIfTI output is supported for 3D volumes only")
    path = Path(path)
    nz, ny, nx = image.dims
    sz, sy, sx = image.spacing
    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)
    struct.pack_into("<8h", header, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, 16)  # float32
    struct.pack_into("<h", header, 72, 32)
    struct.pack_into("<8f", header, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, 352.0)  # vox_offset
    struct.pack_into("<f", header, 112, 1.0)  # scl_slope
    struct.pack_into("<4s", header, 344, b"n+1\x00")
    # C-order bytes of the (z, y, x) array are already x-fastest as NIfTI expects
    payload = image.data.detach().cpu().numpy().astype("<f4").tobytes(order="C")
    blob = bytes(header) + b"\x00\x00\x00\x00" + payload
    if str(path).endswith(".gz"):
        with gzip.open(path, "wb") as fh:
            fh.write(blob)
    else:
        path.write_bytes(blob)


def load_nifti(path) -> ImageGrid:
    path = Path(path)
    if str(path).endswith(".gz"):
        with gzip.open(path, "rb") as fh:
            blob = fh.read()
    else:
        blob = path.read_bytes()
    if len(blob) < 352:
        raise DataError(f"{path}: too short to be a NIfTI-1 file")
    (sizeof_hdr,) = struct.unpack_from("<i", blob, 0)
    magic = struct.unpack_from("<4s", blob, 344)[0]
    if sizeof_hdr != 348 or magic not in (b"n+1\x00", b"ni1\x00"):
        raise DataError(f"{path}: not a NIfTI-1 file")
    if magic == b"ni1\x00":
        raise DataError(f"{path}: two-file NIfTI (.hdr/.img) is not supported")
    dim = struct.unpack_from("<8h", blob, 40)
    if dim[0] != 3:
        raise DataError(f"{path}: expected a 3D volume, got dim[0]={dim[0]}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    (datatype,) = struct.unpack_from("<h", blob, 70)
    if datatype not in _NIFTI_DTYPES:
        raise DataError(f"{path}: unsupported NIfTI datatype {datatype}")
    pixdim = struct.unpack_from("<8f", blob, 76)
    (vox_offset,) = struct.unpack_from("<f", blob, 108)
    slope, inter = struct.unpack_from("<2f", blob, 112)
    offset = int(vox_offset)
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder("<")
    count = nx * ny * nz
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    arr = arr.reshape(nz, ny, nx).astype(np.float32)
    if slope not in (0.0, 1.0) or inter != 0.0:
        arr = arr * (slope if slope != 0.0 else 1.0) + inter
    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    if any(s <= 0 for s in spacing):
        spacing = (1.0, 1.0, 1.0)
    try:
        return ImageGrid(arr, spacing)
    except GridError as e:
        raise DataError(f"{path}: {e}") from e


# ---------------------------------------------------------------------------
# landmarks

def save_landmarks(landmarks: LandmarkSet, path) -> None:
    path = Path(path)
    header = ["id", "x", "y"] if landmarks.ndim == 2 else ["id", "x", "y", "z"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for name, point in zip(landmarks.ids, landmarks.points):
            # file columns are x fastest; in-memory axis order is the reverse
            writer.writerow([name] + [f"{c:.17g}" for c in point[::-1]])


def load_landmarks(path) -> LandmarkSet:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty landmark file")
    header = [h.strip().lower() for h in rows[0]]
    if header not in (["id", "x", "y"], ["id", "x", "y", "z"]):
        raise DataError(f"{path}: expected header id,x,y[,z], got {rows[0]}")
    ndim = len(header) - 1
    ids, pts = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != ndim + 1:
            raise DataError(f"{path}:{lineno}: expected {ndim + 1} columns, got {len(row)}")
        ids.append(row[0].strip())
        try:
            coords = [float(c) for c in row[1:]]
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: {e}") from e
        pts.append(coords[::-1])
    try:
        return LandmarkSet(tuple(ids), np.asarray(pts, dtype=np.float64))
    except GridError as e:
        raise DataError(f"{path}: {e}") from e
