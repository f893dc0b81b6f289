"""Voxel grids, geometry helpers and the VOLZ on-disk format.

Grids are stored as numpy arrays indexed ``[x, y, z]``. On disk the payload
is written x-fastest (Fortran order), which is what the VOLZ header's
``"order": "xfastest"`` promises.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

Dims = tuple[int, int, int]


class VolgridError(ValueError):
    pass


class MalformedHeader(VolgridError):
    pass


class PayloadSizeMismatch(VolgridError):
    pass


class UnsupportedDtype(VolgridError):
    pass


class ModeLabelMismatch(VolgridError):
    pass


class DegeneratePolygon(VolgridError):
    pass


class IoFailure(OSError):
    pass


# ---------------------------------------------------------------------------
# grid kinds


@dataclass(eq=False)
class Grid:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    dtype = np.float32
    dtype_tag = "f32"
    kind = "grid"

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3:
            raise VolgridError(f"expected a 3-D grid, got shape {v.shape}")
        if min(v.shape) < 1:
            raise VolgridError(f"dims must be >= 1, got {v.shape}")
        self.voxels = np.ascontiguousarray(v, dtype=self.dtype)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise VolgridError(f"spacing must be three positive numbers, got {self.spacing}")

    @property
    def dims(self) -> Dims:
        return tuple(int(d) for d in self.voxels.shape)

    def with_voxels(self, voxels: np.ndarray, spacing=None):
        return replace(self, voxels=voxels, spacing=self.spacing if spacing is None else spacing)

    def __eq__(self, other):
        return (
            type(self) is type(other)
            and self.spacing == other.spacing
            and np.array_equal(self.voxels, other.voxels)
        )


@dataclass(eq=False)
class Volume(Grid):
    """Scan in Hounsfield units (int32)."""

    hu_regime: str | None = None

    dtype = np.int32
    dtype_tag = "i32"
    kind = "volume"

    def __eq__(self, other):
        return super().__eq__(other) and self.hu_regime == other.hu_regime


@dataclass(eq=False)
class NormVolume(Grid):
    dtype = np.float32
    dtype_tag = "f32"
    kind = "norm"

    def __post_init__(self):
        super().__post_init__()
        if self.voxels.size and (self.voxels.min() < 0 or self.voxels.max() > 1):
            raise VolgridError("NormVolume voxels must lie in [0, 1]")


@dataclass(eq=False)
class ProbMap(Grid):
    dtype = np.float32
    dtype_tag = "f32"
    kind = "prob"

    def __post_init__(self):
        super().__post_init__()
        if self.voxels.size and (self.voxels.min() < 0 or self.voxels.max() > 1):
            raise VolgridError("ProbMap voxels must lie in [0, 1]")


@dataclass(eq=False)
class BinaryMask(Grid):
    dtype = np.uint8
    dtype_tag = "u8"
    kind = "mask"

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.dtype == bool:
            v = v.astype(np.uint8)
        elif v.size and not np.isin(v, (0, 1)).all():
            raise VolgridError("BinaryMask voxels must be 0 or 1")
        self.voxels = v
        super().__post_init__()

    @property
    def count(self) -> int:
        return int(self.voxels.sum(dtype=np.int64))


_KINDS = {cls.kind: cls for cls in (Volume, NormVolume, ProbMap, BinaryMask)}
_DTYPES = {"i32": np.dtype("<i4"), "u8": np.dtype("u1"), "f32": np.dtype("<f4")}


# ---------------------------------------------------------------------------
# VOLZ format


def save_volume(v: Grid, path) -> None:
    header = {
        "dims": list(v.dims),
        "spacing": list(v.spacing),
        "dtype": v.dtype_tag,
        "order": "xfastest",
        "kind": v.kind,
    }
    payload = v.voxels.astype(_DTYPES[v.dtype_tag], copy=False).tobytes(order="F")
    try:
        with open(path, "wb") as f:
            f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            f.write(payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_volume(path) -> Grid:
    """Read a VOLZ file. The grid class follows the header's ``kind`` key when
    present, otherwise the dtype (``f32`` defaults to :class:`NormVolume`)."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise MalformedHeader("missing header terminator")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(str(exc)) from exc
    if not isinstance(header, dict):
        raise MalformedHeader("header is not a JSON object")
    for key in ("dims", "spacing", "dtype", "order"):
        if key not in header:
            raise MalformedHeader(f"missing key {key!r}")
    dims, spacing = header["dims"], header["spacing"]
    if (
        not isinstance(dims, list)
        or len(dims) != 3
        or not all(isinstance(d, int) and d >= 1 for d in dims)
    ):
        raise MalformedHeader(f"bad dims {dims!r}")
    if not isinstance(spacing, list) or len(spacing) != 3:
        raise MalformedHeader(f"bad spacing {spacing!r}")
    if header["order"] != "xfastest":
        raise MalformedHeader(f"unsupported order {header['order']!r}")
    tag = header["dtype"]
    if tag not in _DTYPES:
        raise UnsupportedDtype(f"dtype {tag!r}")
    dt = _DTYPES[tag]
    n = dims[0] * dims[1] * dims[2]
    payload = raw[nl + 1:]
    if len(payload) != n * dt.itemsize:
        raise PayloadSizeMismatch(
            f"header promises {n} voxels ({n * dt.itemsize} bytes), payload has {len(payload)} bytes"
        )
    arr = np.frombuffer(payload, dtype=dt).reshape(dims, order="F")
    kind = header.get("kind")
    if kind is None:
        cls = {"i32": Volume, "u8": BinaryMask, "f32": NormVolume}[tag]
    else:
        if kind not in _KINDS:
            raise MalformedHeader(f"unknown kind {kind!r}")
        cls = _KINDS[kind]
        if cls.dtype_tag != tag:
            raise MalformedHeader(f"kind {kind!r} does not match dtype {tag!r}")
    return cls(voxels=arr.astype(cls.dtype), spacing=tuple(spacing))


# ---------------------------------------------------------------------------
# histogram


@dataclass(frozen=True)
class Histogram:
    bin_width: int
    origin: int
    counts: np.ndarray

    def __post_init__(self):
        if self.bin_width < 1:
            raise VolgridError("bin_width must be >= 1")

    @property
    def centers(self) -> np.ndarray:
        return self.origin + (np.arange(len(self.counts)) + 0.5) * self.bin_width

    @property
    def total(self) -> int:
        return int(np.sum(self.counts, dtype=np.int64))


def compute_histogram(v: Volume, bin_width: int = 10) -> Histogram:
    bin_width = int(bin_width)
    if bin_width < 1:
        raise VolgridError("bin_width must be >= 1")
    x = v.voxels.astype(np.int64).ravel()
    origin = int(x.min())
    counts = np.bincount((x - origin) // bin_width).astype(np.int64)
    return Histogram(bin_width=bin_width, origin=origin, counts=counts)


# ---------------------------------------------------------------------------
# resampling


def source_coords(n_in: int, n_out: int) -> np.ndarray:
    """Voxel-centre source positions for each output index, clamped to the input."""
    dst = np.arange(n_out, dtype=np.float64)
    return np.clip((dst + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1)


def linear_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix of 1-D linear interpolation weights."""
    src = source_coords(n_in, n_out)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - t)
    np.add.at(m, (rows, i1), t)
    return m


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    src = source_coords(n_in, n_out)
    return np.minimum(np.floor(src + 0.5).astype(np.int64), n_in - 1)


def trilinear(arr: np.ndarray, out_dims: Sequence[int]) -> np.ndarray:
    """Separable trilinear resize of a 3-D float array (float64 result)."""
    a = np.asarray(arr, dtype=np.float64)
    mx, my, mz = (linear_weights(n, m) for n, m in zip(a.shape, out_dims))
    a = np.tensordot(mx, a, axes=(1, 0))
    a = np.tensordot(my, a, axes=(1, 1)).transpose(1, 0, 2)
    a = a @ mz.T
    return a


def resample(v: Grid, out_dims: Sequence[int], mode: str = "trilinear") -> Grid:
    out_dims = tuple(int(d) for d in out_dims)
    if len(out_dims) != 3 or min(out_dims) < 1:
        raise VolgridError(f"out_dims must be three positive ints, got {out_dims}")
    if mode not in ("trilinear", "nearest"):
        raise VolgridError(f"unknown mode {mode!r}")
    if mode == "trilinear" and isinstance(v, BinaryMask):
        raise ModeLabelMismatch("trilinear resampling of a BinaryMask; use mode='nearest'")
    spacing = tuple(s * n / m for s, n, m in zip(v.spacing, v.dims, out_dims))
    if mode == "nearest":
        ix, iy, iz = (nearest_indices(n, m) for n, m in zip(v.dims, out_dims))
        out = v.voxels[np.ix_(ix, iy, iz)]
    else:
        out = trilinear(v.voxels, out_dims)
        if isinstance(v, Volume):
            out = np.rint(out)
        elif isinstance(v, (NormVolume, ProbMap)):
            out = np.clip(out, 0.0, 1.0)
    return v.with_voxels(out.astype(v.dtype), spacing=spacing)


# ---------------------------------------------------------------------------
# boxes


@dataclass(frozen=True)
class Box:
    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(int(a) for a in self.lo))
        object.__setattr__(self, "hi", tuple(int(a) for a in self.hi))
        if not all(a < b for a, b in zip(self.lo, self.hi)):
            raise VolgridError(f"empty box lo={self.lo} hi={self.hi}")

    @property
    def dims(self) -> Dims:
        return tuple(b - a for a, b in zip(self.lo, self.hi))

    def expand(self, margin: int) -> "Box":
        return Box(tuple(a - margin for a in self.lo), tuple(b + margin for b in self.hi))

    def clip(self, dims: Sequence[int]) -> "Box":
        return Box(
            tuple(max(a, 0) for a in self.lo),
            tuple(min(b, d) for b, d in zip(self.hi, dims)),
        )

    def inside(self, dims: Sequence[int]) -> bool:
        return all(a >= 0 for a in self.lo) and all(b <= d for b, d in zip(self.hi, dims))

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(a, b) for a, b in zip(self.lo, self.hi))


def crop_pad(v: Grid, box: Box, fill=0) -> Grid:
    out = np.full(box.dims, fill, dtype=v.dtype)
    src = box.clip(v.dims) if _overlaps(box, v.dims) else None
    if src is not None:
        dst = tuple(slice(a - b0, c - b0) for a, c, b0 in zip(src.lo, src.hi, box.lo))
        out[dst] = v.voxels[src.slices]
    return v.with_voxels(out)


def _overlaps(box: Box, dims) -> bool:
    return all(a < d and b > 0 for a, b, d in zip(box.lo, box.hi, dims))


def mask_bounding_box(m: BinaryMask) -> Box | None:
    """Tightest box around the set voxels, or ``None`` for an empty mask."""
    v = m.voxels
    if not v.any():
        return None
    lo, hi = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        idx = np.flatnonzero(v.any(axis=other))
        lo.append(idx[0])
        hi.append(idx[-1] + 1)
    return Box(tuple(lo), tuple(hi))


# ---------------------------------------------------------------------------
# polygon annotations


@dataclass
class SlicePolygon:
    z: int
    pts: np.ndarray  # (k, 2) float (x, y) vertices in voxel space

    def __post_init__(self):
        self.z = int(self.z)
        self.pts = np.asarray(self.pts, dtype=np.float64).reshape(-1, 2)


@dataclass
class PolygonAnnotation:
    left: list[SlicePolygon] = field(default_factory=list)
    right: list[SlicePolygon] = field(default_factory=list)

    def to_json(self) -> dict:
        def enc(polys):
            return [{"z": p.z, "pts": p.pts.tolist()} for p in polys]

        return {"left": enc(self.left), "right": enc(self.right)}

    @classmethod
    def from_json(cls, obj: dict) -> "PolygonAnnotation":
        def dec(items):
            return [SlicePolygon(z=it["z"], pts=it["pts"]) for it in items]

        return cls(left=dec(obj.get("left", [])), right=dec(obj.get("right", [])))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "PolygonAnnotation":
        return cls.from_json(json.loads(Path(path).read_text()))


def fill_polygon(pts: np.ndarray, nx: int, ny: int) -> np.ndarray:
    """Scanline even-odd fill sampled at voxel centres; returns bool (nx, ny)."""
    pts = np.asarray(pts, dtype=np.float64)
    if len(pts) < 3:
        raise DegeneratePolygon(f"polygon with {len(pts)} vertices")
    out = np.zeros((nx, ny), dtype=bool)
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    # half-open rule on y keeps vertices on a scanline from being counted twice
    for j in range(ny):
        yc = j + 0.5
        crosses = (y0 <= yc) != (y1 <= yc)
        if not crosses.any():
            continue
        xs = x0[crosses] + (yc - y0[crosses]) * (x1[crosses] - x0[crosses]) / (
            y1[crosses] - y0[crosses]
        )
        xs.sort()
        for a, b in zip(xs[0::2], xs[1::2]):
            # centres with a <= i + 0.5 < b, the crossing-number convention
            i_lo = max(int(np.ceil(a - 0.5)), 0)
            i_hi = min(int(np.ceil(b - 0.5)) - 1, nx - 1)
            if i_lo <= i_hi:
                out[i_lo:i_hi + 1, j] = True
    return out


def rasterize_polygons(ann: PolygonAnnotation, dims: Sequence[int]) -> tuple[BinaryMask, BinaryMask]:
    nx, ny, nz = dims

    def raster(polys: Iterable[SlicePolygon]) -> BinaryMask:
        m = np.zeros((nx, ny, nz), dtype=bool)
        for p in polys:
            if not 0 <= p.z < nz:
                raise VolgridError(f"slice index {p.z} outside depth {nz}")
            m[:, :, p.z] |= fill_polygon(p.pts, nx, ny)
        return BinaryMask(m)

    return raster(ann.left), raster(ann.right)
