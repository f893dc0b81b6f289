"""Synthetic mandible phantoms with exact canal ground truth.

Geometry lives in continuous voxel coordinates where voxel ``i`` spans
``[i, i + 1)``. A parabolic jaw arch of bone is extruded over a band of
slices; two tubular canals follow the arch, one per side of the mid-plane.
Intensities are built relative to soft tissue and then mapped into one of
three scanner regimes by an integer offset (a multiple of 10 HU) and an
optional contrast scale.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .volgrid import (
    BinaryMask,
    PolygonAnnotation,
    SlicePolygon,
    Volume,
    save_volume,
)

# name -> (lowest HU, highest HU, offset of soft tissue, contrast scale)
REGIMES = {
    "TypeA": (-1000, 1000, -400, 1),
    "TypeB": (-1000, 2000, 200, 1),
    "TypeC": (0, 5000, 1000, 2),
}

SOFT_TISSUE_HU = 0.0
BONE_HU = 850.0
BONE_MODULATION_HU = 80.0
CANAL_HU = 300.0
NOISE_CLIP_SIGMAS = 4.0


class SpecInvalid(ValueError):
    pass


@dataclass
class PhantomSpec:
    seed: int = 0
    dims: tuple[int, int, int] = (96, 96, 64)
    regime: str = "TypeA"
    canal_radius_range: tuple[float, float] = (1.5, 3.5)
    left_right_asymmetry: float = 0.2
    noise_sigma: float = 40.0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.canal_radius_range = tuple(float(r) for r in self.canal_radius_range)
        if len(self.dims) != 3 or min(self.dims) < 32:
            raise SpecInvalid(f"dims must be >= 32 each, got {self.dims}")
        if self.regime not in REGIMES:
            raise SpecInvalid(f"unknown regime {self.regime!r}")
        lo, hi = self.canal_radius_range
        if not 0 < lo <= hi:
            raise SpecInvalid(f"bad canal radius range {self.canal_radius_range}")
        if not 0 <= self.left_right_asymmetry < 1:
            raise SpecInvalid("asymmetry must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise SpecInvalid("noise_sigma must be >= 0")

    def to_json(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["canal_radius_range"] = list(self.canal_radius_range)
        return d


@dataclass
class Phantom:
    volume: Volume
    gt_left: BinaryMask
    gt_right: BinaryMask
    annotation: PolygonAnnotation
    relative_hu: np.ndarray  # noiseless intensities before the regime mapping
    bone: np.ndarray  # bool, bone region (canals included)


def _centres(n):
    return np.arange(n) + 0.5


def _tube_mask(dims, points, radius):
    """Voxels whose centre lies within ``radius`` of the densely sampled curve."""
    lo = np.maximum(np.floor(points.min(axis=0) - radius - 1).astype(int), 0)
    hi = np.minimum(np.ceil(points.max(axis=0) + radius + 1).astype(int), dims)
    grids = np.meshgrid(*(np.arange(a, b) + 0.5 for a, b in zip(lo, hi)), indexing="ij")
    centres = np.stack([g.ravel() for g in grids], axis=1)
    dist, _ = cKDTree(points).query(centres, distance_upper_bound=radius + 1e-9)
    mask = np.zeros(dims, dtype=bool)
    mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = (dist <= radius).reshape(grids[0].shape)
    return mask


def _convex_hull(pts):
    """Monotone-chain hull, counter-clockwise, without repeated end point."""
    pts = sorted(set(map(tuple, pts)))
    if len(pts) < 3:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def _slice_polygons(mask):
    polys = []
    for z in range(mask.shape[2]):
        sl = mask[:, :, z]
        if not sl.any():
            continue
        labels, n = ndimage.label(sl, structure=np.ones((3, 3)))
        for lab in range(1, n + 1):
            ii, jj = np.nonzero(labels == lab)
            corners = np.concatenate(
                [np.stack([ii + dx, jj + dy], axis=1) for dx in (0, 1) for dy in (0, 1)]
            )
            hull = _convex_hull(corners.astype(float))
            polys.append(SlicePolygon(z=z, pts=np.array(hull, dtype=float)))
    return polys


def generate_phantom(spec: PhantomSpec) -> Phantom:
    rng = np.random.default_rng(spec.seed)
    nx, ny, nz = spec.dims
    cx = nx / 2
    asym = spec.left_right_asymmetry
    r_lo, r_hi = spec.canal_radius_range

    # jaw arch: y = apex + a * (x - cx)^2 for |x - cx| <= half_span
    apex = ny * (0.22 + rng.uniform(-0.03, 0.03))
    arm = ny * (0.80 + rng.uniform(-0.04, 0.04))
    half_span = nx * 0.40
    a = (arm - apex) / half_span ** 2
    band = rng.uniform(5.5, 7.0)
    z_lo = nz * (0.28 + rng.uniform(-0.04, 0.04))
    z_hi = z_lo + nz * 0.40

    u = np.linspace(-half_span, half_span, 4001)
    arch = np.stack([cx + u, apex + a * u ** 2], axis=1)
    gx, gy = np.meshgrid(_centres(nx), _centres(ny), indexing="ij")
    d_plane, _ = cKDTree(arch).query(np.stack([gx.ravel(), gy.ravel()], axis=1))
    in_plane = (d_plane <= band).reshape(nx, ny)
    zc = _centres(nz)
    in_z = (zc >= z_lo) & (zc <= z_hi)
    bone = in_plane[:, :, None] & in_z[None, None, :]

    # canals: one per side along the arch, with per-side radius/length jitter
    z_mid = (z_lo + z_hi) / 2
    drop = rng.uniform(2.0, 5.0)
    r_base = rng.uniform(r_lo, r_hi)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    canals = {}
    for side, sign in (("left", -1.0), ("right", 1.0)):
        radius = float(np.clip(r_base * (1 + rng.uniform(-asym, asym)), r_lo, r_hi))
        near = nx * 0.12 * (1 + rng.uniform(-asym, asym))
        far = min(nx * 0.36 * (1 + rng.uniform(-asym / 2, asym / 2)), half_span - 1)
        s = np.linspace(near, far, 2000)
        pts = np.stack(
            [cx + sign * s, apex + a * s ** 2, z_mid + drop * ((s - near) / (far - near) - 0.5)],
            axis=1,
        )
        canals[side] = _tube_mask(spec.dims, pts, radius)

    gx3 = _centres(nx)[:, None, None]
    gz3 = zc[None, None, :]
    modulation = np.sin(3 * np.pi * gx3 / nx + phase[0]) * np.cos(2 * np.pi * gz3 / nz + phase[1])
    rel = np.full(spec.dims, SOFT_TISSUE_HU)
    rel = np.where(bone, BONE_HU + BONE_MODULATION_HU * modulation, rel)
    canal_any = canals["left"] | canals["right"]
    rel[canal_any] = CANAL_HU

    noise = rng.normal(0.0, spec.noise_sigma, size=spec.dims)
    clip = NOISE_CLIP_SIGMAS * spec.noise_sigma
    noise = np.clip(noise, -clip, clip)

    lo, hi, offset, scale = REGIMES[spec.regime]
    hu = np.rint((rel + noise) * scale).astype(np.int64) + offset
    hu = np.clip(hu, lo, hi).astype(np.int32)

    ann = PolygonAnnotation(left=_slice_polygons(canals["left"]), right=_slice_polygons(canals["right"]))
    return Phantom(
        volume=Volume(hu, hu_regime=spec.regime),
        gt_left=BinaryMask(canals["left"]),
        gt_right=BinaryMask(canals["right"]),
        annotation=ann,
        relative_hu=rel,
        bone=bone,
    )


def write_case(phantom: Phantom, spec: PhantomSpec, case_dir) -> None:
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    save_volume(phantom.volume, case_dir / "volume.volz")
    save_volume(phantom.gt_left, case_dir / "gt_left.volz")
    save_volume(phantom.gt_right, case_dir / "gt_right.volz")
    phantom.annotation.save(case_dir / "annotation.json")
    (case_dir / "spec.json").write_text(json.dumps(spec.to_json(), sort_keys=True))


def generate_dataset(
    n: int,
    base_seed: int,
    out_dir,
    regimes=("TypeA", "TypeB", "TypeC"),
    n_test: int = 0,
    **spec_kwargs,
) -> dict:
    """Write ``n`` phantom cases plus ``manifest.json``; the last ``n_test`` are held out."""
    if n < 1:
        raise SpecInvalid("n must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cases = []
    for i in range(n):
        seed = base_seed + i
        spec = PhantomSpec(seed=seed, regime=regimes[i % len(regimes)], **spec_kwargs)
        name = f"case_{i:04d}"
        write_case(generate_phantom(spec), spec, out_dir / name)
        cases.append(
            {
                "id": name,
                "dir": name,
                "seed": seed,
                "regime": spec.regime,
                "split": "test" if i >= n - n_test else "train",
            }
        )
    manifest = {"base_seed": base_seed, "cases": cases}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
