"""Binary morphology, connected components and canal refinement."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volgrid import BinaryMask

OPS = ("dilate", "erode", "open", "close")

# fragments below this fraction of the kept component are treated as noise
SPECKLE_FRACTION = 1e-3


@dataclass(frozen=True)
class StructElem:
    shape: str = "box"
    radius: int = 1

    def __post_init__(self):
        if self.shape not in ("box", "cross"):
            raise ValueError(f"unknown structuring element {self.shape!r}")
        if int(self.radius) != self.radius or self.radius < 1:
            raise ValueError("radius must be an integer >= 1")

    def footprint(self) -> np.ndarray:
        """Boolean (2r+1)^3 array; the cross grows as an L1 ball."""
        r = int(self.radius)
        if self.shape == "box":
            return np.ones((2 * r + 1,) * 3, dtype=bool)
        return ndimage.iterate_structure(ndimage.generate_binary_structure(3, 1), r)


BOX1 = StructElem("box", 1)
CROSS1 = StructElem("cross", 1)


def _as_bool(m) -> np.ndarray:
    return (m.voxels if isinstance(m, BinaryMask) else np.asarray(m)).astype(bool)


def _dilate(a, fp):
    return ndimage.binary_dilation(a, structure=fp, border_value=0)


def _erode(a, fp):
    return ndimage.binary_erosion(a, structure=fp, border_value=0)


def morph(m: BinaryMask, op: str, se: StructElem = BOX1) -> BinaryMask:
    a, fp = _as_bool(m), se.footprint()
    if op == "dilate":
        out = _dilate(a, fp)
    elif op == "erode":
        out = _erode(a, fp)
    elif op == "open":
        out = _dilate(_erode(a, fp), fp)
    elif op == "close":
        out = _erode(_dilate(a, fp), fp)
    else:
        raise ValueError(f"unknown morphological op {op!r}; expected one of {OPS}")
    spacing = m.spacing if isinstance(m, BinaryMask) else (1.0, 1.0, 1.0)
    return BinaryMask(out, spacing)


def connected_components(m, connectivity: int = 26):
    """Label 26- (or 6-) connected foreground.

    Labels run 1..n in order of each component's first voxel in storage
    order, where x varies fastest. Returns ``(labels int32, sizes)`` with
    ``sizes[k - 1]`` the voxel count of label ``k``.
    """
    if connectivity not in (6, 18, 26):
        raise ValueError("connectivity must be 6, 18 or 26")
    rank = {6: 1, 18: 2, 26: 3}[connectivity]
    a = _as_bool(m)
    # ndimage numbers components in C order; transposing makes x the fastest axis
    labels_t, n = ndimage.label(a.T, structure=ndimage.generate_binary_structure(3, rank))
    labels = np.ascontiguousarray(labels_t.T).astype(np.int32)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    return labels, sizes


def _keep_largest(a, x_mid=None):
    labels, sizes = connected_components(a)
    if sizes.size == 0:
        return a
    if x_mid is None:
        return labels == 1 + int(np.argmax(sizes))
    # two-sided mask: keep the largest component on each side of the midplane
    keep = np.zeros(a.shape, dtype=bool)
    xs = ndimage.center_of_mass(np.ones(a.shape), labels, range(1, sizes.size + 1))
    left = [k for k, c in enumerate(xs, 1) if c[0] + 0.5 < x_mid]
    right = [k for k, c in enumerate(xs, 1) if c[0] + 0.5 >= x_mid]
    for group in (left, right):
        if group:
            best = max(group, key=lambda k: (sizes[k - 1], -k))
            keep |= labels == best
    return keep


def refine_canal(m: BinaryMask, sides: int = 1) -> BinaryMask:
    """Bridge small gaps, keep the main canal body and strip noise.

    ``sides=1`` treats the mask as a single canal. ``sides=2`` keeps one
    body on each side of the x midplane.
    """
    if sides not in (1, 2):
        raise ValueError("sides must be 1 or 2")
    a = _as_bool(m)
    x_mid = a.shape[0] / 2 if sides == 2 else None
    closed = _erode(_dilate(a, BOX1.footprint()), BOX1.footprint())
    kept = _keep_largest(closed, x_mid)
    cross = CROSS1.footprint()
    opened = _dilate(_erode(kept, cross), cross)
    if not opened.any():
        # the canal is thinner than the opening element; keep it as is
        opened = kept
    labels, sizes = connected_components(opened)
    if sizes.size > sides:
        floor = SPECKLE_FRACTION * kept.sum()
        opened = np.isin(labels, 1 + np.flatnonzero(sizes >= floor))
    return BinaryMask(opened, m.spacing if isinstance(m, BinaryMask) else (1.0, 1.0, 1.0))
