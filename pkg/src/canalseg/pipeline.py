"""Two-stage inference: whole-volume localisation, then per-side VOI refinement."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import postproc
from .nets import CoarseNet, FineNet, Net, load_net
from .volgrid import (
    BinaryMask,
    Box,
    NormVolume,
    ProbMap,
    Volume,
    crop_pad,
    mask_bounding_box,
    resample,
)
from .windowing import window_volume

SIDES = ("left", "right")


class UntrainedNet(RuntimeError):
    pass


class EmptySideMask(ValueError):
    pass


class BoxOutOfRange(ValueError):
    pass


class MissingSideWarning(UserWarning):
    pass


def _dims3(d):
    d = tuple(int(a) for a in d)
    if len(d) != 3 or min(d) < 1:
        raise ValueError(f"expected three positive dims, got {d}")
    return d


@dataclass
class PipelineConfig:
    coarse_input_dims: tuple[int, int, int] = (64, 64, 64)
    voi_margin: int = 8
    fine_dims: tuple[tuple[int, int, int], ...] = ((48, 48, 48), (32, 32, 32), (24, 24, 24))
    threshold: float = 0.5
    bin_width: int = 10

    def __post_init__(self):
        self.coarse_input_dims = _dims3(self.coarse_input_dims)
        self.fine_dims = tuple(_dims3(d) for d in self.fine_dims)
        if len(self.fine_dims) != 3:
            raise ValueError("fine_dims needs base plus two auxiliary dims")
        if int(self.voi_margin) != self.voi_margin or self.voi_margin < 0:
            raise ValueError("voi_margin must be an integer >= 0")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.bin_width < 1:
            raise ValueError("bin_width must be >= 1")

    @property
    def base_dims(self):
        return self.fine_dims[0]

    def to_dict(self) -> dict:
        return {
            "coarse_input_dims": list(self.coarse_input_dims),
            "voi_margin": self.voi_margin,
            "fine_dims": [list(d) for d in self.fine_dims],
            "threshold": self.threshold,
            "bin_width": self.bin_width,
        }


@dataclass
class VoiRecord:
    side: str
    box: Box
    base_dims: tuple[int, int, int]
    prob: ProbMap | None = None
    aux_dims: tuple = field(default=())

    def __post_init__(self):
        if self.side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}")
        self.base_dims = _dims3(self.base_dims)
        if self.prob is not None and self.prob.dims != self.base_dims:
            raise ValueError(f"prob dims {self.prob.dims} != base dims {self.base_dims}")

    def sidecar(self) -> dict:
        return {
            "side": self.side,
            "box_lo": list(self.box.lo),
            "box_hi": list(self.box.hi),
            "base_dims": list(self.base_dims),
        }

    def save_sidecar(self, path) -> None:
        Path(path).write_text(json.dumps(self.sidecar(), sort_keys=True))

    @classmethod
    def load_sidecar(cls, path, prob: ProbMap | None = None) -> "VoiRecord":
        d = json.loads(Path(path).read_text())
        return cls(d["side"], Box(d["box_lo"], d["box_hi"]), d["base_dims"], prob)


def _require_trained(net: Net, require: bool) -> None:
    if require and net.step_count == 0:
        raise UntrainedNet(f"{net.arch} net has never been updated; train it or load a checkpoint")


def _tensor(v) -> np.ndarray:
    return np.ascontiguousarray(v.voxels, dtype=np.float32)[None, None]


def coarse_segment(v: NormVolume, net: CoarseNet, cfg: PipelineConfig, require_trained=True) -> ProbMap:
    _require_trained(net, require_trained)
    small = resample(v, cfg.coarse_input_dims, "trilinear")
    main, _ = net.forward(_tensor(small), train=False)
    full = resample(ProbMap(main[0, 0], small.spacing), v.dims, "trilinear")
    return ProbMap(full.voxels, v.spacing)


def split_left_right(coarse: ProbMap, threshold: float = 0.5) -> tuple[BinaryMask, BinaryMask]:
    """Threshold, then send each 26-connected component to the side of its centroid.

    Components with voxels on both sides of the x midplane are cut there.
    """
    fg = coarse.voxels >= threshold
    nx = fg.shape[0]
    left_half = (np.arange(nx) + 0.5 < nx / 2)[:, None, None]
    labels, sizes = postproc.connected_components(fg)
    left = np.zeros(fg.shape, dtype=bool)
    right = np.zeros(fg.shape, dtype=bool)
    for k in range(1, sizes.size + 1):
        comp = labels == k
        xs = np.nonzero(comp.any(axis=(1, 2)))[0]
        straddles = xs[0] + 0.5 < nx / 2 <= xs[-1] + 0.5
        if straddles:
            left |= comp & left_half
            right |= comp & ~left_half
        elif xs.mean() + 0.5 < nx / 2:
            left |= comp
        else:
            right |= comp
    return BinaryMask(left, coarse.spacing), BinaryMask(right, coarse.spacing)


def voi_box(side_mask: BinaryMask, margin: int) -> Box:
    box = mask_bounding_box(side_mask)
    if box is None:
        raise EmptySideMask("cannot place a VOI around an empty mask")
    return box.expand(margin).clip(side_mask.dims)


def extract_voi(v: NormVolume, side_mask: BinaryMask, cfg: PipelineConfig, side="left"):
    """Returns (VoiRecord without prob, VOI resampled to the base dims)."""
    box = voi_box(side_mask, cfg.voi_margin)
    crop = crop_pad(v, box)
    rec = VoiRecord(side, box, cfg.base_dims, aux_dims=cfg.fine_dims[1:])
    return rec, resample(crop, cfg.base_dims, "trilinear")


def make_multiscale_inputs(voi: NormVolume, cfg: PipelineConfig):
    _, d2, d3 = cfg.fine_dims
    return voi, resample(voi, d2, "trilinear"), resample(voi, d3, "trilinear")


def fine_segment(inputs, net: FineNet, require_trained=True) -> ProbMap:
    _require_trained(net, require_trained)
    x1, x2, x3 = inputs
    out = net.forward(_tensor(x1), _tensor(x2), _tensor(x3), train=False)
    return ProbMap(out[0, 0], x1.spacing)


def merge_to_full(vois, full_dims, cfg: PipelineConfig | None = None, spacing=(1.0, 1.0, 1.0)) -> BinaryMask:
    """Paste each VOI probability back into its box (max on overlap) and threshold."""
    threshold = cfg.threshold if cfg else 0.5
    full_dims = _dims3(full_dims)
    acc = np.zeros(full_dims, dtype=np.float32)
    for rec in vois:
        if not rec.box.inside(full_dims):
            raise BoxOutOfRange(f"box {rec.box} outside volume {full_dims}")
        patch = resample(rec.prob, rec.box.dims, "trilinear").voxels
        region = acc[rec.box.slices]
        np.maximum(region, patch, out=region)
    return BinaryMask(acc >= threshold, spacing)


@dataclass
class PipelineResult:
    full: BinaryMask
    left: BinaryMask
    right: BinaryMask
    vois: list
    norm: NormVolume | None = None
    coarse: ProbMap | None = None


def _as_net(net_or_path, arch) -> Net:
    net = net_or_path if isinstance(net_or_path, Net) else load_net(net_or_path)
    if net.arch != arch:
        raise ValueError(f"expected a {arch} checkpoint, got {net.arch}")
    return net


def coarse_stage(v: Volume, coarse_net, cfg: PipelineConfig):
    """Windowing through VOI extraction. Returns (norm, coarse prob, [(rec, voi)])."""
    net = _as_net(coarse_net, "coarse")
    norm, _ = window_volume(v, cfg.bin_width)
    coarse = coarse_segment(norm, net, cfg)
    vois = []
    for side, mask in zip(SIDES, split_left_right(coarse, cfg.threshold)):
        if not mask.voxels.any():
            warnings.warn(f"coarse stage found no {side} canal", MissingSideWarning, stacklevel=2)
            continue
        vois.append(extract_voi(norm, mask, cfg, side))
    return norm, coarse, vois


def fine_stage(vois, fine_net, cfg: PipelineConfig):
    net = _as_net(fine_net, "fine")
    out = []
    for rec, voi in vois:
        rec.prob = fine_segment(make_multiscale_inputs(voi, cfg), net)
        out.append(rec)
    return out


def merge_stage(records, full_dims, cfg: PipelineConfig, spacing=(1.0, 1.0, 1.0)):
    """Per-side merge and refinement; returns (full, left, right)."""
    masks = {}
    for side in SIDES:
        recs = [r for r in records if r.side == side]
        m = merge_to_full(recs, full_dims, cfg, spacing)
        masks[side] = postproc.refine_canal(m) if recs else m
    full = BinaryMask(masks["left"].voxels | masks["right"].voxels, spacing)
    return full, masks["left"], masks["right"]


def run_pipeline(v: Volume, coarse_ckpt, fine_ckpt, cfg: PipelineConfig | None = None) -> PipelineResult:
    """Volume in, refined (full, left, right) canal masks out.

    Checkpoints may be paths or already loaded nets.
    """
    cfg = cfg or PipelineConfig()
    norm, coarse, vois = coarse_stage(v, coarse_ckpt, cfg)
    records = fine_stage(vois, fine_ckpt, cfg) if vois else []
    full, left, right = merge_stage(records, v.dims, cfg, v.spacing)
    return PipelineResult(full, left, right, records, norm, coarse)
