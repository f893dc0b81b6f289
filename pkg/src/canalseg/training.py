"""Training loops and sample preparation for both networks."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nets import CoarseNet, FineNet, NetConfig, supervised_loss
from .pipeline import PipelineConfig, make_multiscale_inputs, voi_box
from .tensorkit import Adam, dice_loss
from .volgrid import BinaryMask, Volume, crop_pad, load_volume, resample
from .windowing import window_volume


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 2
    epochs_coarse: int = 20
    epochs_fine: int = 30
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1 or self.epochs_coarse < 1 or self.epochs_fine < 1:
            raise ValueError("batch_size and epochs must be >= 1")


@dataclass
class Case:
    name: str
    volume: Volume
    gt_left: BinaryMask
    gt_right: BinaryMask
    regime: str = ""
    split: str = "train"


def load_case(case_dir, name=None, regime="", split="train") -> Case:
    d = Path(case_dir)
    return Case(
        name or d.name,
        load_volume(d / "volume.volz"),
        load_volume(d / "gt_left.volz"),
        load_volume(d / "gt_right.volz"),
        regime,
        split,
    )


def load_dataset(root, split=None) -> list[Case]:
    """Cases listed in ``root/manifest.json``, optionally filtered by split."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    return [
        load_case(root / c["dir"], c["id"], c.get("regime", ""), c.get("split", "train"))
        for c in manifest["cases"]
        if split is None or c.get("split", "train") == split
    ]


def coarse_sample(case: Case, pcfg: PipelineConfig):
    """(input, target) pair at the coarse grid; channel axis included."""
    norm, _ = window_volume(case.volume, pcfg.bin_width)
    x = resample(norm, pcfg.coarse_input_dims, "trilinear").voxels
    both = BinaryMask(case.gt_left.voxels | case.gt_right.voxels, case.volume.spacing)
    g = resample(both, pcfg.coarse_input_dims, "nearest").voxels
    return x[None].astype(np.float32), g[None].astype(np.float32)


def fine_samples(case: Case, pcfg: PipelineConfig):
    """One (x1, x2, x3, target) tuple per side, VOIs placed around the true canal."""
    norm, _ = window_volume(case.volume, pcfg.bin_width)
    out = []
    for gt in (case.gt_left, case.gt_right):
        if not gt.voxels.any():
            continue
        box = voi_box(gt, pcfg.voi_margin)
        voi = resample(crop_pad(norm, box), pcfg.base_dims, "trilinear")
        g = resample(crop_pad(gt, box), pcfg.base_dims, "nearest").voxels
        xs = make_multiscale_inputs(voi, pcfg)
        out.append(tuple(x.voxels[None].astype(np.float32) for x in xs) + (g[None].astype(np.float32),))
    return out


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _log(logger, msg):
    if logger is not None:
        logger(msg)


def train_coarse(samples, tcfg: TrainConfig, ncfg: NetConfig | None = None, logger=None) -> tuple[CoarseNet, list]:
    """Deeply supervised dice training; returns the net and per-epoch mean loss."""
    net = CoarseNet(ncfg or NetConfig(seed=tcfg.seed))
    opt = Adam(net.parameters(), lr=tcfg.lr)
    xs = np.stack([s[0] for s in samples])
    gs = np.stack([s[1] for s in samples])
    rng = np.random.default_rng(tcfg.seed)
    history = []
    for epoch in range(tcfg.epochs_coarse):
        t0, losses = time.perf_counter(), []
        for idx in _batches(len(samples), tcfg.batch_size, rng):
            main, aux = net.forward(xs[idx], train=True)
            loss, dmain, daux = supervised_loss(main, aux, gs[idx], net.config.supervision_weights)
            net.backward(dmain, daux)
            opt.step()
            losses.append(loss)
        history.append(float(np.mean(losses)))
        _log(logger, f"coarse epoch {epoch + 1}/{tcfg.epochs_coarse} loss {history[-1]:.4f} ({time.perf_counter() - t0:.1f}s)")
    return net, history


def train_fine(samples, tcfg: TrainConfig, ncfg: NetConfig | None = None, logger=None) -> tuple[FineNet, list]:
    net = FineNet(ncfg or NetConfig(input_dims=samples[0][0].shape[1:], seed=tcfg.seed))
    opt = Adam(net.parameters(), lr=tcfg.lr)
    x1, x2, x3, gs = (np.stack([s[i] for s in samples]) for i in range(4))
    rng = np.random.default_rng(tcfg.seed)
    history = []
    for epoch in range(tcfg.epochs_fine):
        t0, losses = time.perf_counter(), []
        for idx in _batches(len(samples), tcfg.batch_size, rng):
            out = net.forward(x1[idx], x2[idx], x3[idx], train=True)
            loss, dout = dice_loss(out, gs[idx])
            net.backward(dout)
            opt.step()
            losses.append(loss)
        history.append(float(np.mean(losses)))
        _log(logger, f"fine epoch {epoch + 1}/{tcfg.epochs_fine} loss {history[-1]:.4f} ({time.perf_counter() - t0:.1f}s)")
    return net, history
