"""``canalseg`` command line.

Exit status: 0 on success, 1 on usage errors, 2 when a command fails.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from dataclasses import replace
from pathlib import Path

from . import postproc
from .config import RunConfig, dumps_config, parse_config
from .metrics import METRIC_NAMES, evaluate_case, evaluate_dataset
from .nets import NetConfig, load_net, save_net
from .phantom import generate_dataset
from .pipeline import (
    SIDES,
    PipelineConfig,
    VoiRecord,
    coarse_stage,
    fine_stage,
    merge_stage,
    run_pipeline,
)
from .training import Case, coarse_sample, fine_samples, load_dataset, train_coarse, train_fine
from .volgrid import compute_histogram, load_volume, save_volume
from .windowing import apply_window, compute_window

# metric labels as they appear in the ablation table
ABLATION_ROWS = (("mIOU", "iou"), ("Precision", "precision"), ("Recall", "recall"),
                 ("Dice Score", "dice"), ("F1 Score", "f1"))
VARIANTS = (
    ("full", True, True),
    ("no-multiscale", False, True),
    ("no-residual", True, False),
    ("no-multiscale-no-residual", False, False),
)
STAGES = ("all", "coarse", "fine", "merge")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides the configured seed")
    common.add_argument("--out-dir", help="directory for outputs and the echoed config")
    common.add_argument("--threads", type=int, help="cap on BLAS threads")

    p = _Parser(prog="canalseg", description="Two-stage canal segmentation on CT volumes.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("phantom-gen", parents=[common], help="write a synthetic dataset")
    s.add_argument("--n-train", type=int)
    s.add_argument("--n-test", type=int)

    s = sub.add_parser("window", parents=[common], help="print the chosen window as JSON")
    s.add_argument("--input", required=True)

    for name in ("train-coarse", "train-fine"):
        s = sub.add_parser(name, parents=[common], help=f"{name.split('-')[1]} network training")
        s.add_argument("--data", help="dataset directory holding manifest.json")
        s.add_argument("--epochs", type=int)

    s = sub.add_parser("infer", parents=[common], help="segment one volume")
    s.add_argument("--input", required=True)
    s.add_argument("--coarse")
    s.add_argument("--fine")
    s.add_argument("--stage", choices=STAGES, default="all")

    s = sub.add_parser("postprocess", parents=[common], help="morphology on a mask file")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--op", choices=("refine",) + postproc.OPS, default="refine")
    s.add_argument("--element", choices=("box", "cross"), default="box")
    s.add_argument("--radius", type=int, default=1)

    s = sub.add_parser("eval", parents=[common], help="metrics over a dataset split")
    s.add_argument("--data")
    s.add_argument("--split", default="test")
    s.add_argument("--coarse")
    s.add_argument("--fine")
    s.add_argument("--pred-dir", help="evaluate saved predictions instead of running inference")

    s = sub.add_parser("ablate", parents=[common], help="fine-net multiscale/residual on-off grid")
    s.add_argument("--data")
    s.add_argument("--coarse")
    s.add_argument("--epochs", type=int, help="fine epochs per variant")
    return p


# ---------------------------------------------------------------------------
# helpers


def _load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.training = replace(cfg.training, seed=args.seed)
    return cfg


def _out_dir(args, cfg: RunConfig, required=True) -> Path | None:
    if not args.out_dir:
        if required:
            raise UsageError(f"{args.command}: --out-dir is required")
        return None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dumps_config(cfg))
    return out


def _pick(value, fallback, what, command):
    v = value or fallback
    if not v:
        raise UsageError(f"{command}: {what} is required")
    return v


def _require_file(path, what):
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _net_config(base: NetConfig, seed: int, **changes) -> NetConfig:
    d = base.to_dict()
    d.update(seed=seed, **changes)
    return NetConfig(**d)


# ---------------------------------------------------------------------------
# commands


def cmd_phantom_gen(args, cfg):
    out = _out_dir(args, cfg)
    ph = cfg.phantoms
    n_train = args.n_train if args.n_train is not None else ph.n_train
    n_test = args.n_test if args.n_test is not None else ph.n_test
    seed = args.seed if args.seed is not None else ph.base_seed
    manifest = generate_dataset(n_train + n_test, seed, out, ph.regimes, n_test=n_test, dims=ph.dims)
    _log(f"wrote {len(manifest['cases'])} cases to {out}")


def cmd_window(args, cfg):
    v = load_volume(_require_file(args.input, "input volume"))
    w = compute_window(compute_histogram(v, cfg.pipeline.bin_width))
    print(json.dumps({"wc": w.wc, "ww": w.ww}))
    out = _out_dir(args, cfg, required=False)
    if out:
        save_volume(apply_window(v, w), out / "norm.volz")


def cmd_train(args, cfg, arch):
    out = _out_dir(args, cfg)
    data = _pick(args.data, cfg.paths.data_dir, "--data", args.command)
    cases = load_dataset(data, "train")
    tcfg = cfg.training
    seed = tcfg.seed
    if arch == "coarse":
        if args.epochs:
            tcfg = replace(tcfg, epochs_coarse=args.epochs)
        samples = [coarse_sample(c, cfg.pipeline) for c in cases]
        net, hist = train_coarse(samples, tcfg, _net_config(cfg.coarse_net, seed), logger=_log)
    else:
        if args.epochs:
            tcfg = replace(tcfg, epochs_fine=args.epochs)
        samples = [s for c in cases for s in fine_samples(c, cfg.pipeline)]
        net, hist = train_fine(samples, tcfg, _net_config(cfg.fine_net, seed), logger=_log)
    save_net(net, out / f"{arch}.ckpt")
    (out / "history.json").write_text(json.dumps({"loss": hist}, indent=2))


def _vox_paths(out: Path, side: str):
    return out / f"voi_{side}.volz", out / f"voi_{side}.json", out / f"prob_{side}.volz"


def cmd_infer(args, cfg):
    out = _out_dir(args, cfg)
    v = load_volume(_require_file(args.input, "input volume"))
    pcfg = cfg.pipeline
    stage = args.stage
    coarse = fine = None
    if stage in ("all", "coarse"):
        coarse = _require_file(_pick(args.coarse, cfg.paths.coarse_ckpt, "--coarse", "infer"), "coarse checkpoint")
    if stage in ("all", "fine"):
        fine = _require_file(_pick(args.fine, cfg.paths.fine_ckpt, "--fine", "infer"), "fine checkpoint")

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if stage in ("all", "coarse"):
            _, prob, vois = coarse_stage(v, coarse, pcfg)
            save_volume(prob, out / "coarse_prob.volz")
            for side in SIDES:
                for p in _vox_paths(out, side):
                    p.unlink(missing_ok=True)
            for rec, voi in vois:
                vol_path, json_path, _ = _vox_paths(out, rec.side)
                save_volume(voi, vol_path)
                rec.save_sidecar(json_path)
    for w in caught:
        _log(f"warning: {w.message}")
    if stage == "coarse":
        return

    if stage in ("all", "fine"):
        vois = []
        for side in SIDES:
            vol_path, json_path, _ = _vox_paths(out, side)
            if json_path.exists():
                vois.append((VoiRecord.load_sidecar(json_path), load_volume(vol_path)))
        for rec in fine_stage(vois, fine, pcfg):
            save_volume(rec.prob, _vox_paths(out, rec.side)[2])
    if stage == "fine":
        return

    records = []
    for side in SIDES:
        _, json_path, prob_path = _vox_paths(out, side)
        if json_path.exists():
            records.append(VoiRecord.load_sidecar(json_path, load_volume(prob_path)))
    full, left, right = merge_stage(records, v.dims, pcfg, v.spacing)
    save_volume(full, out / "mask.volz")
    save_volume(left, out / "mask_left.volz")
    save_volume(right, out / "mask_right.volz")
    _log(f"left {left.count} voxels, right {right.count} voxels")


def cmd_postprocess(args, cfg):
    _out_dir(args, cfg, required=False)
    m = load_volume(_require_file(args.input, "input mask"))
    if args.op == "refine":
        out = postproc.refine_canal(m)
    else:
        out = postproc.morph(m, args.op, postproc.StructElem(args.element, args.radius))
    save_volume(out, args.output)


def _pipeline_predictions(cases: list[Case], coarse, fine, pcfg: PipelineConfig, pred_dir=None):
    preds = {}
    for c in cases:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            r = run_pipeline(c.volume, coarse, fine, pcfg)
        for w in caught:
            _log(f"warning: {c.name}: {w.message}")
        preds[c.name] = (r.left, r.right)
        if pred_dir is not None:
            d = Path(pred_dir) / c.name
            d.mkdir(parents=True, exist_ok=True)
            save_volume(r.left, d / "mask_left.volz")
            save_volume(r.right, d / "mask_right.volz")
    return preds


def summarize(cases: list[Case], preds: dict) -> dict:
    """Per-case reports plus macro means for left, right, overall and per-side pooled."""
    per_case, by_key = {}, {"left": [], "right": [], "overall": [], "per_side": []}
    for c in cases:
        left, right = preds[c.name]
        e = evaluate_case(left, right, c.gt_left, c.gt_right)
        per_case[c.name] = {k: e[k].to_dict() for k in ("left", "right", "overall")}
        per_case[c.name]["counts"] = e["counts"]
        for k in ("left", "right", "overall"):
            by_key[k].append(e[k])
        by_key["per_side"] += [e["left"], e["right"]]
    aggregate = {k: evaluate_dataset(v).to_dict() for k, v in by_key.items()}
    return {"cases": per_case, "aggregate": aggregate}


def cmd_eval(args, cfg):
    out = _out_dir(args, cfg)
    data = _pick(args.data, cfg.paths.data_dir, "--data", "eval")
    cases = load_dataset(data, args.split)
    if not cases:
        raise ValueError(f"no cases in split {args.split!r}")
    if args.pred_dir:
        preds = {
            c.name: (
                load_volume(Path(args.pred_dir) / c.name / "mask_left.volz"),
                load_volume(Path(args.pred_dir) / c.name / "mask_right.volz"),
            )
            for c in cases
        }
    else:
        coarse = _require_file(_pick(args.coarse, cfg.paths.coarse_ckpt, "--coarse", "eval"), "coarse checkpoint")
        fine = _require_file(_pick(args.fine, cfg.paths.fine_ckpt, "--fine", "eval"), "fine checkpoint")
        preds = _pipeline_predictions(cases, load_net(coarse), load_net(fine), cfg.pipeline, out / "pred")
    result = summarize(cases, preds)
    (out / "eval.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    agg = result["aggregate"]
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "Left Canal", "Right Canal", "Overall"])
        for name in METRIC_NAMES:
            w.writerow([name] + [agg[k]["mean"][name] for k in ("left", "right", "overall")])
    print(json.dumps(agg["per_side"]["mean"]))


def cmd_ablate(args, cfg):
    out = _out_dir(args, cfg)
    data = _pick(args.data, cfg.paths.data_dir, "--data", "ablate")
    train, test = load_dataset(data, "train"), load_dataset(data, "test")
    if not test:
        raise ValueError("ablation needs a test split in the manifest")
    seed = cfg.training.seed
    tcfg = replace(cfg.training, epochs_fine=args.epochs) if args.epochs else cfg.training
    coarse_path = args.coarse or cfg.paths.coarse_ckpt
    if coarse_path:
        coarse = load_net(_require_file(coarse_path, "coarse checkpoint"))
    else:
        _log("no coarse checkpoint given; training one")
        samples = [coarse_sample(c, cfg.pipeline) for c in train]
        coarse, _ = train_coarse(samples, tcfg, _net_config(cfg.coarse_net, seed), logger=_log)
        save_net(coarse, out / "coarse.ckpt")
    fine_data = [s for c in train for s in fine_samples(c, cfg.pipeline)]
    results = {}
    for name, multiscale, residual in VARIANTS:
        _log(f"variant {name}")
        ncfg = _net_config(cfg.fine_net, seed, multiscale=multiscale, residual=residual)
        fine, _ = train_fine(fine_data, tcfg, ncfg, logger=_log)
        save_net(fine, out / f"fine_{name}.ckpt")
        preds = _pipeline_predictions(test, coarse, fine, cfg.pipeline)
        results[name] = summarize(test, preds)["aggregate"]["per_side"]["mean"]
    with open(out / "ablate.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric"] + [v[0] for v in VARIANTS])
        for label, key in ABLATION_ROWS:
            w.writerow([label] + [results[v[0]][key] for v in VARIANTS])
    (out / "ablate.json").write_text(json.dumps({"seed": seed, "results": results}, indent=2))


COMMANDS = {
    "phantom-gen": cmd_phantom_gen,
    "window": cmd_window,
    "train-coarse": lambda a, c: cmd_train(a, c, "coarse"),
    "train-fine": lambda a, c: cmd_train(a, c, "fine"),
    "infer": cmd_infer,
    "postprocess": cmd_postprocess,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def dispatch(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if not argv:
            raise UsageError("no command given")
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("no command given")
        cfg = _load_config(args)
    except UsageError as e:
        print(parser.format_usage(), file=sys.stderr, end="")
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # bad config file
        print(f"error: {e}", file=sys.stderr)
        return 2

    try:
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                COMMANDS[args.command](args, cfg)
        else:
            COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
