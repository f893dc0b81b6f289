"""Train both stages on a handful of small phantoms and segment a new one.

This is the full pipeline at toy scale so it runs in a few minutes on one
core: 6 training phantoms at 48^3, narrow two-level nets, short schedules.
The desk-scale run is `canalseg phantom-gen / train-coarse / train-fine /
eval` with the default configuration.
"""
import time
import warnings

from canalseg.metrics import evaluate_case
from canalseg.nets import NetConfig
from canalseg.phantom import PhantomSpec, generate_phantom
from canalseg.pipeline import PipelineConfig, run_pipeline
from canalseg.training import Case, TrainConfig, coarse_sample, fine_samples, train_coarse, train_fine

DIMS = (48, 48, 48)
pcfg = PipelineConfig(coarse_input_dims=(32, 32, 32), fine_dims=((24, 24, 24), (16, 16, 16), (12, 12, 12)))
tcfg = TrainConfig(epochs_coarse=15, epochs_fine=15, lr=3e-3)

cases = []
for seed in range(6):
    ph = generate_phantom(PhantomSpec(seed=100 + seed, dims=DIMS))
    cases.append(Case(f"train{seed}", ph.volume, ph.gt_left, ph.gt_right))

t0 = time.perf_counter()
coarse, hist_c = train_coarse(
    [coarse_sample(c, pcfg) for c in cases], tcfg,
    NetConfig(levels=3, base_channels=4, input_dims=pcfg.coarse_input_dims),
)
fine, hist_f = train_fine(
    [s for c in cases for s in fine_samples(c, pcfg)], tcfg,
    NetConfig(levels=3, base_channels=4, input_dims=pcfg.fine_dims[0]),
)
print(f"trained in {time.perf_counter() - t0:.0f}s; coarse loss {hist_c[0]:.3f} -> {hist_c[-1]:.3f}, "
      f"fine loss {hist_f[0]:.3f} -> {hist_f[-1]:.3f}")

test = generate_phantom(PhantomSpec(seed=999, dims=DIMS, regime="TypeB"))
with warnings.catch_warnings(record=True) as caught:
    warnings.simplefilter("always")
    result = run_pipeline(test.volume, coarse, fine, pcfg)
for w in caught:
    print("warning:", w.message)

scores = evaluate_case(result.left, result.right, test.gt_left, test.gt_right)
for side in ("left", "right", "overall"):
    r = scores[side]
    print(f"{side:>7}: dice {r.dice:.3f}  IoU {r.iou:.3f}  precision {r.precision:.3f}  recall {r.recall:.3f}")
