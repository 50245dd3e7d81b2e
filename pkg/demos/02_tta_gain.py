"""How much does a flipped second view help, seed after seed?

Each seed draws a fresh world and teacher. The gain is box AP of the fused
identity+vflip labels minus box AP of the identity view alone.
"""

import math

import numpy as np

from pseudolabel.augment import IDENTITY, VFLIP
from pseudolabel.evaluation import evaluate
from pseudolabel.fusion import FusionConfig
from pseudolabel.pipeline import refine
from pseudolabel.synthdet import NoiseModel, SyntheticTeacher, generate_dataset, scenes_from_manifest

N_SEEDS = 20
noise = NoiseModel(jitter_sigma=0.02, miss_rate=0.05, clutter_rate=0.3, masks=False)
fusion = FusionConfig(0.55)

gains = []
for seed in range(N_SEEDS):
    gt = generate_dataset(200, seed, with_masks=False)
    teacher = SyntheticTeacher(scenes_from_manifest(gt), noise, seed)
    views = [teacher.predict(gt, v) for v in (IDENTITY, VFLIP)]
    single = evaluate(gt.annotations, refine(views[:1], fusion, 0.0, True)).ap
    fused = evaluate(gt.annotations, refine(views, fusion, 0.0, True)).ap
    gains.append(fused - single)
    print(f"seed {seed:2d}: single {single:.3f}  fused {fused:.3f}  gain {fused - single:+.3f}")

wins = sum(g > 0 for g in gains)
p = sum(math.comb(N_SEEDS, k) for k in range(wins, N_SEEDS + 1)) / 2**N_SEEDS
print(f"\nfusion wins on {wins}/{N_SEEDS} seeds, mean gain {np.mean(gains):+.3f}, one-sided sign test p={p:.2g}")
