"""Quickstart: fuse two noisy views of a synthetic scene and score them.

Run with ``python3 demos/01_quickstart.py``.
"""

from pseudolabel.augment import IDENTITY, VFLIP
from pseudolabel.evaluation import evaluate
from pseudolabel.fusion import FusionConfig
from pseudolabel.pipeline import refine
from pseudolabel.synthdet import NoiseModel, SyntheticTeacher, generate_dataset, scenes_from_manifest

# A small labeled world: one object per image, boxes and masks.
gt = generate_dataset(50, seed=1)
print(f"{len(gt)} images, {gt.n_annotations} ground-truth objects")

# The teacher jitters boxes, misses a few objects and hallucinates clutter.
noise = NoiseModel(jitter_sigma=0.02, miss_rate=0.05, clutter_rate=0.3, masks=False)
teacher = SyntheticTeacher(scenes_from_manifest(gt), noise, seed=1)
views = [teacher.predict(gt, v) for v in (IDENTITY, VFLIP)]

# Every view is mapped back to the original frame before fusion.
fusion = FusionConfig(iou_threshold=0.55)
single = refine(views[:1], fusion, threshold=0.0, top1=True)
fused = refine(views, fusion, threshold=0.0, top1=True)

first = gt.image_ids[0]
print("ground truth :", gt.annotations[first][0].box.as_tuple())
print("identity view:", single[first][0].box.as_tuple() if single[first] else None)
print("fused        :", fused[first][0].box.as_tuple() if fused[first] else None)

for name, preds in (("identity only", single), ("identity + vflip", fused)):
    r = evaluate(gt.annotations, preds)
    print(f"{name:17s} AP={r.ap:.3f} AP50={r.ap50:.3f} AP75={r.ap75:.3f}")
