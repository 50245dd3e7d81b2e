"""Acceptance checks, one test per criterion.

Each test prints a single ``criterion N PASS/FAIL`` line (collected again in
the terminal summary) and asserts the criterion at its stated tolerance.
"""

import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from pseudolabel.augment import HFLIP, IDENTITY, VFLIP, AugmentationSpec, forward_box, forward_mask, inverse_box, inverse_mask
from pseudolabel.dataio import coco_bytes, load_coco, results_bytes, load_results, RleMask, rle_decode, rle_encode, save_coco
from pseudolabel.evaluation import evaluate
from pseudolabel.fusion import FusionConfig, confidence_filter, wbf
from pseudolabel.geometry import GRID_BITS, BBox, BinaryMask, Instance, box_iou
from pseudolabel.pipeline import Pipeline, PipelineConfig, refine
from pseudolabel.synthdet import NoiseModel, SyntheticStudent, SyntheticTeacher, generate_dataset, scenes_from_manifest

from conftest import jittered, random_box
from test_eval import random_dataset
from wbf_reference import reference_wbf

GRID_N = 512


def grid_iou(a: BBox, b: BBox) -> float:
    """Count cells of a 512x512 grid whose centers fall inside each box."""
    c = (np.arange(GRID_N) + 0.5) / GRID_N

    def raster(box):
        return np.outer((c >= box.y1) & (c < box.y2), (c >= box.x1) & (c < box.x2))

    ra, rb = raster(a), raster(b)
    union = np.count_nonzero(ra | rb)
    return np.count_nonzero(ra & rb) / union if union else 0.0


def uniform_box(rng):
    """Independent uniform corners, sorted; widened to 1e-3 if degenerate."""
    x1, x2 = np.sort(rng.random(2))
    y1, y2 = np.sort(rng.random(2))
    return BBox(x1, y1, max(x2, x1 + 1e-3), max(y2, y1 + 1e-3)) if x1 < 1 - 1e-3 and y1 < 1 - 1e-3 else BBox(0, 0, 1, 1)


def test_criterion_01_iou_grid_oracle(criterion):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    errors = np.array([abs(box_iou(a, b) - grid_iou(a, b)) for a, b in
                       ((uniform_box(rng), uniform_box(rng)) for _ in range(1000))])
    elapsed = time.perf_counter() - t0
    over = int(np.count_nonzero(errors > 5e-3))
    ok = over == 0 and elapsed < 5.0
    criterion(1, "box_iou vs 512x512 counting oracle", ok,
              f"max |diff| {errors.max():.4g}, mean {errors.mean():.3g}, {over}/1000 pairs over 5e-3, {elapsed:.2f}s")


def test_criterion_02_wbf_worked_example(criterion):
    (c,) = wbf([Instance(BBox(0.1, 0.1, 0.5, 0.5), 0.9), Instance(BBox(0.15, 0.15, 0.55, 0.55), 0.6)],
               FusionConfig(iou_threshold=0.55))
    box_err = max(abs(v - e) for v, e in zip(c.fused.box.as_tuple(), (0.12, 0.12, 0.52, 0.52)))
    score_err = abs(c.fused.score - 0.75)
    ok = box_err <= 1e-9 and score_err <= 1e-9
    criterion(2, "WBF worked example", ok,
              f"fused {tuple(round(v, 12) for v in c.fused.box.as_tuple())} @ {c.fused.score!r}, "
              f"box err {box_err:.2g}, score err {score_err:.2g}")


def random_wbf_input(rng):
    n = int(rng.integers(1, 7))
    centers = [random_box(rng, 0.1) for _ in range(int(rng.integers(1, 3)))]
    out = []
    for _ in range(n):
        box = jittered(rng, centers[int(rng.integers(len(centers)))], 0.04)
        # a share of coarse scores produces exact ties for the ordering rule
        score = float(rng.integers(0, 9)) / 8 if rng.random() < 0.3 else float(rng.random())
        out.append(Instance(box, score, str(rng.choice(["a", "b"])), view=str(rng.choice(["identity", "vflip"]))))
    return out


def test_criterion_03_wbf_matches_bruteforce(criterion):
    rng = np.random.default_rng(3)
    quantum = 2.0**-GRID_BITS
    mismatches, worst_box, worst_score, multi = 0, 0.0, 0.0, 0
    for _ in range(500):
        insts = random_wbf_input(rng)
        got = wbf(insts, FusionConfig(0.55))
        ref = reference_wbf(insts, 0.55)
        multi += any(len(ms) > 1 for ms, *_ in ref)
        same = [c.members for c in got] == [tuple(ms) for ms, *_ in ref]
        same = same and [c.fused.label for c in got] == [lbl for *_, lbl in ref]
        if same:
            for c, (_, box, score, _) in zip(got, ref):
                worst_box = max(worst_box, max(float(abs(Fraction(v) - e)) for v, e in zip(c.fused.box.as_tuple(), box)))
                worst_score = max(worst_score, float(abs(Fraction(c.fused.score) - score)))
        mismatches += not same
    # clusters, order and labels must be identical; coordinates are stored on the
    # 2**-40 grid, so "exact" for them means within one storage quantum
    ok = mismatches == 0 and worst_box <= quantum and worst_score <= 1e-15
    criterion(3, "greedy WBF vs exhaustive reference", ok,
              f"{mismatches}/500 structural mismatches ({multi} inputs with merged clusters), "
              f"max box dev {worst_box:.2g} (quantum {quantum:.2g}), max score dev {worst_score:.2g}")


def test_criterion_04_evaluator_exactness(criterion):
    gt = Instance(BBox(0.0, 0.0, 0.5, 1.0))
    pred = Instance(BBox(0.125, 0.0, 0.625, 1.0), 0.8)  # IoU exactly 0.6
    single = evaluate({1: [gt]}, {1: [pred]})
    gts = generate_dataset(20, 0).annotations
    perfect = evaluate(gts, gts)
    rng = np.random.default_rng(44)
    violations = 0
    for _ in range(100):
        aps = [a for _, a in evaluate(*random_dataset(rng)).per_threshold]
        violations += any(b > a for a, b in zip(aps, aps[1:]))
    ok = ((single.ap50, single.ap75, single.ap) == (1.0, 0.0, 0.3)
          and (perfect.ap, perfect.ap50, perfect.ap75) == (1.0, 1.0, 1.0) and violations == 0)
    criterion(4, "evaluator exactness", ok,
              f"IoU-0.6 pair ap50={single.ap50!r} ap75={single.ap75!r} ap={single.ap!r}; "
              f"perfect {perfect.ap!r}/{perfect.ap50!r}/{perfect.ap75!r}; AP(t) increases in {violations}/100 datasets")


def test_criterion_05_transform_round_trip(criterion):
    rng = np.random.default_rng(5)
    views = [IDENTITY, HFLIP, VFLIP, AugmentationSpec("brightness", (1.3,)), AugmentationSpec("saturation", (0.7,))]
    box_fail = mask_fail = 0
    for k in range(1000):
        view = views[k % len(views)]
        b = uniform_box(rng)
        box_fail += inverse_box(view, forward_box(view, b)).as_tuple() != b.as_tuple()
        h, w = (int(v) for v in rng.integers(1, 48, 2))
        m = BinaryMask(rng.random((h, w)) < rng.random())
        f = forward_mask(view, m)
        mask_fail += not (inverse_mask(view, f) == m and f.area == m.area)
    ok = box_fail == 0 and mask_fail == 0
    criterion(5, "inverse(forward) round trip", ok, f"{box_fail}/1000 box and {mask_fail}/1000 mask mismatches")


def test_criterion_06_filter_monotone(criterion):
    rng = np.random.default_rng(6)
    grid = [round(0.05 * k, 2) for k in range(21)]
    broken = 0
    for _ in range(200):
        n = int(rng.integers(0, 15))
        # include scores sitting exactly on grid values
        scores = [round(float(rng.random()), 2) if rng.random() < 0.5 else float(rng.random()) for _ in range(n)]
        insts = [Instance(random_box(rng), s) for s in scores]
        outs = {t: confidence_filter(insts, t) for t in grid}
        for t in grid:
            expect = [i for i in insts if i.score >= t]
            broken += outs[t] != expect or any(i.score < t for i in outs[t])
        for t1 in grid:
            for t2 in grid:
                if t1 <= t2:
                    ids1 = {id(i) for i in outs[t1]}
                    broken += not all(id(i) in ids1 for i in outs[t2])
    criterion(6, "confidence filter monotonicity", broken == 0, f"{broken} violations over 200 lists x 21 thresholds")


def sign_test_p(wins: int, n: int) -> float:
    """One-sided binomial tail P(X >= wins) under p = 1/2."""
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2**n


@pytest.mark.slow
def test_criterion_07_tta_gain(criterion):
    noise = NoiseModel(jitter_sigma=0.02, miss_rate=0.05, clutter_rate=0.3, masks=False)
    fusion = FusionConfig(0.55)
    t0 = time.perf_counter()
    gains = []
    for seed in range(100):
        gt = generate_dataset(200, seed, with_masks=False)
        teacher = SyntheticTeacher(scenes_from_manifest(gt), noise, seed)
        views = [teacher.predict(gt, v) for v in (IDENTITY, VFLIP)]
        single = evaluate(gt.annotations, refine(views[:1], fusion, 0.0, True)).ap
        fused = evaluate(gt.annotations, refine(views, fusion, 0.0, True)).ap
        gains.append(fused - single)
    elapsed = time.perf_counter() - t0
    wins = sum(g > 0 for g in gains)
    p = sign_test_p(wins, 100)
    ok = wins >= 95 and np.mean(gains) > 0 and p < 0.01 and elapsed < 60
    criterion(7, "TTA+WBF beats single view", ok,
              f"{wins}/100 seeds, mean AP gain {np.mean(gains):+.4f} (min {min(gains):+.4f}), "
              f"sign test p={p:.2g}, {elapsed:.1f}s")


@pytest.mark.slow
def test_criterion_08_distillation_gain(criterion, tmp_path):
    noise = NoiseModel(jitter_sigma=0.02, miss_rate=0.05, clutter_rate=0.3, bias=(-0.01, -0.01, 0.01, 0.01), masks=False)
    t0 = time.perf_counter()
    gains = []
    for seed in range(100):
        gt = generate_dataset(200, seed, with_masks=False)
        world = scenes_from_manifest(gt)
        cfg = PipelineConfig(train_size=100, split_seed=seed, score_threshold=0.5, evaluate_teacher=True)
        run = Pipeline(cfg, SyntheticTeacher(world, noise, seed), SyntheticStudent(world, seed=seed),
                       output_dir=tmp_path / f"s{seed}").run(gt)
        teacher_ap = json.loads(run.report_path.read_text())["teacher"]["box"]["ap"]
        gains.append(run.metrics["box"].ap - teacher_ap)
    elapsed = time.perf_counter() - t0
    wins = sum(g > 0 for g in gains)
    ok = wins >= 90 and elapsed < 120
    criterion(8, "distilled student beats fused pseudo-labels", ok,
              f"{wins}/100 seeds, mean AP gain {np.mean(gains):+.4f} (min {min(gains):+.4f}), {elapsed:.1f}s")


def test_criterion_09_determinism(criterion, tmp_path):
    snapshots = []
    for name in ("first", "second"):
        gt = generate_dataset(120, 9)
        world = scenes_from_manifest(gt)
        cfg = PipelineConfig(train_size=60, split_seed=9, evaluate_teacher=True)
        noise = NoiseModel(jitter_sigma=0.02, miss_rate=0.05, clutter_rate=0.3)
        Pipeline(cfg, SyntheticTeacher(world, noise, 9), SyntheticStudent(world, seed=9),
                 output_dir=tmp_path / name).run(gt)
        out = tmp_path / name
        files = sorted((out / "objects").iterdir()) + [out / "metrics.json", out / "predictions.json"]
        files += [out / "pr_box.csv", out / "pr_mask.csv"]
        snapshots.append({f.relative_to(out).as_posix(): f.read_bytes() for f in files})
    same = snapshots[0] == snapshots[1]
    criterion(9, "bit-identical reruns", same,
              f"{len(snapshots[0])} files compared ({sum(k.startswith('objects/') for k in snapshots[0])} manifests), "
              f"{'identical' if same else 'DIFFERENT'}")


def test_criterion_10_io_round_trips(criterion, tmp_path, fixtures_dir):
    failures = []
    for name in ("coco_small.json", "unlabeled.json", "empty_annotations.json"):
        m = load_coco(fixtures_dir / name)
        again = load_coco(save_coco(m, tmp_path / name))
        if coco_bytes(again) != coco_bytes(m):
            failures.append(name)
        for i in m.image_ids:
            for a, b in zip((m.annotations or {}).get(i, ()), (again.annotations or {}).get(i, ())):
                if a.mask != b.mask or np.abs(a.box.as_array() - b.box.as_array()).max() > 1e-6:
                    failures.append(f"{name}:{i}")
    preds = load_results(fixtures_dir / "results_small.json", load_coco(fixtures_dir / "unlabeled.json"), "vflip")
    (tmp_path / "r.json").write_bytes(results_bytes(preds.values()))
    if results_bytes(load_results(tmp_path / "r.json", load_coco(fixtures_dir / "unlabeled.json"), "vflip").values()) != results_bytes(preds.values()):
        failures.append("results_small.json")
    cases = json.loads((fixtures_dir / "rle_2x2.json").read_text())
    for case in cases:
        m = BinaryMask(np.array(case["mask"], dtype=bool))
        if list(rle_encode(m).counts) != case["counts"] or rle_decode(RleMask((2, 2), case["counts"])) != m:
            failures.append(case["name"])
    ok = not failures
    criterion(10, "COCO and RLE round trips on fixtures", ok,
              f"3 annotation files, 1 results file, {len(cases)} 2x2 RLE cases; failures: {failures or 'none'}")
