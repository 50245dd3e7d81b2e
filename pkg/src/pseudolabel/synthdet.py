"""Synthetic single-object scenes and noisy detectors.

The synthetic teacher and student implement the same predict/train interface
as the subprocess adapters, so the whole pipeline can run in-process with no
images, GPUs or model weights.

Seed splitting: every random draw for an image comes from
``numpy.random.default_rng([seed, image_id, crc32(view_token), stream])``,
so images and views are independent and can be generated in any order.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .augment import IDENTITY, AugmentationSpec, as_spec, forward_box, forward_mask
from .dataio import DatasetManifest, ImageRecord
from .geometry import BBox, BinaryMask, Instance, PredictionSet, box_iou, box_to_mask

DEFAULT_LABEL = "spacecraft"
MIN_SIDE = 1e-3

_STREAM_TEACHER = 0
_STREAM_STUDENT = 1


@dataclass(frozen=True)
class NoiseModel:
    """Noise of a simulated detector.

    ``bias`` is a systematic ``(x1, y1, x2, y2)`` offset added in the frame
    the detector sees. Scores are ``clip(IoU + N(0, score_sigma), 0, 1)``,
    so their mean is non-decreasing in IoU.
    """

    jitter_sigma: float = 0.02
    miss_rate: float = 0.0
    clutter_rate: float = 0.0
    score_sigma: float = 0.05
    bias: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    masks: bool = True

    def __post_init__(self) -> None:
        if self.jitter_sigma < 0 or self.score_sigma < 0:
            raise ValueError("noise standard deviations must be non-negative")
        if not (0.0 <= self.miss_rate <= 1.0) or not (0.0 <= self.clutter_rate <= 1.0):
            raise ValueError("miss_rate and clutter_rate must be in [0, 1]")
        bias = tuple(float(b) for b in self.bias)
        if len(bias) != 4:
            raise ValueError("bias needs 4 components")
        object.__setattr__(self, "bias", bias)

    @classmethod
    def zero(cls) -> "NoiseModel":
        return cls(jitter_sigma=0.0, miss_rate=0.0, clutter_rate=0.0, score_sigma=0.0)

    @classmethod
    def from_dict(cls, d: Mapping) -> "NoiseModel":
        d = dict(d)
        if "bias" in d:
            d["bias"] = tuple(d["bias"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bias"] = list(self.bias)
        return d


@dataclass(frozen=True)
class SyntheticScene:
    image_id: int
    width: int
    height: int
    gt: Instance


def rng_for(seed: int, image_id: int, view: str, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, image_id, zlib.crc32(view.encode()), stream])


# --------------------------------------------------------------------------
# ground truth


def _sample_box_pixels(rng: np.random.Generator, width: int, height: int) -> tuple[int, int, int, int]:
    # rejection keeps the pixel-rounded area inside [0.01, 0.25] of the canvas
    while True:
        area = rng.uniform(0.01, 0.25)
        aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
        bw = int(round(np.sqrt(area * aspect) * width))
        bh = int(round(np.sqrt(area / aspect) * height))
        if not (2 <= bw <= width and 2 <= bh <= height):
            continue
        if not (0.01 <= bw * bh / (width * height) <= 0.25):
            continue
        x = int(rng.integers(0, width - bw + 1))
        y = int(rng.integers(0, height - bh + 1))
        return x, y, bw, bh


def _plus_mask(rng: np.random.Generator, x: int, y: int, bw: int, bh: int, width: int, height: int) -> np.ndarray:
    """Union of a full-width and a full-height band: its tight box is the object box."""
    m = np.zeros((height, width), dtype=bool)
    th = max(1, int(rng.integers(max(1, bh // 3), bh + 1)))
    tw = max(1, int(rng.integers(max(1, bw // 3), bw + 1)))
    oy = int(rng.integers(0, bh - th + 1))
    ox = int(rng.integers(0, bw - tw + 1))
    m[y + oy : y + oy + th, x : x + bw] = True
    m[y : y + bh, x + ox : x + ox + tw] = True
    return m


def generate_scene(image_id: int, seed: int, width: int = 128, height: int = 128, label: str = DEFAULT_LABEL,
                   with_masks: bool = True) -> SyntheticScene:
    rng = np.random.default_rng([seed, image_id])
    x, y, bw, bh = _sample_box_pixels(rng, width, height)
    box = BBox(x / width, y / height, (x + bw) / width, (y + bh) / height)
    mask = BinaryMask(_plus_mask(rng, x, y, bw, bh, width, height)) if with_masks else None
    return SyntheticScene(image_id, width, height, Instance(box, 1.0, label, mask))


def generate_dataset(
    n: int,
    seed: int,
    width: int = 128,
    height: int = 128,
    label: str = DEFAULT_LABEL,
    with_masks: bool = True,
) -> DatasetManifest:
    """``n`` single-object scenes with ground truth, deterministic in ``seed``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    images, anns = [], {}
    for i in range(1, n + 1):
        scene = generate_scene(i, seed, width, height, label, with_masks)
        images.append(ImageRecord(i, f"synth_{i:05d}.png", width, height))
        anns[i] = (scene.gt,)
    return DatasetManifest(tuple(images), anns, None, f"synth(n={n},seed={seed})")


def scenes_from_manifest(manifest: DatasetManifest) -> dict[int, SyntheticScene]:
    if manifest.annotations is None:
        raise ValueError("synthetic world manifest needs ground-truth annotations")
    out = {}
    for im in manifest.images:
        gts = manifest.annotations[im.id]
        if len(gts) != 1:
            raise ValueError(f"image {im.id}: synthetic scenes hold exactly one object, found {len(gts)}")
        out[im.id] = SyntheticScene(im.id, im.width, im.height, gts[0])
    return out


# --------------------------------------------------------------------------
# detection


def warp_mask(src: BinaryMask, src_box: BBox, dst_box: BBox) -> BinaryMask:
    """Nearest-neighbour resample of the part of ``src`` inside ``src_box`` onto ``dst_box``."""
    h, w = src.shape
    u = (np.arange(w) + 0.5) / w
    v = (np.arange(h) + 0.5) / h
    in_x = (u >= dst_box.x1) & (u < dst_box.x2)
    in_y = (v >= dst_box.y1) & (v < dst_box.y2)
    sx = src_box.x1 + (u - dst_box.x1) / dst_box.width * src_box.width
    sy = src_box.y1 + (v - dst_box.y1) / dst_box.height * src_box.height
    cols = np.clip(np.floor(sx * w).astype(int), 0, w - 1)
    rows = np.clip(np.floor(sy * h).astype(int), 0, h - 1)
    out = src.data[np.ix_(rows, cols)] & np.outer(in_y, in_x)
    return BinaryMask(out)


def _valid_box(coords: np.ndarray) -> BBox:
    x1, x2 = sorted(np.clip(coords[[0, 2]], 0.0, 1.0))
    y1, y2 = sorted(np.clip(coords[[1, 3]], 0.0, 1.0))
    if x2 - x1 < MIN_SIDE:
        x1 = min(x1, 1.0 - MIN_SIDE)
        x2 = x1 + MIN_SIDE
    if y2 - y1 < MIN_SIDE:
        y1 = min(y1, 1.0 - MIN_SIDE)
        y2 = y1 + MIN_SIDE
    return BBox(x1, y1, x2, y2)


def _score(rng: np.random.Generator, iou: float, sigma: float) -> float:
    return float(np.clip(iou + rng.normal(0.0, sigma), 0.0, 1.0)) if sigma > 0 else float(iou)


def _random_box(rng: np.random.Generator) -> BBox:
    area = rng.uniform(0.01, 0.25)
    aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
    bw, bh = min(np.sqrt(area * aspect), 1.0), min(np.sqrt(area / aspect), 1.0)
    x, y = rng.uniform(0.0, 1.0 - bw), rng.uniform(0.0, 1.0 - bh)
    return BBox(x, y, x + bw, y + bh)


def noisy_detect(
    scene: SyntheticScene,
    noise: NoiseModel,
    view: AugmentationSpec | str = IDENTITY,
    seed: int = 0,
    label: Optional[str] = None,
) -> PredictionSet:
    """Simulated detector output for one view, in that view's coordinate frame."""
    spec = as_spec(view)
    token = spec.token
    label = label or scene.gt.label
    rng = rng_for(seed, scene.image_id, token, _STREAM_TEACHER)
    gt_box = forward_box(spec, scene.gt.box)
    gt_mask = forward_mask(spec, scene.gt.mask) if scene.gt.mask is not None else None
    use_masks = noise.masks and gt_mask is not None

    out: list[Instance] = []
    missed = rng.random() < noise.miss_rate
    jitter = rng.normal(0.0, noise.jitter_sigma, 4) if noise.jitter_sigma > 0 else np.zeros(4)
    score_draw = rng.normal(0.0, 1.0)
    if not missed:
        box = _valid_box(gt_box.as_array() + np.asarray(noise.bias) + jitter)
        score = float(np.clip(box_iou(box, gt_box) + noise.score_sigma * score_draw, 0.0, 1.0))
        mask = warp_mask(gt_mask, gt_box, box) if use_masks else None
        out.append(Instance(box, score, label, mask, token))
    n_clutter = int(rng.poisson(noise.clutter_rate)) if noise.clutter_rate > 0 else 0
    for _ in range(n_clutter):
        box = _random_box(rng)
        score = _score(rng, box_iou(box, gt_box), noise.score_sigma)
        mask = box_to_mask(box, scene.width, scene.height) if use_masks else None
        out.append(Instance(box, score, label, mask, token))
    return PredictionSet(scene.image_id, scene.width, scene.height, tuple(out), token)


def _scenes_for(manifest: DatasetManifest, world: Mapping[int, SyntheticScene]) -> list[SyntheticScene]:
    missing = [i for i in manifest.image_ids if i not in world]
    if missing:
        raise KeyError(f"images {missing[:5]} are not part of the synthetic world")
    return [world[i] for i in manifest.image_ids]


def _fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def world_fingerprint(world: Mapping[int, SyntheticScene]) -> str:
    return _fingerprint([[i, list(world[i].gt.box.as_tuple())] for i in sorted(world)])


@dataclass
class SyntheticTeacher:
    """In-process stand-in for a zero-shot detector prompted with a text query."""

    world: Mapping[int, SyntheticScene]
    noise: NoiseModel = field(default_factory=NoiseModel)
    seed: int = 0

    def predict(self, manifest: DatasetManifest, view, prompt: str = DEFAULT_LABEL, model=None, workdir=None):
        return {
            s.image_id: noisy_detect(s, self.noise, view, self.seed, label=prompt)
            for s in _scenes_for(manifest, self.world)
        }

    def fingerprint(self) -> str:
        return _fingerprint({"kind": "synthetic-teacher", "noise": self.noise.to_dict(), "seed": self.seed,
                             "world": world_fingerprint(self.world)})


# --------------------------------------------------------------------------
# student


@dataclass(frozen=True)
class StudentModel:
    """Fitted synthetic student.

    ``scale``/``offset`` map the student's perception ``d`` to label space:
    ``label ~ scale * d + offset`` per coordinate. The correction from
    labels back to perception is the inverse affine map.
    """

    scale: tuple[float, float, float, float]
    offset: tuple[float, float, float, float]
    jitter_sigma: float = 0.005
    score_sigma: float = 0.02
    seed: int = 0
    n_train: int = 0

    @property
    def correction_scale(self) -> np.ndarray:
        return 1.0 / np.asarray(self.scale)

    @property
    def correction_bias(self) -> np.ndarray:
        return -np.asarray(self.offset) / np.asarray(self.scale)

    def to_json(self) -> str:
        d = {
            "scale": [round(v, 12) for v in self.scale],
            "offset": [round(v, 12) for v in self.offset],
            "jitter_sigma": self.jitter_sigma,
            "score_sigma": self.score_sigma,
            "seed": self.seed,
            "n_train": self.n_train,
            "kind": "synthetic-student",
        }
        return json.dumps(d, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "StudentModel":
        d = json.loads(text)
        if d.get("kind") != "synthetic-student":
            raise ValueError("not a synthetic student artifact")
        return cls(tuple(d["scale"]), tuple(d["offset"]), d["jitter_sigma"], d["score_sigma"], d["seed"], d["n_train"])

    @classmethod
    def load(cls, path) -> "StudentModel":
        return cls.from_json(Path(path).read_text())


def fit_student(
    labels: DatasetManifest,
    world: Mapping[int, SyntheticScene],
    jitter_sigma: float = 0.005,
    score_sigma: float = 0.02,
    seed: int = 0,
) -> StudentModel:
    """Least-squares affine fit, per coordinate, from perceived boxes to the (top) pseudo-label."""
    if labels.annotations is None:
        raise ValueError("training manifest has no annotations")
    d_rows, y_rows = [], []
    for im in labels.images:
        anns = labels.annotations[im.id]
        if not anns:
            continue
        top = min(anns, key=lambda i: (-i.score, i.box.as_tuple()))
        d_rows.append(world[im.id].gt.box.as_tuple())
        y_rows.append(top.box.as_tuple())
    if len(d_rows) < 2:
        raise ValueError(f"degenerate fit: need at least 2 labeled images, got {len(d_rows)}")
    d = np.asarray(d_rows)
    y = np.asarray(y_rows)
    scale, offset = [], []
    for c in range(4):
        dc = d[:, c] - d[:, c].mean()
        var = float(dc @ dc)
        if var <= 1e-18:
            raise ValueError(f"degenerate fit: coordinate {c} has no spread in the training boxes")
        s = float(dc @ (y[:, c] - y[:, c].mean())) / var
        if s <= 0:
            raise ValueError(f"degenerate fit: non-positive scale on coordinate {c}")
        scale.append(s)
        offset.append(float(y[:, c].mean() - s * d[:, c].mean()))
    return StudentModel(tuple(scale), tuple(offset), jitter_sigma, score_sigma, seed, len(d_rows))


def student_detect(scene: SyntheticScene, model: StudentModel, view=IDENTITY, label: Optional[str] = None) -> PredictionSet:
    spec = as_spec(view)
    token = spec.token
    rng = rng_for(model.seed, scene.image_id, token, _STREAM_STUDENT)
    jitter = rng.normal(0.0, model.jitter_sigma, 4) if model.jitter_sigma > 0 else np.zeros(4)
    score_draw = rng.normal(0.0, 1.0)
    perceived = scene.gt.box.as_array() + jitter
    box = forward_box(spec, _valid_box(np.asarray(model.scale) * perceived + np.asarray(model.offset)))
    gt_box = forward_box(spec, scene.gt.box)
    score = float(np.clip(box_iou(box, gt_box) + model.score_sigma * score_draw, 0.0, 1.0))
    mask = None
    if scene.gt.mask is not None:
        mask = warp_mask(forward_mask(spec, scene.gt.mask), gt_box, box)
    inst = Instance(box, score, label or scene.gt.label, mask, token)
    return PredictionSet(scene.image_id, scene.width, scene.height, (inst,), token)


@dataclass
class SyntheticStudent:
    """In-process trainer and predictor for the synthetic student."""

    world: Mapping[int, SyntheticScene]
    jitter_sigma: float = 0.005
    score_sigma: float = 0.02
    seed: int = 0

    def train(self, manifest: DatasetManifest, workdir) -> Path:
        model = fit_student(manifest, self.world, self.jitter_sigma, self.score_sigma, self.seed)
        text = model.to_json()
        path = Path(workdir) / f"student-{hashlib.sha256(text.encode()).hexdigest()[:16]}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        return path

    def predict(self, manifest: DatasetManifest, view, prompt: str = DEFAULT_LABEL, model=None, workdir=None):
        if model is None:
            raise ValueError("student prediction needs a trained model artifact")
        fitted = StudentModel.load(model)
        return {s.image_id: student_detect(s, fitted, view, prompt) for s in _scenes_for(manifest, self.world)}

    def fingerprint(self) -> str:
        return _fingerprint({"kind": "synthetic-student", "jitter_sigma": self.jitter_sigma,
                             "score_sigma": self.score_sigma, "seed": self.seed, "world": world_fingerprint(self.world)})
