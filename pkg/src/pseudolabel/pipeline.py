"""Four-stage orchestration: pseudo-labeling, refinement, distillation, inference.

Every intermediate manifest is stored under ``<output_dir>/objects/<sha256>.json``
and every stage writes a record whose input hash is the previous stage's
output hash. A stage whose record (same input, same configuration) and output
already exist is skipped on re-runs.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import yaml

from .adapter import AdapterEndpoint, Predictor, Trainer
from .augment import DEFAULT_AUGMENTATIONS, IDENTITY, AugmentationSet, inverse_instance
from .dataio import (
    DatasetManifest,
    coco_bytes,
    load_coco,
    manifest_from_coco,
    save_results,
    split_dataset,
)
from .evaluation import EvalResult, evaluate, write_report
from .fusion import FusionConfig, confidence_filter, fuse, select_top1
from .geometry import Instance, PredictionSet

log = logging.getLogger(__name__)

# Confidence thresholds used for the space datasets.
DATASET_THRESHOLDS = {"spark-2024": 0.5, "tango": 0.5, "speed+": 0.6, "sunlamp": 0.6, "lightbox": 0.6}
# Training images surviving the confidence filter out of 500, with real teacher outputs.
EXPECTED_KEPT = {"spark-2024": 395, "sunlamp": 451, "lightbox": 417, "tango": 471}


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    augmentations: AugmentationSet = DEFAULT_AUGMENTATIONS
    iou_threshold: float = 0.55
    score_threshold: float = 0.5
    label_vote: str = "score-weighted"
    fusion_algorithm: str = "wbf"
    top1: bool = True
    distill_iterations: int = 1
    relabel: bool = True
    relabel_filter: bool = True
    relabel_tta: bool = False
    evaluate_teacher: bool = False
    prompt: str = "spacecraft"
    train_size: Optional[int] = 500
    split_seed: int = 0
    output_dir: str = "runs/default"
    dataset: Optional[str] = None
    teacher: Optional[dict] = None
    student_train: Optional[dict] = None
    student_predict: Optional[dict] = None
    cache: bool = True
    base_dir: str = "."

    def __post_init__(self) -> None:
        if not isinstance(self.augmentations, AugmentationSet):
            try:
                self.augmentations = AugmentationSet.from_tokens(self.augmentations)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"augmentations: {exc}") from exc
        if not (0.0 < self.iou_threshold <= 1.0):
            raise ConfigError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")
        if not (0.0 <= self.score_threshold <= 1.0):
            raise ConfigError(f"score_threshold must be in [0, 1], got {self.score_threshold}")
        if int(self.distill_iterations) < 1:
            raise ConfigError("distill_iterations must be at least 1")
        try:
            self.fusion
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def fusion(self) -> FusionConfig:
        return FusionConfig(self.iou_threshold, self.score_threshold, self.label_vote, self.fusion_algorithm)

    def fingerprint(self) -> dict:
        """Settings that change stage outputs (paths and cache flags excluded)."""
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        for k in ("output_dir", "dataset", "cache", "base_dir", "teacher", "student_train", "student_predict"):
            d.pop(k)
        d["augmentations"] = self.augmentations.tokens
        return d

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: str = ".") -> "PipelineConfig":
        d = dict(d)
        preset = d.pop("dataset_preset", None)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d.setdefault("base_dir", base_dir)
        if preset is not None:
            if preset not in DATASET_THRESHOLDS:
                raise ConfigError(f"unknown dataset_preset {preset!r}; known: {sorted(DATASET_THRESHOLDS)}")
            d.setdefault("score_threshold", DATASET_THRESHOLDS[preset])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path) -> PipelineConfig:
    """Read a YAML or JSON config; relative paths inside resolve against its directory."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(doc, Mapping):
        raise ConfigError(f"{path}: config must be a mapping")
    return PipelineConfig.from_dict(doc, base_dir=str(path.parent))


def _resolve(base: str, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(base) / p


def build_endpoint(spec: Optional[Mapping], role: str, base_dir: str = "."):
    """Turn a config entry into a predictor/trainer.

    ``{"command": "...", "timeout": 600}`` gives a subprocess adapter;
    ``{"synthetic": "teacher" | "student", "world": <gt manifest>, ...}`` gives
    the in-process synthetic detectors.
    """
    if spec is None:
        raise ConfigError(f"no endpoint configured for {role}")
    spec = dict(spec)
    if "command" in spec:
        try:
            return AdapterEndpoint(spec["command"], "train" if role == "train" else "predict",
                                   float(spec.get("timeout", 3600.0)))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    kind = spec.pop("synthetic", None)
    if kind is None:
        raise ConfigError(f"endpoint for {role} needs 'command' or 'synthetic'")
    from .synthdet import NoiseModel, SyntheticStudent, SyntheticTeacher, scenes_from_manifest

    try:
        world = scenes_from_manifest(load_coco(_resolve(base_dir, spec.pop("world"))))
        if kind == "teacher":
            return SyntheticTeacher(world, NoiseModel.from_dict(spec.pop("noise", {})), int(spec.pop("seed", 0)))
        if kind == "student":
            return SyntheticStudent(world, **spec)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad synthetic endpoint for {role}: {exc}") from exc
    raise ConfigError(f"unknown synthetic endpoint kind {kind!r}")


# --------------------------------------------------------------------------
# refinement


def to_original(ps: PredictionSet) -> list[Instance]:
    """Instances of a prediction set mapped back to the original image frame."""
    if ps.frame == "identity":
        return list(ps.instances)
    out = []
    for inst in ps.instances:
        if inst.view is None:
            inst = Instance(inst.box, inst.score, inst.label, inst.mask, ps.frame)
        out.append(inverse_instance(inst, ps.frame))
    return out


def refine(
    view_predictions: Sequence[Mapping[int, PredictionSet]],
    fusion: FusionConfig,
    threshold: float = 0.0,
    top1: bool = True,
) -> dict[int, list[Instance]]:
    """Inverse-map every view, fuse per image, drop scores below ``threshold``, optionally keep the top one."""
    ids = sorted(set().union(*(set(v) for v in view_predictions))) if view_predictions else []
    out = {}
    for i in ids:
        pooled = [inst for v in view_predictions if i in v for inst in to_original(v[i])]
        fused = confidence_filter(fuse(pooled, fusion), threshold)
        if top1:
            best = select_top1(fused)
            fused = [] if best is None else [best]
        out[i] = [Instance(f.box, f.score, f.label, f.mask) for f in fused]
    return out


# --------------------------------------------------------------------------
# provenance


@dataclass
class StageRecord:
    stage: str
    input_hash: str
    output_hash: str
    started: str = ""
    finished: str = ""
    kept: Optional[int] = None
    dropped: Optional[int] = None
    cached: bool = False
    details: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)


def validate_chain(records: Sequence[StageRecord]) -> bool:
    return all(b.input_hash == a.output_hash for a, b in zip(records, records[1:]))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def path_hash(path) -> str:
    path = Path(path)
    if path.is_file():
        return _sha(path.read_bytes())
    h = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(path)).encode() + b"\0" + p.read_bytes())
    return h.hexdigest()


@dataclass
class DistillResult:
    artifact: Path
    artifacts: list[Path]
    label_hashes: list[str]
    label_counts: list[int]


@dataclass
class RunResult:
    metrics: dict[str, EvalResult]
    report_path: Path
    records: list[StageRecord]
    labeled: DatasetManifest
    distill: DistillResult


class Pipeline:
    def __init__(
        self,
        cfg: PipelineConfig,
        teacher: Optional[Predictor] = None,
        student_trainer: Optional[Trainer] = None,
        student_predictor: Optional[Predictor] = None,
        output_dir=None,
    ):
        self.cfg = cfg
        self.teacher = teacher
        self.student_trainer = student_trainer
        self.student_predictor = student_predictor
        if self.teacher is None and cfg.teacher is not None:
            self.teacher = build_endpoint(cfg.teacher, "teacher", cfg.base_dir)
        if self.student_trainer is None and cfg.student_train is not None:
            self.student_trainer = build_endpoint(cfg.student_train, "train", cfg.base_dir)
        if self.student_predictor is None:
            if cfg.student_predict is not None:
                self.student_predictor = build_endpoint(cfg.student_predict, "predict", cfg.base_dir)
            elif hasattr(self.student_trainer, "predict") and not isinstance(self.student_trainer, AdapterEndpoint):
                self.student_predictor = self.student_trainer
        self.out = Path(output_dir if output_dir is not None else _resolve(cfg.base_dir, cfg.output_dir))
        self.records: list[StageRecord] = []

    # -- storage -----------------------------------------------------------

    def _store(self, manifest: DatasetManifest) -> tuple[str, DatasetManifest]:
        """Persist a manifest content-addressed; returns its hash and the re-read copy."""
        data = coco_bytes(manifest)
        digest = _sha(data)
        path = self.out / "objects" / f"{digest}.json"
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(data)
        # downstream stages always see the on-disk form, cached or not
        return digest, manifest_from_coco(json.loads(data), str(path))

    def _load_object(self, digest: str) -> Optional[DatasetManifest]:
        path = self.out / "objects" / f"{digest}.json"
        return load_coco(path) if path.exists() else None

    def _stage_key(self, stage: str, input_hash: str, *components) -> Optional[str]:
        if not self.cfg.cache:
            return None
        parts = [stage, input_hash, json.dumps(self.cfg.fingerprint(), sort_keys=True)]
        for c in components:
            fp = getattr(c, "fingerprint", None)
            if fp is None:
                return None
            parts.append(fp())
        return _sha("\0".join(parts).encode())

    def _cached(self, key: Optional[str]) -> Optional[dict]:
        if key is None:
            return None
        path = self.out / "stages" / f"{key}.json"
        return json.loads(path.read_text()) if path.exists() else None

    def _finish(self, rec: StageRecord, key: Optional[str], payload: Optional[dict] = None) -> StageRecord:
        rec.finished = _now()
        self.records.append(rec)
        if key is not None and not rec.cached:
            path = self.out / "stages" / f"{key}.json"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps({"record": asdict(rec), **(payload or {})}, sort_keys=True, indent=2) + "\n")
        return rec

    def _workdir(self, name: str) -> Path:
        d = self.out / "work" / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _require(self, obj, what: str):
        if obj is None:
            raise ConfigError(f"no {what} configured")
        return obj

    # -- stages ------------------------------------------------------------

    def stage_split(self, dataset: DatasetManifest) -> tuple[DatasetManifest, DatasetManifest]:
        started = _now()
        in_hash, dataset = self._store(dataset)
        if self.cfg.train_size is None:
            raise ConfigError("train_size is required to split the dataset")
        train, held = split_dataset(dataset, int(self.cfg.train_size), int(self.cfg.split_seed))
        train_hash, train = self._store(train)
        held_hash, held = self._store(held)
        rec = StageRecord("split", in_hash, train_hash, started, kept=len(train), dropped=len(held),
                          details={"eval_hash": held_hash})
        self._finish(rec, None)
        return train, held

    def stage_pseudo_label(self, train: DatasetManifest) -> DatasetManifest:
        teacher = self._require(self.teacher, "teacher endpoint")
        started = _now()
        in_hash, train = self._store(train)
        key = self._stage_key("pseudo_label", in_hash, teacher)
        hit = self._cached(key)
        if hit is not None and (labeled := self._load_object(hit["output_hash"])) is not None:
            rec = StageRecord(**{**hit["record"], "cached": True, "started": started})
            self._finish(rec, key)
            return labeled

        images = train.unlabeled()
        workdir = self._workdir("pseudo_label")
        views = [teacher.predict(images, v, self.cfg.prompt, None, workdir) for v in self.cfg.augmentations]
        refined = refine(views, self.cfg.fusion, self.cfg.score_threshold, self.cfg.top1)
        kept = {i: v for i, v in refined.items() if v}
        out_hash, labeled = self._store(train.with_annotations(kept, provenance="pseudo_label"))
        rec = StageRecord("pseudo_label", in_hash, out_hash, started, kept=len(kept),
                          dropped=len(train) - len(kept),
                          details={"views": self.cfg.augmentations.tokens, "threshold": self.cfg.score_threshold})
        if not kept:
            msg = (f"no training image kept a pseudo-label at threshold {self.cfg.score_threshold}; "
                   "the labeled manifest is empty")
            log.warning(msg)
            rec.warnings.append(msg)
        self._finish(rec, key, {"output_hash": out_hash})
        return labeled

    def relabel(self, artifact: Path, train: DatasetManifest, iteration: int) -> DatasetManifest:
        predictor = self._require(self.student_predictor, "student predict endpoint")
        views = list(self.cfg.augmentations) if self.cfg.relabel_tta else [IDENTITY]
        workdir = self._workdir(f"relabel-{iteration}")
        preds = [predictor.predict(train.unlabeled(), v, self.cfg.prompt, artifact, workdir) for v in views]
        threshold = self.cfg.score_threshold if self.cfg.relabel_filter else 0.0
        refined = refine(preds, self.cfg.fusion, threshold, self.cfg.top1)
        kept = {i: v for i, v in refined.items() if v}
        return train.with_annotations(kept, provenance=f"relabel:{iteration}")

    def stage_distill(self, labeled: DatasetManifest, train: Optional[DatasetManifest] = None) -> DistillResult:
        """Train the student on the pseudo-labels, then relabel the full train split and retrain.

        With ``relabel`` off this is a single training run. Otherwise each of
        ``distill_iterations`` rounds relabels every training image with the
        current student and retrains from scratch on those labels.
        """
        trainer = self._require(self.student_trainer, "student train endpoint")
        started = _now()
        if labeled.annotations is None or len(labeled) == 0:
            raise PipelineError("distillation needs at least one pseudo-labeled image")
        in_hash, labeled = self._store(labeled)
        train = labeled if train is None else train
        _, train = self._store(train.unlabeled())
        key = self._stage_key("distill", in_hash, trainer, self.student_predictor)
        hit = self._cached(key)
        if hit is not None and Path(hit["artifact"]).exists():
            rec = StageRecord(**{**hit["record"], "cached": True, "started": started})
            self._finish(rec, key)
            return DistillResult(Path(hit["artifact"]), [Path(p) for p in hit["artifacts"]],
                                 hit["label_hashes"], hit["label_counts"])

        workdir = self._workdir("distill")
        labels = labeled
        artifact = Path(trainer.train(labels, workdir))
        artifacts, hashes, counts = [artifact], [in_hash], [len(labels)]
        if self.cfg.relabel:
            for it in range(1, int(self.cfg.distill_iterations) + 1):
                relabeled = self.relabel(artifact, train, it)
                if len(relabeled) == 0:
                    raise PipelineError(f"relabeling round {it} kept no training image; aborting distillation")
                digest, labels = self._store(relabeled)
                artifact = Path(trainer.train(labels, workdir))
                artifacts.append(artifact)
                hashes.append(digest)
                counts.append(len(labels))
        result = DistillResult(artifact, artifacts, hashes, counts)
        rec = StageRecord("distill", in_hash, path_hash(artifact), started, kept=counts[-1],
                          dropped=len(train) - counts[-1],
                          details={"label_hashes": hashes, "label_counts": counts, "trainings": len(artifacts)})
        self._finish(rec, key, {"artifact": str(artifact), "artifacts": [str(a) for a in artifacts],
                                "label_hashes": hashes, "label_counts": counts})
        return result

    def predict_eval(self, artifact: Path, eval_manifest: DatasetManifest) -> dict[int, list[Instance]]:
        predictor = self._require(self.student_predictor, "student predict endpoint")
        workdir = self._workdir("infer")
        preds = predictor.predict(eval_manifest.unlabeled(), IDENTITY, self.cfg.prompt, artifact, workdir)
        # single-view deployment: no fusion, no confidence filter
        out = {}
        for i, ps in preds.items():
            insts = to_original(ps)
            if self.cfg.top1:
                best = select_top1(insts)
                insts = [] if best is None else [best]
            out[i] = [Instance(x.box, x.score, x.label, x.mask) for x in insts]
        return out

    def teacher_predictions(self, manifest: DatasetManifest, threshold: float = 0.0) -> dict[int, list[Instance]]:
        """Refined teacher labels for any image set (used as the no-student baseline)."""
        teacher = self._require(self.teacher, "teacher endpoint")
        workdir = self._workdir("teacher-eval")
        views = [teacher.predict(manifest.unlabeled(), v, self.cfg.prompt, None, workdir) for v in self.cfg.augmentations]
        return refine(views, self.cfg.fusion, threshold, self.cfg.top1)

    def stage_infer_eval(self, artifact, eval_manifest: DatasetManifest) -> tuple[dict[str, EvalResult], Path]:
        artifact = Path(artifact)
        if not artifact.exists():
            raise PipelineError(f"model artifact {artifact} does not exist")
        if eval_manifest.annotations is None:
            raise PipelineError("evaluation manifest has no ground truth")
        started = _now()
        in_hash = path_hash(artifact)
        _, eval_manifest = self._store(eval_manifest)
        preds = self.predict_eval(artifact, eval_manifest)
        metrics = _evaluate_all(eval_manifest, preds)
        extra = {}
        if self.cfg.evaluate_teacher:
            teacher = self.teacher_predictions(eval_manifest, 0.0)
            extra["teacher"] = {k: r.to_dict() for k, r in _evaluate_all(eval_manifest, teacher).items()}
        report = write_report(metrics, self.out / "metrics.json", extra)
        for kind, r in metrics.items():
            r.write_pr_csv(self.out / f"pr_{kind}.csv")
        sizes = eval_manifest.sizes
        save_results([PredictionSet(i, *sizes[i], tuple(v)) for i, v in preds.items()], self.out / "predictions.json")
        rec = StageRecord("infer_eval", in_hash, _sha(report.read_bytes()), started,
                          details={k: r.to_dict()["ap"] for k, r in metrics.items()})
        self._finish(rec, None)
        return metrics, report

    # -- driver ------------------------------------------------------------

    def run(self, dataset: Optional[DatasetManifest] = None) -> RunResult:
        if dataset is None:
            if self.cfg.dataset is None:
                raise ConfigError("no dataset given")
            dataset = load_coco(_resolve(self.cfg.base_dir, self.cfg.dataset))
        self.records = []
        train, held = self.stage_split(dataset)
        labeled = self.stage_pseudo_label(train)
        if len(labeled) == 0:
            raise PipelineError(self.records[-1].warnings[0] if self.records[-1].warnings else "no pseudo-labels")
        distill = self.stage_distill(labeled, train)
        metrics, report = self.stage_infer_eval(distill.artifact, held)
        run_log = self.out / "run.json"
        run_log.write_text(json.dumps({"records": [asdict(r) for r in self.records],
                                       "chain_valid": validate_chain(self.records)},
                                      sort_keys=True, indent=2, default=str) + "\n")
        return RunResult(metrics, report, list(self.records), labeled, distill)


def _evaluate_all(gt_manifest: DatasetManifest, preds: Mapping[int, Sequence[Instance]]) -> dict[str, EvalResult]:
    gts = gt_manifest.annotations
    metrics = {"box": evaluate(gts, preds, "box")}
    has_gt_masks = all(g.mask is not None for v in gts.values() for g in v)
    has_pred_masks = all(p.mask is not None for v in preds.values() for p in v)
    if has_gt_masks and has_pred_masks:
        metrics["mask"] = evaluate(gts, preds, "mask")
    return metrics
