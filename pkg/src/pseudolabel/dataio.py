"""COCO-style dataset and prediction files, RLE masks and seeded splits.

Boxes are normalized ``x1y1x2y2`` everywhere in memory; COCO pixel
``[x, y, w, h]`` only appears in the files written and read here. Output is
byte-stable: keys sorted, floats rounded to 6 decimals, no timestamps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .geometry import BBox, BinaryMask, Instance, PredictionSet, mask_to_bbox

FLOAT_DECIMALS = 6
_MASK64 = (1 << 64) - 1


class DataError(ValueError):
    """Malformed or inconsistent dataset/prediction data."""


@dataclass(frozen=True)
class ImageRecord:
    id: int
    file_name: str
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise DataError(f"image {self.id}: non-positive size {self.width}x{self.height}")


@dataclass(frozen=True)
class DatasetManifest:
    """Images plus optional per-image annotations.

    ``annotations`` is ``None`` for an unlabeled manifest; otherwise it maps
    every image id to a (possibly empty) tuple of instances.
    """

    images: tuple[ImageRecord, ...]
    annotations: Optional[Mapping[int, tuple[Instance, ...]]] = None
    split_seed: Optional[int] = None
    provenance: str = ""

    def __post_init__(self) -> None:
        images = tuple(self.images)
        ids = [im.id for im in images]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate image ids in manifest")
        object.__setattr__(self, "images", images)
        if self.annotations is not None:
            known = set(ids)
            unknown = set(self.annotations) - known
            if unknown:
                raise DataError(f"annotations reference unknown image ids {sorted(unknown)[:5]}")
            sizes = {im.id: (im.height, im.width) for im in images}
            anns = {}
            for im in images:
                insts = tuple(self.annotations.get(im.id, ()))
                for inst in insts:
                    if inst.mask is not None and inst.mask.shape != sizes[im.id]:
                        raise DataError(f"image {im.id}: mask shape {inst.mask.shape} != {sizes[im.id]}")
                anns[im.id] = insts
            object.__setattr__(self, "annotations", anns)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_ids(self) -> list[int]:
        return [im.id for im in self.images]

    def image(self, image_id: int) -> ImageRecord:
        for im in self.images:
            if im.id == image_id:
                return im
        raise KeyError(image_id)

    @property
    def sizes(self) -> dict[int, tuple[int, int]]:
        """``image_id -> (width, height)``."""
        return {im.id: (im.width, im.height) for im in self.images}

    @property
    def n_annotations(self) -> int:
        return 0 if self.annotations is None else sum(len(v) for v in self.annotations.values())

    def subset(self, ids: Iterable[int], provenance: Optional[str] = None) -> "DatasetManifest":
        keep = set(ids)
        images = tuple(im for im in self.images if im.id in keep)
        anns = None
        if self.annotations is not None:
            anns = {im.id: self.annotations[im.id] for im in images}
        return DatasetManifest(images, anns, self.split_seed, self.provenance if provenance is None else provenance)

    def with_annotations(
        self, annotations: Mapping[int, Sequence[Instance]], provenance: Optional[str] = None
    ) -> "DatasetManifest":
        """Replace annotations; only images present in ``annotations`` are kept."""
        images = tuple(im for im in self.images if im.id in annotations)
        anns = {im.id: tuple(annotations[im.id]) for im in images}
        return DatasetManifest(images, anns, self.split_seed, self.provenance if provenance is None else provenance)

    def unlabeled(self) -> "DatasetManifest":
        return replace(self, annotations=None)

    def prediction_sets(self) -> dict[int, PredictionSet]:
        anns = self.annotations or {}
        return {im.id: PredictionSet(im.id, im.width, im.height, anns.get(im.id, ())) for im in self.images}


# --------------------------------------------------------------------------
# RLE


@dataclass(frozen=True)
class RleMask:
    """Uncompressed COCO RLE: column-major runs, starting with background."""

    size: tuple[int, int]  # (height, width)
    counts: tuple[int, ...] = field(default=())

    def __post_init__(self) -> None:
        h, w = (int(v) for v in self.size)
        counts = tuple(int(c) for c in self.counts)
        if h <= 0 or w <= 0:
            raise DataError(f"invalid RLE size {self.size}")
        if any(c < 0 for c in counts):
            raise DataError("negative RLE count")
        if sum(counts) != h * w:
            raise DataError(f"RLE counts sum to {sum(counts)}, expected {h}*{w}={h * w}")
        object.__setattr__(self, "size", (h, w))
        object.__setattr__(self, "counts", counts)

    def to_json(self) -> dict:
        return {"size": list(self.size), "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: Mapping) -> "RleMask":
        counts = obj.get("counts")
        if isinstance(counts, str):
            raise DataError("compressed RLE strings are not supported; use uncompressed counts")
        return cls(tuple(obj["size"]), tuple(counts))


def rle_encode(m: BinaryMask) -> RleMask:
    flat = m.data.ravel(order="F")
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return RleMask((m.height, m.width), tuple(runs))


def rle_decode(r: RleMask) -> BinaryMask:
    h, w = r.size
    values = np.zeros(len(r.counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, r.counts)
    return BinaryMask(flat.reshape((h, w), order="F"))


def rasterize_polygons(polygons: Sequence[Sequence[float]], width: int, height: int) -> BinaryMask:
    """COCO polygons (flat ``[x0, y0, x1, y1, ...]`` in pixels) to a mask.

    A pixel is set when its center lies inside any polygon.
    """
    from skimage.draw import polygon2mask

    out = np.zeros((height, width), dtype=bool)
    for poly in polygons:
        pts = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 3:
            raise DataError("polygon needs at least 3 vertices")
        # pixel centers sit at integer coordinates for polygon2mask
        rc = np.stack([pts[:, 1] - 0.5, pts[:, 0] - 0.5], axis=1)
        out |= polygon2mask((height, width), rc)
    return BinaryMask(out)


# --------------------------------------------------------------------------
# unit conversion


def _r(v: float) -> float:
    r = round(float(v), FLOAT_DECIMALS)
    return 0.0 if r == 0 else r


def box_to_xywh(box: BBox, width: int, height: int) -> list[float]:
    return [_r(box.x1 * width), _r(box.y1 * height), _r(box.width * width), _r(box.height * height)]


def xywh_to_box(xywh: Sequence[float], width: int, height: int, where: str = "") -> BBox:
    if len(xywh) != 4:
        raise DataError(f"{where}bbox must have 4 numbers, got {xywh!r}")
    x, y, w, h = (float(v) for v in xywh)
    if w <= 0 or h <= 0:
        raise DataError(f"{where}bbox {list(xywh)} has non-positive size")
    tol = 1e-6
    if x < -tol or y < -tol or x + w > width + tol or y + h > height + tol:
        raise DataError(f"{where}bbox {list(xywh)} outside the {width}x{height} image")
    try:
        return BBox.clipped(x / width, y / height, (x + w) / width, (y + h) / height)
    except ValueError as exc:
        raise DataError(f"{where}{exc}") from exc


def _mask_json(m: BinaryMask) -> dict:
    return rle_encode(m).to_json()


def _parse_segmentation(seg, width: int, height: int, where: str) -> Optional[BinaryMask]:
    if seg is None or seg == []:
        return None
    try:
        if isinstance(seg, Mapping):
            rle = RleMask.from_json(seg)
            if rle.size != (height, width):
                raise DataError(f"RLE size {rle.size} != image {(height, width)}")
            return rle_decode(rle)
        return rasterize_polygons(seg, width, height)
    except DataError as exc:
        raise DataError(f"{where}{exc}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{where}malformed segmentation: {exc}") from exc


# --------------------------------------------------------------------------
# annotation files


def _dumps(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


def _read_json(path) -> object:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON at offset {exc.pos} (line {exc.lineno}): {exc.msg}") from exc


def manifest_to_coco(manifest: DatasetManifest) -> dict:
    labels = sorted({i.label for insts in (manifest.annotations or {}).values() for i in insts})
    cat_ids = {lbl: k + 1 for k, lbl in enumerate(labels)}
    doc: dict = {
        "info": {"provenance": manifest.provenance, "split_seed": manifest.split_seed},
        "images": [
            {"id": im.id, "file_name": im.file_name, "width": im.width, "height": im.height}
            for im in manifest.images
        ],
        "categories": [{"id": cat_ids[lbl], "name": lbl} for lbl in labels],
    }
    if manifest.annotations is not None:
        anns = []
        for im in manifest.images:
            for inst in manifest.annotations[im.id]:
                xywh = box_to_xywh(inst.box, im.width, im.height)
                rec = {
                    "id": len(anns) + 1,
                    "image_id": im.id,
                    "category_id": cat_ids[inst.label],
                    "bbox": xywh,
                    # from the written bbox, so a load/save cycle reproduces the same bytes
                    "area": _r(inst.mask.area if inst.mask is not None else xywh[2] * xywh[3]),
                    "iscrowd": 0,
                    "score": _r(inst.score),
                }
                if inst.mask is not None:
                    rec["segmentation"] = _mask_json(inst.mask)
                anns.append(rec)
        doc["annotations"] = anns
    return doc


def coco_bytes(manifest: DatasetManifest) -> bytes:
    return _dumps(manifest_to_coco(manifest))


def save_coco(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(coco_bytes(manifest))
    return path


def manifest_from_coco(doc: Mapping, source: str = "<memory>") -> DatasetManifest:
    if not isinstance(doc, Mapping) or "images" not in doc:
        raise DataError(f"{source}: not a COCO annotation object (missing 'images')")
    images = []
    for k, rec in enumerate(doc["images"]):
        try:
            images.append(ImageRecord(int(rec["id"]), str(rec.get("file_name", "")), int(rec["width"]), int(rec["height"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{source}: images[{k}]: {exc}") from exc
    sizes = {im.id: (im.width, im.height) for im in images}
    if len(sizes) != len(images):
        raise DataError(f"{source}: duplicate image ids")
    cats = {int(c["id"]): str(c["name"]) for c in doc.get("categories", [])}
    info = doc.get("info") or {}
    annotations = None
    if "annotations" in doc:
        annotations = {im.id: [] for im in images}
        for k, rec in enumerate(doc["annotations"]):
            where = f"{source}: annotations[{k}]: "
            try:
                image_id = int(rec["image_id"])
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{where}bad image_id ({exc})") from exc
            if image_id not in sizes:
                raise DataError(f"{where}unknown image id {image_id}")
            w, h = sizes[image_id]
            mask = _parse_segmentation(rec.get("segmentation"), w, h, where)
            if rec.get("bbox") is not None:
                box = xywh_to_box(rec["bbox"], w, h, where)
            elif mask is not None:
                box = mask_to_bbox(mask)
            else:
                raise DataError(f"{where}neither bbox nor segmentation")
            cat = rec.get("category_id")
            label = cats.get(cat, str(cat) if cat is not None else "object")
            try:
                annotations[image_id].append(Instance(box, float(rec.get("score", 1.0)), label, mask))
            except ValueError as exc:
                raise DataError(f"{where}{exc}") from exc
    seed = info.get("split_seed")
    return DatasetManifest(
        tuple(images),
        annotations,
        None if seed is None else int(seed),
        str(info.get("provenance", "")),
    )


def load_coco(path) -> DatasetManifest:
    return manifest_from_coco(_read_json(path), str(path))


def manifest_hash(manifest: DatasetManifest) -> str:
    import hashlib

    return hashlib.sha256(coco_bytes(manifest)).hexdigest()


# --------------------------------------------------------------------------
# result files


def results_to_json(predictions: Iterable[PredictionSet], categories: Optional[Mapping[str, int]] = None) -> list:
    """COCO results records; ``label``, ``augmentation`` and RLE ``segmentation`` are extensions."""
    records = []
    for ps in sorted(predictions, key=lambda p: p.image_id):
        for inst in ps.instances:
            rec = {
                "image_id": ps.image_id,
                "bbox": box_to_xywh(inst.box, ps.width, ps.height),
                "score": _r(inst.score),
                "label": inst.label,
            }
            if categories is not None:
                rec["category_id"] = categories[inst.label]
            if inst.view is not None:
                rec["augmentation"] = inst.view
            if inst.mask is not None:
                rec["segmentation"] = _mask_json(inst.mask)
            records.append(rec)
    return records


def results_bytes(predictions: Iterable[PredictionSet], categories=None) -> bytes:
    return _dumps(results_to_json(predictions, categories))


def save_results(predictions, path, categories: Optional[Mapping[str, int]] = None) -> Path:
    if isinstance(predictions, Mapping):
        predictions = predictions.values()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(results_bytes(predictions, categories))
    return path


def results_from_json(
    records, manifest: DatasetManifest, frame: str = "identity", source: str = "<memory>", default_label: str = "object"
) -> dict[int, PredictionSet]:
    """Group result records per manifest image. Images without records get empty sets."""
    if not isinstance(records, list):
        raise DataError(f"{source}: results must be a JSON array")
    sizes = manifest.sizes
    grouped: dict[int, list[Instance]] = {i: [] for i in sizes}
    for k, rec in enumerate(records):
        where = f"{source}: record {k}: "
        if not isinstance(rec, Mapping):
            raise DataError(f"{where}not an object")
        try:
            image_id = int(rec["image_id"])
            score = float(rec["score"])
            bbox = rec["bbox"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{where}missing or invalid field ({exc})") from exc
        if image_id not in sizes:
            raise DataError(f"{where}prediction for unknown image id {image_id}")
        if not (0.0 <= score <= 1.0):
            raise DataError(f"{where}score {score} outside [0, 1]")
        w, h = sizes[image_id]
        box = xywh_to_box(bbox, w, h, where)
        mask = _parse_segmentation(rec.get("segmentation"), w, h, where)
        label = str(rec.get("label", rec.get("category_id", default_label)))
        grouped[image_id].append(Instance(box, score, label, mask, rec.get("augmentation")))
    return {i: PredictionSet(i, *sizes[i], tuple(v), frame) for i, v in grouped.items()}


def load_results(path, manifest: DatasetManifest, frame: str = "identity", default_label: str = "object"):
    return results_from_json(_read_json(path), manifest, frame, str(path), default_label)


# --------------------------------------------------------------------------
# splitting


class SplitMix64:
    """SplitMix64 generator (Steele, Lea & Flood), pinned so splits reproduce anywhere."""

    def __init__(self, seed: int) -> None:
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` by rejection (no modulo bias)."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next()
            if x < limit:
                return x % n


def sample_ids(ids: Sequence[int], k: int, seed: int) -> list[int]:
    """Partial Fisher-Yates over ids in ascending order; returns the chosen ids sorted."""
    pool = sorted(ids)
    rng = SplitMix64(seed)
    for i in range(k):
        j = i + rng.below(len(pool) - i)
        pool[i], pool[j] = pool[j], pool[i]
    return sorted(pool[:k])


def split_dataset(manifest: DatasetManifest, train_size: int, seed: int) -> tuple[DatasetManifest, DatasetManifest]:
    n = len(manifest.images)
    if train_size < 0 or train_size >= n:
        raise DataError(f"train_size must be in [0, {n}), got {train_size}")
    chosen = set(sample_ids(manifest.image_ids, train_size, seed))
    rest = [i for i in manifest.image_ids if i not in chosen]
    train = replace(manifest.subset(chosen, provenance="split:train"), split_seed=seed)
    held = replace(manifest.subset(rest, provenance="split:eval"), split_seed=seed)
    return train, held
