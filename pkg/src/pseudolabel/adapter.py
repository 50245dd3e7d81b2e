"""File-based subprocess protocol for external detectors and trainers.

An adapter is any executable described by a command template containing the
placeholders ``{job}`` and ``{out}``. The core writes a job JSON file, runs
the command and reads ``{out}``:

* predict jobs: ``{out}`` must become a COCO results JSON array with boxes in
  the *augmented* view's pixel frame (the adapter applies the view itself);
* train jobs: ``{out}`` must become the model artifact (file or directory).

Exit code 0 means success; anything else is a failure. The adapter's working
directory is exported as ``PSEUDOLABEL_WORKDIR``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shlex
import shutil
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Protocol

from .augment import AugmentationSpec, as_spec, parse_spec
from .dataio import DataError, DatasetManifest, load_results, manifest_hash, save_coco
from .geometry import PredictionSet

log = logging.getLogger(__name__)

WORKDIR_ENV = "PSEUDOLABEL_WORKDIR"
ROLES = ("predict", "train")


class AdapterError(RuntimeError):
    def __init__(self, message: str, exit_code: Optional[int] = None, stderr: str = "", command=None):
        super().__init__(message)
        self.exit_code = exit_code
        self.stderr = stderr
        self.command = command


class AdapterTimeout(AdapterError):
    pass


class AdapterSchemaError(AdapterError):
    pass


class AdapterPreconditionError(AdapterError):
    pass


class Predictor(Protocol):
    def predict(self, manifest: DatasetManifest, view, prompt: str, model=None, workdir=None) -> dict[int, PredictionSet]: ...


class Trainer(Protocol):
    def train(self, manifest: DatasetManifest, workdir) -> Path: ...


@dataclass(frozen=True)
class PredictJob:
    manifest_path: str
    prompt: str
    augmentation: str
    model_path: Optional[str] = None

    def __post_init__(self) -> None:
        # normalizes the token and rejects unknown kinds
        object.__setattr__(self, "augmentation", parse_spec(self.augmentation).token)

    def to_json(self) -> dict:
        return {
            "kind": "predict",
            "manifest": str(self.manifest_path),
            "prompt": self.prompt,
            "augmentation": self.augmentation,
            "model": None if self.model_path is None else str(self.model_path),
        }

    def to_bytes(self) -> bytes:
        return (json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n").encode()

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    @classmethod
    def from_json(cls, d: Mapping) -> "PredictJob":
        if d.get("kind") != "predict":
            raise ValueError("not a predict job")
        return cls(d["manifest"], d["prompt"], d["augmentation"], d.get("model"))


def train_job_json(manifest_path, output_path) -> dict:
    return {"kind": "train", "manifest": str(manifest_path), "output": str(output_path)}


@dataclass(frozen=True)
class AdapterEndpoint:
    command: str
    role: str = "predict"
    timeout: float = 3600.0

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        for ph in ("{job}", "{out}"):
            if self.command.count(ph) != 1:
                raise ValueError(f"command template must contain {ph} exactly once: {self.command!r}")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")

    def argv(self, job_path, out_path) -> list[str]:
        return [
            tok.replace("{job}", str(job_path)).replace("{out}", str(out_path)) for tok in shlex.split(self.command)
        ]

    def invoke(self, job_path: Path, out_path: Path, workdir: Path) -> subprocess.CompletedProcess:
        argv = self.argv(job_path, out_path)
        env = dict(os.environ, **{WORKDIR_ENV: str(workdir)})
        log.debug("running adapter: %s", argv)
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout, env=env)
        except subprocess.TimeoutExpired as exc:
            stderr = exc.stderr.decode(errors="replace") if isinstance(exc.stderr, bytes) else (exc.stderr or "")
            raise AdapterTimeout(f"adapter timed out after {self.timeout}s: {argv}", None, stderr, argv) from exc
        except OSError as exc:
            raise AdapterError(f"could not start adapter {argv}: {exc}", None, "", argv) from exc
        if proc.returncode != 0:
            tail = proc.stderr[-2000:]
            raise AdapterError(
                f"adapter exited with code {proc.returncode}: {argv}\n{tail}", proc.returncode, proc.stderr, argv
            )
        return proc

    def predict(self, manifest, view, prompt, model=None, workdir=None):
        if workdir is None:
            raise ValueError("subprocess adapters need a working directory")
        return run_predict(self, manifest, view, prompt, model, workdir)

    def train(self, manifest, workdir):
        return run_train(self, manifest, workdir)

    def fingerprint(self) -> str:
        return hashlib.sha256(f"{self.role}\0{self.command}".encode()).hexdigest()


def run_predict(
    endpoint: AdapterEndpoint,
    manifest: DatasetManifest,
    view: AugmentationSpec | str,
    prompt: str,
    model=None,
    workdir=".",
) -> dict[int, PredictionSet]:
    """Run one predict job; every returned instance carries the job's view token."""
    if endpoint.role != "predict":
        raise AdapterPreconditionError(f"endpoint role is {endpoint.role!r}, expected 'predict'")
    if model is not None and not Path(model).exists():
        raise AdapterPreconditionError(f"model artifact {model} does not exist")
    token = as_spec(view).token
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    mpath = save_coco(manifest.unlabeled(), workdir / f"images-{manifest_hash(manifest.unlabeled())[:16]}.json")
    job = PredictJob(str(mpath), prompt, token, None if model is None else str(model))
    job_path = workdir / f"predict-{job.digest[:16]}.json"
    job_path.write_bytes(job.to_bytes())
    out_path = workdir / f"predict-{job.digest[:16]}.out.json"
    if out_path.exists():
        out_path.unlink()
    endpoint.invoke(job_path, out_path, workdir)
    if not out_path.exists():
        raise AdapterSchemaError(f"adapter did not write results to {out_path}")
    try:
        preds = load_results(out_path, manifest, frame=token, default_label=prompt)
    except DataError as exc:
        raise AdapterSchemaError(str(exc)) from exc
    out = {}
    for image_id, ps in preds.items():
        insts = []
        for inst in ps.instances:
            if inst.view is not None and parse_spec(inst.view).token != token:
                raise AdapterSchemaError(
                    f"{out_path}: image {image_id} result tagged {inst.view!r} in a {token!r} job"
                )
            insts.append(type(inst)(inst.box, inst.score, inst.label, inst.mask, token))
        out[image_id] = ps.replace(insts, token)
    return out


def run_train(endpoint: AdapterEndpoint, manifest: DatasetManifest, workdir=".") -> Path:
    """Train on a labeled manifest; returns the path of the artifact the adapter wrote."""
    if endpoint.role != "train":
        raise AdapterPreconditionError(f"endpoint role is {endpoint.role!r}, expected 'train'")
    if manifest.annotations is None or len(manifest) == 0:
        raise AdapterPreconditionError("training manifest has no labeled images")
    unlabeled = [i for i, a in manifest.annotations.items() if not a]
    if unlabeled:
        raise AdapterPreconditionError(f"training images without annotations: {unlabeled[:5]}")
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    digest = manifest_hash(manifest)
    mpath = save_coco(manifest, workdir / f"train-{digest[:16]}.json")
    out_path = workdir / f"model-{digest[:16]}"
    job_path = workdir / f"train-{digest[:16]}.job.json"
    job_path.write_text(json.dumps(train_job_json(mpath, out_path), sort_keys=True, indent=2) + "\n")
    if out_path.is_dir():
        shutil.rmtree(out_path)
    elif out_path.exists():
        out_path.unlink()
    endpoint.invoke(job_path, out_path, workdir)
    if not out_path.exists():
        raise AdapterError(f"adapter exited cleanly but did not create the artifact {out_path}")
    return out_path
