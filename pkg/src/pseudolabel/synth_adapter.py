"""Reference adapter speaking the subprocess protocol, backed by the synthetic detectors.

Usage as a command template::

    python -m pseudolabel.synth_adapter teacher --world gt.json --noise '{"jitter_sigma": 0.02}' {job} {out}
    python -m pseudolabel.synth_adapter student-train --world gt.json {job} {out}
    python -m pseudolabel.synth_adapter student-predict --world gt.json {job} {out}
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .adapter import PredictJob
from .dataio import load_coco, save_results
from .synthdet import NoiseModel, StudentModel, fit_student, noisy_detect, scenes_from_manifest, student_detect


def _predict(args, detect) -> None:
    job = PredictJob.from_json(json.loads(Path(args.job).read_text()))
    world = scenes_from_manifest(load_coco(args.world))
    images = load_coco(job.manifest_path)
    preds = [detect(world[i], job) for i in images.image_ids]
    save_results(preds, args.out)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="synth_adapter")
    p.add_argument("role", choices=["teacher", "student-train", "student-predict"])
    p.add_argument("--world", required=True, help="ground-truth manifest of the synthetic scenes")
    p.add_argument("--noise", default="{}", help="teacher NoiseModel fields as JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jitter-sigma", type=float, default=0.005)
    p.add_argument("--score-sigma", type=float, default=0.02)
    p.add_argument("job")
    p.add_argument("out")
    args = p.parse_args(argv)

    try:
        if args.role == "teacher":
            noise = NoiseModel.from_dict(json.loads(args.noise))
            _predict(args, lambda s, job: noisy_detect(s, noise, job.augmentation, args.seed, label=job.prompt))
        elif args.role == "student-predict":
            def detect(s, job):
                return student_detect(s, StudentModel.load(job.model_path), job.augmentation, job.prompt)
            _predict(args, detect)
        else:
            job = json.loads(Path(args.job).read_text())
            world = scenes_from_manifest(load_coco(args.world))
            model = fit_student(load_coco(job["manifest"]), world, args.jitter_sigma, args.score_sigma, args.seed)
            Path(args.out).write_text(model.to_json())
    except Exception as exc:  # adapter contract: report on stderr, nonzero exit
        print(f"synth_adapter {args.role}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
