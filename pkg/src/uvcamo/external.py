"""Evaluation-only adapter for third-party detectors run as a subprocess.

Protocol: the command is invoked once per batch with a directory argument::

    <command...> <image_dir>

``image_dir`` holds ``000000.png``, ``000001.png``, ... (RGB, 8-bit). The
command prints one JSON object per detection on stdout::

    {"image": "000000.png", "box": [x1, y1, x2, y2], "score": 0.93}

``score`` is the car confidence. A detector that reports objectness and class
confidence separately may send ``"objectness"`` and ``"car"`` instead. Lines
that are blank or start with ``#`` are ignored; a nonzero exit status is an error.
"""
from __future__ import annotations

import json
import shlex
import subprocess
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .detect_loss import DetectionSet, nms_filter
from .validation import check_images


class ExternalDetectorError(RuntimeError):
    pass


def parse_detections(lines, names):
    """Group JSON-lines detection records by image name into ``DetectionSet``s."""
    index = {name: i for i, name in enumerate(names)}
    grouped = [[] for _ in names]
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            rec = json.loads(line)
            image = rec["image"]
            box = [float(v) for v in rec["box"]]
            if "score" in rec:
                obj, car = 1.0, float(rec["score"])
            else:
                obj, car = float(rec["objectness"]), float(rec["car"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
            raise ExternalDetectorError(f"stdout line {lineno}: malformed detection record ({err})") from None
        if image not in index:
            raise ExternalDetectorError(f"stdout line {lineno}: unknown image '{image}'")
        if len(box) != 4:
            raise ExternalDetectorError(f"stdout line {lineno}: box needs 4 coordinates")
        grouped[index[image]].append((box, obj, car))
    out = []
    for recs in grouped:
        if not recs:
            out.append(DetectionSet.empty())
            continue
        boxes, obj, car = zip(*recs)
        out.append(DetectionSet(list(boxes), list(obj), [[c, 1.0 - c] for c in car]))
    return out


class ExternalDetector:
    """Wraps a detector command so it can stand in for ``ToyDetector.predict``.

    Args:
        command: argv list or a shell-style string.
        nms_iou, conf_floor: post-filter applied to the returned boxes, like the
            built-in detector's evaluation view.
        timeout: seconds per batch.
    """

    def __init__(self, command, nms_iou=0.5, conf_floor=0.05, timeout=600):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.nms_iou = nms_iou
        self.conf_floor = conf_floor
        self.timeout = timeout

    def predict(self, X):
        X = check_images(X)
        with tempfile.TemporaryDirectory(prefix="uvcamo-ext-") as tmp:
            names = []
            for i, img in enumerate(X):
                name = f"{i:06d}.png"
                Image.fromarray(np.round(img * 255).astype(np.uint8)).save(Path(tmp) / name)
                names.append(name)
            try:
                proc = subprocess.run([*self.command, tmp], capture_output=True, text=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as err:
                raise ExternalDetectorError(f"could not run {self.command}: {err}") from None
        if proc.returncode != 0:
            raise ExternalDetectorError(
                f"{self.command} exited with status {proc.returncode}: {proc.stderr.strip()[-500:]}"
            )
        dets = parse_detections(proc.stdout.splitlines(), names)
        return [nms_filter(d, self.nms_iou, self.conf_floor) for d in dets]
