"""AP@0.5 evaluation, bucketed curves, and report files."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from .dataset import FragmentCache, SceneBatch, render_vehicle
from .detect_loss import DetectionSet, iou
from .mesh_render import TextureMap

IOU_THRESHOLD = 0.5
AXES = ("elevation", "azimuth", "distance", "fog_density", "sun_altitude")


def match_detections(dets: DetectionSet, gt) -> np.ndarray:
    """Greedy matching in descending confidence; at most one true positive per image."""
    if len(dets) == 0:
        return np.zeros(0, dtype=bool)
    conf = dets.confidence.detach().cpu().numpy()
    overlaps = iou(dets.boxes.detach(), torch.as_tensor(gt, dtype=dets.boxes.dtype)).cpu().numpy()
    matched = np.zeros(len(conf), dtype=bool)
    taken = False
    for k in np.argsort(-conf, kind="stable"):
        if not taken and overlaps[k] >= IOU_THRESHOLD:
            matched[k] = True
            taken = True
    return matched


def ap_at_05(detections, gts) -> float:
    """All-point interpolated AP at IoU 0.5 for single-object images.

    Args:
        detections: one ``DetectionSet`` per image (confidence = car score * objectness).
        gts: (N, 4) ground-truth boxes, one per image.

    Tied confidences are treated as a single threshold, so the curve only has
    points that some confidence cut-off can actually produce.
    """
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    n_gt = len(gts)
    if n_gt == 0:
        raise ValueError("AP is undefined without ground-truth boxes")
    if len(detections) != n_gt:
        raise ValueError(f"{len(detections)} detection sets for {n_gt} images")
    confs, tps = [], []
    for dets, gt in zip(detections, gts):
        if len(dets) == 0:
            continue
        confs.append(dets.confidence.detach().cpu().numpy().astype(np.float64))
        tps.append(match_detections(dets, gt))
    if not confs:
        return 0.0
    conf = np.concatenate(confs)
    tp = np.concatenate(tps)
    order = np.argsort(-conf, kind="stable")
    conf, tp = conf[order], tp[order]
    cum_tp = np.cumsum(tp)
    cum_n = np.arange(1, len(tp) + 1)
    last_of_group = np.r_[conf[1:] != conf[:-1], True]
    recall = [Fraction(int(t), n_gt) for t in cum_tp[last_of_group]]
    precision = [Fraction(int(t), int(n)) for t, n in zip(cum_tp[last_of_group], cum_n[last_of_group])]
    return float(_area_under_envelope(recall, precision))


def _area_under_envelope(recall, precision):
    ap = Fraction(0)
    best = Fraction(0)
    envelope = [Fraction(0)] * len(precision)
    for i in range(len(precision) - 1, -1, -1):
        best = max(best, precision[i])
        envelope[i] = best
    prev = Fraction(0)
    for r, p in zip(recall, envelope):
        ap += (r - prev) * p
        prev = r
    return ap


@dataclass
class EvalResult:
    """Per-sample evaluation records plus split-level AP."""

    split: str
    texture_name: str
    records: list = field(default_factory=list)
    ap: float = 0.0

    @property
    def sample_ids(self):
        return [r["id"] for r in self.records]

    def detections(self):
        return [r["detections"] for r in self.records]

    def gts(self):
        return np.array([r["gt"] for r in self.records], dtype=np.float64)


def evaluate_texture(detector, mesh_cache: FragmentCache, texture: TextureMap, batch: SceneBatch,
                     split: str, texture_name: str = "texture") -> EvalResult:
    """Repaint every scene of ``batch`` with ``texture`` through the oracle and run the detector."""
    _, backgrounds = batch.fg_bg()
    images = np.empty_like(batch.images)
    for i, (pose, weather, sun_az) in enumerate(zip(batch.poses, batch.weathers, batch.sun_azimuths)):
        images[i] = render_vehicle(mesh_cache(pose), texture, weather, sun_az) + backgrounds[i]
    detections = detector.predict(np.clip(images, 0.0, 1.0))
    axis_values = {axis: batch.axis_values(axis) for axis in AXES}
    result = EvalResult(split=split, texture_name=texture_name)
    for i, dets in enumerate(detections):
        result.records.append({
            "id": batch.ids[i],
            "pose": batch.poses[i].to_dict(),
            "weather": batch.weathers[i].to_dict(),
            "axes": {axis: float(values[i]) for axis, values in axis_values.items()},
            "detections": dets,
            "gt": [float(v) for v in batch.boxes[i]],
            "matched": bool(match_detections(dets, batch.boxes[i]).any()),
        })
    result.ap = ap_at_05(result.detections(), result.gts())
    return result


def bucketed_ap(result: EvalResult, axis: str):
    """Ordered ``[(axis_value, ap, count), ...]`` with one bucket per grid value."""
    if axis not in AXES:
        raise ValueError(f"unknown axis '{axis}'; choose from {list(AXES)}")
    buckets = {}
    for rec in result.records:
        buckets.setdefault(rec["axes"][axis], []).append(rec)
    series = []
    for value in sorted(buckets):
        recs = buckets[value]
        ap = ap_at_05([r["detections"] for r in recs], np.array([r["gt"] for r in recs]))
        series.append((value, ap, len(recs)))
    return series


def emit_report(results: dict, out_dir, metadata: dict | None = None, plots: bool = True):
    """Write summary table, per-axis curve CSVs and plots.

    Args:
        results: ``{texture_name: {split: EvalResult}}``; every texture must cover
            the same splits over identical sample ids.
        out_dir: destination directory.
        metadata: extra provenance (config hash, seed) copied into the summary.

    Returns:
        List of written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = list(results)
    if not names:
        raise ValueError("no results to report")
    splits = sorted(results[names[0]])
    for name in names:
        if sorted(results[name]) != splits:
            raise ValueError(f"texture '{name}' was evaluated on different splits")
        for split in splits:
            if results[name][split].sample_ids != results[names[0]][split].sample_ids:
                raise ValueError(f"texture '{name}' split '{split}' uses a different sample set")

    written = []
    summary = {
        "format": "uvcamo-report",
        "version": 1,
        "metadata": metadata or {},
        "columns": splits,
        "rows": [{"texture": name, **{split: round(results[name][split].ap, 6) for split in splits}}
                 for name in names],
        "samples": {split: len(results[names[0]][split].records) for split in splits},
    }
    path = out_dir / "summary.json"
    path.write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    written.append(path)

    lines = ["| texture | " + " | ".join(splits) + " |", "|---" * (len(splits) + 1) + "|"]
    for row in summary["rows"]:
        lines.append(f"| {row['texture']} | " + " | ".join(f"{row[s]:.3f}" for s in splits) + " |")
    path = out_dir / "summary.md"
    path.write_text("\n".join(lines) + "\n")
    written.append(path)

    for split in splits:
        for axis in AXES:
            curves = {name: bucketed_ap(results[name][split], axis) for name in names}
            path = out_dir / f"curve_{split}_{axis}.csv"
            with path.open("w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow([axis, "count", *names])
                for k, (value, _, count) in enumerate(curves[names[0]]):
                    writer.writerow([f"{value:g}", count, *(f"{curves[n][k][1]:.6f}" for n in names)])
            written.append(path)
            if plots:
                written.append(_plot_curves(curves, axis, split, out_dir / f"curve_{split}_{axis}.png"))
    return written


def _plot_curves(curves, axis, split, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    for name, series in curves.items():
        xs = [v for v, _, _ in series]
        ax.plot(xs, [a for _, a, _ in series], marker="o", label=name)
    ax.set_xlabel(axis)
    ax.set_ylabel("car AP@0.5")
    ax.set_ylim(0, 1.05)
    ax.set_title(split)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)
    return path
