"""mAP@IoU evaluation, per-pose inference and tracking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .field import SamplingConfig
from .geometry import iou_matrix
from .matching import LossConfig
from .model import Detector, DetectionSet, build_inputs
from .train import mean_loss

THRESHOLDS = (0.1, 0.5, 0.9)


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP for detections already sorted by descending score."""
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class Detections:
    """Numpy detections for one view: corners (J, 8, 3) and class probabilities (J, C + 1)."""

    boxes: np.ndarray
    probs: np.ndarray

    @classmethod
    def from_set(cls, det: DetectionSet) -> "Detections":
        return cls(np.asarray(det.boxes.data, dtype=np.float64), det.probabilities())


def class_ap(dets: list[Detections], gts: list, class_id: int, threshold: float) -> float | None:
    """AP for one class across views, or None if the class has no ground truth."""
    gt_boxes = [np.array([g.box.corners for g in gt if g.class_id == class_id]).reshape(-1, 8, 3) for gt in gts]
    n_gt = sum(len(b) for b in gt_boxes)
    if n_gt == 0:
        return None
    entries = []  # (score, view, det)
    for v, d in enumerate(dets):
        for j in range(d.boxes.shape[0]):
            entries.append((-d.probs[j, class_id], v, j))
    entries.sort()
    ious = [iou_matrix(d.boxes, g) if len(g) else np.zeros((d.boxes.shape[0], 0)) for d, g in zip(dets, gt_boxes)]
    claimed = [np.zeros(len(g), dtype=bool) for g in gt_boxes]
    tp = np.zeros(len(entries))
    for k, (_, v, j) in enumerate(entries):
        if not len(gt_boxes[v]):
            continue
        cand = np.where(~claimed[v] & (ious[v][j] >= threshold), ious[v][j], -1.0)
        best = int(np.argmax(cand))
        if cand[best] >= 0:
            claimed[v][best] = True
            tp[k] = 1
    return average_precision(tp, n_gt)


@dataclass
class MetricsReport:
    thresholds: tuple
    map: dict                 # threshold -> mAP
    per_class: dict           # threshold -> {class name: AP}
    loss: float | None = None
    loss_curve: list = field(default_factory=list)

    @property
    def average(self) -> float:
        return float(np.mean([self.map[t] for t in self.thresholds]))

    def row(self, variant: str) -> list:
        return [variant] + [self.map[t] for t in self.thresholds] + [self.average]

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "map": {f"{t:g}": self.map[t] for t in self.thresholds},
            "average": self.average,
            "per_class": {f"{t:g}": self.per_class[t] for t in self.thresholds},
            "loss": self.loss,
        }


def compute_map(dets: list[Detections], gts: list, class_table, thresholds=THRESHOLDS) -> MetricsReport:
    if not dets:
        raise ValueError("cannot evaluate an empty dataset")
    maps, per_class = {}, {}
    for t in thresholds:
        aps = {}
        for c, name in enumerate(class_table):
            ap = class_ap(dets, gts, c, t)
            if ap is not None:
                aps[name] = ap
        per_class[t] = aps
        maps[t] = float(np.mean(list(aps.values()))) if aps else 0.0
    return MetricsReport(tuple(thresholds), maps, per_class)


def detect(model: Detector, views, scfg: SamplingConfig) -> list[Detections]:
    return [Detections.from_set(model.forward(v.scene, v.pose, scfg)) for v in views]


def evaluate(model: Detector, views, scfg: SamplingConfig, lcfg: LossConfig | None = None,
             thresholds=THRESHOLDS) -> MetricsReport:
    if not views:
        raise ValueError("cannot evaluate an empty dataset")
    inputs = [build_inputs(v.scene, v.pose, model.cfg, scfg) for v in views]
    dets = [Detections.from_set(model.forward_tokens(x)) for x in inputs]
    gts = [v.scene.gt for v in views]
    report = compute_map(dets, gts, views[0].scene.class_table, thresholds)
    if lcfg is not None:
        report.loss = mean_loss(model, inputs, gts, lcfg)
    return report


def detections_to_json(d: Detections, class_table) -> list[dict]:
    """Per-query records sorted by confidence: corners, best real class and its score."""
    out = []
    for j in range(d.boxes.shape[0]):
        real = d.probs[j, :-1]
        c = int(np.argmax(real))
        out.append({
            "query": j,
            "corners": d.boxes[j].tolist(),
            "class_id": c,
            "class": class_table[c],
            "score": float(real[c]),
            "no_object": float(d.probs[j, -1]),
        })
    out.sort(key=lambda r: (-r["score"], r["query"]))
    return out


def track(model: Detector, scene, poses, scfg: SamplingConfig) -> list[Detections]:
    """Independent per-pose inference along a camera path."""
    return [Detections.from_set(model.forward(scene, p, scfg)) for p in poses]
