"""Evaluation: per-class IoU / mIoU for semantic masks, before/after-matching
accuracy for instance assignment.

The confusion matrix accumulates globally across the whole mask list (the
standard VOC protocol), never per image. Rows are ground truth, columns are
prediction, both indexed by position in the evaluated class-id list; one
trailing bucket catches ids outside the list so the matrix total always
equals the number of non-ignored pixels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .instance_assign import AssignmentResult
from .tensor_store import LabelMask


@dataclass
class EvalReport:
    class_ids: list[int]
    per_class_iou: dict[int, float | None]  # None: class absent from pred and GT everywhere
    miou: float
    confusion: np.ndarray  # (C+1, C+1) int64, last index = ids outside class_ids
    total_pixels: int  # non-ignored
    ignored_pixels: int
    undefined_classes: list[int] = field(default_factory=list)
    bf_acc: float | None = None
    af_acc: float | None = None

    def to_json(self) -> str:
        payload = {
            "class_ids": self.class_ids,
            "per_class_iou": {str(k): v for k, v in self.per_class_iou.items()},
            "miou": self.miou,
            "miou_over": [c for c in self.class_ids if c not in self.undefined_classes],
            "undefined_classes": self.undefined_classes,
            "confusion": self.confusion.tolist(),
            "total_pixels": self.total_pixels,
            "ignored_pixels": self.ignored_pixels,
            "bf_acc": self.bf_acc,
            "af_acc": self.af_acc,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def format_table(self) -> str:
        lines = [f"{'class':>8}  {'iou':>8}"]
        for cid in self.class_ids:
            iou = self.per_class_iou[cid]
            lines.append(f"{cid:>8}  " + (f"{iou:>8.4f}" if iou is not None else "   undef"))
        lines.append(f"{'mIoU':>8}  {self.miou:>8.4f}")
        if self.bf_acc is not None:
            lines.append(f"{'bf_acc':>8}  {self.bf_acc:>8.4f}")
        if self.af_acc is not None:
            lines.append(f"{'af_acc':>8}  {self.af_acc:>8.4f}")
        return "\n".join(lines)


def miou(
    preds: list[LabelMask],
    gts: list[LabelMask],
    class_ids: list[int],
    ignore_id: int = 255,
) -> EvalReport:
    """Dataset-global IoU over the given class ids; ``ignore_id`` pixels drop out.

    A class with no pixels in either predictions or ground truth anywhere in
    the set has undefined IoU: it is flagged and excluded from the mean.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    if not preds:
        raise ValueError("empty evaluation set")
    if len(set(class_ids)) != len(class_ids):
        raise ValueError("duplicate class ids")
    if ignore_id in class_ids:
        raise ValueError("ignore_id cannot be evaluated")
    c = len(class_ids)
    lut = np.full(256, c, dtype=np.int64)  # unknown ids fall into the trailing bucket
    for pos, cid in enumerate(class_ids):
        if not 0 <= cid <= 255:
            raise ValueError(f"class id {cid} outside uint8 range")
        lut[cid] = pos
    confusion = np.zeros((c + 1, c + 1), dtype=np.int64)
    ignored = 0
    for pred, gt in zip(preds, gts):
        if pred.labels.shape != gt.labels.shape:
            raise ValueError(
                f"mask dims differ: pred {pred.labels.shape} vs gt {gt.labels.shape}"
            )
        keep = gt.labels != ignore_id
        ignored += int((~keep).sum())
        gt_idx = lut[gt.labels[keep]]
        pred_idx = lut[pred.labels[keep]]
        joint = np.bincount(gt_idx * (c + 1) + pred_idx, minlength=(c + 1) ** 2)
        confusion += joint.reshape(c + 1, c + 1)
    per_class: dict[int, float | None] = {}
    undefined: list[int] = []
    defined: list[float] = []
    for pos, cid in enumerate(class_ids):
        tp = int(confusion[pos, pos])
        fn = int(confusion[pos, :].sum()) - tp
        fp = int(confusion[:, pos].sum()) - tp
        if tp + fp + fn == 0:
            per_class[cid] = None
            undefined.append(cid)
            continue
        iou = tp / (tp + fp + fn)
        per_class[cid] = iou
        defined.append(iou)
    return EvalReport(
        class_ids=list(class_ids),
        per_class_iou=per_class,
        miou=float(np.mean(defined)) if defined else float("nan"),
        confusion=confusion,
        total_pixels=int(confusion.sum()),
        ignored_pixels=ignored,
        undefined_classes=undefined,
    )


def instance_accuracy(
    results: list[AssignmentResult],
    gt_segments: list[dict[str, int]],
) -> tuple[float | None, float | None]:
    """(bf_acc, af_acc): per-instance hit rates of the greedy and the matched
    assignments, paired scene by scene with the ground-truth segment maps.

    An instance counts as a hit when its ground-truth segment is among its
    chosen segments. A mode with no results reports None.
    """
    if not results:
        raise ValueError("empty scene list")
    if len(results) != len(gt_segments):
        raise ValueError(f"{len(results)} results vs {len(gt_segments)} ground truths")
    hits = {"greedy": 0, "hungarian": 0}
    totals = {"greedy": 0, "hungarian": 0}
    for result, truth in zip(results, gt_segments):
        if result.mode not in hits:
            raise ValueError(f"unknown assignment mode {result.mode!r}")
        for entry in result.entries:
            if entry.label not in truth:
                raise ValueError(f"no ground-truth segment for instance {entry.label!r}")
            totals[result.mode] += 1
            if truth[entry.label] in entry.segments:
                hits[result.mode] += 1
    bf = hits["greedy"] / totals["greedy"] if totals["greedy"] else None
    af = hits["hungarian"] / totals["hungarian"] if totals["hungarian"] else None
    return bf, af
