"""Tracking metrics: per-frame IoU matching, CLEAR MOTA / ID switches,
identity-level IDF1, and association accuracy on oracle detections."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.optimize import linear_sum_assignment

from .dataset import MOTRow
from .errors import UndefinedMetricError

_FORBIDDEN = 1e6


def hungarian(cost) -> tuple[list[tuple[int, int]], float]:
    """Minimum-cost one-to-one assignment of size ``min(N, M)``."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    if cost.size == 0:
        return [], 0.0
    rows, cols = linear_sum_assignment(cost)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols)]
    return pairs, float(cost[rows, cols].sum())


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU of ``x, y, w, h`` boxes."""
    a = np.asarray(a, np.float64).reshape(-1, 4)
    b = np.asarray(b, np.float64).reshape(-1, 4)
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None]) - np.maximum(a[:, 0, None], b[None, :, 0])
    ih = np.minimum(ay2[:, None], by2[None]) - np.maximum(a[:, 1, None], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


@dataclass
class FrameData:
    gt_ids: np.ndarray
    gt_boxes: np.ndarray
    pred_ids: np.ndarray
    pred_boxes: np.ndarray


@dataclass
class FrameMatch:
    pairs: list[tuple[int, int]]  # (pred id, gt id)
    fp: int
    fn: int


def match_frame(pred_boxes, pred_ids, gt_boxes, gt_ids, iou_threshold: float = 0.5) -> FrameMatch:
    pred_ids = np.asarray(pred_ids)
    gt_ids = np.asarray(gt_ids)
    if len(pred_ids) == 0 or len(gt_ids) == 0:
        return FrameMatch([], len(pred_ids), len(gt_ids))
    iou = iou_matrix(pred_boxes, gt_boxes)
    ok = iou >= iou_threshold
    cost = np.where(ok, 1.0 - iou, _FORBIDDEN)
    pairs = [
        (int(pred_ids[r]), int(gt_ids[c]))
        for r, c in hungarian(cost)[0]
        if ok[r, c]
    ]
    return FrameMatch(pairs, len(pred_ids) - len(pairs), len(gt_ids) - len(pairs))


@dataclass
class ClearResult:
    num_gt: int
    fp: int
    fn: int
    id_switches: int
    matches: int

    @property
    def mota(self) -> float:
        if self.num_gt == 0:
            raise UndefinedMetricError("MOTA is undefined without ground truth")
        return 1.0 - (self.fn + self.fp + self.id_switches) / self.num_gt


def clear_mot(frames: Iterable[FrameData], iou_threshold: float = 0.5) -> ClearResult:
    last: dict[int, int] = {}
    num_gt = fp = fn = idsw = matches = 0
    for fd in frames:
        m = match_frame(fd.pred_boxes, fd.pred_ids, fd.gt_boxes, fd.gt_ids, iou_threshold)
        num_gt += len(fd.gt_ids)
        fp += m.fp
        fn += m.fn
        matches += len(m.pairs)
        for pid, gid in m.pairs:
            if gid in last and last[gid] != pid:
                idsw += 1
            last[gid] = pid
    return ClearResult(num_gt, fp, fn, idsw, matches)


def mota(frames, iou_threshold: float = 0.5) -> float:
    return clear_mot(frames, iou_threshold).mota


def id_switches(frames, iou_threshold: float = 0.5) -> int:
    return clear_mot(frames, iou_threshold).id_switches


@dataclass
class IdentityResult:
    idtp: int
    idfp: int
    idfn: int

    @property
    def idf1(self) -> float:
        denom = 2 * self.idtp + self.idfp + self.idfn
        if denom == 0:
            raise UndefinedMetricError("IDF1 is undefined with no detections and no ground truth")
        return 2 * self.idtp / denom


def overlap_counts(frames: Iterable[FrameData], iou_threshold: float = 0.5):
    """Co-occurrence counts ``(gt id, pred id) -> frames with IoU >= threshold`` and per-id totals."""
    counts: dict[tuple[int, int], int] = defaultdict(int)
    gt_total: dict[int, int] = defaultdict(int)
    pred_total: dict[int, int] = defaultdict(int)
    for fd in frames:
        for g in fd.gt_ids:
            gt_total[int(g)] += 1
        for p in fd.pred_ids:
            pred_total[int(p)] += 1
        if len(fd.gt_ids) and len(fd.pred_ids):
            iou = iou_matrix(fd.gt_boxes, fd.pred_boxes)
            for gi, pi in zip(*np.nonzero(iou >= iou_threshold)):
                counts[(int(fd.gt_ids[gi]), int(fd.pred_ids[pi]))] += 1
    return counts, gt_total, pred_total


def identity_metrics(frames, iou_threshold: float = 0.5) -> IdentityResult:
    frames = list(frames)
    counts, gt_total, pred_total = overlap_counts(frames, iou_threshold)
    gts = sorted(gt_total)
    preds = sorted(pred_total)
    idtp = 0
    if gts and preds:
        weight = np.zeros((len(gts), len(preds)))
        gi = {g: i for i, g in enumerate(gts)}
        pi = {p: j for j, p in enumerate(preds)}
        for (g, p), c in counts.items():
            weight[gi[g], pi[p]] = c
        rows, cols = linear_sum_assignment(weight, maximize=True)
        idtp = int(weight[rows, cols].sum())
    return IdentityResult(idtp, sum(pred_total.values()) - idtp, sum(gt_total.values()) - idtp)


def idf1(frames, iou_threshold: float = 0.5) -> float:
    return identity_metrics(frames, iou_threshold).idf1


def association_accuracy(frames: Iterable[FrameData], iou_threshold: float = 0.5) -> float:
    """Share of non-first appearances of each GT track carrying the id it got at its first appearance.

    A GT detection left unmatched (dropped by the tracker) counts as wrong.
    """
    first: dict[int, int | None] = {}
    hits = total = 0
    for fd in frames:
        m = match_frame(fd.pred_boxes, fd.pred_ids, fd.gt_boxes, fd.gt_ids, iou_threshold)
        pred_of = {g: p for p, g in m.pairs}
        for g in (int(x) for x in fd.gt_ids):
            p = pred_of.get(g)
            if g not in first:
                first[g] = p
                continue
            total += 1
            if p is not None and p == first[g]:
                hits += 1
    return hits / total if total else 1.0


def rows_to_frames(gt_rows: list[MOTRow], pred_rows: list[MOTRow], num_frames: int | None = None) -> list[FrameData]:
    """Group MOT rows by frame; GT rows with negative ids (false positives) are dropped."""
    gt_by = defaultdict(list)
    pred_by = defaultdict(list)
    for r in gt_rows:
        if r.track_id >= 0:
            gt_by[r.frame].append(r)
    for r in pred_rows:
        pred_by[r.frame].append(r)
    last = max([*gt_by, *pred_by], default=0)
    if num_frames is not None:
        last = max(last, num_frames)
    out = []
    for f in range(1, last + 1):
        g, p = gt_by.get(f, []), pred_by.get(f, [])
        out.append(
            FrameData(
                np.array([r.track_id for r in g], np.int64),
                np.array([r.box for r in g], np.float64).reshape(-1, 4),
                np.array([r.track_id for r in p], np.int64),
                np.array([r.box for r in p], np.float64).reshape(-1, 4),
            )
        )
    return out


@dataclass
class SequenceMetrics:
    name: str
    idf1: float
    mota: float
    id_switches: int
    association_accuracy: float
    idtp: int
    idfp: int
    idfn: int
    fp: int
    fn: int
    num_gt: int


@dataclass
class EvalReport:
    idf1: float
    mota: float
    id_switches: int
    association_accuracy: float
    per_sequence: list[SequenceMetrics] = field(default_factory=list)

    def text(self) -> str:
        lines = [f"{'sequence':<16} {'IDF1':>8} {'MOTA':>8} {'IDSW':>6} {'AssocAcc':>9}"]
        for s in self.per_sequence:
            lines.append(f"{s.name:<16} {s.idf1:8.4f} {s.mota:8.4f} {s.id_switches:6d} {s.association_accuracy:9.4f}")
        lines.append(f"{'OVERALL':<16} {self.idf1:8.4f} {self.mota:8.4f} {self.id_switches:6d} {self.association_accuracy:9.4f}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str | Path) -> None:
        fields = list(SequenceMetrics.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(fields)
            for s in self.per_sequence:
                w.writerow([getattr(s, k) for k in fields])


def evaluate_sequence(name: str, frames: list[FrameData], iou_threshold: float = 0.5) -> SequenceMetrics:
    clear = clear_mot(frames, iou_threshold)
    ident = identity_metrics(frames, iou_threshold)
    return SequenceMetrics(
        name,
        ident.idf1,
        clear.mota,
        clear.id_switches,
        association_accuracy(frames, iou_threshold),
        ident.idtp,
        ident.idfp,
        ident.idfn,
        clear.fp,
        clear.fn,
        clear.num_gt,
    )


def evaluate(pairs: dict[str, list[FrameData]], iou_threshold: float = 0.5) -> EvalReport:
    """Per-sequence metrics plus pooled totals over all sequences."""
    per = [evaluate_sequence(name, frames, iou_threshold) for name, frames in sorted(pairs.items())]
    num_gt = sum(s.num_gt for s in per)
    if num_gt == 0:
        raise UndefinedMetricError("no ground truth in any sequence")
    idtp = sum(s.idtp for s in per)
    idfp = sum(s.idfp for s in per)
    idfn = sum(s.idfn for s in per)
    idsw = sum(s.id_switches for s in per)
    mota_all = 1.0 - (sum(s.fn for s in per) + sum(s.fp for s in per) + idsw) / num_gt
    # pooled association accuracy: weight each sequence by its non-first appearances
    weights = [s.num_gt - len({int(g) for fd in pairs[s.name] for g in fd.gt_ids}) for s in per]
    wsum = sum(weights)
    assoc = sum(w * s.association_accuracy for w, s in zip(weights, per)) / wsum if wsum else 1.0
    return EvalReport(IdentityResult(idtp, idfp, idfn).idf1, mota_all, idsw, assoc, per)
