"""Detection and selection metrics: IoU, greedy matching, AP@0.5, mean IoU,
recall, the composite checkpoint-selection score, MSTP accuracy, the two naive
baselines, McNemar's exact paired test, and multi-seed summaries.

All operations are pure; aggregation iterates frames in caller-supplied order,
so feeding the same prediction files twice yields bit-identical reports.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats as scipy_stats

from .dataset.types import Box, FrameRecord, ScoredBox

DEFAULT_IOU_THRESHOLD = 0.5
DEFAULT_SCORE_THRESHOLD = 0.5


class MetricError(Exception):
    pass


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    ix1, iy1 = max(a.x1, b.x1), max(a.y1, b.y1)
    ix2, iy2 = min(a.x2, b.x2), min(a.y2, b.y2)
    iw, ih = ix2 - ix1, iy2 - iy1
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass
class MatchResult:
    """Greedy detection-to-ground-truth assignment at an IoU threshold."""

    pairs: list[tuple[int, int, float]] = field(default_factory=list)  # (det, gt, iou)
    unmatched_dets: list[int] = field(default_factory=list)
    unmatched_gts: list[int] = field(default_factory=list)


def match(
    dets: Sequence[ScoredBox], gts: Sequence[Box], iou_thr: float = DEFAULT_IOU_THRESHOLD
) -> MatchResult:
    """Detections in descending score order each take the free ground truth of
    highest IoU >= threshold. Score ties keep input order; IoU ties take the
    lowest ground-truth index."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken = [False] * len(gts)
    result = MatchResult()
    for di in order:
        best_gt, best_iou = -1, 0.0
        for gi, gt in enumerate(gts):
            if taken[gi]:
                continue
            v = iou(dets[di].box, gt)
            if v >= iou_thr and v > best_iou:
                best_gt, best_iou = gi, v
        if best_gt >= 0:
            taken[best_gt] = True
            result.pairs.append((di, best_gt, best_iou))
        else:
            result.unmatched_dets.append(di)
    result.unmatched_gts = [gi for gi, t in enumerate(taken) if not t]
    return result


def average_precision(
    frames: Sequence[tuple[Sequence[ScoredBox], Sequence[Box]]],
    iou_thr: float = DEFAULT_IOU_THRESHOLD,
) -> float:
    """Single-class AP over the full score-sorted sweep, exact all-points area.

    `frames` pairs each frame's detections with its ground truths; scoring is
    global (one precision-recall curve over all frames).
    """
    total_gts = sum(len(gts) for _, gts in frames)
    if total_gts == 0:
        raise MetricError("average precision is undefined with zero ground truths")
    records = []  # (score, frame index, det index)
    for fi, (dets, _) in enumerate(frames):
        for di, det in enumerate(dets):
            records.append((det.score, fi, di))
    if not records:
        return 0.0
    records.sort(key=lambda r: (-r[0], r[1], r[2]))
    taken = [[False] * len(gts) for _, gts in frames]
    tp = np.zeros(len(records))
    for k, (_, fi, di) in enumerate(records):
        dets, gts = frames[fi]
        best_gt, best_iou = -1, 0.0
        for gi, gt in enumerate(gts):
            if taken[fi][gi]:
                continue
            v = iou(dets[di].box, gt)
            if v >= iou_thr and v > best_iou:
                best_gt, best_iou = gi, v
        if best_gt >= 0:
            taken[fi][best_gt] = True
            tp[k] = 1.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(records) + 1)
    recall_curve = cum_tp / total_gts
    # precision envelope, then exact area of the recall step function
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for k in range(len(records)):
        if recall_curve[k] > prev_r:
            ap += (recall_curve[k] - prev_r) * envelope[k]
            prev_r = recall_curve[k]
    return float(ap)


def mean_iou(matches: Iterable[MatchResult]) -> float:
    """Arithmetic mean of matched-pair IoUs across frames; errors on no matches."""
    values = [v for m in matches for (_, _, v) in m.pairs]
    if not values:
        raise MetricError("mean IoU is undefined with zero matched pairs")
    return float(np.mean(values))


def recall(matches: Iterable[MatchResult], total_gts: int) -> float:
    if total_gts < 1:
        raise MetricError("recall is undefined with zero ground truths")
    matched = sum(len(m.pairs) for m in matches)
    return matched / total_gts


@dataclass
class DetectionMetrics:
    map50: float
    mean_iou: float
    recall: float
    composite: float
    matched: int
    total_gts: int

    def to_json(self) -> dict:
        return {
            "map50": self.map50,
            "mean_iou": self.mean_iou,
            "recall": self.recall,
            "composite": self.composite,
            "matched": self.matched,
            "total_gts": self.total_gts,
        }


def evaluate_detections(
    frames: Sequence[tuple[Sequence[ScoredBox], Sequence[Box]]],
    iou_thr: float = DEFAULT_IOU_THRESHOLD,
    score_thr: float = DEFAULT_SCORE_THRESHOLD,
) -> DetectionMetrics:
    """The composite bundle used for checkpoint selection.

    AP consumes the full unthresholded ranking; mean IoU and recall are
    computed after filtering detections at the operating score threshold.
    With zero matched pairs the bundle reports mean IoU 0 rather than failing,
    since early training epochs routinely match nothing.
    """
    ap = average_precision(frames, iou_thr)
    filtered_matches = []
    total_gts = 0
    for dets, gts in frames:
        kept = [d for d in dets if d.score >= score_thr]
        filtered_matches.append(match(kept, gts, iou_thr))
        total_gts += len(gts)
    try:
        miou = mean_iou(filtered_matches)
    except MetricError:
        miou = 0.0
    rec = recall(filtered_matches, total_gts)
    matched = sum(len(m.pairs) for m in filtered_matches)
    return DetectionMetrics(
        map50=ap,
        mean_iou=miou,
        recall=rec,
        composite=(ap + miou + rec) / 3.0,
        matched=matched,
        total_gts=total_gts,
    )


def mstp_accuracy(
    chosen: dict[str, Box],
    frames: Sequence[FrameRecord],
    iou_thr: float = DEFAULT_IOU_THRESHOLD,
    exact: bool = False,
) -> float:
    """Fraction of frames whose chosen box hits the ground-truth MSTP.

    With ground-truth candidates pass exact=True (the chosen box must equal
    the MSTP box); for detector proposals a hit is IoU >= threshold.
    """
    if not frames:
        raise MetricError("no frames to evaluate")
    correct = 0
    for frame in frames:
        if frame.frame_id not in chosen:
            raise MetricError(f"no prediction for frame {frame.frame_id}")
        pick = chosen[frame.frame_id]
        target = frame.mstp.box
        if exact:
            correct += int(pick == target)
        else:
            correct += int(iou(pick, target) >= iou_thr)
    return correct / len(frames)


def baseline_random_expected(candidate_counts: Sequence[int]) -> float:
    """Analytic expectation of picking uniformly among each frame's k candidates."""
    if not candidate_counts:
        raise MetricError("no frames")
    if any(k < 1 for k in candidate_counts):
        raise MetricError("every frame needs at least one candidate")
    return float(np.mean([1.0 / k for k in candidate_counts]))


def baseline_centermost(frame_size: tuple[float, float], candidates: Sequence[Box]) -> int:
    """Index of the candidate whose center is nearest the image center; ties
    resolve to the lowest index."""
    if not candidates:
        raise MetricError("no candidates")
    cx, cy = frame_size[0] / 2.0, frame_size[1] / 2.0
    dists = [(b.center[0] - cx) ** 2 + (b.center[1] - cy) ** 2 for b in candidates]
    return int(np.argmin(dists))


def mcnemar_exact(outcomes: Iterable[tuple[bool, bool]]) -> float:
    """Two-sided exact McNemar p-value from per-frame (method, baseline) hits."""
    b = c = 0
    for method_ok, baseline_ok in outcomes:
        if method_ok and not baseline_ok:
            b += 1
        elif baseline_ok and not method_ok:
            c += 1
    return mcnemar_exact_from_counts(b, c)


def mcnemar_exact_from_counts(b: int, c: int) -> float:
    """Exact binomial two-sided test on discordant counts; p=1 when b+c=0."""
    n = b + c
    if n == 0:
        return 1.0
    m = min(b, c)
    tail = sum(math.comb(n, i) for i in range(m + 1)) / 2.0**n
    return min(1.0, 2.0 * tail)


@dataclass
class SeedSummary:
    mean: float
    std: float
    ci_low: float
    ci_high: float
    n: int

    def to_json(self) -> dict:
        return {
            "mean": self.mean,
            "std": self.std,
            "ci95": [self.ci_low, self.ci_high],
            "n": self.n,
        }


def multi_seed_summary(values: Sequence[float]) -> SeedSummary:
    """Mean, sample std (n-1) and a t-based 95% confidence interval."""
    n = len(values)
    if n < 2:
        raise MetricError("multi-seed summary needs at least two values")
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1))
    half = float(scipy_stats.t.ppf(0.975, n - 1)) * std / math.sqrt(n)
    return SeedSummary(mean=mean, std=std, ci_low=mean - half, ci_high=mean + half, n=n)


@dataclass
class EvalReport:
    """Per-variant metric bundle for one test set."""

    variant: str
    dataset: str
    seed: int
    map50: float
    mean_iou: float
    recall: float
    composite: float
    mstp_accuracy: float | None = None
    raf_accuracy: float | None = None
    baseline_random: float | None = None
    baseline_centermost: float | None = None
    mcnemar_p: float | None = None
    per_seed: list[float] | None = None
    seed_mean: float | None = None
    seed_std: float | None = None
    seed_ci95: list[float] | None = None

    def __post_init__(self):
        for name in ("map50", "mean_iou", "recall", "composite", "mstp_accuracy",
                     "raf_accuracy", "baseline_random", "baseline_centermost"):
            v = getattr(self, name)
            if v is not None and not (0.0 <= v <= 1.0):
                raise MetricError(f"{name}={v} outside [0,1]")
        expect = (self.map50 + self.mean_iou + self.recall) / 3.0
        if abs(self.composite - expect) > 1e-12:
            raise MetricError(f"composite {self.composite} != mean of metrics {expect}")

    def to_json(self) -> dict:
        out = {
            "variant": self.variant,
            "dataset": self.dataset,
            "seed": self.seed,
            "map50": self.map50,
            "mean_iou": self.mean_iou,
            "recall": self.recall,
            "composite": self.composite,
        }
        for name in ("mstp_accuracy", "raf_accuracy", "baseline_random",
                     "baseline_centermost", "mcnemar_p", "per_seed", "seed_mean",
                     "seed_std", "seed_ci95"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    @staticmethod
    def from_json(obj: dict) -> "EvalReport":
        return EvalReport(
            variant=obj["variant"],
            dataset=obj["dataset"],
            seed=int(obj["seed"]),
            map50=obj["map50"],
            mean_iou=obj["mean_iou"],
            recall=obj["recall"],
            composite=obj["composite"],
            mstp_accuracy=obj.get("mstp_accuracy"),
            raf_accuracy=obj.get("raf_accuracy"),
            baseline_random=obj.get("baseline_random"),
            baseline_centermost=obj.get("baseline_centermost"),
            mcnemar_p=obj.get("mcnemar_p"),
            per_seed=obj.get("per_seed"),
            seed_mean=obj.get("seed_mean"),
            seed_std=obj.get("seed_std"),
            seed_ci95=obj.get("seed_ci95"),
        )


def render_table(reports: Sequence[EvalReport]) -> str:
    """Plain-text results table, one row per (variant, test set)."""
    headers = ["Variant", "Test Set", "mAP@0.5", "Mean IoU", "Recall", "Composite", "Acc", "+RAF Acc"]
    rows = []
    for r in reports:
        rows.append([
            r.variant,
            r.dataset,
            f"{100 * r.map50:.2f}",
            f"{100 * r.mean_iou:.2f}",
            f"{100 * r.recall:.2f}",
            f"{100 * r.composite:.2f}",
            "-" if r.mstp_accuracy is None else f"{100 * r.mstp_accuracy:.2f}",
            "-" if r.raf_accuracy is None else f"{100 * r.raf_accuracy:.2f}",
        ])
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths))
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(row) for row in rows)
    return "\n".join(lines)


# --- prediction files -------------------------------------------------------

def write_detector_predictions(
    path: str | Path, per_frame: Sequence[tuple[str, Sequence[ScoredBox]]]
) -> None:
    """JSON lines: {frame_id, boxes: [[x1,y1,x2,y2],...], scores: [...]}."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for frame_id, dets in per_frame:
            fh.write(json.dumps({
                "frame_id": frame_id,
                "boxes": [d.box.as_list() for d in dets],
                "scores": [d.score for d in dets],
            }, sort_keys=True))
            fh.write("\n")


def read_detector_predictions(path: str | Path) -> list[tuple[str, list[ScoredBox]]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            dets = [ScoredBox(Box.from_list(b), float(s))
                    for b, s in zip(obj["boxes"], obj["scores"])]
            out.append((obj["frame_id"], dets))
    return out


def write_selector_predictions(path: str | Path, per_frame: Sequence[dict]) -> None:
    """JSON lines: {frame_id, candidate_boxes, s_sel, s_ret?, chosen_index}."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in per_frame:
            fh.write(json.dumps(row, sort_keys=True))
            fh.write("\n")


def read_selector_predictions(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
