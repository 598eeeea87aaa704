"""Equal error rate at utterance and segment level.

Scores are "higher means bona fide".  At threshold t a spoof trial is
falsely accepted when its score is >= t and a bona fide trial is falsely
rejected when its score is < t.  Every distinct score is tried as a
threshold, plus +inf.  The EER is read off where FAR - FRR changes sign,
linearly interpolating between the two operating points around the
crossing.

Interpolation does not keep the EER below 0.5: when spoof scores tend to
sit above bona fide scores the crossing moves past 0.5 (every spoof score
above every bona fide score gives 1.0).  Such a detector is worse than
chance and the value says so rather than being clipped.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np

from .datagen import ProtocolEntry, SegmentLabelTrack
from .objective import ScoreRecord


def far_frr_curve(bona, spoof) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thresholds (ascending, ending at +inf) with their FAR and FRR."""
    bona = np.sort(np.asarray(bona, dtype=np.float64))
    spoof = np.sort(np.asarray(spoof, dtype=np.float64))
    if bona.size == 0 or spoof.size == 0:
        raise ValueError("EER needs at least one bona fide and one spoof score")
    if not (np.all(np.isfinite(bona)) and np.all(np.isfinite(spoof))):
        raise ValueError("scores must be finite")
    thresholds = np.append(np.unique(np.concatenate([bona, spoof])), np.inf)
    far = (spoof.size - np.searchsorted(spoof, thresholds, side="left")) / spoof.size
    frr = np.searchsorted(bona, thresholds, side="left") / bona.size
    return thresholds, far, frr


def compute_eer(bona, spoof) -> tuple[float, float]:
    """Return (eer, threshold); the threshold is the first one with FRR >= FAR."""
    thresholds, far, frr = far_frr_curve(bona, spoof)
    diff = far - frr
    i = int(np.argmax(diff <= 0))  # diff ends at -1, so a crossing always exists
    if diff[i] == 0 or i == 0:
        return float(far[i]), float(thresholds[i])
    d0, d1 = diff[i - 1], diff[i]
    w = d0 / (d0 - d1)
    eer = far[i - 1] + w * (far[i] - far[i - 1])
    return float(eer), float(thresholds[i])


@dataclass
class TrialScores:
    bona: list = field(default_factory=list)
    spoof: list = field(default_factory=list)

    def add(self, score: float, label: int) -> None:
        (self.spoof if label else self.bona).append(float(score))

    def extend(self, scores, labels) -> None:
        for s, l in zip(scores, labels):
            self.add(s, l)

    def eer(self) -> float:
        return compute_eer(self.bona, self.spoof)[0]


class EvaluationError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        head = "; ".join(problems[:10])
        more = f" (+{len(problems) - 10} more)" if len(problems) > 10 else ""
        super().__init__(f"{len(problems)} evaluation problem(s): {head}{more}")


@dataclass
class EvalReport:
    utt_eer: float
    seg_eer: float
    utt_threshold: float
    seg_threshold: float
    counts: dict

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_scores(records: Iterable[ScoreRecord], entries: Iterable[ProtocolEntry],
                    tracks: Mapping[str, SegmentLabelTrack], split: Optional[str] = None) -> EvalReport:
    """Utterance EER over trials and segment EER pooled over every valid frame.

    Every protocol trial (of ``split`` when given) must have a score record
    whose segment count matches the trial's embedding frames; all problems
    are collected and raised together.
    """
    by_id = {r.trial_id: r for r in records}
    utt, seg = TrialScores(), TrialScores()
    problems = []
    n_trials = 0
    for e in entries:
        if split is not None and e.split != split:
            continue
        n_trials += 1
        rec = by_id.get(e.trial_id)
        if rec is None:
            problems.append(f"{e.trial_id}: no score record")
            continue
        track = tracks.get(e.trial_id)
        if track is None:
            problems.append(f"{e.trial_id}: no segment labels")
            continue
        frame_labels = track.frame_labels()
        if frame_labels.size != rec.num_segments:
            problems.append(
                f"{e.trial_id}: {rec.num_segments} segment scores but {frame_labels.size} labelled frames"
            )
            continue
        utt.add(rec.utt_score, e.label)
        seg.extend(rec.seg_scores, frame_labels)
    if problems:
        raise EvaluationError(problems)
    if n_trials == 0:
        raise EvaluationError(["no trials selected"])
    u_eer, u_thr = compute_eer(utt.bona, utt.spoof)
    s_eer, s_thr = compute_eer(seg.bona, seg.spoof)
    counts = {
        "utt_bonafide": len(utt.bona), "utt_spoof": len(utt.spoof),
        "seg_bonafide": len(seg.bona), "seg_spoof": len(seg.spoof),
    }
    return EvalReport(u_eer, s_eer, u_thr, s_thr, counts)


def write_report(path_json, report: EvalReport, path_csv=None) -> None:
    with open(path_json, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if path_csv is not None:
        with open(path_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "eer", "threshold", "n_bonafide", "n_spoof"])
            c = report.counts
            w.writerow(["utterance", report.utt_eer, report.utt_threshold, c["utt_bonafide"], c["utt_spoof"]])
            w.writerow(["segment", report.seg_eer, report.seg_threshold, c["seg_bonafide"], c["seg_spoof"]])


def write_far_frr_csv(path, bona, spoof) -> None:
    thresholds, far, frr = far_frr_curve(bona, spoof)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "far", "frr"])
        for t, a, r in zip(thresholds, far, frr):
            w.writerow([t, a, r])
