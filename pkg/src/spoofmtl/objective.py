"""MSE-for-P2SGrad losses, the fused multi-task loss, and score derivation.

Class index 0 is bona fide and 1 is spoof.  Every score is the cosine (or a
cosine-derived value) against the bona fide class vector, so higher means
more bona fide.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BONAFIDE, SPOOF = 0, 1

UTT_DIRECT = "utt-direct"
UTT_DERIVED_SEG = "utt-derived-seg"
SEG_DIRECT = "seg-direct"
SEG_DERIVED_UTT_MIN = "seg-derived-utt-min"
SOURCES = (UTT_DIRECT, UTT_DERIVED_SEG, SEG_DIRECT, SEG_DERIVED_UTT_MIN)


def _one_hot(labels: np.ndarray, dtype) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 0 or labels.max() > 1):
        raise ValueError(f"labels must be 0 (bona fide) or 1 (spoof), got {np.unique(labels).tolist()}")
    return np.eye(2, dtype=dtype)[labels]


def loss_utt(cos_utt: Tensor, labels) -> Tensor:
    """Batch mean of sum_k (cos_k - onehot_k)^2."""
    target = _one_hot(labels, cos_utt.dtype)
    if target.shape != cos_utt.shape:
        raise ValueError(f"utterance labels {np.shape(labels)} do not match scores {cos_utt.shape}")
    per_trial = ad.reduce_sum(ad.square(cos_utt - target), axis=1)
    return ad.mean_over_axis(per_trial, 0)


def loss_seg(cos_seg: Tensor, labels, lengths=None) -> Tensor:
    """Mean over trials of (mean over that trial's valid frames of sum_k (cos - onehot)^2).

    ``labels`` is [B, M] (entries past a trial's length are ignored) or a
    list of per-trial label arrays whose lengths define the valid frames.
    """
    B, M, _ = cos_seg.shape
    if isinstance(labels, (list, tuple)):
        if lengths is None:
            lengths = np.array([len(l) for l in labels])
        if any(len(l) != n for l, n in zip(labels, lengths)):
            raise ValueError("segment label length does not match the number of embedding frames")
        dense = np.zeros((B, M), dtype=int)
        for b, l in enumerate(labels):
            dense[b, :len(l)] = l
        labels = dense
    labels = np.asarray(labels, dtype=int)
    if labels.shape != (B, M):
        raise ValueError(f"segment labels {labels.shape} do not match embedding frames {(B, M)}")
    lengths = np.full(B, M) if lengths is None else np.asarray(lengths)
    if np.any(lengths > M) or np.any(lengths < 1):
        raise ValueError(f"invalid frame lengths {lengths.tolist()} for {M} frames")
    mask = np.arange(M)[None, :] < lengths[:, None]
    target = _one_hot(np.where(mask, labels, 0), cos_seg.dtype)
    per_frame = ad.reduce_sum(ad.square(cos_seg - target), axis=2)
    per_trial = ad.mean_over_axis(per_frame, 1, mask=mask)
    return ad.mean_over_axis(per_trial, 0)


@dataclass
class LossValue:
    total: Tensor
    parts: dict = field(default_factory=dict)

    def as_floats(self) -> dict:
        out = {"total": float(self.total.data)}
        out.update({k: float(v.data) for k, v in self.parts.items()})
        return out


def fused_loss(utt: Optional[Tensor] = None, seg: Optional[Tensor] = None, seg_weight: float = 1.0) -> LossValue:
    """Unweighted sum of whichever parts are present (``seg_weight`` defaults to 1)."""
    parts = {}
    if utt is not None:
        parts["utt"] = utt
    if seg is not None:
        parts["seg"] = seg
    if not parts:
        raise ValueError("fused_loss needs at least one loss part")
    total = None
    for k, v in parts.items():
        term = v * seg_weight if (k == "seg" and seg_weight != 1.0) else v
        total = term if total is None else total + term
    return LossValue(total, parts)


# ---------------------------------------------------------------------------
# scores


@dataclass
class ScoreRecord:
    trial_id: str
    utt_score: float
    seg_scores: np.ndarray
    utt_source: str
    seg_source: str

    def __post_init__(self):
        self.seg_scores = np.asarray(self.seg_scores, dtype=np.float64).reshape(-1)
        for s in (self.utt_source, self.seg_source):
            if s not in SOURCES:
                raise ValueError(f"unknown score source {s!r}")

    @property
    def source(self) -> str:
        return f"{self.utt_source}+{self.seg_source}"

    @property
    def num_segments(self) -> int:
        return self.seg_scores.size


def decomposed_segment_scores(h: np.ndarray, class_vectors: np.ndarray, eps: float = 1e-12) -> tuple[float, np.ndarray]:
    """Utterance cosine and its per-step decomposition for one trial.

    With o the mean of the valid steps h [M, E], step m scores
    (|h_m| / |o|) * c1_hat . h_m_hat, whose mean over m is exactly the
    utterance cosine c1_hat . o_hat.
    """
    h = np.asarray(h)
    if h.dtype not in (np.float32, np.float64):
        h = h.astype(np.float64)
    c1 = np.asarray(class_vectors, dtype=h.dtype)[BONAFIDE]
    c1 = c1 / np.linalg.norm(c1)
    o = h.mean(axis=0)
    norm_o = np.linalg.norm(o)
    if norm_o < eps:
        raise ValueError("degenerate trial: pooled embedding has (near) zero norm")
    seg = (h @ c1) / norm_o
    return float(o @ c1 / norm_o), seg


def scores_from_utt_model(trial_ids, outputs: dict, class_vectors: np.ndarray) -> list[ScoreRecord]:
    """Utterance-head scores with segment scores derived by decomposing the pooled cosine."""
    h, lengths = outputs["h"].data, outputs["lengths"]
    direct = outputs["cos_utt"].data[:, BONAFIDE] if "cos_utt" in outputs else None
    records = []
    for b, tid in enumerate(trial_ids):
        utt, seg = decomposed_segment_scores(h[b, :lengths[b]], class_vectors)
        if direct is not None:
            utt = float(direct[b])
        records.append(ScoreRecord(tid, utt, seg, UTT_DIRECT, UTT_DERIVED_SEG))
    return records


def scores_from_seg_model(trial_ids, outputs: dict) -> list[ScoreRecord]:
    """Segment-head cosines; the utterance score is their minimum over valid frames."""
    cos, lengths = outputs["cos_seg"].data, outputs["lengths"]
    records = []
    for b, tid in enumerate(trial_ids):
        seg = cos[b, :lengths[b], BONAFIDE].astype(np.float64)
        records.append(ScoreRecord(tid, float(seg.min()), seg, SEG_DERIVED_UTT_MIN, SEG_DIRECT))
    return records


def scores_binary_branch(trial_ids, outputs: dict) -> list[ScoreRecord]:
    """Utterance and segment scores taken directly from their own heads."""
    if "cos_utt" not in outputs or "cos_seg" not in outputs:
        raise ValueError("binary-branch scoring needs both utterance and segment head outputs")
    cu, cs, lengths = outputs["cos_utt"].data, outputs["cos_seg"].data, outputs["lengths"]
    return [
        ScoreRecord(tid, float(cu[b, BONAFIDE]), cs[b, :lengths[b], BONAFIDE], UTT_DIRECT, SEG_DIRECT)
        for b, tid in enumerate(trial_ids)
    ]


def scores_for_variant(variant: str, trial_ids, outputs: dict, bundle=None) -> list[ScoreRecord]:
    if variant == "Utt":
        return scores_from_utt_model(trial_ids, outputs, bundle.utt_head.class_vectors.data)
    if variant in ("Seg", "SegU"):
        return scores_from_seg_model(trial_ids, outputs)
    # UttU applies its single head per frame; binary-branch variants use both heads
    return scores_binary_branch(trial_ids, outputs)


def derived_vs_direct(records_direct: Iterable[ScoreRecord]) -> list[tuple[str, float, float]]:
    """(trial, direct utterance score, min over segment scores) for side-by-side analysis."""
    return [(r.trial_id, r.utt_score, float(r.seg_scores.min())) for r in records_direct]


# ---------------------------------------------------------------------------
# score file: "trial_id utt_score M seg_1 ... seg_M source" per line


def write_scores(path, records: Iterable[ScoreRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            segs = " ".join(repr(float(s)) for s in r.seg_scores)
            fh.write(f"{r.trial_id} {float(r.utt_score)!r} {r.num_segments} {segs} {r.source}\n")


def read_scores(path) -> list[ScoreRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                tid, utt, m = parts[0], float(parts[1]), int(parts[2])
                if len(parts) != m + 4:
                    raise ValueError(f"expected {m + 4} fields, found {len(parts)}")
                segs = np.array([float(v) for v in parts[3:3 + m]])
                utt_src, seg_src = parts[-1].split("+")
                records.append(ScoreRecord(tid, utt, segs, utt_src, seg_src))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed score line ({exc})") from None
    return records
