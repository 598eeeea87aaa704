"""Training loops for every model variant.

Loss wiring per variant: Utt trains on the utterance loss alone and Seg on
the segment loss alone.  Every other variant (UttU, SegU, MulBS and the two
warm-up variants) trains on the fused loss.  Early stopping watches the
total dev loss and the best-dev parameters are restored at the end.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .datagen import Corpus, Utterance
from .evaluation import EvalReport, compute_eer
from .model import VARIANTS, WARMUP_BASE, ModelBundle, ModelConfig, build_model, load_bundle, save_bundle
from .objective import LossValue, ScoreRecord, fused_loss, loss_seg, loss_utt, scores_for_variant

log = logging.getLogger(__name__)

_MODEL_KEYS = tuple(f.name for f in dataclasses.fields(ModelConfig))


@dataclass
class TrainConfig:
    variant: str = "Seg"
    seed: int = 0
    lr_init: float = 3e-4
    lr_halving_period_epochs: int = 10
    early_stop_patience_epochs: int = 70
    min_delta: float = 1e-6
    batch_size: int = 8
    max_epochs: int = 30
    warmup_checkpoint: Optional[str] = None
    seg_weight: float = 1.0
    # model hyper-parameters, mirrored from ModelConfig
    feat_dim: int = 60
    se_reduction: int = 2
    use_se: bool = True
    lstm_hidden: int = 48
    dropout: float = 0.5
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if self.variant in WARMUP_BASE and not self.warmup_checkpoint:
            raise ValueError(f"variant {self.variant} requires warmup_checkpoint")
        if self.variant not in WARMUP_BASE and self.warmup_checkpoint:
            raise ValueError(f"variant {self.variant} does not take a warmup_checkpoint")
        if self.batch_size < 1 or self.max_epochs < 1 or self.lr_halving_period_epochs < 1:
            raise ValueError("batch_size, max_epochs and lr_halving_period_epochs must be positive")
        if self.lr_init <= 0:
            raise ValueError("lr_init must be positive")

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: getattr(self, k) for k in _MODEL_KEYS})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**values)

    def with_overrides(self, **changes) -> "TrainConfig":
        values = self.to_dict()
        values.update(changes)
        return TrainConfig.from_dict(values)


def coerce_override(cls, key: str, raw: str):
    """Parse a ``key=value`` string value to the type of dataclass field ``key``."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if key not in fields:
        raise ValueError(f"unknown config key: {key}")
    default = fields[key].default
    if default is None or isinstance(default, str):
        return None if raw.lower() in ("none", "") and default is None else raw
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"{key} expects a boolean, got {raw!r}")
    try:
        return type(default)(raw)
    except ValueError:
        raise ValueError(f"{key} expects {type(default).__name__}, got {raw!r}") from None


def lr_at(epoch: int, lr_init: float = 3e-4, period: int = 10) -> float:
    return lr_init * 2.0 ** -(epoch // period)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    trial_ids: list
    features: np.ndarray  # [B, N_max, F], zero padded
    lengths: np.ndarray  # feature frames per item
    utt_labels: np.ndarray
    frame_labels: list


def make_batches(utts: Sequence[Utterance], batch_size: int, rng: Optional[np.random.Generator] = None) -> list[list[int]]:
    """Index groups of similar length.

    With an rng, items are shuffled before a stable sort by length (so equal
    lengths land in random order) and the batch order is shuffled too.
    Without one the grouping is by length in corpus order.
    """
    order = np.arange(len(utts))
    if rng is not None:
        order = rng.permutation(order)
    lengths = np.array([utts[i].features.shape[0] for i in order])
    order = order[np.argsort(lengths, kind="stable")]
    groups = [order[i:i + batch_size].tolist() for i in range(0, len(order), batch_size)]
    if rng is not None:
        groups = [groups[i] for i in rng.permutation(len(groups))]
    return groups


def collate(utts: Sequence[Utterance], dtype=np.float32) -> Batch:
    lengths = np.array([u.features.shape[0] for u in utts])
    dim = utts[0].features.shape[1]
    feats = np.zeros((len(utts), lengths.max(), dim), dtype=dtype)
    for b, u in enumerate(utts):
        feats[b, :lengths[b]] = u.features
    return Batch(
        [u.trial_id for u in utts], feats, lengths,
        np.array([u.utt_label for u in utts]), [u.frame_labels for u in utts],
    )


def compute_loss(bundle: ModelBundle, batch: Batch, seg_weight: float = 1.0) -> LossValue:
    outputs = bundle(batch.features, batch.lengths)
    return loss_for_variant(bundle.variant, outputs, batch, seg_weight)


def loss_for_variant(variant: str, outputs: dict, batch: Batch, seg_weight: float = 1.0) -> LossValue:
    utt = seg = None
    if variant != "Seg":
        utt = loss_utt(outputs["cos_utt"], batch.utt_labels)
    if variant != "Utt":
        seg = loss_seg(outputs["cos_seg"], list(batch.frame_labels), outputs["lengths"])
    return fused_loss(utt, seg, seg_weight)


def check_corpus(corpus: Corpus, variant: str, splits=("train", "dev")) -> None:
    for split in splits:
        if split not in corpus.splits or not corpus[split]:
            raise ValueError(f"corpus has no {split} split")
        for u in corpus[split]:
            if u.utt_label not in (0, 1):
                raise ValueError(f"{u.trial_id}: missing utterance label")
            if variant != "Utt" and u.frame_labels is None:
                raise ValueError(f"{u.trial_id}: variant {variant} needs segment labels")


# ---------------------------------------------------------------------------
# run record


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    dev_loss: float
    dev_loss_utt: Optional[float]
    dev_loss_seg: Optional[float]
    wall_clock: float = 0.0


CSV_FIELDS = ("epoch", "lr", "train_loss", "dev_loss", "dev_loss_utt", "dev_loss_seg")


@dataclass
class RunRecord:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    @property
    def best_dev_loss(self) -> float:
        return self.epochs[self.best_epoch].dev_loss

    def write_csv(self, path) -> None:
        """Per-epoch trace.  Wall-clock is left out so identical runs give identical files."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_FIELDS)
            for row in self.epochs:
                w.writerow(["" if getattr(row, k) is None else repr(getattr(row, k)) for k in CSV_FIELDS])

    @staticmethod
    def read_csv(path) -> "RunRecord":
        rec = RunRecord()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                vals = {k: (float(v) if v != "" else None) for k, v in row.items()}
                vals["epoch"] = int(vals["epoch"])
                rec.epochs.append(EpochStats(**vals))
        if rec.epochs:
            rec.best_epoch = int(np.argmin([e.dev_loss for e in rec.epochs]))
        return rec


class EarlyStopper:
    """Tracks the best dev loss; ``update`` returns True once patience is used up."""

    def __init__(self, patience: int, min_delta: float = 1e-6):
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.best_epoch = -1

    def update(self, epoch: int, value: float) -> bool:
        if value < self.best - self.min_delta:
            self.best, self.best_epoch = value, epoch
        return epoch - self.best_epoch >= self.patience


# ---------------------------------------------------------------------------
# training


def evaluate_loss(bundle: ModelBundle, utts: Sequence[Utterance], batch_size: int, seg_weight: float = 1.0) -> dict:
    """Trial-weighted mean of each loss part over ``utts`` in eval mode."""
    bundle.eval()
    sums: dict = {}
    with ad.no_grad():
        for idx in make_batches(utts, batch_size):
            batch = collate([utts[i] for i in idx], bundle.backbone.parameters()[0].dtype)
            for k, v in compute_loss(bundle, batch, seg_weight).as_floats().items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
    return {k: v / len(utts) for k, v in sums.items()}


@dataclass
class TrainResult:
    bundle: ModelBundle
    record: RunRecord
    optimizer: ad.Adam
    config: TrainConfig


def _snapshot(bundle: ModelBundle, opt: ad.Adam) -> tuple:
    return bundle.state_dict(), copy.deepcopy(opt.state)


def train(config: TrainConfig, corpus: Corpus, on_epoch: Optional[Callable[[EpochStats], None]] = None) -> TrainResult:
    """Train ``config.variant`` and return the best-dev model with its RunRecord."""
    config.validate()
    check_corpus(corpus, config.variant)
    bundle = build_model(config.variant, config.model_config(), config.seed, config.warmup_checkpoint)
    dtype = bundle.backbone.parameters()[0].dtype
    opt = ad.Adam(bundle.parameters(), lr=config.lr_init)
    rng = np.random.default_rng([config.seed, 7])
    stopper = EarlyStopper(config.early_stop_patience_epochs, config.min_delta)
    record = RunRecord()
    train_utts, dev_utts = corpus["train"], corpus["dev"]
    best = _snapshot(bundle, opt)

    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        opt.lr = lr_at(epoch, config.lr_init, config.lr_halving_period_epochs)
        bundle.train()
        total, seen = 0.0, 0
        for idx in make_batches(train_utts, config.batch_size, rng):
            batch = collate([train_utts[i] for i in idx], dtype)
            opt.zero_grad()
            loss = compute_loss(bundle, batch, config.seg_weight)
            ad.backward(loss.total)
            opt.step()
            total += float(loss.total.data) * len(idx)
            seen += len(idx)
        dev = evaluate_loss(bundle, dev_utts, config.batch_size, config.seg_weight)
        stats = EpochStats(epoch, opt.lr, total / seen, dev["total"], dev.get("utt"), dev.get("seg"),
                           time.perf_counter() - t0)
        record.epochs.append(stats)
        stop = stopper.update(epoch, stats.dev_loss)
        if stopper.best_epoch == epoch:
            best = _snapshot(bundle, opt)
        log.info(
            "epoch=%d lr=%.6g train_loss=%.6f dev_loss=%.6f best_epoch=%d seconds=%.1f",
            epoch, opt.lr, stats.train_loss, stats.dev_loss, stopper.best_epoch, stats.wall_clock,
        )
        if on_epoch is not None:
            on_epoch(stats)
        if stop:
            record.stopped_early = True
            break

    record.best_epoch = stopper.best_epoch
    bundle.load_state_dict(best[0])
    opt.state = best[1]
    bundle.eval()
    return TrainResult(bundle, record, opt, config)


def save_result(path, result: TrainResult) -> None:
    """Checkpoint holding the best-dev parameters, Adam moments and the epoch counter."""
    st = result.optimizer.state
    extra = {}
    for k, (m, v) in enumerate(zip(st.m, st.v)):
        extra[f"adam.m.{k:04d}"] = m
        extra[f"adam.v.{k:04d}"] = v
    cfg = result.config.to_dict()
    meta = {
        "epoch": result.record.best_epoch,
        "adam": {"t": st.t, "lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps},
        "train_config": cfg,
    }
    save_bundle(path, result.bundle, extra, meta)


def warmup_expand(checkpoint, target_variant: str, seed: int = 0) -> ModelBundle:
    """Attach the missing head to a pre-trained Utt or Seg model (path or bundle)."""
    base = checkpoint if isinstance(checkpoint, ModelBundle) else load_bundle(checkpoint)
    if target_variant not in WARMUP_BASE:
        raise ValueError(f"{target_variant} is not a warm-up variant")
    return build_model(target_variant, base.config, seed, warmup_checkpoint=base)


# ---------------------------------------------------------------------------
# scoring and multi-seed runs


def score_utterances(bundle: ModelBundle, utts: Sequence[Utterance], batch_size: int = 8) -> list[ScoreRecord]:
    """Score records in the order of ``utts`` (eval mode, no tape)."""
    bundle.eval()
    dtype = bundle.backbone.parameters()[0].dtype
    out: dict = {}
    with ad.no_grad():
        for idx in make_batches(utts, batch_size):
            batch = collate([utts[i] for i in idx], dtype)
            outputs = bundle(batch.features, batch.lengths)
            for i, rec in zip(idx, scores_for_variant(bundle.variant, batch.trial_ids, outputs, bundle)):
                out[i] = rec
    return [out[i] for i in range(len(utts))]


def eer_report(records: Sequence[ScoreRecord], utts: Sequence[Utterance]) -> EvalReport:
    """Both EERs for records scored on ``utts`` (matched by trial id)."""
    by_id = {u.trial_id: u for u in utts}
    ub, us, sb, ss = [], [], [], []
    for r in records:
        u = by_id[r.trial_id]
        (us if u.utt_label else ub).append(r.utt_score)
        if len(u.frame_labels) != r.num_segments:
            raise ValueError(f"{r.trial_id}: {r.num_segments} segment scores for {len(u.frame_labels)} frames")
        lab = np.asarray(u.frame_labels, dtype=bool)
        sb.extend(r.seg_scores[~lab])
        ss.extend(r.seg_scores[lab])
    u_eer, u_thr = compute_eer(ub, us)
    s_eer, s_thr = compute_eer(sb, ss)
    counts = {"utt_bonafide": len(ub), "utt_spoof": len(us), "seg_bonafide": len(sb), "seg_spoof": len(ss)}
    return EvalReport(u_eer, s_eer, u_thr, s_thr, counts)


@dataclass
class SeedRun:
    seed: int
    dev: EvalReport
    eval: EvalReport
    best_epoch: int
    result: Optional[TrainResult] = field(default=None, repr=False)


@dataclass
class MultiSeedReport:
    variant: str
    runs: list
    pretrained_seed: Optional[int] = None
    pretrained_dev: dict = field(default_factory=dict)

    def mean(self, split: str = "eval") -> dict:
        reps = [getattr(r, split) for r in self.runs]
        return {"utt_eer": float(np.mean([r.utt_eer for r in reps])),
                "seg_eer": float(np.mean([r.seg_eer for r in reps]))}

    def summary(self) -> dict:
        return {
            "variant": self.variant,
            "seeds": [r.seed for r in self.runs],
            "per_seed": [{"seed": r.seed, "best_epoch": r.best_epoch,
                          "dev": {"utt_eer": r.dev.utt_eer, "seg_eer": r.dev.seg_eer},
                          "eval": {"utt_eer": r.eval.utt_eer, "seg_eer": r.eval.seg_eer}} for r in self.runs],
            "mean_dev": self.mean("dev"),
            "mean_eval": self.mean("eval"),
            "pretrained_seed": self.pretrained_seed,
            "pretrained_dev": self.pretrained_dev,
        }


def select_pretrained(runs: Sequence[SeedRun], base_variant: str) -> SeedRun:
    """Best dev run: utterance EER for an Utt model, segment EER for a Seg model."""
    key = "utt_eer" if base_variant == "Utt" else "seg_eer"
    return min(runs, key=lambda r: (getattr(r.dev, key), r.seed))


def run_seed(config: TrainConfig, corpus: Corpus, keep_result: bool = False) -> SeedRun:
    res = train(config, corpus)
    dev = eer_report(score_utterances(res.bundle, corpus["dev"], config.batch_size), corpus["dev"])
    ev = eer_report(score_utterances(res.bundle, corpus["eval"], config.batch_size), corpus["eval"])
    return SeedRun(config.seed, dev, ev, res.record.best_epoch, res if keep_result else None)


def multi_seed_protocol(config: TrainConfig, corpus: Corpus, seeds: Sequence[int]) -> MultiSeedReport:
    """Train one run per seed and collect dev/eval EERs.

    Warm-up variants must already name their pre-trained checkpoint here;
    ``multi_seed_warmup`` does the best-of-dev pre-training selection.
    """
    if not seeds:
        raise ValueError("multi_seed_protocol needs at least one seed")
    check_corpus(corpus, config.variant, ("train", "dev", "eval"))
    runs = [run_seed(config.with_overrides(seed=s), corpus) for s in seeds]
    return MultiSeedReport(config.variant, runs)


def multi_seed_warmup(variant: str, corpus: Corpus, seeds: Sequence[int], base: Optional[TrainConfig] = None,
                      pretrain_seeds: Optional[Sequence[int]] = None, checkpoint_path=None) -> MultiSeedReport:
    """Warm-up protocol: pick the best pre-trained model on dev, then fine-tune per seed.

    ``checkpoint_path`` receives the selected pre-trained model (the warm-up
    runs load it from there).
    """
    if variant not in WARMUP_BASE:
        raise ValueError(f"{variant} is not a warm-up variant")
    if checkpoint_path is None:
        raise ValueError("multi_seed_warmup needs a checkpoint_path for the selected pre-trained model")
    base = base or TrainConfig(variant=WARMUP_BASE[variant])
    base_variant = WARMUP_BASE[variant]
    pre_cfg = base.with_overrides(variant=base_variant, warmup_checkpoint=None)
    pre_runs = [run_seed(pre_cfg.with_overrides(seed=s), corpus, keep_result=True)
                for s in (pretrain_seeds or seeds)]
    chosen = select_pretrained(pre_runs, base_variant)
    save_result(checkpoint_path, chosen.result)
    ft_cfg = base.with_overrides(variant=variant, warmup_checkpoint=str(checkpoint_path))
    report = multi_seed_protocol(ft_cfg, corpus, seeds)
    report.pretrained_seed = chosen.seed
    report.pretrained_dev = {r.seed: {"utt_eer": r.dev.utt_eer, "seg_eer": r.dev.seg_eer} for r in pre_runs}
    return report
