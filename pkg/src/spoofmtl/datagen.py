"""Synthetic partially-spoofed corpus with 10 ms unit labels.

Bona fide trials are voiced harmonic signals with a per-speaker f0 and
slow syllable-rate amplitude modulation.  Spoofed trials take such a
carrier and splice band-passed noise bursts over a chosen set of 10 ms
units, with short raised-cosine crossfades centred on the unit
boundaries.  Both families share loudness and occupy overlapping spectral
regions.

File formats (plain text, one trial per line, ``#`` lines ignored):

``protocol.txt``        ``trial_id label split``  (label is ``bonafide`` or ``spoof``)
``segment_labels.txt``  ``trial_id s-e-label s-e-label ...`` where each span
                        covers [s, e) milliseconds, spans are contiguous from 0
                        and multiples of 10 ms, and label is ``bonafide``/``spoof``
``wav/<trial_id>.wav``  16-bit PCM mono at 16 kHz, exactly 160 samples per unit
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import scipy.signal

from .features import AudioClip, LFCCConfig, extract, num_frames, read_wav, write_wav

UNIT_MS = 10
SAMPLE_RATE = 16000
UNIT_SAMPLES = SAMPLE_RATE * UNIT_MS // 1000
FRAMES_PER_EMBEDDING = 16
LABEL_NAMES = ("bonafide", "spoof")
SPLITS = ("train", "dev", "eval")


@dataclass
class SynthSpec:
    n_train: int = 400
    n_dev: int = 100
    n_eval: int = 100
    spoof_fraction: float = 0.5
    duration_range: tuple = (1.0, 2.0)
    spoof_ratio_range: tuple = (0.02, 0.98)
    max_spoof_segments: int = 3
    n_speakers: int = 20
    f0_range: tuple = (90.0, 260.0)
    n_harmonics: int = 24
    noise_band_range: tuple = (300.0, 6000.0)
    crossfade_ms: float = 2.0
    level_db_range: tuple = (-26.0, -16.0)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.spoof_ratio_range
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError(f"spoof ratio range must lie inside (0, 1), got {self.spoof_ratio_range}")
        if self.duration_range[0] * 1000 < FRAMES_PER_EMBEDDING * UNIT_MS + 20:
            raise ValueError("minimum duration too short for one embedding frame")

    def counts(self) -> dict:
        return {"train": self.n_train, "dev": self.n_dev, "eval": self.n_eval}

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ProtocolEntry:
    trial_id: str
    label: int  # 0 bona fide, 1 spoof
    split: str


@dataclass
class SegmentLabelTrack:
    trial_id: str
    unit_labels: np.ndarray

    def __post_init__(self):
        self.unit_labels = np.asarray(self.unit_labels, dtype=np.int8).reshape(-1)

    @property
    def spoof_ratio(self) -> float:
        return float(self.unit_labels.mean()) if self.unit_labels.size else 0.0

    @property
    def utterance_label(self) -> int:
        return int(self.unit_labels.any())

    def frame_labels(self, n_feature_frames: Optional[int] = None) -> np.ndarray:
        if n_feature_frames is None:
            n_feature_frames = num_frames(self.unit_labels.size * UNIT_SAMPLES)
        return align_labels_to_frames(self.unit_labels, n_feature_frames)

    def spans(self) -> list[tuple[int, int, int]]:
        """Run-length spans (start_ms, end_ms, label)."""
        u = self.unit_labels
        if u.size == 0:
            return []
        cuts = np.flatnonzero(np.diff(u)) + 1
        starts = np.concatenate([[0], cuts])
        ends = np.concatenate([cuts, [u.size]])
        return [(int(s) * UNIT_MS, int(e) * UNIT_MS, int(u[s])) for s, e in zip(starts, ends)]


def num_embeddings(n_feature_frames: int) -> int:
    m = n_feature_frames
    for _ in range(4):
        m //= 2
    return m


def align_labels_to_frames(unit_labels, n_feature_frames: int) -> np.ndarray:
    """Map 10 ms unit labels to one label per 160 ms embedding frame.

    Embedding frame m covers feature frames [16m, 16m + 16), i.e. units
    [16m, 16m + 16).  It is spoof when at least half of the covered units
    are spoof.
    """
    units = np.asarray(unit_labels).reshape(-1)
    M = num_embeddings(n_feature_frames)
    if M < 1:
        raise ValueError(f"{n_feature_frames} feature frames give no embedding frame")
    if units.size < M * FRAMES_PER_EMBEDDING - FRAMES_PER_EMBEDDING + 1:
        raise ValueError(f"{units.size} units cannot cover {M} embedding frames")
    out = np.zeros(M, dtype=np.int8)
    for m in range(M):
        covered = units[m * FRAMES_PER_EMBEDDING:(m + 1) * FRAMES_PER_EMBEDDING]
        if covered.size == 0:
            raise ValueError(f"embedding frame {m} covers no labelled units")
        out[m] = 2 * int(covered.sum()) >= covered.size
    return out


# ---------------------------------------------------------------------------
# signal families


def _voiced_carrier(rng: np.random.Generator, n: int, f0: float, spec: SynthSpec) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    vibrato = 1.0 + 0.03 * np.sin(2 * np.pi * rng.uniform(3, 6) * t + rng.uniform(0, 2 * np.pi))
    drift = 1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.3, 0.8) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(f0 * vibrato * drift) / SAMPLE_RATE
    tilt = rng.uniform(0.8, 1.4)
    sig = np.zeros(n)
    for k in range(1, spec.n_harmonics + 1):
        if k * f0 * 1.15 >= SAMPLE_RATE / 2:
            break
        sig += np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k ** tilt
    # syllable-rate envelope with no true silences
    env = 0.55 + 0.45 * np.sin(2 * np.pi * rng.uniform(2.5, 5.0) * t + rng.uniform(0, 2 * np.pi)) ** 2
    sig = sig * env + 0.01 * rng.standard_normal(n)
    return sig


def _noise_burst(rng: np.random.Generator, n: int, spec: SynthSpec) -> np.ndarray:
    lo_lim, hi_lim = spec.noise_band_range
    lo = rng.uniform(lo_lim, lo_lim * 4)
    hi = rng.uniform(max(lo * 2, hi_lim / 3), hi_lim)
    sos = scipy.signal.butter(4, [lo, hi], btype="bandpass", fs=SAMPLE_RATE, output="sos")
    pad = 512
    noise = scipy.signal.sosfilt(sos, rng.standard_normal(n + pad))[pad:]
    t = np.arange(n) / SAMPLE_RATE
    env = 0.55 + 0.45 * np.sin(2 * np.pi * rng.uniform(2.5, 5.0) * t + rng.uniform(0, 2 * np.pi)) ** 2
    return noise * env


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x * x) + 1e-20))


def _spoof_units(rng: np.random.Generator, n_units: int, n_spoof: int, max_segments: int) -> np.ndarray:
    """Place ``n_spoof`` spoofed units as 1..max_segments non-overlapping runs."""
    labels = np.zeros(n_units, dtype=np.int8)
    n_bona = n_units - n_spoof
    k = int(rng.integers(1, max_segments + 1))
    k = max(1, min(k, n_spoof, n_bona + 1))
    # k positive spoof runs; bona units fill k+1 gaps, inner gaps get at least one unit
    spoof_runs = _composition(rng, n_spoof, k, 1)
    inner = _composition(rng, n_bona - (k - 1), k + 1, 0)
    inner[1:k] += 1
    pos = 0
    for i in range(k):
        pos += inner[i]
        labels[pos:pos + spoof_runs[i]] = 1
        pos += spoof_runs[i]
    return labels


def _composition(rng: np.random.Generator, total: int, parts: int, minimum: int) -> np.ndarray:
    free = total - parts * minimum
    if free < 0:
        raise ValueError("cannot split units into the requested runs")
    cuts = np.sort(rng.integers(0, free + 1, size=parts - 1))
    sizes = np.diff(np.concatenate([[0], cuts, [free]]))
    return sizes + minimum


def synthesize_trial(rng: np.random.Generator, n_units: int, spoof_units: np.ndarray, f0: float,
                     spec: SynthSpec) -> np.ndarray:
    n = n_units * UNIT_SAMPLES
    carrier = _voiced_carrier(rng, n, f0, spec)
    carrier /= _rms(carrier)
    gain = np.repeat(spoof_units.astype(float), UNIT_SAMPLES)
    if spoof_units.any():
        burst = _noise_burst(rng, n, spec)
        burst /= _rms(burst)
        fade = int(round(spec.crossfade_ms * SAMPLE_RATE / 1000))
        if fade > 0:
            # raised-cosine crossfade centred on each unit boundary
            kernel = np.hanning(2 * fade + 1)
            gain = np.convolve(gain, kernel / kernel.sum(), mode="same")
        sig = (1 - gain) * carrier + gain * burst
    else:
        sig = carrier
    level = 10 ** (rng.uniform(*spec.level_db_range) / 20)
    return np.clip(sig * level, -1.0, 1.0 - 2 ** -15)


@dataclass
class Trial:
    entry: ProtocolEntry
    track: SegmentLabelTrack
    audio: np.ndarray


def generate_trials(spec: SynthSpec) -> list[Trial]:
    """All trials of all splits, deterministic in ``spec.seed``."""
    master = np.random.default_rng(spec.seed)
    speaker_f0 = master.uniform(*spec.f0_range, size=spec.n_speakers)
    trials = []
    for s_idx, split in enumerate(SPLITS):
        n = spec.counts()[split]
        n_spoof = int(round(n * spec.spoof_fraction))
        labels = np.array([1] * n_spoof + [0] * (n - n_spoof))
        split_rng = np.random.default_rng([spec.seed, s_idx])
        split_rng.shuffle(labels)
        # stratified spoof ratios so each split spans the whole configured range
        lo, hi = spec.spoof_ratio_range
        strata = lo + (hi - lo) * (np.arange(n_spoof) + split_rng.uniform(size=n_spoof)) / max(n_spoof, 1)
        split_rng.shuffle(strata)
        k_spoof = 0
        for i in range(n):
            tid = f"{split[0].upper()}_{i:05d}"
            rng = np.random.default_rng([spec.seed, s_idx, i])
            dur = rng.uniform(*spec.duration_range)
            n_units = int(round(dur * 1000 / UNIT_MS))
            f0 = speaker_f0[rng.integers(spec.n_speakers)] * rng.uniform(0.95, 1.05)
            if labels[i]:
                ratio = strata[k_spoof]
                k_spoof += 1
                n_sp = min(max(1, int(round(ratio * n_units))), n_units - 1)
                units = _spoof_units(rng, n_units, n_sp, spec.max_spoof_segments)
            else:
                units = np.zeros(n_units, dtype=np.int8)
            audio = synthesize_trial(rng, n_units, units, f0, spec)
            track = SegmentLabelTrack(tid, units)
            trials.append(Trial(ProtocolEntry(tid, track.utterance_label, split), track, audio))
    return trials


def spoof_units_for_ratio(n_units: int, ratio: float, rng: Optional[np.random.Generator] = None,
                          max_segments: int = 3) -> np.ndarray:
    """Unit labels with exactly round(ratio * n_units) spoofed units."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"a spoofed trial needs a spoof ratio in (0, 1), got {ratio}")
    rng = rng if rng is not None else np.random.default_rng(0)
    n_sp = min(max(1, int(round(ratio * n_units))), n_units - 1)
    return _spoof_units(rng, n_units, n_sp, max_segments)


def generate_corpus(spec: SynthSpec, out_dir) -> list[Trial]:
    """Write WAVs, protocol, segment labels and the generating spec under ``out_dir``."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    trials = generate_trials(spec)
    for tr in trials:
        write_wav(out / "wav" / f"{tr.entry.trial_id}.wav", AudioClip(tr.audio, SAMPLE_RATE))
    write_protocol(out / "protocol.txt", [t.entry for t in trials])
    write_segment_labels(out / "segment_labels.txt", [t.track for t in trials])
    (out / "synth_spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return trials


# ---------------------------------------------------------------------------
# protocol IO


def write_protocol(path, entries: Iterable[ProtocolEntry]) -> None:
    with open(path, "w") as fh:
        for e in entries:
            fh.write(f"{e.trial_id} {LABEL_NAMES[e.label]} {e.split}\n")


def _data_lines(path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if s and not s.startswith("#"):
                yield lineno, s.split()


def read_protocol(path) -> list[ProtocolEntry]:
    entries = []
    for lineno, parts in _data_lines(path):
        if len(parts) != 3 or parts[1] not in LABEL_NAMES or parts[2] not in SPLITS:
            raise ValueError(f"{path}:{lineno}: expected 'trial_id bonafide|spoof train|dev|eval'")
        entries.append(ProtocolEntry(parts[0], LABEL_NAMES.index(parts[1]), parts[2]))
    return entries


def write_segment_labels(path, tracks: Iterable[SegmentLabelTrack]) -> None:
    with open(path, "w") as fh:
        for tr in tracks:
            spans = " ".join(f"{s}-{e}-{LABEL_NAMES[l]}" for s, e, l in tr.spans())
            fh.write(f"{tr.trial_id} {spans}\n")


def read_segment_labels(path) -> dict[str, SegmentLabelTrack]:
    tracks = {}
    for lineno, parts in _data_lines(path):
        units = []
        expected = 0
        try:
            for tok in parts[1:]:
                s, e, lab = tok.split("-")
                s, e = int(s), int(e)
                if s != expected or e <= s or s % UNIT_MS or e % UNIT_MS or lab not in LABEL_NAMES:
                    raise ValueError(tok)
                units.extend([LABEL_NAMES.index(lab)] * ((e - s) // UNIT_MS))
                expected = e
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: malformed span {exc}") from None
        if not units:
            raise ValueError(f"{path}:{lineno}: trial {parts[0]} has no spans")
        tracks[parts[0]] = SegmentLabelTrack(parts[0], units)
    return tracks


def check_consistency(entries: Iterable[ProtocolEntry], tracks: dict) -> list[str]:
    """Trials whose utterance label disagrees with OR over their unit labels."""
    problems = []
    for e in entries:
        tr = tracks.get(e.trial_id)
        if tr is None:
            problems.append(f"{e.trial_id}: no segment label track")
        elif tr.utterance_label != e.label:
            problems.append(
                f"{e.trial_id}: protocol says {LABEL_NAMES[e.label]} but units say {LABEL_NAMES[tr.utterance_label]}"
            )
    return problems


# ---------------------------------------------------------------------------
# loading a corpus for training


@dataclass
class Utterance:
    trial_id: str
    features: np.ndarray
    utt_label: int
    frame_labels: np.ndarray
    unit_labels: np.ndarray = field(repr=False, default=None)


@dataclass
class Corpus:
    splits: dict

    def __getitem__(self, split: str) -> list[Utterance]:
        return self.splits[split]


def load_corpus(corpus_dir, splits: Iterable[str] = SPLITS, lfcc: LFCCConfig = LFCCConfig()) -> Corpus:
    root = Path(corpus_dir)
    entries = read_protocol(root / "protocol.txt")
    tracks = read_segment_labels(root / "segment_labels.txt")
    problems = check_consistency(entries, tracks)
    if problems:
        raise ValueError("inconsistent labels: " + "; ".join(problems[:5]))
    wanted = set(splits)
    out = {s: [] for s in SPLITS if s in wanted}
    for e in entries:
        if e.split not in wanted:
            continue
        clip = read_wav(root / "wav" / f"{e.trial_id}.wav")
        feats = extract(clip, lfcc)
        tr = tracks[e.trial_id]
        out[e.split].append(
            Utterance(e.trial_id, feats, e.label, align_labels_to_frames(tr.unit_labels, feats.shape[0]), tr.unit_labels)
        )
    return Corpus(out)


def corpus_from_trials(trials: Iterable[Trial], lfcc: LFCCConfig = LFCCConfig(), quantize: bool = True) -> Corpus:
    """In-memory equivalent of generate_corpus + load_corpus."""
    out = {s: [] for s in SPLITS}
    for tr in trials:
        audio = tr.audio
        if quantize:
            audio = np.clip(np.round(audio * 32768.0), -32768, 32767) / 32768.0
        feats = extract(audio, lfcc)
        out[tr.entry.split].append(
            Utterance(tr.entry.trial_id, feats, tr.entry.label,
                      align_labels_to_frames(tr.track.unit_labels, feats.shape[0]), tr.track.unit_labels)
        )
    return Corpus(out)
