"""LFCC front-end and audio / feature file IO.

Recipe: 20 ms periodic Hann window, 10 ms hop, no pre-emphasis and no
padding; 512-point FFT power spectrum; 20 triangular filters spaced
linearly from 0 Hz to Nyquist; log with a 1e-30 floor; orthonormal DCT-II
keeping 20 coefficients; first and second deltas (window of one frame,
edge frames replicated).  No normalisation of any kind.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft
import scipy.signal
from scipy.io import wavfile


@dataclass(frozen=True)
class LFCCConfig:
    sample_rate: int = 16000
    win_length: float = 0.020
    hop_length: float = 0.010
    n_fft: int = 512
    n_filters: int = 20
    n_ceps: int = 20
    log_floor: float = 1e-30
    with_deltas: bool = True

    @property
    def win_samples(self) -> int:
        return int(round(self.win_length * self.sample_rate))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_length * self.sample_rate))

    @property
    def dim(self) -> int:
        return self.n_ceps * (3 if self.with_deltas else 1)


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size == 0:
            raise ValueError("AudioClip is empty")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def num_frames(n_samples: int, cfg: LFCCConfig = LFCCConfig()) -> int:
    if n_samples < cfg.win_samples:
        return 0
    return (n_samples - cfg.win_samples) // cfg.hop_samples + 1


def frame_and_window(clip: AudioClip | np.ndarray, cfg: LFCCConfig = LFCCConfig()) -> np.ndarray:
    """Slice into Hann-windowed frames, shape [N, win_samples]; the tail is dropped."""
    x = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    win, hop = cfg.win_samples, cfg.hop_samples
    if x.size < win:
        raise ValueError(f"clip has {x.size} samples, shorter than one {win}-sample window")
    n = num_frames(x.size, cfg)
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n]
    return frames * scipy.signal.get_window("hann", win, fftbins=True)


def linear_filterbank(cfg: LFCCConfig = LFCCConfig()) -> np.ndarray:
    """Triangular filters [n_filters, n_fft//2 + 1] with linearly spaced edges over 0..Nyquist."""
    n_bins = cfg.n_fft // 2 + 1
    freqs = np.arange(n_bins) * cfg.sample_rate / cfg.n_fft
    edges = np.linspace(0.0, cfg.sample_rate / 2, cfg.n_filters + 2)
    fb = np.zeros((cfg.n_filters, n_bins))
    for k in range(cfg.n_filters):
        lo, mid, hi = edges[k], edges[k + 1], edges[k + 2]
        rise = (freqs - lo) / (mid - lo)
        fall = (hi - freqs) / (hi - mid)
        fb[k] = np.clip(np.minimum(rise, fall), 0.0, None)
    return fb


def filter_centers(cfg: LFCCConfig = LFCCConfig()) -> np.ndarray:
    return np.linspace(0.0, cfg.sample_rate / 2, cfg.n_filters + 2)[1:-1]


def deltas(feat: np.ndarray) -> np.ndarray:
    """(x[t+1] - x[t-1]) / 2 with replicated edge frames."""
    padded = np.concatenate([feat[:1], feat, feat[-1:]], axis=0)
    return (padded[2:] - padded[:-2]) / 2.0


def filterbank_energies(frames: np.ndarray, cfg: LFCCConfig = LFCCConfig()) -> np.ndarray:
    if frames.shape[1] > cfg.n_fft:
        raise ValueError(f"frame length {frames.shape[1]} exceeds FFT size {cfg.n_fft}")
    spec = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2
    return spec @ linear_filterbank(cfg).T


def lfcc(frames: np.ndarray, cfg: LFCCConfig = LFCCConfig()) -> np.ndarray:
    """Windowed frames [N, win] -> LFCC matrix [N, 60] (static, delta, delta-delta)."""
    energies = filterbank_energies(frames, cfg)
    logfb = np.log(np.maximum(energies, cfg.log_floor))
    static = scipy.fft.dct(logfb, type=2, norm="ortho", axis=1)[:, :cfg.n_ceps]
    if not cfg.with_deltas:
        return static
    d1 = deltas(static)
    d2 = deltas(d1)
    return np.concatenate([static, d1, d2], axis=1)


def extract(clip: AudioClip | np.ndarray, cfg: LFCCConfig = LFCCConfig()) -> np.ndarray:
    """Waveform to float32 LFCC matrix [N, 60]."""
    return lfcc(frame_and_window(clip, cfg), cfg).astype(np.float32)


# ---------------------------------------------------------------------------
# file formats


def read_wav(path) -> AudioClip:
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample type {data.dtype}")
    return AudioClip(samples, rate)


def write_wav(path, clip: AudioClip) -> None:
    """16-bit PCM mono; samples are clipped to [-1, 1)."""
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    wavfile.write(path, clip.sample_rate, pcm)


def read_raw_float32(path, sample_rate: int = 16000) -> AudioClip:
    return AudioClip(np.fromfile(path, dtype="<f4").astype(np.float64), sample_rate)


def write_features(path, feat: np.ndarray) -> None:
    """Header of two little-endian int32 (N, dim) followed by row-major float32."""
    feat = np.ascontiguousarray(feat, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<ii", *feat.shape))
        fh.write(feat.tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    n, dim = struct.unpack("<ii", raw[:8])
    body = np.frombuffer(raw, dtype="<f4", offset=8)
    if body.size != n * dim:
        raise ValueError(f"{path}: header says {n}x{dim} but body holds {body.size} values")
    return body.reshape(n, dim).astype(np.float32)
