"""SELCNN backbone, residual Bi-LSTM stack and the utterance/segment heads.

The convolutional stack follows the LCNN layout with a squeeze-and-excitation
block inserted before every convolution except the first.  Time and
frequency are each reduced 16x by four 2x2 max-pools, so one embedding is
produced per 16 feature frames (160 ms at a 10 ms hop).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Parameter, RunningStats, Tensor

VARIANTS = ("Utt", "Seg", "UttU", "SegU", "MulBS", "UttBW", "SegBW")
WARMUP_BASE = {"UttBW": "Utt", "SegBW": "Seg"}
HEADS = {
    "Utt": ("utt",),
    "UttU": ("utt",),
    "Seg": ("seg",),
    "SegU": ("seg",),
    "MulBS": ("utt", "seg"),
    "UttBW": ("utt", "seg"),
    "SegBW": ("utt", "seg"),
}
TIME_REDUCTION = 16
MIN_FRAMES = TIME_REDUCTION

# (kind, name, out_channels, kernel, padding); channel counts are pre-MFM
LCNN_LAYOUT = [
    ("conv", "Conv_0", 64, 5, 2),
    ("mfm", "MFM_1"),
    ("pool", "MaxPool_2"),
    ("conv", "Conv_3", 64, 1, 0),
    ("mfm", "MFM_4"),
    ("bn", "BatchNorm_5"),
    ("conv", "Conv_6", 96, 3, 1),
    ("mfm", "MFM_7"),
    ("pool", "MaxPool_8"),
    ("bn", "BatchNorm_9"),
    ("conv", "Conv_10", 96, 1, 0),
    ("mfm", "MFM_11"),
    ("bn", "BatchNorm_12"),
    ("conv", "Conv_13", 128, 3, 1),
    ("mfm", "MFM_14"),
    ("pool", "MaxPool_15"),
    ("conv", "Conv_16", 128, 1, 0),
    ("mfm", "MFM_17"),
    ("bn", "BatchNorm_18"),
    ("conv", "Conv_19", 64, 3, 1),
    ("mfm", "MFM_20"),
    ("bn", "BatchNorm_21"),
    ("conv", "Conv_22", 64, 1, 0),
    ("mfm", "MFM_23"),
    ("bn", "BatchNorm_24"),
    ("conv", "Conv_25", 64, 3, 1),
    ("mfm", "MFM_26"),
    ("pool", "MaxPool_27"),
    ("dropout", "Dropout_28"),
]


@dataclass
class ModelConfig:
    feat_dim: int = 60
    se_reduction: int = 2
    use_se: bool = True
    lstm_hidden: int = 48
    dropout: float = 0.5
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def to_dict(self) -> dict:
        return asdict(self)


def _uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _orthogonal(rng, rows, cols, dtype):
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    q = q if rows >= cols else q.T
    return q[:rows, :cols].astype(dtype)


class Conv(Module):
    def __init__(self, name, cin, cout, k, pad, rng, dtype):
        self.name = name
        self.pad = pad
        fan_in = cin * k * k
        self.weight = Parameter(_uniform(rng, (cout, cin, k, k), fan_in, dtype))
        self.bias = Parameter((rng.uniform(-1, 1, cout) / np.sqrt(fan_in)).astype(dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, 1, self.pad, name=self.name)


class BatchNorm(Module):
    def __init__(self, name, channels, momentum, eps, dtype):
        self.name = name
        self.gamma = Parameter(np.ones(channels, dtype))
        self.beta = Parameter(np.zeros(channels, dtype))
        self.stats = RunningStats(channels, momentum, dtype)
        self.eps = eps

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        return ad.batch_norm2d(x, self.gamma, self.beta, self.stats, self.training, self.eps, mask)


class SEBlock(Module):
    """Squeeze (masked global mean) -> FC -> ReLU -> FC -> sigmoid -> channel scaling."""

    def __init__(self, channels: int, reduction: int, rng, dtype):
        if reduction < 1 or channels % reduction:
            raise ValueError(f"SE block: {channels} channels not divisible by reduction {reduction}")
        hidden = channels // reduction
        self.channels = channels
        self.reduction = reduction
        self.fc1_w = Parameter(_uniform(rng, (hidden, channels), channels, dtype))
        self.fc1_b = Parameter(np.zeros(hidden, dtype))
        self.fc2_w = Parameter(_uniform(rng, (channels, hidden), hidden, dtype))
        self.fc2_b = Parameter(np.zeros(channels, dtype))

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        squeeze = ad.mean_over_axis(x, (2, 3), mask=mask)
        z = ad.relu(ad.linear(squeeze, self.fc1_w, self.fc1_b))
        gate = ad.sigmoid(ad.linear(z, self.fc2_w, self.fc2_b))
        return x * ad.reshape(gate, gate.shape + (1, 1))


def se_param_count(channels: int, reduction: int) -> int:
    hidden = channels // reduction
    return 2 * channels * hidden + hidden + channels


class BiLSTMLayer(Module):
    def __init__(self, in_dim: int, hidden: int, rng, dtype):
        self.hidden = hidden
        params = []
        for _ in range(2):
            w_ih = _uniform(rng, (4 * hidden, in_dim), 3 * hidden, dtype)
            w_hh = np.concatenate([_orthogonal(rng, hidden, hidden, dtype) for _ in range(4)], axis=0)
            params.append((Parameter(w_ih), Parameter(w_hh), Parameter(np.zeros(4 * hidden, dtype))))
        (self.fw_ih, self.fw_hh, self.fw_b), (self.bw_ih, self.bw_hh, self.bw_b) = params

    def __call__(self, x: Tensor, lengths) -> Tensor:
        return ad.bilstm(x, lengths, (self.fw_ih, self.fw_hh, self.fw_b), (self.bw_ih, self.bw_hh, self.bw_b))


def _symbolic(div: int, sym: str) -> str:
    return sym if div == 1 else f"{sym} // {div}"


class Backbone(Module):
    """SELCNN followed by two Bi-LSTM layers with one residual skip over both."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.layers: list = []
        self.layer_specs: list = []
        ch = 1
        first_conv = True
        for spec in LCNN_LAYOUT:
            kind, name = spec[0], spec[1]
            if kind == "conv":
                if not first_conv and cfg.use_se:
                    self.layers.append(SEBlock(ch, cfg.se_reduction, rng, dtype))
                    self.layer_specs.append(("se", "SE block"))
                first_conv = False
                _, _, cout, k, pad = spec
                self.layers.append(Conv(name, ch, cout, k, pad, rng, dtype))
                self.layer_specs.append(spec)
                ch = cout
                continue
            if kind == "mfm":
                ch //= 2
                self.layers.append(None)
            elif kind == "bn":
                self.layers.append(BatchNorm(name, ch, cfg.bn_momentum, cfg.bn_eps, dtype))
            else:
                self.layers.append(None)
            self.layer_specs.append(spec)
        self.cnn_channels = ch
        self.cnn_freq = cfg.feat_dim // TIME_REDUCTION
        self.embed_dim = ch * self.cnn_freq
        if 2 * cfg.lstm_hidden != self.embed_dim:
            raise ValueError(
                f"Bi-LSTM output 2*{cfg.lstm_hidden} must equal SELCNN output dim {self.embed_dim} "
                "for the residual connection"
            )
        self.lstm1 = BiLSTMLayer(self.embed_dim, cfg.lstm_hidden, rng, dtype)
        self.lstm2 = BiLSTMLayer(self.embed_dim, cfg.lstm_hidden, rng, dtype)
        self.dropout_rng = np.random.default_rng(rng.integers(2**63))

    @property
    def se_blocks(self) -> list:
        return [m for m in self.layers if isinstance(m, SEBlock)]

    def cnn(self, x: Tensor, lengths: np.ndarray, trace: Optional[list] = None) -> tuple[Tensor, np.ndarray]:
        """x [B, 1, N, F] -> [B, C, N//16, F//16] and per-item output lengths."""
        lengths = np.asarray(lengths, dtype=int)
        padded = bool(np.any(lengths < x.shape[2]))

        def time_mask(T):
            return (np.arange(T)[None, :] < lengths[:, None]).astype(x.dtype)[:, None, :, None]

        for spec, layer in zip(self.layer_specs, self.layers):
            kind = spec[0]
            mask = time_mask(x.shape[2]) if padded else None
            if kind == "conv":
                if padded:
                    x = x * mask
                x = layer(x)
            elif kind == "se":
                x = layer(x, mask)
            elif kind == "mfm":
                x = ad.max_feature_map(x)
            elif kind == "pool":
                x = ad.maxpool2d(x)
                lengths = lengths // 2
            elif kind == "bn":
                x = layer(x, mask)
            elif kind == "dropout":
                x = ad.dropout(x, self.cfg.dropout, self.training, self.dropout_rng)
            if trace is not None:
                trace.append((spec[1], x.shape))
        return x, lengths

    def __call__(self, features, lengths=None, trace: Optional[list] = None) -> tuple[Tensor, np.ndarray]:
        """features [B, N, F] -> embeddings h [B, M, E] (padded steps zeroed) and lengths M_b."""
        feats = features if isinstance(features, Tensor) else Tensor(np.asarray(features))
        if feats.ndim != 3:
            raise ValueError(f"features must be [B, N, F], got {feats.shape}")
        B, N, F = feats.shape
        lengths = np.full(B, N) if lengths is None else np.asarray(lengths, dtype=int)
        if lengths.min() < MIN_FRAMES:
            raise ValueError(f"input needs at least {MIN_FRAMES} frames, got {int(lengths.min())}")
        if F != self.cfg.feat_dim:
            raise ValueError(f"expected {self.cfg.feat_dim}-dim features, got {F}")
        x = ad.reshape(feats, (B, 1, N, F))
        x, m_len = self.cnn(x, lengths, trace)
        _, C, M, Fr = x.shape
        x = ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (B, M, C * Fr))
        y = self.lstm2(self.lstm1(x, m_len), m_len)
        h = y + x
        if np.any(m_len < M):
            step_mask = (np.arange(M)[None, :] < m_len[:, None]).astype(h.dtype)[:, :, None]
            h = h * step_mask
        if trace is not None:
            trace.append(("BiLSTM x2 + residual", h.shape))
        return h, m_len

    def describe(self) -> list[tuple[str, str, str]]:
        """Realised layer table: (type, filter/stride/padding, symbolic output size)."""
        rows = []
        ch, div = 1, 1
        for spec in self.layer_specs:
            kind, name = spec[0], spec[1]
            fsp = "-"
            if kind == "conv":
                _, _, cout, k, pad = spec
                ch = cout
                fsp = f"{k} x {k} / 1 x 1 / {pad}"
            elif kind == "mfm":
                ch //= 2
            elif kind == "pool":
                div *= 2
                fsp = "2 x 2 / 2 x 2 / 0"
            rows.append((name, fsp, f"[B, {ch}, {_symbolic(div, 'T')}, {_symbolic(div, 'F')}]"))
        return rows


def receptive_field(m: int) -> tuple[int, int]:
    """Feature-frame span [start, end] (inclusive) seen by CNN output step ``m``.

    Conv kernels 5/3/3/3/3 at strides 1/2/4/8/8 plus four 2x pools give a
    64-frame field; zero padding shifts its start by 24 frames.  The Bi-LSTM
    stack that follows mixes all steps, so this bound applies to the CNN
    output only.
    """
    start, size, jump = 0, 1, 1
    for spec in LCNN_LAYOUT:
        if spec[0] == "conv":
            k, pad = spec[3], spec[4]
            size += (k - 1) * jump
            start -= pad * jump
        elif spec[0] == "pool":
            size += jump
            jump *= 2
    return start + m * jump, start + m * jump + size - 1


class Head(Module):
    """Cosine classifier against two trainable class vectors (bona fide, spoof)."""

    def __init__(self, kind: str, dim: int, rng: np.random.Generator, dtype=np.float32):
        if kind not in ("utt", "seg"):
            raise ValueError(f"unknown head kind {kind!r}")
        self.kind = kind
        self.pooling = kind == "utt"
        self.class_vectors = Parameter(_orthogonal(rng, dim, 2, dtype).T.copy())

    def __call__(self, h: Tensor, lengths: np.ndarray) -> tuple[Optional[Tensor], Tensor]:
        if self.pooling:
            return utterance_branch(h, lengths, self.class_vectors)
        return None, segment_branch(h, self.class_vectors)


def step_mask(lengths: np.ndarray, M: int) -> np.ndarray:
    return np.arange(M)[None, :] < np.asarray(lengths)[:, None]


def utterance_branch(h: Tensor, lengths, class_vectors: Tensor) -> tuple[Tensor, Tensor]:
    """Average-pool valid steps into o [B, E]; return (o, cos [B, 2])."""
    B, M, _ = h.shape
    lengths = np.full(B, M) if lengths is None else np.asarray(lengths)
    mask = step_mask(lengths, M)[:, :, None]
    o = ad.mean_over_axis(h, 1, mask=mask)
    return o, ad.cosine(o, class_vectors)


def segment_branch(h: Tensor, class_vectors: Tensor) -> Tensor:
    """Per-step cosine [B, M, 2]; padded (zero) steps give 0."""
    return ad.cosine(h, class_vectors, warn=False)


class ModelBundle(Module):
    def __init__(self, variant: str, backbone: Backbone, utt_head: Optional[Head],
                 seg_head: Optional[Head], config: ModelConfig, seed: int):
        self.variant = variant
        self.backbone = backbone
        self.utt_head = utt_head
        self.seg_head = seg_head
        self.config = config
        self.seed = seed

    @property
    def heads(self) -> dict:
        return {k: h for k, h in (("utt", self.utt_head), ("seg", self.seg_head)) if h is not None}

    def forward(self, features, lengths=None) -> dict:
        """Run backbone and heads.

        Returns a dict with ``h``, ``lengths`` (embedding steps per item) and,
        depending on the variant, ``o``, ``cos_utt`` [B, 2], ``cos_seg`` [B, M, 2].
        Uni-branch variants also fill the other level from their single head:
        UttU applies its class vectors to every step, SegU takes the cosines
        of the frame with the lowest bona fide cosine.
        """
        h, m_len = self.backbone(features, lengths)
        out = {"h": h, "lengths": m_len}
        if self.utt_head is not None:
            out["o"], out["cos_utt"] = self.utt_head(h, m_len)
        if self.seg_head is not None:
            _, out["cos_seg"] = self.seg_head(h, m_len)
        if self.variant == "UttU":
            out["cos_seg"] = segment_branch(h, self.utt_head.class_vectors)
        elif self.variant == "SegU":
            out["cos_utt"] = min_frame_cosines(out["cos_seg"], m_len)
        return out

    __call__ = forward

    def describe(self) -> str:
        lines = [f"{'Type':<14}| {'Filter/Stride/Padding':<22}| Output Size [B, C, T, F]"]
        for name, fsp, size in self.backbone.describe():
            lines.append(f"{name:<14}| {fsp:<22}| {size}")
        E = self.backbone.embed_dim
        H = self.config.lstm_hidden
        lines.append(f"{'Flatten':<14}| {'-':<22}| [B, T // 16, {E}]")
        lines.append(f"{'Bi-LSTM_1':<14}| {f'hidden {H} x 2':<22}| [B, T // 16, {2 * H}]")
        lines.append(f"{'Bi-LSTM_2':<14}| {f'hidden {H} x 2':<22}| [B, T // 16, {2 * H}]")
        lines.append(f"{'Residual add':<14}| {'-':<22}| [B, T // 16, {E}]")
        for kind, head in self.heads.items():
            if head.pooling:
                lines.append(f"{'AvgPool':<14}| {'-':<22}| [B, {E}]")
                lines.append(f"{'Cosine (utt)':<14}| {f'2 x {E}':<22}| [B, 2]")
            else:
                lines.append(f"{'Cosine (seg)':<14}| {f'2 x {E}':<22}| [B, T // 16, 2]")
        return "\n".join(lines) + "\n"


def min_frame_cosines(cos_seg: Tensor, lengths) -> Tensor:
    """Both class cosines of each trial's valid frame with the lowest bona fide cosine."""
    B, M, _ = cos_seg.shape
    mask = step_mask(np.full(B, M) if lengths is None else lengths, M)
    bona = np.where(mask, cos_seg.data[:, :, 0], np.inf)
    arg = np.argmin(bona, axis=1)
    return ad.take_along_axis(cos_seg, arg[:, None].repeat(2, axis=1), axis=1)


def _head_rng(seed: int, kind: str) -> np.random.Generator:
    return np.random.default_rng([seed, 1 if kind == "utt" else 2])


def build_model(variant: str, config: Optional[ModelConfig] = None, seed: int = 0,
                warmup_checkpoint=None, dtype=np.float32) -> ModelBundle:
    """Construct a bundle for ``variant`` with seed-deterministic initialisation.

    Warm-up variants (UttBW, SegBW) need the single-task checkpoint they
    expand; its backbone and head are copied and the missing head is added.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    config = config or ModelConfig()
    if variant in WARMUP_BASE:
        if warmup_checkpoint is None:
            raise ValueError(f"variant {variant} needs a warm-up checkpoint of a {WARMUP_BASE[variant]} model")
        base = load_bundle(warmup_checkpoint) if not isinstance(warmup_checkpoint, ModelBundle) else warmup_checkpoint
        return expand_bundle(base, variant, seed)
    backbone = Backbone(config, np.random.default_rng(seed), dtype)
    heads = {kind: Head(kind, backbone.embed_dim, _head_rng(seed, kind), dtype) for kind in HEADS[variant]}
    return ModelBundle(variant, backbone, heads.get("utt"), heads.get("seg"), config, seed)


def expand_bundle(base: ModelBundle, variant: str, seed: int) -> ModelBundle:
    """Copy ``base`` and attach the head that the binary-branch ``variant`` is missing."""
    if WARMUP_BASE.get(variant) != base.variant:
        raise ValueError(
            f"cannot expand a {base.variant} model into {variant}; "
            f"{variant} warms up from {WARMUP_BASE.get(variant, 'nothing')}"
        )
    dtype = base.backbone.parameters()[0].dtype
    clone = build_model(base.variant, base.config, base.seed, dtype=dtype)
    clone.load_state_dict(base.state_dict())
    new_kind = "seg" if variant == "UttBW" else "utt"
    new_head = Head(new_kind, clone.backbone.embed_dim, _head_rng(seed, new_kind), dtype)
    utt = clone.utt_head if new_kind == "seg" else new_head
    seg = new_head if new_kind == "seg" else clone.seg_head
    bundle = ModelBundle(variant, clone.backbone, utt, seg, base.config, seed)
    bundle.backbone.dropout_rng = np.random.default_rng([seed, 3])
    return bundle


def save_bundle(path, bundle: ModelBundle, extra_tensors: Optional[dict] = None, meta: Optional[dict] = None) -> None:
    tensors = bundle.state_dict()
    if extra_tensors:
        tensors.update(extra_tensors)
    info = {"variant": bundle.variant, "seed": bundle.seed, "model_config": bundle.config.to_dict()}
    info.update(meta or {})
    info["config_hash"] = ad.config_hash({k: info[k] for k in sorted(info) if k != "config_hash"})
    ad.save_checkpoint(path, tensors, info)


def load_bundle(path) -> ModelBundle:
    tensors, meta = ad.load_checkpoint(path)
    base_variant = meta["variant"]
    cfg = ModelConfig(**meta["model_config"])
    if base_variant in WARMUP_BASE:
        # rebuild the expanded layout from scratch, then overwrite everything
        backbone = Backbone(cfg, np.random.default_rng(meta["seed"]))
        bundle = ModelBundle(base_variant, backbone,
                             Head("utt", backbone.embed_dim, _head_rng(meta["seed"], "utt")),
                             Head("seg", backbone.embed_dim, _head_rng(meta["seed"], "seg")),
                             cfg, meta["seed"])
    else:
        bundle = build_model(base_variant, cfg, meta["seed"])
    bundle.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("adam.")})
    return bundle
