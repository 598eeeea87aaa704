"""Finite-difference checks for every differentiable operator the model uses.

Each entry maps a name to ``check(seed) -> max relative error`` evaluated in
float64.  ``run_suite`` is what ``spoofmtl gradcheck`` prints.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import grad_check
from .model import segment_branch, utterance_branch
from .objective import fused_loss, loss_seg, loss_utt

TOLERANCE = 1e-4


def _labels(seed: int, shape) -> np.ndarray:
    return np.random.default_rng([seed, 99]).integers(0, 2, size=shape)


def _conv(seed):
    return grad_check(lambda x, w, b: ad.conv2d(x, w, b, 1, 1), [(1, 2, 5, 5), (3, 2, 3, 3), (3,)], seed)


def _conv_strided(seed):
    return grad_check(lambda x, w, b: ad.conv2d(x, w, b, (2, 1), (2, 0)), [(2, 1, 7, 6), (2, 1, 5, 3), (2,)], seed)


def _conv_1x1(seed):
    return grad_check(lambda x, w, b: ad.conv2d(x, w, b), [(2, 3, 4, 4), (4, 3, 1, 1), (4,)], seed)


def _mfm(seed):
    return grad_check(ad.max_feature_map, [(2, 4, 3, 3)], seed)


def _pool(seed):
    return grad_check(ad.maxpool2d, [(1, 1, 6, 6)], seed) if seed % 2 else grad_check(ad.maxpool2d, [(2, 2, 7, 5)], seed)


def _bn_train(seed):
    def op(x, g, b):
        return ad.batch_norm2d(x, g, b, ad.RunningStats(3, 0.1, np.float64), True)
    return grad_check(op, [(2, 3, 4, 4), (3,), (3,)], seed)


def _bn_masked(seed):
    mask = np.ones((2, 1, 5, 1))
    mask[1, :, 3:] = 0

    def op(x, g, b):
        return ad.batch_norm2d(x * mask, g, b, ad.RunningStats(2, 0.1, np.float64), True, mask=mask) * mask
    return grad_check(op, [(2, 2, 5, 3), (2,), (2,)], seed)


def _bn_eval(seed):
    stats = ad.RunningStats(3, 0.1, np.float64)
    stats.mean[:] = np.random.default_rng(seed).standard_normal(3)
    stats.var[:] = 0.5 + np.random.default_rng(seed + 1).random(3)
    return grad_check(lambda x, g, b: ad.batch_norm2d(x, g, b, stats, False), [(2, 3, 2, 2), (3,), (3,)], seed)


def _se(seed):
    def op(x, w1, b1, w2, b2):
        squeeze = ad.mean_over_axis(x, (2, 3))
        gate = ad.sigmoid(ad.linear(ad.relu(ad.linear(squeeze, w1, b1)), w2, b2))
        return x * ad.reshape(gate, gate.shape + (1, 1))
    return grad_check(op, [(1, 4, 3, 3), (2, 4), (2,), (4, 2), (4,)], seed)


def _linear(seed):
    return grad_check(ad.linear, [(3, 5), (4, 5), (4,)], seed)


def _sigmoid(seed):
    return grad_check(ad.sigmoid, [(3, 4)], seed)


def _relu(seed):
    return grad_check(ad.relu, [(3, 4)], seed)


def _tanh(seed):
    return grad_check(ad.tanh, [(3, 4)], seed)


def _bilstm(seed):
    def op(x, a, b, c, d, e, f):
        return ad.bilstm(x, [3], (a, b, c), (d, e, f))
    shapes = [(1, 3, 4), (8, 4), (8, 2), (8,), (8, 4), (8, 2), (8,)]
    return grad_check(op, shapes, seed)


def _bilstm_padded(seed):
    def op(x, a, b, c, d, e, f):
        return ad.bilstm(x, [4, 2], (a, b, c), (d, e, f))
    shapes = [(2, 4, 3), (8, 3), (8, 2), (8,), (8, 3), (8, 2), (8,)]
    return grad_check(op, shapes, seed)


def _avg_pool(seed):
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool)[:, :, None]
    return grad_check(lambda h: ad.mean_over_axis(h, 1, mask=mask), [(2, 4, 3)], seed)


def _min_pool(seed):
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], dtype=bool)
    return grad_check(lambda x: ad.min_over_axis(x, 1, mask=mask)[0], [(2, 5)], seed)


def _normalize(seed):
    return grad_check(lambda x: ad.l2_normalize(x, -1), [(3, 5)], seed)


def _cosine(seed):
    return grad_check(ad.cosine, [(2, 3, 6), (2, 6)], seed)


def _utt_branch(seed):
    return grad_check(lambda h, c: utterance_branch(h, [3, 2], c)[1], [(2, 3, 6), (2, 6)], seed)


def _seg_branch(seed):
    return grad_check(segment_branch, [(2, 3, 6), (2, 6)], seed)


def _loss_utt(seed):
    y = _labels(seed, 4)
    return grad_check(lambda h, c: loss_utt(ad.cosine(h, c), y), [(4, 6), (2, 6)], seed)


def _loss_seg(seed):
    y = _labels(seed, (3, 4))
    lengths = np.array([4, 2, 3])

    def op(h, c):
        return loss_seg(ad.cosine(h, c), y, lengths)
    return grad_check(op, [(3, 4, 6), (2, 6)], seed)


def _fused(seed):
    y_utt = _labels(seed, 2)
    y_seg = _labels(seed + 1, (2, 3))
    lengths = np.array([3, 2])

    def op(h, cu, cs):
        _, cos_u = utterance_branch(h, lengths, cu)
        cos_s = segment_branch(h, cs)
        return fused_loss(loss_utt(cos_u, y_utt), loss_seg(cos_s, y_seg, lengths)).total
    return grad_check(op, [(2, 3, 6), (2, 6), (2, 6)], seed)


CHECKS: dict[str, Callable[[int], float]] = {
    "conv2d": _conv,
    "conv2d_strided": _conv_strided,
    "conv2d_1x1": _conv_1x1,
    "max_feature_map": _mfm,
    "maxpool2d": _pool,
    "batch_norm2d_train": _bn_train,
    "batch_norm2d_masked": _bn_masked,
    "batch_norm2d_eval": _bn_eval,
    "se_block": _se,
    "linear": _linear,
    "sigmoid": _sigmoid,
    "relu": _relu,
    "tanh": _tanh,
    "bilstm": _bilstm,
    "bilstm_padded": _bilstm_padded,
    "average_pool": _avg_pool,
    "min_pool": _min_pool,
    "l2_normalize": _normalize,
    "cosine": _cosine,
    "utterance_branch": _utt_branch,
    "segment_branch": _seg_branch,
    "loss_utt": _loss_utt,
    "loss_seg": _loss_seg,
    "fused_loss": _fused,
}


@dataclass
class CheckResult:
    name: str
    worst_error: float
    seeds: int

    @property
    def passed(self) -> bool:
        return self.worst_error < TOLERANCE


def run_suite(seeds: Iterable[int] = range(5), names: Iterable[str] | None = None) -> list[CheckResult]:
    seeds = list(seeds)
    results = []
    for name in (names or CHECKS):
        worst = max(CHECKS[name](s) for s in seeds)
        results.append(CheckResult(name, worst, len(seeds)))
    return results
