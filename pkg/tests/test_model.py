from pathlib import Path

import numpy as np
import pytest

from spoofmtl import autodiff as ad
from spoofmtl.autodiff import Tensor
from spoofmtl.model import (
    VARIANTS,
    Backbone,
    ModelConfig,
    SEBlock,
    build_model,
    load_bundle,
    receptive_field,
    save_bundle,
    se_param_count,
    segment_branch,
    utterance_branch,
)

GOLDEN = Path(__file__).parent / "data" / "selcnn_layers.tsv"


def golden_rows():
    rows = []
    for line in GOLDEN.read_text().splitlines():
        if line.startswith("#"):
            continue
        cells = line.split("\t") + [""]
        rows.append(tuple(cells[:3]))
    return rows


def instantiate(size: str, T: int, F: int) -> tuple:
    """'[B, 32, T // 4, F // 4]' -> (32, T // 4, F // 4) with integers substituted."""
    parts = [p.strip() for p in size.strip("[]").split(",")][1:]
    return tuple(int(eval(p, {}, {"T": T, "F": F})) for p in parts)


def features(B, N, seed=0):
    return np.random.default_rng(seed).standard_normal((B, N, 60)).astype(np.float32)


# --- layer table ------------------------------------------------------------


def test_describe_matches_golden_table():
    realised = Backbone(ModelConfig(), np.random.default_rng(0)).describe()
    golden = golden_rows()
    assert [r[:2] for r in realised] == [g[:2] for g in golden]
    for r, g in zip(realised, golden):
        if g[2]:
            assert r[2] == g[2], r


@pytest.mark.parametrize("N", [16, 33, 99, 160])
def test_traced_shapes_follow_table(N):
    bundle = build_model("Seg", seed=0).eval()
    trace = []
    with ad.no_grad():
        h, m_len = bundle.backbone(features(2, N), None, trace)
    golden = [g for g in golden_rows() if g[2]]
    cnn_trace = trace[:len(golden)]
    for (name, shape), (gname, _, gsize) in zip(cnn_trace, golden):
        assert name == gname
        assert shape[1:] == instantiate(gsize, N, 60), name
    M = N // 2 // 2 // 2 // 2
    assert h.shape == (2, M, 96)
    assert list(m_len) == [M, M]


def test_99_frames_give_6_embeddings():
    with ad.no_grad():
        h, _ = build_model("Seg").eval().backbone(features(1, 99))
    assert h.shape[1] == 6


def test_too_short_input_names_minimum():
    with pytest.raises(ValueError, match="16"):
        build_model("Seg").backbone(features(1, 15))


def test_se_adds_exactly_the_fc_parameters():
    def count(use_se):
        return sum(p.size for p in build_model("Seg", ModelConfig(use_se=use_se)).backbone.parameters())

    se_inputs = [32, 32, 48, 48, 64, 64, 32, 32]  # channels entering each SE row of the table
    expected = sum(2 * c * (c // 2) + c // 2 + c for c in se_inputs)
    assert count(True) - count(False) == expected
    assert sum(se_param_count(c, 2) for c in se_inputs) == expected


def test_se_reduction_must_divide_channels():
    with pytest.raises(ValueError):
        SEBlock(48, 5, np.random.default_rng(0), np.float32)


def test_se_zero_excitation_halves_input():
    se = SEBlock(4, 2, np.random.default_rng(0), np.float64)
    se.fc2_w.data[:] = 0
    se.fc2_b.data[:] = 0
    x = np.random.default_rng(1).standard_normal((1, 4, 3, 3))
    np.testing.assert_allclose(se(Tensor(x)).data, 0.5 * x)


def test_squeeze_of_constant_channel_is_the_constant():
    x = np.broadcast_to(np.array([1.5, -2.0, 0.0, 7.0])[None, :, None, None], (1, 4, 3, 5)).copy()
    np.testing.assert_allclose(ad.mean_over_axis(Tensor(x), (2, 3)).data, [[1.5, -2.0, 0.0, 7.0]])


# --- backbone properties ----------------------------------------------------


def test_batch_permutation_permutes_outputs():
    bundle = build_model("MulBS", seed=3).eval()
    feats = features(3, 70, seed=2)
    lengths = np.array([70, 40, 55])
    perm = [2, 0, 1]
    with ad.no_grad():
        a = bundle(feats, lengths)
        b = bundle(feats[perm], lengths[perm])
    np.testing.assert_allclose(b["h"].data, a["h"].data[perm], atol=1e-5)
    np.testing.assert_allclose(b["cos_utt"].data, a["cos_utt"].data[perm], atol=1e-5)


def test_padding_does_not_leak_into_valid_steps():
    bundle = build_model("Seg", seed=1).eval()
    short = features(1, 48, seed=5)
    padded = np.concatenate([short, features(1, 32, seed=6)], axis=1)
    with ad.no_grad():
        a, _ = bundle.backbone(short)
        b, m = bundle.backbone(padded, [48])
    assert m[0] == 3
    np.testing.assert_allclose(b.data[:, :3], a.data, atol=1e-5)
    assert np.all(b.data[:, 3:] == 0)


def test_receptive_field_of_first_step():
    start, end = receptive_field(0)
    assert (start, end) == (-24, 39)
    assert receptive_field(1)[0] - start == 16


def test_cnn_locality_without_se():
    backbone = Backbone(ModelConfig(use_se=False), np.random.default_rng(0), np.float64).eval()
    N = 160
    x = np.random.default_rng(1).standard_normal((1, 1, N, 60))
    y = x.copy()
    y[0, 0, N - 1] += 5.0
    with ad.no_grad():
        a = backbone.cnn(Tensor(x), np.array([N]))[0].data
        b = backbone.cnn(Tensor(y), np.array([N]))[0].data
    changed = np.abs(a - b).max(axis=(0, 1, 3)) > 0
    covers = np.array([receptive_field(m)[0] <= N - 1 <= receptive_field(m)[1] for m in range(a.shape[2])])
    assert changed[-1]
    assert not np.any(changed & ~covers)


def test_cnn_with_se_changes_far_steps_only_through_gates():
    # the SE squeeze pools over the whole utterance, so distant steps move, but far less
    backbone = Backbone(ModelConfig(), np.random.default_rng(0), np.float64).eval()
    N = 160
    x = np.random.default_rng(1).standard_normal((1, 1, N, 60))
    y = x.copy()
    y[0, 0, N - 1] += 5.0
    with ad.no_grad():
        a = backbone.cnn(Tensor(x), np.array([N]))[0].data
        b = backbone.cnn(Tensor(y), np.array([N]))[0].data
    diff = np.abs(a - b).max(axis=(0, 1, 3))
    assert diff[0] < 0.1 * diff[-1]


def test_zero_lstm_block_is_identity():
    bundle = build_model("Seg", ModelConfig(), seed=0, dtype=np.float64).eval()
    bb = bundle.backbone
    for layer in (bb.lstm1, bb.lstm2):
        for p in layer.parameters():
            p.data[:] = 0
    feats = features(2, 64).astype(np.float64)
    with ad.no_grad():
        h, _ = bb(feats)
        cnn, _ = bb.cnn(Tensor(feats.reshape(2, 1, 64, 60)), np.array([64, 64]))
    flat = cnn.data.transpose(0, 2, 1, 3).reshape(2, 4, 96)
    np.testing.assert_array_equal(h.data, flat)


# --- heads ------------------------------------------------------------------


def test_utterance_branch_single_step_and_direction():
    rng = np.random.default_rng(0)
    cv = Tensor(rng.standard_normal((2, 6)))
    h = rng.standard_normal((1, 1, 6))
    o, cos = utterance_branch(Tensor(h), [1], cv)
    np.testing.assert_allclose(o.data, h[:, 0])
    c = cv.data / np.linalg.norm(cv.data, axis=1, keepdims=True)
    h_dir = np.tile(3.0 * c[0], (1, 4, 1))
    _, cos = utterance_branch(Tensor(h_dir), [4], cv)
    np.testing.assert_allclose(cos.data[0], [1.0, c[1] @ c[0]], atol=1e-12)


def test_cosines_are_bounded():
    rng = np.random.default_rng(1)
    _, cos = utterance_branch(Tensor(rng.standard_normal((20, 7, 5)) * 100), None, Tensor(rng.standard_normal((2, 5))))
    assert np.all(np.abs(cos.data) <= 1 + 1e-12)


def test_segment_branch_examples():
    rng = np.random.default_rng(2)
    cv = Tensor(rng.standard_normal((2, 6)))
    c = cv.data / np.linalg.norm(cv.data, axis=1, keepdims=True)
    h = rng.standard_normal((1, 3, 6))
    h[0, 1] = 2.0 * c[0]
    cos = segment_branch(Tensor(h), cv).data
    np.testing.assert_allclose(cos[0, 1], [1.0, c[1] @ c[0]], atol=1e-12)
    neg = segment_branch(Tensor(-h), cv).data
    np.testing.assert_allclose(neg, -cos, atol=1e-12)
    single = h[:, :1]
    np.testing.assert_allclose(segment_branch(Tensor(single), cv).data[:, 0],
                               utterance_branch(Tensor(single), [1], cv)[1].data, atol=1e-12)


# --- variants ---------------------------------------------------------------


@pytest.mark.parametrize("variant,heads", [("Utt", {"utt"}), ("Seg", {"seg"}), ("UttU", {"utt"}),
                                           ("SegU", {"seg"}), ("MulBS", {"utt", "seg"})])
def test_variant_heads(variant, heads):
    bundle = build_model(variant)
    assert set(bundle.heads) == heads
    if "utt" in heads:
        assert bundle.utt_head.pooling
    out = bundle.eval()(features(2, 40))
    if variant != "Seg":
        assert out["cos_utt"].shape == (2, 2)
    if variant != "Utt":
        assert out["cos_seg"].shape == (2, 2, 2)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_all_state_shares_the_model_dtype(dtype):
    assert {a.dtype for a in build_model("MulBS", dtype=dtype).state_dict().values()} == {np.dtype(dtype)}


def test_uni_branch_utt_has_no_segment_parameters():
    names = [n for n, _ in build_model("UttU").named_parameters()]
    assert not any(n.startswith("seg_head") for n in names)


def test_mulbs_heads_share_backbone():
    bundle = build_model("MulBS")
    h = bundle.backbone
    assert bundle.utt_head is not bundle.seg_head
    assert all(p is q for p, q in zip(h.parameters(), bundle.parameters()[:len(h.parameters())]))


def test_same_seed_same_parameters():
    a, b, c = build_model("MulBS", seed=4), build_model("MulBS", seed=4), build_model("MulBS", seed=5)
    for (n, x), (_, y) in zip(a.named_parameters(), b.named_parameters()):
        assert x.data.tobytes() == y.data.tobytes(), n
    assert any(x.data.tobytes() != z.data.tobytes() for x, z in zip(a.parameters(), c.parameters()))


def test_warmup_variant_needs_checkpoint_and_known_variant():
    with pytest.raises(ValueError, match="warm-up"):
        build_model("SegBW")
    with pytest.raises(ValueError, match="unknown variant"):
        build_model("Mul")
    assert "SegBW" in VARIANTS


def test_bundle_round_trip(tmp_path):
    bundle = build_model("MulBS", seed=2)
    bundle.train()
    with ad.no_grad():
        bundle(features(4, 50))  # move BN running stats off their defaults
    bundle.eval()
    save_bundle(tmp_path / "m.ckpt", bundle)
    loaded = load_bundle(tmp_path / "m.ckpt").eval()
    feats = features(2, 50, seed=9)
    with ad.no_grad():
        a, b = bundle(feats), loaded(feats)
    assert a["cos_seg"].data.tobytes() == b["cos_seg"].data.tobytes()
    assert loaded.variant == "MulBS"
