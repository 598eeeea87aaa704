"""Acceptance criteria, one test per criterion.

Each test records a single ``criterion N: PASS|FAIL ...`` line that the
terminal summary prints at the end of the run.  The training criteria (6
and 7) run on the default 400/100/100 synthetic corpus and take most of
the suite's wall-clock time.
"""

import time

import numpy as np
import pytest

from spoofmtl import autodiff as ad
from spoofmtl.cli import main
from spoofmtl.datagen import (
    SegmentLabelTrack,
    SynthSpec,
    align_labels_to_frames,
    corpus_from_trials,
    generate_trials,
    num_embeddings,
    spoof_units_for_ratio,
)
from spoofmtl.evaluation import compute_eer
from spoofmtl.features import num_frames
from spoofmtl.gradsuite import TOLERANCE, run_suite
from spoofmtl.model import build_model, utterance_branch
from spoofmtl.objective import decomposed_segment_scores
from spoofmtl.training import TrainConfig, collate, eer_report, multi_seed_protocol, score_utterances, train, warmup_expand

from conftest import ACCEPTANCE_LINES
from test_datagen import overlap_oracle
from test_evaluation import brute_force_eer
from test_model import golden_rows, instantiate


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def default_trials():
    return generate_trials(SynthSpec())


@pytest.fixture(scope="module")
def default_corpus(default_trials):
    return corpus_from_trials(default_trials)


def test_criterion_1_gradient_suite():
    t0 = time.process_time()
    results = run_suite(range(5))
    cpu = time.process_time() - t0
    worst = max(r.worst_error for r in results)
    covered = {r.name for r in results}
    required = {"conv2d", "max_feature_map", "maxpool2d", "batch_norm2d_train", "se_block", "linear", "sigmoid",
                "relu", "tanh", "bilstm", "average_pool", "l2_normalize", "cosine", "loss_utt", "loss_seg",
                "fused_loss"}
    ok = (all(r.passed and r.seeds >= 5 for r in results) and required <= covered
          and worst < TOLERANCE == 1e-4 and cpu < 120)
    record(1, ok, f"{len(results)} operators, worst rel error {worst:.2e}, {cpu:.1f} s CPU")


def test_criterion_2_decomposition_identity():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        M = int(rng.integers(1, 51))
        h = rng.standard_normal((M, 96)).astype(np.float32)
        cv = rng.standard_normal((2, 96)).astype(np.float32)
        _, seg = decomposed_segment_scores(h, cv)
        _, cos_utt = utterance_branch(ad.Tensor(h[None]), np.array([M]), ad.Tensor(cv))
        assert seg.dtype == np.float32 and cos_utt.data.dtype == np.float32
        worst = max(worst, abs(float(seg.mean()) - float(cos_utt.data[0, 0])))
    record(2, worst < 1e-6, f"1000 trials, worst |mean(segment) - utterance| {worst:.2e}")


def test_criterion_3_shape_conformance():
    golden = golden_rows()
    layered = [g for g in golden if g[2]]
    bundle = build_model("Seg", seed=0).eval()
    problems = []
    for N in (16, 33, 99, 160):
        trace = []
        feats = np.random.default_rng(N).standard_normal((1, N, 60)).astype(np.float32)
        with ad.no_grad():
            h, m_len = bundle.backbone(feats, None, trace)
        for (name, shape), (gname, _, gsize) in zip(trace, layered):
            if name != gname or shape[1:] != instantiate(gsize, N, 60):
                problems.append(f"N={N} {name}")
        M = num_embeddings(N)
        if M != N // 2 // 2 // 2 // 2 or h.shape[1] != M or int(m_len[0]) != M:
            problems.append(f"N={N} M")
    table = [r[:2] for r in bundle.backbone.describe()] == [g[:2] for g in golden]
    ok = not problems and table and num_embeddings(99) == 6
    record(3, ok, f"{len(layered)} sized layers at N in (16, 33, 99, 160); problems: {problems or 'none'}")


def test_criterion_4_eer_oracle():
    rng = np.random.default_rng(7)
    worst, invariant = 0.0, True
    for _ in range(100):
        nb, ns = (int(v) for v in rng.integers(1, 101, 2))
        bona = np.round(rng.normal(0.4, 1, nb), 2)
        spoof = np.round(rng.normal(-0.3, 1, ns), 2)
        eer = compute_eer(bona, spoof)[0]
        worst = max(worst, abs(eer - brute_force_eer(list(bona), list(spoof))))
        for f in (lambda x: np.exp(2 * x), lambda x: x ** 3 + 5, lambda x: np.arctan(x)):
            invariant &= abs(compute_eer(f(bona), f(spoof))[0] - eer) < 1e-12
    record(4, worst < 1e-9 and invariant, f"100 instances, worst deviation {worst:.1e}, invariance {invariant}")


def test_criterion_5_warmup_copy_contract(toy_corpus):
    probe = collate(toy_corpus["eval"])
    same = []
    for base, target, key in (("Utt", "UttBW", "cos_utt"), ("Seg", "SegBW", "cos_seg")):
        pre = train(TrainConfig(variant=base, max_epochs=1, batch_size=4), toy_corpus).bundle
        with ad.no_grad():
            ref = pre(probe.features, probe.lengths)[key].data
            got = warmup_expand(pre, target, seed=5).eval()(probe.features, probe.lengths)[key].data
        same.append(ref.tobytes() == got.tobytes())
    record(5, all(same), f"UttBW bitwise {same[0]}, SegBW bitwise {same[1]}")


@pytest.mark.slow
@pytest.mark.parametrize("variant", ["Seg", "MulBS"])
def test_criterion_6_end_to_end(variant, default_corpus):
    t0 = time.perf_counter()
    res = train(TrainConfig(variant=variant, max_epochs=30), default_corpus)
    minutes = (time.perf_counter() - t0) / 60
    rep = eer_report(score_utterances(res.bundle, default_corpus["dev"]), default_corpus["dev"])
    ok = rep.utt_eer <= 0.05 and rep.seg_eer <= 0.15 and minutes < 15
    record(6, ok, f"{variant}: dev utt EER {rep.utt_eer:.4f}, seg EER {rep.seg_eer:.4f}, {minutes:.1f} min")


@pytest.mark.slow
def test_criterion_7_single_task_asymmetry(default_corpus):
    seeds = [0, 1, 2]
    budget = dict(max_epochs=8)  # same budget for both variants
    utt = multi_seed_protocol(TrainConfig(variant="Utt", **budget), default_corpus, seeds).mean("eval")
    seg = multi_seed_protocol(TrainConfig(variant="Seg", **budget), default_corpus, seeds).mean("eval")
    ratio = utt["seg_eer"] / max(seg["seg_eer"], 1e-12)
    record(7, ratio >= 1.5, f"eval seg EER Utt {utt['seg_eer']:.4f} vs Seg {seg['seg_eer']:.4f}, ratio {ratio:.2f}")


def test_criterion_8_cli_determinism(tmp_path):
    data = tmp_path / "data"
    assert main(["gen-data", "--out", str(data), "--override", "n_train=16", "--override", "n_dev=8",
                 "--override", "n_eval=8"]) == 0
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["train", "--variant", "MulBS", "--seed", "100", "--data", str(data), "--out", str(out),
                     "--override", "max_epochs=3", "--override", "batch_size=4"]) == 0
        outs.append(out)
    csv_same = (outs[0] / "run_record.csv").read_bytes() == (outs[1] / "run_record.csv").read_bytes()
    ckpt_same = (outs[0] / "model.ckpt").read_bytes() == (outs[1] / "model.ckpt").read_bytes()
    record(8, csv_same and ckpt_same, f"identical CSV {csv_same}, identical checkpoint {ckpt_same}")


def test_criterion_9_label_alignment(default_trials):
    rng = np.random.default_rng(99)
    agree = 0
    for _ in range(100):
        n_units = int(rng.integers(20, 400))
        units = spoof_units_for_ratio(n_units, rng.uniform(0.01, 0.99), rng)
        n = num_frames(n_units * 160)
        got = align_labels_to_frames(units, n)
        agree += np.array_equal(got, overlap_oracle(SegmentLabelTrack("x", units).spans(), n))
    or_ok = all(t.entry.label == int(t.track.unit_labels.any()) for t in default_trials)
    record(9, agree == 100 and or_ok, f"{agree}/100 tracks match the overlap oracle, OR labels on "
                                      f"{len(default_trials)} trials {or_ok}")
