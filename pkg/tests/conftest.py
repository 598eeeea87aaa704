import numpy as np
import pytest

from spoofmtl.datagen import Corpus, Utterance, num_embeddings


def toy_utterance(tid, label, n_frames, rng, frame_labels=None):
    """Bona fide frames sit near +1, spoof frames near -1 in every feature dimension."""
    m = num_embeddings(n_frames)
    fl = np.full(m, label, dtype=np.int8) if frame_labels is None else np.asarray(frame_labels, np.int8)
    per_frame = np.repeat(fl, 16)
    per_frame = np.concatenate([per_frame, np.full(n_frames - per_frame.size, per_frame[-1])])
    feats = np.where(per_frame[:, None] == 1, -1.0, 1.0) + rng.standard_normal((n_frames, 60))
    return Utterance(tid, feats.astype(np.float32), int(fl.any()), fl)


def make_toy_corpus(n_per_class=4, seed=0, n_frames=(32, 40)):
    rng = np.random.default_rng(seed)
    splits = {}
    for split in ("train", "dev", "eval"):
        utts = []
        for i in range(2 * n_per_class):
            label = i % 2
            n = int(rng.integers(n_frames[0], n_frames[1] + 1))
            utts.append(toy_utterance(f"{split}{i}", label, n, rng))
        splits[split] = utts
    return Corpus(splits)


@pytest.fixture(scope="session")
def toy_corpus():
    return make_toy_corpus()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
