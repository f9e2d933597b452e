import hashlib
import os
import tempfile

import numpy as np
import pytest

from tapernorm.data import build_default_corpus, load_corpus


@pytest.fixture(scope="session")
def corpus_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "corpus.txt"
    return build_default_corpus(str(path))


@pytest.fixture(scope="session")
def desk_cache_dir(corpus_path):
    """Stable cache directory for the long acceptance training runs.

    Keyed on the corpus content and run length so edits to either retrain;
    delete the directory to force a full rerun after code changes.
    """
    from desk_runs import DESK_STEPS

    digest = hashlib.sha256(open(corpus_path, "rb").read()).hexdigest()[:12]
    root = os.environ.get("TAPERNORM_TEST_CACHE", tempfile.gettempdir())
    path = os.path.join(root, f"tapernorm-desk-{DESK_STEPS}-{digest}")
    os.makedirs(path, exist_ok=True)
    return path


@pytest.fixture(scope="session")
def desk_summaries(corpus_path, desk_cache_dir):
    from desk_runs import ensure_desk_runs

    return ensure_desk_runs(str(corpus_path), desk_cache_dir)


@pytest.fixture(scope="session")
def corpus(corpus_path):
    """(stream, vocab) for the bundled deterministic corpus."""
    return load_corpus(corpus_path)


@pytest.fixture(scope="session")
def small_stream():
    """Tiny synthetic stream for fast trainer smoke tests."""
    rng = np.random.default_rng(1234)
    # weakly structured so a tiny model can reduce loss
    base = np.tile(np.arange(7), 400)
    noise = rng.integers(0, 7, size=base.size)
    keep = rng.random(base.size) < 0.8
    return np.where(keep, base, noise).astype(np.int32)
