import time

import numpy as np
import pytest

from alignve.data import ToyConfig, generate_toy_dataset, load_dataset
from alignve.encoder import EncoderConfig
from alignve.model import AlignVE, ModelConfig
from alignve.text import EmbeddingTable, load_embeddings
from alignve.train import TrainConfig, train

TINY_ENCODER = EncoderConfig(d=8, heads=2, layers=1)
TOY_ENCODER = EncoderConfig(d=16, heads=2, layers=1)
# learning rate for the small encoders: the default 1e-4 scaled by ten
TOY_TRAIN = TrainConfig(lr=1e-3, max_epochs=50, encoder=TOY_ENCODER)

# (criterion, passed, detail) rows filled in by the acceptance tests
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_table():
    vocab = {w: i for i, w in enumerate(["two", "women", "are", "holding", "packages", "."])}
    vectors = np.random.default_rng(7).standard_normal((len(vocab), 8)).astype(np.float32)
    return EmbeddingTable(vocab, vectors)


@pytest.fixture
def tiny_model(small_table):
    cfg = ModelConfig(d_p=12, d_h=8, encoder=TINY_ENCODER)
    return AlignVE.initialize(cfg, small_table, seed=3)


@pytest.fixture(scope="session")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    toy = generate_toy_dataset(ToyConfig(), root)
    return {
        "toy": toy,
        "table": load_embeddings(toy.embeddings),
        "train": load_dataset(toy.manifests["train"]),
        "val": load_dataset(toy.manifests["val"]),
        "test": load_dataset(toy.manifests["test"]),
    }


@pytest.fixture(scope="session")
def toy_run(toy, tmp_path_factory):
    """One full single-threaded training run on the toy data, timed in CPU seconds."""
    out = tmp_path_factory.mktemp("toy_run")
    start = time.process_time()
    result = train(TOY_TRAIN, toy["train"], toy["val"], toy["table"], out_dir=out, threads=1)
    return {"cfg": TOY_TRAIN, "result": result, "cpu_seconds": time.process_time() - start, "out": out}
