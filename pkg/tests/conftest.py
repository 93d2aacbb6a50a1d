import logging

import pytest

import natural
from blockcnn.model import Variant
from blockcnn.train import TrainConfig, train

# Desk-scale training recipe shared by the acceptance criteria.
DESK = dict(
    quality=20,
    iterations=2000,
    batch_size=32,
    lr=1e-3,
    weight_decay=1e-4,
    seed=0,
    channels=32,
    n_res_blocks=2,
    checkpoint_every=500,
)


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """Train and held-out test directories of 128x128 natural-image tiles."""
    root = tmp_path_factory.mktemp("corpus")
    return {
        "train": natural.write_corpus(root / "train", test=False),
        "test": natural.write_corpus(root / "test", test=True),
    }


@pytest.fixture(scope="session")
def desk_recipe():
    return dict(DESK)


def _train(variant, corpus):
    logging.getLogger("blockcnn").setLevel(logging.INFO)
    return train(TrainConfig(variant=variant, corpus=corpus["train"], **DESK))


@pytest.fixture(scope="session")
def desk_ar(corpus):
    return _train(Variant.AR, corpus)


@pytest.fixture(scope="session")
def desk_pred(corpus):
    return _train(Variant.PRED, corpus)


@pytest.fixture
def report(request):
    """record(n, passed, detail): one summary line per acceptance criterion."""
    lines = request.config.stash.setdefault(_REPORT, {})

    def record(n, passed, detail):
        lines[n] = f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}"

    return record


_REPORT = pytest.StashKey[dict]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_REPORT, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
