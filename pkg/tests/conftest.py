import numpy as np
import pytest

from camnorm.data import Dataset, SynthConfig, generate_synthetic


def make_dataset(rows, dim=2, name="toy", seed=0):
    """Build a dataset from (identity, camera, split) triples with random features."""
    rng = np.random.default_rng(seed)
    ids, cams, splits = zip(*rows) if rows else ((), (), ())
    feats = rng.normal(size=(len(rows), dim))
    return Dataset(name, dim, feats, ids, cams, splits)


@pytest.fixture(scope="session")
def small_synth():
    cfg = SynthConfig(dim=8, n_train_ids=24, n_eval_ids=10, train_cameras=(0, 1, 2), eval_images=4,
                      train_images=4, seed=3, name="small")
    return generate_synthetic(cfg)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(LINES):
            terminalreporter.write_line(LINES[number])
