import time

import numpy as np
import pytest

from memalign.synth import CorpusSpec, generate_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_spec():
    return CorpusSpec(n_train_speakers=10, n_holdout_speakers=12, images_per_speaker=4,
                      utterances_per_speaker=6, embedding_dim=8, latent_dim=4, frames=6,
                      content_dim=3, seed=7)


@pytest.fixture(scope="session")
def small_corpus(small_spec):
    return generate_corpus(small_spec)


def random_simplex(rng, n):
    x = rng.normal(size=n) * 2.0
    e = np.exp(x - x.max())
    return e / e.sum()


class Pipeline:
    """Outputs of the default gen -> pretrain -> train -> eval run, shared across modules."""

    def __init__(self, root):
        self.root = root
        self.corpus = root / "corpus"
        self.timings = {}

    def path(self, name):
        return self.root / name


def _timed(pipe, label, argv):
    from memalign.cli import main
    t0 = time.perf_counter()
    code = main(argv + ["--quiet"])
    pipe.timings[label] = time.perf_counter() - t0
    assert code == 0, f"{label} exited {code}"


@pytest.fixture(scope="session")
def default_pipeline(tmp_path_factory):
    """Seed 1, default config: one pretrain, then full and both ablation runs."""
    pipe = Pipeline(tmp_path_factory.mktemp("pipeline"))
    c = str(pipe.corpus)
    _timed(pipe, "gen", ["gen", "--seed", "1", "--out", c])
    _timed(pipe, "pretrain", ["pretrain", "--seed", "1", "--corpus", c, "--out", str(pipe.path("pre.json"))])
    for name, flags in (("full", []), ("no_mfva", ["--no-mfva"]), ("no_inter", ["--no-inter"])):
        model = str(pipe.path(f"{name}.json"))
        _timed(pipe, f"train_{name}", ["train", "--seed", "1", "--corpus", c, "--pretrained",
                                       str(pipe.path("pre.json")), "--out", model] + flags)
        _timed(pipe, f"eval_{name}", ["eval", "--seed", "1", "--corpus", c, "--model", model,
                                      "--report", str(pipe.path(f"{name}.report.json"))])
    return pipe


N_CRITERIA = 10
_acceptance_lines = {}


class AcceptanceRecorder:
    def check(self, number, title, passed, detail=""):
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        _acceptance_lines[number] = line
        print(line)
        assert passed, line


@pytest.fixture
def acceptance():
    return AcceptanceRecorder()


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        terminalreporter.write_line(_acceptance_lines.get(n, f"criterion {n:2d} NOT RUN"))
