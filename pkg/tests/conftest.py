import numpy as np
import pytest

from fmeripo.model import ModelConfig
from fmeripo.music import Melody, NoteEvent


def tiny_config(**overrides) -> ModelConfig:
    """Small but structurally complete model for fast tests."""
    kw = dict(num_layers=2, num_heads=2, model_dim=16, fme_dim=16, proj_dim=8, ffn_dim=32,
              max_len=64, batch_size=4)
    kw.update(overrides)
    return ModelConfig(**kw)


def random_melody(rng, n_notes: int, name: str = "piece", rest_p: float = 0.1) -> Melody:
    notes = []
    for _ in range(n_notes):
        pitch = "rest" if rng.random() < rest_p else int(rng.integers(48, 84))
        notes.append(NoteEvent(pitch, float(rng.choice([0.25, 0.5, 1.0, 1.5, 2.0]))))
    return Melody(name, notes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting -----------------------------------------------------------
# Each acceptance criterion records one line; they are printed together at the
# end of the run so the verdicts stay readable in long logs.

_acceptance_key = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_acceptance_key] = {}


@pytest.fixture
def criterion(request):
    results = request.config.stash[_acceptance_key]

    def record(number: int, title: str, ok: bool, detail: str = ""):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title}"
        results[number] = line + (f" ({detail})" if detail else "")
        print(results[number])
        assert ok, results[number]

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_acceptance_key, {})
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
