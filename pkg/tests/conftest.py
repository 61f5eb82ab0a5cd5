"""
Test fixtures and configuration.
"""
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pytest

from conformer_r.config import get_settings
from conformer_r.models import (
    BatchingConfig,
    ConformerConfig,
    DecoderConfig,
    LossWeights,
    RunConfig,
    ScheduleConfig,
)
from conformer_r.tensor import Tensor, no_grad


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale experiments, enabled by CONFORMER_R_SLOW=1")


def pytest_collection_modifyitems(config, items):
    get_settings.cache_clear()
    if get_settings().run_slow:
        return
    skip = pytest.mark.skip(reason="set CONFORMER_R_SLOW=1 to run desk-scale experiments")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def isolated_state(monkeypatch):
    """Fresh settings and metrics for every test."""
    import conformer_r.metrics as metrics_module

    monkeypatch.setenv("LOG_LEVEL", "DEBUG")
    get_settings.cache_clear()
    metrics_module._metrics = None
    yield
    metrics_module._metrics = None
    get_settings.cache_clear()


@pytest.fixture
def rng():
    """Seeded numpy generator for test data."""
    return np.random.default_rng(20240611)


def finite_difference_error(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    points: int = 20,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """
    Worst |g_ad - g_fd| / max(1, |g_fd|) over random coordinates.

    loss_fn rebuilds the graph from the current contents of `tensors`.
    """
    for t in tensors:
        t.zero_grad()
    loss_fn().backward()
    analytic = [t.grad.copy() for t in tensors]
    picker = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(points):
        which = int(picker.integers(len(tensors)))
        target = tensors[which]
        index = tuple(int(picker.integers(n)) for n in target.shape)
        original = target.data[index]
        with no_grad():
            target.data[index] = original + h
            plus = loss_fn().item()
            target.data[index] = original - h
            minus = loss_fn().item()
        target.data[index] = original
        numeric = (plus - minus) / (2 * h)
        worst = max(worst, abs(analytic[which][index] - numeric) / max(1.0, abs(numeric)))
    return worst


@pytest.fixture
def grad_error():
    """The finite-difference checker."""
    return finite_difference_error


def leaf(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


@pytest.fixture
def tiny_config() -> RunConfig:
    """A few-hundred-parameter model that trains in seconds."""
    return RunConfig(
        experiment="tiny",
        epochs=1,
        encoder=ConformerConfig(n_blocks=1, d_model=8, n_heads=2, ff_expansion=2, depthwise_kernel=3,
                                dropout_p=0.1, subsample_channels=2),
        decoder=DecoderConfig(n_layers=1, d_model=8, n_heads=2, ff_expansion=2, dropout_p=0.1),
        loss=LossWeights(alpha=0.3, beta=0.7),
        schedule=ScheduleConfig(d_m=8, warmup_steps=10),
        batching=BatchingConfig(batch_bins=200, accum_steps=1),
    )


def without_dropout(cfg: RunConfig, **loss) -> RunConfig:
    raw = cfg.model_dump()
    raw["encoder"]["dropout_p"] = 0.0
    raw["decoder"]["dropout_p"] = 0.0
    raw["loss"].update(loss)
    return RunConfig.model_validate(raw)


@pytest.fixture
def synth_corpus(tmp_path) -> Path:
    """Four-utterance tone corpus featurized to FBK1; returns the feature manifest."""
    from conformer_r.main import cmd_featurize
    from conformer_r.models import FrontendConfig
    from conformer_r.synth import synthesize_corpus

    audio = tmp_path / "corpus"
    synthesize_corpus(audio, n_utts=4, vocab_size=3, min_len=2, max_len=3, seed=7)
    cmd_featurize(audio / "manifest.jsonl", tmp_path / "fbank", FrontendConfig())
    return tmp_path / "fbank" / "manifest.jsonl"


def random_features(rng: np.random.Generator, frames: int) -> np.ndarray:
    return rng.normal(size=(frames, 80))
