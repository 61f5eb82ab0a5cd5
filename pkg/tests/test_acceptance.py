"""
Desk-scale experiments on the synthetic tone corpus.

Both tests are slow; set CONFORMER_R_SLOW=1 to run them.
"""
import json
import warnings
from pathlib import Path
from statistics import mean

import pytest

from conformer_r.main import cmd_eval, cmd_featurize, cmd_train
from conformer_r.models import (
    BatchingConfig,
    ConformerConfig,
    DecoderConfig,
    FrontendConfig,
    LossWeights,
    RunConfig,
    ScheduleConfig,
    SeedConfig,
)
from conformer_r.synth import synthesize_corpus


def featurized_corpus(root: Path, n_utts: int, seed: int, noise_std: float = 0.0, prefix: str = "synth",
                      min_len: int = 3, max_len: int = 6) -> Path:
    synthesize_corpus(root / "audio", n_utts, vocab_size=5, min_len=min_len, max_len=max_len, seed=seed,
                      noise_std=noise_std, prefix=prefix)
    cmd_featurize(root / "audio" / "manifest.jsonl", root / "fbank", FrontendConfig())
    return root / "fbank" / "manifest.jsonl"


def desk_config(experiment: str, output_dir: Path, epochs: int, alpha: float, seed: int, batch_bins: int) -> RunConfig:
    return RunConfig(
        experiment=experiment,
        output_dir=str(output_dir),
        epochs=epochs,
        encoder=ConformerConfig(n_blocks=2, d_model=64, n_heads=4, ff_expansion=4, depthwise_kernel=15,
                                dropout_p=0.1, subsample_channels=16),
        decoder=DecoderConfig(n_layers=2, d_model=64, n_heads=4, ff_expansion=4, dropout_p=0.1),
        loss=LossWeights(alpha=alpha, beta=0.7, smoothing=0.1),
        schedule=ScheduleConfig(d_m=64, warmup_steps=200),
        batching=BatchingConfig(batch_bins=batch_bins),
        seed=SeedConfig(seed=seed),
    )


@pytest.mark.slow
def test_overfit_ten_utterances(tmp_path):
    """Test that a tiny model memorizes ten utterances through the CTC head."""
    manifest = featurized_corpus(tmp_path / "data", n_utts=10, seed=0)
    cfg = desk_config("overfit", tmp_path / "exp", epochs=200, alpha=0.3, seed=0, batch_bins=150)

    result = cmd_train(cfg, manifest)

    assert result.opt.step <= 2000
    recent = result.history[-10:]
    assert mean(h.loss_ctc for h in recent) < 0.1
    scores = cmd_eval(result.checkpoints[-1], manifest, tmp_path / "eval", cfg)
    assert scores.ctc.cer == 0.0


@pytest.mark.slow
def test_rdrop_generalization_direction(tmp_path, record_property):
    """Report mean test CER with and without the consistency term over five seeds."""
    train = featurized_corpus(tmp_path / "train", n_utts=200, seed=11, noise_std=0.05)
    test = featurized_corpus(tmp_path / "test", n_utts=50, seed=12, noise_std=0.05, prefix="test")

    report = {}
    for alpha in (0.0, 0.3):
        cers = []
        for seed in range(5):
            cfg = desk_config(f"alpha{alpha}_seed{seed}", tmp_path / "exp", epochs=8, alpha=alpha, seed=seed,
                              batch_bins=1000)
            result = cmd_train(cfg, train)
            cers.append(cmd_eval(result.checkpoints[-1], test, tmp_path / "eval" / cfg.experiment, cfg).ctc.cer)
        report[f"alpha={alpha}"] = {"test_cer": cers, "mean": mean(cers)}

    (tmp_path / "rdrop_report.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    record_property("rdrop_report", json.dumps(report))
    if report["alpha=0.3"]["mean"] > report["alpha=0.0"]["mean"]:
        warnings.warn(f"consistency term did not lower mean test CER: {report}")
