"""
Tests for the schedule, Adam, batching, training steps, checkpoints and evaluation.
"""
import logging
import math

import numpy as np
import pytest

from conformer_r.decoder import Vocabulary
from conformer_r.errors import ConfigMismatchError, DataError, FormatError, NonFiniteGradientError
from conformer_r.logging_utils import get_logger
from conformer_r.metrics import get_metrics
from conformer_r.models import ScheduleConfig
from conformer_r.network import ConformerR
from conformer_r.storage import ExperimentStore, load_checkpoint, read_csv_rows, read_manifest, save_checkpoint
from conformer_r.tensor import RngState, Tensor
from conformer_r.training import (
    LossBreakdown,
    OptState,
    Sample,
    adam_step,
    apply_update,
    decode_sample,
    evaluate,
    load_samples,
    lr_at,
    plain_backward,
    plan_batches,
    rdrop_backward,
    rdrop_train_step,
    restore_run,
    smooth_series,
    train_loop,
)
from tests.conftest import random_features, without_dropout

VOCAB = Vocabulary(["a", "b"])


@pytest.fixture
def samples(rng):
    """Two random-feature utterances with short targets."""
    return [
        Sample("u1", random_features(rng, 30), VOCAB.encode("ab"), "ab"),
        Sample("u2", random_features(rng, 24), VOCAB.encode("b"), "b"),
    ]


def load_corpus(manifest):
    rows = read_manifest(manifest)
    vocab = Vocabulary.from_texts(row.text for row in rows)
    return vocab, load_samples(rows, vocab, base_dir=manifest.parent)


def scalar_param(value: float, grad: float) -> Tensor:
    param = Tensor(np.array([value]), requires_grad=True)
    param.grad = np.array([grad])
    return param


class TestSchedule:
    """Tests for the warmup learning-rate schedule."""

    def test_full_scale_peak(self):
        """Test the peak rate for d_m 512 and 12000 warmup steps."""
        cfg = ScheduleConfig(k=1.0, d_m=512, warmup_steps=12000)
        assert lr_at(12000, cfg) == pytest.approx(4.034e-4, rel=1e-3)
        assert lr_at(12000, cfg) == pytest.approx(512 ** -0.5 * 12000 ** -0.5)

    def test_branches_meet_at_warmup(self):
        """Test that both expressions agree at the warmup step."""
        cfg = ScheduleConfig(d_m=64, warmup_steps=100)
        assert 100 ** -0.5 == pytest.approx(100 * 100 ** -1.5)
        assert lr_at(100, cfg) == pytest.approx(64 ** -0.5 * 0.1)

    def test_decay_ratio(self):
        """Test lr(2w) / lr(w) = 2^-0.5."""
        cfg = ScheduleConfig(d_m=64, warmup_steps=50)
        assert lr_at(100, cfg) / lr_at(50, cfg) == pytest.approx(2 ** -0.5)

    def test_unimodal(self):
        """Test that the peak sits at the warmup step."""
        cfg = ScheduleConfig(d_m=64, warmup_steps=40)
        rates = [lr_at(s, cfg) for s in range(1, 200)]
        assert int(np.argmax(rates)) + 1 == 40
        assert all(a < b for a, b in zip(rates[:39], rates[1:40]))
        assert all(a > b for a, b in zip(rates[39:], rates[40:]))

    @pytest.mark.parametrize("fraction", [None, 0.5, 1, 2, 10])
    def test_closed_form(self, fraction):
        """Test step 1 and multiples of warmup against the piecewise warmup/decay formula."""
        k, d_m, warmup = 2.5, 256, 400
        step = 1 if fraction is None else int(fraction * warmup)
        if step <= warmup:
            expected = k / math.sqrt(d_m) * step / warmup ** 1.5
        else:
            expected = k / math.sqrt(d_m) / math.sqrt(step)
        assert lr_at(step, ScheduleConfig(k=k, d_m=d_m, warmup_steps=warmup)) == pytest.approx(expected, rel=1e-12)

    def test_step_zero(self):
        """Test that steps start at one."""
        with pytest.raises(ValueError):
            lr_at(0, ScheduleConfig())


class TestAdam:
    """Tests for the optimizer update."""

    def test_zero_gradient_keeps_parameters(self):
        """Test that zero gradients leave parameters unchanged."""
        param = scalar_param(1.5, 0.0)
        opt = OptState(m={"w": np.zeros(1)}, v={"w": np.zeros(1)})
        adam_step([("w", param)], opt, 0.01)
        np.testing.assert_array_equal(param.data, [1.5])
        assert opt.step == 1

    def test_first_step(self):
        """Test theta' = -lr / (1 + eps) from theta = 0, g = 1."""
        param = scalar_param(0.0, 1.0)
        opt = OptState(m={"w": np.zeros(1)}, v={"w": np.zeros(1)})
        adam_step([("w", param)], opt, 0.01)
        assert param.data[0] == pytest.approx(-0.01 / (1.0 + 1e-9), rel=1e-12)

    def test_non_finite_aborts_untouched(self):
        """Test that a NaN gradient raises before any parameter moves."""
        good, bad = scalar_param(1.0, 1.0), scalar_param(2.0, float("nan"))
        opt = OptState(m={"a": np.zeros(1), "b": np.zeros(1)}, v={"a": np.zeros(1), "b": np.zeros(1)})
        with pytest.raises(NonFiniteGradientError) as exc:
            adam_step([("a", good), ("b", bad)], opt, 0.01)
        assert exc.value.parameter == "b"
        np.testing.assert_array_equal(good.data, [1.0])
        assert opt.step == 0
        assert not opt.m["a"].any()

    def test_apply_update_counts_nonfinite(self, tiny_config):
        """Test that an aborted update is counted and gradients are cleared."""
        model = ConformerR(tiny_config, VOCAB.size)
        opt = OptState.fresh(model)
        model.ctc_head.bias.grad[0] = np.inf
        assert apply_update(model, opt, tiny_config.schedule) is None
        assert "nonfinite_steps_total 1" in get_metrics().export()
        assert not model.ctc_head.bias.grad.any()
        assert opt.step == 0

    def test_identical_runs_identical_parameters(self, tiny_config, samples):
        """Test bit-identical parameters from identical seeds."""
        results = []
        for _ in range(2):
            model = ConformerR(tiny_config, VOCAB.size)
            opt = OptState.fresh(model)
            rdrop_train_step(samples, model, tiny_config.loss, opt, RngState(4), tiny_config.schedule)
            results.append([p.data.copy() for p in model.parameters()])
        for a, b in zip(*results):
            np.testing.assert_array_equal(a, b)


class TestPlanBatches:
    """Tests for frame-budget batching."""

    def test_single_utterance(self):
        """Test one utterance gives one batch."""
        assert plan_batches([("u", 10)], 100, 0).batches == [["u"]]

    def test_greedy_fill(self):
        """Test frames [60, 60, 60] with 120 bins gives sizes [2, 1]."""
        plan = plan_batches([("a", 60), ("b", 60), ("c", 60)], 120, shuffle_seed=3)
        assert [len(b) for b in plan.batches] == [2, 1]
        assert sorted(u for b in plan.batches for u in b) == ["a", "b", "c"]

    def test_budget_respected(self, rng):
        """Test every batch stays within batch_bins and all utterances appear once."""
        manifest = [(f"u{i}", int(rng.integers(10, 90))) for i in range(40)]
        frames = dict(manifest)
        plan = plan_batches(manifest, 200, shuffle_seed=1)
        assert all(sum(frames[u] for u in batch) <= 200 for batch in plan.batches)
        assert sorted(u for b in plan.batches for u in b) == sorted(frames)

    def test_seeded_shuffle(self, rng):
        """Test that the order depends only on seed and epoch."""
        manifest = [(f"u{i}", 10) for i in range(20)]
        assert plan_batches(manifest, 30, 5).batches == plan_batches(manifest, 30, 5).batches
        assert plan_batches(manifest, 30, 5, epoch=0).batches != plan_batches(manifest, 30, 5, epoch=1).batches

    def test_oversized_singleton(self):
        """Test that an utterance above the budget forms its own batch."""
        plan = plan_batches([("big", 500), ("small", 10)], 100, 0)
        assert ["big"] in plan.batches
        assert plan.oversized == ["big"]
        assert "oversized_batches_total 1" in get_metrics().export()

    def test_update_count(self):
        """Test updates per epoch under accumulation."""
        plan = plan_batches([(f"u{i}", 50) for i in range(5)], 50, 0, accum_steps=2)
        assert plan.num_updates == 3

    def test_empty_manifest(self):
        """Test that nothing to plan is a data error."""
        with pytest.raises(DataError):
            plan_batches([], 100, 0)


class TestTrainingSteps:
    """Tests for R-Drop and plain steps."""

    @pytest.mark.parametrize("form, alpha", [("convex", 0.0), ("additive", 2.0)])
    def test_rdrop_reduces_to_plain_without_dropout(self, tiny_config, samples, form, alpha):
        """Test identical losses and gradients when both copies are the same."""
        cfg = without_dropout(tiny_config, alpha=alpha, kl_form=form)
        rdrop_model, plain_model = ConformerR(cfg, VOCAB.size), ConformerR(cfg, VOCAB.size)
        rdrop = rdrop_backward(samples, rdrop_model, cfg.loss, RngState(1))
        plain = plain_backward(samples, plain_model, cfg.loss, RngState(1))
        assert rdrop.loss_kl == 0.0
        assert rdrop.loss_ctc == plain.loss_ctc
        assert rdrop.loss_aed == plain.loss_aed
        assert rdrop.loss == plain.loss
        for (name, a), (_, b) in zip(rdrop_model.named_parameters(), plain_model.named_parameters()):
            np.testing.assert_array_equal(a.grad, b.grad, err_msg=name)

    def test_beta_zero_is_ctc(self, tiny_config, samples):
        """Test that beta = 0 makes the total equal the CTC term."""
        cfg = tiny_config.model_copy(update={"loss": tiny_config.loss.model_copy(update={"beta": 0.0})})
        out = rdrop_backward(samples, ConformerR(cfg, VOCAB.size), cfg.loss, RngState(2))
        assert out.loss == out.loss_ctc

    def test_breakdown_identity(self, tiny_config, samples):
        """Test L = (1 - beta) L_CTC + beta L_AED and a positive KL under dropout."""
        out = rdrop_backward(samples, ConformerR(tiny_config, VOCAB.size), tiny_config.loss, RngState(2))
        beta = tiny_config.loss.beta
        assert out.loss == pytest.approx((1 - beta) * out.loss_ctc + beta * out.loss_aed, abs=1e-12)
        assert out.loss_kl > 0.0
        assert out.utterances == 2
        assert out.frames == 2 * (30 + 24)

    def test_accumulation_matches_combined_batch(self, tiny_config, samples):
        """Test two accumulated micro-batches against one combined batch."""
        combined = ConformerR(tiny_config, VOCAB.size)
        opt_combined = OptState.fresh(combined)
        rdrop_train_step(samples, combined, tiny_config.loss, opt_combined, RngState(3), tiny_config.schedule, 1)

        split = ConformerR(tiny_config, VOCAB.size)
        opt_split = OptState.fresh(split)
        rng = RngState(3)
        first = rdrop_train_step(samples[:1], split, tiny_config.loss, opt_split, rng, tiny_config.schedule, 2)
        assert not first.updated and opt_split.step == 0
        second = rdrop_train_step(samples[1:], split, tiny_config.loss, opt_split, rng, tiny_config.schedule, 2)
        assert second.updated and opt_split.step == 1

        for a, b in zip(combined.parameters(), split.parameters()):
            np.testing.assert_allclose(a.data, b.data, rtol=0, atol=1e-10)

    def test_infeasible_samples_skipped(self, tiny_config, rng):
        """Test that too-short and CTC-infeasible utterances are skipped and counted."""
        batch = [
            Sample("short", random_features(rng, 5), [1], "a"),
            Sample("dense", random_features(rng, 12), [1, 1, 1], "aaa"),
        ]
        out = rdrop_backward(batch, ConformerR(tiny_config, VOCAB.size), tiny_config.loss, RngState(0))
        assert out.skipped == 2 and out.utterances == 0
        assert get_metrics().skipped("too_short") == 1
        assert get_metrics().skipped("ctc_infeasible") == 1

    def test_breakdown_merge(self):
        """Test utterance-weighted merging."""
        merged = LossBreakdown(loss=1.0, utterances=1, frames=10).merge(LossBreakdown(loss=4.0, utterances=3, frames=5))
        assert merged.loss == pytest.approx(3.25)
        assert merged.utterances == 4 and merged.frames == 15


class TestTrainLoop:
    """Tests for epochs, checkpoints and resume."""

    def test_zero_epochs(self, tiny_config, synth_corpus, tmp_path):
        """Test that zero epochs writes only the initial checkpoint."""
        vocab, samples = load_corpus(synth_corpus)
        store = ExperimentStore(tmp_path / "run")
        result = train_loop(samples, vocab, tiny_config, store, epochs=0)
        assert [p.name for p in result.checkpoints] == ["epoch000.ckpt"]
        assert read_csv_rows(store.metrics_path) == []
        assert result.opt.step == 0

    def test_metrics_and_checkpoints(self, tiny_config, synth_corpus, tmp_path):
        """Test one CSV row per update and one checkpoint per epoch."""
        vocab, samples = load_corpus(synth_corpus)
        store = ExperimentStore(tmp_path / "run")
        result = train_loop(samples, vocab, tiny_config, store, epochs=2)
        rows = read_csv_rows(store.metrics_path)
        assert [p.name for p in result.checkpoints] == ["epoch000.ckpt", "epoch001.ckpt", "epoch002.ckpt"]
        assert [int(r["step"]) for r in rows] == list(range(1, result.opt.step + 1))
        assert all(math.isfinite(float(r["loss"])) for r in rows)
        assert store.prom_path.exists()
        assert store.latest_checkpoint().name == "epoch002.ckpt"

    def test_deterministic_runs(self, tiny_config, synth_corpus, tmp_path):
        """Test that identical runs give identical metrics and checkpoints."""
        vocab, samples = load_corpus(synth_corpus)
        stores = [ExperimentStore(tmp_path / name) for name in ("a", "b")]
        for store in stores:
            train_loop(samples, vocab, tiny_config, store, epochs=1)
        assert stores[0].metrics_path.read_bytes() == stores[1].metrics_path.read_bytes()
        assert stores[0].checkpoint_path(1).read_bytes() == stores[1].checkpoint_path(1).read_bytes()

    def test_resume_is_bit_exact(self, tiny_config, synth_corpus, tmp_path):
        """Test that resuming after epoch 1 reproduces the uninterrupted run."""
        vocab, samples = load_corpus(synth_corpus)
        straight = ExperimentStore(tmp_path / "straight")
        train_loop(samples, vocab, tiny_config, straight, epochs=2)

        resumed = ExperimentStore(tmp_path / "resumed")
        train_loop(samples, vocab, tiny_config, resumed, epochs=1)
        result = train_loop(samples, vocab, tiny_config, resumed, epochs=2, resume=resumed.checkpoint_path(1))

        assert [p.name for p in result.checkpoints] == ["epoch002.ckpt"]
        assert straight.metrics_path.read_bytes() == resumed.metrics_path.read_bytes()
        assert straight.checkpoint_path(2).read_bytes() == resumed.checkpoint_path(2).read_bytes()

    def test_config_mismatch(self, tiny_config, synth_corpus, tmp_path):
        """Test that a changed hyperparameter is reported as a diff unless forced."""
        vocab, samples = load_corpus(synth_corpus)
        store = ExperimentStore(tmp_path / "run")
        train_loop(samples, vocab, tiny_config, store, epochs=0)
        changed = tiny_config.model_copy(update={"loss": tiny_config.loss.model_copy(update={"alpha": 0.5})})
        with pytest.raises(ConfigMismatchError) as exc:
            restore_run(store.checkpoint_path(0), changed)
        assert any(line.startswith("loss.alpha") for line in exc.value.diff)
        assert restore_run(store.checkpoint_path(0), changed, force=True).epoch == 0

    def test_restore_round_trip(self, tiny_config, synth_corpus, tmp_path):
        """Test that a restored model holds the checkpointed parameters."""
        vocab, samples = load_corpus(synth_corpus)
        store = ExperimentStore(tmp_path / "run")
        result = train_loop(samples, vocab, tiny_config, store, epochs=1)
        restored = restore_run(store.checkpoint_path(1))
        assert restored.opt.step == result.opt.step
        assert restored.vocab.chars == vocab.chars
        for (name, a), (_, b) in zip(result.model.named_parameters(), restored.model.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data, err_msg=name)

    @pytest.mark.parametrize("dropped", ["adam.v.", "adam.m.", ".mean"])
    def test_restore_missing_tensor(self, tiny_config, synth_corpus, tmp_path, dropped):
        """Test that a checkpoint without some tensors is a format error naming one of them."""
        vocab, samples = load_corpus(synth_corpus)
        store = ExperimentStore(tmp_path / "run")
        train_loop(samples, vocab, tiny_config, store, epochs=0)
        header, arrays = load_checkpoint(store.checkpoint_path(0))
        kept = [(e["name"], arrays[e["name"]]) for e in header.pop("tensors") if dropped not in e["name"]]
        assert len(kept) < len(arrays)
        partial = tmp_path / "partial.ckpt"
        save_checkpoint(partial, header, kept)
        with pytest.raises(FormatError, match="missing tensor") as exc:
            restore_run(partial)
        assert dropped in str(exc.value)

    @pytest.mark.parametrize("field, named", [("step", "step"), ("epoch", "epoch"), ("rng", "rng"),
                                              ("vocab", "vocab"), ("config", "config")])
    def test_restore_missing_header_field(self, tiny_config, synth_corpus, tmp_path, field, named):
        """Test that a checkpoint header without a required field is a format error."""
        vocab, samples = load_corpus(synth_corpus)
        store = ExperimentStore(tmp_path / "run")
        train_loop(samples, vocab, tiny_config, store, epochs=0)
        header, arrays = load_checkpoint(store.checkpoint_path(0))
        tensors = [(e["name"], arrays[e["name"]]) for e in header.pop("tensors")]
        del header[field]
        partial = tmp_path / "partial.ckpt"
        save_checkpoint(partial, header, tensors)
        with pytest.raises(FormatError, match=f"missing header field '{named}"):
            restore_run(partial)

    def test_restore_truncated(self, tiny_config, synth_corpus, tmp_path):
        """Test that a checkpoint cut short is a format error."""
        vocab, samples = load_corpus(synth_corpus)
        store = ExperimentStore(tmp_path / "run")
        train_loop(samples, vocab, tiny_config, store, epochs=0)
        raw = store.checkpoint_path(0).read_bytes()
        cut = tmp_path / "cut.ckpt"
        cut.write_bytes(raw[:-12])
        with pytest.raises(FormatError, match="truncated"):
            restore_run(cut)

    def test_epoch_plan_logged(self, tiny_config, synth_corpus, tmp_path, caplog, monkeypatch):
        """Test that every epoch logs its planned update count."""
        vocab, samples = load_corpus(synth_corpus)
        monkeypatch.setattr(get_logger(), "propagate", True)
        with caplog.at_level(logging.INFO, logger="conformer_r"):
            train_loop(samples, vocab, tiny_config, ExperimentStore(tmp_path / "run"), epochs=2)
        frames = [(s.utt_id, s.frames) for s in samples]
        batching = tiny_config.batching
        expected = [(epoch + 1, plan_batches(frames, batching.batch_bins, tiny_config.seed.seed,
                                             batching.accum_steps, epoch).num_updates) for epoch in range(2)]
        planned = [(r.epoch, r.updates) for r in caplog.records if r.getMessage() == "Epoch planned"]
        assert planned == expected


class TestEvaluation:
    """Tests for decoding and scoring a model."""

    def test_repeatable(self, tiny_config, synth_corpus):
        """Test that evaluation gives the same hypotheses and CER twice."""
        vocab, samples = load_corpus(synth_corpus)
        model = ConformerR(tiny_config, vocab.size)
        first, second = evaluate(model, vocab, samples), evaluate(model, vocab, samples)
        assert first.ctc_hyps == second.ctc_hyps and first.aed_hyps == second.aed_hyps
        assert first.ctc.cer == second.ctc.cer
        assert first.ctc.cer + first.ctc.cer_acc == 1.0

    def test_too_short_decodes_empty(self, tiny_config, rng):
        """Test that an unencodable utterance yields empty hypotheses."""
        model = ConformerR(tiny_config, VOCAB.size)
        assert decode_sample(model, VOCAB, Sample("s", random_features(rng, 4), [1], "a")) == ("", "")


class TestSmoothSeries:
    """Tests for display smoothing."""

    def test_values(self):
        """Test the exponential recurrence."""
        assert smooth_series([1.0, 3.0, 3.0], 0.5) == [1.0, 2.0, 2.5]
        assert smooth_series([1.0, 5.0], 0.0) == [1.0, 5.0]
        assert smooth_series([]) == []

    def test_invalid_factor(self):
        """Test that the factor must be in [0, 1)."""
        with pytest.raises(ValueError):
            smooth_series([1.0], 1.0)
