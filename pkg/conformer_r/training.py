"""
Optimization: warmup schedule, Adam, frame-budget batching, R-Drop and plain
training steps, the epoch loop with checkpoint/resume, and evaluation.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from conformer_r.decoder import BLANK_ID, Vocabulary, greedy_ar_decode
from conformer_r.encoder import subsampled_length
from conformer_r.errors import ConfigMismatchError, DataError, FormatError, NonFiniteGradientError
from conformer_r.logging_utils import StepLogContext, get_logger, log_step
from conformer_r.losses import (
    aed_ce_loss,
    ctc_loss,
    ctc_min_frames,
    kl_bidirectional,
    merge_branch_losses,
    rdrop_generic,
    rdrop_merge_ctc,
    total_loss,
)
from conformer_r.metrics import get_metrics
from conformer_r.models import LossWeights, ManifestRow, RunConfig, ScheduleConfig, config_diff
from conformer_r.network import ConformerR
from conformer_r.scoring import CorpusScore, corpus_cer, ctc_greedy_decode
from conformer_r.storage import ExperimentStore, load_checkpoint, read_features, save_checkpoint
from conformer_r.tensor import STREAM_STRIDE, RngState, Tensor, no_grad

logger = get_logger()

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.98
ADAM_EPS = 1e-9

# Counter regions of the run seed: training dropout streams and per-epoch shuffles.
TRAIN_COUNTER_BASE = STREAM_STRIDE
SHUFFLE_COUNTER_BASE = 1 << 62

CHECKPOINT_FORMAT = "conformer_r/1"


# -- schedule and optimizer ---------------------------------------------------


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """k * d_m^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise ValueError(f"learning-rate step must be >= 1, got {step}")
    return cfg.k * cfg.d_m ** -0.5 * min(step ** -0.5, step * cfg.warmup_steps ** -1.5)


@dataclass
class OptState:
    """Adam moments per parameter name plus the update counter."""

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    pending_micro: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def fresh(cls, model: ConformerR) -> "OptState":
        named = list(model.named_parameters())
        return cls(
            m={name: np.zeros_like(p.data) for name, p in named},
            v={name: np.zeros_like(p.data) for name, p in named},
        )


def adam_step(named_params: Sequence[Tuple[str, Tensor]], opt: OptState, lr: float) -> None:
    """Bias-corrected Adam over parameters' .grad; aborts untouched on a non-finite gradient."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, param in named_params:
        if param.grad.shape != param.data.shape:
            raise ValueError(f"gradient shape {param.grad.shape} != parameter shape {param.data.shape} for '{name}'")
        if not np.all(np.isfinite(param.grad)):
            raise NonFiniteGradientError(name)
    opt.step += 1
    correction1 = 1.0 - opt.beta1 ** opt.step
    correction2 = 1.0 - opt.beta2 ** opt.step
    for name, param in named_params:
        g = param.grad
        opt.m[name] = opt.beta1 * opt.m[name] + (1.0 - opt.beta1) * g
        opt.v[name] = opt.beta2 * opt.v[name] + (1.0 - opt.beta2) * g * g
        m_hat = opt.m[name] / correction1
        v_hat = opt.v[name] / correction2
        param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + opt.eps)


# -- batching -------------------------------------------------------------------


@dataclass
class BatchPlan:
    batches: List[List[str]]
    batch_bins: int
    accum_steps: int = 1
    oversized: List[str] = field(default_factory=list)

    @property
    def num_updates(self) -> int:
        return math.ceil(len(self.batches) / self.accum_steps)


def plan_batches(
    manifest: Sequence[Tuple[str, int]],
    batch_bins: int,
    shuffle_seed: int,
    accum_steps: int = 1,
    epoch: int = 0,
) -> BatchPlan:
    """Shuffle by seed, then greedily fill batches up to batch_bins total frames."""
    if not manifest:
        raise DataError("cannot plan batches for an empty manifest")
    order = RngState(shuffle_seed, SHUFFLE_COUNTER_BASE + epoch).generator().permutation(len(manifest))
    plan = BatchPlan(batches=[], batch_bins=batch_bins, accum_steps=accum_steps)
    current: List[str] = []
    used = 0
    for index in order.tolist():
        utt_id, frames = manifest[index]
        if frames > batch_bins:
            plan.oversized.append(utt_id)
            get_metrics().inc_oversized_batch()
            logger.warning("Utterance exceeds batch_bins; forming a singleton batch",
                           extra={"utt_id": utt_id, "frames": frames})
            plan.batches.append([utt_id])
            continue
        if current and used + frames > batch_bins:
            plan.batches.append(current)
            current, used = [], 0
        current.append(utt_id)
        used += frames
    if current:
        plan.batches.append(current)
    return plan


# -- training steps ---------------------------------------------------------------


@dataclass
class Sample:
    """Features plus encoded target of one utterance."""

    utt_id: str
    features: np.ndarray
    target: List[int]
    text: str = ""

    @property
    def frames(self) -> int:
        return self.features.shape[0]


@dataclass
class LossBreakdown:
    """Utterance-averaged losses of one micro-batch (or one update once merged)."""

    loss: float = 0.0
    loss_ctc: float = 0.0
    loss_aed: float = 0.0
    loss_kl: float = 0.0
    loss_merge: float = 0.0
    utterances: int = 0
    frames: int = 0
    skipped: int = 0
    updated: bool = False
    lr: Optional[float] = None

    LOSS_FIELDS = ("loss", "loss_ctc", "loss_aed", "loss_kl", "loss_merge")

    def merge(self, other: "LossBreakdown") -> "LossBreakdown":
        """Utterance-weighted combination of two breakdowns."""
        total = self.utterances + other.utterances
        out = LossBreakdown(utterances=total, frames=self.frames + other.frames,
                            skipped=self.skipped + other.skipped,
                            updated=other.updated, lr=other.lr if other.lr is not None else self.lr)
        for name in self.LOSS_FIELDS:
            if total:
                value = (getattr(self, name) * self.utterances + getattr(other, name) * other.utterances) / total
            else:
                value = 0.0
            setattr(out, name, value)
        return out

    def values(self) -> Dict[str, float]:
        data = {name: getattr(self, name) for name in self.LOSS_FIELDS}
        data["lr"] = self.lr if self.lr is not None else 0.0
        return data


def feasible_samples(batch: Sequence[Sample]) -> Tuple[List[Sample], int]:
    """Drop samples whose subsampled length cannot carry their CTC target."""
    kept: List[Sample] = []
    skipped = 0
    for sample in batch:
        reduced = subsampled_length(sample.frames)
        reason = None
        if reduced < 1:
            reason = "too_short"
        elif reduced < ctc_min_frames(sample.target):
            reason = "ctc_infeasible"
        if reason:
            skipped += 1
            get_metrics().inc_skipped_sample(reason)
            logger.warning("Skipping sample", extra={"utt_id": sample.utt_id, "frames": sample.frames,
                                                     "result": reason})
            continue
        kept.append(sample)
    return kept, skipped


def _decoder_io(sample: Sample, sos_eos: int) -> Tuple[List[int], List[int]]:
    return [sos_eos] + sample.target, sample.target + [sos_eos]


def rdrop_backward(
    batch: Sequence[Sample],
    model: ConformerR,
    weights: LossWeights,
    rng: RngState,
    accum_steps: int = 1,
) -> LossBreakdown:
    """
    Two dropout copies per utterance, hybrid R-Drop loss, gradients accumulated.

    Each utterance contributes its loss scaled by 1 / (utterances * accum_steps).
    """
    kept, skipped = feasible_samples(batch)
    out = LossBreakdown(skipped=skipped)
    if not kept:
        return out
    scale = 1.0 / (len(kept) * accum_steps)
    sums = dict.fromkeys(LossBreakdown.LOSS_FIELDS, 0.0)
    for sample in kept:
        tokens_in, tokens_out = _decoder_io(sample, model.sos_eos_id)
        first = model.branch(sample.features, tokens_in, train=True, rng=rng.split())
        second = model.branch(sample.features, tokens_in, train=True, rng=rng.split())
        merged = merge_branch_losses(ctc_loss(first.ctc_logits, sample.target, BLANK_ID),
                                     ctc_loss(second.ctc_logits, sample.target, BLANK_ID))
        kl = kl_bidirectional(first.ctc_logits, second.ctc_logits)
        if weights.kl_form == "convex":
            loss_ctc = rdrop_merge_ctc(merged, kl, weights.alpha)
        else:
            loss_ctc = rdrop_generic(merged, kl, weights.alpha)
        loss_aed = merge_branch_losses(aed_ce_loss(first.aed_logits, tokens_out, weights.smoothing),
                                       aed_ce_loss(second.aed_logits, tokens_out, weights.smoothing))
        loss = total_loss(loss_ctc, loss_aed, weights.beta)
        (loss * scale).backward()
        for name, value in zip(LossBreakdown.LOSS_FIELDS, (loss, loss_ctc, loss_aed, kl, merged)):
            sums[name] += value.item()
        out.frames += 2 * sample.frames
    return _averaged(out, sums, len(kept))


def plain_backward(
    batch: Sequence[Sample],
    model: ConformerR,
    weights: LossWeights,
    rng: RngState,
    accum_steps: int = 1,
) -> LossBreakdown:
    """Single copy per utterance: (1 - beta) * CTC + beta * AED, no consistency term."""
    kept, skipped = feasible_samples(batch)
    out = LossBreakdown(skipped=skipped)
    if not kept:
        return out
    scale = 1.0 / (len(kept) * accum_steps)
    sums = dict.fromkeys(LossBreakdown.LOSS_FIELDS, 0.0)
    for sample in kept:
        tokens_in, tokens_out = _decoder_io(sample, model.sos_eos_id)
        single = model.branch(sample.features, tokens_in, train=True, rng=rng.split())
        loss_ctc = ctc_loss(single.ctc_logits, sample.target, BLANK_ID)
        loss_aed = aed_ce_loss(single.aed_logits, tokens_out, weights.smoothing)
        loss = total_loss(loss_ctc, loss_aed, weights.beta)
        (loss * scale).backward()
        sums["loss"] += loss.item()
        sums["loss_ctc"] += loss_ctc.item()
        sums["loss_aed"] += loss_aed.item()
        sums["loss_merge"] += loss_ctc.item()
        out.frames += sample.frames
    return _averaged(out, sums, len(kept))


def _averaged(out: LossBreakdown, sums: Dict[str, float], count: int) -> LossBreakdown:
    out.utterances = count
    for name, total in sums.items():
        setattr(out, name, total / count)
    return out


def apply_update(model: ConformerR, opt: OptState, schedule: ScheduleConfig) -> Optional[float]:
    """One Adam update at lr_at(step + 1); returns the rate, or None if the step was aborted."""
    lr = lr_at(opt.step + 1, schedule)
    try:
        adam_step(list(model.named_parameters()), opt, lr)
    except NonFiniteGradientError as exc:
        get_metrics().inc_nonfinite_step()
        logger.error("Update aborted on non-finite gradient",
                     extra={"step": opt.step + 1, "result": exc.parameter})
        lr = None
    else:
        get_metrics().inc_optimizer_step()
    model.zero_grad()
    opt.pending_micro = 0
    return lr


def _train_step(backward, batch, model, weights, opt, rng, schedule, accum_steps) -> LossBreakdown:
    started = time.perf_counter()
    breakdown = backward(batch, model, weights, rng, accum_steps)
    opt.pending_micro += 1
    if opt.pending_micro >= accum_steps:
        breakdown.lr = apply_update(model, opt, schedule)
        breakdown.updated = True
    get_metrics().observe_latency((time.perf_counter() - started) * 1000.0)
    return breakdown


def rdrop_train_step(
    batch: Sequence[Sample],
    model: ConformerR,
    weights: LossWeights,
    opt: OptState,
    rng: RngState,
    schedule: ScheduleConfig,
    accum_steps: int = 1,
) -> LossBreakdown:
    """R-Drop micro-batch; applies Adam every accum_steps micro-batches."""
    return _train_step(rdrop_backward, batch, model, weights, opt, rng, schedule, accum_steps)


def plain_train_step(
    batch: Sequence[Sample],
    model: ConformerR,
    weights: LossWeights,
    opt: OptState,
    rng: RngState,
    schedule: ScheduleConfig,
    accum_steps: int = 1,
) -> LossBreakdown:
    """Conformer baseline micro-batch without the consistency term."""
    return _train_step(plain_backward, batch, model, weights, opt, rng, schedule, accum_steps)


# -- corpus and checkpoints -------------------------------------------------------


def load_samples(rows: Sequence[ManifestRow], vocab: Vocabulary, base_dir: Optional[Path] = None) -> List[Sample]:
    """Read FBK1 features for manifest rows and encode their transcripts."""
    unknown = vocab.unknown_counts(row.text for row in rows)
    if unknown:
        raise DataError(f"transcripts contain characters outside the vocabulary: {unknown}")
    samples = []
    for row in rows:
        path = Path(row.path)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        features = read_features(path)
        samples.append(Sample(row.utt_id, features.data, vocab.encode(row.text), row.text))
    return samples


def snap_to_f32(model: ConformerR, opt: OptState) -> None:
    """Round live state to the precision checkpoints store."""
    for param in model.parameters():
        param.data = param.data.astype(np.float32).astype(np.float64)
    for name, value in list(model.named_buffers()):
        model.set_buffer(name, value.astype(np.float32).astype(np.float64))
    for table in (opt.m, opt.v):
        for name in table:
            table[name] = table[name].astype(np.float32).astype(np.float64)


def write_checkpoint(
    path: Path, model: ConformerR, opt: OptState, rng: RngState, vocab: Vocabulary, epoch: int
) -> None:
    snap_to_f32(model, opt)
    cfg = model.cfg
    header = {
        "format": CHECKPOINT_FORMAT,
        "config_hash": cfg.config_hash(),
        "config": cfg.hashed_view(),
        "experiment": cfg.experiment,
        "epoch": epoch,
        "step": opt.step,
        "rng": {"seed": rng.seed, "counter": rng.counter},
        "vocab": vocab.chars,
    }
    tensors = list(model.state_arrays())
    tensors += [(f"adam.m.{name}", opt.m[name]) for name in model.parameter_names()]
    tensors += [(f"adam.v.{name}", opt.v[name]) for name in model.parameter_names()]
    save_checkpoint(path, header, tensors)
    logger.info("Checkpoint written", extra={"epoch": epoch, "step": opt.step, "path": str(path)})


@dataclass
class RestoredRun:
    model: ConformerR
    opt: OptState
    rng: RngState
    vocab: Vocabulary
    epoch: int
    header: Dict


def check_config(header: Dict, cfg: RunConfig, path: Path) -> None:
    if header.get("config_hash") != cfg.config_hash():
        diff = config_diff(header.get("config", {}), cfg.hashed_view())
        raise ConfigMismatchError(f"{path}: checkpoint was written under a different configuration", diff)


def _missing_entry(header: Dict, arrays: Dict[str, np.ndarray], model: ConformerR) -> Optional[str]:
    for key in ("step", "epoch"):
        if key not in header:
            return f"header field '{key}'"
    rng = header.get("rng")
    if not isinstance(rng, dict) or "seed" not in rng or "counter" not in rng:
        return "header field 'rng.seed/rng.counter'"
    for name in model.parameter_names():
        for key in (name, f"adam.m.{name}", f"adam.v.{name}"):
            if key not in arrays:
                return f"tensor '{key}'"
    for name, _ in model.named_buffers():
        if name not in arrays:
            return f"tensor '{name}'"
    return None


def restore_run(path: Path, cfg: Optional[RunConfig] = None, force: bool = False) -> RestoredRun:
    """Rebuild model, optimizer and RNG state from a checkpoint.

    Every header field and tensor is checked before any state is touched; a gap raises FormatError.
    """
    header, arrays = load_checkpoint(path)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    for key in ("config", "vocab"):
        if key not in header:
            raise FormatError(f"{path}: missing header field '{key}'")
    if cfg is None:
        cfg = RunConfig.model_validate({"experiment": header.get("experiment") or "restored", **header["config"]})
    elif not force:
        check_config(header, cfg, path)
    vocab = Vocabulary(header["vocab"])
    model = ConformerR(cfg, vocab.size)
    missing = _missing_entry(header, arrays, model)
    if missing is not None:
        raise FormatError(f"{path}: missing {missing}")
    opt = OptState.fresh(model)
    for name, param in model.named_parameters():
        if arrays[name].shape != param.data.shape:
            raise FormatError(
                f"{path}: tensor '{name}' has shape {arrays[name].shape}, model expects {param.data.shape}")
        param.data = arrays[name].copy()
        param.zero_grad()
        opt.m[name] = arrays[f"adam.m.{name}"].copy()
        opt.v[name] = arrays[f"adam.v.{name}"].copy()
    for name, _ in list(model.named_buffers()):
        model.set_buffer(name, arrays[name])
    opt.step = int(header["step"])
    rng = RngState(int(header["rng"]["seed"]), int(header["rng"]["counter"]))
    return RestoredRun(model, opt, rng, vocab, int(header["epoch"]), header)


# -- loop -------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: ConformerR
    opt: OptState
    checkpoints: List[Path]
    history: List[LossBreakdown]


def train_loop(
    samples: Sequence[Sample],
    vocab: Vocabulary,
    cfg: RunConfig,
    store: ExperimentStore,
    epochs: Optional[int] = None,
    resume: Optional[Path] = None,
) -> TrainResult:
    """Run epochs of planned micro-batches, one checkpoint per epoch, one CSV row per update."""
    if not samples:
        raise DataError("no utterances to train on")
    epochs = cfg.epochs if epochs is None else epochs
    by_id = {s.utt_id: s for s in samples}
    frames = [(s.utt_id, s.frames) for s in samples]
    step_fn = rdrop_train_step if cfg.loss.rdrop else plain_train_step
    accum = cfg.batching.accum_steps
    checkpoints: List[Path] = []

    if resume is not None:
        restored = restore_run(Path(resume), cfg)
        if restored.vocab.chars != vocab.chars:
            raise ConfigMismatchError(f"{resume}: vocabulary differs from the training transcripts",
                                      [f"vocab: {restored.vocab.chars!r} -> {vocab.chars!r}"])
        model, opt, rng, start_epoch = restored.model, restored.opt, restored.rng, restored.epoch
        store.start_metrics(keep_through_step=opt.step)
        logger.info("Resuming", extra={"epoch": start_epoch, "step": opt.step, "path": str(resume)})
    else:
        model = ConformerR(cfg, vocab.size)
        opt = OptState.fresh(model)
        rng = RngState(cfg.seed.seed, TRAIN_COUNTER_BASE)
        start_epoch = 0
        store.start_metrics()
        path = store.checkpoint_path(0)
        write_checkpoint(path, model, opt, rng, vocab, 0)
        checkpoints.append(path)

    history: List[LossBreakdown] = []
    for epoch in range(start_epoch, epochs):
        plan = plan_batches(frames, cfg.batching.batch_bins, cfg.seed.seed, accum, epoch)
        logger.info("Epoch planned", extra={"epoch": epoch + 1, "updates": plan.num_updates})
        window: Optional[LossBreakdown] = None
        for batch_ids in plan.batches:
            batch = [by_id[utt_id] for utt_id in batch_ids]
            breakdown = step_fn(batch, model, cfg.loss, opt, rng, cfg.schedule, accum)
            window = breakdown if window is None else window.merge(breakdown)
            if breakdown.updated:
                _record_update(store, epoch + 1, opt, window, history)
                window = None
        if opt.pending_micro:
            # Flush an incomplete accumulation window at the epoch boundary.
            window.lr = apply_update(model, opt, cfg.schedule)
            _record_update(store, epoch + 1, opt, window, history)
        path = store.checkpoint_path(epoch + 1)
        write_checkpoint(path, model, opt, rng, vocab, epoch + 1)
        checkpoints.append(path)

    store.write_text(store.prom_path, get_metrics().export())
    return TrainResult(model, opt, checkpoints, history)


def _record_update(
    store: ExperimentStore, epoch: int, opt: OptState, window: LossBreakdown, history: List[LossBreakdown]
) -> None:
    ctx = StepLogContext(epoch=epoch, step=opt.step, lr=window.lr, loss=window.loss,
                         loss_ctc=window.loss_ctc, loss_aed=window.loss_aed, loss_kl=window.loss_kl,
                         loss_merge=window.loss_merge, frames=window.frames, skipped=window.skipped)
    if window.lr is None:
        log_step(logger, ctx, logging.WARNING, "Update skipped")
        return
    store.append_metrics(opt.step, window.values())
    history.append(window)
    log_step(logger, ctx)


# -- evaluation -------------------------------------------------------------------


@dataclass
class EvalResult:
    ctc: CorpusScore
    aed: CorpusScore
    ctc_hyps: Dict[str, str]
    aed_hyps: Dict[str, str]


def decode_sample(model: ConformerR, vocab: Vocabulary, sample: Sample) -> Tuple[str, str]:
    """(CTC hypothesis, AED hypothesis); both empty when the input is too short to encode."""
    if subsampled_length(sample.frames) < 1:
        logger.warning("Utterance too short to decode", extra={"utt_id": sample.utt_id, "frames": sample.frames})
        return "", ""
    with no_grad():
        enc, steps = model.encode(sample.features, train=False)
        ctc_ids = ctc_greedy_decode(model.ctc_logits(enc), BLANK_ID)
        aed_ids = greedy_ar_decode(enc, model.decoder, max_len=steps, sos_eos_id=vocab.sos_eos_id)
    return vocab.decode(ctc_ids), vocab.decode(aed_ids)


def evaluate(model: ConformerR, vocab: Vocabulary, samples: Sequence[Sample]) -> EvalResult:
    """Greedy CTC and AED decoding per utterance, pooled CER for each path."""
    ctc_hyps: Dict[str, str] = {}
    aed_hyps: Dict[str, str] = {}
    for sample in samples:
        ctc_hyps[sample.utt_id], aed_hyps[sample.utt_id] = decode_sample(model, vocab, sample)
    refs = [(s.utt_id, s.text) for s in samples]
    return EvalResult(
        ctc=corpus_cer([(u, ref, ctc_hyps[u]) for u, ref in refs]),
        aed=corpus_cer([(u, ref, aed_hyps[u]) for u, ref in refs]),
        ctc_hyps=ctc_hyps,
        aed_hyps=aed_hyps,
    )


def smooth_series(values: Sequence[float], factor: float = 0.5) -> List[float]:
    """Exponential display smoothing: s0 = x0, s_t = f * s_{t-1} + (1 - f) * x_t."""
    if not 0.0 <= factor < 1.0:
        raise ValueError(f"smoothing factor must be in [0, 1), got {factor}")
    out: List[float] = []
    for value in values:
        out.append(value if not out else factor * out[-1] + (1.0 - factor) * value)
    return out
