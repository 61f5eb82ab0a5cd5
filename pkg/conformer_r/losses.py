"""
Training objectives: CTC, bidirectional KL, R-Drop merges, smoothed AED cross-entropy, hybrid total.

Scalar combinators accept tensors or plain floats so the same code reports
values and builds graphs.
"""
from typing import Sequence, Tuple

import numpy as np

from conformer_r.errors import DimensionError, InfeasibleAlignmentError
from conformer_r.tensor import Scalar, Tensor, as_tensor, exp, log_softmax, make_node

NEG_INF = -np.inf


def ctc_min_frames(target: Sequence[int]) -> int:
    """Frames needed to emit target: one per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _extend(target: Sequence[int], blank_id: int) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank_id, dtype=np.int64)
    ext[1::2] = target
    return ext


def _skip_allowed(ext: np.ndarray, blank_id: int) -> np.ndarray:
    allowed = np.zeros(ext.size, dtype=bool)
    allowed[2:] = (ext[2:] != blank_id) & (ext[2:] != ext[:-2])
    return allowed


def ctc_forward_backward(log_probs: np.ndarray, target: Sequence[int], blank_id: int = 0) -> Tuple[float, np.ndarray]:
    """
    Log-likelihood and per-frame label occupancies from log-space recursions.

    Returns (log P(target | x), occupancy [T x V]) where occupancy[t, k]
    is the posterior probability of emitting symbol k at frame t.
    """
    steps, vocab = log_probs.shape
    ext = _extend(target, blank_id)
    states = ext.size
    skip = _skip_allowed(ext, blank_id)
    emit = log_probs[:, ext]

    alpha = np.full((steps, states), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if states > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, steps):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[skip] = np.logaddexp(acc[skip], prev[np.flatnonzero(skip) - 2])
        alpha[t] = acc + emit[t]

    # beta[t, s]: log probability of the remaining frames after t given state s at t.
    beta = np.full((steps, states), NEG_INF)
    beta[-1, -1] = 0.0
    if states > 1:
        beta[-1, -2] = 0.0
    for t in range(steps - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        sources = np.flatnonzero(skip)
        acc[sources - 2] = np.logaddexp(acc[sources - 2], nxt[sources])
        beta[t] = acc

    loglik = alpha[-1, -1] if states == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    if not np.isfinite(loglik):
        raise InfeasibleAlignmentError(f"target of length {len(target)} has no alignment in {steps} frames")
    occupancy = np.zeros((steps, vocab))
    gamma = np.exp(alpha + beta - loglik)
    for s in range(states):
        occupancy[:, ext[s]] += gamma[:, s]
    return float(loglik), occupancy


def ctc_loss(logits: Tensor, target: Sequence[int], blank_id: int = 0) -> Tensor:
    """-log P(target | logits) over all blank-interleaved alignments; gradient softmax - occupancy."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"ctc_loss expects [frames x vocab] logits, got {logits.shape}")
    target = [int(t) for t in target]
    if blank_id in target:
        raise InfeasibleAlignmentError("target contains the blank id")
    steps = logits.shape[0]
    needed = max(ctc_min_frames(target), 1)
    if steps < needed:
        raise InfeasibleAlignmentError(
            f"target of length {len(target)} needs {needed} frames, only {steps} available"
        )
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loglik, occupancy = ctc_forward_backward(log_probs, target, blank_id)
    grad = np.exp(log_probs) - occupancy
    return make_node(np.array(-loglik), (logits,), lambda g: (g * grad,), "ctc_loss")


def kl_bidirectional(p1_logits: Tensor, p2_logits: Tensor) -> Tensor:
    """0.5 * [KL(P1 || P2) + KL(P2 || P1)] per frame, averaged over frames."""
    p1_logits, p2_logits = as_tensor(p1_logits), as_tensor(p2_logits)
    if p1_logits.shape != p2_logits.shape:
        raise DimensionError(f"branch logits differ in shape: {p1_logits.shape} vs {p2_logits.shape}")
    lp1 = log_softmax(p1_logits, axis=-1)
    lp2 = log_softmax(p2_logits, axis=-1)
    # KL(P1 || P2) + KL(P2 || P1) = sum((P1 - P2) * (log P1 - log P2))
    both = ((exp(lp1) - exp(lp2)) * (lp1 - lp2)).sum()
    frames = p1_logits.shape[0] if p1_logits.ndim > 1 else 1
    return both * (0.5 / frames)


def merge_branch_losses(first: Scalar, second: Scalar) -> Scalar:
    """Mean of the two branch losses."""
    return (first + second) * 0.5


def rdrop_ce(p1_logits: Tensor, p2_logits: Tensor, target: Sequence[int], blank_id: int = 0) -> Tensor:
    """Sum of both branches' CTC negative log-likelihoods."""
    return ctc_loss(p1_logits, target, blank_id) + ctc_loss(p2_logits, target, blank_id)


def rdrop_merge_ctc(merged: Scalar, kl: Scalar, alpha: float) -> Scalar:
    """Convex form: (1 - alpha) * L_merge + alpha * L_KL."""
    return (1.0 - alpha) * merged + alpha * kl


def rdrop_generic(ce: Scalar, kl: Scalar, alpha: float) -> Scalar:
    """Additive form: L_CE + alpha * L_KL."""
    return ce + alpha * kl


def smoothed_targets(target: Sequence[int], vocab: int, smoothing: float) -> np.ndarray:
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    dist = np.full((len(target), vocab), smoothing / (vocab - 1))
    dist[np.arange(len(target)), list(target)] = 1.0 - smoothing
    return dist


def aed_ce_loss(logits: Tensor, target: Sequence[int], smoothing: float) -> Tensor:
    """Label-smoothed cross-entropy per position (target ends with eos), averaged over positions."""
    logits = as_tensor(logits)
    if logits.ndim != 2 or logits.shape[0] != len(target):
        raise DimensionError(f"decoder logits {logits.shape} do not match target length {len(target)}")
    dist = smoothed_targets(target, logits.shape[1], smoothing)
    return (log_softmax(logits, axis=-1) * dist).sum() * (-1.0 / len(target))


def total_loss(ctc: Scalar, aed: Scalar, beta: float) -> Scalar:
    """(1 - beta) * L_CTC + beta * L_AED."""
    return (1.0 - beta) * ctc + beta * aed
