"""
CTC best-path decoding and character error rate scoring.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from conformer_r.errors import ScoringError
from conformer_r.tensor import Tensor

TOTAL_ROW = "TOTAL"


@dataclass(frozen=True)
class EditCounts:
    """Substitutions, deletions, insertions, hits and reference length."""

    S: int = 0
    D: int = 0
    I: int = 0  # noqa: E741
    H: int = 0
    N: int = 0

    def __post_init__(self):
        if min(self.S, self.D, self.I, self.H, self.N) < 0:
            raise ValueError(f"edit counts must be non-negative: {self}")
        if self.N != self.S + self.D + self.H:
            raise ValueError(f"N must equal S + D + H: {self}")

    @property
    def errors(self) -> int:
        return self.S + self.D + self.I

    def __add__(self, other: "EditCounts") -> "EditCounts":
        return EditCounts(self.S + other.S, self.D + other.D, self.I + other.I, self.H + other.H, self.N + other.N)


def ctc_greedy_decode(logits: Union[Tensor, np.ndarray], blank_id: int = 0) -> List[int]:
    """Per-frame argmax (lowest id on ties), collapse repeats, drop blanks."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    best = np.argmax(data, axis=-1)
    out: List[int] = []
    previous = None
    for symbol in best.tolist():
        if symbol != previous and symbol != blank_id:
            out.append(symbol)
        previous = symbol
    return out


def edit_distance_matrix(ref: Sequence, hyp: Sequence) -> np.ndarray:
    """Unit-cost Levenshtein DP table [len(ref)+1 x len(hyp)+1]."""
    n, m = len(ref), len(hyp)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost[i, j] = min(
                cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
                cost[i, j - 1] + 1,
                cost[i - 1, j] + 1,
            )
    return cost


def levenshtein_counts(ref: Sequence, hyp: Sequence) -> EditCounts:
    """Counts from one minimal alignment; traceback prefers substitution, then insertion, then deletion."""
    cost = edit_distance_matrix(ref, hyp)
    i, j = len(ref), len(hyp)
    s = d = ins = h = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            if ref[i - 1] == hyp[j - 1]:
                h += 1
            else:
                s += 1
            i, j = i - 1, j - 1
        elif j > 0 and cost[i, j] == cost[i, j - 1] + 1:
            ins += 1
            j -= 1
        else:
            d += 1
            i -= 1
    return EditCounts(S=s, D=d, I=ins, H=h, N=len(ref))


def cer(counts: EditCounts, utt_id: str = "") -> float:
    """(S + D + I) / N, unclamped."""
    if counts.N == 0:
        raise ScoringError(f"CER undefined for empty reference{f' ({utt_id})' if utt_id else ''}")
    return counts.errors / counts.N


def cer_acc(counts: EditCounts, utt_id: str = "") -> float:
    """1 - CER, i.e. (H - I) / N; may be negative."""
    return 1.0 - cer(counts, utt_id)


@dataclass
class UtteranceScore:
    utt_id: str
    ref: str
    hyp: str
    counts: EditCounts

    @property
    def cer(self) -> Optional[float]:
        return cer(self.counts, self.utt_id) if self.counts.N else None

    @property
    def cer_acc(self) -> Optional[float]:
        return cer_acc(self.counts, self.utt_id) if self.counts.N else None


@dataclass
class CorpusScore:
    """Pooled counts plus the per-utterance breakdown."""

    total: EditCounts
    utterances: List[UtteranceScore] = field(default_factory=list)

    @property
    def cer(self) -> float:
        return cer(self.total, TOTAL_ROW)

    @property
    def cer_acc(self) -> float:
        return cer_acc(self.total, TOTAL_ROW)

    def report_rows(self) -> List[Tuple]:
        """CSV rows (utt_id, N, S, D, I, H, cer, cer_acc) with the pooled TOTAL row last."""
        rows: List[Tuple] = []
        for utt in self.utterances:
            c = utt.counts
            rows.append((utt.utt_id, c.N, c.S, c.D, c.I, c.H,
                         "" if utt.cer is None else utt.cer, "" if utt.cer_acc is None else utt.cer_acc))
        t = self.total
        rows.append((TOTAL_ROW, t.N, t.S, t.D, t.I, t.H, self.cer, self.cer_acc))
        return rows


def corpus_cer(pairs: Sequence[Tuple[str, str, str]]) -> CorpusScore:
    """Pool (utt_id, ref, hyp) triples; CER is summed errors over summed reference length."""
    total = EditCounts()
    utterances: List[UtteranceScore] = []
    for utt_id, ref, hyp in pairs:
        counts = levenshtein_counts(ref, hyp)
        utterances.append(UtteranceScore(utt_id, ref, hyp, counts))
        total = total + counts
    if total.N == 0:
        raise ScoringError("corpus CER undefined: every reference is empty")
    return CorpusScore(total=total, utterances=utterances)
