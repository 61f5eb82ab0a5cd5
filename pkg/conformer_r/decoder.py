"""
Character vocabulary and the autoregressive Transformer decoder.
"""
import json
from collections import Counter
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from conformer_r.attention import AbsPositionTable, AttentionParams, causal_mask, multi_head_attention
from conformer_r.errors import VocabularyError
from conformer_r.models import DecoderConfig
from conformer_r.nn import LayerNorm, Linear, Module, parameter, xavier
from conformer_r.tensor import RngState, Tensor, dropout, no_grad, relu

BLANK_ID = 0


class Vocabulary:
    """blank = 0, characters 1..V-2, shared sos/eos = V-1."""

    def __init__(self, chars: Sequence[str]):
        chars = list(chars)
        if len(set(chars)) != len(chars):
            raise VocabularyError("vocabulary characters must be unique")
        if not chars:
            raise VocabularyError("vocabulary needs at least one character")
        self.chars = chars
        self.char_to_id: Dict[str, int] = {c: i + 1 for i, c in enumerate(chars)}
        self.id_to_char: Dict[int, str] = {i: c for c, i in self.char_to_id.items()}

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocabulary":
        return cls(sorted(set("".join(texts))))

    @property
    def size(self) -> int:
        return len(self.chars) + 2

    @property
    def blank_id(self) -> int:
        return BLANK_ID

    @property
    def sos_eos_id(self) -> int:
        return self.size - 1

    def unknown_counts(self, texts: Iterable[str]) -> Dict[str, int]:
        counts = Counter(c for text in texts for c in text if c not in self.char_to_id)
        return dict(sorted(counts.items()))

    def encode(self, text: str) -> List[int]:
        ids = []
        for position, char in enumerate(text):
            if char not in self.char_to_id:
                raise VocabularyError(f"character {char!r} at position {position} is not in the vocabulary")
            ids.append(self.char_to_id[char])
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        """Blank and sos/eos render as nothing."""
        return "".join(self.id_to_char.get(int(i), "") for i in ids)

    def to_json(self) -> str:
        return json.dumps({"chars": self.chars}, ensure_ascii=False)

    @classmethod
    def from_json(cls, raw: str) -> "Vocabulary":
        return cls(json.loads(raw)["chars"])


class DecoderLayerParams(Module):
    def __init__(self, rng: np.random.Generator, cfg: DecoderConfig):
        d = cfg.d_model
        self.self_norm = LayerNorm(d)
        self.self_attn = AttentionParams.from_config(rng, cfg.attention())
        self.cross_norm = LayerNorm(d)
        self.cross_attn = AttentionParams.from_config(rng, cfg.attention())
        self.ff_norm = LayerNorm(d)
        self.ff_in = Linear(rng, d, d * cfg.ff_expansion)
        self.ff_out = Linear(rng, d * cfg.ff_expansion, d)


class DecoderParams(Module):
    def __init__(self, rng: np.random.Generator, cfg: DecoderConfig, vocab_size: int):
        if vocab_size < 3:
            raise VocabularyError(f"vocabulary size must be >= 3, got {vocab_size}")
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.embedding = parameter(xavier(rng, vocab_size, cfg.d_model))
        self.positions = AbsPositionTable(cfg.d_model)
        self.layers: List[DecoderLayerParams] = [DecoderLayerParams(rng, cfg) for _ in range(cfg.n_layers)]
        self.final_norm = LayerNorm(cfg.d_model)
        self.out = Linear(rng, cfg.d_model, vocab_size)


def decoder_forward(
    tokens: Sequence[int],
    enc: Tensor,
    params: DecoderParams,
    train: bool,
    rng: Optional[RngState] = None,
) -> Tensor:
    """Teacher-forced logits [L x V] for a token sequence starting with sos."""
    ids = np.asarray(tokens, dtype=np.int64)
    bad = np.flatnonzero((ids < 0) | (ids >= params.vocab_size))
    if bad.size:
        raise VocabularyError(
            f"token id {int(ids[bad[0]])} at position {int(bad[0])} outside [0, {params.vocab_size})"
        )
    length = ids.size
    cfg = params.cfg
    p = cfg.dropout_p
    mask = causal_mask(length)
    x = params.embedding[ids] + params.positions.rows(length)
    x = dropout(x, p, rng, train)
    for layer in params.layers:
        h = layer.self_norm(x)
        attended = multi_head_attention(h, h, layer.self_attn, mask, layer.self_attn.dropout_p, rng, train)
        x = x + dropout(attended, p, rng, train)
        h = layer.cross_norm(x)
        attended = multi_head_attention(h, enc, layer.cross_attn, None, layer.cross_attn.dropout_p, rng, train)
        x = x + dropout(attended, p, rng, train)
        h = relu(layer.ff_in(layer.ff_norm(x)))
        x = x + dropout(layer.ff_out(dropout(h, p, rng, train)), p, rng, train)
    return params.out(params.final_norm(x))


def greedy_ar_decode(enc: Tensor, params: DecoderParams, max_len: int, sos_eos_id: Optional[int] = None) -> List[int]:
    """Append the argmax (lowest id on ties) until sos/eos or max_len tokens."""
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    eos = params.vocab_size - 1 if sos_eos_id is None else sos_eos_id
    tokens = [eos]
    with no_grad():
        for _ in range(max_len):
            logits = decoder_forward(tokens, enc, params, train=False)
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == eos:
                break
            tokens.append(nxt)
    return tokens[1:]
