"""
The Conformer-R model: encoder, CTC head and attention decoder sharing one parameter tree.
"""
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from conformer_r.decoder import DecoderParams, decoder_forward
from conformer_r.encoder import EncoderParams, encoder_forward
from conformer_r.models import RunConfig
from conformer_r.nn import Linear, Module
from conformer_r.tensor import RngState, Tensor

# Counter 0 of the run seed drives initialization; training draws start one stride later.
INIT_COUNTER = 0


@dataclass
class BranchPass:
    """One forward pass of one batch copy."""

    ctc_logits: Tensor
    aed_logits: Tensor
    frames: int


class ConformerR(Module):
    def __init__(self, cfg: RunConfig, vocab_size: int):
        init = RngState(cfg.seed.seed, INIT_COUNTER).generator()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.encoder = EncoderParams(init, cfg.encoder)
        self.ctc_head = Linear(init, cfg.encoder.d_model, vocab_size)
        self.decoder = DecoderParams(init, cfg.decoder, vocab_size)

    @property
    def sos_eos_id(self) -> int:
        return self.vocab_size - 1

    def encode(self, features, train: bool, rng: Optional[RngState] = None) -> Tuple[Tensor, int]:
        return encoder_forward(features, self.encoder, train, rng)

    def ctc_logits(self, enc: Tensor) -> Tensor:
        return self.ctc_head(enc)

    def branch(
        self, features, tokens_in: Sequence[int], train: bool, rng: Optional[RngState] = None
    ) -> BranchPass:
        """Encoder, CTC head and teacher-forced decoder for one copy of an utterance."""
        enc, frames = self.encode(features, train, rng)
        return BranchPass(
            ctc_logits=self.ctc_logits(enc),
            aed_logits=decoder_forward(tokens_in, enc, self.decoder, train, rng),
            frames=frames,
        )

    def state_arrays(self) -> Iterator[Tuple[str, np.ndarray]]:
        """Parameters then batch-norm buffers, in a fixed order."""
        for name, param in self.named_parameters():
            yield name, param.data
        yield from self.named_buffers()

    def parameter_names(self) -> List[str]:
        return [name for name, _ in self.named_parameters()]
