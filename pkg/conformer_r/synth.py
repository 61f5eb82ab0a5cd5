"""
Synthetic tone-sequence corpus: each character is a pure tone at one mel filter's center.
"""
import json
import string
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from conformer_r.frontend import mel_center_frequencies, write_pcm_wav
from conformer_r.models import FrontendConfig, ManifestRow
from conformer_r.storage import write_manifest, write_transcripts
from conformer_r.tensor import RngState

PathLike = Union[str, Path]

# Lowest and highest filter used for tones; filters below ~40 are narrower than an FFT bin pair.
FIRST_TONE_FILTER = 40
LAST_TONE_FILTER = 76

TONE_SECONDS = 0.12
GAP_SECONDS = 0.04
EDGE_SECONDS = 0.05
AMPLITUDE = 0.5

TEXT_COUNTER = 0
NOISE_COUNTER = 1


def synth_alphabet(vocab_size: int) -> List[str]:
    if not 2 <= vocab_size <= len(string.ascii_lowercase):
        raise ValueError(f"vocab_size must be in [2, {len(string.ascii_lowercase)}], got {vocab_size}")
    return list(string.ascii_lowercase[:vocab_size])


def tone_filters(vocab_size: int) -> List[int]:
    """Distinct filter indices spread over the upper band."""
    span = LAST_TONE_FILTER - FIRST_TONE_FILTER
    return [FIRST_TONE_FILTER + int(round(i * span / (vocab_size - 1))) for i in range(vocab_size)]


def tone_table(chars: Sequence[str], cfg: FrontendConfig) -> Dict[str, Dict[str, float]]:
    """char -> {filter, hz}."""
    centers = mel_center_frequencies(cfg)
    return {
        char: {"filter": index, "hz": float(centers[index])}
        for char, index in zip(chars, tone_filters(len(chars)))
    }


def render_text(
    text: str,
    tones: Dict[str, Dict[str, float]],
    cfg: FrontendConfig,
    noise: Optional[np.random.Generator] = None,
    noise_std: float = 0.0,
) -> np.ndarray:
    """Edge silence, tone segments separated by gaps, edge silence; optional Gaussian noise."""
    rate = cfg.sample_rate_hz
    tone_len, gap_len, edge_len = (int(round(rate * s)) for s in (TONE_SECONDS, GAP_SECONDS, EDGE_SECONDS))
    t = np.arange(tone_len) / rate
    parts = [np.zeros(edge_len)]
    for position, char in enumerate(text):
        if position:
            parts.append(np.zeros(gap_len))
        parts.append(AMPLITUDE * np.sin(2.0 * np.pi * tones[char]["hz"] * t))
    parts.append(np.zeros(edge_len))
    signal = np.concatenate(parts)
    if noise_std > 0:
        if noise is None:
            raise ValueError("noise_std > 0 needs a generator")
        signal = signal + noise.normal(0.0, noise_std, size=signal.shape)
    return signal


def synthesize_corpus(
    out_dir: PathLike,
    n_utts: int,
    vocab_size: int,
    min_len: int,
    max_len: int,
    seed: int,
    noise_std: float = 0.0,
    cfg: Optional[FrontendConfig] = None,
    prefix: str = "synth",
) -> List[ManifestRow]:
    """Write wav/, manifest.jsonl, text and tones.json under out_dir; deterministic in seed."""
    if n_utts < 1:
        raise ValueError(f"n_utts must be >= 1, got {n_utts}")
    if not 1 <= min_len <= max_len:
        raise ValueError(f"need 1 <= min_len <= max_len, got {min_len}, {max_len}")
    if noise_std < 0:
        raise ValueError(f"noise_std must be >= 0, got {noise_std}")
    cfg = cfg or FrontendConfig()
    out = Path(out_dir)
    chars = synth_alphabet(vocab_size)
    tones = tone_table(chars, cfg)
    picker = RngState(seed, TEXT_COUNTER).generator()
    noise = RngState(seed, NOISE_COUNTER).generator()

    rows: List[ManifestRow] = []
    for index in range(n_utts):
        length = int(picker.integers(min_len, max_len + 1))
        text = "".join(chars[i] for i in picker.integers(0, vocab_size, size=length))
        utt_id = f"{prefix}{index:05d}"
        relative = Path("wav") / f"{utt_id}.wav"
        write_pcm_wav(out / relative, render_text(text, tones, cfg, noise, noise_std), cfg.sample_rate_hz)
        rows.append(ManifestRow(utt_id=utt_id, path=relative.as_posix(), text=text))

    write_manifest(out / "manifest.jsonl", rows)
    write_transcripts(out / "text", {row.utt_id: row.text for row in rows})
    with open(out / "tones.json", "w", encoding="utf-8", newline="\n") as fid:
        json.dump(tones, fid, indent=2, sort_keys=True)
        fid.write("\n")
    return rows
