"""
Command-line entry point: featurize, synth, train, eval, score and plot.
"""
import argparse
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from pydantic import ValidationError

from conformer_r.config import get_settings
from conformer_r.decoder import Vocabulary
from conformer_r.errors import ConfigMismatchError, ConformerRError, DataError
from conformer_r.frontend import compute_fbank, load_pcm_wav, utterance_cmvn
from conformer_r.logging_utils import get_logger, setup_logging
from conformer_r.metrics import get_metrics
from conformer_r.models import FrontendConfig, ManifestRow, RunConfig
from conformer_r.scoring import corpus_cer
from conformer_r.storage import (
    ExperimentStore,
    read_manifest,
    read_transcripts,
    write_features,
    write_manifest,
    write_score_report,
    write_transcripts,
)
from conformer_r.synth import synthesize_corpus
from conformer_r.training import evaluate, load_samples, restore_run, train_loop

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


# -- configuration ----------------------------------------------------------------


def load_run_config(args: argparse.Namespace, required: bool = True) -> Optional[RunConfig]:
    """Read --config and apply --seed / --out overrides; everything is re-validated."""
    if args.config is None:
        if required:
            raise ValidationError.from_exception_data(
                "RunConfig", [{"type": "missing", "loc": ("--config",), "input": None}])
        return None
    raw = RunConfig.model_validate_json(Path(args.config).read_text(encoding="utf-8")).model_dump()
    if args.seed is not None:
        raw["seed"]["seed"] = args.seed
    if args.out is not None:
        raw["output_dir"] = args.out
    return RunConfig.model_validate(raw)


def _resolve(base: Path, path: str) -> Path:
    candidate = Path(path)
    return candidate if candidate.is_absolute() else base / candidate


def resolve_checkpoint(path: Path) -> Path:
    """A checkpoint file as given, or the newest epoch checkpoint of an experiment directory."""
    if not path.is_dir():
        return path
    latest = ExperimentStore(path).latest_checkpoint()
    if latest is None:
        raise DataError(f"{path}: no epoch checkpoints")
    return latest


# -- commands ---------------------------------------------------------------------


def cmd_featurize(manifest: Path, out_dir: Path, cfg: FrontendConfig) -> List[ManifestRow]:
    """One FBK1 file per utterance plus a feature manifest with frame counts."""
    logger = get_logger()
    rows = read_manifest(manifest)
    if not rows:
        raise DataError(f"{manifest}: no utterances")
    base = manifest.parent

    def featurize(row: ManifestRow) -> Tuple[ManifestRow, Optional[str]]:
        relative = Path("feats") / f"{row.utt_id}.fbk"
        try:
            samples, _ = load_pcm_wav(_resolve(base, row.path), cfg.sample_rate_hz)
            features = compute_fbank(samples, cfg, utt_id=row.utt_id)
            if cfg.cmvn:
                features = utterance_cmvn(features)
            write_features(out_dir / relative, features)
        except (ConformerRError, OSError) as exc:
            return row, str(exc)
        return ManifestRow(utt_id=row.utt_id, path=relative.as_posix(), text=row.text,
                           frames=features.frames), None

    with ThreadPoolExecutor(max_workers=get_settings().threads) as pool:
        results = list(pool.map(featurize, rows))

    done: List[ManifestRow] = []
    failures = 0
    for row, error in results:
        if error is None:
            done.append(row)
            get_metrics().inc_featurized("ok")
        else:
            failures += 1
            get_metrics().inc_featurized("failed")
            logger.error("Featurize failed", extra={"utt_id": row.utt_id, "path": row.path, "result": error})
    write_manifest(out_dir / "manifest.jsonl", done)
    logger.info("Featurized", extra={"command": "featurize", "path": str(out_dir), "result": f"{len(done)} ok"})
    if failures:
        raise DataError(f"{failures} of {len(rows)} files failed to featurize")
    return done


def cmd_synth(
    out_dir: Path, n_utts: int, vocab_size: int, min_len: int, max_len: int, seed: int, noise_std: float = 0.0
) -> List[ManifestRow]:
    return synthesize_corpus(out_dir, n_utts, vocab_size, min_len, max_len, seed, noise_std)


def cmd_train(cfg: RunConfig, manifest: Path, resume: Optional[Path] = None):
    rows = read_manifest(manifest)
    if not rows:
        raise DataError(f"{manifest}: no utterances")
    vocab = Vocabulary.from_texts(row.text for row in rows)
    samples = load_samples(rows, vocab, base_dir=manifest.parent)
    store = ExperimentStore(Path(cfg.output_dir) / cfg.experiment)
    store.write_text(store.config_path, cfg.model_dump_json(indent=2) + "\n")
    store.write_text(store.vocab_path, vocab.to_json() + "\n")
    return train_loop(samples, vocab, cfg, store, resume=resume)


def cmd_eval(
    checkpoint: Path, manifest: Path, out_dir: Path, cfg: Optional[RunConfig] = None, force: bool = False
):
    """Decode with both heads and write hypotheses plus pooled CER reports."""
    restored = restore_run(checkpoint, cfg, force)
    rows = read_manifest(manifest)
    if not rows:
        raise DataError(f"{manifest}: no utterances")
    samples = load_samples(rows, restored.vocab, base_dir=manifest.parent)
    result = evaluate(restored.model, restored.vocab, samples)
    write_transcripts(out_dir / "hyp_ctc.txt", result.ctc_hyps)
    write_transcripts(out_dir / "hyp_aed.txt", result.aed_hyps)
    write_score_report(out_dir / "score_ctc.csv", result.ctc.report_rows())
    write_score_report(out_dir / "score_aed.csv", result.aed.report_rows())
    return result


def cmd_score(ref_file: Path, hyp_file: Path, out_dir: Path):
    """Score hypotheses against references; a missing hypothesis counts as empty."""
    refs = read_transcripts(ref_file)
    hyps = read_transcripts(hyp_file)
    result = corpus_cer([(utt_id, refs[utt_id], hyps.get(utt_id, "")) for utt_id in sorted(refs)])
    write_score_report(out_dir / "score.csv", result.report_rows())
    extra = sorted(set(hyps) - set(refs))
    if extra:
        raise DataError(f"{hyp_file}: {len(extra)} ids missing from the reference: {', '.join(extra)}")
    return result


def cmd_plot(metrics_csv: Path, out_png: Path) -> Path:
    from conformer_r.plotting import plot_losses

    return plot_losses(metrics_csv, out_png)


# -- argument parsing ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Run configuration JSON")
    common.add_argument("--seed", type=int, help="Override the root seed")
    common.add_argument("--out", type=str, help="Output directory")
    common.add_argument("--resume", type=Path, help="Checkpoint or experiment directory to resume from")
    common.add_argument("--force", action="store_true", help="Ignore a checkpoint/config hash mismatch")

    # Global flags live on each verb so subparser defaults cannot overwrite them.
    parser = argparse.ArgumentParser(prog="conformer-r", description="Desk-scale Conformer-R speech recognition kit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("featurize", parents=[common], help="WAV manifest -> FBK1 features")
    p.add_argument("manifest", type=Path)

    p = sub.add_parser("synth", parents=[common], help="Write a synthetic tone corpus")
    p.add_argument("--n-utts", type=int, default=10)
    p.add_argument("--vocab-size", type=int, default=5)
    p.add_argument("--min-len", type=int, default=3)
    p.add_argument("--max-len", type=int, default=6)
    p.add_argument("--noise-std", type=float, default=0.0)

    p = sub.add_parser("train", parents=[common], help="Train on a feature manifest")
    p.add_argument("manifest", type=Path)

    p = sub.add_parser("eval", parents=[common], help="Decode a feature manifest with a checkpoint")
    p.add_argument("checkpoint", type=Path, help="Checkpoint file or experiment directory")
    p.add_argument("manifest", type=Path)

    p = sub.add_parser("score", parents=[common], help="CER of a hypothesis file against a reference file")
    p.add_argument("ref", type=Path)
    p.add_argument("hyp", type=Path)

    p = sub.add_parser("plot", parents=[common], help="Plot raw and smoothed loss curves")
    p.add_argument("metrics", type=Path)
    return parser


def run(args: argparse.Namespace) -> None:
    out = Path(args.out) if args.out else None
    if args.command == "featurize":
        cfg = load_run_config(args, required=False)
        cmd_featurize(args.manifest, out or args.manifest.parent / "fbank", cfg.frontend if cfg else FrontendConfig())
    elif args.command == "synth":
        rows = cmd_synth(out or Path("synth"), args.n_utts, args.vocab_size, args.min_len, args.max_len,
                         args.seed or 0, args.noise_std)
        print(f"{len(rows)} utterances written")
    elif args.command == "train":
        resume = resolve_checkpoint(args.resume) if args.resume else None
        result = cmd_train(load_run_config(args), args.manifest, resume)
        print(result.checkpoints[-1] if result.checkpoints else "no new checkpoint")
    elif args.command == "eval":
        cfg = load_run_config(args, required=False)
        checkpoint = resolve_checkpoint(args.checkpoint)
        result = cmd_eval(checkpoint, args.manifest, out or checkpoint.parent / "eval", cfg, args.force)
        print(f"ctc cer={result.ctc.cer!r} aed cer={result.aed.cer!r}")
    elif args.command == "score":
        result = cmd_score(args.ref, args.hyp, out or Path("."))
        print(f"cer={result.cer!r} cer_acc={result.cer_acc!r}")
    elif args.command == "plot":
        print(cmd_plot(args.metrics, (out or args.metrics.parent) / "losses.png"))


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command; exit 0 on success, 1 on validation errors, 2 on runtime or data errors."""
    logger = setup_logging()
    args = build_parser().parse_args(argv)
    started = time.perf_counter()
    try:
        run(args)
    except (ValidationError, ConfigMismatchError) as exc:
        logger.error(str(exc), extra={"command": args.command, "result": "validation_error"})
        return EXIT_VALIDATION
    except (ConformerRError, OSError) as exc:
        logger.error(str(exc), extra={"command": args.command, "result": "runtime_error"})
        return EXIT_RUNTIME
    except ValueError as exc:
        logger.error(str(exc), extra={"command": args.command, "result": "validation_error"})
        return EXIT_VALIDATION
    logger.info("Command finished", extra={"command": args.command, "result": "ok",
                                           "latency_ms": round((time.perf_counter() - started) * 1000.0, 2)})
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
