"""
On-disk formats: FBK1 features, manifests, transcript maps, CSV reports and checkpoints.
"""
import csv
import json
import os
import struct
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from conformer_r.errors import DataError, FormatError
from conformer_r.frontend import FeatureMatrix
from conformer_r.models import ManifestRow

PathLike = Union[str, Path]

FBK_MAGIC = b"FBK1"
METRICS_HEADER = ["step", "lr", "loss", "loss_ctc", "loss_aed", "loss_kl", "loss_merge"]
SCORE_HEADER = ["utt_id", "N", "S", "D", "I", "H", "cer", "cer_acc"]


def _ensure_parent(path: PathLike) -> Path:
    path = Path(path)
    if path.parent and not path.parent.exists():
        os.makedirs(path.parent, exist_ok=True)
    return path


def format_float(value: float) -> str:
    """Shortest repr that round-trips the float exactly."""
    return repr(float(value))


# -- features -----------------------------------------------------------------


def write_features(path: PathLike, features: FeatureMatrix) -> None:
    """FBK1: magic, u32 frames, u32 dims, f32 data, u16-prefixed UTF-8 utt_id (all little-endian)."""
    utt = features.utt_id.encode("utf-8")
    if len(utt) > 0xFFFF:
        raise FormatError(f"utt_id of {len(utt)} bytes does not fit the u16 length prefix")
    payload = b"".join([
        FBK_MAGIC,
        struct.pack("<II", features.frames, features.dims),
        features.data.astype("<f4").tobytes(),
        struct.pack("<H", len(utt)),
        utt,
    ])
    _ensure_parent(path).write_bytes(payload)


def read_features(path: PathLike) -> FeatureMatrix:
    raw = Path(path).read_bytes()
    if raw[:4] != FBK_MAGIC:
        raise FormatError(f"{path}: magic must be {FBK_MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    frames, dims = struct.unpack_from("<II", raw, 4)
    body_end = 12 + 4 * frames * dims
    if len(raw) < body_end + 2:
        raise FormatError(f"{path}: expected {frames}x{dims} f32 values, file is truncated")
    data = np.frombuffer(raw, dtype="<f4", count=frames * dims, offset=12).reshape(frames, dims)
    (length,) = struct.unpack_from("<H", raw, body_end)
    utt = raw[body_end + 2:body_end + 2 + length]
    if len(utt) != length:
        raise FormatError(f"{path}: utt_id truncated")
    return FeatureMatrix(data.astype(np.float64), utt_id=utt.decode("utf-8"))


# -- manifests and transcripts ------------------------------------------------


def read_manifest(path: PathLike) -> List[ManifestRow]:
    """Line-delimited JSON manifest; utt_ids must be unique."""
    rows: List[ManifestRow] = []
    seen = set()
    with open(path, encoding="utf-8") as fid:
        for lineno, line in enumerate(fid, start=1):
            if not line.strip():
                continue
            try:
                row = ManifestRow.model_validate_json(line)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: invalid manifest row: {exc}") from exc
            if row.utt_id in seen:
                raise DataError(f"{path}:{lineno}: duplicate utt_id '{row.utt_id}'")
            seen.add(row.utt_id)
            rows.append(row)
    return rows


def write_manifest(path: PathLike, rows: Iterable[ManifestRow]) -> None:
    with open(_ensure_parent(path), "w", encoding="utf-8", newline="\n") as fid:
        for row in rows:
            fid.write(row.model_dump_json(exclude_none=True) + "\n")


def read_transcripts(path: PathLike) -> Dict[str, str]:
    """`utt_id text` per line; the text may be empty."""
    mapping: Dict[str, str] = {}
    with open(path, encoding="utf-8") as fid:
        for lineno, line in enumerate(fid, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split(" ", 1)
            if parts[0] in mapping:
                raise DataError(f"{path}:{lineno}: duplicate utt_id '{parts[0]}'")
            mapping[parts[0]] = parts[1] if len(parts) > 1 else ""
    return mapping


def write_transcripts(path: PathLike, mapping: Dict[str, str]) -> None:
    with open(_ensure_parent(path), "w", encoding="utf-8", newline="\n") as fid:
        for utt_id in sorted(mapping):
            fid.write(f"{utt_id} {mapping[utt_id]}\n")


# -- CSV ------------------------------------------------------------------------


def write_score_report(path: PathLike, rows: Sequence[Sequence[Any]]) -> None:
    """Rows already ordered, TOTAL last; floats written exactly."""
    with open(_ensure_parent(path), "w", encoding="utf-8", newline="") as fid:
        writer = csv.writer(fid, lineterminator="\n")
        writer.writerow(SCORE_HEADER)
        for row in rows:
            writer.writerow([format_float(v) if isinstance(v, float) else v for v in row])


def read_csv_rows(path: PathLike) -> List[Dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fid:
        return list(csv.DictReader(fid))


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(path: PathLike, header: Dict[str, Any], tensors: Sequence[Tuple[str, np.ndarray]]) -> None:
    """
    Compact JSON manifest line, newline, then little-endian f32 buffers in manifest order.

    The manifest gets a `tensors` list of {name, shape}.
    """
    manifest = dict(header)
    manifest["tensors"] = [{"name": name, "shape": list(np.shape(array))} for name, array in tensors]
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = _ensure_parent(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fid:
        fid.write(head + b"\n")
        for _, array in tensors:
            fid.write(np.asarray(array, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: PathLike) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise FormatError(f"{path}: missing checkpoint manifest line")
    try:
        manifest = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint manifest: {exc}") from exc
    offset = newline + 1
    arrays: Dict[str, np.ndarray] = {}
    for entry in manifest.get("tensors", []):
        try:
            name, shape = entry["name"], tuple(int(n) for n in entry["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed tensor entry {entry!r}") from exc
        count = int(np.prod(shape)) if shape else 1
        if offset + 4 * count > len(raw):
            raise FormatError(f"{path}: buffer for '{name}' is truncated")
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        arrays[name] = data.astype(np.float64).reshape(shape)
        offset += 4 * count
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes after last buffer")
    return manifest, arrays


class ExperimentStore:
    """Artifact layout of one experiment directory."""

    def __init__(self, root: PathLike):
        self.root = Path(root)
        self._ensure_directory()

    def _ensure_directory(self) -> None:
        if not self.root.exists():
            os.makedirs(self.root, exist_ok=True)

    @property
    def config_path(self) -> Path:
        return self.root / "config.json"

    @property
    def metrics_path(self) -> Path:
        return self.root / "metrics.csv"

    @property
    def prom_path(self) -> Path:
        return self.root / "metrics.prom"

    @property
    def vocab_path(self) -> Path:
        return self.root / "vocab.json"

    def checkpoint_path(self, epoch: int) -> Path:
        return self.root / f"epoch{epoch:03d}.ckpt"

    def latest_checkpoint(self) -> Optional[Path]:
        found = sorted(self.root.glob("epoch*.ckpt"))
        return found[-1] if found else None

    def write_text(self, path: Path, text: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fid:
            fid.write(text)

    def start_metrics(self, keep_through_step: Optional[int] = None) -> None:
        """Write a fresh header, or keep only rows with step <= keep_through_step."""
        kept: List[Dict[str, str]] = []
        if keep_through_step is not None and self.metrics_path.exists():
            kept = [r for r in read_csv_rows(self.metrics_path) if int(r["step"]) <= keep_through_step]
        with open(self.metrics_path, "w", encoding="utf-8", newline="") as fid:
            writer = csv.writer(fid, lineterminator="\n")
            writer.writerow(METRICS_HEADER)
            for row in kept:
                writer.writerow([row[name] for name in METRICS_HEADER])

    def append_metrics(self, step: int, values: Dict[str, float]) -> None:
        with open(self.metrics_path, "a", encoding="utf-8", newline="") as fid:
            writer = csv.writer(fid, lineterminator="\n")
            writer.writerow([step] + [format_float(values[name]) for name in METRICS_HEADER[1:]])
