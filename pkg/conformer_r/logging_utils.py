"""
Structured JSON logging utilities.
"""
import json
import logging
import sys
from datetime import datetime, timezone
from typing import Any, Dict, Optional

from conformer_r.config import get_settings

LOGGER_NAME = "conformer_r"

# Context fields copied from a record into the JSON line, in output order.
CONTEXT_FIELDS = (
    "command",
    "epoch",
    "step",
    "utt_id",
    "lr",
    "loss",
    "loss_ctc",
    "loss_aed",
    "loss_kl",
    "loss_merge",
    "frames",
    "skipped",
    "updates",
    "path",
    "result",
    "latency_ms",
)


class JSONFormatter(logging.Formatter):
    """One JSON object per record: ts, level, message, then any run context fields."""

    def format(self, record: logging.LogRecord) -> str:
        log_entry: Dict[str, Any] = {
            "ts": datetime.now(timezone.utc).isoformat().replace("+00:00", "Z"),
            "level": record.levelname,
            "message": record.getMessage(),
        }

        for name in CONTEXT_FIELDS:
            if hasattr(record, name):
                log_entry[name] = getattr(record, name)

        if record.exc_info:
            log_entry["exception"] = self.formatException(record.exc_info)

        return json.dumps(log_entry, default=str)


def setup_logging() -> logging.Logger:
    """Install a single JSON stderr handler on the kit logger."""
    settings = get_settings()

    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(getattr(logging, settings.log_level, logging.INFO))
    logger.handlers = []

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JSONFormatter())
    logger.addHandler(handler)
    logger.propagate = False

    return logger


def get_logger() -> logging.Logger:
    """Get the kit logger."""
    return logging.getLogger(LOGGER_NAME)


class StepLogContext:
    """Context holder for one optimizer update."""

    def __init__(
        self,
        epoch: int,
        step: int,
        lr: Optional[float] = None,
        loss: Optional[float] = None,
        loss_ctc: Optional[float] = None,
        loss_aed: Optional[float] = None,
        loss_kl: Optional[float] = None,
        loss_merge: Optional[float] = None,
        frames: Optional[int] = None,
        skipped: Optional[int] = None,
        latency_ms: Optional[float] = None,
    ):
        self.epoch = epoch
        self.step = step
        self.lr = lr
        self.loss = loss
        self.loss_ctc = loss_ctc
        self.loss_aed = loss_aed
        self.loss_kl = loss_kl
        self.loss_merge = loss_merge
        self.frames = frames
        self.skipped = skipped
        self.latency_ms = latency_ms

    def to_dict(self) -> Dict[str, Any]:
        """Convert context to dictionary for logging, dropping unset fields."""
        return {key: value for key, value in vars(self).items() if value is not None}


def log_step(
    logger: logging.Logger,
    ctx: StepLogContext,
    level: int = logging.INFO,
    message: str = "Update applied",
) -> None:
    """Log an optimizer update with structured context."""
    logger.log(level, message, extra=ctx.to_dict())
