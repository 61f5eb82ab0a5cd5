"""
Prometheus-style run metrics.
"""
from collections import defaultdict
from threading import Lock
from typing import Dict, List


class MetricsCollector:
    """Run counters and the step latency histogram, exported in Prometheus text format."""

    def __init__(self):
        self._lock = Lock()
        self._skipped: Dict[str, int] = defaultdict(int)
        self._featurized: Dict[str, int] = defaultdict(int)
        self._masked_rows: int = 0
        self._oversized_batches: int = 0
        self._nonfinite_steps: int = 0
        self._optimizer_steps: int = 0
        # Micro-step latency histogram, cumulative per bucket (ms)
        self._step_ms_buckets = [10, 25, 50, 100, 250, 500, 1000, 2500, 5000, float("inf")]
        self._step_ms_counts: Dict[float, int] = {b: 0 for b in self._step_ms_buckets}
        self._step_ms_sum: float = 0.0
        self._step_ms_total: int = 0

    def inc_skipped_sample(self, reason: str) -> None:
        """Count a training sample dropped from a step."""
        with self._lock:
            self._skipped[reason] += 1

    def inc_featurized(self, result: str) -> None:
        """Count a featurize outcome (ok / failed)."""
        with self._lock:
            self._featurized[result] += 1

    def inc_masked_rows(self, count: int = 1) -> None:
        """Count attention rows whose every key was masked."""
        with self._lock:
            self._masked_rows += count

    def inc_oversized_batch(self) -> None:
        """Count a singleton batch whose utterance exceeds batch_bins."""
        with self._lock:
            self._oversized_batches += 1

    def inc_nonfinite_step(self) -> None:
        """Count an update aborted because of a non-finite gradient."""
        with self._lock:
            self._nonfinite_steps += 1

    def inc_optimizer_step(self) -> None:
        """Count an applied optimizer update."""
        with self._lock:
            self._optimizer_steps += 1

    def observe_latency(self, latency_ms: float) -> None:
        """Record a step latency observation."""
        with self._lock:
            self._step_ms_sum += latency_ms
            self._step_ms_total += 1
            for bucket in self._step_ms_buckets:
                if latency_ms <= bucket:
                    self._step_ms_counts[bucket] += 1

    @property
    def masked_rows(self) -> int:
        with self._lock:
            return self._masked_rows

    def skipped(self, reason: str) -> int:
        """Current skip count for a reason."""
        with self._lock:
            return self._skipped.get(reason, 0)

    def export(self) -> str:
        """Export metrics in Prometheus text format."""
        lines: List[str] = []

        with self._lock:
            lines.append("# HELP samples_skipped_total Training samples skipped by reason")
            lines.append("# TYPE samples_skipped_total counter")
            for reason, count in sorted(self._skipped.items()):
                lines.append(f'samples_skipped_total{{reason="{reason}"}} {count}')

            lines.append("# HELP featurize_files_total Featurized files by result")
            lines.append("# TYPE featurize_files_total counter")
            for result, count in sorted(self._featurized.items()):
                lines.append(f'featurize_files_total{{result="{result}"}} {count}')

            lines.append("# HELP attention_masked_rows_total Attention rows with every key masked")
            lines.append("# TYPE attention_masked_rows_total counter")
            lines.append(f"attention_masked_rows_total {self._masked_rows}")

            lines.append("# HELP oversized_batches_total Singleton batches above batch_bins")
            lines.append("# TYPE oversized_batches_total counter")
            lines.append(f"oversized_batches_total {self._oversized_batches}")

            lines.append("# HELP nonfinite_steps_total Updates aborted on non-finite gradients")
            lines.append("# TYPE nonfinite_steps_total counter")
            lines.append(f"nonfinite_steps_total {self._nonfinite_steps}")

            lines.append("# HELP optimizer_steps_total Applied optimizer updates")
            lines.append("# TYPE optimizer_steps_total counter")
            lines.append(f"optimizer_steps_total {self._optimizer_steps}")

            lines.append("# HELP step_latency_ms Training micro-step latency histogram in milliseconds")
            lines.append("# TYPE step_latency_ms histogram")
            for bucket in self._step_ms_buckets:
                le = "+Inf" if bucket == float("inf") else str(int(bucket))
                lines.append(f'step_latency_ms_bucket{{le="{le}"}} {self._step_ms_counts[bucket]}')

            lines.append(f"step_latency_ms_sum {self._step_ms_sum:.2f}")
            lines.append(f"step_latency_ms_count {self._step_ms_total}")

        return "\n".join(lines) + "\n"


# Process-wide collector shared by every command
_metrics: MetricsCollector | None = None


def get_metrics() -> MetricsCollector:
    """Get or create the global metrics collector."""
    global _metrics
    if _metrics is None:
        _metrics = MetricsCollector()
    return _metrics
