"""
Process settings using 12-factor environment variables.
"""
import os
from functools import lru_cache


class Settings:
    """Process-level settings loaded from environment variables."""

    def __init__(self):
        self.log_level: str = os.getenv("LOG_LEVEL", "INFO").upper()
        self.threads: int = _parse_threads(os.getenv("CONFORMER_R_THREADS", "1"))
        self.run_slow: bool = os.getenv("CONFORMER_R_SLOW", "") not in ("", "0", "false")


def _parse_threads(raw: str) -> int:
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()
