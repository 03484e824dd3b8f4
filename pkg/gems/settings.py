"""
Environment settings for search runs and command-line workflows.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

PROJECT_ROOT = Path(__file__).resolve().parents[1]
CONFIG_DIR = Path(__file__).resolve().parent / "config"


def _bool(value: Optional[str]) -> bool:
    if value is None:
        return False
    return value.lower() in {"1", "true", "yes", "on"}


def _int(value: Optional[str], default: int) -> int:
    if value is None or not value.strip():
        return default
    return int(value)


@dataclass
class Settings:
    """Simple settings container loaded from environment variables."""

    workers: int = field(default_factory=lambda: _int(os.getenv("GEMS_WORKERS"), os.cpu_count() or 1))
    log_level: str = field(default_factory=lambda: os.getenv("GEMS_LOG_LEVEL", "INFO"))
    output_dir: str = field(default_factory=lambda: os.getenv("GEMS_OUTPUT_DIR", "runs"))
    brute_force_node_limit: int = field(
        default_factory=lambda: _int(os.getenv("GEMS_BRUTE_FORCE_NODE_LIMIT"), 500)
    )
    allow_large_inspect: bool = field(default_factory=lambda: _bool(os.getenv("GEMS_ALLOW_LARGE_INSPECT")))
    search_config: Optional[str] = field(default_factory=lambda: os.getenv("GEMS_SEARCH_CONFIG"))
    synth_spec: Optional[str] = field(default_factory=lambda: os.getenv("GEMS_SYNTH_SPEC"))

    def _resolve_project_path(self, value: Optional[str]) -> Optional[Path]:
        """Resolve a potentially relative path against the project root."""
        if not value:
            return None
        candidate = Path(value)
        if candidate.is_absolute():
            return candidate
        return PROJECT_ROOT / candidate

    @property
    def output_path(self) -> Path:
        path = self._resolve_project_path(self.output_dir)
        return path if path is not None else PROJECT_ROOT / "runs"

    @property
    def search_config_path(self) -> Path:
        """Return the search config file, falling back to the shipped default."""
        return self._resolve_project_path(self.search_config) or CONFIG_DIR / "search_default.json"

    @property
    def synth_spec_path(self) -> Path:
        """Return the synthetic-graph spec file, falling back to the shipped default."""
        return self._resolve_project_path(self.synth_spec) or CONFIG_DIR / "synthetic_default.json"

    def get_config_status(self) -> dict:
        """Return the effective settings, used for the run manifest."""
        return {
            "workers": self.workers,
            "log_level": self.log_level,
            "output_dir": str(self.output_path),
            "brute_force_node_limit": self.brute_force_node_limit,
            "allow_large_inspect": self.allow_large_inspect,
            "search_config": str(self.search_config_path),
            "synth_spec": str(self.synth_spec_path),
        }


settings = Settings()
