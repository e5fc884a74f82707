"""Pipeline configuration: a flat key=value file with CLI overrides.

Artifacts embed `config_hash(cfg)` so later stages can refuse inputs
produced under different reproducibility-relevant settings (data identity,
seeds, model dimensions); runtime-only choices like the backend or output
location stay out of the hash.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

DATASETS = ("ml-100k", "beauty")

_DATASET_DEFAULTS: dict[str, dict[str, object]] = {
    "ml-100k": {"token_budget": 2286, "title_cap": 32, "pref_dim": 128},
    "beauty": {"token_budget": 2536, "title_cap": 10, "pref_dim": 512},
}


@dataclass
class PipelineConfig:
    dataset: str = "ml-100k"
    data_dir: str = "data"
    out_dir: str = "out"
    seed: int = 13

    k_candidates: int = 20
    k_paths: int = 20
    max_history: int = 20
    path_max_depth: int = 6
    token_budget: int = 2286
    title_cap: int = 32

    retriever_dim: int = 64
    retriever_max_seq_len: int = 50
    retriever_lr: float = 0.01
    retriever_epochs: int = 3

    pref_dim: int = 128
    pref_lr: float = 0.001
    pref_epochs: int = 1
    pref_batch_size: int = 32
    pref_dropout: float = 0.2
    pref_validate_every: int = 100
    pref_patience: int = 20

    backend: str = "mock-uniform"
    backend_url: str = ""
    backend_model: str = "ranker"
    backend_timeout: float = 30.0
    variant: str = "lkg-rag"
    # Diagnostic switch: also exclude each user's ground-truth target from
    # retrieval, instead of excluding only their training history.
    exclude_target_from_candidates: bool = False

    def out_path(self, name: str) -> Path:
        return Path(self.out_dir) / name


# Fields that define what an artifact *is*; changing any of these makes
# upstream artifacts stale.
HASHED_FIELDS = (
    "dataset", "seed", "k_candidates", "k_paths", "max_history", "path_max_depth",
    "token_budget", "title_cap", "retriever_dim", "retriever_max_seq_len",
    "retriever_lr", "retriever_epochs", "pref_dim", "pref_lr", "pref_epochs",
    "pref_batch_size", "pref_dropout", "pref_validate_every", "pref_patience",
    "exclude_target_from_candidates",
)

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}


class ConfigError(ValueError):
    pass


def _coerce(name: str, raw: str) -> object:
    kind = _FIELD_TYPES[name]
    try:
        if kind in ("int",):
            return int(raw)
        if kind in ("float",):
            return float(raw)
        if kind in ("bool",):
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {exc}") from exc


def parse_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values


def build_config(
    file_values: Optional[Mapping[str, str]] = None,
    overrides: Optional[Mapping[str, str]] = None,
) -> PipelineConfig:
    """Defaults <- dataset defaults <- config file <- CLI overrides."""
    merged: dict[str, str] = {}
    merged.update(file_values or {})
    merged.update(overrides or {})

    unknown = set(merged) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")

    dataset = merged.get("dataset", PipelineConfig.dataset)
    if dataset not in DATASETS:
        raise ConfigError(f"unknown dataset {dataset!r}; expected one of {DATASETS}")

    values: dict[str, object] = dict(_DATASET_DEFAULTS[dataset])
    values["dataset"] = dataset
    for key, raw in merged.items():
        values[key] = _coerce(key, raw)
    return PipelineConfig(**values)  # type: ignore[arg-type]


def load_config(path: str | Path, overrides: Optional[Mapping[str, str]] = None) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return build_config(parse_config_text(path.read_text(encoding="utf-8")), overrides)


def config_hash(cfg: PipelineConfig) -> str:
    canonical = "\n".join(f"{name}={getattr(cfg, name)}" for name in HASHED_FIELDS)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]
