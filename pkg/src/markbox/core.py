"""Shared domain types, year-versioned category dictionaries and pipeline configuration."""

from __future__ import annotations

import dataclasses
import enum
import json
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

CONFIG_ENV_VAR = "MARKBOX_CONFIG"


class MarkboxError(Exception):
    """Base class for all errors raised by this package."""


class MissingFile(MarkboxError):
    pass


class ParseError(MarkboxError):
    pass


class NoVersionForYear(MarkboxError):
    pass


class ConfigError(MarkboxError):
    pass


class EmptyDictionary(MarkboxError):
    pass


class SetKind(str, enum.Enum):
    FINDINGS = "findings"
    DIAGNOSES = "diagnoses"


@dataclass(frozen=True, order=True)
class CategoryId:
    set_kind: SetKind
    index: int
    label: str

    def __post_init__(self) -> None:
        if self.index < 0:
            raise ValueError(f"negative category index {self.index}")
        if not self.label:
            raise ValueError("category label must be non-empty")


@dataclass(frozen=True)
class CategoryDictionary:
    version_year: int
    findings: tuple[str, ...]
    diagnoses: tuple[str, ...]

    def labels(self, set_kind: SetKind) -> tuple[str, ...]:
        return self.findings if set_kind is SetKind.FINDINGS else self.diagnoses

    def categories(self, set_kind: SetKind) -> list[CategoryId]:
        return [CategoryId(set_kind, i, label) for i, label in enumerate(self.labels(set_kind))]

    def category(self, set_kind: SetKind, label: str) -> CategoryId:
        """Look up a category by its exact label."""
        labels = self.labels(set_kind)
        try:
            return CategoryId(set_kind, labels.index(label), label)
        except ValueError:
            raise KeyError(f"{label!r} is not a {set_kind.value} label of the {self.version_year} dictionary") from None


def default_dictionary_path() -> Path:
    return Path(str(resources.files("markbox") / "data" / "dictionary.json"))


def _read_versions(path: Path) -> list[CategoryDictionary]:
    if not path.is_file():
        raise MissingFile(f"dictionary file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        versions = []
        for entry in doc["versions"]:
            year = entry["year"]
            if not isinstance(year, int):
                raise TypeError(f"year must be an integer, got {year!r}")
            findings = tuple(str(s) for s in entry["findings"])
            diagnoses = tuple(str(s) for s in entry["diagnoses"])
            versions.append(CategoryDictionary(year, findings, diagnoses))
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not versions:
        raise ParseError(f"{path}: no dictionary versions")
    return versions


def load_dictionary(path: str | os.PathLike[str] | None, year: int) -> CategoryDictionary:
    """Return the dictionary version in force for ``year``.

    The selected version is the one with the largest ``year`` not after the
    requested year. ``path=None`` loads the shipped default file.
    """
    versions = _read_versions(Path(path) if path is not None else default_dictionary_path())
    eligible = [v for v in versions if v.version_year <= year]
    if not eligible:
        earliest = min(v.version_year for v in versions)
        raise NoVersionForYear(f"no dictionary version for {year} (earliest is {earliest})")
    return max(eligible, key=lambda v: v.version_year)


def validate_dictionary(dictionary: CategoryDictionary) -> list[str]:
    """List every empty label and duplicate-after-normalization pair; empty means ok."""
    from markbox.matching import normalize_text

    violations = []
    for kind in SetKind:
        labels = dictionary.labels(kind)
        if not labels:
            violations.append(f"{kind.value}: list is empty")
        seen: dict[str, int] = {}
        for i, label in enumerate(labels):
            key = normalize_text(label)
            if not key:
                violations.append(f"{kind.value}[{i}]: empty label")
                continue
            if key in seen:
                j = seen[key]
                violations.append(f"{kind.value}[{j}] {labels[j]!r} duplicates {kind.value}[{i}] {label!r}")
            else:
                seen[key] = i
    return violations


Rect = tuple[float, float, float, float]


@dataclass(frozen=True)
class PipelineConfig:
    # detector
    binarize_window: int = 101
    binarize_offset: int = 10
    size_min_mm: float = 3.0
    size_max_mm: float = 8.0
    aspect_tolerance: float = 0.25
    border_coverage_min: float = 0.6
    fill_threshold: float = 0.08
    detector: str = "geometric"
    class_map: dict[int, str] = field(default_factory=lambda: {0: "unchecked", 1: "checked"})
    # regions; gap and padding are pixels at 300 dpi
    region_gap: int = 50
    region_padding: int = 10
    findings_area: Rect = (0.0, 0.0635, 1.0, 0.6453)
    diagnoses_area: Rect = (0.0, 0.6453, 1.0, 1.0)
    # approach 1; strip geometry in pixels at 300 dpi
    strip_gap: int = 4
    strip_height_factor: float = 1.4
    strip_width: int = 420
    levenshtein_absolute_max: float = 5
    levenshtein_relative_max: float = 0.4
    ocr_command: str | None = None
    ocr_url: str | None = None
    ocr_max_concurrent: int = 1
    # approach 2
    vlm_url: str = "http://localhost:8000/v1/chat/completions"
    vlm_model: str = "mistralai/Pixtral-Large-Instruct-2411"
    vlm_timeout_s: float = 120.0
    vlm_max_retries: int = 3
    vlm_backoff_base_ms: int = 500
    vlm_max_concurrent: int = 2
    vlm_temperature: float = 0.0
    vlm_api_key_env: str = "MARKBOX_VLM_API_KEY"
    vlm_audit_log: str | None = None
    vlm_relative_max: float = 0.25
    # barcodes
    barcode_country_len: int = 3
    barcode_institute_len: int = 3
    barcode_serial_len: int = 9
    barcode_check_scope: str = "payload"
    decoder_command: str | None = None
    # dictionary
    dictionary_path: str | None = None
    year: int = 2024
    workers: int = 0

    def __post_init__(self) -> None:
        problems = []
        if not 0 < self.fill_threshold < 1:
            problems.append("fill_threshold must be in (0, 1)")
        if self.binarize_window < 3 or self.binarize_window % 2 == 0:
            problems.append("binarize_window must be odd and >= 3")
        if not 0 < self.size_min_mm <= self.size_max_mm:
            problems.append("size band must satisfy 0 < size_min_mm <= size_max_mm")
        if not 0 <= self.aspect_tolerance < 1:
            problems.append("aspect_tolerance must be in [0, 1)")
        if not 0 <= self.border_coverage_min <= 1:
            problems.append("border_coverage_min must be in [0, 1]")
        if self.region_gap <= 0:
            problems.append("region_gap must be > 0")
        if self.region_padding < 0:
            problems.append("region_padding must be >= 0")
        if self.strip_gap < 0 or self.strip_width <= 0 or self.strip_height_factor <= 0:
            problems.append("strip geometry must be positive")
        if self.levenshtein_absolute_max < 0 or self.levenshtein_relative_max < 0:
            problems.append("levenshtein thresholds must be >= 0")
        if not 0 <= self.vlm_relative_max <= 1:
            problems.append("vlm_relative_max must be in [0, 1]")
        if self.vlm_timeout_s <= 0:
            problems.append("vlm_timeout_s must be > 0")
        if self.vlm_max_retries < 0:
            problems.append("vlm_max_retries must be >= 0")
        if self.vlm_backoff_base_ms < 0:
            problems.append("vlm_backoff_base_ms must be >= 0")
        if self.vlm_max_concurrent < 1 or self.ocr_max_concurrent < 1:
            problems.append("concurrency limits must be >= 1")
        if self.detector not in ("geometric", "import"):
            problems.append("detector must be 'geometric' or 'import'")
        if self.barcode_check_scope not in ("payload", "serial"):
            problems.append("barcode_check_scope must be 'payload' or 'serial'")
        if any(v not in ("checked", "unchecked") for v in self.class_map.values()):
            problems.append("class_map values must be 'checked' or 'unchecked'")
        if self.workers < 0:
            problems.append("workers must be >= 0")
        for name in ("findings_area", "diagnoses_area"):
            x0, y0, x1, y1 = getattr(self, name)
            if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
                problems.append(f"{name} must be a fractional rectangle inside the page")
        if problems:
            raise ConfigError("; ".join(problems))

    def size_band_px(self, dpi: int) -> tuple[int, int]:
        px_per_mm = dpi / 25.4
        return round(self.size_min_mm * px_per_mm), round(self.size_max_mm * px_per_mm)

    def scaled(self, px: float, dpi: int) -> int:
        """Convert a length given at 300 dpi to ``dpi``."""
        return max(1, math.floor(px * dpi / 300 + 0.5))

    def replace(self, **changes: Any) -> PipelineConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["class_map"] = {str(k): v for k, v in self.class_map.items()}
        return out


def config_from_dict(raw: dict[str, Any]) -> PipelineConfig:
    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
    values = dict(raw)
    if "class_map" in values:
        values["class_map"] = {int(k): str(v) for k, v in values["class_map"].items()}
    for name in ("findings_area", "diagnoses_area"):
        if name in values:
            values[name] = tuple(float(v) for v in values[name])
    try:
        return PipelineConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | os.PathLike[str] | None = None) -> PipelineConfig:
    """Load a JSON config; falls back to ``$MARKBOX_CONFIG``, then to defaults."""
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR)
        if not path:
            return PipelineConfig()
    p = Path(path)
    if not p.is_file():
        raise MissingFile(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise ParseError(f"{p}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ParseError(f"{p}: config must be a JSON object")
    return config_from_dict(raw)
