"""Document orchestration, evaluation against gold annotations and annual aggregation."""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import subprocess
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Iterable, Sequence

from markbox.barcode import BarcodeScheme, decode_with_command, parse_payload
from markbox.core import CategoryDictionary, CategoryId, MarkboxError, PipelineConfig, Rect, SetKind, load_dictionary
from markbox.detection_io import class_map_from_config, import_detections
from markbox.matching import OcrBackend, extract_approach1
from markbox.raster import (
    BoundingBox,
    CheckboxDetection,
    CheckboxRegion,
    RasterPage,
    RegionKind,
    binarize,
    crop,
    detect_checkboxes,
    group_regions,
)
from markbox.synthgen import GoldAnnotation
from markbox.vlm import VlmBackend, VlmError, extract_approach2

logger = logging.getLogger(__name__)


class OverlappingLayoutRects(MarkboxError):
    pass


class IdMismatch(MarkboxError):
    pass


class Approach(str, enum.Enum):
    OCR = "ocr"
    VLM = "vlm"


@lru_cache(maxsize=64)
def dictionary_for(path: str | None, year: int) -> CategoryDictionary:
    return load_dictionary(path, year)


# --- layout -----------------------------------------------------------------------


def _pixel_rect(rect: Rect, width: int, height: int) -> BoundingBox:
    x0, y0, x1, y1 = rect
    px0, py0 = round(x0 * width), round(y0 * height)
    return BoundingBox(px0, py0, max(1, round(x1 * width) - px0), max(1, round(y1 * height) - py0))


def assign_region_kinds(
    regions: Sequence[CheckboxRegion],
    findings_area: Rect,
    diagnoses_area: Rect,
    page_size: tuple[int, int],
) -> tuple[list[CheckboxRegion], list[str]]:
    """Label each region by the layout rectangle holding the majority of its area.

    Regions with no majority rectangle stay unlabeled and are reported.
    """
    width, height = page_size
    f_rect = _pixel_rect(findings_area, width, height)
    d_rect = _pixel_rect(diagnoses_area, width, height)
    if f_rect.intersection_area(d_rect):
        raise OverlappingLayoutRects(f"findings area {findings_area} overlaps diagnoses area {diagnoses_area}")
    out, diagnostics = [], []
    for region in regions:
        area = region.union_box.area
        f_share = region.union_box.intersection_area(f_rect) / area
        d_share = region.union_box.intersection_area(d_rect) / area
        if f_share > 0.5 and f_share >= d_share:
            kind = RegionKind.FINDINGS
        elif d_share > 0.5:
            kind = RegionKind.DIAGNOSES
        else:
            kind = RegionKind.UNLABELED
            diagnostics.append(
                f"region {region.union_box.as_list()} lies outside both layout areas; "
                f"{len(region.members)} boxes excluded"
            )
        out.append(CheckboxRegion(region.members, region.union_box, kind))
    return out, diagnostics


def region_view(region: CheckboxRegion, page: RasterPage, cfg: PipelineConfig) -> BoundingBox:
    """The region's union box widened to the right to take in the printed labels."""
    extra = cfg.scaled(cfg.strip_gap + cfg.strip_width, page.dpi)
    b = region.union_box
    return BoundingBox(b.x, b.y, min(page.width, b.right + extra) - b.x, b.h)


# --- results ------------------------------------------------------------------------


@dataclass(frozen=True)
class Backends:
    ocr: OcrBackend | None = None
    vlm: VlmBackend | None = None


@dataclass
class ExtractionResult:
    document_id: str
    year: int
    approach: Approach
    findings: set[CategoryId] = field(default_factory=set)
    diagnoses: set[CategoryId] = field(default_factory=set)
    barcodes: dict[str, list[dict[str, Any]]] = field(default_factory=lambda: {"product": [], "patient": []})
    diagnostics: list[str] = field(default_factory=list)
    backend_failures: int = 0
    unreadable: bool = False

    def categories(self, set_kind: SetKind) -> set[CategoryId]:
        return self.findings if set_kind is SetKind.FINDINGS else self.diagnoses

    def labels(self, set_kind: SetKind) -> set[str]:
        return {c.label for c in self.categories(set_kind)}

    def to_dict(self) -> dict[str, Any]:
        return {
            "document_id": self.document_id,
            "year": self.year,
            "approach": self.approach.value,
            "findings": [c.label for c in sorted(self.findings, key=lambda c: c.index)],
            "diagnoses": [c.label for c in sorted(self.diagnoses, key=lambda c: c.index)],
            "barcodes": self.barcodes,
            "diagnostics": self.diagnostics,
            "backend_failures": self.backend_failures,
            "unreadable": self.unreadable,
        }

    def dumps(self, indent: int | None = 1) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=indent)

    @classmethod
    def from_dict(cls, d: dict[str, Any], dictionary_path: str | None = None) -> ExtractionResult:
        dictionary = dictionary_for(dictionary_path, d["year"])
        return cls(
            d["document_id"],
            d["year"],
            Approach(d["approach"]),
            {dictionary.category(SetKind.FINDINGS, label) for label in d["findings"]},
            {dictionary.category(SetKind.DIAGNOSES, label) for label in d["diagnoses"]},
            d.get("barcodes", {"product": [], "patient": []}),
            list(d.get("diagnostics", [])),
            d.get("backend_failures", 0),
            d.get("unreadable", False),
        )


def result_from_gold(gold: GoldAnnotation, approach: Approach = Approach.OCR) -> ExtractionResult:
    """A perfect prediction for ``gold``."""
    sets: dict[SetKind, set[CategoryId]] = {kind: set() for kind in SetKind}
    for cb in gold.checkboxes:
        if cb.checked:
            sets[cb.set_kind].add(CategoryId(cb.set_kind, cb.index, cb.label))
    barcodes = {
        "product": [parse_payload(p).to_dict() for p in gold.products],
        "patient": [parse_payload(gold.patient).to_dict()] if gold.patient else [],
    }
    return ExtractionResult(gold.document_id, gold.year, approach, sets[SetKind.FINDINGS], sets[SetKind.DIAGNOSES], barcodes)


def parse_barcode_lines(lines: Iterable[str], cfg: PipelineConfig) -> tuple[dict[str, list[dict[str, Any]]], list[str]]:
    """Parse ``product:``/``patient:`` sidecar lines; bad payloads become diagnostics."""
    scheme = BarcodeScheme(cfg.barcode_country_len, cfg.barcode_institute_len, cfg.barcode_serial_len, cfg.barcode_check_scope)
    out: dict[str, list[dict[str, Any]]] = {"product": [], "patient": []}
    diagnostics = []
    for line in lines:
        line = line.strip()
        if not line:
            continue
        role, sep, payload = line.partition(":")
        role = role.strip().lower()
        if not sep or role not in out:
            diagnostics.append(f"barcode line without product:/patient: role: {line!r}")
            continue
        try:
            out[role].append(parse_payload(payload.strip(), scheme).to_dict())
        except MarkboxError as exc:
            diagnostics.append(f"unparseable {role} barcode {payload.strip()!r}: {exc}")
            out[role].append({"raw": payload.strip(), "check_ok": False, "error": str(exc)})
    return out, diagnostics


def process_document(
    page: RasterPage,
    cfg: PipelineConfig,
    backends: Backends,
    approach: Approach,
    document_id: str,
    year: int | None = None,
    imported_detections: str | None = None,
    barcode_lines: Sequence[str] | None = None,
) -> ExtractionResult:
    """Binarize, detect, group, label regions, extract per region and attach barcodes.

    Stage failures are recorded as diagnostics; only unreadable input raises.
    """
    year = cfg.year if year is None else year
    dictionary = dictionary_for(cfg.dictionary_path, year)
    result = ExtractionResult(document_id, year, approach)

    bm = binarize(page, cfg.binarize_window, cfg.binarize_offset)
    detections: list[CheckboxDetection]
    if imported_detections is not None:
        try:
            detections = import_detections(imported_detections, page, class_map_from_config(cfg), cfg, bm)
        except MarkboxError as exc:
            result.diagnostics.append(f"detection import failed: {exc}")
            detections = []
    else:
        detections = detect_checkboxes(bm, cfg, page.dpi)
    for d in detections:
        if d.degenerate:
            result.diagnostics.append(f"box {d.box.as_list()} has no interior; classified unchecked")

    regions = group_regions(
        detections, cfg.scaled(cfg.region_gap, page.dpi), cfg.scaled(cfg.region_padding, page.dpi), (page.width, page.height)
    )
    if not regions:
        result.diagnostics.append("no regions: no checkboxes detected")
    regions, layout_notes = assign_region_kinds(regions, cfg.findings_area, cfg.diagnoses_area, (page.width, page.height))
    result.diagnostics.extend(layout_notes)
    labeled = [r for r in regions if r.region_kind.set_kind is not None]

    if approach is Approach.OCR:
        _run_ocr(page, labeled, detections, dictionary, cfg, backends, result)
    else:
        _run_vlm(page, labeled, dictionary, cfg, backends, result)

    lines = list(barcode_lines) if barcode_lines is not None else []
    if barcode_lines is None and cfg.decoder_command:
        try:
            decoded = decode_with_command(cfg.decoder_command, page)
        except (OSError, subprocess.SubprocessError) as exc:
            result.diagnostics.append(f"barcode decoder failed: {exc}")
            decoded = None
        if decoded:
            lines.append(f"product:{decoded}")
    result.barcodes, notes = parse_barcode_lines(lines, cfg)
    result.diagnostics.extend(notes)
    return result


def _run_ocr(
    page: RasterPage,
    regions: Sequence[CheckboxRegion],
    detections: Sequence[CheckboxDetection],
    dictionary: CategoryDictionary,
    cfg: PipelineConfig,
    backends: Backends,
    result: ExtractionResult,
) -> None:
    if backends.ocr is None:
        result.diagnostics.append("no OCR backend configured")
        result.backend_failures += 1
        return
    neighbors = [d.box for d in detections]
    for region in regions:
        kind = region.region_kind.set_kind
        assert kind is not None
        out = extract_approach1(page, region.members, dictionary, kind, backends.ocr, cfg, neighbors)
        result.categories(kind).update(out.categories)
        result.diagnostics.extend(m.describe() for m in out.no_matches)
        result.diagnostics.extend(out.flagged)
        result.backend_failures += out.backend_failures


def _run_vlm(
    page: RasterPage,
    regions: Sequence[CheckboxRegion],
    dictionary: CategoryDictionary,
    cfg: PipelineConfig,
    backends: Backends,
    result: ExtractionResult,
) -> None:
    if backends.vlm is None:
        result.diagnostics.append("no VLM backend configured")
        result.backend_failures += 1
        return
    vlm = backends.vlm

    def ask(region: CheckboxRegion) -> Any:
        kind = region.region_kind.set_kind
        assert kind is not None
        try:
            return extract_approach2(crop(page, region_view(region, page, cfg)), kind, dictionary, vlm, cfg)
        except VlmError as exc:
            return exc

    if cfg.vlm_max_concurrent > 1 and len(regions) > 1:
        with ThreadPoolExecutor(max_workers=cfg.vlm_max_concurrent) as pool:
            outputs = list(pool.map(ask, regions))
    else:
        outputs = [ask(r) for r in regions]
    for region, out in zip(regions, outputs):
        if isinstance(out, Exception):
            result.backend_failures += 1
            result.diagnostics.append(f"VLM request for region {region.union_box.as_list()} failed: {out}")
            continue
        kind = region.region_kind.set_kind
        assert kind is not None
        result.categories(kind).update(out.categories)
        result.diagnostics.extend(out.warnings)


# --- evaluation ---------------------------------------------------------------------


@dataclass(frozen=True)
class SetMetrics:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 1.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 1.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
        }


def pooled_accuracy(per_set: Iterable[SetMetrics]) -> float:
    """TP / (TP + FP + FN) pooled over both category sets.

    One reading of an "average accuracy" over extraction decisions; kept in
    this one function so a different definition is a one-line change.
    """
    tp = fp = fn = 0
    for m in per_set:
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
    return tp / (tp + fp + fn) if tp + fp + fn else 1.0


@dataclass(frozen=True)
class EvalReport:
    per_set: dict[SetKind, SetMetrics]
    documents: int

    @property
    def accuracy(self) -> float:
        return pooled_accuracy(self.per_set.values())

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"documents": self.documents}
        out.update({kind.value: m.to_dict() for kind, m in self.per_set.items()})
        out["accuracy"] = self.accuracy
        return out


def evaluate(results: Sequence[ExtractionResult], gold: Sequence[GoldAnnotation]) -> EvalReport:
    """Micro-averaged precision/recall/F1 over every (document, category) decision."""
    by_id = {r.document_id: r for r in results}
    gold_by_id = {g.document_id: g for g in gold}
    if set(by_id) != set(gold_by_id) or len(by_id) != len(results) or len(gold_by_id) != len(gold):
        missing = sorted(set(gold_by_id) - set(by_id))[:5]
        extra = sorted(set(by_id) - set(gold_by_id))[:5]
        raise IdMismatch(f"result and gold document ids differ (missing results: {missing}, unknown results: {extra})")
    counts = {kind: Counter() for kind in SetKind}
    for doc_id, g in gold_by_id.items():
        r = by_id[doc_id]
        for kind in SetKind:
            pred, truth = r.labels(kind), g.checked(kind)
            counts[kind]["tp"] += len(pred & truth)
            counts[kind]["fp"] += len(pred - truth)
            counts[kind]["fn"] += len(truth - pred)
    per_set = {kind: SetMetrics(c["tp"], c["fp"], c["fn"]) for kind, c in counts.items()}
    return EvalReport(per_set, len(gold_by_id))


# --- annual aggregation -------------------------------------------------------------


@dataclass(frozen=True)
class AnnualSummary:
    year: int
    counts: dict[SetKind, dict[str, int]]
    total_reactions: int
    total_blood_products: int


def aggregate_annual(results: Iterable[ExtractionResult]) -> list[AnnualSummary]:
    """Per-year category counts; blood products are distinct product barcodes that validate."""
    by_year: dict[int, list[ExtractionResult]] = {}
    for r in results:
        by_year.setdefault(r.year, []).append(r)
    out = []
    for year in sorted(by_year):
        docs = by_year[year]
        counts: dict[SetKind, dict[str, int]] = {}
        for kind in SetKind:
            c: Counter[str] = Counter()
            for r in docs:
                c.update(r.labels(kind))
            counts[kind] = dict(sorted(c.items()))
        products = {
            p["raw"] for r in docs for p in r.barcodes.get("product", []) if p.get("check_ok")
        }
        out.append(AnnualSummary(year, counts, len(docs), len(products)))
    return out


def annual_csv(summaries: Sequence[AnnualSummary]) -> str:
    """``year,set_kind,label,count`` rows; totals use set_kind ``total``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["year", "set_kind", "label", "count"])
    for s in summaries:
        for kind in SetKind:
            for label, n in s.counts[kind].items():
                writer.writerow([s.year, kind.value, label, n])
        writer.writerow([s.year, "total", "reactions", s.total_reactions])
        writer.writerow([s.year, "total", "blood_products", s.total_blood_products])
    return buf.getvalue()
