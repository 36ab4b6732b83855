"""YOLO txt import/export so an external trained detector can replace the geometric one.

Format: one ``<class_id> <cx> <cy> <w> <h>`` line per box, coordinates as
fractions of the page size.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from markbox.core import MarkboxError, MissingFile, PipelineConfig
from markbox.raster import (
    BitMap,
    BoundingBox,
    CheckboxDetection,
    CheckState,
    DetectionSource,
    RasterPage,
    binarize,
    classify_fill,
)

TOLERANCE = 1e-6
DEFAULT_CLASS_MAP = {0: CheckState.UNCHECKED, 1: CheckState.CHECKED}


class YoloFormatError(MarkboxError):
    def __init__(self, message: str, line_no: int | None = None) -> None:
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}" if line_no is not None else message)


class FieldCount(YoloFormatError):
    pass


class NonNumeric(YoloFormatError):
    pass


class OutOfRange(YoloFormatError):
    pass


class UnknownClassId(YoloFormatError):
    pass


@dataclass(frozen=True)
class YoloRecord:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def to_box(self, width: int, height: int) -> BoundingBox:
        """Pixel box, rounding half up; always at least 1x1 and inside the page."""
        x0 = _round_half_up(self.cx * width - self.w * width / 2)
        y0 = _round_half_up(self.cy * height - self.h * height / 2)
        x1 = _round_half_up(self.cx * width + self.w * width / 2)
        y1 = _round_half_up(self.cy * height + self.h * height / 2)
        x0, y0 = min(max(x0, 0), width - 1), min(max(y0, 0), height - 1)
        x1, y1 = min(max(x1, x0 + 1), width), min(max(y1, y0 + 1), height)
        return BoundingBox(x0, y0, x1 - x0, y1 - y0)


def _round_half_up(v: float) -> int:
    return math.floor(v + 0.5)


def parse_yolo_line(line: str) -> YoloRecord:
    fields = line.split()
    if len(fields) != 5:
        raise FieldCount(f"expected 5 fields, got {len(fields)}")
    try:
        class_id = int(fields[0])
        cx, cy, w, h = (float(f) for f in fields[1:])
    except ValueError as exc:
        raise NonNumeric(str(exc)) from exc
    if class_id < 0:
        raise OutOfRange(f"negative class id {class_id}")
    for name, v in (("cx", cx), ("cy", cy), ("w", w), ("h", h)):
        if not (0 <= v <= 1) or math.isnan(v):
            raise OutOfRange(f"{name}={v} is outside [0, 1]")
    if cx - w / 2 < -TOLERANCE or cx + w / 2 > 1 + TOLERANCE or cy - h / 2 < -TOLERANCE or cy + h / 2 > 1 + TOLERANCE:
        raise OutOfRange("box extends past the page")
    return YoloRecord(class_id, cx, cy, w, h)


def parse_yolo_text(text: str) -> list[tuple[int, YoloRecord]]:
    """(line number, record) for every non-empty line; errors carry the line number."""
    records = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append((line_no, parse_yolo_line(line)))
        except YoloFormatError as exc:
            raise type(exc)(str(exc), line_no) from exc
    return records


def import_detections(
    path: str | os.PathLike[str],
    page: RasterPage,
    class_map: Mapping[int, CheckState] = DEFAULT_CLASS_MAP,
    cfg: PipelineConfig | None = None,
    bitmap: BitMap | None = None,
) -> list[CheckboxDetection]:
    """Load detections; state comes from ``class_map``, fill ratio is recomputed for diagnostics."""
    p = Path(path)
    if not p.is_file():
        raise MissingFile(f"detections file not found: {p}")
    cfg = cfg or PipelineConfig()
    if bitmap is None:
        bitmap = binarize(page, cfg.binarize_window, cfg.binarize_offset)
    out = []
    for line_no, rec in parse_yolo_text(p.read_text(encoding="utf-8")):
        if rec.class_id not in class_map:
            raise UnknownClassId(f"class id {rec.class_id} not in class map {sorted(class_map)}", line_no)
        box = rec.to_box(page.width, page.height)
        fill = classify_fill(bitmap, box, cfg)
        out.append(CheckboxDetection(box, class_map[rec.class_id], fill.fill_ratio, 1.0, DetectionSource.IMPORTED, fill.degenerate))
    return out


def class_map_from_config(cfg: PipelineConfig) -> dict[int, CheckState]:
    return {k: CheckState(v) for k, v in cfg.class_map.items()}


def export_detections(
    dets: Sequence[CheckboxDetection],
    width: int,
    height: int,
    class_ids: Mapping[CheckState, int] | None = None,
) -> str:
    if class_ids is None:
        class_ids = {state: cid for cid, state in DEFAULT_CLASS_MAP.items()}
    lines = []
    for d in dets:
        b = d.box
        if not b.inside(width, height):
            raise ValueError(f"{b} is not inside a {width}x{height} page")
        cx, cy = (b.x + b.w / 2) / width, (b.y + b.h / 2) / height
        lines.append(f"{class_ids[d.state]} {cx:.6f} {cy:.6f} {b.w / width:.6f} {b.h / height:.6f}")
    return "".join(line + "\n" for line in lines)
