"""Seeded synthetic form pages with gold annotations, scan degradation and an oracle OCR.

Pages imitate a two-area checkbox form: a findings block and a suspected
diagnoses block, each laid out in columns of box + printed label, under a
header that prints the sticker barcode payloads as digits.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np
from scipy import ndimage

from markbox.barcode import with_check_digit
from markbox.core import CategoryDictionary, MarkboxError, SetKind, load_dictionary
from markbox.font import GLYPH_H, text_mask
from markbox.matching import OcrResult
from markbox.raster import BoundingBox, CheckState, RasterPage

MARK_STYLES = ("x", "check", "fill", "faint")
FAINT_GRAY = 150
MAX_PRODUCTS = 4


class LayoutOverflow(MarkboxError):
    pass


def rng_for(seed: int, *keys: object) -> np.random.Generator:
    """Independent generator for ``seed`` and a tuple of keys (stable across runs and platforms)."""
    entropy = [seed & 0xFFFFFFFF, seed >> 32 & 0xFFFFFFFF]
    entropy += [zlib.crc32(repr(k).encode("utf-8")) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass(frozen=True)
class FormSpec:
    dictionary: CategoryDictionary
    year: int
    seed: int = 0
    document_id: str = "page_0000"
    width: int = 1240
    height: int = 1480
    dpi: int = 300
    box_side: int = 42
    row_pitch: int = 60
    margin: int = 60
    column_width: int = 580
    findings_columns: int = 2
    diagnoses_columns: int = 2
    findings_rows: int = 12
    diagnoses_rows: int = 7
    findings_top: int = 230
    diagnoses_top: int = 1020
    mark_weights: tuple[tuple[str, float], ...] = (("x", 0.4), ("check", 0.3), ("fill", 0.3), ("faint", 0.0))
    findings_mean: float = 3.9
    diagnoses_mean: float = 1.0
    products_mean: float = 1.26
    country_code: str = "276"
    findings_count: int | None = None
    diagnoses_count: int | None = None

    def __post_init__(self) -> None:
        if self.findings_mean <= 0 or self.diagnoses_mean <= 0 or self.products_mean < 1:
            raise ValueError("checked-count means must be > 0 and products_mean >= 1")
        if any(style not in MARK_STYLES or w < 0 for style, w in self.mark_weights):
            raise ValueError(f"mark styles must be among {MARK_STYLES} with weights >= 0")
        if sum(w for _, w in self.mark_weights) <= 0:
            raise ValueError("mark weights must not all be zero")

    @property
    def outline(self) -> int:
        return max(2, self.box_side // 14)

    @property
    def glyph_scale(self) -> int:
        return max(1, round(self.box_side / 2 / GLYPH_H))

    @property
    def label_gap(self) -> int:
        return max(6, self.box_side // 3)

    def section_area(self, set_kind: SetKind) -> tuple[int, int]:
        """Vertical extent (top, bottom) of a block including its heading."""
        if set_kind is SetKind.FINDINGS:
            top, rows = self.findings_top, self.findings_rows
        else:
            top, rows = self.diagnoses_top, self.diagnoses_rows
        heading = top - 2 * self.glyph_scale * GLYPH_H
        return heading, top + (rows - 1) * self.row_pitch + self.box_side

    def layout_map(self) -> tuple[tuple[float, float, float, float], tuple[float, float, float, float]]:
        """Fractional (findings, diagnoses) rectangles, split halfway between the blocks."""
        f_top, f_bottom = self.section_area(SetKind.FINDINGS)
        d_top, d_bottom = self.section_area(SetKind.DIAGNOSES)
        split = (f_bottom + d_top) / 2
        h = self.height
        return (
            (0.0, round(f_top / 2 / h, 4), 1.0, round(split / h, 4)),
            (0.0, round(split / h, 4), 1.0, 1.0),
        )


@dataclass(frozen=True)
class GoldCheckbox:
    box: BoundingBox
    set_kind: SetKind
    index: int
    label: str
    state: CheckState
    glyph_box: BoundingBox
    mark_style: str | None = None

    @property
    def checked(self) -> bool:
        return self.state is CheckState.CHECKED


@dataclass(frozen=True)
class GoldAnnotation:
    document_id: str
    year: int
    width: int
    height: int
    dpi: int
    checkboxes: tuple[GoldCheckbox, ...]
    products: tuple[str, ...] = ()
    patient: str | None = None

    def checked(self, set_kind: SetKind) -> set[str]:
        return {cb.label for cb in self.checkboxes if cb.set_kind is set_kind and cb.checked}

    def mark_boxes(self) -> list[BoundingBox]:
        """Interiors of the checked boxes, where marks are drawn."""
        out = []
        for cb in self.checkboxes:
            if cb.checked:
                t = max(2, cb.box.w // 14)
                out.append(BoundingBox(cb.box.x + t, cb.box.y + t, cb.box.w - 2 * t, cb.box.h - 2 * t))
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "document_id": self.document_id,
            "year": self.year,
            "width": self.width,
            "height": self.height,
            "dpi": self.dpi,
            "checked": {kind.value: sorted(self.checked(kind)) for kind in SetKind},
            "barcodes": {"product": list(self.products), "patient": self.patient},
            "checkboxes": [
                {
                    "box": cb.box.as_list(),
                    "set_kind": cb.set_kind.value,
                    "index": cb.index,
                    "label": cb.label,
                    "state": cb.state.value,
                    "mark_style": cb.mark_style,
                    "glyph_box": cb.glyph_box.as_list(),
                }
                for cb in self.checkboxes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> GoldAnnotation:
        boxes = tuple(
            GoldCheckbox(
                BoundingBox(*c["box"]),
                SetKind(c["set_kind"]),
                c["index"],
                c["label"],
                CheckState(c["state"]),
                BoundingBox(*c["glyph_box"]),
                c.get("mark_style"),
            )
            for c in d["checkboxes"]
        )
        barcodes = d.get("barcodes", {})
        return cls(
            d["document_id"], d["year"], d["width"], d["height"], d["dpi"], boxes,
            tuple(barcodes.get("product", ())), barcodes.get("patient"),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=1, sort_keys=True) + "\n"


def load_gold(path: str | os.PathLike[str]) -> GoldAnnotation:
    return GoldAnnotation.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# --- rendering ----------------------------------------------------------------


def _draw_text(canvas: np.ndarray, text: str, x: int, y: int, scale: int, value: int = 0) -> BoundingBox:
    mask = text_mask(text, scale)
    h, w = mask.shape
    region = canvas[y : y + h, x : x + w]
    region[mask[: region.shape[0], : region.shape[1]]] = value
    return BoundingBox(x, y, max(1, w), h)


def _draw_line(canvas: np.ndarray, p0: tuple[float, float], p1: tuple[float, float], thickness: int, value: int) -> None:
    (x0, y0), (x1, y1) = p0, p1
    n = int(max(abs(x1 - x0), abs(y1 - y0))) * 2 + 1
    xs = np.rint(np.linspace(x0, x1, n)).astype(int)
    ys = np.rint(np.linspace(y0, y1, n)).astype(int)
    lo = thickness // 2
    for dy in range(thickness):
        for dx in range(thickness):
            canvas[ys - lo + dy, xs - lo + dx] = value


def _draw_mark(canvas: np.ndarray, box: BoundingBox, style: str, outline: int) -> None:
    if style == "fill":
        t = outline
        canvas[box.y + t : box.bottom - t, box.x + t : box.right - t] = 0
        return
    inset = outline + 3
    x0, y0 = box.x + inset, box.y + inset
    x1, y1 = box.right - 1 - inset, box.bottom - 1 - inset
    thick = max(2, box.w // 14)
    if style == "x":
        _draw_line(canvas, (x0, y0), (x1, y1), thick, 0)
        _draw_line(canvas, (x0, y1), (x1, y0), thick, 0)
    elif style == "check":
        xm, ym = x0 + (x1 - x0) / 3, y1
        _draw_line(canvas, (x0, y0 + (y1 - y0) / 2), (xm, ym), thick, 0)
        _draw_line(canvas, (xm, ym), (x1, y0), thick, 0)
    elif style == "faint":
        # short hairline cross, grey rather than black
        cx, cy = (box.x + box.right - 1) / 2, (box.y + box.bottom - 1) / 2
        r = 0.35 * min(box.w, box.h) - 4
        _draw_line(canvas, (cx - r, cy - r), (cx + r, cy + r), 1, FAINT_GRAY)
        _draw_line(canvas, (cx - r, cy + r), (cx + r, cy - r), 1, FAINT_GRAY)
    else:
        raise ValueError(f"unknown mark style {style!r}")


def _truncated_poisson(rng: np.random.Generator, mean: float, upper: int) -> int:
    while True:
        k = int(rng.poisson(mean))
        if k <= upper:
            return k


def _cells(spec: FormSpec, set_kind: SetKind, n: int) -> list[tuple[int, int]]:
    if set_kind is SetKind.FINDINGS:
        columns, rows, top = spec.findings_columns, spec.findings_rows, spec.findings_top
    else:
        columns, rows, top = spec.diagnoses_columns, spec.diagnoses_rows, spec.diagnoses_top
    if n > columns * rows:
        raise LayoutOverflow(f"{n} {set_kind.value} labels do not fit {columns}x{rows} cells")
    return [(spec.margin + (i // rows) * spec.column_width, top + (i % rows) * spec.row_pitch) for i in range(n)]


def _check_geometry(spec: FormSpec) -> None:
    _, f_bottom = spec.section_area(SetKind.FINDINGS)
    d_top, d_bottom = spec.section_area(SetKind.DIAGNOSES)
    if f_bottom >= d_top:
        raise LayoutOverflow("findings block overlaps the diagnoses block")
    if d_bottom > spec.height - spec.margin // 2:
        raise LayoutOverflow("diagnoses block runs past the bottom of the page")
    widest = max(spec.findings_columns, spec.diagnoses_columns)
    if spec.margin + (widest - 1) * spec.column_width + spec.box_side > spec.width:
        raise LayoutOverflow("columns run past the right edge of the page")


def _sample_payload(rng: np.random.Generator, country: str) -> str:
    digits = "".join(str(d) for d in rng.integers(0, 10, size=12))
    return with_check_digit(country + digits)


def generate_form(spec: FormSpec) -> tuple[RasterPage, GoldAnnotation]:
    _check_geometry(spec)
    rng = rng_for(spec.seed, "form")
    canvas = np.full((spec.height, spec.width), 255, dtype=np.uint8)

    small = max(1, spec.glyph_scale - 1)
    _draw_text(canvas, "TRANSFUSIONSREAKTION", spec.margin, 30, spec.glyph_scale)

    n_products = min(MAX_PRODUCTS, 1 + _truncated_poisson(rng, spec.products_mean - 1, MAX_PRODUCTS - 1))
    products = tuple(_sample_payload(rng, spec.country_code) for _ in range(n_products))
    patient = _sample_payload(rng, spec.country_code)
    y = 30 + (GLYPH_H + 3) * spec.glyph_scale
    for text in [f"PRODUKT: {p}" for p in products] + [f"PATIENT: {patient}"]:
        _draw_text(canvas, text, spec.margin, y, small)
        y += (GLYPH_H + 3) * small

    mark_styles = [s for s, _ in spec.mark_weights]
    weights = np.array([w for _, w in spec.mark_weights], dtype=float)
    weights /= weights.sum()

    checkboxes = []
    t = spec.outline
    s = spec.box_side
    for kind, heading in ((SetKind.FINDINGS, "BEFUNDE"), (SetKind.DIAGNOSES, "VERDACHTSDIAGNOSE")):
        labels = spec.dictionary.labels(kind)
        cells = _cells(spec, kind, len(labels))
        head_top, _ = spec.section_area(kind)
        _draw_text(canvas, heading, spec.margin, head_top, spec.glyph_scale)

        forced = spec.findings_count if kind is SetKind.FINDINGS else spec.diagnoses_count
        mean = spec.findings_mean if kind is SetKind.FINDINGS else spec.diagnoses_mean
        k = forced if forced is not None else _truncated_poisson(rng, mean, len(labels))
        k = min(k, len(labels))
        chosen = set(rng.choice(len(labels), size=k, replace=False).tolist()) if k else set()
        styles = rng.choice(len(mark_styles), size=len(labels), p=weights)

        for index, (label, (bx, by)) in enumerate(zip(labels, cells)):
            box = BoundingBox(bx, by, s, s)
            canvas[by : by + s, bx : bx + s] = 0
            canvas[by + t : by + s - t, bx + t : bx + s - t] = 255
            ly = by + (s - GLYPH_H * spec.glyph_scale) // 2
            glyph_box = _draw_text(canvas, label, box.right + spec.label_gap, ly, spec.glyph_scale)
            style = None
            if index in chosen:
                style = mark_styles[int(styles[index])]
                _draw_mark(canvas, box, style, t)
            state = CheckState.CHECKED if index in chosen else CheckState.UNCHECKED
            checkboxes.append(GoldCheckbox(box, kind, index, label, state, glyph_box, style))

    page = RasterPage(canvas, spec.dpi)
    gold = GoldAnnotation(
        spec.document_id, spec.year, spec.width, spec.height, spec.dpi, tuple(checkboxes), products, patient
    )
    return page, gold


def page_spec(base: FormSpec, seed: int, index: int) -> FormSpec:
    """Spec for page ``index`` of a corpus; the page seed hashes (seed, index)."""
    page_seed = int(rng_for(seed, "page", index).integers(0, 2**63 - 1))
    return replace(base, seed=page_seed, document_id=f"page_{index:04d}")


def generate_corpus(base: FormSpec, seed: int, pages: int) -> Iterator[tuple[RasterPage, GoldAnnotation]]:
    for i in range(pages):
        yield generate_form(page_spec(base, seed, i))


def default_form_spec(year: int = 2024, dictionary_path: str | None = None, **overrides: Any) -> FormSpec:
    return FormSpec(load_dictionary(dictionary_path, year), year, **overrides)


# --- degradation ----------------------------------------------------------------


@dataclass(frozen=True)
class DegradationSpec:
    noise_sigma: float = 0.0
    salt_pepper: float = 0.0
    rotation_deg: float = 0.0
    blur_px: int = 0
    smudge_count: int = 0
    smudge_radius: int = 0
    mark_fade: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.noise_sigma < 0 or self.blur_px < 0 or self.smudge_count < 0 or self.smudge_radius < 0:
            raise ValueError("degradation magnitudes must be >= 0")
        if not 0 <= self.salt_pepper <= 1 or not 0 <= self.mark_fade <= 1:
            raise ValueError("salt_pepper and mark_fade must be in [0, 1]")


def degrade(page: RasterPage, d: DegradationSpec, mark_boxes: Sequence[BoundingBox] = ()) -> RasterPage:
    """Apply fade, rotation, blur, noise, salt-and-pepper and smudges, in that order."""
    px = page.pixels.copy()
    h, w = px.shape

    if d.mark_fade > 0:
        for b in mark_boxes:
            region = px[b.y : b.bottom, b.x : b.right].astype(np.float64)
            region += d.mark_fade * (255 - region)
            px[b.y : b.bottom, b.x : b.right] = np.rint(region).astype(np.uint8)

    if d.rotation_deg:
        rotated = ndimage.rotate(px.astype(np.float64), d.rotation_deg, reshape=False, order=1, mode="constant", cval=255.0)
        px = np.clip(np.rint(rotated), 0, 255).astype(np.uint8)

    if d.blur_px > 1:
        px = np.rint(ndimage.uniform_filter(px.astype(np.float64), size=d.blur_px, mode="nearest")).astype(np.uint8)

    if d.noise_sigma > 0:
        noise = rng_for(d.seed, "noise").normal(0.0, d.noise_sigma, size=px.shape)
        px = np.clip(np.rint(px + noise), 0, 255).astype(np.uint8)

    if d.salt_pepper > 0:
        rng = rng_for(d.seed, "salt-pepper")
        hit = rng.random(px.shape) < d.salt_pepper
        salt = rng.random(px.shape) < 0.5
        px[hit & salt] = 255
        px[hit & ~salt] = 0

    if d.smudge_count and d.smudge_radius:
        rng = rng_for(d.seed, "smudge")
        yy, xx = np.mgrid[0:h, 0:w]
        out = px.astype(np.float64)
        for _ in range(d.smudge_count):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            r = d.smudge_radius
            y0, y1 = max(0, int(cy - r)), min(h, int(cy + r) + 1)
            x0, x1 = max(0, int(cx - r)), min(w, int(cx + r) + 1)
            dist2 = ((yy[y0:y1, x0:x1] - cy) ** 2 + (xx[y0:y1, x0:x1] - cx) ** 2) / (r * r)
            darken = np.where(dist2 < 1, 0.45 * (1 - dist2), 0.0)
            out[y0:y1, x0:x1] *= 1 - darken
        px = np.clip(np.rint(out), 0, 255).astype(np.uint8)

    return RasterPage(px, page.dpi, page.origin)


# --- oracle OCR -----------------------------------------------------------------

_SUBSTITUTES = "abcdefghijklmnopqrstuvwxyz"


def corrupt_text(text: str, error_rate: float, rng: np.random.Generator) -> str:
    """Substitute each character with probability rate/2 and delete it with probability rate/2."""
    out = []
    for ch in text:
        u = rng.random()
        if u < error_rate / 2:
            choices = [c for c in _SUBSTITUTES if c != ch.lower()]
            out.append(choices[int(rng.integers(len(choices)))])
        elif u < error_rate:
            continue
        else:
            out.append(ch)
    return "".join(out)


@dataclass
class OracleOcr:
    """Reads the gold label under a strip, with a controlled character error rate."""

    gold: GoldAnnotation
    error_rate: float = 0.0
    seed: int = 0
    min_overlap: float = 0.5
    calls: int = field(default=0, compare=False)

    def recognize(self, strip: RasterPage) -> OcrResult:
        self.calls += 1
        view = BoundingBox(strip.origin[0], strip.origin[1], strip.width, strip.height)
        best, best_overlap = None, 0.0
        for cb in self.gold.checkboxes:
            overlap = view.intersection_area(cb.glyph_box) / cb.glyph_box.area
            if overlap > best_overlap:
                best, best_overlap = cb, overlap
        if best is None or best_overlap < self.min_overlap:
            return OcrResult("", 0.0)
        rng = rng_for(self.seed, "ocr", self.gold.document_id, *view.as_list())
        return OcrResult(corrupt_text(best.label, self.error_rate, rng), 1.0 - self.error_rate)


def oracle_ocr(gold: GoldAnnotation, error_rate: float, seed: int) -> OracleOcr:
    if not 0 <= error_rate <= 1:
        raise ValueError("error_rate must be in [0, 1]")
    return OracleOcr(gold, error_rate, seed)


def glyph_coverage(strip: BoundingBox, page: RasterPage, glyph_box: BoundingBox) -> float:
    """Fraction of the ink pixels inside ``glyph_box`` that also fall inside ``strip``."""
    ink = page.pixels[glyph_box.y : glyph_box.bottom, glyph_box.x : glyph_box.right] < 128
    total = int(ink.sum())
    if total == 0:
        return 1.0
    ys, xs = np.nonzero(ink)
    xs = xs + glyph_box.x
    ys = ys + glyph_box.y
    inside = (xs >= strip.x) & (xs < strip.right) & (ys >= strip.y) & (ys < strip.bottom)
    return int(inside.sum()) / total

