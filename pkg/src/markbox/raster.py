"""Grayscale pages, adaptive binarization and the geometric checkbox detector.

The detector stands in for a trained object detector: it keeps connected ink
components whose bounding boxes look like printed checkboxes and classifies
each one by the ink coverage of its interior.
"""

from __future__ import annotations

import enum
import io
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from markbox.core import MarkboxError, PipelineConfig, SetKind

__all__ = [
    "BadWindow",
    "BitMap",
    "BoundingBox",
    "CheckState",
    "CheckboxDetection",
    "CheckboxRegion",
    "DetectionSource",
    "FillClassification",
    "OutOfBounds",
    "RasterPage",
    "RegionKind",
    "UnreadablePage",
    "binarize",
    "border_thickness",
    "classify_fill",
    "crop",
    "detect_checkboxes",
    "group_regions",
    "read_page",
    "read_pgm",
    "to_png_bytes",
    "write_pgm",
]


class BadWindow(MarkboxError):
    pass


class OutOfBounds(MarkboxError):
    pass


class UnreadablePage(MarkboxError):
    pass


class CheckState(str, enum.Enum):
    CHECKED = "checked"
    UNCHECKED = "unchecked"


class DetectionSource(str, enum.Enum):
    GEOMETRIC = "geometric"
    IMPORTED = "imported"


class RegionKind(str, enum.Enum):
    FINDINGS = "findings"
    DIAGNOSES = "diagnoses"
    UNLABELED = "unlabeled"

    @property
    def set_kind(self) -> SetKind | None:
        if self is RegionKind.UNLABELED:
            return None
        return SetKind(self.value)


@dataclass(frozen=True, eq=False)
class RasterPage:
    """8-bit grayscale page, 0 = black ink, 255 = white.

    ``origin`` is the page's top-left corner in the coordinates of the page it
    was cropped from, (0, 0) for an original scan.
    """

    pixels: np.ndarray
    dpi: int = 300
    origin: tuple[int, int] = (0, 0)

    def __post_init__(self) -> None:
        if self.pixels.ndim != 2 or self.pixels.dtype != np.uint8:
            raise ValueError("pixels must be a 2-D uint8 array")
        if self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ValueError("page must be at least 1x1")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RasterPage):
            return NotImplemented
        return (
            self.dpi == other.dpi
            and self.origin == other.origin
            and np.array_equal(self.pixels, other.pixels)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class BitMap:
    bits: np.ndarray  # bool, True = ink

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]


@dataclass(frozen=True, order=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int

    @property
    def right(self) -> int:
        return self.x + self.w

    @property
    def bottom(self) -> int:
        return self.y + self.h

    @property
    def area(self) -> int:
        return self.w * self.h

    def inside(self, width: int, height: int) -> bool:
        return self.w >= 1 and self.h >= 1 and self.x >= 0 and self.y >= 0 and self.right <= width and self.bottom <= height

    def contains(self, other: BoundingBox) -> bool:
        return self.x <= other.x and self.y <= other.y and other.right <= self.right and other.bottom <= self.bottom

    def intersection_area(self, other: BoundingBox) -> int:
        iw = min(self.right, other.right) - max(self.x, other.x)
        ih = min(self.bottom, other.bottom) - max(self.y, other.y)
        return iw * ih if iw > 0 and ih > 0 else 0

    def iou(self, other: BoundingBox) -> float:
        inter = self.intersection_area(other)
        union = self.area + other.area - inter
        return inter / union if union else 0.0

    def gap_to(self, other: BoundingBox) -> int:
        """Largest of the horizontal and vertical separations (0 when touching or overlapping)."""
        dx = max(0, other.x - self.right, self.x - other.right)
        dy = max(0, other.y - self.bottom, self.y - other.bottom)
        return max(dx, dy)

    def union(self, other: BoundingBox) -> BoundingBox:
        x, y = min(self.x, other.x), min(self.y, other.y)
        return BoundingBox(x, y, max(self.right, other.right) - x, max(self.bottom, other.bottom) - y)

    def expanded(self, pad: int, width: int, height: int) -> BoundingBox:
        x, y = max(0, self.x - pad), max(0, self.y - pad)
        return BoundingBox(x, y, min(width, self.right + pad) - x, min(height, self.bottom + pad) - y)

    def as_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class CheckboxDetection:
    box: BoundingBox
    state: CheckState
    fill_ratio: float
    confidence: float
    source: DetectionSource = DetectionSource.GEOMETRIC
    degenerate: bool = False


@dataclass(frozen=True)
class CheckboxRegion:
    members: tuple[CheckboxDetection, ...]
    union_box: BoundingBox
    region_kind: RegionKind = RegionKind.UNLABELED


class FillClassification(NamedTuple):
    state: CheckState
    fill_ratio: float
    degenerate: bool = False


def binarize(page: RasterPage, window: int, offset: float) -> BitMap:
    """Local-mean threshold: a pixel is ink iff it is darker than its window mean minus ``offset``.

    The window is clamped at the page edges by replicating border pixels.
    """
    if window < 3 or window % 2 == 0:
        raise BadWindow(f"window must be odd and >= 3, got {window}")
    pad = window // 2
    padded = np.pad(page.pixels, pad, mode="edge").astype(np.int64)
    integral = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1), dtype=np.int64)
    np.cumsum(np.cumsum(padded, axis=0), axis=1, out=integral[1:, 1:])
    w = window
    sums = integral[w:, w:] - integral[:-w, w:] - integral[w:, :-w] + integral[:-w, :-w]
    n = w * w
    # pixel < sum/n - offset, kept in integers where possible
    bits = page.pixels.astype(np.int64) * n < sums - offset * n
    return BitMap(bits)


def border_thickness(box: BoundingBox) -> int:
    return max(2, -(-15 * min(box.w, box.h) // 100))


def classify_fill(bm: BitMap, box: BoundingBox, cfg: PipelineConfig) -> FillClassification:
    if not box.inside(bm.width, bm.height):
        raise OutOfBounds(f"{box} is not inside a {bm.width}x{bm.height} bitmap")
    b = border_thickness(box)
    iw, ih = box.w - 2 * b, box.h - 2 * b
    if iw <= 0 or ih <= 0:
        return FillClassification(CheckState.UNCHECKED, 0.0, True)
    interior = bm.bits[box.y + b : box.y + b + ih, box.x + b : box.x + b + iw]
    ratio = int(interior.sum()) / (iw * ih)
    state = CheckState.CHECKED if ratio >= cfg.fill_threshold else CheckState.UNCHECKED
    return FillClassification(state, ratio)


_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def _border_coverage(component: np.ndarray) -> float:
    h, w = component.shape
    if h == 1 or w == 1:
        return 1.0
    inked = int(component[0].sum() + component[-1].sum() + component[1:-1, 0].sum() + component[1:-1, -1].sum())
    return inked / (2 * w + 2 * h - 4)


def detect_checkboxes(bm: BitMap, cfg: PipelineConfig, dpi: int = 300) -> list[CheckboxDetection]:
    """Find checkbox-shaped connected ink components, sorted top-to-bottom then left-to-right."""
    lo, hi = cfg.size_band_px(dpi)
    a = cfg.aspect_tolerance
    aspect_lo, aspect_hi = 1 - a, 1 / (1 - a)
    labels, _ = ndimage.label(bm.bits, structure=_EIGHT_CONNECTED)
    found = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        ys, xs = sl
        h, w = ys.stop - ys.start, xs.stop - xs.start
        if not (lo <= w <= hi and lo <= h <= hi):
            continue
        if not aspect_lo <= w / h <= aspect_hi:
            continue
        coverage = _border_coverage(labels[sl] == k)
        if coverage < cfg.border_coverage_min:
            continue
        box = BoundingBox(xs.start, ys.start, w, h)
        fill = classify_fill(bm, box, cfg)
        found.append(
            CheckboxDetection(box, fill.state, fill.fill_ratio, coverage, DetectionSource.GEOMETRIC, fill.degenerate)
        )
    found.sort(key=lambda d: (d.box.y, d.box.x))
    return found


def group_regions(
    dets: Sequence[CheckboxDetection],
    gap: int,
    padding: int,
    page_size: tuple[int, int] | None = None,
) -> list[CheckboxRegion]:
    """Single-linkage clustering of detections whose boxes are at most ``gap`` px apart.

    ``page_size`` is (width, height) for clipping the padded union box.
    """
    if gap <= 0:
        raise ValueError("gap must be > 0")
    n = len(dets)
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if dets[i].box.gap_to(dets[j].box) <= gap:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)

    clusters: dict[int, list[CheckboxDetection]] = {}
    for i in range(n):
        clusters.setdefault(find(i), []).append(dets[i])

    width, height = page_size if page_size else (math.inf, math.inf)
    regions = []
    for members in clusters.values():
        union = members[0].box
        for d in members[1:]:
            union = union.union(d.box)
        union = union.expanded(padding, width, height)  # type: ignore[arg-type]
        regions.append(CheckboxRegion(tuple(members), union))
    regions.sort(key=lambda r: (r.union_box.y, r.union_box.x))
    return regions


def crop(page: RasterPage, box: BoundingBox) -> RasterPage:
    if not box.inside(page.width, page.height):
        raise OutOfBounds(f"{box} is not inside a {page.width}x{page.height} page")
    pixels = page.pixels[box.y : box.bottom, box.x : box.right].copy()
    origin = (page.origin[0] + box.x, page.origin[1] + box.y)
    return RasterPage(pixels, page.dpi, origin)


# --- file formats -----------------------------------------------------------


def _pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise UnreadablePage("truncated PGM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def decode_pgm(data: bytes, dpi: int = 300) -> RasterPage:
    tokens, start = _pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise UnreadablePage(f"not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise UnreadablePage(f"bad PGM header: {exc}") from exc
    if maxval != 255:
        raise UnreadablePage(f"only maxval 255 is supported, got {maxval}")
    raster = data[start : start + width * height]
    if len(raster) != width * height:
        raise UnreadablePage("truncated PGM raster")
    return RasterPage(np.frombuffer(raster, dtype=np.uint8).reshape(height, width).copy(), dpi)


def encode_pgm(page: RasterPage) -> bytes:
    return b"P5\n%d %d\n255\n" % (page.width, page.height) + page.pixels.tobytes()


def read_pgm(path: str | os.PathLike[str], dpi: int = 300) -> RasterPage:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise UnreadablePage(str(exc)) from exc
    return decode_pgm(data, dpi)


def write_pgm(path: str | os.PathLike[str], page: RasterPage) -> None:
    Path(path).write_bytes(encode_pgm(page))


def read_page(path: str | os.PathLike[str], dpi: int = 300) -> RasterPage:
    """Read a binary PGM or an 8-bit PNG (converted to grayscale)."""
    p = Path(path)
    if p.suffix.lower() == ".png":
        from PIL import Image

        try:
            with Image.open(p) as img:
                pixels = np.asarray(img.convert("L"), dtype=np.uint8).copy()
        except OSError as exc:
            raise UnreadablePage(str(exc)) from exc
        return RasterPage(pixels, dpi)
    return read_pgm(p, dpi)


def to_png_bytes(page: RasterPage) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(page.pixels, mode="L").save(buf, format="PNG")
    return buf.getvalue()
