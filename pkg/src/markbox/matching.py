"""OCR-based extraction: read the label beside each checked box and map it to the closest category."""

from __future__ import annotations

import re
import shlex
import subprocess
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Protocol, Sequence

import httpx

from markbox.core import CategoryDictionary, CategoryId, EmptyDictionary, MarkboxError, PipelineConfig, SetKind
from markbox.raster import BoundingBox, CheckboxDetection, CheckState, OutOfBounds, RasterPage, crop, encode_pgm


class OcrError(MarkboxError):
    pass


class OcrResult(NamedTuple):
    text: str
    confidence: float


class OcrBackend(Protocol):
    def recognize(self, strip: RasterPage) -> OcrResult: ...


_UMLAUTS = str.maketrans({"ä": "ae", "ö": "oe", "ü": "ue", "ß": "ss"})
_SPACES = re.compile(r"\s+")


def normalize_text(s: str) -> str:
    """Case-fold, collapse whitespace and spell umlauts out, so "Übelkeit" == "uebelkeit"."""
    s = unicodedata.normalize("NFC", s).casefold().translate(_UMLAUTS)
    return _SPACES.sub(" ", s).strip()


def levenshtein(a: str, b: str) -> int:
    if a == b:
        return 0
    # shared prefix/suffix never changes the distance
    start = 0
    while start < len(a) and start < len(b) and a[start] == b[start]:
        start += 1
    end_a, end_b = len(a), len(b)
    while end_a > start and end_b > start and a[end_a - 1] == b[end_b - 1]:
        end_a -= 1
        end_b -= 1
    a, b = a[start:end_a], b[start:end_b]
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


@dataclass(frozen=True)
class CategoryMatch:
    category: CategoryId
    distance: int
    relative_distance: float
    source_text: str


@dataclass(frozen=True)
class NoMatch:
    source_text: str
    reason: str
    closest: str | None = None
    distance: int | None = None
    box: BoundingBox | None = None

    def describe(self) -> str:
        where = f" at {self.box.as_list()}" if self.box else ""
        return f"no match{where} for {self.source_text!r}: {self.reason}"


def _relative(distance: int, a: str, b: str) -> float:
    longest = max(len(a), len(b))
    return distance / longest if longest else 0.0


def closest_category(text: str, dictionary: CategoryDictionary, set_kind: SetKind) -> CategoryMatch:
    """Minimum-distance label of ``set_kind``; ties go to the smaller dictionary index."""
    labels = dictionary.labels(set_kind)
    if not labels:
        raise EmptyDictionary(f"no {set_kind.value} labels in the {dictionary.version_year} dictionary")
    query = normalize_text(text)
    best: CategoryMatch | None = None
    for index, label in enumerate(labels):
        target = normalize_text(label)
        d = levenshtein(query, target)
        if best is None or d < best.distance:
            best = CategoryMatch(CategoryId(set_kind, index, label), d, _relative(d, query, target), text)
            if d == 0:
                break
    assert best is not None
    return best


def match_category(
    ocr_text: str, dictionary: CategoryDictionary, set_kind: SetKind, cfg: PipelineConfig
) -> CategoryMatch | NoMatch:
    best = closest_category(ocr_text, dictionary, set_kind)
    if not normalize_text(ocr_text):
        return NoMatch(ocr_text, "empty OCR text")
    if best.distance > cfg.levenshtein_absolute_max or best.relative_distance > cfg.levenshtein_relative_max:
        return NoMatch(
            ocr_text,
            f"closest label {best.category.label!r} is {best.distance} edits away "
            f"(relative {best.relative_distance:.2f})",
            best.category.label,
            best.distance,
        )
    return best


def ocr_strip_for(
    box: BoundingBox,
    page: RasterPage,
    cfg: PipelineConfig,
    neighbors: Sequence[BoundingBox] = (),
) -> BoundingBox | None:
    """Text area to the right of a checkbox, or None when it clips to nothing.

    The strip stops at the page edge and at the nearest neighbor box that
    starts to the right and shares rows with it.
    """
    if not box.inside(page.width, page.height):
        raise OutOfBounds(f"{box} is not inside a {page.width}x{page.height} page")
    x0 = box.right + cfg.scaled(cfg.strip_gap, page.dpi) if cfg.strip_gap else box.right
    sh = max(1, round(box.h * cfg.strip_height_factor))
    y0 = max(0, box.y + (box.h - sh) // 2)
    y1 = min(page.height, y0 + sh)
    x1 = min(page.width, x0 + cfg.scaled(cfg.strip_width, page.dpi))
    for other in neighbors:
        if other.x >= box.right and other.y < y1 and other.bottom > y0:
            x1 = min(x1, other.x)
    if x1 <= x0 or y1 <= y0:
        return None
    return BoundingBox(x0, y0, x1 - x0, y1 - y0)


@dataclass
class Approach1Result:
    categories: set[CategoryId] = field(default_factory=set)
    no_matches: list[NoMatch] = field(default_factory=list)
    flagged: list[str] = field(default_factory=list)
    backend_failures: int = 0


def extract_approach1(
    page: RasterPage,
    detections: Sequence[CheckboxDetection],
    dictionary: CategoryDictionary,
    set_kind: SetKind,
    ocr: OcrBackend,
    cfg: PipelineConfig,
    neighbors: Sequence[BoundingBox] | None = None,
) -> Approach1Result:
    """OCR the strip next to every checked box and keep the matched categories."""
    result = Approach1Result()
    if neighbors is None:
        neighbors = [d.box for d in detections]
    strips: list[tuple[CheckboxDetection, BoundingBox]] = []
    for det in detections:
        if det.state is not CheckState.CHECKED:
            continue
        strip = ocr_strip_for(det.box, page, cfg, neighbors)
        if strip is None:
            result.flagged.append(f"zero-width OCR strip for box {det.box.as_list()}; OCR skipped")
            continue
        strips.append((det, strip))

    def read(item: tuple[CheckboxDetection, BoundingBox]) -> OcrResult | Exception:
        try:
            return ocr.recognize(crop(page, item[1]))
        except Exception as exc:  # backend failures stay per detection
            return exc

    if cfg.ocr_max_concurrent > 1 and len(strips) > 1:
        with ThreadPoolExecutor(max_workers=cfg.ocr_max_concurrent) as pool:
            outputs = list(pool.map(read, strips))
    else:
        outputs = [read(s) for s in strips]

    for (det, _), out in zip(strips, outputs):
        if isinstance(out, Exception):
            result.backend_failures += 1
            result.flagged.append(f"OCR backend failed for box {det.box.as_list()}: {out}")
            continue
        m = match_category(out.text, dictionary, set_kind, cfg)
        if isinstance(m, NoMatch):
            result.no_matches.append(NoMatch(m.source_text, m.reason, m.closest, m.distance, det.box))
        else:
            result.categories.add(m.category)
    return result


class SubprocessOcr:
    """External OCR engine: PGM on stdin, UTF-8 text on stdout."""

    def __init__(self, command: str, timeout: float = 60.0) -> None:
        self.argv = shlex.split(command)
        self.timeout = timeout

    def recognize(self, strip: RasterPage) -> OcrResult:
        try:
            proc = subprocess.run(
                self.argv, input=encode_pgm(strip), capture_output=True, timeout=self.timeout, check=False
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise OcrError(f"OCR command failed: {exc}") from exc
        if proc.returncode != 0:
            raise OcrError(f"OCR command exited {proc.returncode}: {proc.stderr.decode(errors='replace').strip()}")
        return OcrResult(proc.stdout.decode("utf-8", errors="replace").strip(), 1.0)


class HttpOcr:
    """External OCR service: the PGM crop is POSTed, the response body is the text."""

    def __init__(self, url: str, timeout: float = 60.0, client: httpx.Client | None = None) -> None:
        self.url = url
        self.client = client or httpx.Client(timeout=timeout)

    def recognize(self, strip: RasterPage) -> OcrResult:
        try:
            resp = self.client.post(self.url, content=encode_pgm(strip), headers={"Content-Type": "image/x-portable-graymap"})
            resp.raise_for_status()
        except httpx.HTTPError as exc:
            raise OcrError(f"OCR request failed: {exc}") from exc
        return OcrResult(resp.text.strip(), 1.0)
