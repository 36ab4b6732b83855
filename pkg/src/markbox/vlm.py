"""VLM-based extraction: prompt a vision-language model with a whole checkbox area.

The client speaks the OpenAI-compatible chat-completions protocol that
self-hosted inference servers expose. :class:`MockVlm` answers from synthetic
gold annotations instead, with seeded omission and hallucination errors.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable, Protocol

import httpx

from markbox.core import CategoryDictionary, CategoryId, EmptyDictionary, MarkboxError, PipelineConfig, SetKind
from markbox.matching import closest_category, normalize_text
from markbox.raster import BoundingBox, RasterPage, to_png_bytes

if TYPE_CHECKING:
    from markbox.synthgen import GoldAnnotation

logger = logging.getLogger(__name__)


class VlmError(MarkboxError):
    pass


class EndpointUnreachable(VlmError):
    pass


class VlmTimeout(VlmError):
    pass


class MalformedTransport(VlmError):
    pass


_PREAMBLE = "You are a medical document analysis assistant to extract the text of marked checkboxes."
_TAIL = (
    "Identify which of these categories are checked in the provided image snippet. "
    "Do not include any category that is not checked. "
    "Provide the checked categories as a simple list."
)
PROMPT_TEMPLATES = {
    SetKind.FINDINGS: (
        f"{_PREAMBLE} The following image snippet contains checkboxes from a transfusion reaction report. "
        "Each checkbox corresponds to a recipient finding. "
        "Possible FINDINGS categories include: {categories}. " + _TAIL
    ),
    SetKind.DIAGNOSES: (
        f"{_PREAMBLE} Each checkbox corresponds to a suspected diagnosis. "
        "Possible SUSPECTED DIAGNOSIS categories include: {categories}. " + _TAIL
    ),
}


@dataclass(frozen=True)
class PromptSpec:
    system_text: str
    set_kind: SetKind
    image: RasterPage


def build_prompt(set_kind: SetKind, dictionary: CategoryDictionary, crop: RasterPage) -> PromptSpec:
    labels = dictionary.labels(set_kind)
    if not labels:
        raise EmptyDictionary(f"no {set_kind.value} labels to offer the model")
    categories = ", ".join(f'"{label}"' for label in labels)
    return PromptSpec(PROMPT_TEMPLATES[set_kind].format(categories=categories), set_kind, crop)


_LIST_MARKER = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")


@dataclass
class VlmParse:
    categories: set[CategoryId] = field(default_factory=set)
    warnings: list[str] = field(default_factory=list)


def _match_line(
    candidate: str, dictionary: CategoryDictionary, set_kind: SetKind, cfg: PipelineConfig
) -> CategoryId | None:
    best = closest_category(candidate, dictionary, set_kind)
    if best.distance == 0 or best.relative_distance <= cfg.vlm_relative_max:
        return best.category
    return None


def parse_vlm_response(
    text: str, dictionary: CategoryDictionary, set_kind: SetKind, cfg: PipelineConfig
) -> VlmParse:
    """Map a free-text list answer onto dictionary categories; unknown lines become warnings."""
    out = VlmParse()
    for raw_line in text.splitlines():
        line = _LIST_MARKER.sub("", raw_line).strip().strip("\"'`").rstrip(",;").strip()
        if not normalize_text(line):
            continue
        cat = _match_line(line, dictionary, set_kind, cfg)
        if cat is not None:
            out.categories.add(cat)
            continue
        # one-line, comma-separated answers
        parts = [p.strip().strip("\"'`") for p in line.split(",")] if "," in line else []
        matched = [_match_line(p, dictionary, set_kind, cfg) for p in parts if normalize_text(p)]
        if parts and all(m is not None for m in matched):
            out.categories.update(m for m in matched if m is not None)
            continue
        out.warnings.append(f"discarded response line not in the {set_kind.value} dictionary: {line!r}")
    return out


class VlmBackend(Protocol):
    def complete(self, prompt: PromptSpec) -> str: ...


def chat_payload(prompt: PromptSpec, model: str, temperature: float) -> dict[str, Any]:
    image_b64 = base64.b64encode(to_png_bytes(prompt.image)).decode("ascii")
    return {
        "model": model,
        "temperature": temperature,
        "messages": [
            {"role": "system", "content": prompt.system_text},
            {
                "role": "user",
                "content": [{"type": "image_url", "image_url": {"url": f"data:image/png;base64,{image_b64}"}}],
            },
        ],
    }


def _response_text(body: Any) -> str:
    try:
        content = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise MalformedTransport(f"no message content in response: {exc!r}") from exc
    if isinstance(content, list):
        content = "\n".join(part.get("text", "") for part in content if isinstance(part, dict))
    if not isinstance(content, str):
        raise MalformedTransport(f"unexpected content type {type(content).__name__}")
    return content


class HttpVlmClient:
    """Chat-completions client with bounded retries and exponential backoff.

    Transport errors and 5xx responses are retried; after ``max_retries + 1``
    failed attempts the last failure is raised as :class:`VlmTimeout` or
    :class:`EndpointUnreachable`.
    """

    def __init__(
        self,
        cfg: PipelineConfig,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.cfg = cfg
        self.sleep = sleep
        headers = {}
        api_key = os.environ.get(cfg.vlm_api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self.client = httpx.Client(timeout=cfg.vlm_timeout_s, transport=transport, headers=headers)
        self.attempts = 0
        self._audit_lock = threading.Lock()

    def backoff_schedule(self) -> list[float]:
        base = self.cfg.vlm_backoff_base_ms / 1000
        return [base * 2**i for i in range(self.cfg.vlm_max_retries)]

    def complete(self, prompt: PromptSpec) -> str:
        payload = chat_payload(prompt, self.cfg.vlm_model, self.cfg.vlm_temperature)
        delays = self.backoff_schedule()
        last: Exception | None = None
        for attempt in range(self.cfg.vlm_max_retries + 1):
            if attempt:
                self.sleep(delays[attempt - 1])
            self.attempts += 1
            try:
                resp = self.client.post(self.cfg.vlm_url, json=payload)
            except httpx.TimeoutException as exc:
                last = exc
                logger.warning("VLM request timed out (attempt %d): %s", attempt + 1, exc)
                continue
            except httpx.TransportError as exc:
                last = exc
                logger.warning("VLM endpoint unreachable (attempt %d): %s", attempt + 1, exc)
                continue
            if resp.status_code >= 500:
                last = EndpointUnreachable(f"HTTP {resp.status_code} from {self.cfg.vlm_url}")
                logger.warning("VLM endpoint returned %d (attempt %d)", resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise MalformedTransport(f"HTTP {resp.status_code} from {self.cfg.vlm_url}: {resp.text[:200]}")
            try:
                body = resp.json()
            except ValueError as exc:
                raise MalformedTransport(f"response is not JSON: {exc}") from exc
            text = _response_text(body)
            self._audit(payload, body)
            return text
        if isinstance(last, httpx.TimeoutException):
            raise VlmTimeout(f"VLM request timed out after {self.cfg.vlm_max_retries + 1} attempts") from last
        raise EndpointUnreachable(
            f"VLM endpoint {self.cfg.vlm_url} failed after {self.cfg.vlm_max_retries + 1} attempts: {last}"
        ) from last

    def _audit(self, payload: dict[str, Any], body: Any) -> None:
        if not self.cfg.vlm_audit_log:
            return
        logged = json.loads(json.dumps(payload))
        for part in logged["messages"][1]["content"]:
            url = part["image_url"]["url"]
            part["image_url"]["url"] = "sha256:" + hashlib.sha256(url.encode("ascii")).hexdigest()
        line = json.dumps({"request": logged, "response": body}, ensure_ascii=False)
        with self._audit_lock, open(self.cfg.vlm_audit_log, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")


@dataclass
class Approach2Result:
    categories: set[CategoryId] = field(default_factory=set)
    warnings: list[str] = field(default_factory=list)


def extract_approach2(
    region_crop: RasterPage,
    set_kind: SetKind,
    dictionary: CategoryDictionary,
    backend: VlmBackend,
    cfg: PipelineConfig,
) -> Approach2Result:
    if region_crop.width < 1 or region_crop.height < 1:
        raise ValueError("empty region crop")
    prompt = build_prompt(set_kind, dictionary, region_crop)
    parsed = parse_vlm_response(backend.complete(prompt), dictionary, set_kind, cfg)
    return Approach2Result(parsed.categories, parsed.warnings)


class MockVlm:
    """Answers prompts from gold annotations.

    Each checked box visible in the crop is reported unless dropped with
    probability ``omission_rate``; each visible unchecked box is reported
    with probability ``hallucination_rate``. Draws are seeded by the
    document, the crop rectangle and the set kind.
    """

    def __init__(self, gold: GoldAnnotation, omission_rate: float = 0.0, hallucination_rate: float = 0.0, seed: int = 0):
        if not (0 <= omission_rate <= 1 and 0 <= hallucination_rate <= 1):
            raise ValueError("rates must be in [0, 1]")
        self.gold = gold
        self.omission_rate = omission_rate
        self.hallucination_rate = hallucination_rate
        self.seed = seed

    def complete(self, prompt: PromptSpec) -> str:
        from markbox.synthgen import rng_for

        img = prompt.image
        view = BoundingBox(img.origin[0], img.origin[1], img.width, img.height)
        rng = rng_for(self.seed, "vlm", self.gold.document_id, *view.as_list(), prompt.set_kind.value)
        lines = []
        for cb in self.gold.checkboxes:
            if cb.set_kind is not prompt.set_kind or not view.contains(cb.box):
                continue
            u = rng.random()
            if cb.checked:
                if u >= self.omission_rate:
                    lines.append(cb.label)
            elif u < self.hallucination_rate:
                lines.append(cb.label)
        return "\n".join(f"- {label}" for label in lines)
