"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 backend failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Sequence

from markbox.core import ConfigError, MarkboxError, MissingFile, ParseError, PipelineConfig, load_config
from markbox.detection_io import export_detections
from markbox.matching import HttpOcr, SubprocessOcr
from markbox.pipeline import (
    Approach,
    Backends,
    ExtractionResult,
    IdMismatch,
    aggregate_annual,
    annual_csv,
    evaluate,
    process_document,
)
from markbox.raster import (
    CheckboxDetection,
    DetectionSource,
    UnreadablePage,
    binarize,
    detect_checkboxes,
    read_page,
    write_pgm,
)
from markbox.synthgen import (
    DegradationSpec,
    FormSpec,
    GoldAnnotation,
    default_form_spec,
    degrade,
    generate_form,
    load_gold,
    oracle_ocr,
    page_spec,
)
from markbox.vlm import HttpVlmClient, MockVlm

log = logging.getLogger("markbox")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_BACKEND = 0, 1, 2, 3


class UsageError(MarkboxError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- generate -----------------------------------------------------------------------


def _degradation(args: argparse.Namespace) -> DegradationSpec:
    return DegradationSpec(
        noise_sigma=args.noise,
        salt_pepper=args.salt_pepper,
        rotation_deg=args.rotation,
        blur_px=args.blur,
        smudge_count=args.smudges,
        smudge_radius=args.smudge_radius,
        mark_fade=args.fade,
        seed=args.seed,
    )


def _form_spec(args: argparse.Namespace, cfg: PipelineConfig) -> FormSpec:
    if not 0 <= args.faint_rate <= 0.3:
        raise UsageError("--faint-rate must be in [0, 0.3]")
    weights = (("x", 0.4), ("check", 0.3), ("fill", 0.3 - args.faint_rate), ("faint", args.faint_rate))
    return default_form_spec(args.year, cfg.dictionary_path, mark_weights=weights)


def generate_corpus_files(args: argparse.Namespace, cfg: PipelineConfig, out: Path) -> list[str]:
    out.mkdir(parents=True, exist_ok=True)
    base = _form_spec(args, cfg)
    d = _degradation(args)
    ids = []
    for i in range(args.pages):
        spec = page_spec(base, args.seed, i)
        page, gold = generate_form(spec)
        if d != DegradationSpec(seed=d.seed):
            page = degrade(page, replace(d, seed=spec.seed), gold.mark_boxes())
        stem = out / gold.document_id
        write_pgm(stem.with_suffix(".pgm"), page)
        stem.with_suffix(".gold.json").write_text(gold.dumps(), encoding="utf-8")
        gold_dets = _gold_detections(gold)
        stem.with_suffix(".yolo.txt").write_text(export_detections(gold_dets, gold.width, gold.height), encoding="utf-8")
        lines = [f"product:{p}" for p in gold.products] + ([f"patient:{gold.patient}"] if gold.patient else [])
        stem.with_suffix(".barcodes.txt").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        ids.append(gold.document_id)
    return ids


def _gold_detections(gold: GoldAnnotation) -> list[CheckboxDetection]:
    return [
        CheckboxDetection(cb.box, cb.state, 1.0 if cb.checked else 0.0, 1.0, DetectionSource.IMPORTED)
        for cb in gold.checkboxes
    ]


def cmd_generate(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    ids = generate_corpus_files(args, cfg, Path(args.out))
    print(json.dumps({"pages": len(ids), "out": str(args.out)}))
    return EXIT_OK


# --- detect -------------------------------------------------------------------------


def cmd_detect(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    page = read_page(args.page, args.dpi)
    dets = detect_checkboxes(binarize(page, cfg.binarize_window, cfg.binarize_offset), cfg, page.dpi)
    for d in dets:
        print(json.dumps({"box": d.box.as_list(), "state": d.state.value, "fill_ratio": round(d.fill_ratio, 6), "confidence": round(d.confidence, 6)}))
    if args.yolo:
        Path(args.yolo).write_text(export_detections(dets, page.width, page.height), encoding="utf-8")
    return EXIT_OK


# --- extract ------------------------------------------------------------------------


@dataclass(frozen=True)
class DocumentJob:
    page_path: str
    document_id: str
    approach: Approach
    detector: str
    year: int | None
    oracle_ocr_error: float | None
    mock_vlm: tuple[float, float] | None
    seed: int
    dpi: int


def _sidecar(page_path: Path, suffix: str) -> Path:
    return page_path.with_name(page_path.name.rsplit(".", 1)[0] + suffix)


def run_job(job: DocumentJob, cfg: PipelineConfig) -> dict[str, Any]:
    page_path = Path(job.page_path)
    gold_path = _sidecar(page_path, ".gold.json")
    gold = load_gold(gold_path) if gold_path.is_file() else None
    year = job.year if job.year is not None else (gold.year if gold else cfg.year)
    try:
        page = read_page(page_path, job.dpi)
    except UnreadablePage as exc:
        failed = ExtractionResult(job.document_id, year, job.approach, diagnostics=[f"unreadable page: {exc}"], unreadable=True)
        return failed.to_dict()

    ocr = vlm = None
    if job.approach is Approach.OCR:
        if job.oracle_ocr_error is not None:
            if gold is None:
                raise MissingFile(f"oracle OCR needs {gold_path}")
            ocr = oracle_ocr(gold, job.oracle_ocr_error, job.seed)
        elif cfg.ocr_command:
            ocr = SubprocessOcr(cfg.ocr_command)
        elif cfg.ocr_url:
            ocr = HttpOcr(cfg.ocr_url)
    else:
        if job.mock_vlm is not None:
            if gold is None:
                raise MissingFile(f"mock VLM needs {gold_path}")
            vlm = MockVlm(gold, job.mock_vlm[0], job.mock_vlm[1], job.seed)
        else:
            vlm = HttpVlmClient(cfg)

    imported = None
    if job.detector == "import":
        imported = str(_sidecar(page_path, ".yolo.txt"))
        if not Path(imported).is_file():
            raise MissingFile(f"detector 'import' needs {imported}")
    barcodes_path = _sidecar(page_path, ".barcodes.txt")
    barcode_lines = barcodes_path.read_text(encoding="utf-8").splitlines() if barcodes_path.is_file() else None

    result = process_document(page, cfg, Backends(ocr, vlm), job.approach, job.document_id, year, imported, barcode_lines)
    return result.to_dict()


def _run_one(args: tuple[DocumentJob, PipelineConfig]) -> dict[str, Any]:
    return run_job(*args)


def run_jobs(jobs: Sequence[DocumentJob], cfg: PipelineConfig, workers: int) -> list[dict[str, Any]]:
    """Process documents with a bounded pool; results come back in input order."""
    if workers <= 1 or len(jobs) <= 1:
        return [run_job(job, cfg) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, [(job, cfg) for job in jobs]))


def _page_files(inputs: Sequence[str]) -> list[Path]:
    files: list[Path] = []
    for raw in inputs:
        p = Path(raw)
        if p.is_dir():
            files.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in (".pgm", ".png")))
        elif p.is_file():
            files.append(p)
        else:
            raise MissingFile(f"no such page or directory: {p}")
    if not files:
        raise MissingFile("no pages found")
    return files


def _jobs(args: argparse.Namespace, pages: Sequence[Path]) -> list[DocumentJob]:
    approach = Approach(args.approach)
    if approach is Approach.VLM and args.ocr_error is not None:
        raise UsageError("--ocr-error applies to --approach ocr only")
    mock = (args.omission, args.hallucination) if args.mock_vlm else None
    return [
        DocumentJob(str(p), p.name.rsplit(".", 1)[0], approach, args.detector, args.year, args.ocr_error, mock, args.seed, args.dpi)
        for p in pages
    ]


def write_results(results: Sequence[dict[str, Any]], out: Path) -> Path:
    (out / "results").mkdir(parents=True, exist_ok=True)
    for r in results:
        (out / "results" / f"{r['document_id']}.json").write_text(
            json.dumps(r, ensure_ascii=False, indent=1) + "\n", encoding="utf-8"
        )
    jsonl = out / "results.jsonl"
    jsonl.write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in results), encoding="utf-8")
    return jsonl


def _workers(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    if args.workers is not None:
        return args.workers
    return cfg.workers or os.cpu_count() or 1


def _check_backends(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    if args.approach == "ocr" and args.ocr_error is None and not (cfg.ocr_command or cfg.ocr_url):
        raise UsageError("no OCR backend: pass --ocr-error for the oracle OCR or set ocr_command/ocr_url in the config")


def cmd_extract(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    _check_backends(args, cfg)
    jobs = _jobs(args, _page_files(args.pages))
    results = run_jobs(jobs, cfg, _workers(args, cfg))
    jsonl = write_results(results, Path(args.out))
    failures = sum(r["backend_failures"] for r in results)
    unreadable = sum(r["unreadable"] for r in results)
    print(json.dumps({"documents": len(results), "results": str(jsonl), "backend_failures": failures, "unreadable": unreadable}))
    return _batch_exit(results)


def _batch_exit(results: Sequence[dict[str, Any]]) -> int:
    if any(r["unreadable"] for r in results):
        return EXIT_IO
    if any(r["backend_failures"] for r in results):
        return EXIT_BACKEND
    return EXIT_OK


# --- evaluate / aggregate -----------------------------------------------------------


def _read_results(path: str, cfg: PipelineConfig) -> list[ExtractionResult]:
    p = Path(path)
    if not p.is_file():
        raise MissingFile(f"results file not found: {p}")
    out = []
    for line_no, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        if line.strip():
            try:
                out.append(ExtractionResult.from_dict(json.loads(line), cfg.dictionary_path))
            except (ValueError, KeyError) as exc:
                raise ParseError(f"{p}:{line_no}: {exc}") from exc
    return out


def _read_gold(gold_dir: str) -> list[GoldAnnotation]:
    d = Path(gold_dir)
    if not d.is_dir():
        raise MissingFile(f"gold directory not found: {d}")
    return [load_gold(p) for p in sorted(d.glob("*.gold.json"))]


def evaluation_json(results: Sequence[ExtractionResult], gold: Sequence[GoldAnnotation]) -> str:
    return json.dumps(evaluate(results, gold).to_dict(), indent=1, sort_keys=True) + "\n"


def cmd_evaluate(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    text = evaluation_json(_read_results(args.results, cfg), _read_gold(args.gold))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_aggregate(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    text = annual_csv(aggregate_annual(_read_results(args.results, cfg)))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- run ----------------------------------------------------------------------------


def cmd_run(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    if args.approach == "ocr" and args.ocr_error is None:
        args.ocr_error = 0.0
    if args.approach == "vlm" and not args.live_vlm:
        args.mock_vlm = True
    out = Path(args.out)
    corpus = out / "corpus"
    generate_corpus_files(args, cfg, corpus)
    jobs = _jobs(args, _page_files([str(corpus)]))
    raw = run_jobs(jobs, cfg, _workers(args, cfg))
    write_results(raw, out)
    results = [ExtractionResult.from_dict(r, cfg.dictionary_path) for r in raw]
    report = evaluation_json(results, _read_gold(str(corpus)))
    (out / "eval.json").write_text(report, encoding="utf-8")
    (out / "annual.csv").write_text(annual_csv(aggregate_annual(results)), encoding="utf-8")
    sys.stdout.write(report)
    return _batch_exit(raw)


# --- argument parsing ---------------------------------------------------------------


def _add_corpus_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--pages", type=int, default=10, help="number of pages to generate")
    p.add_argument("--year", type=int, default=2024)
    p.add_argument("--faint-rate", type=float, default=0.0, help="share of marks drawn faint (taken from full-fill)")
    g = p.add_argument_group("degradation")
    g.add_argument("--noise", type=float, default=0.0, help="gaussian noise sigma (gray levels)")
    g.add_argument("--salt-pepper", type=float, default=0.0)
    g.add_argument("--rotation", type=float, default=0.0, help="skew in degrees")
    g.add_argument("--blur", type=int, default=0, help="box blur kernel (px)")
    g.add_argument("--smudges", type=int, default=0)
    g.add_argument("--smudge-radius", type=int, default=0)
    g.add_argument("--fade", type=float, default=0.0, help="mark fade factor in [0, 1]")


def _add_extract_args(p: argparse.ArgumentParser, *, run: bool = False) -> None:
    p.add_argument("--approach", choices=["ocr", "vlm"], default="ocr")
    p.add_argument("--detector", choices=["geometric", "import"], default="geometric")
    p.add_argument("--ocr-error", type=float, default=None, help="use the oracle OCR with this character error rate")
    if not run:
        p.add_argument("--mock-vlm", action="store_true", help="answer VLM prompts from the gold sidecar")
    else:
        p.add_argument("--live-vlm", action="store_true", help="call the configured endpoint instead of the mock")
    p.add_argument("--omission", type=float, default=0.0, help="mock VLM omission rate")
    p.add_argument("--hallucination", type=float, default=0.0, help="mock VLM hallucination rate")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--dpi", type=int, default=300)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="markbox", description="Checkbox form extraction pipeline")
    parser.add_argument("--config", help="JSON config file (default: $MARKBOX_CONFIG)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic corpus with gold annotations")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_corpus_args(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("detect", help="detect checkboxes on one page")
    p.add_argument("page")
    p.add_argument("--yolo", help="also write detections in YOLO format")
    p.add_argument("--dpi", type=int, default=300)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("extract", help="run the extraction pipeline over pages")
    p.add_argument("pages", nargs="+", help="page files or directories")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="seed for the oracle OCR / mock VLM")
    p.add_argument("--year", type=int, default=None, help="form year (default: from gold sidecar or config)")
    _add_extract_args(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("evaluate", help="score results against gold annotations")
    p.add_argument("--results", required=True, help="results.jsonl")
    p.add_argument("--gold", required=True, help="directory of *.gold.json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("aggregate", help="annual category counts as CSV")
    p.add_argument("--results", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("run", help="generate, extract and evaluate in one seeded pass")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", default="markbox_run")
    _add_corpus_args(p)
    _add_extract_args(p, run=True)
    p.set_defaults(func=cmd_run, mock_vlm=False)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if getattr(args, "detector", None):
            cfg = cfg.replace(detector=args.detector)
        return args.func(args, cfg)
    except (UsageError, ConfigError, IdMismatch, ValueError) as exc:
        print(f"markbox: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingFile, ParseError, UnreadablePage, OSError) as exc:
        print(f"markbox: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except MarkboxError as exc:
        print(f"markbox: error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
