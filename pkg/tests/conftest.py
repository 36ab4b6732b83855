from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import pytest

from markbox.core import PipelineConfig, load_dictionary
from markbox.synthgen import default_form_spec, generate_corpus, generate_form

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def dictionary():
    return load_dictionary(None, 2024)


@pytest.fixture(scope="session")
def cfg():
    return PipelineConfig()


@pytest.fixture(scope="session")
def form_spec():
    return default_form_spec(2024)


@pytest.fixture(scope="session")
def sample_form(form_spec):
    return generate_form(replace(form_spec, seed=7))


@pytest.fixture(scope="session")
def small_corpus(form_spec):
    return list(generate_corpus(form_spec, 42, 12))


@pytest.fixture(scope="session")
def acceptance_log():
    def record(number: int, title: str, ok: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})")

    return record


@pytest.fixture
def write_text(tmp_path: Path):
    def _write(name: str, text: str) -> Path:
        p = tmp_path / name
        p.write_text(text, encoding="utf-8")
        return p

    return _write


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
