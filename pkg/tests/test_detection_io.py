import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from markbox.core import MissingFile, PipelineConfig
from markbox.detection_io import (
    FieldCount,
    NonNumeric,
    OutOfRange,
    UnknownClassId,
    class_map_from_config,
    export_detections,
    import_detections,
    parse_yolo_line,
    parse_yolo_text,
)
from markbox.raster import BoundingBox, CheckboxDetection, CheckState, DetectionSource, RasterPage


def blank(w, h):
    return RasterPage(np.full((h, w), 255, dtype=np.uint8))


def det(box, state=CheckState.CHECKED):
    return CheckboxDetection(box, state, 0.0, 1.0, DetectionSource.GEOMETRIC)


def test_parse_to_pixels():
    rec = parse_yolo_line("1 0.5 0.5 0.1 0.05")
    assert rec.class_id == 1
    assert rec.to_box(1000, 500) == BoundingBox(450, 238, 100, 25)  # centre (500, 250)


@pytest.mark.parametrize(
    "line, exc",
    [
        ("1 0.5 0.5", FieldCount),
        ("1 0.5 0.5 0.1 0.1 9", FieldCount),
        ("0 1.2 0.5 0.1 0.1", OutOfRange),
        ("0 0.98 0.5 0.1 0.1", OutOfRange),
        ("-1 0.5 0.5 0.1 0.1", OutOfRange),
        ("a 0.5 0.5 0.1 0.1", NonNumeric),
        ("0 0.5 x 0.1 0.1", NonNumeric),
    ],
)
def test_parse_errors(line, exc):
    with pytest.raises(exc):
        parse_yolo_line(line)


def test_edge_tolerance():
    parse_yolo_line("0 0.9500001 0.5 0.1 0.1")


def test_errors_carry_line_numbers():
    with pytest.raises(FieldCount) as info:
        parse_yolo_text("0 0.5 0.5 0.1 0.1\n\n0 0.5\n")
    assert info.value.line_no == 3 and "line 3" in str(info.value)


def test_import_empty_file(write_text):
    assert import_detections(write_text("e.txt", ""), blank(100, 100)) == []


def test_import_missing_file(tmp_path):
    with pytest.raises(MissingFile):
        import_detections(tmp_path / "none.txt", blank(10, 10))


def test_unknown_class_id(write_text):
    path = write_text("d.txt", "0 0.5 0.5 0.1 0.1\n7 0.5 0.5 0.1 0.1\n")
    with pytest.raises(UnknownClassId) as info:
        import_detections(path, blank(100, 100))
    assert info.value.line_no == 2


def test_state_comes_from_class_map(write_text):
    path = write_text("d.txt", "0 0.5 0.5 0.4 0.4\n")
    (d,) = import_detections(path, blank(100, 100), {0: CheckState.CHECKED})
    assert d.state is CheckState.CHECKED and d.fill_ratio == 0.0
    assert d.source is DetectionSource.IMPORTED


def test_class_map_from_config():
    cfg = PipelineConfig(class_map={3: "checked"})
    assert class_map_from_config(cfg) == {3: CheckState.CHECKED}


def test_export_empty():
    assert export_detections([], 100, 100) == ""


def test_export_full_page_box():
    assert export_detections([det(BoundingBox(0, 0, 100, 100))], 100, 100) == "1 0.500000 0.500000 1.000000 1.000000\n"


def test_gold_round_trip(sample_form, tmp_path):
    page, gold = sample_form
    dets = [det(g.box, g.state) for g in gold.checkboxes]
    path = tmp_path / "gold.yolo.txt"
    path.write_text(export_detections(dets, page.width, page.height))
    back = import_detections(path, page)
    assert len(back) == len(dets)
    for a, b in zip(dets, back):
        assert a.state is b.state
        assert max(abs(a.box.x - b.box.x), abs(a.box.y - b.box.y), abs(a.box.w - b.box.w), abs(a.box.h - b.box.h)) <= 1


def _random_boxes(rnd, n, width, height):
    boxes = []
    for _ in range(n):
        w, h = rnd.randint(1, width // 3), rnd.randint(1, height // 3)
        boxes.append(BoundingBox(rnd.randint(0, width - w), rnd.randint(0, height - h), w, h))
    return boxes


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), width=st.integers(20, 3000), height=st.integers(20, 3000))
def test_fifty_box_round_trip(seed, width, height, tmp_path_factory):
    rnd = random.Random(seed)
    dets = [det(b, rnd.choice(list(CheckState))) for b in _random_boxes(rnd, 50, width, height)]
    path = tmp_path_factory.mktemp("rt") / "d.txt"
    path.write_text(export_detections(dets, width, height))
    back = import_detections(path, blank(width, height))
    for a, b in zip(dets, back):
        assert a.state is b.state
        for u, v in zip(a.box.as_list(), b.box.as_list()):
            assert abs(u - v) <= 1


def test_permuting_lines_permutes_records():
    lines = [f"{i % 2} {0.1 + i / 20:.3f} 0.5 0.05 0.05" for i in range(10)]
    order = list(range(10))
    random.Random(3).shuffle(order)
    base = [r for _, r in parse_yolo_text("\n".join(lines))]
    shuffled = [r for _, r in parse_yolo_text("\n".join(lines[i] for i in order))]
    assert shuffled == [base[i] for i in order]
