import json

import numpy as np
import pytest
from PIL import Image

from saandet.evaluation.render import (
    draw_detections,
    histogram_data,
    render_histogram,
    render_overlays,
    render_report,
    render_tables,
)
from saandet.evaluation.report import DetectionRecord
from saandet.exceptions import DataError
from tests.fake_data import make_index, make_report

METHODS = ("saan", "frcn-ft", "frcn-joint")
SHOTS = (1, 2, 3, 5, 10)


@pytest.fixture
def reports():
    return [
        make_report(
            method=method, k=k, rho="inf" if method == "frcn-joint" else "1", aps={"plane": 0.9, "tank": float(ap)}
        )
        for m, method in enumerate(METHODS)
        for k, ap in zip(SHOTS, np.linspace(0.1 * (m + 1), 0.2 * (m + 1), len(SHOTS)))
    ]


@pytest.fixture
def dataset(tmp_path):
    index = make_index({"a": [("plane", (10, 10, 40, 40))], "b": [("tank", (50, 50, 90, 90))]}, ["plane", "tank"])
    (tmp_path / "images").mkdir()
    Image.new("RGB", (100, 100), (90, 90, 90)).save(tmp_path / "images" / "a.png")
    return index, tmp_path


def test_histogram_has_one_bar_per_report(reports, tmp_path):
    data = histogram_data(reports)
    assert list(data) == ["tank"]
    path = render_histogram("tank", data["tank"], tmp_path)
    assert path == tmp_path / "histogram_tank.png"
    assert path.stat().st_size > 0

    sidecar = json.loads((tmp_path / "histogram_tank.json").read_text())
    assert sidecar["novel_class"] == "tank"
    assert len(sidecar["bars"]) == 15
    for bar, report in zip(sidecar["bars"], reports):
        assert bar == {"method": report.method, "rho": report.rho, "k": report.k, "ap": report.class_report("tank").ap}


def test_missing_ap_draws_an_empty_bar(tmp_path):
    bars = histogram_data([make_report(aps={"tank": None})])["tank"]
    assert bars[0]["ap"] is None
    render_histogram("tank", bars, tmp_path)
    assert (tmp_path / "histogram_tank.png").is_file()


def test_no_detections_leaves_the_image_unchanged():
    image = Image.fromarray(np.random.default_rng(0).integers(0, 255, (32, 48, 3), dtype=np.uint8))
    drawn = draw_detections(image, [], ["plane"])
    assert drawn is not image
    assert np.array_equal(np.asarray(drawn), np.asarray(image))


def test_detections_are_drawn():
    image = Image.new("RGB", (64, 64), (0, 0, 0))
    drawn = draw_detections(image, [DetectionRecord(class_name="plane", score=0.9, box=(10, 20, 40, 50))], ["plane"])
    pixels = np.asarray(drawn)
    assert pixels[35, 10].any()
    assert not pixels[35, 25].any()
    assert not np.asarray(image).any()


def test_overlays(dataset):
    index, root = dataset
    detections = {
        "a": [
            DetectionRecord(class_name="plane", score=0.9, box=(10, 10, 40, 40)),
            DetectionRecord(class_name="tank", score=0.1, box=(60, 60, 80, 80)),
        ],
        "b": [DetectionRecord(class_name="tank", score=0.8, box=(50, 50, 90, 90))],
    }
    paths = render_overlays([make_report(detections=detections)], index, root, root / "out")
    # b.png does not exist
    assert paths == [root / "out" / "overlays" / "tank_k1_rho1" / "overlay_a_saan.png"]
    overlay = np.asarray(Image.open(paths[0]))
    assert overlay[25, 10].tolist() != [90, 90, 90]
    # below the score threshold
    assert overlay[70, 60].tolist() == [90, 90, 90]


def test_low_scores_only(dataset):
    index, root = dataset
    detections = {"a": [DetectionRecord(class_name="plane", score=0.2, box=(10, 10, 40, 40))]}
    [path] = render_overlays([make_report(detections=detections)], index, root, root / "out")
    assert np.array_equal(np.asarray(Image.open(path)), np.asarray(Image.open(root / "images" / "a.png")))


def test_novel_ap_table(reports, tmp_path):
    text = render_tables(reports, tmp_path).read_text()
    assert "saan" in text and "frcn-joint" in text
    assert "plane" not in text
    assert "10.00" in text


def test_table_without_novel_classes(tmp_path):
    report = make_report(aps={"plane": 0.5})
    assert render_tables([report], tmp_path).read_text() == "no novel-class results\n"


def test_render_report(reports, dataset):
    index, root = dataset
    paths = render_report(reports, root / "figures", index, root)
    names = {p.name for p in paths}
    assert names == {"histogram_tank.png", "novel_ap.txt"}
    assert (root / "figures" / "histogram_tank.json").is_file()
    with pytest.raises(DataError):
        render_report([], root / "figures")
