from pathlib import Path

import pytest
from PIL import Image

from saandet.data.formats import (
    NWPU_CLASSES,
    image_root_for,
    parse_annotations,
    parse_nwpu_line,
    read_index,
    write_index,
    write_records,
)
from saandet.exceptions import AnnotationParseError, DataError
from saandet.models.dataset import ImageRecord
from tests.fake_data import make_index

VOC_XML = """<annotation>
  <filename>{name}.jpg</filename>
  <size><width>200</width><height>100</height><depth>3</depth></size>
  <object><name>Aircraft</name><bndbox><xmin>11</xmin><ymin>21</ymin><xmax>50</xmax><ymax>60</ymax></bndbox></object>
  <object><name>oiltank</name><bndbox><xmin>100</xmin><ymin>10</ymin><xmax>300</xmax><ymax>40</ymax></bndbox></object>
  <object><name>playground</name><bndbox><xmin>101</xmin><ymin>11</ymin><xmax>140</xmax></bndbox></object>
</annotation>
"""


@pytest.fixture
def nwpu_root(tmp_path):
    gt = tmp_path / "ground truth"
    images = tmp_path / "positive image set"
    gt.mkdir()
    images.mkdir()
    for name in ("001", "002", "003"):
        Image.new("RGB", (700, 600)).save(images / f"{name}.jpg")
    (gt / "001.txt").write_text("(563,478),(630,573),5\n(10,10),(40,30),1\n", encoding="utf-8")
    (gt / "002.txt").write_text("", encoding="utf-8")
    (gt / "003.txt").write_text("(50,50),(40,60),2\n(1,1),(5,5),11\nnot a record\n", encoding="utf-8")
    return tmp_path


@pytest.fixture
def voc_root(tmp_path):
    (tmp_path / "Annotations").mkdir()
    (tmp_path / "JPEGImages").mkdir()
    (tmp_path / "Annotations" / "img_a.xml").write_text(VOC_XML.format(name="img_a"), encoding="utf-8")
    (tmp_path / "Annotations" / "broken.xml").write_text("<annotation>", encoding="utf-8")
    return tmp_path


def test_parse_nwpu_line():
    image = ImageRecord(image_id="001", path="001.jpg", width=700, height=600)
    ann = parse_nwpu_line("(563,478),(630,573),5", image, 0, Path("001.txt"), 1)
    assert ann.bbox.as_tuple() == (563, 478, 630, 573)
    assert ann.class_name == NWPU_CLASSES[4]
    assert ann.annotation_id == "001#0"


def test_parse_nwpu_line_rejects_inverted_box():
    image = ImageRecord(image_id="001", path="001.jpg", width=700, height=600)
    with pytest.raises(AnnotationParseError):
        parse_nwpu_line("(50,50),(40,60),2", image, 0, Path("001.txt"), 1)


def test_parse_nwpu_tree(nwpu_root):
    errors = []
    index = parse_annotations(nwpu_root, "nwpu", errors)
    assert index.classes == NWPU_CLASSES
    assert [img.image_id for img in index.images] == ["001", "002", "003"]
    assert len(index.annotations_by_image["001"]) == 2
    # an empty ground-truth file still yields an image record
    assert index.annotations_by_image["002"] == ()
    assert index.annotations_by_image["003"] == ()
    assert len(errors) == 3
    assert {e.line for e in errors} == {1, 2, 3}


def test_parse_voc_tree(voc_root):
    errors = []
    index = parse_annotations(voc_root, "voc", errors)
    assert index.classes == ("aircraft",)
    (ann,) = index.annotations
    # 1-based inclusive corners become 0-based with an exclusive max edge
    assert ann.bbox.as_tuple() == (10, 20, 50, 60)
    # the unreadable file, the box beyond the image and the incomplete box
    assert len(errors) == 3


def test_no_valid_records(tmp_path):
    (tmp_path / "ground truth").mkdir()
    with pytest.raises(DataError):
        parse_annotations(tmp_path, "nwpu")


def test_unknown_format(tmp_path):
    with pytest.raises(DataError):
        parse_annotations(tmp_path, "coco")


def test_canonical_index(tmp_path):
    index = make_index(
        {"a": [("cat", (1, 2, 30, 40)), ("dog", (5.5, 6, 20, 21))], "b": [], "c": [("dog", (0, 0, 100, 100))]},
        ("cat", "dog"),
    )
    path = write_index(tmp_path / "index.tsv", index, header={"seed": 4, "root": "/data/pets"})
    loaded, header = read_index(path)
    assert loaded == index
    assert header == {"classes": "cat,dog", "seed": "4", "root": "/data/pets"}
    assert image_root_for(path, header) == Path("/data/pets")
    assert parse_annotations(tmp_path, "canonical") == index


def test_masked_records(tmp_path):
    index = make_index({"a": [("cat", (1, 2, 30, 40)), ("cat", (50, 50, 60, 60))]}, ("cat",))
    path = write_records(tmp_path / "ft.tsv", index, masked=["a#1"])
    assert path.read_text(encoding="utf-8").splitlines()[-1].endswith("cat:50,50,60,60,masked")
    loaded, _ = read_index(path)
    assert [ann.masked for ann in loaded.annotations] == [False, True]


def test_manifest_bytes_are_stable(tmp_path):
    index = make_index({"a": [("cat", (1, 2, 30, 40))]}, ("cat",))
    first = write_index(tmp_path / "one.tsv", index, header={"seed": 1}).read_bytes()
    second = write_index(tmp_path / "two.tsv", index, header={"seed": 1}).read_bytes()
    assert first == second
    assert b"\r\n" not in first


def test_malformed_canonical_line(tmp_path):
    path = tmp_path / "index.tsv"
    path.write_text("# classes=cat\na\timages/a.png\t100\n", encoding="utf-8")
    with pytest.raises(AnnotationParseError):
        read_index(path)
