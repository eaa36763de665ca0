"""On-disk annotation grammars and the canonical index format

Two source grammars are read:

- ``voc``: ``<root>/Annotations/*.xml`` with ``size/{width,height}`` and repeated
  ``object/{name, bndbox/{xmin,ymin,xmax,ymax}}``; images in ``<root>/JPEGImages``. Coordinates are 1-based inclusive
  and converted to 0-based with exclusive max edges.
- ``nwpu``: ``<root>/ground truth/*.txt`` with one ``(x1,y1),(x2,y2),class_id`` object per line; images in
  ``<root>/positive image set``.

The canonical index is one tab-separated record per image::

    image_id <TAB> relative path <TAB> width <TAB> height <TAB> class:x1,y1,x2,y2[,masked];...

preceded by ``# key=value`` header lines. Manifests use the same record format.
The split manifest shares the header convention and lists one ``image_id <TAB> subset`` line per image, the subset
being ``base_train`` (training image free of novel objects), ``train`` or ``test``.
"""
from __future__ import annotations

import re
import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from PIL import Image
from pydantic import ValidationError
from structlog.stdlib import get_logger

from saandet.exceptions import AnnotationParseError, DataError
from saandet.models.dataset import Annotation, ClassSplit, DatasetIndex, ImageRecord, SplitSpec
from saandet.models.geometry import BBox
from saandet.utils.io import atomic_write_text

logger = get_logger(__name__)

NWPU_CLASSES = (
    "airplane",
    "ship",
    "storage_tank",
    "baseball_diamond",
    "tennis_court",
    "basketball_court",
    "ground_track_field",
    "harbor",
    "bridge",
    "vehicle",
)
RSOD_CLASSES = ("aircraft", "oiltank", "overpass", "playground")
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".tif", ".tiff", ".bmp")

NWPU_LINE = re.compile(
    r"^\s*\(\s*(-?\d+)\s*,\s*(-?\d+)\s*\)\s*,\s*\(\s*(-?\d+)\s*,\s*(-?\d+)\s*\)\s*,\s*(-?\d+)\s*$"
)


def normalize_class_name(name: str) -> str:
    return re.sub(r"[\s\-]+", "_", name.strip().lower())


def annotation_id(image_id: str, position: int) -> str:
    return f"{image_id}#{position}"


def _fmt(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def _find_image(directory: Path, stem: str) -> Path | None:
    for suffix in IMAGE_SUFFIXES:
        for candidate in (directory / f"{stem}{suffix}", directory / f"{stem}{suffix.upper()}"):
            if candidate.is_file():
                return candidate
    return None


def _make_annotation(
    image: ImageRecord,
    position: int,
    class_name: str,
    coords: tuple[float, float, float, float],
    source: Path,
    line: int | None,
) -> Annotation:
    try:
        bbox = BBox.from_tuple(coords)
    except ValidationError as e:
        raise AnnotationParseError(source, line, f"invalid box {coords}: {e.errors()[0]['msg']}") from e
    if not bbox.within(image.dims):
        raise AnnotationParseError(source, line, f"box {coords} exceeds image {image.width}x{image.height}")
    return Annotation(
        annotation_id=annotation_id(image.image_id, position), image_id=image.image_id, class_name=class_name, bbox=bbox
    )


def _parse_voc(root: Path, errors: list[AnnotationParseError]) -> tuple[list[str], list[ImageRecord], list[Annotation]]:
    ann_dir = root / "Annotations"
    img_dir = root / "JPEGImages"
    if not ann_dir.is_dir():
        raise DataError(f"{ann_dir} is not a directory")
    classes: list[str] = []
    images: list[ImageRecord] = []
    annotations: list[Annotation] = []
    for xml_path in sorted(ann_dir.glob("*.xml")):
        try:
            tree = ET.parse(xml_path)
        except (ET.ParseError, OSError) as e:
            errors.append(AnnotationParseError(xml_path, None, f"unreadable: {e}"))
            continue
        node = tree.getroot()
        stem = xml_path.stem
        filename = node.findtext("filename")
        img_path = img_dir / filename if filename else _find_image(img_dir, stem)
        try:
            width = int(node.findtext("size/width") or 0)
            height = int(node.findtext("size/height") or 0)
            image = ImageRecord(
                image_id=stem, path=str(img_path.relative_to(root)) if img_path else stem, width=width, height=height
            )
        except (ValueError, ValidationError) as e:
            errors.append(AnnotationParseError(xml_path, None, f"bad image size: {e}"))
            continue
        images.append(image)
        position = 0
        for obj in node.iter("object"):
            name = normalize_class_name(obj.findtext("name") or "")
            raw = [obj.findtext(f"bndbox/{k}") for k in ("xmin", "ymin", "xmax", "ymax")]
            try:
                if not name:
                    raise AnnotationParseError(xml_path, None, "object without a class name")
                try:
                    xmin, ymin, xmax, ymax = (float(v) for v in raw)  # type: ignore[arg-type]
                except (TypeError, ValueError):
                    raise AnnotationParseError(xml_path, None, f"incomplete bndbox for {name}: {raw}")
                # 1-based inclusive -> 0-based, exclusive max edge
                ann = _make_annotation(image, position, name, (xmin - 1, ymin - 1, xmax, ymax), xml_path, None)
            except AnnotationParseError as e:
                errors.append(e)
                continue
            if name not in classes:
                classes.append(name)
            annotations.append(ann)
            position += 1
    return sorted(classes), images, annotations


def _parse_nwpu(
    root: Path, errors: list[AnnotationParseError]
) -> tuple[list[str], list[ImageRecord], list[Annotation]]:
    gt_dir = root / "ground truth"
    img_dir = root / "positive image set"
    if not gt_dir.is_dir():
        raise DataError(f"{gt_dir} is not a directory")
    images: list[ImageRecord] = []
    annotations: list[Annotation] = []
    for txt_path in sorted(gt_dir.glob("*.txt")):
        img_path = _find_image(img_dir, txt_path.stem)
        if img_path is None:
            errors.append(AnnotationParseError(txt_path, None, "no matching image"))
            continue
        try:
            with Image.open(img_path) as img:
                width, height = img.size
            lines = txt_path.read_text(encoding="utf-8", errors="replace").splitlines()
        except OSError as e:
            errors.append(AnnotationParseError(txt_path, None, f"unreadable: {e}"))
            continue
        image = ImageRecord(image_id=txt_path.stem, path=str(img_path.relative_to(root)), width=width, height=height)
        images.append(image)
        position = 0
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                annotations.append(parse_nwpu_line(line, image, position, txt_path, lineno))
            except AnnotationParseError as e:
                errors.append(e)
                continue
            position += 1
    return list(NWPU_CLASSES), images, annotations


def parse_nwpu_line(line: str, image: ImageRecord, position: int, source: Path, lineno: int) -> Annotation:
    match = NWPU_LINE.match(line)
    if match is None:
        raise AnnotationParseError(source, lineno, f"malformed record {line.strip()!r}")
    x1, y1, x2, y2, class_id = (int(g) for g in match.groups())
    if not 1 <= class_id <= len(NWPU_CLASSES):
        raise AnnotationParseError(source, lineno, f"unknown class token {class_id}")
    return _make_annotation(image, position, NWPU_CLASSES[class_id - 1], (x1, y1, x2, y2), source, lineno)


def parse_annotations(
    root: Path | str, fmt: str, errors: list[AnnotationParseError] | None = None
) -> DatasetIndex:
    """Read a dataset tree into a validated :class:`DatasetIndex`

    Malformed records are logged and appended to ``errors``; parsing only fails when no valid record remains.
    """
    root = Path(root)
    collected: list[AnnotationParseError] = [] if errors is None else errors
    if fmt == "voc":
        classes, images, annotations = _parse_voc(root, collected)
    elif fmt == "nwpu":
        classes, images, annotations = _parse_nwpu(root, collected)
    elif fmt == "canonical":
        return read_index(root if root.is_file() else root / "index.tsv")[0]
    else:
        raise DataError(f"unknown annotation format {fmt!r}")
    for error in collected:
        logger.warning("skipping annotation record", path=str(error.path), line=error.line, reason=error.reason)
    if not images:
        raise DataError(f"no valid records under {root}")
    logger.info(
        "annotations parsed", root=str(root), images=len(images), objects=len(annotations), errors=len(collected)
    )
    return DatasetIndex(classes=tuple(classes), images=tuple(images), annotations=tuple(annotations))


def format_record(image: ImageRecord, annotations: Iterable[Annotation], masked: Iterable[str] = ()) -> str:
    masked_ids = set(masked)
    tuples = []
    for ann in annotations:
        coords = ",".join(_fmt(v) for v in ann.bbox.as_tuple())
        flag = ",masked" if ann.masked or ann.annotation_id in masked_ids else ""
        tuples.append(f"{ann.class_name}:{coords}{flag}")
    return "\t".join([image.image_id, image.path, str(image.width), str(image.height), ";".join(tuples)])


def format_header(header: Mapping[str, object]) -> list[str]:
    return [f"# {key}={value}" for key, value in header.items()]


def write_records(
    path: Path | str,
    index: DatasetIndex,
    image_ids: Sequence[str] | None = None,
    header: Mapping[str, object] | None = None,
    masked: Iterable[str] = (),
) -> Path:
    """Write canonical records for ``image_ids`` (all images by default), LF-terminated UTF-8"""
    masked_ids = set(masked)
    lines = format_header({"classes": ",".join(index.classes), **(header or {})})
    for image_id in image_ids if image_ids is not None else [img.image_id for img in index.images]:
        image = index.image_by_id[image_id]
        lines.append(format_record(image, index.annotations_by_image[image_id], masked_ids))
    return atomic_write_text(path, "\n".join(lines) + "\n")


def write_index(path: Path | str, index: DatasetIndex, header: Mapping[str, object] | None = None) -> Path:
    return write_records(path, index, header=header)


def read_index(path: Path | str) -> tuple[DatasetIndex, dict[str, str]]:
    """Read a canonical index or manifest, returning the index and its header"""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"index file {path} does not exist")
    header: dict[str, str] = {}
    images: list[ImageRecord] = []
    annotations: list[Annotation] = []
    classes: list[str] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            header[key.strip()] = value.strip()
            continue
        fields = line.split("\t")
        if len(fields) not in (4, 5):
            raise AnnotationParseError(path, lineno, f"expected 4 or 5 tab-separated fields, got {len(fields)}")
        try:
            image = ImageRecord(image_id=fields[0], path=fields[1], width=int(fields[2]), height=int(fields[3]))
        except (ValueError, ValidationError) as e:
            raise AnnotationParseError(path, lineno, f"bad image record: {e}") from e
        images.append(image)
        body = fields[4] if len(fields) == 5 else ""
        for position, token in enumerate(t for t in body.split(";") if t):
            class_name, _, coords = token.partition(":")
            parts = coords.split(",")
            is_masked = len(parts) == 5 and parts[4] == "masked"
            if len(parts) != 4 and not is_masked:
                raise AnnotationParseError(path, lineno, f"bad annotation tuple {token!r}")
            try:
                values = tuple(float(p) for p in parts[:4])
            except ValueError as e:
                raise AnnotationParseError(path, lineno, f"bad coordinates in {token!r}") from e
            ann = _make_annotation(image, position, class_name, values, path, lineno)  # type: ignore[arg-type]
            if is_masked:
                ann = ann.model_copy(update={"masked": True})
            annotations.append(ann)
            if class_name not in classes:
                classes.append(class_name)
    if "classes" in header and header["classes"]:
        declared = header["classes"].split(",")
        classes = declared + [c for c in classes if c not in declared]
    try:
        index = DatasetIndex(classes=tuple(classes), images=tuple(images), annotations=tuple(annotations))
    except ValidationError as e:
        raise DataError(f"{path}: inconsistent index: {e}") from e
    return index, header


def image_root_for(index_path: Path | str, header: Mapping[str, str]) -> Path:
    """Directory the relative image paths of an index resolve against"""
    root = header.get("root")
    return Path(root) if root else Path(index_path).resolve().parent


def write_split(path: Path | str, split: SplitSpec, header: Mapping[str, object] | None = None) -> Path:
    """Write the train/test assignment as sorted ``image_id <TAB> subset`` lines under a ``# key=value`` header"""
    base_train = set(split.base_train_images)
    rows = [(i, "base_train" if i in base_train else "train") for i in split.train_images]
    rows += [(i, "test") for i in split.test_images]
    lines = format_header(
        {
            **(header or {}),
            "base": ",".join(split.classes.base),
            "novel": ",".join(split.classes.novel),
            "train_fraction": split.train_fraction,
            "split_seed": split.seed,
        }
    )
    lines += [f"{image_id}\t{subset}" for image_id, subset in sorted(rows)]
    return atomic_write_text(path, "\n".join(lines) + "\n")


def read_split(path: Path | str) -> tuple[SplitSpec, dict[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"split manifest {path} does not exist")
    header: dict[str, str] = {}
    subsets: dict[str, list[str]] = {"base_train": [], "train": [], "test": []}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            header[key.strip()] = value.strip()
            continue
        image_id, _, subset = line.partition("\t")
        if subset not in subsets:
            raise AnnotationParseError(path, lineno, f"unknown subset {subset!r}, expected one of {sorted(subsets)}")
        subsets[subset].append(image_id)
    try:
        split = SplitSpec(
            classes=ClassSplit(base=tuple(header["base"].split(",")), novel=tuple(header["novel"].split(","))),
            train_images=tuple(sorted(subsets["base_train"] + subsets["train"])),
            test_images=tuple(subsets["test"]),
            base_train_images=tuple(subsets["base_train"]),
            train_fraction=float(header["train_fraction"]),
            seed=int(header["split_seed"]),
        )
    except (KeyError, ValueError, ValidationError) as e:
        raise DataError(f"unreadable split manifest {path}: {e}") from e
    return split, header
