from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib import colormaps  # noqa: E402
from PIL import Image, ImageDraw  # noqa: E402
from structlog.stdlib import get_logger  # noqa: E402

from saandet.evaluation.grid import report_table  # noqa: E402
from saandet.evaluation.report import DetectionRecord, EvalReport  # noqa: E402
from saandet.exceptions import DataError  # noqa: E402
from saandet.models.dataset import DatasetIndex  # noqa: E402
from saandet.utils.io import atomic_write_text  # noqa: E402

logger = get_logger(__name__)

OVERLAY_SCORE_THRESHOLD = 0.3


def _slug(value: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", value)


def histogram_data(reports: Sequence[EvalReport]) -> dict[str, list[dict[str, object]]]:
    """Bar list per novel class: one bar per (method, rho, k) holding that report's AP of the class"""
    data: dict[str, list[dict[str, object]]] = {}
    for report in reports:
        for item in report.classes:
            if not item.is_novel:
                continue
            data.setdefault(item.class_name, []).append(
                {"method": report.method, "rho": report.rho, "k": report.k, "ap": item.ap}
            )
    return data


def render_histogram(novel_class: str, bars: list[dict[str, object]], out_dir: Path) -> Path:
    shots = sorted({int(bar["k"]) for bar in bars if bar["k"] is not None})  # type: ignore[call-overload]
    series: list[tuple[object, object]] = []
    for bar in bars:
        key = (bar["method"], bar["rho"])
        if key not in series:
            series.append(key)
    width = 0.8 / max(len(series), 1)
    fig, ax = plt.subplots(figsize=(max(6.0, 1.2 * len(shots) * max(len(series), 1) * 0.5), 4.5))
    positions = np.arange(len(shots))
    for s, (method, rho) in enumerate(series):
        heights = []
        for k in shots:
            match = [b for b in bars if b["method"] == method and b["rho"] == rho and b["k"] == k]
            heights.append(float(match[0]["ap"] or 0.0) if match else 0.0)  # type: ignore[arg-type]
        label = str(method) if rho is None or len({r for _, r in series}) == 1 else f"{method} (rho={rho})"
        ax.bar(positions + (s - (len(series) - 1) / 2) * width, heights, width, label=label)
    ax.set_xticks(positions, [f"{k}-shot" for k in shots])
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("AP")
    ax.set_title(f"novel class: {novel_class}")
    ax.legend(loc="upper left", fontsize="small")
    ax.grid(True, axis="y", alpha=0.3)
    path = out_dir / f"histogram_{_slug(novel_class)}.png"
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    atomic_write_text(
        path.with_suffix(".json"), json.dumps({"novel_class": novel_class, "bars": bars}, indent=2) + "\n"
    )
    return path


def draw_detections(image: Image.Image, detections: Sequence[DetectionRecord], classes: Sequence[str]) -> Image.Image:
    """Copy of ``image`` with one labelled rectangle per detection"""
    canvas = image.convert("RGB")
    if not detections:
        return canvas
    palette = colormaps["tab10"]
    draw = ImageDraw.Draw(canvas)
    for det in detections:
        rgba = palette(classes.index(det.class_name) % 10 if det.class_name in classes else 0)
        color = tuple(int(round(255 * c)) for c in rgba[:3])
        x1, y1, x2, y2 = det.box
        draw.rectangle((x1, y1, x2, y2), outline=color, width=2)
        draw.text((x1 + 2, max(0.0, y1 - 11)), f"{det.class_name} {det.score:.2f}", fill=color)
    return canvas


def render_overlays(
    reports: Sequence[EvalReport],
    index: DatasetIndex,
    image_root: Path,
    out_dir: Path,
    score_threshold: float = OVERLAY_SCORE_THRESHOLD,
) -> list[Path]:
    """One overlay per (image, method) under a directory per novel class, shot and proportion"""
    paths = []
    for report in reports:
        cell_dir = out_dir / "overlays" / _slug(f"{report.split_id}_k{report.k}_rho{report.rho}")
        for image_id, detections in sorted(report.detections.items()):
            record = index.image_by_id.get(image_id)
            source = image_root / record.path if record is not None else None
            if source is None or not source.is_file():
                logger.warning("image missing, overlay skipped", image=image_id, method=report.method)
                continue
            kept = [d for d in detections if d.score >= score_threshold]
            with Image.open(source) as img:
                overlay = draw_detections(img, kept, index.classes)
            cell_dir.mkdir(parents=True, exist_ok=True)
            path = cell_dir / f"overlay_{_slug(image_id)}_{_slug(report.method)}.png"
            overlay.save(path, format="PNG")
            paths.append(path)
    return paths


def render_tables(reports: Sequence[EvalReport], out_dir: Path) -> Path:
    table = report_table(reports)
    novel = table[table["is_novel"].astype(bool)].fillna({"rho": "-"})
    if novel.empty:
        text = "no novel-class results\n"
    else:
        pivot = novel.pivot_table(index=["novel_class", "method", "rho"], columns="k", values="AP", aggfunc="first")
        text = pivot.to_string(float_format=lambda v: f"{100 * v:.2f}") + "\n"
    return atomic_write_text(out_dir / "novel_ap.txt", text)


def render_report(
    reports: Sequence[EvalReport],
    out_dir: Path | str,
    index: Optional[DatasetIndex] = None,
    image_root: Optional[Path | str] = None,
) -> list[Path]:
    """Histograms, the novel AP table and, when the dataset is given, detection overlays"""
    if not reports:
        raise DataError("nothing to render: no reports")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [render_histogram(name, bars, out_dir) for name, bars in sorted(histogram_data(reports).items())]
    paths.append(render_tables(reports, out_dir))
    if index is not None and image_root is not None:
        paths.extend(render_overlays(reports, index, Path(image_root), out_dir))
    logger.info("report rendered", out_dir=str(out_dir), files=len(paths))
    return paths
