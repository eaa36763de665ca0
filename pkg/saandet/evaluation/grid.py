"""Experiment grids: novel class choice x shots x proportion x method

Each cell trains (or reuses) a base checkpoint, fine-tunes it on the cell's budget and evaluates it. A failing cell
is recorded and the grid moves on.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Sequence, Tuple

import pandas as pd
from pydantic import BaseModel, ConfigDict
from structlog.stdlib import get_logger

from saandet.data.splits import make_split
from saandet.evaluation.report import EvalReport, evaluate, write_reports
from saandet.exceptions import ConfigError, SaanError
from saandet.models.config import FusionMode, RunConfig
from saandet.models.dataset import DatasetIndex, ShotBudget, SplitSpec
from saandet.training.checkpoint import Checkpoint
from saandet.training.phases import TrainingData, finetune_novel, finetune_set_for, method_name, train_base, train_joint
from saandet.utils.io import atomic_write_text
from saandet.utils.seeding import derive_seed

logger = get_logger(__name__)

GridName = Literal["rsod", "nwpu", "proportion", "single"]
GRID_NAMES: Tuple[str, ...] = ("rsod", "nwpu", "proportion", "single")

# method -> (fusion, two-phase)
METHODS: dict[str, tuple[FusionMode, bool]] = {
    "saan": ("gru", True),
    "xcorr": ("xcorr", True),
    "frcn-ft": ("none", True),
    "frcn-joint": ("none", False),
}
NWPU_DENSE_CLASSES = ("storage_tank", "harbor")
CSV_COLUMNS = ["method", "novel_class", "k", "rho", "class", "AP", "AP_11pt", "is_novel", "seed", "config_hash"]


class GridCell(BaseModel):
    model_config = ConfigDict(frozen=True)

    novel_class: str
    k: int
    rho: Optional[int]
    method: str

    @property
    def budget(self) -> ShotBudget:
        return ShotBudget(k=self.k, rho=self.rho)

    @property
    def label(self) -> str:
        return f"{self.novel_class}_{self.method}_k{self.k}_rho{self.budget.rho_label}"


class GridFailure(BaseModel):
    model_config = ConfigDict(frozen=True)

    cell: GridCell
    error: str
    kind: str


@dataclass
class GridResult:
    reports: list[EvalReport] = field(default_factory=list)
    failures: list[GridFailure] = field(default_factory=list)

    def table(self) -> pd.DataFrame:
        return report_table(self.reports)


def protocol_split(index: DatasetIndex, novel: Sequence[str], config: RunConfig) -> SplitSpec:
    return make_split(index, novel, config.data.train_fraction, seed=derive_seed(config.seed, "split"))


def _check_methods(methods: Sequence[str]) -> None:
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigError(f"unknown methods {unknown}, expected some of {sorted(METHODS)}")


def plan_grid(name: str, index: DatasetIndex, config: RunConfig) -> list[GridCell]:
    """Expand a named grid into its cells"""
    exclude = set(config.data.exclude_classes)
    if name == "nwpu" and not exclude:
        exclude = set(NWPU_DENSE_CLASSES)
    candidates = [c for c in index.classes if c not in exclude]

    if name in ("rsod", "nwpu"):
        novels, shots, rhos, methods = candidates, config.eval.shots, (config.budget.rho,), config.eval.methods
    elif name == "proportion":
        novels = list(config.data.novel[:1]) or candidates[:1]
        shots, rhos, methods = config.eval.shots, config.eval.rhos, ("saan",)
    elif name == "single":
        if not config.data.novel:
            raise ConfigError("a single-cell grid needs data.novel")
        novels = [config.data.novel[0]]
        shots, rhos = (config.budget.k,), (config.budget.rho,)
        methods = (method_name(config.fusion, config.train.phase != "joint"),)
    else:
        raise ConfigError(f"unknown grid '{name}', expected one of {GRID_NAMES}")
    _check_methods(methods)

    cells = []
    for novel in novels:
        for method in methods:
            for k in shots:
                # the joint baseline always trains on every base object
                for rho in (None,) if method == "frcn-joint" else rhos:
                    cells.append(GridCell(novel_class=novel, k=k, rho=rho, method=method))
    logger.info("grid planned", grid=name, cells=len(cells), novel=novels)
    return cells


def report_table(reports: Sequence[EvalReport]) -> pd.DataFrame:
    rows = [
        {
            "method": report.method,
            "novel_class": "+".join(report.novel_classes),
            "k": report.k,
            "rho": report.rho,
            "class": item.class_name,
            "AP": item.ap,
            "AP_11pt": item.ap_11pt,
            "is_novel": item.is_novel,
            "seed": report.seed,
            "config_hash": report.config_hash,
        }
        for report in reports
        for item in report.classes
    ]
    return pd.DataFrame(rows, columns=CSV_COLUMNS)


class GridRunner:
    """Runs cells in order, caching one base checkpoint per (novel class, fusion)"""

    def __init__(self, index: DatasetIndex, image_root: Path, config: RunConfig, output_dir: Optional[Path] = None):
        self.index = index
        self.image_root = image_root
        self.config = config
        self.output_dir = output_dir
        self._data: dict[str, TrainingData] = {}
        self._base: dict[tuple[str, str], Checkpoint] = {}

    def _subdir(self, *parts: str) -> Optional[Path]:
        return self.output_dir.joinpath(*parts) if self.output_dir is not None else None

    def data_for(self, novel: str) -> TrainingData:
        if novel not in self._data:
            split = protocol_split(self.index, (novel,), self.config)
            self._data[novel] = TrainingData(self.index, split, self.image_root)
        return self._data[novel]

    def base_for(self, novel: str, config: RunConfig) -> Checkpoint:
        key = (novel, config.fusion)
        if key not in self._base:
            self._base[key] = train_base(self.data_for(novel), config, self._subdir("base", f"{novel}_{config.fusion}"))
        return self._base[key]

    def run_cell(self, cell: GridCell) -> EvalReport:
        fusion, two_phase = METHODS[cell.method]
        config = self.config.model_copy(update={"fusion": fusion})
        data = self.data_for(cell.novel_class)
        finetune_set = finetune_set_for(data, cell.budget, config)
        cell_dir = self._subdir("cells", cell.label)
        if two_phase:
            checkpoint = finetune_novel(self.base_for(cell.novel_class, config), data, finetune_set, config, cell_dir)
        else:
            checkpoint = train_joint(data, finetune_set, config, cell_dir)
        return evaluate(checkpoint, data, finetune_set, config)

    def run(self, cells: Sequence[GridCell]) -> GridResult:
        result = GridResult()
        for position, cell in enumerate(cells):
            logger.info("grid cell started", cell=cell.label, position=position, total=len(cells))
            try:
                result.reports.append(self.run_cell(cell))
            except Exception as e:
                logger.warning(
                    "grid cell failed",
                    cell=cell.label,
                    error=str(e),
                    kind=type(e).__name__,
                    exc_info=not isinstance(e, SaanError),
                )
                result.failures.append(GridFailure(cell=cell, error=str(e), kind=type(e).__name__))
        return result


def write_grid(result: GridResult, output_dir: Path) -> list[Path]:
    paths = [write_reports(output_dir / "reports.jsonl", result.reports)]
    paths.append(atomic_write_text(output_dir / "grid.csv", result.table().to_csv(index=False)))
    if result.failures:
        text = "".join(failure.model_dump_json() + "\n" for failure in result.failures)
        paths.append(atomic_write_text(output_dir / "failures.jsonl", text))
    return paths


def run_experiment_grid(
    index: DatasetIndex,
    image_root: Path | str,
    cells: Sequence[GridCell],
    config: RunConfig,
    output_dir: Optional[Path] = None,
) -> GridResult:
    runner = GridRunner(index, Path(image_root), config, output_dir)
    result = runner.run(cells)
    if output_dir is not None:
        write_grid(result, output_dir)
    logger.info("grid finished", reports=len(result.reports), failures=len(result.failures))
    return result
