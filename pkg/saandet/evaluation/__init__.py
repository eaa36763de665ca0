from saandet.evaluation.grid import GridCell, GridResult, plan_grid, report_table, run_experiment_grid
from saandet.evaluation.metrics import Match, ScoredBox, compute_ap, compute_iou, match_detections
from saandet.evaluation.render import render_report
from saandet.evaluation.report import ClassReport, EvalReport, evaluate, read_reports, write_reports

__all__ = [
    "ClassReport",
    "EvalReport",
    "GridCell",
    "GridResult",
    "Match",
    "ScoredBox",
    "compute_ap",
    "compute_iou",
    "evaluate",
    "match_detections",
    "plan_grid",
    "read_reports",
    "render_report",
    "report_table",
    "run_experiment_grid",
    "write_reports",
]
