from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator

from saandet.detector.structures import StageOutputs

SMOOTH_L1_BETA = 1.0


class LossRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    step: int = Field(ge=0)
    rpn_cls: float = Field(ge=0)
    rpn_reg: float = Field(ge=0)
    roi_cls: float = Field(ge=0)
    roi_reg: float = Field(ge=0)
    total: float = Field(ge=0)

    @model_validator(mode="after")
    def _check_total(self) -> "LossRecord":
        parts = self.rpn_cls + self.rpn_reg + self.roi_cls + self.roi_reg
        if not math.isclose(parts, self.total, rel_tol=1e-5, abs_tol=1e-6):
            raise ValueError(f"total {self.total} is not the sum of its components {parts}")
        return self


@dataclass(frozen=True)
class LossTerms:
    rpn_cls: torch.Tensor
    rpn_reg: torch.Tensor
    roi_cls: torch.Tensor
    roi_reg: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.rpn_cls + self.rpn_reg + self.roi_cls + self.roi_reg

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.total).item())

    def as_floats(self) -> dict[str, float]:
        return {
            "rpn_cls": float(self.rpn_cls),
            "rpn_reg": float(self.rpn_reg),
            "roi_cls": float(self.roi_cls),
            "roi_reg": float(self.roi_reg),
        }

    def to_record(self, step: int) -> LossRecord:
        values = self.as_floats()
        # summing the rounded floats keeps the record's total consistent with its parts
        return LossRecord(step=step, total=sum(values.values()), **values)

    @classmethod
    def mean(cls, terms: Iterable["LossTerms"]) -> "LossTerms":
        items = list(terms)
        return cls(
            rpn_cls=torch.stack([t.rpn_cls for t in items]).mean(),
            rpn_reg=torch.stack([t.rpn_reg for t in items]).mean(),
            roi_cls=torch.stack([t.roi_cls for t in items]).mean(),
            roi_reg=torch.stack([t.roi_reg for t in items]).mean(),
        )


def classification_loss(outputs: StageOutputs) -> torch.Tensor:
    """Binary cross-entropy for objectness logits, cross-entropy for class logits; ``-1`` labels are skipped"""
    valid = outputs.labels >= 0
    if not bool(valid.any()):
        return outputs.logits.sum() * 0.0
    logits, labels = outputs.logits[valid], outputs.labels[valid]
    if logits.dim() == 1:
        return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))
    return F.cross_entropy(logits, labels)


def regression_loss(outputs: StageOutputs) -> torch.Tensor:
    """Smooth-L1 summed over the coordinates of the positive samples, divided by their number"""
    if outputs.num_positive == 0:
        return outputs.deltas.sum() * 0.0
    loss = F.smooth_l1_loss(outputs.deltas, outputs.regression_targets, beta=SMOOTH_L1_BETA, reduction="sum")
    return loss / outputs.num_positive


def compute_losses(rpn: StageOutputs, roi: StageOutputs) -> LossTerms:
    return LossTerms(
        rpn_cls=classification_loss(rpn),
        rpn_reg=regression_loss(rpn),
        roi_cls=classification_loss(roi),
        roi_reg=regression_loss(roi),
    )
