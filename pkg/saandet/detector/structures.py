from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class Proposals:
    boxes: torch.Tensor  # (N, 4), clipped to the image
    scores: torch.Tensor  # (N,) objectness in [0, 1]

    def __len__(self) -> int:
        return int(self.boxes.shape[0])


@dataclass(frozen=True)
class StageOutputs:
    """Sampled predictions of one detector stage paired with their training targets

    ``labels`` of ``-1`` mark samples left out of the loss. For the proposal stage ``logits`` is ``(N,)`` objectness
    and labels are ``0``/``1``; for the RoI stage ``logits`` is ``(N, K + 1)`` and labels are class ids with 0 as
    background. ``deltas`` and ``regression_targets`` cover the positive samples only.
    """

    logits: torch.Tensor
    labels: torch.Tensor
    deltas: torch.Tensor
    regression_targets: torch.Tensor

    @property
    def num_positive(self) -> int:
        return int(self.deltas.shape[0])


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: tuple[float, float, float, float]
