"""Self-adaptive attention between RoI features and per-class support features

Each support image is encoded by the detector's own backbone and RoI head into a ``d``-vector. A RoI feature is
the initial hidden state of a gated recurrent cell that then consumes the support vectors one class at a time in
ascending class id; the final hidden state replaces the RoI feature in front of the predict head.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Literal, NamedTuple, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from structlog.stdlib import get_logger
from torch import nn

from saandet.data.loader import QueryTargets
from saandet.detector.core import FeatureHook, TrainingOutputs, TwoStageDetector
from saandet.detector.structures import Detection
from saandet.exceptions import DataError, ShapeError
from saandet.geometry import SupportImage
from saandet.models.config import DetectorConfig, FusionMode

logger = get_logger(__name__)

BANK_ORDER = "ascending-class-id"


class GRUWeights(NamedTuple):
    w_reset: torch.Tensor  # (d, 2d)
    w_update: torch.Tensor  # (d, 2d)
    w_input: torch.Tensor  # (d, d)
    w_recurrent: torch.Tensor  # (d, d)

    @property
    def dim(self) -> int:
        return int(self.w_input.shape[0])


@dataclass(frozen=True)
class GRUState:
    hidden: torch.Tensor
    reset: Optional[torch.Tensor] = None
    update: Optional[torch.Tensor] = None
    candidate: Optional[torch.Tensor] = None


def _check_weights(weights: GRUWeights) -> int:
    d = weights.dim
    expected = {"w_reset": (d, 2 * d), "w_update": (d, 2 * d), "w_input": (d, d), "w_recurrent": (d, d)}
    for name, shape in expected.items():
        actual = tuple(getattr(weights, name).shape)
        if actual != shape:
            raise ShapeError(f"{name} has shape {actual}, expected {shape}")
    return d


def relation_gru_cell(x: torch.Tensor, h_prev: GRUState | torch.Tensor, weights: GRUWeights) -> GRUState:
    """One step of the relation cell

    ``R = sigmoid(Wr [x, h])``, ``Z = sigmoid(Wz [x, h])``, ``H' = tanh(W x + U (R * h))`` and
    ``H = Z * h + (1 - Z) * H'``: the update gate weighs the previous state, not the candidate.

    ``x`` is ``(d,)`` or ``(N, d)`` and broadcasts against ``h_prev``.
    """
    h = h_prev.hidden if isinstance(h_prev, GRUState) else h_prev
    d = _check_weights(weights)
    if x.shape[-1] != d or h.shape[-1] != d:
        raise ShapeError(f"cell of width {d} got input width {x.shape[-1]} and state width {h.shape[-1]}")
    x = x.expand_as(h) if x.dim() < h.dim() else x
    h = h.expand_as(x) if h.dim() < x.dim() else h
    xh = torch.cat([x, h], dim=-1)
    reset = torch.sigmoid(xh @ weights.w_reset.T)
    update = torch.sigmoid(xh @ weights.w_update.T)
    candidate = torch.tanh(x @ weights.w_input.T + (reset * h) @ weights.w_recurrent.T)
    hidden = update * h + (1 - update) * candidate
    return GRUState(hidden=hidden, reset=reset, update=update, candidate=candidate)


class RelationGRU(nn.Module):
    """The four bias-free matrices of the relation cell"""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.w_reset = nn.Parameter(torch.empty(dim, 2 * dim))
        self.w_update = nn.Parameter(torch.empty(dim, 2 * dim))
        self.w_input = nn.Parameter(torch.empty(dim, dim))
        self.w_recurrent = nn.Parameter(torch.empty(dim, dim))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        gate_bound = 1.0 / math.sqrt(2 * self.dim)
        bound = 1.0 / math.sqrt(self.dim)
        nn.init.uniform_(self.w_reset, -gate_bound, gate_bound)
        nn.init.uniform_(self.w_update, -gate_bound, gate_bound)
        nn.init.uniform_(self.w_input, -bound, bound)
        nn.init.uniform_(self.w_recurrent, -bound, bound)

    @property
    def weights(self) -> GRUWeights:
        return GRUWeights(self.w_reset, self.w_update, self.w_input, self.w_recurrent)

    def forward(self, roi: torch.Tensor, bank: "SupportFeatureBank") -> torch.Tensor:
        return fuse_roi_with_supports(roi, bank, self.weights)


@dataclass(frozen=True)
class SupportFeatureBank:
    """One ``d``-vector per active class, iterated in ascending class id"""

    class_ids: Tuple[int, ...]
    vectors: torch.Tensor  # (C, d), row i belongs to class_ids[i]
    annotation_ids: Tuple[Tuple[str, ...], ...] = ()
    reduction: Literal["single", "mean"] = "single"
    order: str = BANK_ORDER

    def __post_init__(self) -> None:
        if self.vectors.dim() != 2 or self.vectors.shape[0] != len(self.class_ids):
            raise ShapeError(f"{len(self.class_ids)} classes for support vectors of shape {tuple(self.vectors.shape)}")
        if list(self.class_ids) != sorted(set(self.class_ids)):
            raise ShapeError(f"class ids {self.class_ids} are not strictly ascending")

    def __len__(self) -> int:
        return len(self.class_ids)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def vector(self, class_id: int) -> torch.Tensor:
        return self.vectors[self.class_ids.index(class_id)]


def fuse_roi_with_supports(roi: torch.Tensor, bank: SupportFeatureBank, weights: GRUWeights) -> torch.Tensor:
    """Run the relation cell over the bank with the RoI feature as initial state; ``roi`` is ``(d,)`` or ``(N, d)``"""
    if len(bank) == 0:
        raise ShapeError("cannot fuse with an empty support bank")
    if bank.dim != roi.shape[-1]:
        raise ShapeError(f"support width {bank.dim} differs from RoI width {roi.shape[-1]}")
    state = GRUState(hidden=roi)
    for vector in bank.vectors:
        state = relation_gru_cell(vector, state, weights)
    return state.hidden


def depthwise_cross_correlation(roi: torch.Tensor, support: torch.Tensor) -> torch.Tensor:
    if roi.shape[-1] != support.shape[-1]:
        raise ShapeError(f"cannot correlate widths {roi.shape[-1]} and {support.shape[-1]}")
    return roi * support


class SupportEncoder(nn.Module):
    """Support branch built from the detector's own backbone and RoI head

    It registers no parameters of its own: every parameter is the very tensor the detector trains.
    """

    def __init__(self, detector: TwoStageDetector):
        super().__init__()
        self.backbone = detector.backbone
        self.roi_head = detector.roi_head
        self.pooled_size = detector.config.roi_output_size

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        if pixels.dim() == 3:
            pixels = pixels.unsqueeze(0)
        features = self.backbone(pixels)
        pooled = F.adaptive_avg_pool2d(features, self.pooled_size)
        return self.roi_head(pooled)


def support_encode(
    encoder: SupportEncoder,
    supports: Sequence[SupportImage],
    class_ids: dict[str, int],
    active_classes: Sequence[str],
) -> SupportFeatureBank:
    """Encode support crops into a bank holding the mean vector of each active class"""
    grouped: dict[str, list[int]] = defaultdict(list)
    for i, support in enumerate(supports):
        if support.class_name not in class_ids:
            raise DataError(f"support of unknown class '{support.class_name}'")
        grouped[support.class_name].append(i)
    missing = [c for c in active_classes if not grouped.get(c)]
    if missing:
        raise DataError(f"no support image for classes {missing}")
    ordered = sorted(active_classes, key=lambda c: class_ids[c])
    encoded = encoder(torch.stack([s.pixels for s in supports]))
    vectors = torch.stack([encoded[grouped[c]].mean(dim=0) for c in ordered])
    return SupportFeatureBank(
        class_ids=tuple(class_ids[c] for c in ordered),
        vectors=vectors,
        annotation_ids=tuple(tuple(supports[i].annotation_id for i in grouped[c]) for c in ordered),
        reduction="mean" if any(len(grouped[c]) > 1 for c in ordered) else "single",
    )


class FewShotDetector(nn.Module):
    """Two-stage detector with a support-driven fusion step between the RoI head and the predict head

    ``fusion`` selects the relation cell (``gru``), the elementwise-product baseline averaged over classes
    (``xcorr``) or no fusion at all (``none``).
    """

    def __init__(self, config: DetectorConfig, class_names: Sequence[str], fusion: FusionMode = "gru"):
        super().__init__()
        self.detector = TwoStageDetector(config, len(class_names))
        self.class_names: Tuple[str, ...] = tuple(class_names)
        self.fusion = fusion
        self.relation: Optional[RelationGRU] = RelationGRU(self.detector.feature_dim) if fusion == "gru" else None

    @property
    def class_ids(self) -> dict[str, int]:
        return {name: i + 1 for i, name in enumerate(self.class_names)}

    @property
    def uses_supports(self) -> bool:
        return self.fusion != "none"

    @property
    def support_encoder(self) -> SupportEncoder:
        return SupportEncoder(self.detector)

    def add_classes(self, class_names: Sequence[str], generator: torch.Generator | None = None) -> None:
        new = [c for c in class_names if c not in self.class_names]
        if not new:
            raise ShapeError("no new classes to add")
        self.detector.expand_classes(len(self.class_names) + len(new), generator)
        self.class_names = self.class_names + tuple(new)

    def encode_supports(self, supports: Sequence[SupportImage]) -> SupportFeatureBank:
        return support_encode(self.support_encoder, supports, self.class_ids, self.class_names)

    def fusion_hook(self, bank: SupportFeatureBank | None) -> FeatureHook | None:
        if self.fusion == "none":
            return None
        if bank is None:
            raise DataError(f"fusion mode '{self.fusion}' needs a support bank")
        if self.fusion == "gru":
            relation = self.relation
            assert relation is not None
            return lambda z: relation(z, bank)
        return lambda z: torch.stack([depthwise_cross_correlation(z, v) for v in bank.vectors]).mean(dim=0)

    def forward_train(
        self,
        image: torch.Tensor,
        targets: QueryTargets,
        supports: Sequence[SupportImage] = (),
        generator: torch.Generator | None = None,
    ) -> TrainingOutputs:
        bank = self.encode_supports(supports) if self.uses_supports else None
        return self.detector.forward_train(
            image,
            targets.boxes,
            targets.labels,
            targets.ignore_boxes,
            fuse=self.fusion_hook(bank),
            generator=generator,
        )

    @torch.no_grad()
    def detect(self, image: torch.Tensor, bank: SupportFeatureBank | None = None) -> list[Detection]:
        return self.detector.detect(image, fuse=self.fusion_hook(bank))
