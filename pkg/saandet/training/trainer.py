from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable, Optional

import torch
from pyee.base import EventEmitter
from structlog.stdlib import get_logger

from saandet.data.loader import EpisodeBatchItem
from saandet.exceptions import RuntimeFailure
from saandet.saan import FewShotDetector
from saandet.training.losses import LossRecord, LossTerms, compute_losses
from saandet.utils.io import atomic_torch_save, atomic_write_text

logger = get_logger(__name__)


class LossLog:
    """Collects one JSON line per step and writes the log atomically when training ends"""

    def __init__(self, path: Path | None, context: dict[str, Any]):
        self.path = path
        self.context = context
        self.records: list[LossRecord] = []

    def on_step(self, record: LossRecord, **_: Any) -> None:
        self.records.append(record)

    def lines(self) -> list[str]:
        return [json.dumps({**record.model_dump(), **self.context}, sort_keys=True) for record in self.records]

    def on_end(self, **_: Any) -> None:
        if self.path is not None:
            atomic_write_text(self.path, "".join(line + "\n" for line in self.lines()))


class EpisodeLog:
    """Which query image and which support annotations every step consumed"""

    def __init__(self, path: Path | None):
        self.path = path
        self.entries: list[dict[str, Any]] = []

    def on_step(self, record: LossRecord, batch: list[EpisodeBatchItem], **_: Any) -> None:
        for item in batch:
            self.entries.append(
                {
                    "step": record.step,
                    "query": item.image_id,
                    "supports": [s.annotation_id for s in item.supports],
                }
            )

    def on_end(self, **_: Any) -> None:
        if self.path is not None:
            atomic_write_text(self.path, "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.entries))


class Trainer:
    """Single-writer SGD loop over a stream of episode batches

    Emits ``step`` after every optimizer step with the :class:`LossRecord` and the batch, and ``end`` once the
    stream is exhausted or a step fails, so listeners persist whatever was recorded before a failure.
    """

    def __init__(
        self,
        model: FewShotDetector,
        lr: float,
        steps: int,
        momentum: float = 0.9,
        weight_decay: float = 1e-4,
        milestones: Iterable[float] = (0.75,),
        gamma: float = 0.1,
        warmup_steps: int = 0,
        grad_clip: Optional[float] = 10.0,
        log_every: int = 20,
        generator: torch.Generator | None = None,
        snapshot_dir: Path | None = None,
    ):
        self.model = model
        self.steps = steps
        self.grad_clip = grad_clip
        self.log_every = log_every
        self.generator = generator
        self.snapshot_dir = snapshot_dir
        self.events = EventEmitter()
        params = [p for p in model.parameters() if p.requires_grad]
        self.optimizer = torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
        self.milestones = sorted({max(1, int(m * steps)) for m in milestones})
        self.gamma = gamma
        self.warmup_steps = warmup_steps
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(self.optimizer, lambda step: self.lr_factor(step))

    def lr_factor(self, step: int) -> float:
        """Linear warm-up over the first ``warmup_steps`` steps, then a step decay by ``gamma`` at every milestone"""
        factor = self.gamma ** sum(1 for m in self.milestones if m <= step)
        if step < self.warmup_steps:
            factor *= (step + 1) / self.warmup_steps
        return factor

    def attach(self, listener: Any) -> None:
        for event in ("step", "end"):
            handler = getattr(listener, f"on_{event}", None)
            if handler is not None:
                self.events.on(event, handler)

    def batch_losses(self, batch: list[EpisodeBatchItem]) -> LossTerms:
        terms = []
        for item in batch:
            outputs = self.model.forward_train(item.image, item.targets, item.supports, self.generator)
            terms.append(compute_losses(outputs.rpn, outputs.roi))
        return LossTerms.mean(terms)

    def _snapshot(self, step: int, terms: LossTerms, batch: list[EpisodeBatchItem]) -> None:
        if self.snapshot_dir is None:
            return
        atomic_torch_save(self.snapshot_dir / "nan_snapshot.pt", self.model.state_dict())
        payload = {"step": step, "losses": terms.as_floats(), "queries": [item.image_id for item in batch]}
        atomic_write_text(self.snapshot_dir / "nan_snapshot.json", json.dumps(payload, indent=2) + "\n")

    def fit(self, batches: Iterable[list[EpisodeBatchItem]]) -> list[LossRecord]:
        self.model.train()
        records: list[LossRecord] = []
        try:
            for step, batch in enumerate(batches):
                if step >= self.steps:
                    break
                terms = self.batch_losses(batch)
                if not terms.is_finite():
                    self._snapshot(step, terms, batch)
                    logger.error("non-finite loss", step=step, **terms.as_floats())
                    raise RuntimeFailure(f"non-finite loss at step {step}: {terms.as_floats()}")
                self.optimizer.zero_grad(set_to_none=True)
                terms.total.backward()
                if self.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.grad_clip)
                self.optimizer.step()
                self.scheduler.step()
                record = terms.to_record(step)
                records.append(record)
                self.events.emit("step", record=record, batch=batch)
                if step % self.log_every == 0 or step == self.steps - 1:
                    logger.info("training step", step=step, total=round(record.total, 5), lr=self.current_lr)
        finally:
            self.events.emit("end", records=records)
        return records

    @property
    def current_lr(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])
