import json

import pytest

from saandet.evaluation.grid import protocol_split
from saandet.models.dataset import ShotBudget
from saandet.training.checkpoint import load_checkpoint
from saandet.training.phases import (
    TrainingData,
    finetune_novel,
    finetune_set_for,
    method_name,
    train_base,
    train_baseline,
    train_joint,
)


@pytest.mark.parametrize(
    "fusion, two_phase, expected",
    [("gru", True, "saan"), ("xcorr", True, "xcorr"), ("none", True, "frcn-ft"), ("none", False, "frcn-joint")],
)
def test_method_name(fusion, two_phase, expected):
    assert method_name(fusion, two_phase) == expected


@pytest.fixture
def data(synthetic_dataset, fast_config):
    index, root = synthetic_dataset
    return TrainingData(index, protocol_split(index, [index.classes[-1]], fast_config), root)


def test_finetune_set_is_seeded(data, fast_config):
    budget = ShotBudget(k=1, rho=1)
    assert finetune_set_for(data, budget, fast_config) == finetune_set_for(data, budget, fast_config)


def test_base_then_finetune(data, fast_config, tmp_path):
    base = train_base(data, fast_config, tmp_path / "base")
    assert base.meta.phase == "base"
    assert base.meta.method == "saan"
    assert base.model.class_names == ("disk", "square")
    assert base.meta.steps == fast_config.train.steps
    losses = (tmp_path / "base" / "loss_log.jsonl").read_text().splitlines()
    assert len(losses) == fast_config.train.steps
    episodes = [json.loads(line) for line in (tmp_path / "base" / "episodes.jsonl").read_text().splitlines()]
    assert all(len(entry["supports"]) == 2 for entry in episodes)
    assert all(entry["query"] in data.split.base_train_images for entry in episodes)

    finetune_set = finetune_set_for(data, ShotBudget(k=1, rho=1), fast_config)
    tuned = finetune_novel(base, data, finetune_set, fast_config, tmp_path / "finetune")
    assert tuned.meta.phase == "finetune"
    assert tuned.meta.budget == ShotBudget(k=1, rho=1)
    assert tuned.model.class_names == ("disk", "square", "triangle")
    assert tuned.meta.novel_classes == ("triangle",)
    # the phase-1 model is not modified in place
    assert base.model.detector.num_classes == 2

    reloaded = load_checkpoint(tmp_path / "finetune" / "checkpoint")
    assert reloaded.meta == tuned.meta


def test_base_training_is_reproducible(data, fast_config):
    first = train_base(data, fast_config)
    second = train_base(data, fast_config)
    for (name, a), (_, b) in zip(first.model.state_dict().items(), second.model.state_dict().items()):
        assert a.equal(b), name


def test_joint_baseline(data, fast_config, tmp_path):
    checkpoint = train_baseline(data, ShotBudget(k=1, rho=1), "joint", fast_config, tmp_path)
    assert checkpoint.meta.method == "frcn-joint"
    assert checkpoint.meta.fusion == "none"
    assert checkpoint.meta.budget.rho is None
    assert checkpoint.model.class_names == ("disk", "square", "triangle")


def test_joint_with_fusion(data, fast_config):
    finetune_set = finetune_set_for(data, ShotBudget(k=1, rho=1), fast_config)
    checkpoint = train_joint(data, finetune_set, fast_config)
    assert checkpoint.meta.phase == "joint"
    assert checkpoint.model.relation is not None
