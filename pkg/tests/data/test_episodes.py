import pytest

from saandet.data.episodes import build_episode, build_support_pool, finetune_pool, phase_one_pool
from saandet.data.splits import make_split, sample_finetune_set
from saandet.exceptions import DataError
from saandet.models.dataset import ShotBudget
from tests.fake_data import one_object_per_image

CLASSES = ("aircraft", "oiltank", "overpass", "playground")


@pytest.fixture
def index():
    return one_object_per_image(CLASSES, per_class=6)


@pytest.fixture
def split(index):
    return make_split(index, ["playground"], train_fraction=0.9, seed=0)


def test_one_support_per_active_class(index, split):
    pool = build_support_pool(index, [a.annotation_id for a in index.annotations])
    episode = build_episode(split, "finetune", "aircraft_00", pool, seed=1, index=index)
    assert episode.active_classes == CLASSES
    assert len(episode.supports) == 4
    assert [s.class_name for s in episode.supports] == list(CLASSES)
    for ref in episode.supports:
        assert index.annotation_by_id[ref.annotation_id].class_name == ref.class_name


def test_base_phase_uses_base_classes(index, split):
    episode = build_episode(split, "base", "aircraft_00", phase_one_pool(index, split), seed=1, index=index)
    assert episode.active_classes == ("aircraft", "oiltank", "overpass")
    assert len(episode.supports) == 3


def test_single_candidate_is_chosen(index, split):
    pool = {"aircraft": ("aircraft_03#0",), "oiltank": ("oiltank_01#0",), "overpass": ("overpass_02#0",)}
    episode = build_episode(split, "base", "oiltank_00", pool, seed=5, index=index)
    assert [s.annotation_id for s in episode.supports] == ["aircraft_03#0", "oiltank_01#0", "overpass_02#0"]


def test_episode_is_deterministic(index, split):
    pool = phase_one_pool(index, split)
    first = build_episode(split, "base", "aircraft_00", pool, seed=11, index=index)
    assert build_episode(split, "base", "aircraft_00", pool, seed=11, index=index) == first


def test_empty_pool(index, split):
    pool = {"aircraft": ("aircraft_03#0",), "oiltank": ()}
    with pytest.raises(DataError):
        build_episode(split, "base", "aircraft_00", pool, seed=0, index=index)


def test_phase_one_pool_excludes_novel(index, split):
    pool = phase_one_pool(index, split)
    assert set(pool) <= set(split.classes.base)
    for ids in pool.values():
        assert list(ids) == sorted(ids)


def test_finetune_pool_is_limited_to_active_objects(index, split):
    finetune_set = sample_finetune_set(index, split, ShotBudget(k=2, rho=1), seed=3)
    pool = finetune_pool(index, finetune_set)
    assert len(pool["playground"]) == 2
    assert set(pool["playground"]) <= set(finetune_set.active)


def test_finetune_pool_borrows_base_supports_when_rho_is_zero(index, split):
    finetune_set = sample_finetune_set(index, split, ShotBudget(k=1, rho=0), seed=3)
    assert set(finetune_pool(index, finetune_set)) == {"playground"}
    pool = finetune_pool(index, finetune_set, split)
    assert set(pool) == set(CLASSES)
    assert pool["aircraft"] == phase_one_pool(index, split)["aircraft"]
