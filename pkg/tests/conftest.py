import pytest

from saandet.data.synthetic import SyntheticConfig, generate_synthetic_dataset
from saandet.models.config import DetectorConfig, RunConfig


@pytest.fixture
def tiny_detector_config():
    return DetectorConfig(
        size="tiny",
        stride=8,
        channels=(8, 16, 16),
        anchor_sizes=(16, 32),
        representation_sizes=(32,),
        pre_nms_top_n=200,
        max_proposals=40,
        rpn_batch_size=64,
        roi_batch_size=32,
    )


@pytest.fixture
def fast_config(tiny_detector_config):
    return RunConfig.model_validate(
        {
            "detector": tiny_detector_config.model_dump(),
            "support": {"size": 32},
            "train": {"steps": 2, "log_every": 1},
            "budget": {"k": 2, "rho": 1},
            "eval": {"keep_detections": 2},
            "seed": 3,
        }
    )


@pytest.fixture(scope="session")
def synthetic_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    config = SyntheticConfig(classes=3, images=30, image_size=64, min_size=12, max_size=22, max_objects=3, seed=1)
    index = generate_synthetic_dataset(config, root)
    return index, root
