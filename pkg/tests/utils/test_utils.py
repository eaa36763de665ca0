import json
import logging

import pytest
import torch

from saandet.utils.io import atomic_torch_save, atomic_write_text
from saandet.utils.logging import configure_logging
from saandet.utils.seeding import derive_seed, seed_everything


def test_derive_seed_is_stable_and_label_dependent():
    assert derive_seed(7, "split") == derive_seed(7, "split")
    assert derive_seed(7, "split") != derive_seed(7, "episode")
    assert derive_seed(7, "episode", 1) != derive_seed(7, "episode", 2)
    assert derive_seed(7, "split") != derive_seed(8, "split")
    assert 0 <= derive_seed(123456789, "x") < 2**31


def test_seed_everything_returns_seeded_generator():
    first = torch.rand(4, generator=seed_everything(3, deterministic=False))
    second = torch.rand(4, generator=seed_everything(3, deterministic=False))
    assert torch.equal(first, second)


def test_atomic_write_text(tmp_path):
    path = atomic_write_text(tmp_path / "nested" / "out.txt", "a\nb\n")
    assert path.read_bytes() == b"a\nb\n"
    atomic_write_text(path, "replaced\n")
    assert path.read_text() == "replaced\n"
    assert [p.name for p in path.parent.iterdir()] == ["out.txt"]


def test_atomic_torch_save(tmp_path):
    path = atomic_torch_save(tmp_path / "state.pt", {"w": torch.ones(2)})
    assert torch.equal(torch.load(path)["w"], torch.ones(2))


@pytest.fixture
def restore_root_logger():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield root
    for handler in root.handlers:
        if handler not in handlers:
            handler.close()
    root.handlers = handlers
    root.setLevel(level)


def test_configure_logging_sets_level(restore_root_logger):
    configure_logging({"LOGLEVEL": "debug"})
    assert restore_root_logger.level == logging.DEBUG
    assert len(restore_root_logger.handlers) == 1
    assert logging.getLogger("matplotlib").level == logging.INFO


def test_configure_logging_unknown_level_falls_back_to_info(restore_root_logger):
    configure_logging({"LOGLEVEL": "chatty"})
    assert restore_root_logger.level == logging.INFO


def test_configure_logging_writes_json_logfile(tmp_path, restore_root_logger):
    logfile = tmp_path / "logs" / "train.log"
    configure_logging({"LOGLEVEL": "INFO", "LOGFILE": logfile})
    logging.getLogger("saandet.test").info("hello from the run")
    for handler in restore_root_logger.handlers:
        handler.flush()
    record = json.loads(logfile.read_text(encoding="utf-8").splitlines()[-1])
    assert record["event"] == "hello from the run"
    assert record["level"] == "info"
    assert record["logger"] == "saandet.test"
