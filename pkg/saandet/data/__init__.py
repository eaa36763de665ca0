from saandet.data.episodes import build_episode, build_support_pool, finetune_pool, phase_one_pool
from saandet.data.formats import parse_annotations, read_index, write_index, write_records
from saandet.data.splits import make_split, sample_finetune_set
from saandet.data.synthetic import SyntheticConfig, generate_synthetic_dataset

__all__ = [
    "SyntheticConfig",
    "build_episode",
    "build_support_pool",
    "finetune_pool",
    "generate_synthetic_dataset",
    "make_split",
    "parse_annotations",
    "phase_one_pool",
    "read_index",
    "sample_finetune_set",
    "write_index",
    "write_records",
]
