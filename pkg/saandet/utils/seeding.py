from __future__ import annotations

import hashlib
import random

import numpy as np
import torch


def derive_seed(root: int, *labels: object) -> int:
    """Derive a subsystem seed from the root seed and a label path

    ``derive_seed(7, "split")`` and ``derive_seed(7, "episode", 12)`` are independent streams, and the same
    inputs always yield the same 31-bit seed.
    """
    key = ":".join([str(root), *(str(label) for label in labels)])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


def seed_everything(seed: int, deterministic: bool = True) -> torch.Generator:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator
