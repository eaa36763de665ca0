from saandet.utils.io import atomic_write_bytes, atomic_write_text
from saandet.utils.seeding import derive_seed, seed_everything

__all__ = ["atomic_write_bytes", "atomic_write_text", "derive_seed", "seed_everything"]
