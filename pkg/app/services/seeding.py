"""BlindQE - Seed Derivation"""
import numpy as np


def derive_seed(*keys: int) -> int:
    """Stable 32-bit seed from a tuple of integers (e.g. run seed, epoch, index)."""
    return int(np.random.SeedSequence([int(key) for key in keys]).generate_state(1)[0])
