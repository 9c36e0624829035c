"""Named sub-streams of randomness derived from one master seed.

Every random choice in the pipeline (splitting, parameter init, epoch
shuffling, random-baseline picks, synthetic data) draws from its own
stream so components can be re-seeded independently without perturbing
each other.
"""

import hashlib


def derive_seed(seed: int, stream: str) -> int:
    """Stable 63-bit sub-seed for a named randomness stream."""
    digest = hashlib.sha256(f"{seed}:{stream}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1
