"""Helper functions."""
import json
import math
from typing import Iterable, List, Optional

import numpy as np
from cryptography.hazmat.backends import default_backend
from cryptography.hazmat.primitives import hashes


def make_rng(seed: int) -> np.random.Generator:
    """Return a PCG64 generator for a 64-bit seed."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, count: int) -> List[np.random.Generator]:
    """Return `count` independent PCG64 streams derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.Generator(np.random.PCG64(child)) for child in children]


def fmean(values: Iterable[float]) -> Optional[float]:
    """Return the compensated mean of the values, or None if there are none."""
    values = list(values)
    if not values:
        return None
    return math.fsum(values) / len(values)


def canonical_json(payload: dict) -> str:
    """Serialize a dict with sorted keys and no whitespace."""
    return json.dumps(payload, sort_keys=True, separators=(',', ':'))


def fingerprint(payload: dict, length: int = 16) -> str:
    """Return a truncated SHA-256 hex digest of the canonical JSON form."""
    digest = hashes.Hash(hashes.SHA256(), backend=default_backend())
    digest.update(canonical_json(payload).encode('utf-8'))
    return digest.finalize().hex()[:length]
