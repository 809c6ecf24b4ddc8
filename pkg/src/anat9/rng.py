"""Counter-based random streams keyed by (seed, case id, operation id)."""
from __future__ import annotations

import numpy as np

# operation ids; new ops append, existing values never change
OP_SCENE = 1
OP_PERTURB = 2
OP_RIGID = 3
OP_CROP = 4
OP_ERASE = 5
OP_INIT = 6


def make_rng(seed: int, case: int = 0, op: int = 0) -> np.random.Generator:
    """Independent Philox stream for one (seed, case, op) triple.

    Streams do not depend on call order, so cases can be processed in any
    order or in parallel with identical results.
    """
    if seed < 0 or case < 0 or op < 0:
        raise ValueError("seed, case and op must be non-negative")
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), int(case), int(op)])
    return np.random.Generator(np.random.Philox(ss))
