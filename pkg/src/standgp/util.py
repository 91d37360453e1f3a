"""Small shared helpers: seeding, quantiles, atomic file writes."""

from __future__ import annotations

import hashlib
import math
import os
import tempfile

import numpy as np

from .errors import DomainError


def derive_rng(seed: int, *path: int) -> np.random.Generator:
    """Generator for a named sub-stream of a root seed.

    Every randomized task in a run identifies itself by a short tuple of
    integers, so that results are reproducible and independent of execution
    order or parallelism.  Stream assignments used by the CLI:
    ``(0,)`` simulate, ``(1, c)`` chain c, ``(2,)`` predict, ``(3, k)``
    holdout scoring for fitted model k.
    """
    if seed < 0:
        raise DomainError("seed must be a nonnegative integer")
    entropy = [int(seed)] + [int(p) for p in path]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def nearest_rank_quantile(values: np.ndarray, p: float, axis: int = -1) -> np.ndarray:
    """Lower nearest-rank empirical quantile.

    The rank is ``ceil(p * N)`` (1-based), clamped to ``[1, N]``; for the
    median of an even-length sample this picks the lower middle value.  A
    small backoff guards against ``p * N`` landing one ulp above an integer.
    """
    if not 0.0 < p < 1.0:
        raise DomainError(f"quantile level must be in (0, 1), got {p}")
    v = np.sort(np.asarray(values), axis=axis)
    n = v.shape[axis]
    if n == 0:
        raise DomainError("cannot take a quantile of an empty sample")
    rank = min(n, max(1, math.ceil(p * n - 1e-9)))
    return np.take(v, rank - 1, axis=axis)


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path: str, text: str) -> None:
    """Write text to ``path`` via a temporary file and rename."""
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
