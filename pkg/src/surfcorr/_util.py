"""Small shared helpers: seeded generators and atomic file output."""

import os
import tempfile
import zlib
from contextlib import contextmanager

import numpy as np


def stage_rng(seed, label):
    """Return a generator for one named stage of a seeded run.

    Stages draw from independent streams, so adding randomness to one stage
    never shifts the numbers another stage sees.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    key = zlib.crc32(label.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), key]))


@contextmanager
def atomic_write(path, mode="wb"):
    """Write to a sibling temp file and rename over ``path`` on success."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise
