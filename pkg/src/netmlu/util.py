"""Small shared helpers: path-length comparison, seeding, atomic file output."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

import numpy as np

# Relative tolerance for "same shortest-path length" decisions.  Path lengths
# are sums of at most N edge weights, so accumulated double-precision error is
# far below this; genuinely distinct path lengths on the file formats we read
# (integer or coarse real weights) differ by far more.
DIST_RTOL = 1e-12


def dist_close(a: float, b: float) -> bool:
    return abs(a - b) <= DIST_RTOL * max(1.0, abs(a), abs(b))


# Named sub-stream indices off a master seed.  Keeping the mapping fixed is
# what makes whole studies reproducible from one integer.
STREAM_TRAIN = 0
STREAM_VALIDATE = 1
STREAM_TEST = 2
STREAM_VARIATIONS = 3
STREAM_TRIVIALITY = 4
_NUM_STREAMS = 5

SPLIT_STREAMS = {
    "train": STREAM_TRAIN,
    "validate": STREAM_VALIDATE,
    "test": STREAM_TEST,
}


def substream(master_seed: int, index: int) -> np.random.SeedSequence:
    """Deterministic labeled child stream of a master seed."""
    return np.random.SeedSequence(master_seed).spawn(_NUM_STREAMS)[index]


def generator(seed_seq: np.random.SeedSequence) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_seq))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_hex(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_text_atomic(path: str, text: str) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json_atomic(path: str, obj, indent: int | None = 2) -> None:
    write_text_atomic(path, json.dumps(obj, indent=indent, sort_keys=True) + "\n")
