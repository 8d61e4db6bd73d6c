from pathlib import Path
from typing import Union

import numpy as np
from numpy.typing import NDArray

from ..utils import InputOutputError

TokenBatch = NDArray[np.int64]


def read_corpus(path: Union[str, Path]) -> bytes:
    path = Path(path)
    try:
        return path.read_bytes()
    except FileNotFoundError:
        raise InputOutputError(f"corpus not found: {path}", path=str(path))
    except OSError as e:
        raise InputOutputError(f"cannot read corpus {path}: {e}", path=str(path))


def sample_windows(data: bytes, seq_len: int, n_samples: int, rng: np.random.Generator) -> TokenBatch:
    if seq_len < 1 or n_samples < 1:
        raise InputOutputError("seq_len and n_samples must be positive", seq_len=seq_len, n_samples=n_samples)
    if len(data) < seq_len:
        raise InputOutputError(
            f"corpus too short: {len(data)} bytes for windows of {seq_len}",
            corpus_bytes=len(data),
            seq_len=seq_len,
        )
    buffer = np.frombuffer(data, dtype=np.uint8)
    offsets = rng.integers(0, len(data) - seq_len, size=n_samples, endpoint=True)
    return np.stack([buffer[o:o + seq_len] for o in offsets]).astype(np.int64)


def byte_tokenize(text: bytes, seq_len: int = 128, n_samples: int = 10, seed: int = 0) -> TokenBatch:
    """``n_samples`` byte windows of ``seq_len`` at seeded uniform offsets, shape (n_samples, seq_len)."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    return sample_windows(text, seq_len, n_samples, np.random.default_rng(seed))
