from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np
import orjson

from servetune_core.errors import InvalidParameter

logger = logging.getLogger(__name__)

TokenSequence = Tuple[int, ...]


def content_key(sequence: Sequence[int]) -> str:
    """Stable sha256 of a token sequence."""
    raw = ",".join(str(int(t)) for t in sequence)
    return hashlib.sha256(raw.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class TokenCorpus:
    """
    Token-id sequences plus free-form provenance.
    """

    sequences: Tuple[TokenSequence, ...]
    provenance: Dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        for i, seq in enumerate(self.sequences):
            if len(seq) == 0:
                raise InvalidParameter(f"sequence {i} is empty")

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([len(s) for s in self.sequences], dtype=float)

    def keys(self) -> List[str]:
        return [content_key(s) for s in self.sequences]

    def canonical(self) -> "TokenCorpus":
        """
        Sequences sorted by content key, so sampling ignores input order.
        """
        ordered = sorted(self.sequences, key=content_key)
        return TokenCorpus(sequences=tuple(ordered), provenance=dict(self.provenance))

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for key in self.keys():
            digest.update(key.encode("utf-8"))
        return digest.hexdigest()


def _parse_line(line: bytes, lineno: int) -> TokenSequence:
    try:
        obj = orjson.loads(line)
    except orjson.JSONDecodeError as e:
        raise InvalidParameter(f"line {lineno}: {e}") from e
    if isinstance(obj, dict):
        obj = obj.get("tokens")
    if not isinstance(obj, list) or not all(
        isinstance(t, int) and not isinstance(t, bool) for t in obj
    ):
        raise InvalidParameter(f"line {lineno}: expected a list of token ids")
    return tuple(obj)


def load_corpus(path: Union[str, Path]) -> TokenCorpus:
    """
    Read JSON-lines of token arrays (``[1, 2, 3]`` or ``{"tokens": [...]}``).
    """
    p = Path(path)
    sequences: List[TokenSequence] = []
    with p.open("rb") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                sequences.append(_parse_line(line, lineno))
    logger.info("Loaded %d sequences from %s", len(sequences), p)
    return TokenCorpus(sequences=tuple(sequences), provenance={"source": p.name})


def save_corpus(corpus: TokenCorpus, path: Union[str, Path]) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("wb") as fh:
        for seq in corpus.sequences:
            fh.write(orjson.dumps(list(seq)))
            fh.write(b"\n")
    return p


def synthetic_corpus(
    n: int,
    *,
    seed: int = 0,
    min_len: int = 16,
    max_len: int = 256,
    vocab_size: int = 32000,
) -> TokenCorpus:
    """Random token sequences; handy when a job declares no dataset."""
    if n < 1 or min_len < 1 or max_len < min_len:
        raise InvalidParameter("invalid synthetic corpus shape")
    rng = np.random.default_rng(seed)
    lengths = rng.integers(min_len, max_len + 1, size=n)
    sequences = tuple(
        tuple(int(t) for t in rng.integers(0, vocab_size, size=int(length)))
        for length in lengths
    )
    return TokenCorpus(sequences=sequences, provenance={"source": "synthetic", "seed": seed})
