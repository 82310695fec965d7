"""Ingestion of externally extracted embeddings onto the 250 ms grid.

Pre-trained models (Wav2Vec, CamemBERT, Word2Vec) are never run here; their
outputs arrive either as grid-aligned streams (FSTM or CSV) or as timed
token embeddings that are averaged per segment.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np

from corpus import SEGMENT, Conversation, conversation_seed, grid_length
from dsp import FeatureStream, read_stream
from errors import CorpusFormatError, DimMismatchError, InvalidArgumentError, LengthMismatchError

logger = logging.getLogger(__name__)

MAX_LENGTH_DRIFT = 2
Channel = Literal["acoustic", "linguistic"]


class ContextVariant(str, Enum):
    """Whether an embedding was extracted per segment or over the whole call."""

    WITHOUT_CONTEXT = "woc"
    WITH_CONTEXT = "wc"

    @classmethod
    def from_source(cls, source: str) -> Optional["ContextVariant"]:
        """Variant named by a ``-woc`` or ``-wc`` suffix of a stream source, if any."""
        suffix = source.rsplit("-", 1)[-1] if "-" in source else ""
        try:
            return cls(suffix)
        except ValueError:
            return None


@dataclass(frozen=True, eq=False)
class TokenEmbedding:
    """A timed token and its vector."""

    token: str
    start: float
    end: float
    vector: np.ndarray

    def __post_init__(self):
        if not (0 <= self.start <= self.end):
            raise InvalidArgumentError(f"invalid token timing for {self.token!r}: [{self.start}, {self.end}]")
        object.__setattr__(self, "vector", np.asarray(self.vector, dtype=np.float64).reshape(-1))


def read_token_embeddings(path: Union[str, Path]) -> List[TokenEmbedding]:
    """Read a ``dim=<D>`` header followed by tab-separated token records."""
    return read_token_file(path)[0]


def read_token_file(path: Union[str, Path]) -> Tuple[List[TokenEmbedding], int]:
    """Token records and the dimension declared by the header."""
    path = Path(path)
    tokens = []
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip()
        if not header.startswith("dim="):
            raise CorpusFormatError(path, "first line must be dim=<D>", 1)
        try:
            dim = int(header[4:])
        except ValueError:
            raise CorpusFormatError(path, f"invalid dimension {header[4:]!r}", 1)
        for line_number, line in enumerate(f, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3 + dim:
                raise CorpusFormatError(path, f"expected {3 + dim} fields, got {len(fields)}", line_number)
            try:
                vector = np.array([float(v) for v in fields[3:]])
                tokens.append(TokenEmbedding(fields[0], float(fields[1]), float(fields[2]), vector))
            except ValueError as e:
                raise CorpusFormatError(path, str(e), line_number)
    return tokens, dim


def align_tokens_to_grid(
    tokens: Sequence[TokenEmbedding],
    duration: float,
    source: str = "tokens",
    dim: Optional[int] = None,
) -> FeatureStream:
    """Average the vectors of tokens overlapping each 250 ms segment.

    A token ``[s, e]`` overlaps segment ``[0.25k, 0.25(k+1))`` when it
    intersects it; a zero-length token belongs to the segment containing it.
    Segments without tokens get the zero vector. ``dim`` is required for an
    empty token list.

    Raises:
        DimMismatchError: If tokens disagree on dimension or with ``dim``.
    """
    n = grid_length(duration)
    dims = {t.vector.size for t in tokens}
    if dim is not None:
        dims.add(dim)
    if len(dims) > 1:
        raise DimMismatchError(f"token vectors disagree on dimension: {sorted(dims)}")
    if not dims:
        raise InvalidArgumentError("cannot infer the dimension of an empty token list")
    dim = dims.pop()

    sums = np.zeros((n, dim))
    counts = np.zeros(n)
    for t in sorted(tokens, key=lambda t: (t.start, t.end, t.token)):
        first = int(math.floor(t.start / SEGMENT))
        last = max(first, int(math.ceil(t.end / SEGMENT)) - 1)
        first, last = max(first, 0), min(last, n - 1)
        if first > last:
            continue
        sums[first:last + 1] += t.vector
        counts[first:last + 1] += 1
    present = counts > 0
    sums[present] /= counts[present, None]
    return FeatureStream(sums, source=source)


def reconcile_length(stream: FeatureStream, expected: int, name: str = "") -> FeatureStream:
    """Pad by copying the last segment, or truncate, when off by at most two."""
    drift = len(stream) - expected
    if drift == 0:
        return stream
    if abs(drift) > MAX_LENGTH_DRIFT:
        raise LengthMismatchError(f"{name or stream.source}: {len(stream)} segments, conversation grid has {expected}")
    logger.warning(f"Reconciling {name or stream.source}: {len(stream)} segments to grid length {expected}")
    if drift > 0:
        segments = stream.segments[:expected]
    else:
        segments = np.vstack([stream.segments, np.repeat(stream.segments[-1:], -drift, axis=0)])
    return FeatureStream(segments, source=stream.source)


def load_stream(path: Union[str, Path], expected_dim: Optional[int] = None, expected_length: Optional[int] = None) -> FeatureStream:
    """Load a grid-aligned stream and validate it against a conversation.

    Args:
        path: FSTM file, or CSV mirror.
        expected_dim: Required dimension, if any.
        expected_length: Conversation grid length, if any.

    Raises:
        DimMismatchError: If the dimension differs from ``expected_dim``.
        LengthMismatchError: If the length is off by more than two segments.
    """
    stream = read_stream(path)
    if expected_dim is not None and stream.dim != expected_dim:
        raise DimMismatchError(f"{path}: dimension {stream.dim} != expected {expected_dim}")
    if expected_length is not None:
        stream = reconcile_length(stream, expected_length, name=str(path))
    return stream


def export_synthetic_modality(
    conv: Conversation,
    channel: Channel,
    dim: int,
    noise: float,
    seed: int,
    identity: bool = False,
) -> FeatureStream:
    """Project a synthetic conversation's latent channel into ``dim`` features.

    The linear map depends only on ``seed`` (shared by all conversations);
    the additive noise also depends on the conversation id.

    Raises:
        InvalidArgumentError: On an unknown channel or a non-synthetic conversation.
    """
    if conv.latent is None:
        raise InvalidArgumentError(f"{conv.id}: no latent channels (not a synthetic conversation)")
    if dim < 1 or noise < 0:
        raise InvalidArgumentError(f"invalid export parameters dim={dim} noise={noise}")
    latent = conv.latent.channel(channel)
    if identity:
        weights, bias = np.ones(dim), np.zeros(dim)
    else:
        map_rng = np.random.default_rng([seed, 0 if channel == "acoustic" else 1])
        weights = map_rng.normal(0.0, 1.0, dim)
        bias = map_rng.normal(0.0, 0.5, dim)
    segments = latent[:, None] * weights[None, :] + bias[None, :]
    if noise > 0:
        noise_rng = np.random.default_rng(conversation_seed(seed, f"{channel}:{conv.id}"))
        segments = segments + noise * noise_rng.standard_normal(segments.shape)
    return FeatureStream(segments, source=f"synthetic-{channel}")
