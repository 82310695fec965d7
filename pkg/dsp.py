"""Acoustic front end and feature streams on the 250 ms grid.

MFCC configuration for 8 kHz telephone speech: 30 ms Hamming frames every
10 ms, pre-emphasis 0.97, 256-point FFT, 26 triangular mel filters over
0-4000 Hz, log floor 1e-10, orthonormal DCT-II keeping c1..c12, plus
deltas over a +/-2 frame regression window.
"""

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dct

from corpus import SAMPLE_RATE, SEGMENT, grid_length
from errors import DimMismatchError, InvalidArgumentError, StreamFormatError

logger = logging.getLogger(__name__)

FRAME_LENGTH = 240
FRAME_HOP = 80
NFFT = 256
N_FILTERS = 26
N_CEPS = 12
PRE_EMPHASIS = 0.97
LOG_FLOOR = 1e-10
DELTA_WINDOW = 2
STD_FLOOR = 1e-8

FSTM_MAGIC = b"FSTM1"


@dataclass(frozen=True, eq=False)
class FrameFeatures:
    """Frame-level features at a fixed hop."""

    frames: np.ndarray
    hop: float
    frame_length: float

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise InvalidArgumentError("frames must be a (count, dim) array")
        if self.hop <= 0:
            raise InvalidArgumentError(f"hop must be positive, got {self.hop}")
        object.__setattr__(self, "frames", frames)

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True, eq=False)
class FeatureStream:
    """One feature vector per 250 ms segment."""

    segments: np.ndarray
    source: str = ""

    def __post_init__(self):
        segments = np.asarray(self.segments, dtype=np.float64)
        if segments.ndim != 2:
            raise InvalidArgumentError("segments must be a (count, dim) array")
        if not np.all(np.isfinite(segments)):
            raise InvalidArgumentError(f"stream {self.source!r} has non-finite values")
        object.__setattr__(self, "segments", segments)

    @property
    def dim(self) -> int:
        return self.segments.shape[1]

    def __len__(self) -> int:
        return self.segments.shape[0]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, FeatureStream)
            and self.source == other.source
            and np.array_equal(self.segments, other.segments)
        )


@dataclass(frozen=True, eq=False)
class NormStats:
    """Per-dimension mean and standard deviation over training segments."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if mean.shape != std.shape:
            raise DimMismatchError(f"mean has dim {mean.size}, std has dim {std.size}")
        if np.any(std < 0):
            raise InvalidArgumentError("std must be non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def scale(self) -> np.ndarray:
        """Divisor per dimension; degenerate dimensions are only centered."""
        return np.where(self.std < STD_FLOOR, 1.0, self.std)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, NormStats)
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.std, other.std)
        )


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int = SAMPLE_RATE, n_filters: int = N_FILTERS, nfft: int = NFFT) -> np.ndarray:
    """Triangular mel filter weights of shape (n_filters, nfft // 2 + 1).

    Weights are evaluated at the FFT bin frequencies, so no filter collapses
    to an empty band at low frequencies.
    """
    edges = _mel_to_hz(np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2.0), n_filters + 2))
    freqs = np.arange(nfft // 2 + 1) * sample_rate / nfft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def _frames(audio, sample_rate: int) -> np.ndarray:
    if sample_rate != SAMPLE_RATE:
        raise InvalidArgumentError(f"sample rate {sample_rate} != {SAMPLE_RATE}; resample upstream")
    signal = np.asarray(audio, dtype=np.float64)
    if signal.ndim != 1:
        raise InvalidArgumentError("audio must be mono")
    if signal.size < FRAME_LENGTH:
        raise InvalidArgumentError(f"audio has {signal.size} samples, shorter than one {FRAME_LENGTH}-sample frame")
    emphasized = np.append(signal[0], signal[1:] - PRE_EMPHASIS * signal[:-1])
    frames = sliding_window_view(emphasized, FRAME_LENGTH)[::FRAME_HOP]
    return frames * np.hamming(FRAME_LENGTH)


def log_mel_energies(audio, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Floored log filterbank energies per frame, before the cosine transform."""
    frames = _frames(audio, sample_rate)
    power = np.abs(np.fft.rfft(frames, NFFT)) ** 2 / NFFT
    energies = power @ mel_filterbank(sample_rate).T
    return np.log(np.maximum(energies, LOG_FLOOR))


def deltas(features: np.ndarray, window: int = DELTA_WINDOW) -> np.ndarray:
    """Regression deltas with replicated edges."""
    padded = np.pad(features, ((window, window), (0, 0)), mode="edge")
    n = features.shape[0]
    numerator = sum(k * (padded[window + k:window + k + n] - padded[window - k:window - k + n]) for k in range(1, window + 1))
    return numerator / (2.0 * sum(k * k for k in range(1, window + 1)))


def mfcc(audio, sample_rate: int = SAMPLE_RATE) -> FrameFeatures:
    """Extract MFCC 1-12 and their deltas (24 dims) every 10 ms.

    Args:
        audio: Mono samples.
        sample_rate: Must be 8000 Hz.

    Returns:
        FrameFeatures: ``floor((S - 240) / 80) + 1`` frames of dim 24.

    Raises:
        InvalidArgumentError: If the signal is shorter than one frame or not 8 kHz.
    """
    ceps = dct(log_mel_energies(audio, sample_rate), type=2, axis=1, norm="ortho")[:, 1:N_CEPS + 1]
    return FrameFeatures(
        frames=np.hstack([ceps, deltas(ceps)]),
        hop=FRAME_HOP / sample_rate,
        frame_length=FRAME_LENGTH / sample_rate,
    )


def aggregate_to_segments(ff: FrameFeatures, duration: float, source: str = "") -> FeatureStream:
    """Mean and standard deviation of frames per 250 ms segment.

    A frame belongs to the segment containing its start time. Segments holding
    no frame (the tail) repeat the previous segment.

    Raises:
        InvalidArgumentError: On an empty frame sequence or a hop that does not
            divide 250 ms.
    """
    if ff.frames.shape[0] == 0:
        raise InvalidArgumentError("empty frame sequence")
    ratio = SEGMENT / ff.hop
    per_segment = int(round(ratio))
    if per_segment < 1 or abs(ratio - per_segment) > 1e-9:
        raise InvalidArgumentError(f"hop {ff.hop} s does not divide the {SEGMENT} s segment")

    n_segments = grid_length(duration)
    frames = ff.frames[: n_segments * per_segment]
    dim = ff.dim
    out = np.empty((n_segments, 2 * dim))
    filled = min(n_segments, math.ceil(frames.shape[0] / per_segment))
    if filled == 0:
        raise InvalidArgumentError("no frame starts inside the conversation")

    starts = np.arange(filled) * per_segment
    counts = np.minimum(per_segment, frames.shape[0] - starts)[:, None]
    means = np.add.reduceat(frames, starts, axis=0) / counts
    centered = frames - np.repeat(means, counts[:, 0], axis=0)
    stds = np.sqrt(np.add.reduceat(centered * centered, starts, axis=0) / counts)
    out[:filled, :dim] = means
    out[:filled, dim:] = stds
    out[filled:] = out[filled - 1]
    return FeatureStream(out, source=source)


def fit_norm(streams: Iterable[FeatureStream]) -> NormStats:
    """Pool all segments of the given streams and fit per-dimension moments."""
    blocks = [s.segments for s in streams]
    if not blocks or sum(b.shape[0] for b in blocks) == 0:
        raise InvalidArgumentError("normalization needs at least one training segment")
    dims = {b.shape[1] for b in blocks}
    if len(dims) != 1:
        raise DimMismatchError(f"streams disagree on dimension: {sorted(dims)}")
    pooled = np.vstack(blocks)
    return NormStats(mean=pooled.mean(axis=0), std=pooled.std(axis=0))


def apply_norm(stream: FeatureStream, stats: NormStats) -> FeatureStream:
    """Return ``(x - mean) / std``, centering only where std < 1e-8."""
    if stream.dim != stats.dim:
        raise DimMismatchError(f"stream dim {stream.dim} != normalization dim {stats.dim}")
    return FeatureStream((stream.segments - stats.mean) / stats.scale, source=stream.source)


def invert_norm(stream: FeatureStream, stats: NormStats) -> FeatureStream:
    """Undo ``apply_norm``."""
    if stream.dim != stats.dim:
        raise DimMismatchError(f"stream dim {stream.dim} != normalization dim {stats.dim}")
    return FeatureStream(stream.segments * stats.scale + stats.mean, source=stream.source)


def write_stream(path: Union[str, Path], stream: FeatureStream) -> None:
    """Write a stream in the FSTM binary format.

    Layout: ``FSTM1``, u32 dim, u32 count, f64 hop, u32 label length, UTF-8
    label, then count x dim little-endian float32 values, segment-major.
    """
    label = stream.source.encode("utf-8")
    with open(path, "wb") as f:
        f.write(FSTM_MAGIC)
        f.write(struct.pack("<IId", stream.dim, len(stream), SEGMENT))
        f.write(struct.pack("<I", len(label)))
        f.write(label)
        f.write(stream.segments.astype("<f4").tobytes())


def read_stream(path: Union[str, Path]) -> FeatureStream:
    """Read an FSTM file, or the ``time,f0..`` CSV mirror when the suffix is ``.csv``."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _read_stream_csv(path)
    data = path.read_bytes()
    header = len(FSTM_MAGIC) + struct.calcsize("<IIdI")
    if len(data) < header or not data.startswith(FSTM_MAGIC):
        raise StreamFormatError(f"{path}: not an FSTM1 file")
    dim, count, hop, label_length = struct.unpack_from("<IIdI", data, len(FSTM_MAGIC))
    if hop != SEGMENT:
        raise StreamFormatError(f"{path}: hop {hop} != {SEGMENT}")
    body = header + label_length
    if len(data) != body + 4 * dim * count:
        raise StreamFormatError(f"{path}: expected {dim}x{count} values, file size is {len(data)} bytes")
    label = data[header:body].decode("utf-8")
    values = np.frombuffer(data, dtype="<f4", offset=body).reshape(count, dim)
    try:
        return FeatureStream(values.astype(np.float64), source=label)
    except InvalidArgumentError as e:
        raise StreamFormatError(f"{path}: {e}")


def write_stream_csv(path: Union[str, Path], stream: FeatureStream) -> None:
    """Write the CSV mirror of a stream."""
    frame = pd.DataFrame(stream.segments, columns=[f"f{k}" for k in range(stream.dim)])
    frame.insert(0, "time", np.arange(len(stream)) * SEGMENT)
    frame.to_csv(path, index=False, float_format="%.9g", lineterminator="\n")


def _read_stream_csv(path: Path, source: Optional[str] = None) -> FeatureStream:
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise StreamFormatError(f"{path}: malformed CSV: {e}")
    expected = ["time"] + [f"f{k}" for k in range(frame.shape[1] - 1)]
    if list(frame.columns) != expected:
        raise StreamFormatError(f"{path}: header must be time,f0..fD-1")
    try:
        return FeatureStream(frame.iloc[:, 1:].to_numpy(dtype=np.float64), source=source or path.stem)
    except (InvalidArgumentError, ValueError) as e:
        raise StreamFormatError(f"{path}: {e}")
