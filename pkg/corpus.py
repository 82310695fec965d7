"""Conversation corpus: data model, synthetic generator and disk layout.

A corpus directory looks like::

    <root>/split.json
    <root>/<conv-id>/meta.json          duration and sample rate
    <root>/<conv-id>/audio.wav          optional, PCM16 mono 8 kHz
    <root>/<conv-id>/transcript.jsonl   one {"token", "start", "end"} per line
    <root>/<conv-id>/annotations.csv    time,a1,a2,... on the 250 ms grid
    <root>/<conv-id>/latent.csv         synthetic corpora only

Corpora are immutable once built; every array is flagged read-only.
"""

import json
import logging
import math
import re
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator
from scipy.io import wavfile
from scipy.ndimage import gaussian_filter1d
from scipy.signal import lfilter

from errors import CorpusFormatError, InvalidArgumentError

logger = logging.getLogger(__name__)

SEGMENT = 0.25
SAMPLE_RATE = 8000
SPLITS = ("train", "dev", "test")
ANNOTATOR_PATTERN = re.compile(r"^a\d+$")

# Vocabulary of the synthetic transcripts
NEUTRAL_WORDS = (
    "bonjour", "oui", "alors", "je", "vous", "appelle", "pour", "mon", "contrat", "la", "lettre",
    "recommandée", "facture", "le", "dossier", "numéro", "madame", "monsieur", "merci", "d'accord",
    "on", "a", "reçu", "votre", "demande", "et", "donc", "il", "faut", "voir", "avec", "service",
    "client", "je", "regarde", "ça", "voilà", "très", "bien", "au", "revoir", "compte", "paiement",
)
FILLED_PAUSES = ("euh", "bah", "hein", "eh")
NEGATIONS = ("pas", "ne", "n'")
STRONG_MARKERS = ("inadmissible", "scandaleux", "inquiet", "important", "réclamation")
WEAK_MARKERS = ("franchement", "quand même")


def grid_length(duration: float) -> int:
    """Number of 250 ms segments covering ``duration`` seconds (partial tail kept)."""
    if duration < 0:
        raise InvalidArgumentError(f"negative duration {duration}")
    return int(math.ceil(round(duration / SEGMENT, 9)))


def _frozen(values, dtype=np.float64) -> np.ndarray:
    array = np.array(values, dtype=dtype)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class TimedWord:
    """One transcript token with its timing in seconds."""

    token: str
    start: float
    end: float

    def __post_init__(self):
        if not (self.start >= 0 and self.end >= self.start):
            raise InvalidArgumentError(f"invalid word timing for {self.token!r}: [{self.start}, {self.end}]")


@dataclass(frozen=True, eq=False)
class AnnotationTrack:
    """Satisfaction values on the 250 ms grid."""

    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 1:
            raise InvalidArgumentError("annotation values must be one-dimensional")
        if not np.all(np.isfinite(values)):
            raise InvalidArgumentError("annotation values must be finite")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        return isinstance(other, AnnotationTrack) and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class LatentChannels:
    """Generator ground truth kept with synthetic conversations."""

    trajectory: np.ndarray
    acoustic: np.ndarray
    linguistic: np.ndarray
    drops: Tuple[int, ...] = ()

    def __post_init__(self):
        for name in ("trajectory", "acoustic", "linguistic"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "drops", tuple(int(d) for d in self.drops))

    def channel(self, name: str) -> np.ndarray:
        if name not in ("acoustic", "linguistic"):
            raise InvalidArgumentError(f"unknown channel {name!r}")
        return getattr(self, name)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, LatentChannels)
            and np.array_equal(self.trajectory, other.trajectory)
            and np.array_equal(self.acoustic, other.acoustic)
            and np.array_equal(self.linguistic, other.linguistic)
            and self.drops == other.drops
        )


@dataclass(frozen=True, eq=False)
class Conversation:
    """One call: optional audio, timed transcript and annotator tracks."""

    id: str
    duration: float
    transcript: Tuple[TimedWord, ...] = ()
    annotations: Mapping[str, AnnotationTrack] = field(default_factory=dict)
    audio: Optional[np.ndarray] = None
    sample_rate: int = SAMPLE_RATE
    latent: Optional[LatentChannels] = None

    def __post_init__(self):
        object.__setattr__(self, "transcript", tuple(self.transcript))
        object.__setattr__(self, "annotations", dict(sorted(self.annotations.items())))
        n = self.grid_length
        for annotator, track in self.annotations.items():
            if len(track) != n:
                raise InvalidArgumentError(f"{self.id}: track {annotator} has {len(track)} values, grid has {n}")
        previous = 0.0
        for word in self.transcript:
            if word.start < previous:
                raise InvalidArgumentError(f"{self.id}: transcript not ordered by start at {word.token!r}")
            previous = word.start
        if self.audio is not None:
            if self.sample_rate != SAMPLE_RATE:
                raise InvalidArgumentError(f"{self.id}: sample rate {self.sample_rate} != {SAMPLE_RATE}")
            object.__setattr__(self, "audio", _frozen(self.audio, dtype=np.int16))
        if self.latent is not None and self.latent.trajectory.size != n:
            raise InvalidArgumentError(f"{self.id}: latent channels do not match the grid")

    @property
    def grid_length(self) -> int:
        return grid_length(self.duration)

    @property
    def annotators(self) -> List[str]:
        return list(self.annotations)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Conversation):
            return NotImplemented
        audio_equal = (
            (self.audio is None and other.audio is None)
            or (self.audio is not None and other.audio is not None and np.array_equal(self.audio, other.audio))
        )
        return (
            self.id == other.id
            and self.duration == other.duration
            and self.transcript == other.transcript
            and self.annotations == other.annotations
            and audio_equal
            and self.sample_rate == other.sample_rate
            and self.latent == other.latent
        )


class DatasetSplit(BaseModel):
    """Disjoint train/dev/test conversation ids."""

    train: List[str]
    dev: List[str]
    test: List[str]

    @model_validator(mode="after")
    def _disjoint(self) -> "DatasetSplit":
        seen = set()
        for name in SPLITS:
            ids = getattr(self, name)
            overlap = seen.intersection(ids)
            if overlap or len(set(ids)) != len(ids):
                raise ValueError(f"split {name} overlaps other splits or repeats ids: {sorted(overlap)}")
            seen.update(ids)
        return self

    def ids(self, name: str) -> List[str]:
        if name not in SPLITS:
            raise InvalidArgumentError(f"unknown split {name!r}")
        return list(getattr(self, name))

    def all_ids(self) -> List[str]:
        return self.train + self.dev + self.test


@dataclass(frozen=True)
class Corpus:
    """Conversations plus their split."""

    conversations: Mapping[str, Conversation]
    split: DatasetSplit

    def __post_init__(self):
        covered = set(self.split.all_ids())
        if covered != set(self.conversations):
            raise InvalidArgumentError(
                f"split covers {len(covered)} ids but corpus has {len(self.conversations)} conversations"
            )

    def subset(self, name: str) -> List[Conversation]:
        return [self.conversations[i] for i in self.split.ids(name)]

    def annotators(self) -> List[str]:
        """Annotators present in every conversation."""
        common = None
        for conv in self.conversations.values():
            common = set(conv.annotators) if common is None else common & set(conv.annotators)
        return sorted(common or [])


class SyntheticSpec(BaseModel):
    """Parameters of the synthetic corpus generator."""

    seed: int = 0
    train: int = Field(201, ge=1)
    dev: int = Field(42, ge=1)
    test: int = Field(60, ge=1)
    mean_duration: float = Field(444.0, gt=0)
    min_duration: float = Field(32.0, gt=0)
    max_duration: float = Field(2460.0, gt=0)
    annotators: int = Field(3, ge=1)
    annotator_noise: float = Field(0.05, ge=0)
    acoustic_noise: float = Field(0.3, ge=0)
    linguistic_noise: float = Field(0.1, ge=0)
    drop_rate: float = Field(0.5, ge=0, description="Frustration drops per minute")
    drop_magnitude: Tuple[float, float] = (0.3, 0.5)
    with_audio: bool = False

    @model_validator(mode="after")
    def _ranges(self) -> "SyntheticSpec":
        if self.min_duration > self.max_duration:
            raise ValueError("min_duration exceeds max_duration")
        low, high = self.drop_magnitude
        if not 0 <= low <= high:
            raise ValueError("drop_magnitude must be an ordered non-negative range")
        return self


def _smooth_noise(rng: np.random.Generator, n: int, level: float, width: float = 8.0) -> np.ndarray:
    if level == 0.0 or n == 0:
        return np.zeros(n)
    noise = gaussian_filter1d(rng.standard_normal(n), sigma=width, mode="nearest")
    std = noise.std()
    return level * noise / std if std > 0 else np.zeros(n)


def _trajectory(rng: np.random.Generator, n: int, spec: SyntheticSpec) -> Tuple[np.ndarray, List[int]]:
    """Mean-reverting walk with injected downward jumps, smoothed and bounded to [0, 1]."""
    theta, level, sigma = 0.004, 0.65, 0.012
    forcing = theta * level + sigma * rng.standard_normal(n)
    drops = []
    expected = spec.drop_rate * n * SEGMENT / 60.0
    for _ in range(rng.poisson(expected)):
        onset = int(rng.integers(40, max(41, n - 8)))
        if onset + 4 >= n:
            continue
        magnitude = rng.uniform(*spec.drop_magnitude)
        forcing[onset:onset + 4] -= magnitude / 4.0
        drops.append(onset)
    start = rng.uniform(0.55, 0.85)
    walk, _ = lfilter([1.0], [1.0, -(1.0 - theta)], forcing, zi=[(1.0 - theta) * start])
    smoothed = gaussian_filter1d(walk, sigma=1.5, mode="nearest")
    return np.clip(smoothed, 0.0, 1.0), sorted(set(drops))


def _transcript(rng: np.random.Generator, trajectory: np.ndarray, duration: float) -> List[TimedWord]:
    """Words whose orality-clue rates rise as satisfaction falls."""
    words: List[TimedWord] = []
    t = rng.uniform(0.0, 1.0)
    previous = None
    while True:
        if rng.random() < 0.12:
            t += rng.uniform(0.5, 1.5)
        length = rng.uniform(0.15, 0.45)
        if t + length > duration:
            break
        frustration = 1.0 - trajectory[min(int(t / SEGMENT), trajectory.size - 1)]
        draw = rng.random()
        thresholds = np.cumsum([
            0.03 + 0.20 * frustration,   # filled pause
            0.02 + 0.15 * frustration,   # negation
            0.02 + 0.15 * frustration,   # repetition
            0.005 + 0.03 * frustration,  # strong marker
            0.005 + 0.02 * frustration,  # weak marker
            0.03,                        # c'est
        ])
        if draw < thresholds[0]:
            token = FILLED_PAUSES[rng.integers(len(FILLED_PAUSES))]
        elif draw < thresholds[1]:
            token = NEGATIONS[rng.integers(len(NEGATIONS))]
        elif draw < thresholds[2] and previous is not None:
            token = previous
        elif draw < thresholds[3]:
            token = STRONG_MARKERS[rng.integers(len(STRONG_MARKERS))]
        elif draw < thresholds[4]:
            token = WEAK_MARKERS[rng.integers(len(WEAK_MARKERS))]
        elif draw < thresholds[5]:
            token = "c'est"
        else:
            token = NEUTRAL_WORDS[rng.integers(len(NEUTRAL_WORDS))]
        start = round(t, 3)
        end = round(t + length, 3)
        words.append(TimedWord(token, start, end))
        previous = token
        t += length + rng.uniform(0.0, 0.08)
    return words


def _audio(rng: np.random.Generator, acoustic: np.ndarray, duration: float) -> np.ndarray:
    """Harmonic signal whose pitch and brightness follow the acoustic channel."""
    n = int(round(duration * SAMPLE_RATE))
    per_sample = np.repeat(acoustic, int(SEGMENT * SAMPLE_RATE))[:n]
    per_sample = gaussian_filter1d(per_sample, sigma=200.0, mode="nearest")
    f0 = 110.0 + 90.0 * np.clip(per_sample, 0.0, 1.2)
    phase = 2.0 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    tilt = 0.4 + 0.5 * np.clip(per_sample, 0.0, 1.2)
    signal = np.zeros(n)
    for harmonic in range(1, 16):
        signal += tilt ** (harmonic - 1) * np.sin(harmonic * phase)
    signal += 0.05 * rng.standard_normal(n)
    peak = np.max(np.abs(signal)) or 1.0
    return np.round(signal / peak * 12000.0).astype(np.int16)


def _synthesize_conversation(conv_id: str, seed_seq: np.random.SeedSequence, spec: SyntheticSpec) -> Conversation:
    rng = np.random.default_rng(seed_seq)
    sigma = 0.6
    mu = math.log(spec.mean_duration) - sigma * sigma / 2.0
    duration = float(np.clip(rng.lognormal(mu, sigma), spec.min_duration, spec.max_duration))
    duration = round(duration, 2)
    n = grid_length(duration)

    trajectory, drops = _trajectory(rng, n, spec)
    annotations = {
        f"a{k + 1}": AnnotationTrack(trajectory + _smooth_noise(rng, n, spec.annotator_noise))
        for k in range(spec.annotators)
    }
    acoustic = 0.8 * trajectory + 0.15 * np.sin(3.0 * np.pi * trajectory) + spec.acoustic_noise * rng.standard_normal(n)
    linguistic = 1.1 * trajectory - 0.2 * trajectory ** 2 + spec.linguistic_noise * rng.standard_normal(n)
    transcript = _transcript(rng, trajectory, duration)
    audio = _audio(rng, acoustic, duration) if spec.with_audio else None

    return Conversation(
        id=conv_id,
        duration=duration,
        transcript=transcript,
        annotations=annotations,
        audio=audio,
        latent=LatentChannels(trajectory, acoustic, linguistic, drops),
    )


def generate_synthetic(spec: SyntheticSpec, jobs: int = 1) -> Corpus:
    """Generate a deterministic synthetic corpus.

    Each conversation draws from its own child of ``SeedSequence(spec.seed)``
    so the output does not depend on ``jobs``.

    Args:
        spec: Generator parameters.
        jobs: Worker threads.

    Returns:
        Corpus: Conversations and their split.
    """
    total = spec.train + spec.dev + spec.test
    ids = [f"conv{k:04d}" for k in range(total)]
    children = np.random.SeedSequence(spec.seed).spawn(total)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        conversations = list(pool.map(lambda args: _synthesize_conversation(*args, spec), zip(ids, children)))

    split = DatasetSplit(
        train=ids[:spec.train],
        dev=ids[spec.train:spec.train + spec.dev],
        test=ids[spec.train + spec.dev:],
    )
    corpus = Corpus({c.id: c for c in conversations}, split)
    hours = sum(c.duration for c in conversations) / 3600.0
    logger.info(f"Generated synthetic corpus: {total} conversations, {hours:.2f} h, seed {spec.seed}")
    return corpus


def gold_reference(conv: Conversation) -> AnnotationTrack:
    """Element-wise mean of all annotator tracks, in sorted annotator order."""
    if not conv.annotations:
        raise InvalidArgumentError(f"{conv.id}: no annotation tracks")
    stacked = np.stack([conv.annotations[a].values for a in sorted(conv.annotations)])
    return AnnotationTrack(stacked.mean(axis=0))


def reference_track(conv: Conversation, reference: str = "gold") -> AnnotationTrack:
    """Resolve a reference policy (``gold`` or ``annotator:<id>``) for one conversation."""
    if reference == "gold":
        return gold_reference(conv)
    if reference.startswith("annotator:"):
        annotator = reference.split(":", 1)[1]
        if annotator not in conv.annotations:
            raise InvalidArgumentError(f"{conv.id}: no track for annotator {annotator!r}")
        return conv.annotations[annotator]
    raise InvalidArgumentError(f"unknown reference policy {reference!r}")


def _format_float(value: float) -> str:
    return repr(float(value))


def save_corpus(corpus: Corpus, root: Union[str, Path]) -> None:
    """Write a corpus in the directory layout described in the module docstring."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "split.json", "w", encoding="utf-8") as f:
        json.dump(corpus.split.model_dump(), f, indent=2)
        f.write("\n")

    for conv_id in sorted(corpus.conversations):
        conv = corpus.conversations[conv_id]
        directory = root / conv_id
        directory.mkdir(exist_ok=True)
        with open(directory / "meta.json", "w", encoding="utf-8") as f:
            json.dump({"id": conv.id, "duration": conv.duration, "sample_rate": conv.sample_rate}, f, indent=2)
            f.write("\n")
        with open(directory / "transcript.jsonl", "w", encoding="utf-8") as f:
            for word in conv.transcript:
                f.write(json.dumps({"token": word.token, "start": word.start, "end": word.end}, ensure_ascii=False))
                f.write("\n")

        times = np.arange(conv.grid_length) * SEGMENT
        annotations = pd.DataFrame({"time": times, **{a: t.values for a, t in conv.annotations.items()}})
        annotations.to_csv(directory / "annotations.csv", index=False, float_format="%.17g", lineterminator="\n")

        if conv.latent is not None:
            drops = np.zeros(conv.grid_length, dtype=int)
            drops[list(conv.latent.drops)] = 1
            latent = pd.DataFrame({
                "time": times,
                "trajectory": conv.latent.trajectory,
                "acoustic": conv.latent.acoustic,
                "linguistic": conv.latent.linguistic,
                "drop": drops,
            })
            latent.to_csv(directory / "latent.csv", index=False, float_format="%.17g", lineterminator="\n")

        if conv.audio is not None:
            wavfile.write(directory / "audio.wav", conv.sample_rate, np.asarray(conv.audio, dtype=np.int16))


def _read_transcript(path: Path) -> List[TimedWord]:
    words = []
    previous = 0.0
    with open(path, encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                token, start, end = str(record["token"]), float(record["start"]), float(record["end"])
            except (ValueError, KeyError, TypeError) as e:
                raise CorpusFormatError(path, f"malformed record: {e}", line_number)
            if not (0 <= start <= end) or not math.isfinite(end):
                raise CorpusFormatError(path, f"invalid timing start={start} end={end}", line_number)
            if start < previous:
                raise CorpusFormatError(path, f"start {start} precedes previous start {previous}", line_number)
            previous = start
            words.append(TimedWord(token, start, end))
    return words


def _read_time_grid(path: Path, expected: Optional[int]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise CorpusFormatError(path, f"malformed CSV: {e}")
    if list(frame.columns[:1]) != ["time"]:
        raise CorpusFormatError(path, "first column must be 'time'", 1)
    if expected is not None and len(frame) != expected:
        raise CorpusFormatError(path, f"grid-length mismatch: {len(frame)} rows, expected {expected}")
    for column in frame.columns:
        values = pd.to_numeric(frame[column], errors="coerce").to_numpy(dtype=np.float64)
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            raise CorpusFormatError(path, f"non-numeric value in column {column!r}", int(bad[0]) + 2)
    steps = frame["time"].to_numpy(dtype=np.float64) / SEGMENT
    off = np.flatnonzero(np.abs(steps - np.arange(len(frame))) > 1e-6)
    if off.size:
        raise CorpusFormatError(path, f"time {frame['time'].iloc[off[0]]} is off the 250 ms grid", int(off[0]) + 2)
    return frame


def _load_conversation(directory: Path) -> Conversation:
    conv_id = directory.name
    meta_path = directory / "meta.json"
    meta = {}
    if meta_path.exists():
        try:
            with open(meta_path, encoding="utf-8") as f:
                meta = json.load(f)
        except ValueError as e:
            raise CorpusFormatError(meta_path, f"malformed JSON: {e}")

    audio = None
    sample_rate = int(meta.get("sample_rate", SAMPLE_RATE))
    audio_path = directory / "audio.wav"
    if audio_path.exists():
        try:
            sample_rate, audio = wavfile.read(audio_path)
        except ValueError as e:
            raise CorpusFormatError(audio_path, f"unreadable WAVE file: {e}")
        if audio.dtype != np.int16 or audio.ndim != 1:
            raise CorpusFormatError(audio_path, "audio must be mono PCM 16-bit")
        if sample_rate != SAMPLE_RATE:
            raise CorpusFormatError(audio_path, f"sample rate {sample_rate} != {SAMPLE_RATE}")

    if "duration" in meta:
        duration = float(meta["duration"])
    elif audio is not None:
        duration = audio.size / sample_rate
    else:
        duration = None
    expected = grid_length(duration) if duration is not None else None

    annotations_path = directory / "annotations.csv"
    if not annotations_path.exists():
        raise CorpusFormatError(annotations_path, "missing annotation file")
    frame = _read_time_grid(annotations_path, expected)
    for column in frame.columns[1:]:
        if not ANNOTATOR_PATTERN.match(str(column)):
            raise CorpusFormatError(annotations_path, f"unknown annotator column {column!r}", 1)
    if duration is None:
        duration = len(frame) * SEGMENT
    annotations = {str(c): AnnotationTrack(frame[c].to_numpy(dtype=np.float64)) for c in frame.columns[1:]}

    transcript_path = directory / "transcript.jsonl"
    transcript = _read_transcript(transcript_path) if transcript_path.exists() else []

    latent = None
    latent_path = directory / "latent.csv"
    if latent_path.exists():
        grid = _read_time_grid(latent_path, grid_length(duration))
        latent = LatentChannels(
            trajectory=grid["trajectory"].to_numpy(dtype=np.float64),
            acoustic=grid["acoustic"].to_numpy(dtype=np.float64),
            linguistic=grid["linguistic"].to_numpy(dtype=np.float64),
            drops=tuple(np.flatnonzero(grid["drop"].to_numpy() > 0)),
        )

    return Conversation(
        id=conv_id,
        duration=duration,
        transcript=transcript,
        annotations=annotations,
        audio=audio,
        sample_rate=sample_rate,
        latent=latent,
    )


def load_corpus(root: Union[str, Path], jobs: int = 1) -> Corpus:
    """Load and validate a corpus directory.

    Raises:
        CorpusFormatError: On any malformed file, naming the file and line.
    """
    root = Path(root)
    split_path = root / "split.json"
    try:
        with open(split_path, encoding="utf-8") as f:
            split = DatasetSplit(**json.load(f))
    except FileNotFoundError:
        raise CorpusFormatError(split_path, "missing split file")
    except ValueError as e:
        raise CorpusFormatError(split_path, f"invalid split: {e}")

    ids = sorted(split.all_ids())
    for conv_id in ids:
        if not (root / conv_id).is_dir():
            raise CorpusFormatError(root / conv_id, "conversation directory listed in split.json is missing")
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        conversations = list(pool.map(lambda i: _load_conversation(root / i), ids))
    logger.info(f"Loaded corpus from {root}: {len(conversations)} conversations")
    return Corpus({c.id: c for c in conversations}, split)


def conversation_seed(seed: int, conv_id: str) -> np.random.SeedSequence:
    """Seed sequence for per-conversation randomness derived from a run seed."""
    return np.random.SeedSequence([seed, zlib.crc32(conv_id.encode("utf-8"))])
