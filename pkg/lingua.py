"""Orality clues in transcripts and their dynamics against the satisfaction track.

Seven features are counted: single-word (deg1) and two-word (deg2)
repetitions, filled pauses, strong and weak markers, negation marks and
"c'est". Repetitions are matched on whole normalized words; lexicon features
on tokens split at apostrophes and spaces, so ``c'est`` and ``c' est`` are
the same two-token sequence.
"""

import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, FrozenSet, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import get_config
from corpus import SEGMENT, AnnotationTrack, Conversation, TimedWord, gold_reference
from errors import InvalidArgumentError

logger = logging.getLogger(__name__)

FEATURES = ("deg1", "deg2", "filled", "strong", "weak", "neg", "cest")
FEATURE_LABELS = {
    "deg1": "single word repetitions (deg1)",
    "deg2": "two word repetitions (deg2)",
    "filled": "filled pauses",
    "strong": "strong markers",
    "weak": "weak markers",
    "neg": "negation marks",
    "cest": "c'est",
}
LEXICON_FILES = {
    "filled": "filled_pauses.txt",
    "strong": "strong_markers.txt",
    "weak": "weak_markers.txt",
    "neg": "negations.txt",
    "cest": "cest.txt",
}
LEXICON_DIR = Path(__file__).parent / "resources" / "lexicon"
DEFAULT_BIN_WIDTH = 10.0
UTTERANCE_GAP = 0.5
DROP_WINDOW = 10.0

_APOSTROPHES = str.maketrans({"’": "'", "‘": "'", "`": "'", "´": "'"})
_PIECE = re.compile(r"[^']+'|[^']+|'")

Entry = Tuple[str, ...]


def normalize_word(word: str) -> str:
    """Case-fold, trim and unify apostrophes."""
    return " ".join(word.translate(_APOSTROPHES).casefold().split())


def split_word(word: str) -> List[str]:
    """Split a normalized word at spaces and after apostrophes: ``c'est`` -> ``c'``, ``est``."""
    return [piece for part in normalize_word(word).split() for piece in _PIECE.findall(part)]


@dataclass(frozen=True)
class ClueLexicon:
    """Token sequences counted for each lexicon feature."""

    filled: FrozenSet[Entry]
    strong: FrozenSet[Entry]
    weak: FrozenSet[Entry]
    neg: FrozenSet[Entry]
    cest: FrozenSet[Entry]

    def __post_init__(self):
        for name in LEXICON_FILES:
            entries = getattr(self, name)
            if not entries:
                raise InvalidArgumentError(f"lexicon {name!r} is empty")
            for entry in entries:
                if not entry or tuple(split_word(" ".join(entry))) != entry:
                    raise InvalidArgumentError(f"lexicon {name!r} entry {entry!r} is not normalized")

    @classmethod
    def from_words(cls, **lists: Sequence[str]) -> "ClueLexicon":
        """Build from plain strings, e.g. ``filled=["euh", "bah"]``."""
        missing = set(LEXICON_FILES) - set(lists)
        if missing:
            raise InvalidArgumentError(f"missing lexicon lists: {sorted(missing)}")
        return cls(**{name: frozenset(tuple(split_word(w)) for w in lists[name] if split_word(w)) for name in LEXICON_FILES})


def load_lexicon(directory: Union[str, Path]) -> ClueLexicon:
    """Read one UTF-8 file per lexicon feature; ``#`` starts a comment."""
    directory = Path(directory)
    lists = {}
    for name, filename in LEXICON_FILES.items():
        path = directory / filename
        if not path.is_file():
            raise InvalidArgumentError(f"lexicon file not found: {path}")
        lines = path.read_text(encoding="utf-8").splitlines()
        lists[name] = [line.split("#", 1)[0].strip() for line in lines]
        lists[name] = [w for w in lists[name] if w]
    return ClueLexicon.from_words(**lists)


def default_lexicon() -> ClueLexicon:
    """The shipped lexica, or ``AppConfig.lexicon_dir`` when set."""
    return load_lexicon(get_config().lexicon_dir or LEXICON_DIR)


@dataclass(frozen=True)
class Occurrence:
    feature: str
    time: float


@dataclass(frozen=True)
class OralityProfile:
    """Orality-clue occurrences of one conversation and their binned counts."""

    occurrences: Tuple[Occurrence, ...]
    words: int
    utterances: int
    duration: float
    bin_width: float = DEFAULT_BIN_WIDTH

    @property
    def totals(self) -> Dict[str, int]:
        counts = {f: 0 for f in FEATURES}
        for occurrence in self.occurrences:
            counts[occurrence.feature] += 1
        return counts

    def bin_count(self, bin_width: Optional[float] = None) -> int:
        width = bin_width or self.bin_width
        return max(1, math.ceil(round(self.duration / width, 9))) if self.duration > 0 else 1

    def binned(self, bin_width: Optional[float] = None, n_bins: Optional[int] = None) -> np.ndarray:
        """Counts per bin and feature, shape (bins, 7); late occurrences fall in the last bin."""
        width = bin_width or self.bin_width
        if width <= 0:
            raise InvalidArgumentError(f"bin width must be positive, got {width}")
        n_bins = n_bins or self.bin_count(width)
        counts = np.zeros((n_bins, len(FEATURES)), dtype=np.int64)
        for occurrence in self.occurrences:
            index = min(int(occurrence.time // width), n_bins - 1)
            counts[index, FEATURES.index(occurrence.feature)] += 1
        return counts


def _count_entries(pieces: List[str], owners: List[int], entries: FrozenSet[Entry]) -> List[int]:
    """Word index of the first token of every match."""
    found = []
    for entry in entries:
        k = len(entry)
        for i in range(len(pieces) - k + 1):
            if tuple(pieces[i:i + k]) == entry:
                found.append(owners[i])
    return found


def count_utterances(transcript: Sequence[TimedWord], gap: float = UTTERANCE_GAP) -> int:
    """Stretches of speech separated by silences of at least ``gap`` seconds."""
    if not transcript:
        return 0
    return 1 + sum(1 for prev, word in zip(transcript, transcript[1:]) if word.start - prev.end >= gap)


def extract_profile(
    transcript: Sequence[TimedWord],
    lexicon: Optional[ClueLexicon] = None,
    bin_width: float = DEFAULT_BIN_WIDTH,
    duration: Optional[float] = None,
) -> OralityProfile:
    """Count the seven orality clues of a timed transcript.

    Args:
        transcript: Words in time order.
        lexicon: Defaults to ``default_lexicon()``.
        bin_width: Seconds per bin.
        duration: Conversation length; defaults to the last word's end.

    Returns:
        OralityProfile: Each occurrence timed by the start of its first word.
    """
    if bin_width <= 0:
        raise InvalidArgumentError(f"bin width must be positive, got {bin_width}")
    lexicon = lexicon or default_lexicon()
    words = [normalize_word(w.token) for w in transcript]
    starts = [w.start for w in transcript]
    occurrences = []

    for i in range(len(words) - 1):
        if words[i] and words[i] == words[i + 1]:
            occurrences.append(Occurrence("deg1", starts[i]))
    for i in range(len(words) - 3):
        if words[i] and (words[i], words[i + 1]) == (words[i + 2], words[i + 3]):
            occurrences.append(Occurrence("deg2", starts[i]))

    pieces, owners = [], []
    for index, word in enumerate(transcript):
        for piece in split_word(word.token):
            pieces.append(piece)
            owners.append(index)
    for name in LEXICON_FILES:
        for index in _count_entries(pieces, owners, getattr(lexicon, name)):
            occurrences.append(Occurrence(name, starts[index]))

    occurrences.sort(key=lambda o: (o.time, FEATURES.index(o.feature)))
    if duration is None:
        duration = transcript[-1].end if transcript else 0.0
    return OralityProfile(
        occurrences=tuple(occurrences),
        words=len(transcript),
        utterances=count_utterances(transcript),
        duration=float(duration),
        bin_width=bin_width,
    )


def profile_summary(profile: OralityProfile) -> pd.DataFrame:
    """Feature totals, word count and utterance count as ``feature,count`` rows."""
    totals = profile.totals
    rows = [[FEATURE_LABELS[f], totals[f]] for f in FEATURES]
    rows.append(["# words in the conversation", profile.words])
    rows.append(["# utterances in the conversation", profile.utterances])
    return pd.DataFrame(rows, columns=["feature", "count"])


def align_profile_with_reference(
    profile: OralityProfile,
    gold: AnnotationTrack,
    bin_width: Optional[float] = None,
) -> pd.DataFrame:
    """Per-bin clue counts beside the mean satisfaction of the bin.

    Bins cover the reference track; columns are
    ``bin_start,deg1,deg2,filled,strong,weak,neg,cest,satisfaction``.
    """
    width = profile.bin_width if bin_width is None else bin_width
    if width <= 0:
        raise InvalidArgumentError(f"bin width must be positive, got {width}")
    n = len(gold)
    n_bins = max(1, math.ceil(round(n * SEGMENT / width, 9)))
    segment_bins = np.minimum((np.arange(n) * SEGMENT // width).astype(np.int64), n_bins - 1)
    sums = np.bincount(segment_bins, weights=gold.values, minlength=n_bins)
    counts = np.bincount(segment_bins, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        satisfaction = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)

    frame = pd.DataFrame(profile.binned(width, n_bins), columns=list(FEATURES))
    frame.insert(0, "bin_start", np.arange(n_bins) * width)
    frame["satisfaction"] = satisfaction
    return frame


EventKind = Literal["high-frustration", "frustration-drop"]


@dataclass(frozen=True)
class Event:
    kind: EventKind
    start: float
    end: float


def _runs(mask: np.ndarray) -> List[Tuple[int, int]]:
    """Maximal ``[start, stop)`` index runs where ``mask`` holds."""
    edges = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def tag_events(
    gold: Union[AnnotationTrack, Sequence[float]],
    frustration_threshold: float,
    drop_delta: float,
    window: float = DROP_WINDOW,
) -> List[Event]:
    """High-frustration intervals and strongly decreasing stretches of a track.

    High frustration covers every maximal run below ``frustration_threshold``.
    A segment is in a drop when the track fell by at least ``drop_delta``
    from its maximum over the preceding ``window`` seconds; consecutive such
    segments form one event starting where the fall first reached the delta.
    """
    values = np.asarray(getattr(gold, "values", gold), dtype=np.float64)
    events = []
    for start, stop in _runs(values < frustration_threshold):
        events.append(Event("high-frustration", start * SEGMENT, stop * SEGMENT))

    if values.size and drop_delta > 0:
        lookback = max(1, int(round(window / SEGMENT)))
        peaks = pd.Series(values).rolling(lookback + 1, min_periods=1).max().to_numpy()
        for start, stop in _runs(peaks - values >= drop_delta):
            events.append(Event("frustration-drop", start * SEGMENT, stop * SEGMENT))
    events.sort(key=lambda e: (e.start, e.kind))
    return events


def events_frame(events: Sequence[Event]) -> pd.DataFrame:
    return pd.DataFrame([[e.kind, e.start, e.end] for e in events], columns=["kind", "start", "end"])


@dataclass
class ConversationAnalysis:
    conv_id: str
    profile: OralityProfile
    dynamics: pd.DataFrame
    events: List[Event]


def analyze_conversation(
    conv: Conversation,
    lexicon: Optional[ClueLexicon] = None,
    bin_width: float = DEFAULT_BIN_WIDTH,
    frustration_threshold: float = 0.4,
    drop_delta: float = 0.2,
) -> ConversationAnalysis:
    """Profile, dynamics against the gold track and events of one conversation."""
    gold = gold_reference(conv)
    profile = extract_profile(conv.transcript, lexicon, bin_width, duration=conv.duration)
    return ConversationAnalysis(
        conv_id=conv.id,
        profile=profile,
        dynamics=align_profile_with_reference(profile, gold),
        events=tag_events(gold, frustration_threshold, drop_delta),
    )


def analyze_conversations(conversations: Sequence[Conversation], jobs: int = 1, **options) -> List[ConversationAnalysis]:
    """``analyze_conversation`` over many conversations, results in input order."""
    lexicon = options.pop("lexicon", None) or default_lexicon()
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(lambda c: analyze_conversation(c, lexicon, **options), conversations))
    logger.info(f"Analyzed orality clues in {len(results)} conversations")
    return results
