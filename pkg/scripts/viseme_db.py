"""Viseme dictionary, extended labels and the motion-sample database.

A motion sample is the latent sequence of one annotated viseme instance. Its
extended label records the previous, current and following viseme, with
``#`` marking a word boundary. Transitions between every ordered pair of
samples are precomputed once per database.
"""

from __future__ import annotations

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from asset_io import BinaryReader, BinaryWriter, load_json, save_json


LOGGER = logging.getLogger(__name__)

EMPTY = "#"
WORD_BREAK = "|"
VISEME_SYMBOLS = ("P", "T", "-", "L", "F", "I", "E", "A", "O", "U", "R", "S", "G")
DEFAULT_DICTIONARY = Path(__file__).resolve().parent.parent / "data" / "celex_visemes.json"

DATABASE_MAGIC = b"VSDB"
DATABASE_VERSION = 1
TABLE_MAGIC = b"VSTT"
TABLE_VERSION = 1


class UnknownPhonemeError(RuntimeError):
    """Signal that a query holds a phoneme missing from the viseme dictionary."""

    def __init__(self, phoneme: str, position: int) -> None:
        super().__init__(f"Unknown phoneme {phoneme!r} at position {position}")
        self.phoneme = phoneme
        self.position = position


class UnsatisfiableQueryError(RuntimeError):
    """Signal that no database sample shows the requested viseme."""


class MissingTransitionError(RuntimeError):
    """Signal that a transition table lacks a requested sample pair."""


# ---------------------------------------------------------------------------
# Dictionary and labels


@dataclass(frozen=True)
class VisemeDictionary:
    mapping: Mapping[str, str]

    def __post_init__(self) -> None:
        for phoneme, symbol in self.mapping.items():
            if symbol not in VISEME_SYMBOLS:
                raise ValueError(f"Phoneme {phoneme!r} maps to unknown viseme {symbol!r}")

    def viseme(self, phoneme: str) -> str:
        return self.mapping[phoneme]

    def __contains__(self, phoneme: object) -> bool:
        return phoneme in self.mapping

    @property
    def symbols(self) -> List[str]:
        return sorted(set(self.mapping.values()), key=VISEME_SYMBOLS.index)


def load_dictionary(path: Optional[Path] = None) -> VisemeDictionary:
    payload = load_json(path or DEFAULT_DICTIONARY)
    if not isinstance(payload, dict) or not all(isinstance(v, str) for v in payload.values()):
        raise ValueError(f"{path or DEFAULT_DICTIONARY}: dictionary must map phoneme strings to viseme symbols")
    return VisemeDictionary(dict(payload))


def save_dictionary(path: Path, dictionary: VisemeDictionary) -> Path:
    return save_json(path, dict(dictionary.mapping))


@dataclass(frozen=True)
class ExtendedLabel:
    prev: str
    cur: str
    next: str

    def __post_init__(self) -> None:
        if self.cur == EMPTY:
            raise ValueError("The current viseme of an extended label cannot be empty")
        for symbol in (self.prev, self.cur, self.next):
            if symbol != EMPTY and symbol not in VISEME_SYMBOLS:
                raise ValueError(f"Unknown viseme symbol {symbol!r}")

    @classmethod
    def parse(cls, text: str) -> "ExtendedLabel":
        if len(text) != 3:
            raise ValueError(f"Extended label must have three symbols, got {text!r}")
        return cls(text[0], text[1], text[2])

    def __str__(self) -> str:
        return f"{self.prev}{self.cur}{self.next}"


def split_query(query: str) -> List[str]:
    """Whitespace-separated phonemes; ``|`` separates words."""
    return query.replace(WORD_BREAK, f" {WORD_BREAK} ").split()


def phonemes_to_extended(phonemes: Sequence[str], dictionary: VisemeDictionary) -> List[ExtendedLabel]:
    """Map phonemes to visemes and wrap every word in empty context."""
    words: List[List[str]] = [[]]
    for position, phoneme in enumerate(phonemes):
        if phoneme == WORD_BREAK:
            words.append([])
            continue
        if phoneme not in dictionary:
            raise UnknownPhonemeError(phoneme, position)
        words[-1].append(dictionary.viseme(phoneme))

    labels = []
    for visemes in words:
        padded = [EMPTY] + visemes + [EMPTY]
        labels.extend(ExtendedLabel(padded[k - 1], padded[k], padded[k + 1]) for k in range(1, len(padded) - 1))
    return labels


# ---------------------------------------------------------------------------
# Samples


@dataclass(frozen=True)
class Annotation:
    label: ExtendedLabel
    start: int
    end: int

    def to_json(self) -> Dict:
        return {"label": str(self.label), "start": self.start, "end": self.end}


def load_annotations(path: Path) -> List[Annotation]:
    payload = load_json(path)
    if not isinstance(payload, list):
        raise ValueError(f"{path}: annotations must be a JSON list")
    annotations = []
    for index, record in enumerate(payload):
        try:
            annotations.append(Annotation(ExtendedLabel.parse(record["label"]), int(record["start"]), int(record["end"])))
        except (KeyError, TypeError) as error:
            raise ValueError(f"{path}: annotation {index} is malformed ({error})") from error
    return annotations


def save_annotations(path: Path, annotations: Iterable[Annotation]) -> Path:
    return save_json(path, [annotation.to_json() for annotation in annotations])


@dataclass
class MotionSample:
    id: int
    label: ExtendedLabel
    latents: np.ndarray
    take: Optional[str] = None
    start: Optional[int] = None

    def __post_init__(self) -> None:
        self.latents = np.asarray(self.latents, dtype=np.float64)
        if self.latents.ndim != 2 or self.latents.shape[0] < 2:
            raise ValueError(f"Sample {self.id} needs >= 2 frames of latents, got shape {self.latents.shape}")

    @property
    def frame_count(self) -> int:
        return self.latents.shape[0]


@dataclass
class VisemeDatabase:
    latent_dim: int
    samples: List[MotionSample] = field(default_factory=list)

    def __post_init__(self) -> None:
        seen = set()
        for sample in self.samples:
            if sample.latents.shape[1] != self.latent_dim:
                raise ValueError(f"Sample {sample.id} has latent size {sample.latents.shape[1]}, expected {self.latent_dim}")
            if sample.id in seen:
                raise ValueError(f"Duplicate sample id {sample.id}")
            seen.add(sample.id)
        self._by_id = {sample.id: sample for sample in self.samples}

    def __len__(self) -> int:
        return len(self.samples)

    def sample(self, sample_id: int) -> MotionSample:
        try:
            return self._by_id[sample_id]
        except KeyError as error:
            raise ValueError(f"No sample with id {sample_id}") from error

    @property
    def ids(self) -> List[int]:
        return sorted(self._by_id)


def build_database(takes: Sequence[Tuple[str, np.ndarray, Sequence[Annotation]]]) -> VisemeDatabase:
    """Cut annotated takes into samples; ids follow take order then annotation order."""
    samples: List[MotionSample] = []
    latent_dim = None
    for name, latents, annotations in takes:
        latents = np.asarray(latents, dtype=np.float64)
        if latent_dim is None:
            latent_dim = latents.shape[1]
        for annotation in annotations:
            if not 0 <= annotation.start < annotation.end <= latents.shape[0]:
                raise ValueError(
                    f"Take {name}: annotation {annotation.label} [{annotation.start}, {annotation.end}) "
                    f"outside {latents.shape[0]} frames"
                )
            samples.append(MotionSample(len(samples), annotation.label, latents[annotation.start:annotation.end].copy(),
                                        take=name, start=annotation.start))
    if latent_dim is None:
        raise ValueError("No takes given")
    LOGGER.info("Viseme database: %d sample(s) from %d take(s)", len(samples), len(takes))
    return VisemeDatabase(latent_dim, samples)


@dataclass
class CoverageReport:
    per_symbol: Dict[str, int]
    per_label: Dict[str, int]
    missing_symbols: List[str]


def coverage_report(database: VisemeDatabase, dictionary: Optional[VisemeDictionary] = None) -> CoverageReport:
    symbols = dictionary.symbols if dictionary is not None else list(VISEME_SYMBOLS)
    per_symbol = Counter(sample.label.cur for sample in database.samples)
    per_label = Counter(str(sample.label) for sample in database.samples)
    missing = [symbol for symbol in symbols if per_symbol[symbol] == 0]
    if missing:
        LOGGER.warning("No samples for viseme(s): %s", ", ".join(missing))
    return CoverageReport(dict(sorted(per_symbol.items())), dict(sorted(per_label.items())), missing)


# ---------------------------------------------------------------------------
# Transitions


@dataclass
class TransitionConfig:
    window: int = 4
    search: int = 3

    def __post_init__(self) -> None:
        if self.window < 1 or self.search < 1:
            raise ValueError("Transition window and search range must be >= 1")


@dataclass(frozen=True)
class Transition:
    """Splice ``a[:tail] + b[head:]``; ``tail`` is the first frame of a's matching window."""

    cost: float
    tail: int
    head: int


def transition_cost(a: np.ndarray, b: np.ndarray, window: int = 4, search: int = 3) -> Transition:
    """Best alignment of a's ending window against b's starting window by mean squared latent error."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"Latent sizes differ: {a.shape[1]} vs {b.shape[1]}")
    length_a, length_b = a.shape[0], b.shape[0]
    width = min(window, length_a, length_b)
    best: Optional[Transition] = None
    for end in range(max(length_a - search, width - 1), length_a):
        tail = end - width + 1
        for head in range(0, min(search - 1, length_b - width) + 1):
            cost = float(np.mean((a[tail:tail + width] - b[head:head + width]) ** 2))
            if best is None or cost < best.cost:
                best = Transition(cost, tail, head)
    return best


@dataclass
class TransitionTable:
    entries: Dict[Tuple[int, int], Transition]

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, a: int, b: int) -> Transition:
        try:
            return self.entries[(a, b)]
        except KeyError as error:
            raise MissingTransitionError(f"No transition from sample {a} to sample {b}") from error


def build_transition_table(database: VisemeDatabase, config: TransitionConfig, threads: int = 1) -> TransitionTable:
    """Transitions for every ordered sample pair; rows are computed in parallel."""
    if len(database) == 0:
        raise ValueError("Cannot build transitions for an empty database")
    ids = database.ids

    def row(a: int) -> List[Tuple[Tuple[int, int], Transition]]:
        source = database.sample(a)
        entries = []
        for b in ids:
            try:
                entries.append(((a, b), transition_cost(source.latents, database.sample(b).latents,
                                                        config.window, config.search)))
            except ValueError as error:
                raise ValueError(f"Transition ({a}, {b}): {error}") from error
        return entries

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        rows = list(pool.map(row, ids))
    entries = dict(pair for entries in rows for pair in entries)
    LOGGER.info("Transition table: %d pair(s) over %d sample(s)", len(entries), len(ids))
    return TransitionTable(entries)


# ---------------------------------------------------------------------------
# Queries


@dataclass(frozen=True)
class Candidate:
    sample_id: int
    unary: float


def candidates(query: ExtendedLabel, database: VisemeDatabase) -> List[Candidate]:
    """Samples of the best-matching context class with unary ``2 - score``."""
    matching = [sample for sample in database.samples if sample.label.cur == query.cur]
    if not matching:
        raise UnsatisfiableQueryError(f"No sample shows viseme {query.cur!r} (query {query})")
    scores = {
        sample.id: int(sample.label.prev == query.prev) + int(sample.label.next == query.next) for sample in matching
    }
    best = max(scores.values())
    return [Candidate(sample_id, float(2 - best)) for sample_id in sorted(scores) if scores[sample_id] == best]


# ---------------------------------------------------------------------------
# Files


def save_database(path: Path, database: VisemeDatabase) -> Path:
    writer = BinaryWriter(DATABASE_MAGIC)
    writer.u32(DATABASE_VERSION)
    writer.u32(database.latent_dim)
    writer.u32(len(database))
    for sample in database.samples:
        writer.u32(sample.id)
        for symbol in (sample.label.prev, sample.label.cur, sample.label.next):
            writer.text(symbol)
        writer.u32(sample.frame_count)
        writer.f32_array(sample.latents)
    return writer.write(path)


def load_database(path: Path) -> VisemeDatabase:
    reader = BinaryReader.open(path, DATABASE_MAGIC)
    reader.expect_version(DATABASE_VERSION)
    latent_dim = reader.u32()
    count = reader.u32()
    samples = []
    for _ in range(count):
        start = reader.offset
        sample_id = reader.u32()
        symbols = [reader.text() for _ in range(3)]
        frames = reader.u32()
        latents = reader.f32_array(frames * latent_dim).reshape(frames, latent_dim)
        try:
            samples.append(MotionSample(sample_id, ExtendedLabel(*symbols), latents))
        except ValueError as error:
            reader.offset = start
            raise reader.fail(f"sample {sample_id}: {error}") from error
    reader.expect_end()
    return VisemeDatabase(latent_dim, samples)


def save_transition_table(path: Path, table: TransitionTable) -> Path:
    writer = BinaryWriter(TABLE_MAGIC)
    writer.u32(TABLE_VERSION)
    writer.u32(len(table))
    for (a, b), transition in sorted(table.entries.items()):
        writer.u32(a)
        writer.u32(b)
        writer.f32(transition.cost)
        writer.u16(transition.tail)
        writer.u16(transition.head)
    return writer.write(path)


def load_transition_table(path: Path) -> TransitionTable:
    reader = BinaryReader.open(path, TABLE_MAGIC)
    reader.expect_version(TABLE_VERSION)
    count = reader.u32()
    entries = {}
    for _ in range(count):
        a, b = reader.u32(), reader.u32()
        entries[(a, b)] = Transition(reader.f32(), reader.u16(), reader.u16())
    reader.expect_end()
    return TransitionTable(entries)
