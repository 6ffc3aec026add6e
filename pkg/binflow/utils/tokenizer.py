"""
Joint byte-pair encoding for a pair of normalized corpora.

Words are the space-separated tokens of a block. Each word becomes a symbol
sequence of characters followed by the end-of-word marker ``</w>``;
placeholders such as ``<HEX>`` are single symbols wherever they occur.
"""

from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from loguru import logger

from binflow.utils.io import read_lines, write_lines
from binflow.utils.isa_profiles import PLACEHOLDERS

SEP = "[/s]"
MASK = "[MASK]"
PAD = "[PAD]"
UNK = "[UNK]"
SPECIALS: Tuple[str, ...] = (SEP, MASK, PAD, UNK)
END_OF_WORD = "</w>"
MAX_LENGTH = 512

Word = Tuple[str, ...]
Pair = Tuple[str, str]


class MergeSelectionError(ValueError):
    def __init__(self, message: str, report: List[dict]):
        super().__init__(message)
        self.report = report


def split_word(token: str) -> Word:
    """Characters of ``token`` with placeholders kept whole, plus the end-of-word marker."""
    if token in SPECIALS:
        return (token, END_OF_WORD)
    symbols: List[str] = []
    i = 0
    while i < len(token):
        if token[i] == "<":
            for ph in PLACEHOLDERS:
                if token.startswith(ph, i):
                    symbols.append(ph)
                    i += len(ph)
                    break
            else:
                symbols.append(token[i])
                i += 1
        else:
            symbols.append(token[i])
            i += 1
    symbols.append(END_OF_WORD)
    return tuple(symbols)


def word_counts(corpora: Iterable[Sequence[Sequence[str]]]) -> Counter:
    counts: Counter = Counter()
    for corpus in corpora:
        for line in corpus:
            counts.update(line)
    return counts


def _merge_word(word: Word, pair: Pair, merged: str) -> Word:
    out: List[str] = []
    i = 0
    while i < len(word):
        if i < len(word) - 1 and word[i] == pair[0] and word[i + 1] == pair[1]:
            out.append(merged)
            i += 2
        else:
            out.append(word[i])
            i += 1
    return tuple(out)


def _pair_counts(vocab: Dict[Word, int]) -> Counter:
    pairs: Counter = Counter()
    for word, freq in vocab.items():
        for i in range(len(word) - 1):
            pairs[word[i], word[i + 1]] += freq
    return pairs


def learn_merge_list(counts: Counter, merge_count: int, min_frequency: int = 2) -> List[Pair]:
    """
    Greedy merge learning over word-type frequencies.

    The most frequent adjacent pair is merged each round; ties go to the
    lexicographically smallest (left, right). Learning stops after
    ``merge_count`` merges or when no pair reaches ``min_frequency``.
    """
    vocab: Dict[Word, int] = {}
    for token, freq in counts.items():
        word = split_word(token)
        vocab[word] = vocab.get(word, 0) + freq

    merges: List[Pair] = []
    pairs = _pair_counts(vocab)
    while len(merges) < merge_count and pairs:
        best_count = max(pairs.values())
        if best_count < min_frequency:
            break
        best = min(p for p, c in pairs.items() if c == best_count)
        merged = best[0] + best[1]
        merges.append(best)

        new_vocab: Dict[Word, int] = {}
        for word, freq in vocab.items():
            if best[0] in word and best[1] in word:
                new_word = _merge_word(word, best, merged)
                if new_word != word:
                    for i in range(len(word) - 1):
                        pairs[word[i], word[i + 1]] -= freq
                    for i in range(len(new_word) - 1):
                        pairs[new_word[i], new_word[i + 1]] += freq
                    word = new_word
            new_vocab[word] = new_vocab.get(word, 0) + freq
        vocab = new_vocab
        pairs = Counter({p: c for p, c in pairs.items() if c > 0})
    return merges


@dataclass
class MergeTable:
    merges: List[Pair] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.merges)) != len(self.merges):
            raise ValueError("Merge table contains duplicate pairs")

    @property
    def merge_count(self) -> int:
        return len(self.merges)

    def prefix(self, count: int) -> "MergeTable":
        return MergeTable(self.merges[:count])

    def save(self, file_path: str) -> Path:
        return write_lines(file_path, (f"{left} {right}" for left, right in self.merges))

    @classmethod
    def load(cls, file_path: str) -> "MergeTable":
        merges = []
        for line_no, line in enumerate(read_lines(file_path), start=1):
            if not line.strip():
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise ValueError(f"{file_path}:{line_no}: expected 'left right', got {line!r}")
            merges.append((parts[0], parts[1]))
        return cls(merges)


@dataclass
class JointVocabulary:
    """
    Dense symbol ids shared by an ISA pair.

    :param symbols: id -> symbol, specials first
    :param isa_sizes: per-ISA count of distinct symbols used when encoding that corpus
    """

    symbols: List[str]
    isa_sizes: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("Vocabulary contains duplicate symbols")
        missing = [s for s in SPECIALS if s not in self.symbols]
        if missing:
            raise ValueError(f"Vocabulary lacks special tokens {missing}")
        self.ids: Dict[str, int] = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def joint_size(self) -> int:
        return len(self.symbols)

    @property
    def sep_id(self) -> int:
        return self.ids[SEP]

    @property
    def mask_id(self) -> int:
        return self.ids[MASK]

    @property
    def pad_id(self) -> int:
        return self.ids[PAD]

    @property
    def unk_id(self) -> int:
        return self.ids[UNK]

    @property
    def special_ids(self) -> Tuple[int, ...]:
        return tuple(self.ids[s] for s in SPECIALS)

    def save(self, file_path: str) -> Path:
        return write_lines(file_path, (f"{s} {i}" for i, s in enumerate(self.symbols)))

    @classmethod
    def load(cls, file_path: str) -> "JointVocabulary":
        entries = []
        for line_no, line in enumerate(read_lines(file_path), start=1):
            if not line.strip():
                continue
            symbol, _, idx = line.rpartition(" ")
            if not symbol or not idx.isdigit():
                raise ValueError(f"{file_path}:{line_no}: expected 'symbol id', got {line!r}")
            entries.append((int(idx), symbol))
        entries.sort()
        if [i for i, _ in entries] != list(range(len(entries))):
            raise ValueError(f"{file_path}: ids are not dense from 0")
        return cls([s for _, s in entries])


def build_vocabulary(counts: Counter, merges: MergeTable) -> List[str]:
    """Specials, end-of-word, placeholders, base characters (sorted), then merged symbols in merge order."""
    base = set()
    for token in counts:
        base.update(split_word(token))
    symbols = list(SPECIALS) + [END_OF_WORD] + list(PLACEHOLDERS)
    seen = set(symbols)
    for s in sorted(base):
        if s not in seen:
            symbols.append(s)
            seen.add(s)
    for left, right in merges.merges:
        merged = left + right
        if merged not in seen:
            symbols.append(merged)
            seen.add(merged)
    return symbols


class BpeTokenizer:
    """
    Applies a merge table and maps symbols to ids.

    :param merges: ordered merge rules
    :param vocab: joint vocabulary consistent with the merges
    :param max_length: cap on encoded length, including both separators
    """

    def __init__(self, merges: MergeTable, vocab: JointVocabulary, max_length: int = MAX_LENGTH):
        if max_length < 2:
            raise ValueError(f"max_length must be at least 2, got {max_length}")
        self.merges = merges
        self.vocab = vocab
        self.max_length = max_length
        self._ranks: Dict[Pair, int] = {pair: i for i, pair in enumerate(merges.merges)}
        self._segment = lru_cache(maxsize=65536)(self._segment_uncached)

    def _segment_uncached(self, token: str) -> Word:
        word = list(split_word(token))
        while len(word) > 1:
            ranked = [
                (self._ranks[(word[i], word[i + 1])], i)
                for i in range(len(word) - 1)
                if (word[i], word[i + 1]) in self._ranks
            ]
            if not ranked:
                break
            rank = min(ranked)[0]
            pair = self.merges.merges[rank]
            word = list(_merge_word(tuple(word), pair, pair[0] + pair[1]))
        return tuple(word)

    def segment(self, tokens: Sequence[str]) -> List[str]:
        symbols: List[str] = []
        for token in tokens:
            symbols.extend(self._segment(token))
        return symbols

    def encode_block(self, tokens: Sequence[str]) -> List[int]:
        """[/s] + subword ids + [/s]; unknown symbols become [UNK]; long blocks are truncated."""
        ids = self.vocab.ids
        unk = self.vocab.unk_id
        body = [ids.get(s, unk) for s in self.segment(tokens)]
        if len(body) > self.max_length - 2:
            body = body[: self.max_length - 2]
        return [self.vocab.sep_id] + body + [self.vocab.sep_id]

    def decode_tokens(self, ids: Sequence[int]) -> List[str]:
        """Inverse of encode_block: separators and padding are dropped, subwords re-joined."""
        size = len(self.vocab)
        skip = {self.vocab.sep_id, self.vocab.pad_id}
        pieces = []
        for i in ids:
            i = int(i)
            if not 0 <= i < size:
                raise ValueError(f"Token id {i} out of range [0, {size})")
            if i not in skip:
                pieces.append(self.vocab.symbols[i])
        return [w for w in "".join(pieces).split(END_OF_WORD) if w]

    def corpus_symbol_count(self, corpus: Sequence[Sequence[str]]) -> int:
        used = set()
        for token in {t for line in corpus for t in line}:
            used.update(self._segment(token))
        return len(used)

    def save(self, merges_path: str, vocab_path: str) -> None:
        self.merges.save(merges_path)
        self.vocab.save(vocab_path)

    @classmethod
    def load(cls, merges_path: str, vocab_path: str, max_length: int = MAX_LENGTH) -> "BpeTokenizer":
        return cls(MergeTable.load(merges_path), JointVocabulary.load(vocab_path), max_length)


def learn_merges(
    corpus_src: Sequence[Sequence[str]],
    corpus_tgt: Sequence[Sequence[str]],
    merge_count: int,
    mode: str = "joint",
    min_frequency: int = 2,
    isa_names: Tuple[str, str] = ("src", "tgt"),
) -> Tuple[MergeTable, JointVocabulary]:
    """
    Learn merges for an ISA pair.

    :param mode: "joint" learns on the concatenated corpora; "separate" learns on
        each corpus and takes the union of both merge lists
    :return: merge table and joint vocabulary with per-ISA sizes filled in
    """
    if merge_count < 0:
        raise ValueError(f"merge_count must be non-negative, got {merge_count}")
    if not corpus_src or not corpus_tgt:
        raise ValueError("Both corpora must be non-empty")
    if mode not in ("joint", "separate"):
        raise ValueError(f"Unknown BPE mode {mode!r}, expected 'joint' or 'separate'")

    counts = word_counts([corpus_src, corpus_tgt])
    if mode == "joint":
        merges = learn_merge_list(counts, merge_count, min_frequency)
    else:
        merges = learn_merge_list(word_counts([corpus_src]), merge_count, min_frequency)
        known = set(merges)
        for pair in learn_merge_list(word_counts([corpus_tgt]), merge_count, min_frequency):
            if pair not in known:
                merges.append(pair)
                known.add(pair)

    table = MergeTable(merges)
    vocab = JointVocabulary(build_vocabulary(counts, table))
    tokenizer = BpeTokenizer(table, vocab)
    vocab.isa_sizes = {
        isa_names[0]: tokenizer.corpus_symbol_count(corpus_src),
        isa_names[1]: tokenizer.corpus_symbol_count(corpus_tgt),
    }
    logger.info(
        f"BPE {mode}: {table.merge_count} merges, joint vocabulary {vocab.joint_size}, "
        f"per-ISA {vocab.isa_sizes}"
    )
    return table, vocab


def check_sizes(size_src: int, size_tgt: int, max_discrepancy: float = 0.15, max_size: int = 12000):
    """
    :return: (relative discrepancy, list of failed constraint names)
    """
    largest = max(size_src, size_tgt)
    discrepancy = abs(size_src - size_tgt) / largest if largest else 0.0
    failures = []
    if discrepancy >= max_discrepancy:
        failures.append("discrepancy")
    if largest >= max_size:
        failures.append("size_cap")
    return discrepancy, failures


def select_merge_count(
    corpus_src: Sequence[Sequence[str]],
    corpus_tgt: Sequence[Sequence[str]],
    candidates: Sequence[int],
    max_discrepancy: float = 0.15,
    max_size: int = 12000,
    min_frequency: int = 2,
) -> Tuple[int, List[dict]]:
    """
    Largest candidate merge count whose per-ISA vocabularies are balanced and capped.

    Merges for a smaller count are a prefix of those for a larger one, so one
    learning pass at the largest candidate serves all of them.
    """
    if not candidates:
        raise ValueError("No merge-count candidates given")
    full, _ = learn_merges(corpus_src, corpus_tgt, max(candidates), min_frequency=min_frequency)
    counts = word_counts([corpus_src, corpus_tgt])

    report = []
    for candidate in sorted(set(candidates)):
        table = full.prefix(candidate)
        tokenizer = BpeTokenizer(table, JointVocabulary(build_vocabulary(counts, table)))
        size_src = tokenizer.corpus_symbol_count(corpus_src)
        size_tgt = tokenizer.corpus_symbol_count(corpus_tgt)
        discrepancy, failures = check_sizes(size_src, size_tgt, max_discrepancy, max_size)
        report.append(
            {
                "merge_count": candidate,
                "learned_merges": table.merge_count,
                "size_src": size_src,
                "size_tgt": size_tgt,
                "discrepancy": discrepancy,
                "failed": failures,
            }
        )

    passing = [row["merge_count"] for row in report if not row["failed"]]
    if not passing:
        raise MergeSelectionError("No merge-count candidate satisfies the vocabulary constraints", report)
    chosen = max(passing)
    logger.info(f"Selected merge count {chosen} from {sorted(set(candidates))}")
    return chosen, report
