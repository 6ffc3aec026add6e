from pathlib import Path
from typing import Dict, Iterable, List, Literal, Sequence, Union

import numpy as np

from binflow.utils.io import read_lines, write_lines
from binflow.utils.isa_profiles import IsaProfile
from binflow.utils.tokenizer import END_OF_WORD, JointVocabulary


def opcode_symbols(vocab: JointVocabulary, profiles: Iterable[IsaProfile]) -> List[str]:
    """Whole-word vocabulary symbols that spell a mnemonic of any given profile."""
    mnemonics = set()
    for profile in profiles:
        mnemonics |= profile.mnemonics
    chosen = []
    for symbol in vocab.symbols:
        if symbol.endswith(END_OF_WORD) and symbol[: -len(END_OF_WORD)].lower() in mnemonics:
            chosen.append(symbol)
    return chosen


def export_embeddings(
    table: np.ndarray,
    vocab: JointVocabulary,
    filter: Literal["all", "opcode"] = "all",
    profiles: Sequence[IsaProfile] = (),
) -> List[str]:
    """
    One line per symbol: the symbol, then its embedding row.

    Values are printed with ``repr`` so parsing them back yields the stored
    floats exactly.
    """
    if table.shape[0] != len(vocab):
        raise ValueError(f"Embedding table has {table.shape[0]} rows, vocabulary has {len(vocab)} symbols")
    if filter == "all":
        symbols = list(vocab.symbols)
    elif filter == "opcode":
        symbols = opcode_symbols(vocab, profiles)
    else:
        raise ValueError(f"Unknown embedding filter '{filter}', expected 'all' or 'opcode'")
    return [" ".join([s] + [repr(float(v)) for v in table[vocab.ids[s]]]) for s in symbols]


def write_embeddings(path: Union[str, Path], lines: Sequence[str]) -> Path:
    return write_lines(path, lines)


def read_embeddings(path: Union[str, Path], dtype=np.float32) -> Dict[str, np.ndarray]:
    vectors = {}
    for line in read_lines(path):
        if not line.strip():
            continue
        symbol, *values = line.split(" ")
        vectors[symbol] = np.array([float(v) for v in values], dtype=dtype)
    return vectors
