from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from loguru import logger

from binflow.parser.base import TokenSequence
from binflow.utils.io import atomic_write_text, read_lines, write_lines


@dataclass
class CorpusReport:
    """
    Deduplicated corpus of one ISA with its vocabulary statistics.

    ``growth`` lists (program group, cumulative vocabulary size) in the order
    groups were added.
    """

    isa: str
    lines: List[str]
    vocabulary: Dict[str, int]
    blocks_in: int
    growth: List[Tuple[str, int]] = field(default_factory=list)

    @property
    def vocab_size(self) -> int:
        return len(self.vocabulary)

    @property
    def duplicates_removed(self) -> int:
        return self.blocks_in - len(self.lines)

    def to_text(self) -> str:
        rows = [
            f"isa={self.isa}",
            f"blocks_in={self.blocks_in}",
            f"blocks_unique={len(self.lines)}",
            f"duplicates_removed={self.duplicates_removed}",
            f"vocab_size={self.vocab_size}",
        ]
        rows.extend(f"growth.{i}={group},{size}" for i, (group, size) in enumerate(self.growth, start=1))
        return "\n".join(rows) + "\n"


def build_corpus(
    blocks: Sequence[TokenSequence],
    group_size: int = 1,
) -> CorpusReport:
    """
    Deduplicate normalized blocks and measure vocabulary growth.

    :param blocks: normalized blocks, all of one ISA, in program order
    :param group_size: number of consecutive programs folded into one growth step
    :return: CorpusReport with one space-separated block per line
    """
    if not blocks:
        raise ValueError("Cannot build a corpus from zero blocks")
    isas = sorted({b.isa for b in blocks})
    if len(isas) != 1:
        raise ValueError(f"Corpus blocks must share one ISA, got {isas}")
    if group_size <= 0:
        raise ValueError(f"group_size must be positive, got {group_size}")

    seen = set()
    lines: List[str] = []
    vocabulary: Dict[str, int] = {}
    growth: List[Tuple[str, int]] = []
    programs: List[str] = []
    current_group: Optional[str] = None

    for block in blocks:
        program = block.origin[0]
        if not programs or programs[-1] != program:
            programs.append(program)
            if len(programs) > 1 and (len(programs) - 1) % group_size == 0:
                growth.append((current_group, len(vocabulary)))
            if (len(programs) - 1) % group_size == 0:
                current_group = program
        text = block.text()
        if text in seen:
            continue
        seen.add(text)
        lines.append(text)
        for token in block.tokens:
            vocabulary[token] = vocabulary.get(token, 0) + 1
    growth.append((current_group, len(vocabulary)))

    report = CorpusReport(isa=isas[0], lines=lines, vocabulary=vocabulary, blocks_in=len(blocks), growth=growth)
    logger.info(
        f"Corpus {report.isa}: {report.blocks_in} blocks, {len(lines)} unique, vocabulary {report.vocab_size}"
    )
    return report


def write_corpus(report: CorpusReport, corpus_path: str, report_path: Optional[str] = None) -> Path:
    path = write_lines(corpus_path, report.lines)
    report_path = report_path or f"{corpus_path}.report"
    atomic_write_text(report_path, report.to_text())
    return path


def read_corpus(corpus_path: str) -> List[List[str]]:
    """One token list per non-empty line."""
    return [line.split(" ") for line in read_lines(corpus_path) if line.strip()]
