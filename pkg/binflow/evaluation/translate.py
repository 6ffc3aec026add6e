from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

from loguru import logger
from tabulate import tabulate
from tqdm import tqdm

from binflow.model.bundle import ModelBundle
from binflow.train.objectives import bt_length_limit
from binflow.utils.tokenizer import BpeTokenizer


@dataclass
class BinaryTranslation:
    """Translated blocks in input order; ``failures`` lists block indices emitted empty."""

    blocks: List[List[str]] = field(default_factory=list)
    failures: List[int] = field(default_factory=list)

    def tokens(self) -> List[str]:
        """The translated binary: all blocks concatenated."""
        return [t for block in self.blocks for t in block]

    def lines(self) -> List[str]:
        return [" ".join(block) for block in self.blocks]


def translate_block(
    tokens: Sequence[str],
    bundle: ModelBundle,
    tokenizer: BpeTokenizer,
    src_isa: str,
    tgt_isa: str,
    mode: str = "greedy",
    width: int = 4,
) -> List[str]:
    ids = tokenizer.encode_block(tokens)
    generated = bundle.translate([ids], src_isa, tgt_isa, mode=mode, width=width, max_len=bt_length_limit(ids))[0]
    return tokenizer.decode_tokens(generated)


def translate_binary(
    blocks: Sequence[Sequence[str]],
    bundle: ModelBundle,
    tokenizer: BpeTokenizer,
    src_isa: str,
    tgt_isa: str,
    mode: str = "greedy",
    width: int = 4,
    workers: int = 1,
    progress: bool = False,
) -> BinaryTranslation:
    """
    Translate every block independently and keep the input order.

    A block whose translation raises is logged and emitted empty.
    """
    result = BinaryTranslation()
    if not blocks:
        return result
    bundle.eval()

    def work(index: int) -> Optional[List[str]]:
        try:
            return translate_block(blocks[index], bundle, tokenizer, src_isa, tgt_isa, mode, width)
        except Exception as e:  # noqa: BLE001
            logger.warning(f"Block {index} failed to translate: {e}")
            return None

    indices = range(len(blocks))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(tqdm(pool.map(work, indices), total=len(blocks), desc="translate", disable=not progress))
    else:
        outputs = [work(i) for i in tqdm(indices, desc="translate", disable=not progress)]

    for index, output in enumerate(outputs):
        if output is None:
            result.failures.append(index)
            output = []
        result.blocks.append(output)
    if result.failures:
        logger.warning(f"{len(result.failures)} of {len(blocks)} blocks emitted empty")
    return result


def demonstration_table(
    sources: Sequence[Sequence[str]],
    translations: Sequence[Sequence[str]],
    references: Optional[Sequence[Sequence[str]]] = None,
    count: int = 5,
) -> str:
    """Side-by-side source, translation and reference for the first ``count`` blocks."""
    rows = []
    for i in range(min(count, len(sources))):
        row = [i, " ".join(sources[i]), " ".join(translations[i])]
        if references is not None:
            row.append(" ".join(references[i]))
        rows.append(row)
    headers = ["#", "source", "translation"] + (["reference"] if references is not None else [])
    return tabulate(rows, headers=headers, tablefmt="github")
