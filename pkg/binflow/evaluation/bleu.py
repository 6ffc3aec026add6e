from dataclasses import dataclass, field
from typing import List, Sequence, Union

from loguru import logger
from sacrebleu.metrics import BLEU

SMOOTHING = 1e-9
MAX_ORDER = 4


@dataclass
class BleuReport:
    """
    Corpus BLEU on a 0..1 scale.

    ``score`` is the geometric mean of clipped n-gram precisions times the
    brevity penalty; ``mean_precision`` is the plain arithmetic mean of the
    same precisions. ``empty`` flags a zero-length hypothesis corpus.
    """

    score: float
    precisions: List[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    mean_precision: float
    counts: List[int] = field(default_factory=list)
    totals: List[int] = field(default_factory=list)
    empty: bool = False

    def to_text(self) -> str:
        rows = [f"bleu={self.score:.6f}", f"mean_precision={self.mean_precision:.6f}"]
        rows.extend(f"p{n}={p:.6f}" for n, p in enumerate(self.precisions, start=1))
        rows.extend(
            [
                f"brevity_penalty={self.brevity_penalty:.6f}",
                f"hyp_len={self.hyp_len}",
                f"ref_len={self.ref_len}",
                f"smoothing={SMOOTHING:g}",
                f"empty={str(self.empty).lower()}",
            ]
        )
        return "\n".join(rows) + "\n"


def _line(item: Union[str, Sequence[str]]) -> str:
    return item if isinstance(item, str) else " ".join(item)


def bleu(hypotheses: Sequence[Union[str, Sequence[str]]], references: Sequence[Union[str, Sequence[str]]]) -> BleuReport:
    """
    Corpus BLEU over whitespace-tokenized lines, one reference per line.

    :raises ValueError: line counts differ
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"Hypothesis and reference line counts differ: {len(hypotheses)} vs {len(references)}")
    hyps = [_line(h) for h in hypotheses]
    refs = [_line(r) for r in references]
    ref_len = sum(len(r.split()) for r in refs)
    hyp_len = sum(len(h.split()) for h in hyps)
    if hyp_len == 0:
        logger.warning("Empty hypothesis corpus; BLEU is 0")
        return BleuReport(0.0, [0.0] * MAX_ORDER, 0.0, 0, ref_len, 0.0, [0] * MAX_ORDER, [0] * MAX_ORDER, empty=True)

    metric = BLEU(tokenize="none", smooth_method="floor", smooth_value=SMOOTHING, max_ngram_order=MAX_ORDER)
    result = metric.corpus_score(hyps, [refs])
    exact = [c / t if t else 0.0 for c, t in zip(result.counts, result.totals)]
    return BleuReport(
        score=result.score / 100.0,
        precisions=[p / 100.0 for p in result.precisions],
        brevity_penalty=result.bp,
        hyp_len=result.sys_len,
        ref_len=result.ref_len,
        mean_precision=sum(exact) / MAX_ORDER,
        counts=list(result.counts),
        totals=list(result.totals),
    )
