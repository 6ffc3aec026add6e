"""
Detection samples.

A ``BinarySample`` is a labeled binary as normalized token blocks of one ISA;
``samples.jsonl`` files hold one per line. ``LabeledSample`` is the same
binary encoded for the detector: every block wrapped in separators and
concatenated.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Literal, Sequence, Tuple, Union

import numpy as np

from binflow.toy.generator import ToyBinary
from binflow.utils.io import read_lines, write_lines
from binflow.utils.tokenizer import BpeTokenizer

BENIGN = 0
MALICIOUS = 1


@dataclass
class BinarySample:
    sample_id: str
    label: int
    blocks: List[List[str]] = field(default_factory=list)
    isa: str = ""

    def __post_init__(self):
        if self.label not in (BENIGN, MALICIOUS):
            raise ValueError(f"Sample '{self.sample_id}' has label {self.label}, expected 0 or 1")


@dataclass
class LabeledSample:
    sample_id: str
    ids: List[int]
    label: int

    def __post_init__(self):
        if not self.ids:
            raise ValueError(f"Sample '{self.sample_id}' has no ids")
        if self.label not in (BENIGN, MALICIOUS):
            raise ValueError(f"Sample '{self.sample_id}' has label {self.label}, expected 0 or 1")


def binary_samples(binaries: Sequence[ToyBinary], isa: str, rules: str = "C1") -> List[BinarySample]:
    return [BinarySample(b.sample_id, b.label, [block.tokens for block in b.blocks(isa, rules)], isa) for b in binaries]


def write_samples(path: Union[str, Path], samples: Sequence[BinarySample]) -> Path:
    return write_lines(path, [json.dumps(asdict(s), separators=(",", ":")) for s in samples])


def read_samples(path: Union[str, Path]) -> List[BinarySample]:
    samples = []
    for number, line in enumerate(read_lines(path), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            samples.append(BinarySample(str(record["sample_id"]), int(record["label"]), record["blocks"], record.get("isa", "")))
        except (KeyError, TypeError, json.JSONDecodeError) as e:
            raise ValueError(f"{path}:{number}: malformed sample record ({e})") from e
    return samples


def encode_sample(sample: BinarySample, tokenizer: BpeTokenizer) -> LabeledSample:
    ids = [i for block in sample.blocks for i in tokenizer.encode_block(block)]
    return LabeledSample(sample.sample_id, ids, sample.label)


def encode_samples(samples: Sequence[BinarySample], tokenizer: BpeTokenizer) -> List[LabeledSample]:
    return [encode_sample(s, tokenizer) for s in samples]


def split_samples(
    samples: Sequence,
    test_fraction: float = 0.2,
    mode: Literal["split", "all"] = "split",
    rng: np.random.Generator = None,
) -> Tuple[list, list]:
    """
    Stratified train/test split by label.

    In ``all`` mode every sample is also a test sample; training still uses
    the ``1 - test_fraction`` share.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    train, test = [], []
    for label in (BENIGN, MALICIOUS):
        members = [s for s in samples if s.label == label]
        order = rng.permutation(len(members))
        cut = int(round(len(members) * test_fraction))
        test.extend(members[i] for i in order[:cut])
        train.extend(members[i] for i in order[cut:])
    if mode == "all":
        test = list(samples)
    elif mode != "split":
        raise ValueError(f"Unknown test mode '{mode}', expected 'split' or 'all'")
    train.sort(key=lambda s: s.sample_id)
    test.sort(key=lambda s: s.sample_id)
    return train, test


def write_score_report(path: Union[str, Path], sample_ids: Sequence[str], scores: Sequence[float], labels: Sequence[int]) -> Path:
    if not len(sample_ids) == len(scores) == len(labels):
        raise ValueError(f"Report columns differ in length: {len(sample_ids)}, {len(scores)}, {len(labels)}")
    return write_lines(path, [f"{sid} {score:.6f} {label}" for sid, score, label in zip(sample_ids, scores, labels)])


def read_score_report(path: Union[str, Path]) -> Tuple[List[str], List[float], List[int]]:
    ids, scores, labels = [], [], []
    for number, line in enumerate(read_lines(path), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{number}: expected 'sample-id score label', got '{line}'")
        ids.append(parts[0])
        scores.append(float(parts[1]))
        labels.append(int(parts[2]))
    return ids, scores, labels
