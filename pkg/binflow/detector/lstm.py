"""
Recurrent sequence classifier over frozen token embeddings.

A binary is one long id sequence (its blocks concatenated). Sequences longer
than ``window`` ids are cut into windows; each window runs through the LSTM
stack, hidden states are max-pooled over time and a linear head gives one
logit per window. Window logits are pooled again (max or mean) into the
binary's logit.
"""

from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from tqdm import tqdm

from binflow.autodiff import AdamOptimizer, backward, get_tape, no_grad, ops
from binflow.autodiff.tensor import Tensor, default_dtype, tensor
from binflow.config import DetectorConfig
from binflow.model.base import Linear, Module
from binflow.model.bundle import pad_batch
from binflow.model.checkpoint import Checkpoint, load_checkpoint, save_checkpoint

DETECTOR_PREFIX = "det/"
FORGET_BIAS = 1.0


class LSTMCell(Module):
    """Gates in the order input, forget, candidate, output."""

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.hidden = hidden
        self.input = Linear(in_dim, 4 * hidden, rng)
        self.recurrent = Linear(hidden, 4 * hidden, rng, bias=False)
        self.input.bias.data[hidden: 2 * hidden] = FORGET_BIAS

    def __call__(self, x, state: Tuple[Tensor, Tensor]) -> Tuple[Tensor, Tensor]:
        h, c = state
        gates = ops.add(self.input(x), self.recurrent(h))
        i, f, g, o = ops.split(gates, 4, axis=-1)
        c = ops.add(ops.mul(ops.sigmoid(f), c), ops.mul(ops.sigmoid(i), ops.tanh(g)))
        h = ops.mul(ops.sigmoid(o), ops.tanh(c))
        return h, c

    def run(self, inputs: Tensor) -> Tensor:
        """Unroll over (B, T, D) inputs from a zero state; returns (B, T, H)."""
        batch, length, dim = inputs.shape
        zeros = np.zeros((batch, self.hidden), dtype=default_dtype())
        state = (tensor(zeros), tensor(zeros))
        outputs = []
        for t in range(length):
            step = ops.reshape(ops.slice_axis(inputs, 1, t, t + 1), (batch, dim))
            state = self(step, state)
            outputs.append(ops.reshape(state[0], (batch, 1, self.hidden)))
        return ops.concat(outputs, axis=1)


class LSTMDetector(Module):
    """
    :param embedding: (V, d) token embedding table, copied and never trained
    :param config: hidden size, layer count, window length and aggregation
    :param pad_id: id used to pad windows of unequal length
    """

    buffers = ("embedding",)

    def __init__(self, embedding: np.ndarray, config: Optional[DetectorConfig] = None, rng=None, pad_id: int = 2):
        super().__init__()
        config = config or DetectorConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        embedding = np.asarray(embedding)
        if embedding.ndim != 2:
            raise ValueError(f"Embedding table must be 2-D, got shape {embedding.shape}")
        self.config = config
        self.pad_id = pad_id
        self.embedding = embedding.astype(default_dtype(), copy=True)
        self.embedding.setflags(write=False)
        sizes = [embedding.shape[1]] + [config.hidden] * config.layers
        self.cells: List[LSTMCell] = [LSTMCell(sizes[i], sizes[i + 1], rng) for i in range(config.layers)]
        self.head = Linear(config.hidden, 1, rng)

    def windows(self, ids: Sequence[int]) -> List[List[int]]:
        ids = list(ids)
        if not ids:
            raise ValueError("Cannot score an empty id sequence")
        size = self.config.window
        return [ids[i: i + size] for i in range(0, len(ids), size)]

    def window_logits(self, windows: Sequence[Sequence[int]]) -> Tensor:
        """One logit per window, shape (N,)."""
        ids = pad_batch(windows, self.pad_id)
        mask = np.zeros(ids.shape, dtype=bool)
        for row, window in enumerate(windows):
            mask[row, : len(window)] = True
        states = ops.embedding(tensor(self.embedding), ids)
        for cell in self.cells:
            states = cell.run(states)
        pooled = ops.max_pool(states, mask)
        return ops.reshape(self.head(pooled), (len(windows),))

    def __call__(self, sequences: Sequence[Sequence[int]]) -> Tensor:
        """Binary-level logits, shape (B,)."""
        windows, owners = [], []
        for index, ids in enumerate(sequences):
            for window in self.windows(ids):
                windows.append(window)
                owners.append(index)
        logits = ops.reshape(self.window_logits(windows), (len(windows), 1))
        counts = np.bincount(owners, minlength=len(sequences))
        gather = np.zeros((len(sequences), counts.max()), dtype=np.int64)
        valid = np.zeros(gather.shape, dtype=bool)
        cursor = 0
        for index, count in enumerate(counts):
            gather[index, :count] = np.arange(cursor, cursor + count)
            valid[index, :count] = True
            cursor += count
        grouped = ops.embedding(logits, gather)
        pool = ops.max_pool if self.config.aggregate == "max" else ops.mean_pool
        return ops.reshape(pool(grouped, valid), (len(sequences),))

    def state_metadata(self, provenance: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
        metadata = {
            "kind": "detector",
            "detector": self.config.model_dump_json(),
            "pad_id": str(self.pad_id),
        }
        metadata.update({f"provenance.{k}": str(v) for k, v in (provenance or {}).items()})
        return metadata

    def save(self, path: Union[str, Path], provenance: Optional[Mapping[str, str]] = None) -> Path:
        tensors = {DETECTOR_PREFIX + name: value for name, value in self.state_dict().items()}
        return save_checkpoint(path, tensors, self.state_metadata(provenance))

    @classmethod
    def from_checkpoint(cls, checkpoint: Union[str, Path, Checkpoint]) -> "LSTMDetector":
        if not isinstance(checkpoint, Checkpoint):
            checkpoint = load_checkpoint(checkpoint)
        if checkpoint.metadata.get("kind") != "detector":
            raise ValueError(f"Checkpoint is not a detector (kind={checkpoint.metadata.get('kind')!r})")
        state = checkpoint.select(DETECTOR_PREFIX)
        config = DetectorConfig.model_validate_json(checkpoint.metadata["detector"])
        detector = cls(state["embedding"], config, pad_id=int(checkpoint.metadata.get("pad_id", 2)))
        detector.load_state_dict(state)
        detector.embedding.setflags(write=False)
        return detector.eval()


def provenance(checkpoint: Checkpoint) -> Dict[str, str]:
    prefix = "provenance."
    return {k[len(prefix):]: v for k, v in checkpoint.metadata.items() if k.startswith(prefix)}


def check_labels(labels: Sequence[int], tolerance: float = 0.1) -> None:
    """
    :raises ValueError: a class is missing or a label is not 0/1
    """
    labels = list(labels)
    if any(label not in (0, 1) for label in labels):
        raise ValueError(f"Labels must be 0 or 1, got {sorted(set(labels))}")
    positives = sum(labels)
    negatives = len(labels) - positives
    if positives == 0 or negatives == 0:
        raise ValueError(f"Detector training needs both classes, got {positives} malicious and {negatives} benign")
    share = positives / len(labels)
    if abs(share - 0.5) > tolerance:
        logger.warning(f"Unbalanced detector labels: {positives} malicious vs {negatives} benign")


def train_detector(
    sequences: Sequence[Sequence[int]],
    labels: Sequence[int],
    embedding: np.ndarray,
    config: Optional[DetectorConfig] = None,
    rng: Optional[np.random.Generator] = None,
    pad_id: int = 2,
    progress: bool = False,
) -> Tuple[LSTMDetector, List[float]]:
    """
    Fit a detector with logit binary cross-entropy and Adam.

    :param rng: the ``detector`` stream; drives initialization and batch order
    :return: the trained detector and the mean training loss of every epoch
    """
    config = config or DetectorConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    if len(sequences) != len(labels):
        raise ValueError(f"{len(sequences)} sequences but {len(labels)} labels")
    check_labels(labels)
    detector = LSTMDetector(embedding, config, rng, pad_id=pad_id)
    optimizer = AdamOptimizer(detector.named_parameters(), lr=config.lr, warmup=0)
    targets = np.asarray(labels, dtype=default_dtype())
    losses = []

    detector.train()
    for epoch in tqdm(range(config.epochs), desc="detector", disable=not progress):
        order = rng.permutation(len(sequences))
        total, batches = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start: start + config.batch_size]
            try:
                logits = detector([sequences[i] for i in batch])
                loss = ops.bce_with_logits(logits, targets[batch])
                backward(loss)
            except Exception:
                get_tape().reset()
                raise
            optimizer.step()
            total += loss.item()
            batches += 1
        losses.append(total / batches)
        logger.info(f"Detector epoch {epoch + 1}/{config.epochs} loss={losses[-1]:.6f}")
    return detector.eval(), losses


def score_binaries(detector: LSTMDetector, sequences: Sequence[Sequence[int]], batch_size: int = 36) -> List[float]:
    """Malicious probability per binary; each binary is scored independently of its batch."""
    if not sequences:
        raise ValueError("No binaries to score")
    detector.eval()
    scores: List[float] = []
    with no_grad():
        for start in range(0, len(sequences), batch_size):
            logits = detector(sequences[start: start + batch_size])
            scores.extend(float(p) for p in ops.sigmoid(logits).data)
    return scores


def score_binary(detector: LSTMDetector, ids: Sequence[int]) -> float:
    return score_binaries(detector, [ids])[0]
