from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from binflow.autodiff import ops
from binflow.autodiff.tensor import Tensor, default_dtype, no_grad, parameter
from binflow.config import FlowConfig, ModelConfig
from binflow.model.base import Dropout, Linear, Module
from binflow.model.checkpoint import Checkpoint
from binflow.model.flows import FlowStack, build_flow_pair, transform_latent
from binflow.model.transformer import Decoder, Encoder

FLOW_PREFIX = "flow/"


@dataclass
class EncodedBlock:
    """Encoder output for a batch of blocks: hidden states, pooled latent, padding mask."""

    hidden: Tensor
    latent: Tensor
    mask: np.ndarray


def pad_batch(sequences: Sequence[Sequence[int]], pad_id: int) -> np.ndarray:
    if not sequences:
        raise ValueError("Cannot pad an empty batch")
    width = max(len(seq) for seq in sequences)
    if width == 0:
        raise ValueError("Cannot pad a batch of empty sequences")
    batch = np.full((len(sequences), width), pad_id, dtype=np.int64)
    for i, seq in enumerate(sequences):
        batch[i, : len(seq)] = seq
    return batch


def _as_batch(ids) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise ValueError(f"Expected a nonempty (batch, length) id array, got shape {ids.shape}")
    return ids


class ModelBundle(Module):
    """
    All parameters of one ISA pair.

    One token embedding table shared by every encoder and decoder, learned
    position embeddings, one architecture embedding per ISA, an encoder, a
    decoder, an output projection and a flow stack per ISA, the pooling
    projection W and a shared masked-LM head.

    :param vocab_size: joint vocabulary size
    :param isas: the pair, source first
    :param rng: generator for parameter initialization
    :param dropout_rng: generator for dropout masks; ``None`` disables dropout
    """

    def __init__(
        self,
        vocab_size: int,
        isas: Sequence[str],
        config: Optional[ModelConfig] = None,
        flow_config: Optional[FlowConfig] = None,
        rng: Optional[np.random.Generator] = None,
        dropout_rng: Optional[np.random.Generator] = None,
        sep_id: int = 0,
        pad_id: int = 2,
    ):
        super().__init__()
        isas = tuple(isas)
        if len(isas) != 2 or isas[0] == isas[1]:
            raise ValueError(f"A bundle needs two distinct ISAs, got {isas}")
        config = config or ModelConfig()
        flow_config = flow_config or FlowConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        dim = config.dim
        self.config = config
        self.flow_config = flow_config
        self.isas: Tuple[str, str] = isas
        self.vocab_size = vocab_size
        self.sep_id = sep_id
        self.pad_id = pad_id

        scale = dim ** -0.5
        dtype = default_dtype()
        self.token_emb = parameter(rng.normal(0.0, scale, (vocab_size, dim)).astype(dtype))
        self.pos_emb = parameter(rng.normal(0.0, scale, (config.max_positions, dim)).astype(dtype))
        self.arch_emb = parameter(rng.normal(0.0, scale, (2, dim)).astype(dtype))

        self.dropout = Dropout(config.dropout, dropout_rng)
        self.encoders: Dict[str, Encoder] = {isa: Encoder(config, rng, self.dropout) for isa in isas}
        self.decoders: Dict[str, Decoder] = {isa: Decoder(config, rng, self.dropout) for isa in isas}
        self.pool = Linear(dim, dim, rng, bias=False)
        self.mlm_head = Linear(dim, vocab_size, rng)
        self.out_proj: Dict[str, Linear] = {}
        if not config.tie_output:
            self.out_proj = {isa: Linear(dim, vocab_size, rng) for isa in isas}
        self.flows: Dict[str, FlowStack] = build_flow_pair(dim, flow_config, rng, isas)
        logger.debug(f"Built bundle {isas} d={dim} vocab={vocab_size} flows={flow_config.label}")

    @property
    def dim(self) -> int:
        return self.config.dim

    @staticmethod
    def _flow_names(named: Dict[str, object], prefix: str) -> Dict[str, object]:
        renamed = {}
        for name, value in named.items():
            local = name[len(prefix):]
            if local.startswith("flows."):
                name = prefix + FLOW_PREFIX + local[len("flows."):]
            renamed[name] = value
        return renamed

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        return self._flow_names(super().named_parameters(prefix), prefix)

    def named_buffers(self, prefix: str = ""):
        return self._flow_names(super().named_buffers(prefix), prefix)

    def arch_index(self, isa: str) -> int:
        if isa not in self.isas:
            raise ValueError(f"Unknown ISA '{isa}' for bundle {self.isas}")
        return self.isas.index(isa)

    def other(self, isa: str) -> str:
        return self.isas[1 - self.arch_index(isa)]

    def padding_mask(self, ids: np.ndarray) -> np.ndarray:
        return ids != self.pad_id

    def embed_inputs(self, ids, isa: str) -> Tensor:
        """``token_emb[id_t] + pos_emb[t] + arch_emb[isa]`` for every position."""
        arch = self.arch_index(isa)
        ids = _as_batch(ids)
        length = ids.shape[1]
        if length > self.config.max_positions:
            raise ValueError(f"Sequence of {length} ids exceeds the {self.config.max_positions} positions")
        tokens = ops.embedding(self.token_emb, ids)
        positions = ops.embedding(self.pos_emb, np.arange(length))
        return ops.add(ops.add(tokens, positions), ops.embedding(self.arch_emb, np.int64(arch)))

    def pool_states(self, hidden, mask: np.ndarray) -> Tensor:
        """``z = W (max_pool(h) + mean_pool(h) + h_0)`` over the valid positions."""
        batch, _, dim = hidden.shape
        first = ops.reshape(ops.slice_axis(hidden, 1, 0, 1), (batch, dim))
        pooled = ops.add(ops.add(ops.max_pool(hidden, mask), ops.mean_pool(hidden, mask)), first)
        return self.pool(pooled)

    def encode(self, ids, isa: str) -> EncodedBlock:
        ids = _as_batch(ids)
        mask = self.padding_mask(ids)
        hidden = self.encoders[isa](self.embed_inputs(ids, isa), mask)
        return EncodedBlock(hidden=hidden, latent=self.pool_states(hidden, mask), mask=mask)

    def project(self, states, isa: str) -> Tensor:
        if self.config.tie_output:
            return ops.matmul(states, ops.transpose(self.token_emb))
        return self.out_proj[isa](states)

    def decoder_states(self, prev_ids, isa: str, memory=None, memory_mask=None) -> Tensor:
        prev_ids = _as_batch(prev_ids)
        x = self.embed_inputs(prev_ids, isa)
        return self.decoders[isa](x, self.padding_mask(prev_ids), memory, memory_mask)

    def decode(self, prev_ids, isa: str, latent=None, memory=None, memory_mask=None) -> Tensor:
        """
        Decoder logits over the gold prefix, shape (B, T, V).

        Without a latent the gate mixes in a zero vector (language-model use).
        """
        states = self.decoder_states(prev_ids, isa, memory, memory_mask)
        if latent is None:
            latent = Tensor(np.zeros((states.shape[0], self.dim), dtype=states.data.dtype))
        out, _ = self.decoders[isa].gate(states, latent)
        return self.project(out, isa)

    def decode_step(self, prev_ids, latent, encoded: Optional[EncodedBlock], isa: str) -> np.ndarray:
        """Next-token distribution after ``prev_ids``, shape (B, V)."""
        memory = encoded.hidden if encoded is not None else None
        memory_mask = encoded.mask if encoded is not None else None
        with no_grad():
            logits = self.decode(prev_ids, isa, latent, memory, memory_mask)
            last = ops.slice_axis(logits, 1, logits.shape[1] - 1, logits.shape[1])
            return ops.softmax(ops.reshape(last, (logits.shape[0], -1)), axis=-1).data

    def mlm_logits(self, hidden) -> Tensor:
        return self.mlm_head(hidden)

    def generate(
        self,
        latent,
        encoded: Optional[EncodedBlock],
        isa: str,
        mode: str = "greedy",
        width: int = 4,
        max_len: Optional[int] = None,
    ) -> List[List[int]]:
        """
        Autoregressive generation from [/s] until [/s] or ``max_len`` ids.

        Runs without dropout and without recording gradients.
        :return: one id list per batch row, starting with [/s]
        """
        if mode not in ("greedy", "beam"):
            raise ValueError(f"Unknown decoding mode '{mode}'")
        limit = min(max_len or self.config.max_positions, self.config.max_positions)
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                if mode == "greedy":
                    return self._greedy(latent, encoded, isa, limit)
                results = []
                for row in range(latent.shape[0]):
                    results.append(self._beam(_row(latent, row), _row_block(encoded, row), isa, width, limit))
                return results
        finally:
            self.train(was_training)

    def _logits_last(self, seqs: np.ndarray, latent, encoded: Optional[EncodedBlock], isa: str) -> np.ndarray:
        memory = encoded.hidden if encoded is not None else None
        memory_mask = encoded.mask if encoded is not None else None
        logits = self.decode(seqs, isa, latent, memory, memory_mask)
        return logits.data[:, -1, :]

    def _greedy(self, latent, encoded, isa: str, limit: int) -> List[List[int]]:
        batch = latent.shape[0]
        seqs = np.full((batch, 1), self.sep_id, dtype=np.int64)
        finished = np.zeros(batch, dtype=bool)
        while seqs.shape[1] < limit and not finished.all():
            nxt = np.argmax(self._logits_last(seqs, latent, encoded, isa), axis=-1)
            nxt = np.where(finished, self.pad_id, nxt)
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            finished |= nxt == self.sep_id
        results = []
        for row in seqs:
            out = [int(row[0])]
            for token in row[1:]:
                if token == self.pad_id and out[-1] == self.sep_id:
                    break
                out.append(int(token))
                if token == self.sep_id:
                    break
            results.append(out)
        return results

    def _beam(self, latent, encoded, isa: str, width: int, limit: int) -> List[int]:
        beams: List[Tuple[List[int], float]] = [([self.sep_id], 0.0)]
        done: List[Tuple[List[int], float]] = []
        while beams and len(beams[0][0]) < limit and len(done) < width:
            count = len(beams)
            seqs = np.array([seq for seq, _ in beams], dtype=np.int64)
            logits = self._logits_last(seqs, _tile(latent, count), _tile_block(encoded, count), isa)
            shifted = logits - logits.max(axis=-1, keepdims=True)
            logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
            candidates = []
            for i, (_, score) in enumerate(beams):
                for token in np.argsort(-logits[i], kind="stable")[:width]:
                    candidates.append((score + float(logp[i, token]), i, int(token)))
            candidates.sort(key=lambda c: -c[0])
            next_beams = []
            for score, i, token in candidates[:width]:
                seq = beams[i][0] + [token]
                (done if token == self.sep_id else next_beams).append((seq, score))
            beams = next_beams
        pool = done + beams
        return max(pool, key=lambda item: item[1])[0]

    def translate(self, ids, src_isa: str, tgt_isa: str, mode: str = "greedy", width: int = 4, max_len: Optional[int] = None):
        """Encode in ``src_isa``, move the latent through the flows, generate in ``tgt_isa``."""
        with no_grad():
            encoded = self.encode(ids, src_isa)
            latent = transform_latent(encoded.latent, self.flows[src_isa], self.flows[tgt_isa])
        return self.generate(latent, encoded, tgt_isa, mode=mode, width=width, max_len=max_len)

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, dropout_rng: Optional[np.random.Generator] = None) -> "ModelBundle":
        """Rebuild a translator bundle from checkpoint metadata and load its tensors; optimizer moments are ignored."""
        meta = checkpoint.metadata
        if meta.get("kind") != "translator":
            raise ValueError(f"Checkpoint is not a translator (kind={meta.get('kind')!r})")
        bundle = cls(
            int(meta["vocab_size"]),
            meta["isas"].split(","),
            ModelConfig.model_validate_json(meta["model"]),
            FlowConfig.model_validate_json(meta["flow"]),
            dropout_rng=dropout_rng,
            sep_id=int(meta.get("sep_id", 0)),
            pad_id=int(meta.get("pad_id", 2)),
        )
        bundle.load_state_dict({k: v for k, v in checkpoint.tensors.items() if not k.startswith("optim/")})
        return bundle


def _row(tensor, row: int) -> Tensor:
    return Tensor(tensor.data[row : row + 1], dtype=tensor.data.dtype)


def _row_block(encoded: Optional[EncodedBlock], row: int) -> Optional[EncodedBlock]:
    if encoded is None:
        return None
    return EncodedBlock(_row(encoded.hidden, row), _row(encoded.latent, row), encoded.mask[row : row + 1])


def _tile(tensor, count: int) -> Tensor:
    return Tensor(np.repeat(tensor.data, count, axis=0), dtype=tensor.data.dtype)


def _tile_block(encoded: Optional[EncodedBlock], count: int) -> Optional[EncodedBlock]:
    if encoded is None:
        return None
    return EncodedBlock(_tile(encoded.hidden, count), _tile(encoded.latent, count), np.repeat(encoded.mask, count, axis=0))
