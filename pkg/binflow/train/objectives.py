"""
Training objectives: causal and masked language modeling for pretraining,
denoising auto-encoding, back-translation and flow maximum likelihood.

Batches are lists of id sequences that start and end with [/s]; they are
padded here.
"""

import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from binflow.autodiff import ops
from binflow.autodiff.tensor import Tensor, no_grad
from binflow.config import MaskConfig
from binflow.model.bundle import ModelBundle, pad_batch
from binflow.model.flows import nll_loss, transform_latent
from binflow.utils.tokenizer import MAX_LENGTH, JointVocabulary


class Specials(NamedTuple):
    sep: int = 0
    mask: int = 1
    pad: int = 2
    unk: int = 3

    @classmethod
    def from_vocab(cls, vocab: JointVocabulary) -> "Specials":
        return cls(vocab.sep_id, vocab.mask_id, vocab.pad_id, vocab.unk_id)


@dataclass
class MaskedSample:
    """Inputs after replacement, original ids as labels, and the selected positions."""

    inputs: np.ndarray
    labels: np.ndarray
    positions: np.ndarray

    @property
    def label_ids(self) -> np.ndarray:
        return self.labels[self.positions]


@dataclass
class BackTranslation:
    loss: Optional[Tensor]
    skipped: int = 0
    synthetic: List[List[int]] = field(default_factory=list)


def make_mlm_sample(
    ids,
    vocab_size: int,
    rng: np.random.Generator,
    config: Optional[MaskConfig] = None,
    specials: Specials = Specials(),
) -> MaskedSample:
    """
    Select non-special tokens with probability ``rate``; replace a selected
    token with [MASK], a random non-special token, or keep it, by the splits.
    """
    config = config or MaskConfig()
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("Cannot mask an empty sequence")
    candidates = ~np.isin(ids, np.array(specials))
    selected = candidates & (rng.random(ids.shape) < config.rate)
    roll = rng.random(ids.shape)
    to_mask = selected & (roll < config.mask_split)
    to_random = selected & (roll >= config.mask_split) & (roll < config.mask_split + config.random_split)

    inputs = ids.copy()
    inputs[to_mask] = specials.mask
    pool = np.setdiff1d(np.arange(vocab_size), np.array(specials))
    if to_random.any() and pool.size:
        inputs[to_random] = rng.choice(pool, size=int(to_random.sum()))
    return MaskedSample(inputs=inputs, labels=ids.copy(), positions=selected)


def add_noise(ids: Sequence[int], swap_fraction: float, rng: np.random.Generator) -> List[int]:
    """``ceil(fraction * len)`` random adjacent transpositions."""
    noised = list(ids)
    if len(noised) < 2:
        return noised
    for _ in range(math.ceil(swap_fraction * len(noised))):
        i = int(rng.integers(0, len(noised) - 1))
        noised[i], noised[i + 1] = noised[i + 1], noised[i]
    return noised


def _noise_block(block: Sequence[int], swap_fraction: float, rng: np.random.Generator) -> List[int]:
    # [/s] boundaries stay in place
    return [block[0], *add_noise(block[1:-1], swap_fraction, rng), block[-1]]


def _shift_targets(batch: Sequence[Sequence[int]], pad_id: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    ids = pad_batch(batch, pad_id)
    if ids.shape[1] < 2:
        raise ValueError("Shifted decoding needs sequences of at least 2 ids")
    targets = ids[:, 1:]
    return ids[:, :-1], targets, (targets != pad_id).astype(np.float64)


def clm_loss(batch: Sequence[Sequence[int]], isa: str, bundle: ModelBundle) -> Tensor:
    """Causal language modeling on the ISA's decoder, without memory and with a zero latent."""
    inputs, targets, weights = _shift_targets(batch, bundle.pad_id)
    logits = bundle.decode(inputs, isa)
    return ops.cross_entropy(logits, targets, weights)


def mlm_loss(
    batch: Sequence[Sequence[int]],
    isa: str,
    bundle: ModelBundle,
    rng: np.random.Generator,
    config: Optional[MaskConfig] = None,
    specials: Specials = Specials(),
) -> Tensor:
    """Masked language modeling on the ISA's encoder through the shared head."""
    ids = pad_batch(batch, bundle.pad_id)
    sample = make_mlm_sample(ids, bundle.vocab_size, rng, config, specials)
    encoded = bundle.encode(sample.inputs, isa)
    logits = bundle.mlm_logits(encoded.hidden)
    return ops.cross_entropy(logits, sample.labels, sample.positions.astype(np.float64))


def reconstruction_loss(
    inputs: Sequence[Sequence[int]],
    input_isa: str,
    targets: Sequence[Sequence[int]],
    output_isa: str,
    bundle: ModelBundle,
    transform: bool = False,
) -> Tensor:
    """
    Encode ``inputs`` with the ``input_isa`` encoder and score ``targets``
    under the ``output_isa`` decoder, conditioned on the pooled latent. With
    ``transform`` the latent is first carried through the flows.
    """
    encoded = bundle.encode(pad_batch(inputs, bundle.pad_id), input_isa)
    latent = encoded.latent
    if transform:
        latent = transform_latent(latent, bundle.flows[input_isa], bundle.flows[output_isa])
    prev, gold, weights = _shift_targets(targets, bundle.pad_id)
    logits = bundle.decode(prev, output_isa, latent, encoded.hidden, encoded.mask)
    return ops.cross_entropy(logits, gold, weights)


def dae_loss(
    batch: Sequence[Sequence[int]],
    isa: str,
    bundle: ModelBundle,
    rng: np.random.Generator,
    swap_fraction: float = 0.1,
    cross_encoder: bool = False,
) -> Tensor:
    """
    Reconstruct clean blocks from swap-noised copies.

    ``cross_encoder`` encodes the noised block with the other ISA's encoder
    and decodes with this ISA's decoder.
    """
    noised = [_noise_block(block, swap_fraction, rng) for block in batch]
    encoder_isa = bundle.other(isa) if cross_encoder else isa
    return reconstruction_loss(noised, encoder_isa, batch, isa, bundle)


def bt_length_limit(block: Sequence[int]) -> int:
    return min(MAX_LENGTH, 2 * len(block) + 10)


def back_translate(
    batch: Sequence[Sequence[int]],
    src_isa: str,
    tgt_isa: str,
    bundle: ModelBundle,
    mode: str = "greedy",
    width: int = 4,
) -> BackTranslation:
    """
    Translate ``batch`` from ``src_isa`` to ``tgt_isa`` without gradients, then
    train the reverse direction to rebuild the originals from the synthetic
    blocks. Empty synthetic translations are skipped.
    """
    limit = max(bt_length_limit(block) for block in batch)
    with no_grad():
        encoded = bundle.encode(pad_batch(batch, bundle.pad_id), src_isa)
        latent = transform_latent(encoded.latent, bundle.flows[src_isa], bundle.flows[tgt_isa])
    synthetic = bundle.generate(latent, encoded, tgt_isa, mode=mode, width=width, max_len=limit)

    kept_src, kept_syn = [], []
    for original, generated in zip(batch, synthetic):
        body = [i for i in generated[1:] if i != bundle.sep_id]
        if not body:
            continue
        if generated[-1] != bundle.sep_id:
            generated = generated[: bundle.config.max_positions - 1] + [bundle.sep_id]
        kept_src.append(list(original))
        kept_syn.append(list(generated))
    skipped = len(batch) - len(kept_src)
    if not kept_src:
        return BackTranslation(loss=None, skipped=skipped, synthetic=synthetic)
    loss = reconstruction_loss(kept_syn, tgt_isa, kept_src, src_isa, bundle, transform=True)
    return BackTranslation(loss=loss, skipped=skipped, synthetic=synthetic)


def mle_loss(batch: Sequence[Sequence[int]], isa: str, bundle: ModelBundle) -> Tensor:
    """Flow negative log-likelihood of the batch's latents; the encoder receives no gradient."""
    with no_grad():
        latent = bundle.encode(pad_batch(batch, bundle.pad_id), isa).latent.data
    return nll_loss(Tensor(latent, dtype=latent.dtype), bundle.flows[isa])
