import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from loguru import logger
from tqdm import tqdm

from binflow.autodiff import AdamOptimizer, NonFiniteError, OptimizerState, Tensor, backward, get_tape, no_grad
from binflow.config import TrainingConfig
from binflow.model.bundle import FLOW_PREFIX, ModelBundle, pad_batch
from binflow.model.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from binflow.train.objectives import Specials, back_translate, clm_loss, dae_loss, mle_loss, mlm_loss
from binflow.utils.io import atomic_write_text
from binflow.utils.rng import NamedStreams

METRIC_FIELDS = ("dae_src", "dae_tgt", "bt_s2t", "bt_t2s", "mle_src", "mle_tgt", "total", "ema")
OPTIM_M = "optim/m/"
OPTIM_V = "optim/v/"


class TrainingAborted(RuntimeError):
    """Raised when a non-finite loss stops training; the last good checkpoint stays on disk."""


@dataclass
class StepMetrics:
    step: int
    values: Dict[str, float] = field(default_factory=dict)

    def to_line(self) -> str:
        return " ".join([str(self.step)] + [f"{self.values[name]:.6f}" for name in METRIC_FIELDS])

    @classmethod
    def from_line(cls, line: str) -> "StepMetrics":
        parts = line.split()
        if len(parts) != len(METRIC_FIELDS) + 1:
            raise ValueError(f"Malformed metrics line: {line!r}")
        return cls(int(parts[0]), {name: float(v) for name, v in zip(METRIC_FIELDS, parts[1:])})


class Trainer:
    """
    Two-phase training of one ``ModelBundle``.

    Phase 1 pretrains every encoder with MLM and every decoder with CLM, the
    two ISAs interleaved inside each step. Phase 2 optimizes
    ``lambda_dae * DAE + lambda_bt * BT + lambda_mle * MLE`` summed over both
    ISAs and both directions, until the exponential moving average of the
    total drops below ``loss_stop`` or ``max_steps`` is reached.

    The MLE term enters the total as the flow NLL minus the lowest NLL seen so
    far for that ISA, so every component stays non-negative while the flow
    gradient is unchanged. Flow parameters are clipped as their own group.

    :param corpora: ISA name -> encoded blocks, each starting and ending with [/s]
    :param checkpoint_path: checkpoint rewritten every ``checkpoint_every`` steps
    :param metrics_path: optional per-step metrics log
    :param provenance: extra string tags stored in checkpoint metadata
    """

    def __init__(
        self,
        bundle: ModelBundle,
        corpora: Mapping[str, Sequence[Sequence[int]]],
        config: TrainingConfig,
        streams: NamedStreams,
        checkpoint_path: Union[str, Path],
        metrics_path: Union[str, Path, None] = None,
        specials: Specials = Specials(),
        provenance: Optional[Mapping[str, str]] = None,
    ):
        self.bundle = bundle
        self.config = config
        self.streams = streams
        self.specials = specials
        self.checkpoint_path = Path(checkpoint_path)
        self.metrics_path = Path(metrics_path) if metrics_path else None
        self.provenance = dict(provenance or {})
        self.src, self.tgt = bundle.isas
        self.corpora = {isa: self._usable(isa, corpora.get(isa, ())) for isa in bundle.isas}

        params = bundle.named_parameters()
        self.optimizer = AdamOptimizer(
            params,
            lr=config.lr,
            warmup=config.warmup,
            max_grad_norm=config.max_grad_norm,
            groups=[[name for name in params if name.startswith(FLOW_PREFIX)]],
        )
        self.step = 0
        self.pretrain_step = 0
        self.ema: Optional[float] = None
        self.bt_skipped = 0
        self.mle_floor: Dict[str, float] = {}
        self.history: List[StepMetrics] = []

    def _usable(self, isa: str, blocks: Sequence[Sequence[int]]) -> List[List[int]]:
        limit = self.bundle.config.max_positions
        kept = [list(b) for b in blocks if 2 <= len(b) <= limit]
        if len(kept) < len(blocks):
            logger.warning(f"Dropped {len(blocks) - len(kept)} {isa} blocks outside [2, {limit}] ids")
        if not kept:
            raise ValueError(f"No usable training blocks for ISA '{isa}'")
        return kept

    def sample_batch(self, isa: str) -> List[List[int]]:
        corpus = self.corpora[isa]
        picks = self.streams["batch"].integers(0, len(corpus), size=self.config.batch_size)
        return [corpus[i] for i in picks]

    # checkpoint state

    def state_tensors(self) -> Dict[str, np.ndarray]:
        tensors = self.bundle.state_dict()
        for name, value in self.optimizer.state.m.items():
            tensors[OPTIM_M + name] = value
        for name, value in self.optimizer.state.v.items():
            tensors[OPTIM_V + name] = value
        return tensors

    def state_metadata(self) -> Dict[str, str]:
        metadata = {
            "kind": "translator",
            "isas": ",".join(self.bundle.isas),
            "vocab_size": str(self.bundle.vocab_size),
            "sep_id": str(self.bundle.sep_id),
            "pad_id": str(self.bundle.pad_id),
            "model": self.bundle.config.model_dump_json(),
            "flow": self.bundle.flow_config.model_dump_json(),
            "step": str(self.step),
            "pretrain_step": str(self.pretrain_step),
            "optim_step": str(self.optimizer.state.step),
            "ema": "" if self.ema is None else repr(self.ema),
            "bt_skipped": str(self.bt_skipped),
            "mle_floor": json.dumps(self.mle_floor, sort_keys=True),
            "streams": json.dumps(self.streams.state_dict(), sort_keys=True),
        }
        metadata.update({f"provenance.{k}": str(v) for k, v in self.provenance.items()})
        return metadata

    def save(self) -> Path:
        return save_checkpoint(self.checkpoint_path, self.state_tensors(), self.state_metadata())

    def restore(self, checkpoint: Checkpoint) -> None:
        meta = checkpoint.metadata
        model_state = {k: v for k, v in checkpoint.tensors.items() if not k.startswith("optim/")}
        self.bundle.load_state_dict(model_state)
        self.optimizer.state = OptimizerState(
            step=int(meta.get("optim_step", 0)),
            m=dict(checkpoint.select(OPTIM_M)),
            v=dict(checkpoint.select(OPTIM_V)),
        )
        self.step = int(meta.get("step", 0))
        self.pretrain_step = int(meta.get("pretrain_step", 0))
        self.ema = float(meta["ema"]) if meta.get("ema") else None
        self.bt_skipped = int(meta.get("bt_skipped", 0))
        self.mle_floor = {isa: float(v) for isa, v in json.loads(meta.get("mle_floor") or "{}").items()}
        self.streams.load_state_dict(json.loads(meta.get("streams", "{}")))

    def resume(self, path: Union[str, Path, None] = None) -> "Trainer":
        """Load a checkpoint and drop metrics lines written after it."""
        self.restore(load_checkpoint(path or self.checkpoint_path))
        self._truncate_metrics()
        logger.info(f"Resumed at step {self.step} (pretrain step {self.pretrain_step})")
        return self

    def _truncate_metrics(self) -> None:
        if not self.metrics_path or not self.metrics_path.exists():
            return
        kept = [
            line
            for line in self.metrics_path.read_text(encoding="utf-8").splitlines()
            if line.strip() and StepMetrics.from_line(line).step <= self.step
        ]
        atomic_write_text(self.metrics_path, "".join(f"{line}\n" for line in kept))

    def _append_metrics(self, metrics: StepMetrics) -> None:
        self.history.append(metrics)
        if self.metrics_path:
            with open(self.metrics_path, "a", encoding="utf-8") as f:
                f.write(metrics.to_line() + "\n")

    def _abort(self, phase: str, reason: str) -> None:
        get_tape().reset()
        logger.error(f"Non-finite loss in {phase} at step {self.step}: {reason}")
        if self.checkpoint_path.exists():
            self.restore(load_checkpoint(self.checkpoint_path))
            logger.info(f"Restored last good checkpoint {self.checkpoint_path} (step {self.step})")
        raise TrainingAborted(f"Training aborted in {phase}: {reason}")

    # phases

    def pretrain_once(self) -> float:
        """One CLM + MLM update over ``accumulate`` micro-batches."""
        self.bundle.train()
        total = 0.0
        try:
            for _ in range(self.config.accumulate):
                get_tape().reset()
                loss = None
                for isa in self.bundle.isas:
                    batch = self.sample_batch(isa)
                    part = clm_loss(batch, isa, self.bundle) + mlm_loss(
                        batch, isa, self.bundle, self.streams["masking"], self.config.mask, self.specials
                    )
                    loss = part if loss is None else loss + part
                value = loss.item()
                if not math.isfinite(value):
                    self._abort("pretraining", f"loss {value}")
                backward(loss)
                total += value / self.config.accumulate
        except NonFiniteError as exc:
            self._abort("pretraining", str(exc))
        self.optimizer.step(scale=1.0 / self.config.accumulate)
        self.pretrain_step += 1
        return total

    def pretrain(self, steps: Optional[int] = None) -> float:
        steps = self.config.pretrain_steps if steps is None else steps
        last = float("nan")
        if self.pretrain_step >= steps:
            return last
        logger.info(f"Pretraining (CLM+MLM) from step {self.pretrain_step} to {steps}")
        for _ in tqdm(range(self.pretrain_step, steps), desc="pretrain", unit="step"):
            last = self.pretrain_once()
            logger.debug(f"pretrain step={self.pretrain_step} loss={last:.6f}")
        self.save()
        logger.info(f"Pretraining finished at step {self.pretrain_step}, last loss {last:.4f}")
        return last

    def _initialize_flows(self) -> None:
        if self.bundle.flow_config.variant != "glow":
            return
        for isa in self.bundle.isas:
            with no_grad():
                latent = self.bundle.encode(pad_batch(self.sample_batch(isa), self.bundle.pad_id), isa).latent
            self.bundle.flows[isa].initialize(latent.data)

    def _mle_excess(self, batch: List[List[int]], isa: str) -> Tensor:
        nll = mle_loss(batch, isa, self.bundle)
        value = nll.item()
        if not math.isfinite(value):
            return nll
        floor = min(self.mle_floor.get(isa, value), value)
        self.mle_floor[isa] = floor
        logger.debug(f"flow nll {isa}={value:.6f} floor={floor:.6f}")
        return nll - floor

    def _micro_batch(self, values: Dict[str, float]) -> None:
        cfg = self.config
        get_tape().reset()
        noise_rng = self.streams["noise"]
        src_batch, tgt_batch = self.sample_batch(self.src), self.sample_batch(self.tgt)

        dae_src = dae_loss(src_batch, self.src, self.bundle, noise_rng, cfg.noise.swap_fraction, cfg.dae_cross_encoder)
        dae_tgt = dae_loss(tgt_batch, self.tgt, self.bundle, noise_rng, cfg.noise.swap_fraction, cfg.dae_cross_encoder)
        terms = {"dae_src": dae_src, "dae_tgt": dae_tgt}
        for key, batch, origin, other in (("bt_s2t", src_batch, self.src, self.tgt), ("bt_t2s", tgt_batch, self.tgt, self.src)):
            result = back_translate(batch, origin, other, self.bundle, cfg.decode_mode, cfg.beam_width)
            if result.skipped:
                self.bt_skipped += result.skipped
                logger.warning(f"Skipped {result.skipped} empty back-translations ({key})")
            terms[key] = result.loss
        terms["mle_src"] = self._mle_excess(src_batch, self.src)
        terms["mle_tgt"] = self._mle_excess(tgt_batch, self.tgt)

        weights = {"dae": cfg.lambda_dae, "bt": cfg.lambda_bt, "mle": cfg.lambda_mle}
        total = None
        for key, term in terms.items():
            value = 0.0 if term is None else term.item()
            values[key] += value / cfg.accumulate
            if term is None:
                continue
            weighted = weights[key.split("_")[0]] * term
            total = weighted if total is None else total + weighted
        value = total.item()
        if not math.isfinite(value):
            self._abort("training", f"total loss {value}")
        values["total"] += value / cfg.accumulate
        backward(total)

    def train_once(self) -> StepMetrics:
        """One weighted DAE + BT + MLE update; returns the step's metrics."""
        if self.step == 0:
            self._initialize_flows()
        self.bundle.train()
        values = {name: 0.0 for name in METRIC_FIELDS}
        try:
            for _ in range(self.config.accumulate):
                self._micro_batch(values)
        except NonFiniteError as exc:
            self._abort("training", str(exc))
        self.optimizer.step(scale=1.0 / self.config.accumulate)
        self.step += 1
        decay = self.config.ema_decay
        self.ema = values["total"] if self.ema is None else decay * self.ema + (1.0 - decay) * values["total"]
        values["ema"] = self.ema
        metrics = StepMetrics(self.step, values)
        self._append_metrics(metrics)
        return metrics

    def train(self, max_steps: Optional[int] = None) -> List[StepMetrics]:
        """
        Run both phases, checkpointing every ``checkpoint_every`` steps.

        ``max_steps == 0`` only writes the initial checkpoint.
        """
        max_steps = self.config.max_steps if max_steps is None else max_steps
        if self.step == 0 and self.pretrain_step == 0:
            self.save()
        if max_steps == 0:
            return []
        self.pretrain()

        produced: List[StepMetrics] = []
        logger.info(f"Training (DAE+BT+MLE) from step {self.step} to at most {max_steps}")
        for _ in tqdm(range(self.step, max_steps), desc="train", unit="step"):
            metrics = self.train_once()
            produced.append(metrics)
            logger.debug(metrics.to_line())
            if self.step % self.config.checkpoint_every == 0:
                self.save()
            if self.ema < self.config.loss_stop:
                logger.info(f"EMA loss {self.ema:.4f} below {self.config.loss_stop} at step {self.step}")
                break
        self.save()
        ema = "n/a" if self.ema is None else f"{self.ema:.4f}"
        logger.info(f"Training stopped at step {self.step}, EMA {ema}, {self.bt_skipped} BT samples skipped")
        return produced
