"""
``BinFlow``: one method per pipeline step.

Every step checks that its inputs exist, records lifecycle events, and
appends one JSON line to the run manifest with the config hash, the seed and
SHA-256 digests of its inputs and outputs. A failing step records its
failure in the manifest and re-raises.
"""

import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

from loguru import logger

from binflow.config import RunConfig, config_hash
from binflow.detector.dataset import (
    BinarySample,
    binary_samples,
    encode_samples,
    read_samples,
    read_score_report,
    split_samples,
    write_samples,
    write_score_report,
)
from binflow.detector.lstm import LSTMDetector, provenance, score_binaries, train_detector
from binflow.detector.metrics import auc
from binflow.evaluation.bleu import BleuReport, bleu
from binflow.evaluation.embeddings import export_embeddings, write_embeddings
from binflow.evaluation.translate import demonstration_table, translate_binary
from binflow.model.bundle import ModelBundle
from binflow.model.checkpoint import load_checkpoint
from binflow.parser.base import BaseLife, LifeCycle, TokenSequence
from binflow.parser.core import ParserFactory, ProfileFactory
from binflow.toy.generator import TOY_A, TOY_B, gen_binaries, gen_corpus, write_toy_corpus
from binflow.train.objectives import Specials
from binflow.train.trainer import StepMetrics, Trainer
from binflow.utils.corpus import CorpusReport, build_corpus, read_corpus, write_corpus
from binflow.utils.io import append_json_line, atomic_write_text, read_lines, sha256_file, write_lines
from binflow.utils.lifecycle_types import LifeType
from binflow.utils.normalizer import normalize_blocks
from binflow.utils.rng import NamedStreams
from binflow.utils.tokenizer import BpeTokenizer, JointVocabulary, MergeSelectionError, learn_merges, select_merge_count

PathLike = Union[str, Path]

CLEANING = (LifeType.DATA_CLEANING, LifeType.DATA_CLEANED, LifeType.DATA_CLEAN_FAILED)
VOCAB = (LifeType.VOCAB_LEARNING, LifeType.VOCAB_LEARNED, LifeType.VOCAB_LEARN_FAILED)
TRAINING = (LifeType.MODEL_TRAINING, LifeType.MODEL_TRAINED, LifeType.MODEL_TRAIN_FAILED)
EVALUATING = (LifeType.MODEL_EVALUATING, LifeType.MODEL_EVALUATED, LifeType.MODEL_EVALUATE_FAILED)


@dataclass
class StepRecord:
    subcommand: str
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: List[Path] = field(default_factory=list)
    metrics: Dict[str, object] = field(default_factory=dict)
    lifecycle: List[LifeCycle] = field(default_factory=list)

    def output(self, path: PathLike) -> Path:
        path = Path(path)
        self.outputs.append(path)
        return path


class BinFlow(BaseLife):
    def __init__(self, config: Optional[RunConfig] = None, manifest: Optional[PathLike] = None):
        """
        :param config: resolved run configuration; defaults when omitted
        :param manifest: manifest path, ``config.manifest`` when omitted
        """
        self.config = config or RunConfig()
        super().__init__(isa=self.config.src_isa)
        self.manifest = Path(manifest or self.config.manifest)
        self.config_hash = config_hash(self.config)

    # bookkeeping

    @contextmanager
    def _step(self, subcommand: str, phases: Tuple[LifeType, ...], inputs: Sequence[PathLike], purpose: str) -> Iterator[StepRecord]:
        missing = [str(p) for p in inputs if not os.path.isfile(p)]
        if missing:
            raise FileNotFoundError(f"{subcommand}: input file(s) not found: {', '.join(missing)}")
        record = StepRecord(subcommand, inputs={str(p): sha256_file(p) for p in inputs})
        source = str(inputs[0]) if inputs else ""
        start, done, failed = phases
        record.lifecycle.append(self.generate_lifecycle(source, self.isa, start, purpose))
        try:
            yield record
        except Exception as e:
            record.lifecycle.append(self.generate_lifecycle(source, self.isa, failed, purpose))
            logger.error(f"{subcommand} failed: {e}")
            self._write_manifest(record, "failed", error=str(e))
            raise
        record.lifecycle.append(self.generate_lifecycle(source, self.isa, done, purpose))
        self._write_manifest(record, "ok")

    def _write_manifest(self, record: StepRecord, status: str, error: Optional[str] = None) -> None:
        entry = {
            "subcommand": record.subcommand,
            "status": status,
            "config_hash": self.config_hash,
            "seed": self.config.seed,
            "inputs": record.inputs,
            "outputs": {str(p): sha256_file(p) for p in record.outputs if p.is_file()},
            "metrics": record.metrics,
            "lifecycle": [lc.to_dict() for lc in record.lifecycle],
        }
        if error:
            entry["error"] = error
        append_json_line(self.manifest, entry)

    def _tokenizer(self, merges: PathLike, vocab: PathLike) -> BpeTokenizer:
        limit = min(self.config.bpe.max_length, self.config.model.max_positions)
        return BpeTokenizer.load(str(merges), str(vocab), max_length=limit)

    @staticmethod
    def _bundle(checkpoint: PathLike) -> ModelBundle:
        return ModelBundle.from_checkpoint(load_checkpoint(checkpoint)).eval()

    def _direction(self, src_isa: Optional[str], tgt_isa: Optional[str]) -> Tuple[str, str]:
        src = src_isa or self.config.src_isa
        return src, tgt_isa or (self.config.tgt_isa if src == self.config.src_isa else self.config.src_isa)

    # frontend

    def _parse(self, inputs: Sequence[PathLike], isa: str, profile_file: Optional[str]) -> List[TokenSequence]:
        profile = ProfileFactory.create_profile(isa, profile_file)
        blocks = []
        for path in inputs:
            parser = ParserFactory.create_parser(str(path), isa, profile_file)
            if parser is None:
                raise ValueError(f"Unsupported disassembly file: {path}")
            blocks.extend(parser.parse().blocks)
        return normalize_blocks(blocks, profile, self.config.rules)

    def normalize(self, inputs: Sequence[PathLike], isa: str, output: PathLike, profile_file: Optional[str] = None) -> Path:
        """Parse dumps and write one normalized block per line, in input order."""
        with self._step("normalize", CLEANING, inputs, "Normalization") as record:
            sequences = self._parse(inputs, isa, profile_file)
            path = write_lines(record.output(output), [s.text() for s in sequences])
            record.metrics["blocks"] = len(sequences)
        logger.info(f"Normalized {len(sequences)} {isa} blocks into {path}")
        return path

    def build_corpus(
        self,
        inputs: Sequence[PathLike],
        isa: str,
        output: PathLike,
        group_size: int = 1,
        profile_file: Optional[str] = None,
    ) -> CorpusReport:
        """Deduplicated corpus plus a ``.report`` with vocabulary growth per ``group_size`` programs."""
        with self._step("build-corpus", CLEANING, inputs, "Corpus") as record:
            report = build_corpus(self._parse(inputs, isa, profile_file), group_size)
            write_corpus(report, str(record.output(output)), str(record.output(f"{output}.report")))
            record.metrics.update({"lines": len(report.lines), "vocab_size": report.vocab_size})
        return report

    # subwords

    def learn_bpe(self, src_corpus: PathLike, tgt_corpus: PathLike, merges: PathLike, vocab: PathLike) -> BpeTokenizer:
        cfg = self.config.bpe
        with self._step("learn-bpe", VOCAB, [src_corpus, tgt_corpus], "BPE") as record:
            table, vocabulary = learn_merges(
                read_corpus(str(src_corpus)),
                read_corpus(str(tgt_corpus)),
                cfg.merge_count,
                mode=cfg.mode,
                min_frequency=cfg.min_frequency,
                isa_names=self.config.isas,
            )
            table.save(str(record.output(merges)))
            vocabulary.save(str(record.output(vocab)))
            record.metrics.update({"merges": table.merge_count, "vocab_size": len(vocabulary), **vocabulary.isa_sizes})
        return BpeTokenizer(table, vocabulary)

    def select_merges(self, src_corpus: PathLike, tgt_corpus: PathLike, report_path: PathLike) -> int:
        """Pick the merge count; the per-candidate report is written even when no candidate passes."""
        cfg = self.config.bpe
        with self._step("select-merges", VOCAB, [src_corpus, tgt_corpus], "BPE") as record:
            src, tgt = read_corpus(str(src_corpus)), read_corpus(str(tgt_corpus))
            try:
                chosen, report = select_merge_count(src, tgt, cfg.candidates, cfg.max_discrepancy, cfg.max_size, cfg.min_frequency)
            except MergeSelectionError as e:
                self._write_merge_report(record.output(report_path), e.report, None)
                raise
            self._write_merge_report(record.output(report_path), report, chosen)
            record.metrics["merge_count"] = chosen
        return chosen

    @staticmethod
    def _write_merge_report(path: Path, report: List[dict], chosen: Optional[int]) -> None:
        lines = [
            f"merge_count={row['merge_count']} size_src={row['size_src']} size_tgt={row['size_tgt']} "
            f"discrepancy={row['discrepancy']:.6f} failed={','.join(row['failed']) or '-'}"
            for row in report
        ]
        lines.append(f"chosen={chosen if chosen is not None else 'none'}")
        write_lines(path, lines)

    # translator training

    def _trainer(
        self,
        src_corpus: PathLike,
        tgt_corpus: PathLike,
        merges: PathLike,
        vocab: PathLike,
        checkpoint: PathLike,
        metrics: Optional[PathLike],
    ) -> Trainer:
        tokenizer = self._tokenizer(merges, vocab)
        vocabulary = tokenizer.vocab
        streams = NamedStreams(self.config.seed)
        bundle = ModelBundle(
            len(vocabulary),
            self.config.isas,
            self.config.model,
            self.config.flow,
            rng=streams["model-init"],
            dropout_rng=streams["dropout"],
            sep_id=vocabulary.sep_id,
            pad_id=vocabulary.pad_id,
        )
        corpora = {
            self.config.src_isa: [tokenizer.encode_block(b) for b in read_corpus(str(src_corpus))],
            self.config.tgt_isa: [tokenizer.encode_block(b) for b in read_corpus(str(tgt_corpus))],
        }
        tags = {
            "config": self.config_hash,
            "src_corpus": sha256_file(src_corpus),
            "tgt_corpus": sha256_file(tgt_corpus),
            "vocab": sha256_file(vocab),
        }
        trainer = Trainer(
            bundle,
            corpora,
            self.config.train,
            streams,
            checkpoint,
            metrics,
            specials=Specials.from_vocab(vocabulary),
            provenance=tags,
        )
        if Path(checkpoint).is_file():
            trainer.resume()
        return trainer

    def pretrain(self, src_corpus: PathLike, tgt_corpus: PathLike, merges: PathLike, vocab: PathLike, checkpoint: PathLike) -> float:
        """CLM + MLM phase only; resumes from ``checkpoint`` when it exists."""
        with self._step("pretrain", TRAINING, [src_corpus, tgt_corpus, merges, vocab], "Pretraining") as record:
            trainer = self._trainer(src_corpus, tgt_corpus, merges, vocab, record.output(checkpoint), None)
            loss = trainer.pretrain()
            trainer.save()
            record.metrics.update({"pretrain_step": trainer.pretrain_step, "loss": loss})
        return loss

    def train(
        self,
        src_corpus: PathLike,
        tgt_corpus: PathLike,
        merges: PathLike,
        vocab: PathLike,
        checkpoint: PathLike,
        metrics: Optional[PathLike] = None,
    ) -> List[StepMetrics]:
        """Both phases up to ``train.max_steps``; resumes from ``checkpoint`` when it exists."""
        metrics = metrics or f"{checkpoint}.metrics"
        with self._step("train", TRAINING, [src_corpus, tgt_corpus, merges, vocab], "Training") as record:
            trainer = self._trainer(src_corpus, tgt_corpus, merges, vocab, record.output(checkpoint), record.output(metrics))
            produced = trainer.train()
            record.metrics.update({"step": trainer.step, "ema": trainer.ema, "bt_skipped": trainer.bt_skipped})
        return produced

    # translation and evaluation

    def translate(
        self,
        source: PathLike,
        checkpoint: PathLike,
        merges: PathLike,
        vocab: PathLike,
        output: PathLike,
        src_isa: Optional[str] = None,
        tgt_isa: Optional[str] = None,
        workers: int = 1,
    ) -> Path:
        """
        Translate a corpus (one block per line) or a ``.jsonl`` sample file.

        Corpus output keeps one line per input block, empty where the block failed.
        """
        src, tgt = self._direction(src_isa, tgt_isa)
        cfg = self.config.train
        with self._step("translate", EVALUATING, [source, checkpoint, merges, vocab], "Translation") as record:
            bundle = self._bundle(checkpoint)
            tokenizer = self._tokenizer(merges, vocab)
            args = (bundle, tokenizer, src, tgt, cfg.decode_mode, cfg.beam_width, workers)
            if str(source).endswith(".jsonl"):
                translated = []
                failures = 0
                for sample in read_samples(source):
                    if sample.isa and sample.isa != src:
                        raise ValueError(f"Sample '{sample.sample_id}' is {sample.isa}, expected {src}")
                    result = translate_binary(sample.blocks, *args)
                    failures += len(result.failures)
                    translated.append(BinarySample(sample.sample_id, sample.label, result.blocks, tgt))
                path = write_samples(record.output(output), translated)
                record.metrics.update({"samples": len(translated), "failed_blocks": failures})
            else:
                result = translate_binary(read_corpus(str(source)), *args, progress=True)
                path = write_lines(record.output(output), result.lines())
                record.metrics.update({"blocks": len(result.blocks), "failed_blocks": len(result.failures)})
        return path

    @staticmethod
    def demonstration(source: PathLike, translation: PathLike, reference: Optional[PathLike] = None, count: int = 5) -> str:
        def blocks(path):
            return [line.split() for line in read_lines(path)]

        return demonstration_table(blocks(source), blocks(translation), blocks(reference) if reference else None, count)

    def eval_bleu(self, hypotheses: PathLike, references: PathLike, output: Optional[PathLike] = None) -> BleuReport:
        with self._step("eval-bleu", EVALUATING, [hypotheses, references], "BLEU") as record:
            report = bleu(read_lines(hypotheses), read_lines(references))
            if output:
                atomic_write_text(record.output(output), report.to_text())
            record.metrics.update({"bleu": report.score, "mean_precision": report.mean_precision})
        logger.info(f"BLEU {report.score:.4f} (mean precision {report.mean_precision:.4f})")
        return report

    def export_embeddings(self, checkpoint: PathLike, vocab: PathLike, output: PathLike, filter: str = "all") -> Path:
        with self._step("export-embeddings", EVALUATING, [checkpoint, vocab], "Embeddings") as record:
            bundle = self._bundle(checkpoint)
            profiles = [ProfileFactory.create_profile(isa) for isa in bundle.isas]
            lines = export_embeddings(bundle.token_emb.data, JointVocabulary.load(str(vocab)), filter, profiles)
            path = write_embeddings(record.output(output), lines)
            record.metrics["symbols"] = len(lines)
        return path

    # toy data

    def gen_toy(self, out_dir: PathLike, count: Optional[int] = None, seed: Optional[int] = None) -> Dict[str, Path]:
        """
        Toy training corpora, parallel held-out references, and labeled
        detection binaries split into train and test sample files per ISA.
        """
        if set(self.config.isas) != {TOY_A, TOY_B}:
            raise ValueError(f"gen-toy needs the toy ISA pair, configured {self.config.isas}")
        count = count or self.config.toy.count
        seed = self.config.seed if seed is None else seed
        out = Path(out_dir)
        with self._step("gen-toy", CLEANING, [], "Toy corpora") as record:
            paths = write_toy_corpus(gen_corpus(count, seed, self.config.toy, self.config.rules), out)
            binaries = gen_binaries(self.config.toy.binaries, seed, self.config.toy)
            det = self.config.detector
            train, test = split_samples(binaries, det.test_fraction, det.test_mode, NamedStreams(seed)["corpus"])
            for split, chosen in (("train", train), ("test", test)):
                for isa in (TOY_A, TOY_B):
                    key = f"detect.{split}.{isa}"
                    paths[key] = write_samples(out / f"{key}.jsonl", binary_samples(chosen, isa, self.config.rules))
            record.outputs.extend(paths.values())
            record.metrics.update({"count": count, "binaries": len(binaries), "detect_test": len(test)})
        logger.info(f"Wrote toy data for seed {seed} to {out}")
        return paths

    # detection

    def train_detector(self, samples: PathLike, checkpoint: PathLike, merges: PathLike, vocab: PathLike, output: PathLike) -> List[float]:
        """Train on the translator's frozen token embeddings; the loss of every epoch goes to ``<output>.losses``."""
        with self._step("train-detector", TRAINING, [samples, checkpoint, merges, vocab], "Detector") as record:
            binaries = read_samples(samples)
            isas = {s.isa for s in binaries}
            if len(isas) != 1:
                raise ValueError(f"Detector samples must share one ISA, got {sorted(isas)}")
            labeled = encode_samples(binaries, self._tokenizer(merges, vocab))
            bundle = self._bundle(checkpoint)
            detector, losses = train_detector(
                [s.ids for s in labeled],
                [s.label for s in labeled],
                bundle.token_emb.data,
                self.config.detector,
                NamedStreams(self.config.seed)["detector"],
                pad_id=bundle.pad_id,
                progress=True,
            )
            tags = {"isa": isas.pop(), "translator": sha256_file(checkpoint), "samples": sha256_file(samples)}
            detector.save(record.output(output), tags)
            write_lines(record.output(f"{output}.losses"), [f"{i} {loss:.6f}" for i, loss in enumerate(losses, start=1)])
            record.metrics["final_loss"] = losses[-1]
        return losses

    def score(
        self,
        samples: PathLike,
        detector_path: PathLike,
        merges: PathLike,
        vocab: PathLike,
        output: PathLike,
        cross_isa: bool = False,
    ) -> Path:
        """
        Score binaries with a detector. Samples must be in the ISA the detector
        was trained on unless ``cross_isa`` is set.
        """
        with self._step("score", EVALUATING, [samples, detector_path, merges, vocab], "Detection") as record:
            checkpoint = load_checkpoint(detector_path)
            trained_isa = provenance(checkpoint).get("isa", "")
            binaries = read_samples(samples)
            foreign = sorted({s.isa for s in binaries if s.isa and s.isa != trained_isa})
            if foreign and not cross_isa:
                raise ValueError(f"Detector was trained on {trained_isa!r} but samples are {foreign}; translate them first")
            labeled = encode_samples(binaries, self._tokenizer(merges, vocab))
            scores = score_binaries(LSTMDetector.from_checkpoint(checkpoint), [s.ids for s in labeled], self.config.detector.batch_size)
            path = write_score_report(record.output(output), [s.sample_id for s in labeled], scores, [s.label for s in labeled])
            record.metrics["samples"] = len(labeled)
        return path

    def eval_auc(self, report: PathLike, output: Optional[PathLike] = None) -> float:
        with self._step("eval-auc", EVALUATING, [report], "AUC") as record:
            _, scores, labels = read_score_report(report)
            value = auc(scores, labels)
            if output:
                atomic_write_text(record.output(output), f"auc={value:.6f}\nsamples={len(scores)}\n")
            record.metrics["auc"] = value
        logger.info(f"AUC {value:.4f} over {len(scores)} samples")
        return value

    # end to end

    def recipe(self, workdir: PathLike, detection: bool = True, baseline: bool = False) -> Dict[str, float]:
        """
        Toy run of every step: generate, learn BPE, train, translate and score
        BLEU, train a detector on the target ISA and score translated source
        binaries with it.

        :param detection: run the detector steps
        :param baseline: also report BLEU of the untrained model, AUC on
            untranslated source binaries and AUC of a detector trained on the source ISA
        """
        work = Path(workdir)
        src, tgt = self.config.isas
        toy = self.gen_toy(work / "data")
        merges, vocab = work / "bpe.merges", work / "bpe.vocab"
        self.learn_bpe(toy[f"{src}.train"], toy[f"{tgt}.train"], merges, vocab)
        checkpoint = work / "translator.ckpt"
        self.train(toy[f"{src}.train"], toy[f"{tgt}.train"], merges, vocab, checkpoint)

        hyp = self.translate(toy[f"heldout.{src}"], checkpoint, merges, vocab, work / f"heldout.{src}.to.{tgt}")
        report = self.eval_bleu(hyp, toy[f"heldout.{tgt}"], work / "bleu.report")
        results = {"bleu": report.score, "mean_precision": report.mean_precision}
        if baseline:
            untrained = self.config.model_copy(update={"train": self.config.train.model_copy(update={"max_steps": 0})})
            initial = BinFlow(untrained, self.manifest)
            initial.train(toy[f"{src}.train"], toy[f"{tgt}.train"], merges, vocab, work / "untrained.ckpt")
            hyp = initial.translate(toy[f"heldout.{src}"], work / "untrained.ckpt", merges, vocab, work / "heldout.untrained")
            results["bleu_untrained"] = initial.eval_bleu(hyp, toy[f"heldout.{tgt}"]).score
        if not detection:
            return results

        detector = work / f"detector.{tgt}.ckpt"
        self.train_detector(toy[f"detect.train.{tgt}"], checkpoint, merges, vocab, detector)
        translated = self.translate(toy[f"detect.test.{src}"], checkpoint, merges, vocab, work / f"detect.test.{src}.to.{tgt}.jsonl")
        scores = self.score(translated, detector, merges, vocab, work / "scores.translated")
        results["auc"] = self.eval_auc(scores, work / "auc.translated")

        if baseline:
            scores = self.score(toy[f"detect.test.{src}"], detector, merges, vocab, work / "scores.untranslated", cross_isa=True)
            results["auc_untranslated"] = self.eval_auc(scores)
            same = work / f"detector.{src}.ckpt"
            self.train_detector(toy[f"detect.train.{src}"], checkpoint, merges, vocab, same)
            scores = self.score(toy[f"detect.test.{src}"], same, merges, vocab, work / "scores.same_isa")
            results["auc_same_isa"] = self.eval_auc(scores)
        return results
