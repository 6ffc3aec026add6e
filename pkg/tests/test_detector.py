import hashlib
import itertools

import numpy as np
import pytest
from loguru import logger

from conftest import numeric_gradient, relative_error

from binflow.autodiff import backward, no_grad, ops
from binflow.config import DetectorConfig
from binflow.detector import (
    BinarySample,
    LabeledSample,
    LSTMDetector,
    accuracy,
    auc,
    binary_samples,
    encode_samples,
    read_samples,
    read_score_report,
    score_binaries,
    score_binary,
    split_samples,
    train_detector,
    write_samples,
    write_score_report,
)
from binflow.detector.lstm import DETECTOR_PREFIX, provenance
from binflow.model.checkpoint import load_checkpoint, save_checkpoint
from binflow.toy import TOY_B, gen_binaries
from binflow.utils.tokenizer import BpeTokenizer, learn_merges

MARKER = 7


def _table(vocab=10, dim=4, seed=0):
    table = np.random.default_rng(seed).normal(0.0, 0.1, (vocab, dim))
    table[MARKER] = 2.0
    return table


def _separable(count=64, seed=0):
    gen = np.random.default_rng(seed)
    plain = [4, 5, 6, 8, 9]
    sequences, labels = [], []
    for i in range(count):
        seq = gen.choice(plain, size=int(gen.integers(4, 9))).tolist()
        label = i % 2
        if label:
            seq[int(gen.integers(0, len(seq)))] = MARKER
        sequences.append(seq)
        labels.append(label)
    return sequences, labels


def _digest(array):
    return hashlib.sha256(np.ascontiguousarray(array).tobytes()).hexdigest()


FAST = DetectorConfig(hidden=16, layers=1, batch_size=8, epochs=20, lr=1e-2)


class TestAuc:
    def test_perfect_separation(self):
        assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_all_ties(self):
        assert auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5

    def test_matches_pair_enumeration(self, rng):
        scores = np.round(rng.random(20), 1)
        labels = np.array([0, 1] * 10)
        rng.shuffle(labels)
        wins = 0.0
        pos = scores[labels == 1]
        neg = scores[labels == 0]
        for p, n in itertools.product(pos, neg):
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
        assert auc(scores, labels) == pytest.approx(wins / (len(pos) * len(neg)), abs=1e-12)

    def test_invariant_under_monotone_maps(self, rng):
        scores = rng.random(30)
        labels = rng.integers(0, 2, size=30)
        labels[:2] = [0, 1]
        base = auc(scores, labels)
        for _ in range(5):
            a, b = rng.uniform(0.1, 3.0, size=2)
            assert auc(np.exp(a * scores) + b, labels) == pytest.approx(base, abs=1e-12)
            assert auc(scores ** 3, labels) == pytest.approx(base, abs=1e-12)

    @pytest.mark.parametrize(
        "scores,labels", [([0.1, 0.2], [1, 1]), ([0.1], [0]), ([0.1, 0.2], [0, 1, 1]), ([0.3, 0.4], [0, 2])]
    )
    def test_rejects_bad_input(self, scores, labels):
        with pytest.raises(ValueError):
            auc(scores, labels)

    def test_accuracy(self):
        assert accuracy([0.9, 0.1, 0.6, 0.4], [1, 0, 0, 0]) == 0.75


class TestLSTMDetector:
    def test_zero_weights_score_half(self):
        detector = LSTMDetector(_table(), DetectorConfig(hidden=4))
        for p in detector.parameters():
            p.data[...] = 0.0
        assert score_binary(detector, [4, 5, 6]) == 0.5

    def test_head_bias_is_monotone(self):
        detector = LSTMDetector(_table(), DetectorConfig(hidden=4))
        sequences, _ = _separable(6)
        before = score_binaries(detector, sequences)
        detector.head.bias.data += 1.0
        after = score_binaries(detector, sequences)
        assert all(a > b for a, b in zip(after, before))

    def test_batch_equals_single(self, f64):
        detector = LSTMDetector(_table(), DetectorConfig(hidden=8, window=5), np.random.default_rng(3))
        sequences, _ = _separable(9, seed=4)
        sequences.append(list(range(4, 10)) * 3)
        batched = score_binaries(detector, sequences, batch_size=4)
        single = [score_binary(detector, s) for s in sequences]
        np.testing.assert_allclose(batched, single, rtol=0, atol=1e-12)
        assert score_binaries(detector, sequences[::-1], batch_size=7) == pytest.approx(batched[::-1], abs=1e-12)

    @pytest.mark.parametrize("aggregate", ["max", "mean"])
    def test_long_sequences_pool_window_logits(self, f64, aggregate):
        config = DetectorConfig(hidden=8, window=4, aggregate=aggregate)
        detector = LSTMDetector(_table(), config, np.random.default_rng(5))
        ids = [4, 5, MARKER, 6, 8, 9, 4, 4, 5, MARKER]
        with no_grad():
            per_window = detector.window_logits([ids[0:4], ids[4:8], ids[8:10]]).data
            whole = detector([ids]).data[0]
        expected = per_window.max() if aggregate == "max" else per_window.mean()
        assert whole == pytest.approx(expected, abs=1e-12)

    def test_empty_input_rejected(self):
        detector = LSTMDetector(_table())
        with pytest.raises(ValueError):
            score_binary(detector, [])
        with pytest.raises(ValueError):
            score_binaries(detector, [])

    def test_forget_gate_bias(self):
        detector = LSTMDetector(_table(), DetectorConfig(hidden=3))
        bias = detector.cells[0].input.bias.data
        np.testing.assert_array_equal(bias[3:6], 1.0)
        np.testing.assert_array_equal(bias[:3], 0.0)

    def test_layer_count(self):
        assert len(LSTMDetector(_table(), DetectorConfig(layers=3)).cells) == 3

    def test_embedding_is_not_a_parameter(self):
        detector = LSTMDetector(_table())
        assert "embedding" not in detector.named_parameters()
        assert "embedding" in detector.state_dict()

    @pytest.mark.parametrize("name", ["head.weight", "cells.0.input.weight", "cells.1.recurrent.weight"])
    def test_gradients(self, f64, name):
        config = DetectorConfig(hidden=3, layers=2, window=3)
        detector = LSTMDetector(_table(dim=3), config, np.random.default_rng(6))
        sequences = [[4, 5, MARKER, 6, 9], [8, 9], [MARKER, 4, 4]]
        targets = np.array([1.0, 0.0, 1.0])
        param = detector.named_parameters()[name]

        loss = ops.bce_with_logits(detector(sequences), targets)
        backward(loss)
        analytic = param.grad.copy()

        def value(_):
            with no_grad():
                return ops.bce_with_logits(detector(sequences), targets).item()

        numeric = numeric_gradient(value, [param.data], 0)
        assert relative_error(analytic, numeric) < 1e-4


class TestTraining:
    def test_separable_set_is_learned(self):
        sequences, labels = _separable()
        detector, losses = train_detector(sequences, labels, _table(), FAST, np.random.default_rng(0))
        assert len(losses) == 20
        assert losses[-1] < losses[0]
        assert accuracy(score_binaries(detector, sequences), labels) == 1.0

    def test_embedding_stays_frozen(self):
        table = _table()
        sequences, labels = _separable(16)
        before = _digest(table)
        config = FAST.model_copy(update={"epochs": 2})
        detector, _ = train_detector(sequences, labels, table, config, np.random.default_rng(0))
        assert _digest(detector.embedding) == _digest(table.astype(detector.embedding.dtype))
        assert _digest(table) == before

    def test_same_seed_same_losses(self):
        sequences, labels = _separable(16)
        config = FAST.model_copy(update={"epochs": 3})
        _, first = train_detector(sequences, labels, _table(), config, np.random.default_rng(9))
        _, second = train_detector(sequences, labels, _table(), config, np.random.default_rng(9))
        assert first == second

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            train_detector([[4, 5], [6, 8]], [1, 1], _table(), FAST)

    def test_unbalanced_labels_warn(self):
        messages = []
        sink = logger.add(messages.append, level="WARNING")
        try:
            config = FAST.model_copy(update={"epochs": 1})
            train_detector([[4], [5], [6], [8], [9]], [1, 1, 1, 1, 0], _table(), config)
        finally:
            logger.remove(sink)
        assert any("Unbalanced" in str(m) for m in messages)

    def test_checkpoint_round_trip(self, tmp_path):
        sequences, labels = _separable(16)
        config = FAST.model_copy(update={"epochs": 1, "layers": 2})
        detector, _ = train_detector(sequences, labels, _table(), config, np.random.default_rng(0))
        path = detector.save(tmp_path / "det.ckpt", {"isa": TOY_B})
        checkpoint = load_checkpoint(path)
        assert all(name.startswith(DETECTOR_PREFIX) for name in checkpoint.tensors)
        assert provenance(checkpoint) == {"isa": TOY_B}
        restored = LSTMDetector.from_checkpoint(checkpoint)
        assert restored.config == config
        assert score_binaries(restored, sequences) == score_binaries(detector, sequences)

    def test_loading_a_translator_checkpoint_fails(self, tmp_path):
        path = save_checkpoint(tmp_path / "x.ckpt", {"a": np.zeros(2)}, {"kind": "translator"})
        with pytest.raises(ValueError):
            LSTMDetector.from_checkpoint(path)


class TestDataset:
    def test_samples_file_round_trip(self, tmp_path):
        samples = binary_samples(gen_binaries(6, 2), TOY_B)
        path = write_samples(tmp_path / "b.samples.jsonl", samples)
        assert read_samples(path) == samples

    def test_malformed_samples_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"sample_id": "x", "label": 1}\n')
        with pytest.raises(ValueError, match="bad.jsonl:1"):
            read_samples(path)

    def test_encoding_wraps_every_block(self):
        samples = binary_samples(gen_binaries(4, 2), TOY_B)
        corpus = [block for s in samples for block in s.blocks]
        merges, vocab = learn_merges(corpus, corpus, 20)
        tokenizer = BpeTokenizer(merges, vocab)
        encoded = encode_samples(samples, tokenizer)
        for sample, labeled in zip(samples, encoded):
            assert labeled.ids.count(vocab.sep_id) == 2 * len(sample.blocks)
            assert labeled.label == sample.label

    def test_labeled_sample_invariants(self):
        with pytest.raises(ValueError):
            LabeledSample("a", [], 0)
        with pytest.raises(ValueError):
            BinarySample("a", 3, [["mov"]])

    def test_split_is_stratified(self, rng):
        samples = [BinarySample(f"s{i:02d}", i % 2, [["x"]]) for i in range(50)]
        train, test = split_samples(samples, 0.2, "split", rng)
        assert len(test) == 10 and len(train) == 40
        assert sum(s.label for s in test) == 5
        assert not {s.sample_id for s in train} & {s.sample_id for s in test}

    def test_all_mode_tests_everything(self, rng):
        samples = [BinarySample(f"s{i:02d}", i % 2, [["x"]]) for i in range(10)]
        train, test = split_samples(samples, 0.2, "all", rng)
        assert len(train) == 8
        assert [s.sample_id for s in test] == [s.sample_id for s in samples]

    def test_score_report(self, tmp_path):
        path = write_score_report(tmp_path / "scores.txt", ["a", "b"], [0.25, 0.9], [0, 1])
        assert path.read_text() == "a 0.250000 0\nb 0.900000 1\n"
        assert read_score_report(path) == (["a", "b"], [0.25, 0.9], [0, 1])
