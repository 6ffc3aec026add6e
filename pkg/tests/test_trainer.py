import hashlib
import math
import shutil
from collections import Counter
from unittest.mock import patch

import numpy as np
import pytest

from conftest import numeric_gradient, relative_error

from binflow.autodiff import AdamOptimizer, Tensor, backward, no_grad, ops
from binflow.config import FlowConfig, MaskConfig, ModelConfig, TrainingConfig
from binflow.model.bundle import ModelBundle
from binflow.model.checkpoint import load_checkpoint
from binflow.train import (
    METRIC_FIELDS,
    StepMetrics,
    Trainer,
    TrainingAborted,
    add_noise,
    back_translate,
    clm_loss,
    dae_loss,
    make_mlm_sample,
    mlm_loss,
    reconstruction_loss,
)
from binflow.utils.rng import NamedStreams

ISAS = ("toy-a", "toy-b")


def _bundle(vocab=12, dim=8, heads=2, layers=1, max_positions=32, seed=0, pad_id=2, dropout=0.0, dropout_rng=None):
    config = ModelConfig(dim=dim, heads=heads, layers=layers, dropout=dropout, max_positions=max_positions)
    return ModelBundle(
        vocab, ISAS, config, FlowConfig(), rng=np.random.default_rng(seed), dropout_rng=dropout_rng, pad_id=pad_id
    )


def _blocks(count, seed, vocab=12):
    gen = np.random.default_rng(seed)
    return [[0, *gen.integers(4, vocab, size=int(gen.integers(1, 6))).tolist(), 0] for _ in range(count)]


def _params_digest(bundle):
    h = hashlib.sha256()
    for name, value in sorted(bundle.state_dict().items()):
        h.update(name.encode())
        h.update(value.tobytes())
    return h.hexdigest()


class TestMaskedSample:
    def test_zero_rate_is_identity(self, rng):
        ids = rng.integers(4, 50, size=200)
        sample = make_mlm_sample(ids, 50, rng, MaskConfig(rate=0.0))
        np.testing.assert_array_equal(sample.inputs, ids)
        assert sample.label_ids.size == 0

    def test_forced_mask_split(self, rng):
        ids = np.array([0, 5, 6, 7, 0, 8])
        config = MaskConfig(rate=1.0, mask_split=1.0, random_split=0.0, keep_split=0.0)
        sample = make_mlm_sample(ids, 20, rng, config)
        np.testing.assert_array_equal(sample.inputs, [0, 1, 1, 1, 0, 1])
        np.testing.assert_array_equal(sample.label_ids, [5, 6, 7, 8])

    def test_specials_never_selected(self, rng):
        ids = np.array([0, 1, 2, 3] * 50)
        sample = make_mlm_sample(ids, 20, rng, MaskConfig(rate=1.0))
        assert not sample.positions.any()

    def test_empirical_rates(self, rng):
        ids = rng.integers(4, 200, size=100_000)
        sample = make_mlm_sample(ids, 200, rng)
        selected = sample.positions
        assert 0.14 <= selected.mean() <= 0.16
        masked = selected & (sample.inputs == 1)
        kept = selected & (sample.inputs == ids)
        replaced = selected & ~masked & ~kept
        count = selected.sum()
        assert masked.sum() / count == pytest.approx(0.8, abs=0.02)
        assert kept.sum() / count == pytest.approx(0.1, abs=0.02)
        assert replaced.sum() / count == pytest.approx(0.1, abs=0.02)
        assert np.all(sample.inputs[replaced] >= 4)

    def test_empty_rejected(self, rng):
        with pytest.raises(ValueError):
            make_mlm_sample([], 10, rng)


class TestNoise:
    def test_zero_fraction_is_identity(self, rng):
        assert add_noise([4, 5, 6, 7], 0.0, rng) == [4, 5, 6, 7]

    def test_two_tokens_one_swap(self, rng):
        assert add_noise([4, 5], 0.5, rng) == [5, 4]

    def test_short_sequence_unchanged(self, rng):
        assert add_noise([4], 1.0, rng) == [4]
        assert add_noise([], 1.0, rng) == []

    def test_multiset_preserved(self, rng):
        base = rng.integers(0, 30, size=17).tolist()
        for _ in range(10_000):
            noised = add_noise(base, 0.1, rng)
            assert Counter(noised) == Counter(base)

    def test_swap_count(self, rng):
        # one swap per ceil(0.1 * 25) = 3 draws; at most 6 positions move
        base = list(range(25))
        noised = add_noise(base, 0.1, rng)
        assert sum(a != b for a, b in zip(base, noised)) <= 6


class TestClmLoss:
    def test_single_symbol_vocab(self, f64):
        bundle = _bundle(vocab=1, pad_id=-1)
        assert clm_loss([[0, 0, 0, 0]], "toy-a", bundle).item() == pytest.approx(0.0, abs=1e-12)

    def test_uniform_logits(self, f64):
        bundle = _bundle(vocab=12)
        bundle.out_proj["toy-a"].weight.data[:] = 0.0
        bundle.out_proj["toy-a"].bias.data[:] = 0.0
        loss = clm_loss(_blocks(5, 1), "toy-a", bundle).item()
        assert loss == pytest.approx(math.log(12), abs=1e-12)

    def test_matches_cross_entropy_oracle(self, f64):
        bundle = _bundle(vocab=9, dim=4)
        batch = [[0, 4, 5, 6, 0], [0, 7, 0]]
        loss = clm_loss(batch, "toy-b", bundle).item()

        total, count = 0.0, 0
        for block in batch:
            with no_grad():
                logits = bundle.decode(np.array([block[:-1]]), "toy-b").data[0]
            for t, target in enumerate(block[1:]):
                row = logits[t] - logits[t].max()
                total -= row[target] - math.log(np.exp(row).sum())
                count += 1
        assert loss == pytest.approx(total / count, abs=1e-10)

    def test_needs_two_ids(self, f64):
        with pytest.raises(ValueError):
            clm_loss([[0]], "toy-a", _bundle())


class TestDae:
    def test_zero_noise_is_autoencoding(self, f64, rng):
        bundle = _bundle()
        batch = _blocks(4, 2)
        dae = dae_loss(batch, "toy-a", bundle, rng, swap_fraction=0.0).item()
        plain = reconstruction_loss(batch, "toy-a", batch, "toy-a", bundle).item()
        assert dae == plain

    def test_cross_encoder_uses_other_side(self, f64, rng):
        bundle = _bundle()
        batch = _blocks(3, 3)
        dae = dae_loss(batch, "toy-a", bundle, rng, swap_fraction=0.0, cross_encoder=True).item()
        crossed = reconstruction_loss(batch, "toy-b", batch, "toy-a", bundle).item()
        assert dae == crossed

    def test_overfit_single_block(self, rng):
        bundle = _bundle(dim=16)
        block = [[0, 4, 5, 6, 7, 8, 0]]
        optimizer = AdamOptimizer(bundle.named_parameters(), lr=1e-2, warmup=0)
        for _ in range(200):
            backward(dae_loss(block, "toy-a", bundle, rng, swap_fraction=0.0))
            optimizer.step()
        with no_grad():
            assert dae_loss(block, "toy-a", bundle, rng, swap_fraction=0.0).item() < 0.1


class TestObjectiveGradients:
    """Central differences against the tape for each composite loss at d=4."""

    @staticmethod
    def _check(bundle, loss_fn, names):
        params = bundle.named_parameters()
        backward(loss_fn())
        for name in names:
            p = params[name]

            def value(*_):
                with no_grad():
                    return loss_fn().item()

            numeric = numeric_gradient(value, [p.data], 0)
            assert relative_error(p.grad, numeric) < 1e-4, name

    def test_clm(self, f64):
        bundle = _bundle(vocab=7, dim=4, max_positions=8)
        self._check(
            bundle,
            lambda: clm_loss([[0, 4, 5, 6, 0]], "toy-a", bundle),
            ["token_emb", "decoders.toy-a.layers.0.self_attn.wq.weight", "out_proj.toy-a.weight"],
        )

    def test_mlm(self, f64):
        bundle = _bundle(vocab=7, dim=4, max_positions=8)
        config = MaskConfig(rate=0.6)
        self._check(
            bundle,
            lambda: mlm_loss([[0, 4, 5, 6, 5, 0]], "toy-a", bundle, np.random.default_rng(3), config),
            ["token_emb", "encoders.toy-a.layers.0.ffn.inner.weight", "mlm_head.weight"],
        )

    def test_dae(self, f64):
        bundle = _bundle(vocab=7, dim=4, max_positions=8)
        self._check(
            bundle,
            lambda: dae_loss([[0, 4, 5, 6, 0]], "toy-b", bundle, np.random.default_rng(5), swap_fraction=0.3),
            ["pool.weight", "encoders.toy-b.layers.0.attn.wv.weight", "decoders.toy-b.gate_proj.weight"],
        )

    def test_back_translation_reconstruction(self, f64):
        bundle = _bundle(vocab=7, dim=4, max_positions=8)
        perturb = np.random.default_rng(8)
        for name, p in bundle.named_parameters().items():
            if name.startswith("flow/"):
                p.data = p.data + 0.2 * perturb.normal(size=p.shape)
        synthetic, original = [[0, 5, 6, 0]], [[0, 4, 4, 6, 0]]
        self._check(
            bundle,
            lambda: reconstruction_loss(synthetic, "toy-b", original, "toy-a", bundle, transform=True),
            ["flow/toy-a.layers.0.scale_out.weight", "flow/toy-b.layers.1.shift_in.weight", "pool.weight"],
        )


class TestBackTranslation:
    @staticmethod
    def _never_stop(bundle, isa):
        bundle.out_proj[isa].bias.data[:] = 0.0
        bundle.out_proj[isa].bias.data[5] = 50.0

    def test_inference_pass_is_detached(self, f64):
        bundle = _bundle()
        self._never_stop(bundle, "toy-b")
        before = _params_digest(bundle)
        result = back_translate(_blocks(3, 4), "toy-a", "toy-b", bundle)
        assert _params_digest(bundle) == before
        assert result.skipped == 0

        backward(result.loss)
        params = bundle.named_parameters()
        for name, p in params.items():
            if name.startswith(("encoders.toy-a.", "decoders.toy-b.", "out_proj.toy-b.")):
                assert p.grad is None, name
        assert params["encoders.toy-b.layers.0.attn.wq.weight"].grad is not None
        assert params["decoders.toy-a.gate_proj.weight"].grad is not None
        assert params["flow/toy-a.layers.0.scale_out.weight"].grad is not None

    def test_synthetic_is_reproducible(self, f64):
        bundle = _bundle()
        self._never_stop(bundle, "toy-b")
        batch = _blocks(4, 5)
        first = back_translate(batch, "toy-a", "toy-b", bundle)
        second = back_translate(batch, "toy-a", "toy-b", bundle)
        assert first.synthetic == second.synthetic
        assert first.loss.item() == second.loss.item()

    def test_empty_translations_skipped(self, f64):
        bundle = _bundle()
        bundle.out_proj["toy-b"].bias.data[:] = 0.0
        bundle.out_proj["toy-b"].bias.data[bundle.sep_id] = 50.0
        result = back_translate(_blocks(3, 6), "toy-a", "toy-b", bundle)
        assert result.loss is None
        assert result.skipped == 3


def _trainer(tmp_path, seed=7, name="run", **overrides):
    streams = NamedStreams(seed)
    config = TrainingConfig(
        **{
            "batch_size": 4,
            "accumulate": 2,
            "pretrain_steps": 2,
            "max_steps": 4,
            "warmup": 0,
            "lr": 1e-3,
            "checkpoint_every": 2,
            "lambda_bt": 0.5,
            **overrides,
        }
    )
    bundle = ModelBundle(
        12,
        ISAS,
        ModelConfig(dim=8, heads=2, layers=1, dropout=0.1, max_positions=32),
        FlowConfig(),
        rng=streams["model-init"],
        dropout_rng=streams["dropout"],
    )
    corpora = {"toy-a": _blocks(30, 11), "toy-b": _blocks(30, 12)}
    return Trainer(
        bundle,
        corpora,
        config,
        streams,
        checkpoint_path=tmp_path / f"{name}.ckpt",
        metrics_path=tmp_path / f"{name}.metrics",
        provenance={"corpus": "fixture"},
    )


class TestTrainer:
    def test_zero_steps_writes_initial_checkpoint(self, tmp_path):
        trainer = _trainer(tmp_path, max_steps=0)
        assert trainer.train() == []
        checkpoint = load_checkpoint(tmp_path / "run.ckpt")
        assert checkpoint.metadata["step"] == "0"
        assert checkpoint.metadata["pretrain_step"] == "0"
        assert not (tmp_path / "run.metrics").exists()

    def test_metrics_log(self, tmp_path):
        trainer = _trainer(tmp_path, max_steps=3)
        produced = trainer.train()
        lines = (tmp_path / "run.metrics").read_text().splitlines()
        assert len(lines) == len(produced) == 3
        for i, line in enumerate(lines, start=1):
            parts = line.split(" ")
            assert len(parts) == len(METRIC_FIELDS) + 1
            metrics = StepMetrics.from_line(line)
            assert metrics.step == i
            v = metrics.values
            for key in ("dae_src", "dae_tgt", "bt_s2t", "bt_t2s"):
                assert v[key] >= 0.0
            weighted = v["dae_src"] + v["dae_tgt"] + 0.5 * (v["bt_s2t"] + v["bt_t2s"]) + v["mle_src"] + v["mle_tgt"]
            assert v["total"] == pytest.approx(weighted, rel=1e-4, abs=1e-4)
        first = StepMetrics.from_line(lines[0]).values
        assert first["ema"] == first["total"]

    def test_checkpoint_contents(self, tmp_path):
        trainer = _trainer(tmp_path, max_steps=2)
        trainer.train()
        checkpoint = load_checkpoint(tmp_path / "run.ckpt")
        meta = checkpoint.metadata
        assert meta["kind"] == "translator"
        assert meta["isas"] == "toy-a,toy-b"
        assert meta["step"] == "2"
        assert meta["pretrain_step"] == "2"
        assert meta["optim_step"] == "4"
        assert meta["provenance.corpus"] == "fixture"
        names = set(trainer.bundle.named_parameters())
        assert set(checkpoint.select("optim/m/")) == names
        assert names <= set(checkpoint.tensors)

    def test_bundle_rebuilds_from_checkpoint(self, tmp_path):
        trainer = _trainer(tmp_path, max_steps=1)
        trainer.train()
        rebuilt = ModelBundle.from_checkpoint(load_checkpoint(tmp_path / "run.ckpt"))
        assert rebuilt.isas == ISAS
        assert rebuilt.pad_id == trainer.bundle.pad_id
        for name, value in trainer.bundle.state_dict().items():
            np.testing.assert_array_equal(rebuilt.state_dict()[name], value)
        rebuilt.eval()
        trainer.bundle.eval()
        ids = [[0, 5, 6, 0]]
        assert rebuilt.translate(ids, "toy-a", "toy-b", max_len=8) == trainer.bundle.translate(
            ids, "toy-a", "toy-b", max_len=8
        )

    def test_resume_is_bit_identical(self, tmp_path):
        first = _trainer(tmp_path, name="a")
        first.train(max_steps=2)
        shutil.copy(tmp_path / "a.ckpt", tmp_path / "a-step2.ckpt")
        continued = [m.to_line() for m in first.train(max_steps=4)]

        second = _trainer(tmp_path, seed=99, name="b")
        second.resume(tmp_path / "a-step2.ckpt")
        assert second.step == 2
        resumed = [m.to_line() for m in second.train(max_steps=4)]
        assert resumed == continued
        assert _params_digest(second.bundle) == _params_digest(first.bundle)

    def test_resume_truncates_metrics(self, tmp_path):
        trainer = _trainer(tmp_path, checkpoint_every=100)
        trainer.train(max_steps=2)
        shutil.copy(tmp_path / "run.ckpt", tmp_path / "step2.ckpt")
        trainer.train(max_steps=4)
        assert len((tmp_path / "run.metrics").read_text().splitlines()) == 4

        again = _trainer(tmp_path)
        again.resume(tmp_path / "step2.ckpt")
        assert len((tmp_path / "run.metrics").read_text().splitlines()) == 2

    def test_nan_restores_last_checkpoint(self, tmp_path):
        trainer = _trainer(tmp_path)
        trainer.train(max_steps=2)
        saved = _params_digest(trainer.bundle)
        for p in trainer.bundle.parameters():
            p.data = p.data + 1.0
        with patch("binflow.train.trainer.mle_loss", return_value=Tensor(np.array(np.nan))):
            with pytest.raises(TrainingAborted):
                trainer.train(max_steps=4)
        assert trainer.step == 2
        assert _params_digest(trainer.bundle) == saved
        assert load_checkpoint(tmp_path / "run.ckpt").metadata["step"] == "2"

    def test_stops_on_ema(self, tmp_path):
        trainer = _trainer(tmp_path, max_steps=50, loss_stop=1e6)
        produced = trainer.train()
        assert len(produced) == 1
        assert load_checkpoint(tmp_path / "run.ckpt").metadata["step"] == "1"

    def test_flow_likelihood_components_are_non_negative(self, tmp_path):
        trainer = _trainer(tmp_path, max_steps=6, accumulate=1)
        assert trainer.config.lambda_mle == 1.0
        produced = trainer.train()
        assert len(produced) == 6
        for metrics in produced:
            for name, value in metrics.values.items():
                assert value >= 0.0, (metrics.step, name)
        first = produced[0].values
        assert first["mle_src"] == 0.0 and first["mle_tgt"] == 0.0
        assert set(trainer.mle_floor) == set(ISAS)

    def test_ema_stop_reachable_with_flow_likelihood(self, tmp_path):
        # DAE and BT cross-entropies at initialization stay far below 40
        trainer = _trainer(tmp_path, max_steps=20, accumulate=1, loss_stop=40.0)
        produced = trainer.train()
        assert len(produced) == 1
        assert produced[0].values["total"] < 40.0

    def test_flow_parameters_clipped_as_own_group(self, tmp_path):
        trainer = _trainer(tmp_path)
        (flow_group,) = trainer.optimizer.groups
        names = set(trainer.bundle.named_parameters())
        assert set(flow_group) == {name for name in names if name.startswith("flow/")}
        assert flow_group and len(flow_group) < len(names)

    def test_rejects_empty_corpus(self, tmp_path):
        streams = NamedStreams(0)
        bundle = _bundle()
        with pytest.raises(ValueError, match="toy-b"):
            Trainer(bundle, {"toy-a": _blocks(3, 1), "toy-b": []}, TrainingConfig(), streams, tmp_path / "x.ckpt")

    def test_pretraining_lowers_clm_loss(self, tmp_path):
        trainer = _trainer(tmp_path, pretrain_steps=40, accumulate=1, batch_size=8, lr=5e-3)
        batch = trainer.corpora["toy-a"][:8]
        trainer.bundle.eval()
        with no_grad():
            before = clm_loss(batch, "toy-a", trainer.bundle).item()
        trainer.pretrain()
        trainer.bundle.eval()
        with no_grad():
            after = clm_loss(batch, "toy-a", trainer.bundle).item()
        assert after < before
