from pathlib import Path

import pytest
from pydantic import ValidationError

from binflow.config import (
    BpeConfig,
    MaskConfig,
    ModelConfig,
    RunConfig,
    ToyConfig,
    config_hash,
    load_run_config,
    nest_dotted,
    parse_overrides,
)

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture
def conf_file(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("# preset\nseed=5\ntrain.batch_size=32\nflow.variant=glow\n", encoding="utf-8")
    return str(path)


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ("BINFLOW_SEED", "BINFLOW_RULES", "BINFLOW_TRAIN__BATCH_SIZE"):
        monkeypatch.delenv(name, raising=False)


def test_defaults():
    config = RunConfig()
    assert config.isas == ("toy-a", "toy-b")
    assert config.model.dim == 64 and config.model.layers == 4 and config.model.heads == 4
    assert config.flow.variant == "scf" and config.flow.count == 3
    assert config.train.mask.rate == 0.15
    assert config.detector.layers == 2


def test_file_layer(conf_file):
    config = load_run_config(conf_file)
    assert config.seed == 5
    assert config.train.batch_size == 32
    assert config.train.lr == RunConfig().train.lr
    assert config.flow.label == "3-glow"


def test_overrides_beat_file(conf_file):
    config = load_run_config(conf_file, ["train.batch_size=16", "flow.count=5"])
    assert config.train.batch_size == 16
    assert config.flow.label == "5-glow"


def test_environment_beats_file(conf_file, monkeypatch):
    monkeypatch.setenv("BINFLOW_SEED", "9")
    assert load_run_config(conf_file).seed == 9
    assert load_run_config(conf_file, seed=3).seed == 3


def test_explicit_none_is_ignored(conf_file):
    assert load_run_config(conf_file, seed=None, manifest=None).seed == 5


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        load_run_config("/nonexistent/run.conf")


@pytest.mark.parametrize("item", ["batch_size", "=3", ""])
def test_malformed_override(item):
    with pytest.raises(ValueError):
        parse_overrides([item])


def test_unknown_key_rejected():
    with pytest.raises(ValidationError):
        load_run_config(None, ["nonsense=1"])


def test_nest_dotted():
    assert nest_dotted({"a.b.c": 1, "a.d": 2, "e": None}) == {"a": {"b": {"c": 1}, "d": 2}}
    with pytest.raises(ValueError):
        nest_dotted({"a": 1, "a.b": 2})


class TestInvariants:
    def test_mask_splits_sum_to_one(self):
        with pytest.raises(ValidationError):
            MaskConfig(mask_split=0.5, random_split=0.1, keep_split=0.1)

    def test_rate_range(self):
        with pytest.raises(ValidationError):
            MaskConfig(rate=1.5)

    def test_heads_divide_dim(self):
        with pytest.raises(ValidationError):
            ModelConfig(dim=30, heads=4)

    def test_toy_op_range(self):
        with pytest.raises(ValidationError):
            ToyConfig(min_ops=10, max_ops=5)

    def test_unknown_rules(self):
        with pytest.raises(ValidationError):
            RunConfig(rules="R4")

    def test_negative_loss_weight(self):
        with pytest.raises(ValidationError):
            load_run_config(None, ["train.lambda_bt=-1"])

    def test_candidates_from_text(self):
        assert BpeConfig(candidates="100, 200,300").candidates == [100, 200, 300]


def test_config_hash():
    a = load_run_config(None, ["train.batch_size=16"])
    b = load_run_config(None, ["train.batch_size=16"])
    c = load_run_config(None, ["train.batch_size=17"])
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(c)
    assert len(config_hash(a)) == 64


def test_toy_preset_loads():
    config = load_run_config(str(ROOT / "configs" / "toy.conf"))
    assert config.model.max_positions == 128
    assert config.bpe.candidates == [100, 200, 300, 500]
    assert config.train.accumulate == 1
    assert config.detector.window == 1024
