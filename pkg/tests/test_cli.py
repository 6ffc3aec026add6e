import json
import sys

import pytest
from loguru import logger

from binflow.cli import build_parser, main
from binflow.utils.io import read_lines, sha256_file

SMALL = ["--set", "toy.count=20", "--set", "toy.heldout=4", "--set", "toy.binaries=20"]


@pytest.fixture(autouse=True)
def restore_logger():
    yield
    logger.remove()
    logger.add(sys.stderr)


@pytest.fixture
def same_text(tmp_path):
    path = tmp_path / "lines.txt"
    path.write_text("mov r1 , r2\nadd r3 , <VALUE>\n")
    return path


class TestUsage:
    @pytest.mark.parametrize(
        "argv",
        [[], ["frobnicate"], ["eval-bleu", "--hyp", "x"], ["eval-auc", "--report", "r", "--log-level", "LOUD"]],
    )
    def test_usage_errors_exit_2(self, argv):
        assert main(argv) == 2

    def test_every_subcommand_is_registered(self):
        sub = next(a for a in build_parser()._actions if a.dest == "command")
        assert set(sub.choices) == {
            "normalize",
            "build-corpus",
            "learn-bpe",
            "select-merges",
            "pretrain",
            "train",
            "translate",
            "eval-bleu",
            "gen-toy",
            "train-detector",
            "score",
            "eval-auc",
            "export-embeddings",
        }

    def test_log_level_is_case_insensitive(self):
        args = build_parser().parse_args(["eval-auc", "--report", "r", "--log-level", "debug"])
        assert args.log_level == "DEBUG"


class TestCommands:
    def test_eval_bleu(self, tmp_path, same_text, capsys):
        manifest = tmp_path / "run.manifest"
        code = main(["eval-bleu", "--hyp", str(same_text), "--ref", str(same_text), "--manifest", str(manifest)])
        assert code == 0
        assert "bleu=1.000000" in capsys.readouterr().out
        (entry,) = [json.loads(line) for line in read_lines(manifest)]
        assert entry["subcommand"] == "eval-bleu" and entry["status"] == "ok"

    def test_missing_input_exits_1(self, tmp_path, same_text, capsys):
        code = main(["eval-bleu", "--hyp", str(tmp_path / "absent"), "--ref", str(same_text), "--manifest", str(tmp_path / "m")])
        assert code == 1
        assert "binflow eval-bleu: error:" in capsys.readouterr().err

    def test_missing_config_exits_1(self, tmp_path, same_text):
        argv = ["eval-bleu", "--hyp", str(same_text), "--ref", str(same_text), "--config", str(tmp_path / "none.conf")]
        assert main(argv) == 1

    def test_bad_override_exits_1(self, same_text):
        assert main(["eval-bleu", "--hyp", str(same_text), "--ref", str(same_text), "--set", "model.dim=-4"]) == 1

    def test_gen_toy_is_reproducible(self, tmp_path):
        manifest = str(tmp_path / "run.manifest")
        for name in ("a", "b"):
            assert main(["gen-toy", "--out", str(tmp_path / name), "--seed", "7", "--manifest", manifest, *SMALL]) == 0
        first = {p.name: sha256_file(p) for p in (tmp_path / "a").iterdir()}
        second = {p.name: sha256_file(p) for p in (tmp_path / "b").iterdir()}
        assert first == second
        assert "toy-a.train" in first and "detect.test.toy-b.jsonl" in first
        entries = [json.loads(line) for line in read_lines(manifest)]
        assert [e["seed"] for e in entries] == [7, 7]
        assert len(read_lines(tmp_path / "a" / "toy-a.train")) == 20

    def test_log_file(self, tmp_path, same_text):
        log = tmp_path / "run.log"
        argv = ["eval-bleu", "--hyp", str(same_text), "--ref", str(same_text), "--manifest", str(tmp_path / "m")]
        assert main([*argv, "--log-file", str(log)]) == 0
        logger.remove()
        assert "BLEU 1.0000" in log.read_text()
