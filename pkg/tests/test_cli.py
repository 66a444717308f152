"""
Tests for the command-line interface.
"""

import json

import pytest

from livespeech import cli
from livespeech.exceptions import TrainingError
from livespeech.serialization import load_checkpoint


@pytest.fixture
def config_file(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("HOME", str(tmp_path))
    data = {
        "seed": 0,
        "model": {"n_layers": 2, "n_shared": 1, "n_groups": 2, "n_codebooks": 4, "codebook_size": 8,
                  "d_model": 16, "n_heads": 2, "d_ff": 32, "text_vocab": 6, "cond_len": 2, "feature_dim": 10,
                  "max_positions": 64},
        "dataset": {"symbol_vocab": 6, "theta_dim": 4, "frames_per_symbol": [3, 4], "text_len": [3, 4],
                    "feature_dim": 10, "n_speakers": 4, "n_test_speakers": 1, "utterances_per_speaker": 2},
        "codec": {"n_codebooks": 4, "codebook_size": 8, "iterations": 5},
        "optim": {"lr": 0.01, "min_lr": 0.001, "warmup_steps": 1, "total_steps": 2, "batch_size": 1,
                  "log_every": 1, "eval_every": 2, "eval_utterances": 1},
        "eval": {"enrollment_frames": [10], "max_utterances": 1, "stream_frames": 4},
        "paths": {"data_dir": str(tmp_path / "data"), "codec_path": str(tmp_path / "codec.rvq"),
                  "tokens_dir": str(tmp_path / "tokens"), "run_dir": str(tmp_path / "lm")},
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(data))
    return str(path)


class TestArguments:
    """Test cases for argument handling and exit codes."""

    def test_help_and_version(self, capsys):
        assert cli.main(["--help"]) == 0
        assert "synth-data" in capsys.readouterr().out
        assert cli.main(["--version"]) == 0
        assert "1.0.0" in capsys.readouterr().out

    def test_every_command_is_registered(self):
        parser = cli.create_parser()
        for command in cli.COMMANDS:
            assert command in cli.HANDLERS
            args = parser.parse_args([command, "--checkpoint", "x.lspc"] if command in
                                     ("generate", "stream-bench", "eval", "gridsearch") else [command])
            assert args.command == command

    def test_bad_arguments(self):
        assert cli.main([]) == 1
        assert cli.main(["speak"]) == 1
        assert cli.main(["generate"]) == 1
        assert cli.main(["stream-bench", "--checkpoint", "x.lspc", "--pacing", "fast"]) == 1

    def test_validation_errors_exit_one(self, config_file, tmp_path, capsys):
        assert cli.main(["eval", "--config", config_file, "--checkpoint", str(tmp_path / "absent.lspc")]) == 1
        assert "Error:" in capsys.readouterr().out
        bad = tmp_path / "bad.json"
        bad.write_text('{"chunk_size": 1}')
        assert cli.main(["synth-data", "--config", str(bad)]) == 1

    def test_runtime_errors_exit_two(self, config_file, monkeypatch):
        def fail(args, config):
            raise TrainingError("loss became non-finite")

        monkeypatch.setitem(cli.HANDLERS, "train-lm", fail)
        assert cli.main(["train-lm", "--config", config_file]) == 2


class TestPipeline:
    """The whole command sequence on a tiny configuration."""

    def test_end_to_end(self, config_file, tmp_path, capsys):
        assert cli.main(["synth-data", "--config", config_file]) == 0
        assert (tmp_path / "data" / "metadata.json").exists()
        assert cli.main(["train-codec", "--config", config_file]) == 0
        assert cli.main(["tokenize", "--config", config_file]) == 0
        assert len(list((tmp_path / "tokens").glob("*.grid"))) == 8

        assert cli.main(["train-lm", "--config", config_file, "--steps", "1"]) == 0
        assert cli.main(["train-lm", "--config", config_file,
                         "--resume", str(tmp_path / "lm" / "last.lspc")]) == 0
        checkpoint = str(tmp_path / "lm" / "last.lspc")
        assert load_checkpoint(checkpoint).step == 2

        weights = tmp_path / "weights.csv"
        assert cli.main(["train-lm", "--config", config_file, "--dump-weights", str(weights)]) == 0
        assert weights.read_text().startswith("codebook")

        assert cli.main(["generate", "--config", config_file, "--checkpoint", checkpoint,
                         "--out", str(tmp_path / "gen.grid")]) == 0
        assert (tmp_path / "gen.grid").exists()

        assert cli.main(["stream-bench", "--config", config_file, "--checkpoint", checkpoint,
                         "--out", str(tmp_path / "stream.json")]) == 0
        assert json.loads((tmp_path / "stream.json").read_text())["frames"] == 4

        assert cli.main(["eval", "--config", config_file, "--checkpoint", checkpoint,
                         "--out", str(tmp_path / "eval")]) == 0
        assert (tmp_path / "eval" / "report.json").exists()

        assert cli.main(["gridsearch", "--config", config_file, "--checkpoint", checkpoint,
                         "--temperatures", "1.0", "--top-ks", "2", "--n-sbs", "0,1",
                         "--out", str(tmp_path / "sampler.json")]) == 0
        best = json.loads((tmp_path / "sampler.json").read_text())
        assert best["sampler"]["n_sb"] in (0, 1)
        assert "✓" in capsys.readouterr().out

    def test_tradeoff(self, config_file, tmp_path, capsys):
        out = tmp_path / "tradeoff"
        assert cli.main(["tradeoff", "--config", config_file, "--seeds", "0", "--steps", "1", "--out", str(out)]) == 0
        summary = json.loads((out / "tradeoff.json").read_text())
        assert [row["scheme"] for row in summary["rows"]] == ["uniform", "adaptive", "static_priority"]
        assert "Trade-off direction held in" in capsys.readouterr().out
