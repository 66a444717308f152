"""
Test configuration for livespeech package.
"""

import json
import os

import pytest

from livespeech.config import Config, RunConfig
from livespeech.exceptions import ConfigError

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "configs")


@pytest.fixture(autouse=True)
def isolated(tmp_path, monkeypatch):
    """Keep config files in the working directory or home out of the tests."""
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("HOME", str(tmp_path))
    return tmp_path


class TestConfig:
    """Test cases for Config class."""

    def test_default_config(self):
        """Test default configuration values."""
        config = Config()

        assert config.get('seed') == 0
        assert config.get('log_level') == 'INFO'
        assert config.get('model.n_layers') == 4
        assert config.get('loss.scheme') == 'adaptive'
        assert config.get('loss.p_max') is None
        assert config.get('sampler.top_k') == 10

    def test_config_override(self):
        """Test configuration override with kwargs."""
        config = Config(seed=3, model={'n_layers': 2})

        assert config.get('seed') == 3
        assert config.get('model.n_layers') == 2
        assert config.get('model.d_model') == 128  # Default preserved

    def test_config_file_loading(self, isolated):
        """Test loading configuration from file."""
        config_file = isolated / 'run.json'
        config_file.write_text('{"seed": 9, "optim": {"lr": 0.01}, "_comment": "ignored"}')

        config = Config(config_file=str(config_file))
        assert config.get('seed') == 9
        assert config.get('optim.lr') == 0.01

    def test_config_file_found_in_working_directory(self, isolated):
        (isolated / 'livespeech_config.json').write_text('{"sampler": {"n_sb": 3}}')

        assert Config().get('sampler.n_sb') == 3

    def test_env_var_loading(self, monkeypatch):
        """Test loading configuration from environment variables."""
        monkeypatch.setenv('LIVESPEECH_OPTIM_LR', '0.01')
        monkeypatch.setenv('LIVESPEECH_LOSS_P_MAX', '0.5')
        monkeypatch.setenv('LIVESPEECH_EVAL_PLOTS', 'true')
        monkeypatch.setenv('LIVESPEECH_MODEL_GROUP_OF', '0,0,1,1')
        monkeypatch.setenv('LIVESPEECH_SEED', '5')

        config = Config()
        assert config.get('optim.lr') == 0.01
        assert config.get('loss.p_max') == 0.5
        assert config.get('eval.plots') is True
        assert config.get('model.group_of') == [0, 0, 1, 1]
        assert config.get('seed') == 5

    def test_env_overrides_file_and_kwargs_override_env(self, isolated, monkeypatch):
        (isolated / 'livespeech_config.json').write_text('{"seed": 1}')
        monkeypatch.setenv('LIVESPEECH_SEED', '2')

        assert Config().get('seed') == 2
        assert Config(seed=3).get('seed') == 3

    def test_invalid_env_value(self, monkeypatch):
        monkeypatch.setenv('LIVESPEECH_OPTIM_BATCH_SIZE', 'four')

        with pytest.raises(ConfigError, match='LIVESPEECH_OPTIM_BATCH_SIZE'):
            Config()

    def test_unknown_keys_rejected(self, isolated):
        with pytest.raises(ConfigError, match='Unknown configuration key'):
            Config(chunk_size=1)

        config_file = isolated / 'bad.json'
        config_file.write_text('{"model": {"n_layer": 2}}')
        with pytest.raises(ConfigError, match='n_layer'):
            Config(config_file=str(config_file))

    def test_missing_or_broken_file(self, isolated):
        with pytest.raises(ConfigError, match='not found'):
            Config(config_file=str(isolated / 'absent.json'))

        broken = isolated / 'broken.json'
        broken.write_text('{"seed": ')
        with pytest.raises(ConfigError, match='Could not load'):
            Config(config_file=str(broken))

    def test_set_and_save(self, isolated):
        config = Config()
        config.set('sampler.temperature', 1.2)
        config.set('seed', 4)
        path = isolated / 'out' / 'config.json'
        config.save(str(path))

        with open(path) as f:
            saved = json.load(f)
        assert saved['sampler']['temperature'] == 1.2
        assert Config(config_file=str(path)).to_dict() == config.to_dict()


class TestRunConfig:
    """Test cases for the typed run configuration."""

    def test_run_config_from_sections(self):
        config = Config(model={'n_groups': 4, 'n_codebooks': 8}, optim={'total_steps': 500})
        run = config.run_config()

        assert isinstance(run, RunConfig)
        assert run.model.group_of == (0, 0, 1, 1, 2, 2, 3, 3)
        assert run.loss.total_steps == 500

    def test_invalid_section_values(self):
        with pytest.raises(ConfigError, match='n_shared'):
            Config(model={'n_shared': 9}).run_config()

    def test_dict_round_trip(self):
        run = Config(sampler={'top_k': [5, 4, 3]}, seed=7).run_config()

        assert RunConfig.from_dict(run.to_dict()) == run
        assert run.sampler.top_k == (5, 4, 3)

    def test_from_dict_missing_section(self):
        data = RunConfig().to_dict()
        del data['optim']

        with pytest.raises(ConfigError, match='invalid run configuration'):
            RunConfig.from_dict(data)

    @pytest.mark.parametrize('name', ['uniform', 'adaptive', 'static_priority'])
    def test_shipped_experiment_configs(self, name):
        path = os.path.join(CONFIG_DIR, f'{name}.json')
        run = Config(config_file=path).run_config()

        assert run.loss.scheme == name
        assert run.paths.run_dir.endswith(name)
