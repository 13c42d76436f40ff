import json

import pytest

from rmfnet import __version__
from rmfnet.config import (
    RUN_CONFIG_NAME,
    apply_overrides,
    dataclass_kwargs,
    get_config,
    load_run_config,
    run_directory,
    validate_override,
)
from rmfnet.model import ModelConfig


def test_get_config_defaults(monkeypatch):
    monkeypatch.delenv('DEBUG', raising=False)
    monkeypatch.delenv('LOG_LEVEL', raising=False)
    assert get_config() == {'DEBUG': False, 'LOG_LEVEL': 'INFO'}


def test_get_config_reads_environment(monkeypatch):
    monkeypatch.setenv('DEBUG', 'True')
    monkeypatch.setenv('LOG_LEVEL', 'WARNING')
    config = get_config()
    assert config['DEBUG'] is True
    assert config['LOG_LEVEL'] == 'WARNING'


def test_load_run_config(tmp_path):
    assert load_run_config(None) == {}
    path = tmp_path / 'cfg.json'
    path.write_text('{"seed": 3, "model": {"d_h": 16}}')
    assert load_run_config(str(path)) == {'seed': 3, 'model': {'d_h': 16}}


@pytest.mark.parametrize('content', ['{not json', '[1, 2]'])
def test_load_run_config_rejects_bad_files(tmp_path, content):
    path = tmp_path / 'cfg.json'
    path.write_text(content)
    with pytest.raises(ValueError):
        load_run_config(str(path))


@pytest.mark.parametrize('override, valid', [
    ('model.d_h=64', True),
    ('seed=1', True),
    ('model.d_h', False),
    ('=3', False),
    ('model..d_h=3', False),
    (42, False),
])
def test_validate_override(override, valid):
    is_valid, error_msg = validate_override(override)
    assert is_valid is valid
    assert (error_msg is None) is valid


def test_apply_overrides_parses_json_literals():
    base = {'model': {'d_h': 32}}
    result = apply_overrides(base, ['model.d_h=64', 'epochs=[15,15,70]', 'name=run-a', 'known_poses=true'])
    assert result == {'model': {'d_h': 64}, 'epochs': [15, 15, 70], 'name': 'run-a', 'known_poses': True}
    assert base == {'model': {'d_h': 32}}


def test_apply_overrides_rejects_walk_through_scalar():
    with pytest.raises(ValueError):
        apply_overrides({'seed': 1}, ['seed.value=2'])
    with pytest.raises(ValueError):
        apply_overrides({}, ['no-equals-sign'])


def test_dataclass_kwargs_rejects_unknown_fields():
    assert dataclass_kwargs(ModelConfig, {'d_h': 4}) == {'d_h': 4}
    with pytest.raises(ValueError, match='width'):
        dataclass_kwargs(ModelConfig, {'width': 4})


def test_run_directory_records_config(tmp_path):
    out = tmp_path / 'nested' / 'run'
    with run_directory(out, 'fit-image', {'lr': 0.001}, 5) as path:
        assert path == out
        assert path.is_dir()
    record = json.loads((out / RUN_CONFIG_NAME).read_text())
    assert record == {'command': 'fit-image', 'config': {'lr': 0.001}, 'seed': 5, 'version': __version__}


def test_run_directory_keeps_record_on_failure(tmp_path):
    with pytest.raises(RuntimeError):
        with run_directory(tmp_path, 'simulate', {}, 0):
            raise RuntimeError('boom')
    assert (tmp_path / RUN_CONFIG_NAME).exists()
