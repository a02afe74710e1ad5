# -*- coding: utf-8 -*-
import pytest

from src.core.config import Config, get_config, reset_config, resolve_config, set_config
from src.core.errors import ContractViolation, MaskGCTError


def test_defaults_are_desk_preset():
    config = Config()
    assert config.preset == 'desk'
    assert config['seed'] == 1234
    assert config['s2a.layer_steps'] == 'desk'


def test_unknown_key_rejected():
    config = Config()
    with pytest.raises(ContractViolation) as err:
        config.set('t2s.depth', 3)
    assert err.value.code == "E_CONFIG_KEY"
    with pytest.raises(ContractViolation):
        config.get('nope')


@pytest.mark.parametrize("key, raw, expected", [
    ('t2s.layers', '3', 3),
    ('cfg.w', '3', 3.0),
    ('t2s.gumbel', 'off', False),
    ('t2s.gumbel', 'YES', True),
    ('mask.schedule', ' linear ', 'linear'),
    ('seed', 9.0, 9),
])
def test_values_coerced_to_default_type(key, raw, expected):
    config = Config()
    config.set(key, raw)
    assert config[key] == expected
    assert type(config[key]) is type(expected)


@pytest.mark.parametrize("key, raw", [('seed', '1.5'), ('seed', 2.5), ('cfg.w', 'high'), ('t2s.gumbel', 'maybe')])
def test_bad_values_rejected(key, raw):
    with pytest.raises(ContractViolation) as err:
        Config().set(key, raw)
    assert err.value.code == "E_CONFIG_VALUE"


def test_override_precedence(tmp_path):
    path = tmp_path / 'run.env'
    path.write_text("t2s.layers=3\ncfg.w=1.0\nseed=5\n", encoding='utf-8')
    config = resolve_config('paper', str(path), ['cfg.w=2.0', 'seed=6'], seed=7)
    assert config['t2s.layers'] == 3
    assert config['t2s.dim'] == 1024
    assert config['cfg.w'] == 2.0
    assert config['seed'] == 7


def test_override_needs_equals_sign():
    with pytest.raises(ContractViolation) as err:
        Config().apply_overrides(['cfg.w'])
    assert err.value.code == "E_CONFIG_VALUE"


def test_missing_config_file_is_io_error(tmp_path):
    with pytest.raises(MaskGCTError) as err:
        Config().load_file(str(tmp_path / 'absent.env'))
    assert err.value.code == "E_IO"


def test_config_file_unknown_key_rejected(tmp_path):
    path = tmp_path / 'bad.env'
    path.write_text("t2s.depth=4\n", encoding='utf-8')
    with pytest.raises(ContractViolation) as err:
        Config().load_file(str(path))
    assert err.value.code == "E_CONFIG_KEY"


def test_unknown_preset_rejected():
    with pytest.raises(ContractViolation) as err:
        Config('huge')
    assert err.value.code == "E_CONFIG_VALUE"


def test_preset_from_environment(monkeypatch):
    monkeypatch.setenv('MGCT_PRESET', 'paper')
    assert Config().preset == 'paper'
    assert Config('desk').preset == 'desk'


def test_full_is_alias_of_paper_preset():
    alias, paper = Config('full'), Config('paper')
    assert alias.preset == 'paper'
    assert alias.to_lines() == paper.to_lines()
    assert paper['corpus.acoustic_codebook'] == 1024
    assert paper['corpus.semantic_vocab'] == 8192


def test_hash_stable_and_sensitive():
    a, b = Config(), Config()
    assert a.hash() == b.hash()
    assert len(a.hash()) == 16
    b.set('cfg.w', 2.0)
    assert a.hash() != b.hash()
    assert a.to_lines() == sorted(a.to_lines())


def test_snapshot_round_trip():
    config = Config()
    config.update({'t2s.layers': 3, 't2s.gumbel': False, 'cfg.rescale': 0.5})
    snapshot = dict(line.split('=', 1) for line in config.to_lines())
    restored = Config.from_snapshot(snapshot)
    assert restored.as_dict() == config.as_dict()
    assert restored.hash() == config.hash()


def test_list_values():
    config = Config()
    assert config.list_of('eval.sweep', int) == [5, 10, 25, 50]
    assert config.list_of('eval.s2a_presets', str) == ['desk', 'fast', 'quality']
    config.set('eval.sweep', '5,x')
    with pytest.raises(ContractViolation):
        config.list_of('eval.sweep', int)


def test_derived_configs():
    config = Config()
    t = config.transformer('t2s')
    assert (t.layers, t.model_dim, t.ffn_dim, t.heads) == (2, 64, 256, 4)
    assert config.decode('t2s').steps == 25
    assert config.decode('s2a').steps == 1
    assert config.decode('t2s', steps=7).w_cfg == 2.5
    acoustic = config.codec('acoustic_codec')
    assert (acoustic.layers, acoustic.codebook_size) == (4, 32)
    assert config.codec('semantic_codec').layers == 1
    spec = config.task_spec()
    assert spec.semantic_vocab == 64 and spec.utterances == 600


def test_invalid_transformer_shape_rejected():
    config = Config()
    config.set('t2s.heads', 3)
    with pytest.raises(ContractViolation):
        config.transformer('t2s')


def test_global_config_lifecycle():
    reset_config()
    first = get_config()
    assert get_config() is first
    custom = Config()
    set_config(custom)
    assert get_config() is custom
    reset_config()
    assert get_config() is not custom
