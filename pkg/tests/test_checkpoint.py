# -*- coding: utf-8 -*-
import struct

import numpy as np
import pytest

from src.core.checkpoint import (Checkpoint, decode_checkpoint, describe_checkpoint, encode_checkpoint,
                                 load_checkpoint, pack_checkpoint, restore_optimizer, save_checkpoint)
from src.core.config import Config
from src.core.errors import ContractViolation, MaskGCTError
from src.core.nn import Linear
from src.core.numerics import AdamW, Rng, RngState, Tensor, grad_of


def _trained_linear():
    model = Linear(3, 2, Rng(1))
    opt = AdamW(model.parameters(), lr=0.01, warmup=1)
    x = Tensor(Rng(2).normal((4, 3)))
    for _ in range(3):
        opt.step(grad_of((model(x) * model(x)).sum(), opt.params))
    return model, opt


def _sample_checkpoint():
    model, opt = _trained_linear()
    rng = Rng(9)
    rng.normal(3)
    return pack_checkpoint('t2s', Config().to_lines(), model, opt, rng, {'feature_mean': np.arange(4.0)})


def test_encode_decode_is_bit_exact():
    ckpt = _sample_checkpoint()
    back = decode_checkpoint(encode_checkpoint(ckpt))
    assert back.kind == 't2s'
    assert back.step == 3
    assert back.rng == RngState(9, 1)
    assert back.config == ckpt.config
    assert list(back.tensors) == list(ckpt.tensors)
    for name, value in ckpt.tensors.items():
        assert np.array_equal(back.tensors[name], np.asarray(value, dtype=np.float32))
    assert encode_checkpoint(back) == encode_checkpoint(ckpt)


def test_prefixed_views():
    ckpt = _sample_checkpoint()
    assert set(ckpt.model_state()) == set(Linear(3, 2, Rng(1)).state_dict())
    np.testing.assert_array_equal(ckpt.extras()['feature_mean'], np.arange(4.0))
    assert ckpt.has_optimizer()


def test_file_round_trip_restores_model_and_optimizer(tmp_path):
    model, opt = _trained_linear()
    path = save_checkpoint(str(tmp_path / 'sub' / 't2s.mgct'), pack_checkpoint('t2s', [], model, opt))
    assert not (tmp_path / 'sub' / 't2s.mgct.tmp').exists()
    ckpt = load_checkpoint(path, expected_kind='t2s')

    fresh = Linear(3, 2, Rng(5))
    fresh.load_state_dict(ckpt.model_state())
    new_opt = AdamW(fresh.parameters(), lr=0.01, warmup=1)
    restore_optimizer(ckpt, new_opt)
    assert new_opt.state.step == 3
    for a, b in zip(new_opt.state.m, opt.state.m):
        np.testing.assert_array_equal(a, b.astype(np.float32))
    for a, b in zip(fresh.parameters(), model.parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_bad_magic_and_version():
    data = encode_checkpoint(_sample_checkpoint())
    with pytest.raises(ContractViolation) as err:
        decode_checkpoint(b'XXXX' + data[4:])
    assert err.value.code == "E_CKPT_MAGIC"
    with pytest.raises(ContractViolation) as err:
        decode_checkpoint(data[:4] + struct.pack('<I', 99) + data[8:])
    assert err.value.code == "E_CKPT_VERSION"


@pytest.mark.parametrize("cut", [6, 20, -3])
def test_truncated_checkpoint_is_format_error(cut):
    data = encode_checkpoint(_sample_checkpoint())
    with pytest.raises(ContractViolation) as err:
        decode_checkpoint(data[:cut])
    assert err.value.code == "E_FORMAT"


def test_kind_checks(tmp_path):
    with pytest.raises(ContractViolation) as err:
        encode_checkpoint(Checkpoint('vocoder'))
    assert err.value.code == "E_CKPT_KIND"
    path = save_checkpoint(str(tmp_path / 'd.mgct'), Checkpoint('duration'))
    with pytest.raises(ContractViolation) as err:
        load_checkpoint(path, expected_kind='s2a')
    assert err.value.code == "E_CKPT_KIND"


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(MaskGCTError) as err:
        load_checkpoint(str(tmp_path / 'none.mgct'))
    assert err.value.code == "E_IO"


def test_restore_optimizer_rejects_mismatch():
    ckpt = _sample_checkpoint()
    other = AdamW(Linear(5, 2, Rng(3)).parameters(), lr=0.01, warmup=1)
    with pytest.raises(ContractViolation):
        restore_optimizer(ckpt, other)


def test_describe_lists_header_tensors_and_config():
    ckpt = _sample_checkpoint()
    text = describe_checkpoint(ckpt).splitlines()
    assert text[0] == 'kind=t2s'
    assert 'step=3' in text
    assert f"parameters={sum(v.size for v in ckpt.model_state().values())}" in text
    assert any(line.startswith('tensor model.') for line in text)
    assert 'config seed=1234' in text
