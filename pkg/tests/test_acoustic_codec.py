# -*- coding: utf-8 -*-
import numpy as np
import pytest

from src.core.acoustic_codec import (AcousticCodec, AcousticTokenGrid, RvqStack, acoustic_recon_loss,
                                     multi_window_l1, rvq_decode, rvq_encode)
from src.core.errors import ContractViolation, MaskGCTError
from src.core.numerics import Rng, Tensor, grad_of
from src.models import CodecConfig

SMALL = CodecConfig(feature_dim=4, hidden=8, blocks=1, codebook_size=8, code_dim=2, layers=3, dead_after=0)


def _codebooks(seed, layers=4, size=32, dim=3):
    rng = np.random.default_rng(seed)
    books = []
    for j in range(layers):
        book = rng.normal(size=(size, dim)) * (0.5 ** j)
        book[0] = 0.0
        books.append(book)
    return books


# ---------- 残差量化 ----------

def test_rvq_layers_pick_nearest_entry_for_their_residual():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(10000, 3))
    books = _codebooks(2)
    grid, residuals = rvq_encode(x, books)
    assert grid.shape == (4, 10000)
    residual = x
    for j, book in enumerate(books):
        dists = np.stack([np.sum((residual - e) ** 2, axis=-1) for e in book], axis=1)
        np.testing.assert_array_equal(grid[j], dists.argmin(axis=1))
        residual = residual - book[grid[j]]
        np.testing.assert_allclose(residuals[j], residual)


def test_rvq_residual_norm_never_grows_with_zero_entry():
    x = np.random.default_rng(3).normal(size=(500, 3))
    _, residuals = rvq_encode(x, _codebooks(4))
    norms = [np.linalg.norm(x, axis=-1)] + [np.linalg.norm(r, axis=-1) for r in residuals]
    for before, after in zip(norms, norms[1:]):
        assert np.all(after <= before + 1e-12)


def test_rvq_prefix_decode_telescopes():
    x = np.random.default_rng(5).normal(size=(200, 3))
    books = _codebooks(6)
    grid, residuals = rvq_encode(x, books)
    for j in range(1, len(books) + 1):
        np.testing.assert_allclose(rvq_decode(grid, books, j) + residuals[j - 1], x, atol=1e-5)


def test_rvq_decode_layer_range():
    books = _codebooks(7, layers=2)
    grid, _ = rvq_encode(np.zeros((4, 3)), books)
    for bad in (0, 3):
        with pytest.raises(ContractViolation) as err:
            rvq_decode(grid, books, bad)
        assert err.value.code == "E_RANGE"


def test_rvq_encode_rejects_non_finite():
    x = np.zeros((3, 3))
    x[1, 2] = np.inf
    with pytest.raises(ContractViolation) as err:
        rvq_encode(x, _codebooks(8))
    assert err.value.code == "E_RANGE"


def test_rvq_stack_requires_a_layer():
    with pytest.raises(ContractViolation):
        RvqStack(0, 4, 2, Rng(1))


def test_rvq_stack_quantize_matches_inference_encode():
    stack = RvqStack(3, 8, 2, Rng(9))
    z = Tensor(Rng(10).normal((2, 5, 2)))
    grid, quantized, _, _ = stack.quantize(z)
    ref, _ = rvq_encode(z.data, stack.entries())
    np.testing.assert_array_equal(grid, ref)
    np.testing.assert_allclose(quantized.data, rvq_decode(ref, stack.entries(), 3), atol=1e-6)


# ---------- 网格文件 ----------

def test_grid_text_and_file_round_trip(tmp_path):
    grid = AcousticTokenGrid(np.array([[1, 2, 3], [0, 7, 5]]))
    assert grid.to_text().splitlines()[0] == "layers=2 frames=3"
    np.testing.assert_array_equal(AcousticTokenGrid.from_text(grid.to_text()).codes, grid.codes)
    path = str(tmp_path / 'grid.txt')
    grid.save(path)
    np.testing.assert_array_equal(AcousticTokenGrid.load(path).codes, grid.codes)


@pytest.mark.parametrize("text", ["", "layers=x frames=2\n1 2\n", "layers=2 frames=2\n1 2\n", "layers=1 frames=3\n1 2\n"])
def test_grid_text_format_errors(text):
    with pytest.raises(ContractViolation) as err:
        AcousticTokenGrid.from_text(text)
    assert err.value.code == "E_FORMAT"


def test_grid_validate_and_missing_file(tmp_path):
    with pytest.raises(ContractViolation) as err:
        AcousticTokenGrid(np.array([[0, 8]])).validate(8)
    assert err.value.code == "E_RANGE"
    with pytest.raises(MaskGCTError) as err:
        AcousticTokenGrid.load(str(tmp_path / 'none.txt'))
    assert err.value.code == "E_IO"


# ---------- 重建损失 ----------

def test_multi_window_l1_hand_case():
    x = Tensor(np.ones((1, 8, 2)))
    x_hat = Tensor(np.zeros((1, 8, 2)))
    # 16 帧窗口长于序列，被跳过
    assert multi_window_l1(x, x_hat).item() == pytest.approx(2.0)


def test_multi_window_l1_coarse_windows_forgive_zero_mean_noise():
    x = Tensor(np.zeros((1, 16, 1)))
    alternating = np.tile([1.0, -1.0], 8).reshape(1, 16, 1)
    assert multi_window_l1(x, Tensor(alternating)).item() == pytest.approx(1.0)


def test_acoustic_recon_loss_weights():
    x = Tensor(np.ones((1, 4, 1)))
    loss = acoustic_recon_loss(x, Tensor(np.zeros((1, 4, 1))), Tensor(2.0), Tensor(4.0),
                               lambda_rec=10.0, lambda_codebook=1.0, lambda_commit=0.25)
    assert loss.rec.item() == pytest.approx(2.0)
    assert loss.total.item() == pytest.approx(10.0 * 2.0 + 2.0 + 1.0)


# ---------- 编解码器 ----------

def test_codec_forward_and_tokenize_shapes():
    codec = AcousticCodec(SMALL, Rng(11))
    out = codec(Rng(12).normal((2, 10, 4)))
    assert out.recon.shape == (2, 10, 4)
    assert out.grid.shape == (3, 2, 10)
    grid = codec.tokenize(Rng(13).normal((15, 4)))
    assert (grid.layers, grid.frames) == (3, 15)
    assert codec.decode_grid(grid).shape == (15, 4)


def test_codec_loss_reaches_encoder():
    codec = AcousticCodec(SMALL, Rng(14))
    x = Rng(15).normal((1, 12, 4))
    grads = grad_of(codec.loss(x).total, codec.encoder.parameters())
    assert any(np.any(g != 0) for g in grads)


def test_decode_grid_rejects_layer_mismatch():
    codec = AcousticCodec(SMALL, Rng(16))
    with pytest.raises(ContractViolation) as err:
        codec.decode_grid(AcousticTokenGrid(np.zeros((2, 5), dtype=np.int64)))
    assert err.value.code == "E_SHAPE"


def test_codec_rejects_empty_sequence():
    codec = AcousticCodec(SMALL, Rng(17))
    with pytest.raises(ContractViolation) as err:
        codec.encode(np.zeros((0, 4)))
    assert err.value.code == "E_EMPTY"
