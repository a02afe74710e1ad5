# -*- coding: utf-8 -*-
import os
import shutil
from pathlib import Path

import numpy as np
import pytest

from src.core.acoustic_codec import AcousticTokenGrid
from src.core.corpus import FRAMES_PER_SYMBOL, load_split
from src.core.errors import ContractViolation, MissingCheckpointError
from src.core.evaluate import prompt_symbols
from src.core.numerics import Rng
from src.core.semantic_codec import read_features
from src.core.synthesis import MaskGCTPipeline, read_semantic, scaled_length
from src.models import PromptRecord


@pytest.fixture(scope="module")
def prompt(tiny_corpus):
    t2s = load_split(tiny_corpus, 't2s', 'heldout')[0]
    s2a = load_split(tiny_corpus, 's2a', 'heldout')[0]
    durations = load_split(tiny_corpus, 'duration', 'heldout')[0]
    return PromptRecord(t2s.text[:2], s2a.semantic[:4], s2a.grid[:, :4], durations.durations[:2])


@pytest.fixture(scope="module")
def pipeline(trained_dir):
    return MaskGCTPipeline(trained_dir)


def test_scaled_length():
    assert scaled_length(10, 1.0) == 10
    assert scaled_length(10, 0.5) == 5
    assert scaled_length(3, 1.5) == 5
    assert scaled_length(1, 0.5) == 1
    for bad in (0.49, 2.01):
        with pytest.raises(ContractViolation) as err:
            scaled_length(10, bad)
        assert err.value.code == "E_RANGE"


def test_missing_checkpoints_named(tmp_path, trained_dir):
    with pytest.raises(MissingCheckpointError) as err:
        MaskGCTPipeline(str(tmp_path))
    assert err.value.module == 't2s'
    assert err.value.code == "E_MISSING_CHECKPOINT"

    for kind in ('t2s', 's2a'):
        shutil.copy(os.path.join(trained_dir, f'{kind}.mgct'), tmp_path)
    MaskGCTPipeline(str(tmp_path))
    with pytest.raises(MissingCheckpointError) as err:
        MaskGCTPipeline(str(tmp_path), need_duration=True)
    assert err.value.module == 'duration'


def test_predicting_without_duration_model(tmp_path, trained_dir, prompt):
    for kind in ('t2s', 's2a'):
        shutil.copy(os.path.join(trained_dir, f'{kind}.mgct'), tmp_path)
    with pytest.raises(MissingCheckpointError):
        MaskGCTPipeline(str(tmp_path)).synthesize([1, 2], prompt, length=None, rng=Rng(1))


def test_given_length_output(pipeline, prompt, tmp_path):
    result = pipeline.synthesize([1, 2, 3], prompt, length=7, rng=Rng(2), out_dir=str(tmp_path))
    assert result.length == 7 and result.length_mode == 'given'
    assert result.semantic.shape == (7,)
    assert result.grid.shape == (pipeline.s2a.layers, 7)
    assert result.semantic.max() < pipeline.t2s.vocab.size
    assert result.grid.max() < pipeline.s2a.codebook_size
    assert result.features.shape == (7, 4)

    np.testing.assert_array_equal(read_semantic(result.artifacts['semantic']), result.semantic)
    np.testing.assert_array_equal(AcousticTokenGrid.load(result.artifacts['acoustic_grid']).codes, result.grid)
    np.testing.assert_array_equal(read_features(result.artifacts['features']), result.features)
    lines = Path(result.artifacts['metadata']).read_text(encoding='utf-8').split()
    meta = dict(line.split('=', 1) for line in lines)
    assert meta['length'] == '7'
    assert meta['length_mode'] == 'given'
    assert meta['layer_steps'] == '8,4'


def test_predicted_length_is_used(pipeline, prompt):
    result = pipeline.synthesize([1, 2, 3], prompt, length=None, rng=Rng(3))
    assert result.length_mode == 'predict'
    assert result.predicted_length >= 3
    assert result.length == result.predicted_length
    assert len(result.semantic) == result.length


def test_predict_mode_synthesis_on_trained_models(pipeline, tiny_corpus, tmp_path):
    t2s = load_split(tiny_corpus, 't2s', 'heldout')[1]
    s2a = load_split(tiny_corpus, 's2a', 'heldout')[1]
    durations = load_split(tiny_corpus, 'duration', 'heldout')[1]
    k = prompt_symbols(t2s.text, 0.3)
    frames = FRAMES_PER_SYMBOL * k
    prompt = PromptRecord(t2s.text[:k], t2s.semantic[:frames], s2a.grid[:, :frames], durations.durations[:k])
    a = pipeline.synthesize(t2s.text[k:], prompt, length=None, rng=Rng(8), out_dir=str(tmp_path))
    b = pipeline.synthesize(t2s.text[k:], prompt, length=None, rng=Rng(8))
    assert a.length_mode == 'predict'
    assert a.length == a.predicted_length == b.predicted_length
    assert a.length >= len(t2s.text) - k
    assert a.grid.shape == (pipeline.s2a.layers, a.length)
    np.testing.assert_array_equal(a.grid, b.grid)
    meta = Path(a.artifacts['metadata']).read_text(encoding='utf-8')
    assert 'length_mode=predict\n' in meta


def test_multiplier_scales_length(pipeline, prompt):
    result = pipeline.synthesize([1, 2], prompt, length=8, rng=Rng(4), multiplier=1.5)
    assert result.length == 12
    assert result.grid.shape[1] == 12


def test_step_overrides(pipeline, prompt, tmp_path):
    result = pipeline.synthesize([1], prompt, length=3, rng=Rng(5), t2s_steps=1, layer_steps=[2, 1],
                                 out_dir=str(tmp_path))
    meta = Path(result.artifacts['metadata']).read_text(encoding='utf-8')
    assert 't2s_steps=1\n' in meta
    assert 'layer_steps=2,1\n' in meta


def test_same_rng_same_output(pipeline, prompt):
    a = pipeline.synthesize([3, 1], prompt, length=5, rng=Rng(6))
    b = pipeline.synthesize([3, 1], prompt, length=5, rng=Rng(6))
    np.testing.assert_array_equal(a.semantic, b.semantic)
    np.testing.assert_array_equal(a.grid, b.grid)


def test_input_errors(pipeline, prompt):
    with pytest.raises(ContractViolation) as err:
        pipeline.synthesize([], prompt, length=3)
    assert err.value.code == "E_EMPTY"
    with pytest.raises(ContractViolation) as err:
        pipeline.synthesize([1], prompt, length=0)
    assert err.value.code == "E_RANGE"
    bad = PromptRecord(prompt.text, prompt.semantic[:3], prompt.grid)
    with pytest.raises(ContractViolation) as err:
        pipeline.synthesize([1], bad, length=3)
    assert err.value.code == "E_ALIGNMENT"
