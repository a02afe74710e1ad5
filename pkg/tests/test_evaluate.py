# -*- coding: utf-8 -*-
import numpy as np
import pytest

from src.core.corpus import FRAMES_PER_SYMBOL, load_split
from src.core.errors import ContractViolation, MaskGCTError
from src.core.evaluate import (evaluate, evaluate_e2e, evaluate_e2e_predict, evaluate_s2a, evaluate_t2s,
                               oracle_t2s_generator, prompt_symbols, read_report, report_to_text, score_sequence,
                               write_report)
from src.models import DecodeConfig, EvalReport, SweepRow

from tests.conftest import make_tiny_config

ORACLE_CFG = DecodeConfig(steps=4, top_k=4, w_cfg=0.0)


def test_score_sequence():
    assert score_sequence([1, 2, 3], [1, 2, 3]) == score_sequence(np.array([1, 2, 3]), np.array([1, 2, 3]))
    s = score_sequence([1, 0, 3], [1, 2, 3])
    assert (s.correct, s.total, s.exact) == (2, 3, False)
    longer = score_sequence([1, 2, 3, 4], [1, 2, 3])
    assert (longer.correct, longer.exact) == (3, False)
    shorter = score_sequence([1, 2], [1, 2, 3])
    assert (shorter.correct, shorter.total) == (2, 3)


def test_prompt_symbols_leave_a_target():
    assert prompt_symbols(np.arange(10), 0.3) == 3
    assert prompt_symbols(np.arange(1), 0.9) == 0
    assert prompt_symbols(np.arange(2), 1.0) == 1


def test_oracle_t2s_reaches_full_accuracy(tiny_corpus):
    records = load_split(tiny_corpus, 't2s', 'heldout')
    generate = oracle_t2s_generator(records, 16, ORACLE_CFG)
    scores = evaluate_t2s(generate, records, seed=1, workers=2)
    assert all(s.exact for s in scores)
    assert sum(s.correct for s in scores) == sum(s.total for s in scores)


def test_oracle_pipeline_reaches_full_grid_match(tiny_corpus):
    t2s_records = load_split(tiny_corpus, 't2s', 'heldout')
    s2a_records = load_split(tiny_corpus, 's2a', 'heldout')
    lookup = {tuple(r.semantic.tolist()): r.grid for r in s2a_records}

    def oracle_grid(semantic, prompt_grid, rng):
        return lookup[tuple(semantic.tolist())][:, prompt_grid.shape[1]:]

    per_record = evaluate_s2a(oracle_grid, s2a_records, seed=2)
    assert all(all(s.exact for s in rec) for rec in per_record)
    matches = evaluate_e2e(oracle_t2s_generator(t2s_records, 16, ORACLE_CFG), oracle_grid, t2s_records,
                           s2a_records, seed=3)
    assert all(matches)
    with pytest.raises(ContractViolation):
        evaluate_e2e(None, None, t2s_records, s2a_records[:-1], seed=3)


def _oracle_grid(s2a_records):
    lookup = {tuple(r.semantic.tolist()): r.grid for r in s2a_records}

    def generate(semantic, prompt_grid, rng):
        if tuple(semantic.tolist()) not in lookup:
            return np.zeros((prompt_grid.shape[0], len(semantic) - prompt_grid.shape[1]), dtype=np.int64)
        return lookup[tuple(semantic.tolist())][:, prompt_grid.shape[1]:]
    return generate


def test_predicted_length_from_true_durations_matches_semantic(tiny_corpus):
    t2s_records = load_split(tiny_corpus, 't2s', 'heldout')
    s2a_records = load_split(tiny_corpus, 's2a', 'heldout')
    samples = load_split(tiny_corpus, 'duration', 'heldout')
    table = {tuple(s.phones.tolist()): s.durations for s in samples}

    def true_length(phones, prompt_phones, prompt_durations, rng):
        full = tuple(np.concatenate([prompt_phones, phones]).tolist())
        return int(table[full][len(prompt_phones):].sum())

    rows = evaluate_e2e_predict(oracle_t2s_generator(t2s_records, 16, ORACLE_CFG), _oracle_grid(s2a_records),
                                true_length, t2s_records, s2a_records, samples, seed=5, workers=2)
    assert [err for err, _ in rows] == [0.0] * len(rows)
    assert all(match for _, match in rows)


def test_wrong_predicted_length_never_matches(tiny_corpus):
    t2s_records = load_split(tiny_corpus, 't2s', 'heldout')
    s2a_records = load_split(tiny_corpus, 's2a', 'heldout')
    samples = load_split(tiny_corpus, 'duration', 'heldout')

    def one_frame_long(phones, prompt_phones, prompt_durations, rng):
        return FRAMES_PER_SYMBOL * len(phones) + 1

    def zeros(text, prompt, length, rng):
        return np.zeros(length, dtype=np.int64)

    rows = evaluate_e2e_predict(zeros, _oracle_grid(s2a_records), one_frame_long, t2s_records, s2a_records,
                                samples, seed=6)
    for (err, match), r in zip(rows, t2s_records):
        truth = len(r.semantic) - FRAMES_PER_SYMBOL * prompt_symbols(r.text, 0.3)
        assert err == pytest.approx(1 / truth)
        assert not match
    with pytest.raises(ContractViolation):
        evaluate_e2e_predict(zeros, None, one_frame_long, t2s_records, s2a_records, samples[:-1], seed=6)


def test_multiplier_sweep_scores_overlap(tiny_corpus):
    records = load_split(tiny_corpus, 't2s', 'heldout')

    def truncating(text, prompt, length, rng):
        return np.zeros(length, dtype=np.int64)

    scores = evaluate_t2s(truncating, records, seed=4, multiplier=0.5)
    assert not any(s.exact for s in scores)
    assert all(s.total == len(r.semantic) - 2 * prompt_symbols(r.text, 0.3) for s, r in zip(scores, records))


def test_report_deterministic_and_worker_invariant(trained_dir, tiny_corpus):
    config = make_tiny_config()
    single = evaluate(trained_dir, tiny_corpus, config)
    config.set('eval.workers', 1)
    serial = evaluate(trained_dir, tiny_corpus, config)
    config.set('eval.workers', 4)
    parallel = evaluate(trained_dir, tiny_corpus, config)
    assert serial == parallel
    assert single.token_accuracy == serial.token_accuracy
    assert len(serial.layer_accuracy) == 2
    assert serial.utterances == len(load_split(tiny_corpus, 't2s', 'heldout'))
    assert 0 < serial.codes_used <= 8
    assert serial.codebook_utilization == pytest.approx(serial.codes_used / 8)
    assert 0.0 <= serial.e2e_predict_grid_exact_match <= 1.0
    assert serial.e2e_predict_length_error >= 0.0
    assert 'e2e_predict_length_error=' in report_to_text(serial)


def test_sweep_rows(trained_dir, tiny_corpus):
    report = evaluate(trained_dir, tiny_corpus, make_tiny_config(), sweep=True)
    stages = [row.stage for row in report.sweep]
    assert stages.count('t2s') == 2
    assert stages.count('s2a') == 3
    assert stages.count('duration') == 1
    assert [row.setting for row in report.sweep if row.stage == 't2s'] == ['2', '4']


def test_missing_checkpoints_give_zero_metrics(tmp_path, tiny_corpus):
    report = evaluate(str(tmp_path), tiny_corpus, make_tiny_config())
    assert report.token_accuracy == 0.0
    assert report.layer_accuracy == []
    assert report.e2e_grid_exact_match == 0.0
    assert report.e2e_predict_grid_exact_match == 0.0
    assert report.e2e_predict_length_error == 0.0
    assert report.codes_used == 0
    assert report.utterances > 0


def test_report_round_trip(tmp_path):
    report = EvalReport(token_accuracy=0.1 + 0.2, exact_match=0.5, layer_accuracy=[1.0, 1 / 3],
                        e2e_predict_grid_exact_match=0.75, e2e_predict_length_error=0.125,
                        codes_used=5, utterances=4, config_hash='abc', wall_clock=1.25)
    report.sweep = [SweepRow('t2s', '5', 0.25, 0.0), SweepRow('duration', '1.0', 1 / 7, 0.5)]
    write_report(report, str(tmp_path))
    back = read_report(str(tmp_path))
    assert back == report
    assert back.wall_clock == 1.25
    assert 'sweep_rows=2' in report_to_text(report)


def test_report_errors(tmp_path):
    with pytest.raises(MaskGCTError) as err:
        read_report(str(tmp_path))
    assert err.value.code == "E_IO"
    (tmp_path / 'report.txt').write_text("token_accuracy=oops\n", encoding='utf-8')
    with pytest.raises(ContractViolation) as err:
        read_report(str(tmp_path))
    assert err.value.code == "E_FORMAT"
