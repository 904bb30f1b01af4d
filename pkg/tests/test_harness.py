import json
import logging

import numpy as np
import pytest

from hrdyn.datagen import SynthConfig, synth_dataset, synth_ppg
from hrdyn.exceptions import ConfigurationError
from hrdyn.harness import (
    ABLATION_HEADER,
    DeskBenchmark,
    LabelAccessTracker,
    SegmentPair,
    _assert_disjoint,
    augment_xi,
    autoregressive_eval,
    dataset_hash,
    default_ablation_matrix,
    desk_benchmark,
    fit_fold,
    inner_cv_split,
    loso_folds,
    make_pairs,
    run_ablation,
    run_loso,
    write_ablation_csv,
    write_manifest,
)
from hrdyn.model import HRNet, ModelConfig
from hrdyn.signal import PpgSession, segment
from hrdyn.training import TrainConfig, predict_bpm

FS = 16.0


def tiny(conditioning="encoder_decoder", k=3):
    return ModelConfig(k_history=k, xi_embed_dim=4, encoder_hidden=4, decoder_hidden=4,
                       conv_channels=(2, 4), conv_kernels=(7, 5), conditioning=conditioning)


QUICK = TrainConfig(max_epochs=1, k_history=3, inner_max_splits=1)


@pytest.fixture(scope="module")
def sessions():
    return synth_dataset(4, SynthConfig(duration_s=40, fs_hz=FS, artifact_rate=0, seed=31))


def sixty_second_session():
    return synth_dataset(1, SynthConfig(duration_s=60, fs_hz=FS, seed=32))[0]


# ---------------------------------------------------------------- pairs


def test_make_pairs_count():
    s = sixty_second_session()
    assert s.n_segments == 27
    pairs = make_pairs(s, 5)
    assert len(pairs) == 22 and pairs[0].segment_index == 5


def test_make_pairs_k_zero():
    pairs = make_pairs(sixty_second_session(), 0)
    assert len(pairs) == 27 and all(p.xi_t.shape == (0,) for p in pairs)


def test_make_pairs_history_indexing():
    s = sixty_second_session()
    p = next(p for p in make_pairs(s, 3) if p.segment_index == 7)
    assert p.xi_t.tolist() == s.labels[4:7].tolist()
    assert p.y_t == s.labels[7]


def test_make_pairs_from_predictions():
    s = sixty_second_session()
    preds = np.arange(27.0) + 60
    p = make_pairs(s, 2, "predictions", preds)[0]
    assert p.xi_t.tolist() == [60.0, 61.0] and p.y_t == s.labels[2]


def test_make_pairs_short_session_warns(caplog):
    s = synth_dataset(1, SynthConfig(duration_s=14, fs_hz=FS))[0]
    with caplog.at_level(logging.WARNING):
        assert make_pairs(s, 5) == []
    assert "fewer than" in caplog.text


def test_make_pairs_skips_flat_windows(quiet_warnings):
    s = sixty_second_session()
    s.samples[: int(12 * FS)] = 0.0
    idx = [p.segment_index for p in make_pairs(s, 1)]
    assert 1 not in idx and 20 in idx


def test_augment_pairs():
    pairs = make_pairs(sixty_second_session(), 3)
    assert all(np.array_equal(a.xi_t, p.xi_t) for a, p in zip(augment_xi(pairs, 0.0, 3.0, 1), pairs))
    aug = augment_xi(pairs, 0.5, 3.0, 1)
    changed = [not np.array_equal(a.xi_t, p.xi_t) for a, p in zip(aug, pairs)]
    assert sum(changed) == round(0.5 * len(pairs))
    assert all(a.y_t == p.y_t and a.x_t is p.x_t for a, p in zip(aug, pairs))
    assert [a.xi_t.tolist() for a in aug] == [a.xi_t.tolist() for a in augment_xi(pairs, 0.5, 3.0, 1)]


# ---------------------------------------------------------------- folds


def _fake(n):
    return [PpgSession(f"P{i}", FS, np.zeros(10)) for i in range(n)]


@pytest.mark.parametrize("n", [2, 4, 15])
def test_loso_partition(n):
    folds = loso_folds(_fake(n))
    assert len(folds) == n
    assert {f.test_id for f in folds} == {f"P{i}" for i in range(n)}
    for f in folds:
        assert f.test_id not in f.train_ids and len(f.train_ids) == n - 1


def test_loso_needs_two_unique_sessions():
    with pytest.raises(ConfigurationError):
        loso_folds(_fake(1))
    with pytest.raises(ConfigurationError):
        loso_folds(_fake(2) + _fake(1))


def test_inner_cv_partition():
    splits = inner_cv_split(_fake(9), seed=3)
    assert len(splits) == 3 and all(len(s.val) == 3 for s in splits)
    vals = [s.subject_id for sp in splits for s in sp.val]
    assert sorted(vals) == sorted(f"P{i}" for i in range(9))
    for sp in splits:
        assert not {s.subject_id for s in sp.train} & {s.subject_id for s in sp.val}
    again = inner_cv_split(_fake(9), seed=3)
    assert [[s.subject_id for s in sp.val] for sp in again] == \
        [[s.subject_id for s in sp.val] for sp in splits]


def test_inner_cv_fallback(caplog):
    with caplog.at_level(logging.WARNING):
        splits = inner_cv_split(_fake(2), seed=0)
    assert len(splits) == 1 and splits[0].holdout_fraction == 0.2
    assert "falling back" in caplog.text


def test_disjointness_assertions():
    s = sixty_second_session()
    pairs = make_pairs(s, 1)
    with pytest.raises(AssertionError):
        _assert_disjoint(pairs[:5], pairs[5:], exclude_ids=(s.subject_id,), session_level=False)
    with pytest.raises(AssertionError):
        _assert_disjoint(pairs[:5], pairs[3:8], exclude_ids=(), session_level=False)
    with pytest.raises(AssertionError):
        _assert_disjoint(pairs[:5], pairs[5:], exclude_ids=(), session_level=True)
    _assert_disjoint(pairs[:5], pairs[5:], exclude_ids=(), session_level=False)


def test_fit_fold_rejects_leaked_session(sessions):
    with pytest.raises(AssertionError):
        fit_fold(sessions[:3], tiny(), QUICK, seed=0, exclude_ids=(sessions[0].subject_id,))


# ---------------------------------------------------------------- inference


def constant_hr_session(bpm=84.0, n_segments=20):
    hr = np.full(n_segments, bpm)
    return synth_ppg(hr, SynthConfig(duration_s=60, fs_hz=FS, artifact_rate=0, snr_db=None, seed=1),
                     subject_id="C")


def mean_of_xi(x, xi):
    return xi.mean(axis=1)


@pytest.mark.parametrize("bootstrap", [None, 2, 5])
def test_oracle_model_locks_to_bootstrap(bootstrap):
    sess = constant_hr_session()
    res = autoregressive_eval(mean_of_xi, sess, 5, bootstrap=bootstrap, return_details=True)
    preds = res.series.values
    B = res.bootstrap
    assert len(preds) == sess.n_segments
    assert np.all(preds[:B] == preds[0])
    assert np.abs(preds[0] - 84.0) < 1.0
    np.testing.assert_allclose(preds[B:], preds[0], rtol=0, atol=1e-12)


def test_inference_is_label_blind():
    sess = constant_hr_session()
    view = LabelAccessTracker(sess)
    autoregressive_eval(HRNet(tiny(k=5)), view, 5)
    assert view.label_reads == 0
    _ = view.labels
    assert view.label_reads == 1


def test_flat_segment_carried_forward(quiet_warnings):
    sess = constant_hr_session()
    sess.samples[int(20 * FS):int(40 * FS)] = 0.0
    res = autoregressive_eval(mean_of_xi, sess, 3, return_details=True)
    assert res.carried_forward
    for i in res.carried_forward:
        assert res.series.values[i] == res.series.values[i - 1]


def test_unconditioned_model_predicts_directly():
    net = HRNet(tiny("none"))
    sess = constant_hr_session()
    res = autoregressive_eval(net, sess, 5, return_details=True)
    direct = predict_bpm(net, np.stack([s.values for s in segment(sess)]), None)
    assert res.bootstrap == 0
    np.testing.assert_array_equal(res.series.values, direct)


def test_conditioned_needs_bootstrap():
    with pytest.raises(ConfigurationError):
        autoregressive_eval(mean_of_xi, constant_hr_session(), 3, bootstrap=0)


# ---------------------------------------------------------------- LOSO and ablation


def test_run_loso_smoke(sessions):
    res = run_loso(sessions, tiny(), QUICK)
    assert len(res.folds) == 4
    assert all(f.label_reads == 0 and f.test_id not in f.train_ids for f in res.folds)
    assert np.all(np.isfinite(res.maes))
    assert res.report.mae_mean == pytest.approx(np.mean(res.maes))


def test_run_loso_parallel_matches_sequential(sessions):
    a = run_loso(sessions, tiny(), QUICK)
    b = run_loso(sessions, tiny(), QUICK, jobs=2)
    assert a.maes == b.maes


def test_default_ablation_matrix_layout():
    rows = default_ablation_matrix()
    assert [r.variant for r in rows] == ["baseline", "hr_dynamics", "hr_dynamics+aug",
                                         "xi_3", "xi_5", "xi_7"]
    assert [r.k for r in rows[3:]] == [3, 5, 7]


def test_run_ablation_smoke(sessions, tmp_path):
    rows = run_ablation(sessions[:3], tiny(), QUICK, dataset="synth")
    assert len(rows) == 6 and rows[0]["k"] == ""
    assert all(np.isfinite(r["mae_mean"]) for r in rows)
    # xi_5 is the same configuration as hr_dynamics+aug
    assert rows[4]["mae_mean"] == rows[2]["mae_mean"]
    write_ablation_csv(tmp_path / "a.csv", rows)
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == ",".join(ABLATION_HEADER) and len(lines) == 7


def test_desk_benchmark_smoke(sessions):
    bench = DeskBenchmark(max_epochs=1, seeds=(0,), fs_hz=FS)
    out = desk_benchmark(bench, sessions=sessions[:3])
    assert set(out["mae"]) == {"encoder_decoder", "none"}
    assert np.isfinite(out["gain"])
    mc, tc = bench.configs("none")
    assert tc.aug_fraction == 0.0 and mc.conditioning == "none"


# ---------------------------------------------------------------- manifest


def test_manifest_is_deterministic(tmp_path, sessions):
    h = dataset_hash(sessions)
    assert h.startswith("sha256:") and h == dataset_hash(sessions)
    for d in ("a", "b"):
        write_manifest(tmp_path / d, "train", configs={"k": 3}, seeds={"root": 0},
                       inputs_hash=h, metrics={"mae": 1.5}, outputs=["model.json"])
    a = (tmp_path / "a" / "run_manifest.json").read_text()
    assert a == (tmp_path / "b" / "run_manifest.json").read_text()
    doc = json.loads(a)
    assert doc["command"] == "train" and "time" not in json.dumps(doc)


def test_segment_pair_key():
    p = SegmentPair(None, np.zeros(1), 80.0, "S", 4)
    assert p.key == ("S", 4)
