import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from advquality.attacks import AttackConfig
from advquality.datasets import SyntheticSpec, generate_synthetic, stratified_split
from advquality.experiments import train_run
from advquality.nn import TrainConfig, mlp
from advquality.objectives import ObjectiveConfig
from advquality.profiler import (ExampleRecord, ProfileRecords, QualityRanking, ensemble_rank,
                                 first_learned_epoch, first_learned_epochs, learning_order_scores,
                                 load_records, prediction_probability, quality_rank, read_profile,
                                 read_ranking, record_epoch, ranking_from_profile, save_records,
                                 spearman, stability, stability_scores, write_profile, write_ranking)


def rec(flags, probs=None):
    flags = np.array(flags, dtype=bool)
    probs = np.zeros(len(flags)) if probs is None else np.asarray(probs)
    return ExampleRecord(0, flags, probs)


def test_stability_examples():
    assert stability(rec([True] * 10)) == 1.0
    assert stability(rec([False] * 10)) == 0.0
    assert stability(rec([True] * 40 + [False] * 120)) == 0.25
    with pytest.raises(ValueError):
        stability(rec([]))


def test_first_learned_examples():
    assert first_learned_epoch(rec([False, False, True, True])) == 2
    assert first_learned_epoch(rec([False] * 4)) is None
    assert first_learned_epoch(rec([True] * 4)) == 0


@given(st.lists(st.lists(st.booleans(), min_size=3, max_size=3), min_size=1, max_size=12))
def test_stability_one_iff_learned_at_start_and_kept(rows):
    records = ProfileRecords([10, 11, 12], len(rows))
    for t, row in enumerate(rows):
        records.log(t, row, np.zeros(3))
    s = stability_scores(records)
    first = first_learned_epochs(records)
    for i in range(3):
        r = records[i]
        assert s[i] == stability(r)
        assert (s[i] == 1.0) == (first[i] == 0 and r.robust_correct.all())
        fl = first_learned_epoch(r)
        assert first[i] == (-1 if fl is None else fl)


def test_records_bookkeeping():
    records = ProfileRecords([0, 1], 3)
    assert len(records[0].robust_correct) == 0
    records.log(0, [True, False], [0.9, 0.2])
    assert len(records[1].robust_correct) == 1
    with pytest.raises(ValueError):
        records.log(2, [True, True], [0.5, 0.5])
    records.log(1, [True, True], [0.5, 0.5]).log(2, [True, True], [0.5, 0.5])
    with pytest.raises(ValueError):
        records.log(3, [True, True], [0.5, 0.5])


def test_record_epoch_with_zero_radius_is_clean_correctness(rng):
    net = mlp(4, 3, (8,), seed=1)
    X = rng.random((30, 4))
    Y = rng.integers(0, 3, 30)
    records = ProfileRecords(np.arange(30), 1)
    record_epoch(records, 0, net, X, Y, AttackConfig(0.0, 0.01, 3))
    assert np.array_equal(records.robust_correct[0], net.predict(X) == Y)
    logits = net.logits(X)
    P = np.exp(logits - logits.max(axis=1, keepdims=True))
    P /= P.sum(axis=1, keepdims=True)
    assert np.allclose(records.clean_true_prob[0], P[np.arange(30), Y], atol=1e-15)


def test_prediction_probability_indexing():
    records = ProfileRecords([0, 1], 3)
    for t in range(3):
        records.log(t, [True, True], [0.1 * (t + 1), 0.5])
    assert np.allclose(prediction_probability(records, 1), [0.2, 0.5])
    with pytest.raises(ValueError):
        prediction_probability(records, 3)
    partial = ProfileRecords([0], 3).log(0, [True], [0.4])
    with pytest.raises(ValueError):
        prediction_probability(partial, 1)


def test_uniform_model_probability_is_one_over_k(rng):
    from advquality.nn import Network
    net = Network([np.zeros((10, 4))], [np.zeros(10)])
    records = ProfileRecords(np.arange(5), 1)
    record_epoch(records, 0, net, rng.random((5, 4)), np.arange(5), AttackConfig())
    assert np.allclose(prediction_probability(records, 0), 0.1, atol=1e-15)


def test_quality_rank_examples():
    assert list(quality_rank([0.9, 0.1, 0.5]).ranks) == [3, 1, 2]
    assert list(quality_rank([0.5] * 4, ids=[7, 2, 9, 4]).ranks) == [3, 1, 4, 2]
    assert list(quality_rank([5, 80, 20], measure="learning_order").ranks) == [3, 1, 2]
    with pytest.raises(ValueError):
        quality_rank([])
    with pytest.raises(ValueError):
        quality_rank([1.0], measure="loss")


@given(st.lists(st.integers(-1000, 1000), min_size=1, max_size=30))
def test_quality_rank_is_bijection_and_monotone_invariant(scores):
    r = quality_rank(scores)
    assert sorted(r.ranks) == list(range(1, len(scores) + 1))
    # integer cubes are exact in float, so the transform stays strictly monotone
    s = np.asarray(scores, dtype=np.float64)
    t = quality_rank(s ** 3 + 7 * s)
    assert np.array_equal(r.ranks, t.ranks)


def test_learning_order_never_learned_ranks_lowest():
    records = ProfileRecords([0, 1, 2], 4)
    for t, row in enumerate([[False, True, False], [False, True, False], [True, True, False],
                             [True, True, False]]):
        records.log(t, row, np.zeros(3))
    r = quality_rank(learning_order_scores(records), records.ids, "learning_order")
    assert list(r.ranks) == [2, 3, 1]


def test_ensemble_examples():
    a = quality_rank([0.3, 0.1, 0.2], ids=[5, 6, 7])
    e = ensemble_rank([a])
    assert np.array_equal(e.ranks, a.ranks) and e.ensemble_size == 1
    b = QualityRanking([5, 6, 7], 4 - a.ranks)
    e = ensemble_rank([a, b])
    assert np.all(e.ranks == 2.0) and e.ensemble_size == 2


def test_ensemble_aligns_on_ids():
    a = QualityRanking([1, 2, 3], [1, 2, 3])
    b = QualityRanking([3, 1, 2], [1, 3, 2])
    e = ensemble_rank([a, b])
    assert list(e.ids) == [1, 2, 3]
    assert list(e.ranks) == [2.0, 2.0, 2.0]


def test_ensemble_errors():
    a = QualityRanking([1, 2, 3], [1, 2, 3])
    with pytest.raises(ValueError):
        ensemble_rank([])
    with pytest.raises(ValueError):
        ensemble_rank([a, QualityRanking([1, 2, 4], [1, 2, 3])])
    with pytest.raises(ValueError):
        ensemble_rank([a, QualityRanking([1, 2, 3], [1, 2, 3], measure="probability")])


def test_ranking_spearman():
    a = QualityRanking([1, 2, 3, 4, 5], [1, 2, 3, 4, 5])
    assert spearman(a, a) == 1.0
    assert spearman(a, QualityRanking([5, 4, 3, 2, 1], [1, 2, 3, 4, 5])) == -1.0
    b = QualityRanking([1, 2, 3, 4, 5], [1, 3, 2, 5, 4])
    assert spearman(a, b) == pytest.approx(0.8, abs=1e-15)
    with pytest.raises(ValueError):
        spearman(QualityRanking([1], [1]), QualityRanking([1], [1]))


def test_profile_and_ranking_files_round_trip(tmp_path, rng):
    n = 12
    ids = rng.permutation(100)[:n]
    labels = rng.integers(0, 3, n)
    stab = rng.random(n)
    fl = rng.integers(-1, 10, n)
    prob = rng.random(n)
    mp = rng.random(n) * 0.1
    ranking = quality_rank(stab, ids)
    write_profile(tmp_path / "p.csv", ids, labels, stab, fl, prob, mp, ranking)
    prof = read_profile(tmp_path / "p.csv")
    assert np.array_equal(prof["id"], ids) and np.array_equal(prof["stability"], stab)
    assert np.array_equal(prof["first_learned_epoch"], fl) and np.array_equal(prof["min_perturbation"], mp)
    assert np.array_equal(ranking_from_profile(prof).ranks, ranking.ranks)
    write_ranking(tmp_path / "r.csv", ranking)
    back = read_ranking(tmp_path / "r.csv")
    assert np.array_equal(back.ids, ranking.ids) and np.array_equal(back.ranks, ranking.ranks)


def test_profile_without_min_perturbation_uses_sentinel(tmp_path):
    write_profile(tmp_path / "p.csv", [0, 1], [0, 1], [0.5, 1.0], [1, 0], [0.4, 0.9])
    prof = read_profile(tmp_path / "p.csv")
    assert np.all(prof["min_perturbation"] == -1.0)
    with pytest.raises(ValueError):
        ranking_from_profile(prof, "min_perturbation")


def test_profile_reader_reports_line(tmp_path):
    p = tmp_path / "bad.csv"
    write_profile(p, [0, 1], [0, 1], [0.5, 1.0], [1, 0], [0.4, 0.9])
    p.write_text(p.read_text() + "3,0,x,1,0.5,-1,-1\n")
    with pytest.raises(ValueError, match=":4:"):
        read_profile(p)


def test_records_file_round_trip(tmp_path, rng):
    records = ProfileRecords([4, 8, 15], 5)
    for t in range(3):
        records.log(t, rng.random(3) > 0.5, rng.random(3))
    save_records(tmp_path / "r.json", records)
    back = load_records(tmp_path / "r.json")
    assert back.completed == 3 and back.epochs == 5
    assert np.array_equal(back.robust_correct, records.robust_correct)
    assert np.array_equal(back.clean_true_prob, records.clean_true_prob)
    (tmp_path / "bad.json").write_text('{"ids": [1]}')
    with pytest.raises(ValueError):
        load_records(tmp_path / "bad.json")


def test_ten_run_ensemble_tracks_an_eleventh_run_better_than_single_runs():
    data, _ = generate_synthetic(SyntheticSpec(classes=3, dim=4, n_per_class=40, spread=0.12,
                                               ambiguous_fraction=0.2, seed=3))
    train, test = stratified_split(data, 0.25, seed=0)
    cfg = TrainConfig(epochs=10, lr_decay_epochs=[7], batch_size=32, hidden=[16])
    obj = ObjectiveConfig("pgd_at", attack=AttackConfig(0.1, 0.04, 3))
    ev = AttackConfig(0.1, 0.04, 5)
    rankings = []
    for seed in range(11):
        run = train_run(train, test, cfg, obj, ev, seed=seed)
        rankings.append(quality_rank(stability_scores(run.records), run.records.ids))
    held_out = rankings[-1]
    single = np.mean([spearman(r, held_out) for r in rankings[:10]])
    ensemble = spearman(ensemble_rank(rankings[:10]), held_out)
    assert ensemble > single
