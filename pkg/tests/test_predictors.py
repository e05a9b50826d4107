import numpy as np
import pytest

from ranksched.predictors import (
    ClassifierScorer,
    CrossSeedOracleScorer,
    NoisyOracleScorer,
    OracleScorer,
    PerceptionOnlyScorer,
    RankingModelScorer,
    TrainConfig,
    _Adam,
    load_scorer,
    save_scorer,
    scorer_from_dict,
    train_classifier,
    train_ranking,
)
from ranksched.ranking import kendall_tau_b
from ranksched.workload import LengthDist, generate_burst


def _trace(n=400, seed=1, pnoise=0.0, dist="uniform(1,2000)"):
    return generate_burst(n, LengthDist.parse(dist), seed=seed,
                          prompt_noise=pnoise)


# ---------------------------------------------------------------------------
# Oracle-style scorers
# ---------------------------------------------------------------------------


def test_oracle_returns_true_lengths():
    t = _trace(20)
    scores = OracleScorer().score_batch(t.requests, seed=0)
    assert scores == [float(r.true_output_tokens) for r in t]


def test_noisy_oracle_sigma_zero_is_exact():
    t = _trace(10)
    s = NoisyOracleScorer(0.0).score_batch(t.requests, seed=5)
    assert s == [float(r.true_output_tokens) for r in t]


def test_noisy_oracle_noise_is_per_request_and_seed_stable():
    t = _trace(50)
    sc = NoisyOracleScorer(0.5)
    a = sc.score_batch(t.requests, seed=5)
    b = sc.score_batch(t.requests, seed=5)
    c = sc.score_batch(t.requests, seed=6)
    assert a == b
    assert a != c
    # Noise is multiplicative and nonzero.
    assert all(v > 0 for v in a)
    assert sum(abs(x - r.true_output_tokens) > 1e-9
               for x, r in zip(a, t.requests)) > 40
    # Stable under batch composition: scoring a sub-batch gives same values.
    sub = sc.score_batch(t.requests[10:20], seed=5)
    assert sub == a[10:20]


def test_noisy_oracle_rejects_negative_sigma():
    with pytest.raises(ValueError):
        NoisyOracleScorer(-0.1)


def test_cross_seed_oracle():
    t = _trace(30)
    other = _trace(30, seed=2)
    sc = CrossSeedOracleScorer.from_trace(other)
    scores = sc.score_batch(t.requests, seed=0)
    assert scores == [float(r.true_output_tokens) for r in other]
    with pytest.raises(KeyError):
        sc.score_batch([_trace(40).requests[35]], seed=0)


def test_perception_only_warmup_gate():
    t = _trace(6)
    sc = PerceptionOnlyScorer(warmup_tokens=15, sigma=0.0)
    assert sc.score_batch(t.requests, seed=0) == [None] * 6
    for r in t.requests[:3]:
        r.generated_tokens = 15
    got = sc.score_batch(t.requests, seed=0)
    assert got[:3] == [float(r.true_output_tokens) for r in t.requests[:3]]
    assert got[3:] == [None, None, None]


def test_perception_noise_independent_from_noisy_oracle():
    t = _trace(20)
    for r in t.requests:
        r.generated_tokens = 15
    po = PerceptionOnlyScorer(15, 0.4).score_batch(t.requests, seed=3)
    no = NoisyOracleScorer(0.4).score_batch(t.requests, seed=3)
    assert po != no  # distinct noise streams on the same seed


def test_perception_validation():
    with pytest.raises(ValueError):
        PerceptionOnlyScorer(warmup_tokens=0)
    with pytest.raises(ValueError):
        PerceptionOnlyScorer(sigma=-1.0)


def test_scorer_flags():
    assert OracleScorer().length_calibrated
    assert not OracleScorer().charges_predictor
    assert PerceptionOnlyScorer().warmup_tokens == 15
    assert not PerceptionOnlyScorer().charges_predictor


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_first_step_is_signed_learning_rate():
    p = np.array([0.0])
    opt = _Adam([p], lr=0.1)
    opt.step([p], [np.array([1.0])])
    assert p[0] == pytest.approx(-0.1, rel=1e-6)
    p2 = np.array([0.0])
    opt2 = _Adam([p2], lr=0.1)
    opt2.step([p2], [np.array([-3.0])])
    assert p2[0] == pytest.approx(0.1, rel=1e-6)


def test_adam_converges_on_quadratic():
    p = np.array([5.0])
    opt = _Adam([p], lr=0.3)
    for _ in range(200):
        opt.step([p], [2 * p])  # d/dp of p^2
    assert abs(p[0]) < 1e-2


# ---------------------------------------------------------------------------
# Training: ranking
# ---------------------------------------------------------------------------


def test_train_ranking_learns_learnable_workload():
    t = _trace(600, seed=7, pnoise=0.0)
    res = train_ranking(t, TrainConfig(seed=0))
    assert res.report["eval_tau"] > 0.9
    assert res.report["n_train"] + res.report["n_eval"] == 600
    # Held-out tau should also transfer to a fresh trace.
    fresh = _trace(200, seed=8, pnoise=0.0)
    scores = res.scorer.score_batch(fresh.requests, seed=0)
    tau = kendall_tau_b(scores, [r.true_output_tokens for r in fresh]).tau
    assert tau > 0.9


def test_train_ranking_score_orientation():
    # Scores must sort ascending = predicted shortest first, so they should
    # correlate positively with true lengths.
    t = _trace(500, seed=9)
    res = train_ranking(t, TrainConfig(seed=0))
    reqs = sorted(t.requests, key=lambda r: r.true_output_tokens)
    scores = res.scorer.score_batch([reqs[0], reqs[-1]], seed=0)
    assert scores[0] < scores[1]


def test_train_ranking_loss_decreases():
    t = _trace(600, seed=10, pnoise=0.2)
    res = train_ranking(t, TrainConfig(seed=0, checkpoint_every=10))
    cps = res.report["checkpoints"]
    assert len(cps) >= 5
    assert cps[-1]["train_loss"] < cps[0]["train_loss"]
    assert cps[-1]["eval_tau"] > cps[0]["eval_tau"]


def test_train_ranking_deterministic():
    t = _trace(300, seed=11)
    a = train_ranking(t, TrainConfig(seed=3))
    b = train_ranking(t, TrainConfig(seed=3))
    for pa, pb in zip(a.scorer.net.params, b.scorer.net.params):
        assert np.array_equal(pa, pb)
    assert a.report == b.report


def test_train_ranking_mlp_variant():
    t = _trace(600, seed=12, pnoise=0.0)
    res = train_ranking(t, TrainConfig(seed=0, hidden=32, epochs=3))
    assert res.scorer.net.hidden == 32
    assert res.report["eval_tau"] > 0.7


def test_train_ranking_with_explicit_eval_trace():
    train = _trace(400, seed=13)
    ev = _trace(150, seed=14)
    res = train_ranking(train, TrainConfig(seed=0), eval_trace=ev)
    assert res.report["n_train"] == 400
    assert res.report["n_eval"] == 150


def test_train_ranking_rejects_tiny_trace():
    with pytest.raises(ValueError):
        train_ranking(_trace(3), TrainConfig())


# ---------------------------------------------------------------------------
# Training: classifier
# ---------------------------------------------------------------------------


def test_train_classifier_defaults():
    # Interval classification needs more steps than the ranking default to
    # place its 10 decision boundaries; give it the budget.
    t = _trace(600, seed=15, pnoise=0.0)
    res = train_classifier(t, TrainConfig(seed=0, learning_rate=3e-2,
                                          epochs=20), n_buckets=10)
    assert res.report["n_buckets"] == 10
    assert res.report["accuracy"] > 0.5
    assert res.report["eval_tau"] > 0.5
    assert res.scorer.n_buckets == 10


def test_train_classifier_bucket_size_one_has_many_classes():
    t = _trace(400, seed=16, pnoise=0.0)
    res = train_classifier(t, TrainConfig(seed=0, epochs=1), n_buckets=None,
                           bucket_size=1)
    assert res.report["n_buckets"] > 500
    # Exact per-token classification is essentially hopeless.
    assert res.report["accuracy"] < 0.2


def test_classifier_score_is_bucket_midpoint():
    t = _trace(200, seed=17, pnoise=0.0)
    res = train_classifier(t, TrainConfig(seed=0), n_buckets=10)
    sc = res.scorer
    buckets = sc.predict_buckets(t.requests)
    scores = sc.score_batch(t.requests, seed=0)
    for b, s in zip(buckets, scores):
        assert s == b * sc.bucket_size + sc.bucket_size / 2.0


def test_train_classifier_validation():
    t = _trace(100)
    with pytest.raises(ValueError):
        train_classifier(t, TrainConfig(), n_buckets=None, bucket_size=None)
    with pytest.raises(ValueError):
        train_classifier(t, TrainConfig(), n_buckets=1)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("build", [
    lambda t: OracleScorer(),
    lambda t: NoisyOracleScorer(0.35),
    lambda t: PerceptionOnlyScorer(10, 0.2),
    lambda t: CrossSeedOracleScorer.from_trace(t),
    lambda t: train_ranking(t, TrainConfig(seed=0, epochs=1)).scorer,
    lambda t: train_classifier(t, TrainConfig(seed=0, epochs=1),
                               n_buckets=5).scorer,
])
def test_scorer_round_trip(tmp_path, build):
    t = _trace(60, seed=18)
    for r in t.requests:
        r.generated_tokens = 20  # make perception scorers produce values
    sc = build(t)
    path = str(tmp_path / "scorer.json")
    save_scorer(sc, path)
    back = load_scorer(path)
    assert type(back) is type(sc)
    assert back.score_batch(t.requests, seed=4) == sc.score_batch(t.requests,
                                                                  seed=4)


def test_load_scorer_rejects_bad_files(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{"format": "other", "version": 1, "kind": "oracle"}\n')
    with pytest.raises(ValueError, match="not a scorer"):
        load_scorer(str(p))
    p.write_text('{"format": "ranksched-scorer", "version": 99, "kind": "oracle"}\n')
    with pytest.raises(ValueError, match="version"):
        load_scorer(str(p))
    with pytest.raises(ValueError, match="unknown scorer"):
        scorer_from_dict({"kind": "psychic"})
