import json
import math

import numpy as np
import pytest

from ranksched.workload import (
    FEATURE_DIM,
    KEYWORDS,
    MAX_PROMPT_TOKENS,
    LengthDist,
    Request,
    Trace,
    featurize,
    fixed_burst,
    generate_burst,
    generate_poisson,
    load_trace,
    parse_generator_spec,
    resample_lengths,
    save_trace,
)


# ---------------------------------------------------------------------------
# Request / Trace basics
# ---------------------------------------------------------------------------


def test_request_validation():
    with pytest.raises(ValueError):
        Request(id=0, arrival_time=-1.0, prompt_tokens=3, true_output_tokens=5)
    with pytest.raises(ValueError):
        Request(id=0, arrival_time=0.0, prompt_tokens=3, true_output_tokens=0)
    with pytest.raises(ValueError):
        Request(id=0, arrival_time=0.0, prompt_tokens=0, true_output_tokens=5)


def test_fresh_copy_resets_runtime_state():
    r = Request(id=1, arrival_time=0.0, prompt_tokens=2, true_output_tokens=9,
                prompt="explain this")
    r.generated_tokens = 4
    r.score = 3.0
    r.priority = True
    r.starvation_count = 7
    c = r.fresh_copy()
    assert c.generated_tokens == 0
    assert c.score is None
    assert not c.priority
    assert c.starvation_count == 0
    assert c.true_output_tokens == 9
    assert c.features is r.features  # shared, not copied
    assert r.generated_tokens == 4  # original untouched


def test_trace_rejects_duplicates_and_disorder():
    a = Request(id=0, arrival_time=0.0, prompt_tokens=1, true_output_tokens=1)
    b = Request(id=0, arrival_time=1.0, prompt_tokens=1, true_output_tokens=1)
    with pytest.raises(ValueError):
        Trace([a, b])
    c = Request(id=1, arrival_time=2.0, prompt_tokens=1, true_output_tokens=1)
    d = Request(id=2, arrival_time=1.0, prompt_tokens=1, true_output_tokens=1)
    with pytest.raises(ValueError):
        Trace([c, d])


def test_fingerprint_tracks_content():
    t1 = fixed_burst([10, 2, 1])
    t2 = fixed_burst([10, 2, 1])
    t3 = fixed_burst([10, 2, 2])
    assert t1.fingerprint() == t2.fingerprint()
    assert t1.fingerprint() != t3.fingerprint()


# ---------------------------------------------------------------------------
# featurize
# ---------------------------------------------------------------------------


def test_featurize_empty_prompt_is_zero():
    assert featurize("").tolist() == [0.0] * FEATURE_DIM


def test_featurize_counts_and_keywords():
    v = featurize("explain explain")
    assert v[0] == 2.0  # tokens
    assert v[1] == len("explain explain")
    assert v[2] == 0.0  # no question mark
    kw_index = 3 + KEYWORDS.index("explain")
    assert v[kw_index] == 2.0
    assert featurize("why?")[2] == 1.0


def test_featurize_keyword_matching_ignores_case_and_punctuation():
    v = featurize("Write: a LIST, please")
    assert v[3 + KEYWORDS.index("write")] == 1.0
    assert v[3 + KEYWORDS.index("list")] == 1.0


def test_featurize_hash_buckets_sum_to_token_count():
    v = featurize("alpha beta gamma delta")
    assert v[3 + len(KEYWORDS):].sum() == 4.0


def test_featurize_truncates_long_prompts():
    long = " ".join(["word"] * (MAX_PROMPT_TOKENS + 500))
    v = featurize(long)
    assert v[0] == MAX_PROMPT_TOKENS


def test_featurize_deterministic():
    p = "summarize the code and list why it works?"
    assert np.array_equal(featurize(p), featurize(p))


# ---------------------------------------------------------------------------
# LengthDist
# ---------------------------------------------------------------------------


def test_uniform_bounds_inclusive():
    d = LengthDist("uniform", (3, 5))
    s = d.sample(np.random.default_rng(0), 5000)
    assert s.min() == 3 and s.max() == 5
    assert set(np.unique(s)) == {3, 4, 5}


def test_geometric_and_lognormal_clip():
    d = LengthDist("geometric", (0.001,), max_len=50)
    s = d.sample(np.random.default_rng(1), 2000)
    assert s.min() >= 1 and s.max() <= 50
    d = LengthDist("lognormal", (8.0, 1.0), max_len=100)
    s = d.sample(np.random.default_rng(2), 500)
    assert s.max() == 100  # mean e^8 >> cap, everything clips


def test_dist_validation():
    with pytest.raises(ValueError):
        LengthDist("uniform", (5, 3))
    with pytest.raises(ValueError):
        LengthDist("geometric", (0.0,))
    with pytest.raises(ValueError):
        LengthDist("lognormal", (1.0, -0.1))
    with pytest.raises(ValueError):
        LengthDist("zipf", (2.0,))


def test_dist_parse_round_trip():
    d = LengthDist.parse("lognormal(5.0,1.0)")
    assert d.kind == "lognormal" and d.params == (5.0, 1.0)
    d2 = LengthDist.parse(d.spec_string())
    assert d2 == d
    assert LengthDist.parse("uniform(1,9)").params == (1.0, 9.0)
    with pytest.raises(ValueError):
        LengthDist.parse("lognormal[5,1]")
    with pytest.raises(ValueError):
        LengthDist.parse("lognormal(a,b)")


def test_dist_presets_differ_by_about_100_mean_tokens():
    rng = np.random.default_rng(0)
    share = LengthDist.parse("sharegpt").sample(rng, 40000).mean()
    rng = np.random.default_rng(0)
    lmsys = LengthDist.parse("lmsys").sample(rng, 40000).mean()
    assert share > lmsys
    assert 60 < share - lmsys < 140


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def test_generators_deterministic():
    d = LengthDist.parse("lognormal(4.0,0.8)")
    a = generate_poisson(2.0, 100, d, seed=7)
    b = generate_poisson(2.0, 100, d, seed=7)
    c = generate_poisson(2.0, 100, d, seed=8)
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != c.fingerprint()


def test_poisson_mean_gap_matches_rate():
    d = LengthDist.parse("uniform(1,10)")
    t = generate_poisson(2.0, 10000, d, seed=3)
    arr = [r.arrival_time for r in t]
    gaps = np.diff([0.0] + arr)
    assert abs(gaps.mean() - 0.5) / 0.5 < 0.05


def test_poisson_gap_distribution_ks():
    # One-sample KS against Exponential(rate); conservative 1% threshold.
    rate, n = 2.0, 10000
    t = generate_poisson(rate, n, LengthDist.parse("uniform(1,4)"), seed=5)
    arr = np.array([r.arrival_time for r in t])
    gaps = np.diff(np.concatenate([[0.0], arr]))
    s = np.sort(gaps)
    cdf = 1.0 - np.exp(-rate * s)
    emp_hi = np.arange(1, n + 1) / n
    emp_lo = np.arange(0, n) / n
    d = max(np.abs(emp_hi - cdf).max(), np.abs(cdf - emp_lo).max())
    assert d < 1.628 / math.sqrt(n)


def test_lognormal_sample_ks_against_exact_discrete_cdf():
    # The generator rounds and clips, so compare against the exact CDF of
    # the discretized distribution, not the continuous one.
    from scipy.stats import norm

    mu, sigma, n = 4.0, 0.8, 10000
    d = LengthDist("lognormal", (mu, sigma), max_len=2048)
    s = np.sort(d.sample(np.random.default_rng(9), n))

    def cdf(k):  # P(clip(round(LN),1,max) <= k)
        if k < 1:
            return 0.0
        if k >= 2048:
            return 1.0
        return norm.cdf((math.log(k + 0.5) - mu) / sigma)

    values = np.unique(s)
    dmax = 0.0
    for v in values:
        f_hi = np.searchsorted(s, v, side="right") / n
        f_lo = np.searchsorted(s, v, side="left") / n
        dmax = max(dmax, abs(f_hi - cdf(v)), abs(f_lo - cdf(v - 1)))
    assert dmax < 1.628 / math.sqrt(n)


def test_burst_all_arrive_at_zero():
    t = generate_burst(50, LengthDist.parse("uniform(1,9)"), seed=1)
    assert all(r.arrival_time == 0.0 for r in t)
    assert len(t) == 50


def test_prompt_noise_zero_means_prompt_tracks_length():
    t = generate_burst(80, LengthDist.parse("uniform(1,300)"), seed=2,
                       prompt_noise=0.0)
    for r in t:
        assert r.prompt_tokens == r.true_output_tokens
        assert len(r.prompt.split()) == r.prompt_tokens


def test_prompt_noise_perturbs_prompts():
    t = generate_burst(80, LengthDist.parse("uniform(50,300)"), seed=2,
                       prompt_noise=0.5)
    diffs = [r.prompt_tokens != r.true_output_tokens for r in t]
    assert sum(diffs) > 40


def test_resample_lengths_keeps_identity():
    t = generate_burst(60, LengthDist.parse("uniform(20,200)"), seed=4)
    r = resample_lengths(t, seed=99, sigma=0.3)
    assert [x.id for x in r] == [x.id for x in t]
    assert [x.prompt for x in r] == [x.prompt for x in t]
    changed = sum(a.true_output_tokens != b.true_output_tokens
                  for a, b in zip(t, r))
    assert changed > 30
    # Same seed reproduces; different seed varies.
    r2 = resample_lengths(t, seed=99, sigma=0.3)
    assert r.fingerprint() == r2.fingerprint()
    assert r.fingerprint() != resample_lengths(t, seed=100, sigma=0.3).fingerprint()


# ---------------------------------------------------------------------------
# JSONL I/O
# ---------------------------------------------------------------------------


def test_load_trace_basic(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text(
        '{"prompt": "explain recursion", "output_tokens_length": 40}\n'
        '{"prompt": "hi", "output_tokens_length": 3}\n'
        '{"prompt": "write a poem", "output_tokens_length": 120}\n')
    t = load_trace(str(p))
    assert len(t) == 3
    assert [r.true_output_tokens for r in t] == [40, 3, 120]
    assert all(r.arrival_time == 0.0 for r in t)  # burst semantics
    assert [r.prompt_tokens for r in t] == [2, 1, 3]
    assert [r.id for r in t] == [0, 1, 2]


def test_load_trace_sorts_by_arrival(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text(
        '{"prompt": "b", "output_tokens_length": 2, "arrival_time": 5.0}\n'
        '{"prompt": "a", "output_tokens_length": 1, "arrival_time": 1.0}\n')
    t = load_trace(str(p))
    assert [r.prompt for r in t] == ["a", "b"]
    assert [r.arrival_time for r in t] == [1.0, 5.0]


def test_load_trace_error_reports_line_number(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"prompt": "ok", "output_tokens_length": 4}\nnot json\n')
    with pytest.raises(ValueError, match=":2:"):
        load_trace(str(p))
    p.write_text('{"prompt": "no length"}\n')
    with pytest.raises(ValueError, match="output_tokens_length"):
        load_trace(str(p))
    p.write_text('{"prompt": "x", "output_tokens_length": -2}\n')
    with pytest.raises(ValueError, match="positive"):
        load_trace(str(p))


def test_save_load_round_trip(tmp_path):
    t = generate_poisson(3.0, 40, LengthDist.parse("uniform(1,50)"), seed=6)
    p = tmp_path / "rt.jsonl"
    save_trace(t, str(p))
    t2 = load_trace(str(p))
    assert [r.prompt for r in t2] == [r.prompt for r in t]
    assert [r.true_output_tokens for r in t2] == [r.true_output_tokens for r in t]
    assert [r.arrival_time for r in t2] == [r.arrival_time for r in t]
    # Saved floats survive the JSON round trip exactly.
    with open(p) as fh:
        first = json.loads(fh.readline())
    assert first["arrival_time"] == t.requests[0].arrival_time


# ---------------------------------------------------------------------------
# Generator specs
# ---------------------------------------------------------------------------


def test_parse_generator_spec_poisson():
    t = parse_generator_spec("poisson:rate=2,n=30,dist=lognormal(5.0,1.0),seed=7")
    assert len(t) == 30
    assert t.metadata["rate"] == 2.0
    assert t.metadata["seed"] == 7
    same = parse_generator_spec("poisson:rate=2,n=30,dist=lognormal(5.0,1.0),seed=7")
    assert t.fingerprint() == same.fingerprint()


def test_parse_generator_spec_burst_with_preset():
    t = parse_generator_spec("burst:n=10,dist=sharegpt,seed=3")
    assert len(t) == 10
    assert all(r.arrival_time == 0.0 for r in t)


def test_parse_generator_spec_errors():
    with pytest.raises(ValueError):
        parse_generator_spec("poisson")  # no colon
    with pytest.raises(ValueError):
        parse_generator_spec("poisson:rate=2,n=5")  # no dist
    with pytest.raises(ValueError):
        parse_generator_spec("drip:n=5,dist=sharegpt")  # unknown kind
    with pytest.raises(ValueError):
        parse_generator_spec("burst:n=5,dist=sharegpt,oops")  # not key=value
