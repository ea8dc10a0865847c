import itertools
import math

import numpy as np
import pytest

from dp2unlearn import lm, metrics
from dp2unlearn.corpus import Split, with_forget_ratio
from dp2unlearn.errors import DataError


# --- ROUGE-L ----------------------------------------------------------------

def _brute_force_rouge(reference, hypothesis):
    """Exhaustive subsequence enumeration oracle."""
    best = 0
    hyp = list(hypothesis)
    for r in range(len(reference), 0, -1):
        for combo in itertools.combinations(reference, r):
            it = iter(hyp)
            if all(tok in it for tok in combo):
                best = r
                break
        if best:
            break
    return best / len(reference)


def test_rouge_examples():
    assert metrics.rouge_l_recall("a b c".split(), "a b c".split()) == 1.0
    assert metrics.rouge_l_recall("a b".split(), "x y z".split()) == 0.0
    assert metrics.rouge_l_recall("a b c d".split(), "a c".split()) == 0.5
    assert metrics.rouge_l_recall("a".split(), []) == 0.0
    with pytest.raises(DataError):
        metrics.rouge_l_recall([], "a".split())


def test_rouge_matches_brute_force():
    rng = np.random.default_rng(0)
    alphabet = ["a", "b", "c"]
    for _ in range(150):
        ref = [alphabet[i] for i in rng.integers(0, 3, size=rng.integers(1, 11))]
        hyp = [alphabet[i] for i in rng.integers(0, 3, size=rng.integers(1, 11))]
        assert metrics.rouge_l_recall(ref, hyp) == pytest.approx(
            _brute_force_rouge(ref, hyp))


# --- conditional probability ---------------------------------------------------

def test_cond_prob_uniform_and_length_invariance(small_corpus):
    vocab = small_corpus.vocab
    v = len(vocab)
    params = lm.zero_params(lm.ModelConfig(vocab_size=v))
    pair = small_corpus.pairs[0]
    short = metrics.cond_prob(params, pair.question, pair.answer[:1], vocab)
    longr = metrics.cond_prob(params, pair.question, pair.answer, vocab)
    assert short == pytest.approx(1 / v, abs=1e-12)
    assert longr == pytest.approx(1 / v, abs=1e-12)


def test_cond_prob_matches_tokenwise_recomputation(small_corpus):
    vocab = small_corpus.vocab
    params = lm.init_params(lm.ModelConfig(vocab_size=len(vocab), seed=3))
    pair = small_corpus.pairs[2]
    response = pair.answer[:4]
    got = metrics.cond_prob(params, pair.question, response, vocab)
    logp, n = lm.sequence_logprob(params, pair.question, response, vocab)
    assert got == pytest.approx(math.exp(logp / n), rel=1e-12)
    assert n == 4


def test_cond_prob_mc_identical_options(small_corpus):
    vocab = small_corpus.vocab
    params = lm.zero_params(lm.ModelConfig(vocab_size=len(vocab)))
    pair = small_corpus.pairs[0]
    options = [pair.answer] * 4
    assert metrics.cond_prob_mc(params, pair.question, options, 0, vocab) == \
        pytest.approx(0.25, abs=1e-12)


def test_cond_prob_mc_hand_ratio(monkeypatch, small_corpus):
    # normalized option probabilities (0.2, 0.1) -> 0.2 / 0.3 = 2/3
    probs = iter([0.2, 0.1])
    monkeypatch.setattr(metrics, "_norm_logprob",
                        lambda *a, **k: math.log(next(probs)))
    got = metrics.cond_prob_mc(None, ["q"], [["a"], ["b"]], 0, None)
    assert got == pytest.approx(2 / 3, rel=1e-12)


def test_cond_prob_mc_limit_and_validation(monkeypatch, small_corpus):
    probs = iter([1e-300, 0.5, 0.5])
    monkeypatch.setattr(metrics, "_norm_logprob",
                        lambda *a, **k: math.log(next(probs)))
    got = metrics.cond_prob_mc(None, ["q"], [["a"], ["b"], ["c"]], 0, None)
    assert got == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(DataError):
        metrics.cond_prob_mc(None, ["q"], [["a"]], 0, None)
    with pytest.raises(DataError):
        metrics.cond_prob_mc(None, ["q"], [["a"], ["b"]], 5, None)


# --- truth ratio -----------------------------------------------------------------

def test_truth_ratio_uniform_model_is_one(small_corpus):
    vocab = small_corpus.vocab
    params = lm.zero_params(lm.ModelConfig(vocab_size=len(vocab)))
    for pair in small_corpus.pairs[:5]:
        sample = metrics.truth_ratio(params, pair, vocab)
        assert sample.tr == pytest.approx(1.0, abs=1e-9)
        assert sample.pair_id == pair.id


def test_truth_ratio_limit_small(monkeypatch, small_corpus):
    pair = small_corpus.pairs[0]
    vals = {tuple(pair.paraphrased_answer): math.log(0.99)}
    for r in pair.perturbed_answers:
        vals[tuple(r)] = math.log(1e-6)
    monkeypatch.setattr(metrics, "_norm_logprob",
                        lambda params, q, r, vocab: vals[tuple(r)])
    sample = metrics.truth_ratio(None, pair, small_corpus.vocab)
    assert sample.tr == pytest.approx(1e-6 / 0.99, rel=1e-9)


def test_normalize_tr():
    assert metrics.normalize_tr_for_utility(0.0) == 1.0
    assert metrics.normalize_tr_for_utility(1.0) == 0.0
    assert metrics.normalize_tr_for_utility(2.5) == 0.0
    with pytest.raises(DataError):
        metrics.normalize_tr_for_utility(-0.1)


# --- model utility ---------------------------------------------------------------

def test_model_utility():
    assert metrics.model_utility([0.7] * 9) == pytest.approx(0.7, rel=1e-12)
    assert metrics.model_utility([0.5] * 8 + [0.0]) == 0.0
    hand = metrics.model_utility([0.5] * 8 + [0.1])
    assert hand == pytest.approx(9 / 26, abs=1e-9)
    with pytest.raises(DataError):
        metrics.model_utility([0.5] * 8 + [1.2])


def test_model_utility_dominated_by_small_values():
    # harmonic mean sits between min and max and is pulled toward the
    # smallest input: HM <= 9 * min
    rng = np.random.default_rng(1)
    for _ in range(50):
        vals = rng.uniform(0.05, 1.0, size=9)
        mu = metrics.model_utility(vals)
        assert vals.min() - 1e-12 <= mu <= vals.max() + 1e-12
        assert mu <= 9 * vals.min() + 1e-12


# --- KS test ----------------------------------------------------------------------

def _brute_force_ks_d(a, b):
    points = np.concatenate([a, b])
    best = 0.0
    for x in points:
        fa = np.mean(np.asarray(a) <= x)
        fb = np.mean(np.asarray(b) <= x)
        best = max(best, abs(fa - fb))
    return best


def test_ks_examples():
    d, p = metrics.ks_two_sample([1, 2, 3], [1, 2, 3])
    assert (d, p) == (0.0, 1.0)
    d, p = metrics.ks_two_sample([0.1, 0.2, 0.3], [5.0, 6.0, 7.0])
    assert d == 1.0 and p < 0.2
    d, _ = metrics.ks_two_sample([1, 2, 3, 4], [3, 4, 5, 6])
    assert d == pytest.approx(0.5)
    with pytest.raises(DataError):
        metrics.ks_two_sample([1.0], [1, 2, 3])


def test_ks_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(80):
        n, m = rng.integers(2, 50, size=2)
        a = rng.normal(size=n)
        b = rng.normal(loc=rng.uniform(-1, 1), size=m)
        d, _ = metrics.ks_two_sample(a, b)
        assert d == pytest.approx(_brute_force_ks_d(a, b), abs=1e-12)


def test_ks_matches_scipy_statistic_and_kolmogorov_sf():
    # D cross-checked against scipy's ks_2samp; the p-value against the raw
    # Kolmogorov survival function at lambda = D * sqrt(nm/(n+m)) (no
    # small-sample continuity correction, by construction)
    scipy_stats = pytest.importorskip("scipy.stats")
    scipy_special = pytest.importorskip("scipy.special")
    rng = np.random.default_rng(3)
    for _ in range(20):
        n, m = 40, 55
        a = rng.normal(size=n)
        b = rng.normal(loc=rng.uniform(0, 1.5), size=m)
        d, p = metrics.ks_two_sample(a, b)
        ref = scipy_stats.ks_2samp(a, b, method="asymp")
        assert d == pytest.approx(ref.statistic, abs=1e-12)
        lam = d * math.sqrt(n * m / (n + m))
        assert p == pytest.approx(float(scipy_special.kolmogorov(lam)), abs=1e-9)


# --- histogram statistics ------------------------------------------------------------

JSD_ORACLE = 0.2157615543388171  # 0.5*KL(P||M) + 0.5*KL(Q||M) for P=(.5,.5), Q=(1,0)


def test_jsd_worked_example_prebinned():
    #   M = (3/4, 1/4)
    #   KL(P||M) = .5 ln(.5/.75) + .5 ln(.5/.25); KL(Q||M) = ln(4/3)
    kl1 = 0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25)
    kl2 = math.log(1.0 / 0.75)
    assert 0.5 * kl1 + 0.5 * kl2 == pytest.approx(JSD_ORACLE, abs=1e-12)
    got = metrics.jsd_from_hists(np.array([0.5, 0.5]), np.array([1.0, 0.0]))
    assert got == pytest.approx(JSD_ORACLE, abs=1e-9)


def test_jsd_worked_example_through_samples():
    # samples whose 2-bin shared histograms are exactly (.5,.5) and (1,0)
    a, b = [0.2, 0.8], [0.1, 0.2]
    assert metrics.jsd(a, b, bins=2) == pytest.approx(JSD_ORACLE, abs=1e-9)


def test_jsd_properties():
    rng = np.random.default_rng(4)
    assert metrics.jsd([1, 2, 3], [1, 2, 3]) == 0.0
    assert metrics.jsd([0.1] * 5, [10.0] * 5, bins=4) == pytest.approx(math.log(2))
    for _ in range(30):
        a = rng.uniform(0, 3, size=rng.integers(2, 30))
        b = rng.uniform(0, 3, size=rng.integers(2, 30))
        j1, j2 = metrics.jsd(a, b), metrics.jsd(b, a)
        assert j1 == pytest.approx(j2, abs=1e-12)
        assert -1e-12 <= j1 <= math.log(2) + 1e-12


def test_wasserstein_examples_and_properties():
    assert metrics.wasserstein_1d([1, 2, 3], [1, 2, 3]) == 0.0
    a = np.array([0.3, 1.4, 2.0, 5.5])
    np.testing.assert_allclose(metrics.wasserstein_1d(a, a + 0.75), 0.75,
                               atol=1e-12)
    assert metrics.wasserstein_1d([0, 1], [0, 2]) == pytest.approx(0.5)
    rng = np.random.default_rng(5)
    for _ in range(40):
        x = rng.normal(size=rng.integers(2, 20))
        y = rng.normal(size=rng.integers(2, 20))
        z = rng.normal(size=rng.integers(2, 20))
        dxy = metrics.wasserstein_1d(x, y)
        dyz = metrics.wasserstein_1d(y, z)
        dxz = metrics.wasserstein_1d(x, z)
        assert dxz <= dxy + dyz + 1e-9


def test_wasserstein_matches_scipy():
    scipy_stats = pytest.importorskip("scipy.stats")
    rng = np.random.default_rng(6)
    for _ in range(25):
        a = rng.uniform(0, 4, size=rng.integers(2, 30))
        b = rng.uniform(0, 4, size=rng.integers(2, 30))
        assert metrics.wasserstein_1d(a, b) == pytest.approx(
            scipy_stats.wasserstein_distance(a, b), abs=1e-9)


def test_entropy_diff():
    assert metrics.entropy_diff([1, 2, 3], [1, 2, 3]) == 0.0
    # uniform over 4 bins vs concentrated in one -> ln 4
    a = [0.5, 1.5, 2.5, 3.5]
    b = [3.5, 3.5, 3.5, 3.5]
    assert metrics.entropy_diff(a, b, bins=4) == pytest.approx(math.log(4), abs=1e-9)
    # relabeling bins identically leaves entropies unchanged
    p = np.array([0.1, 0.4, 0.2, 0.3])
    perm = np.array([2, 0, 3, 1])
    assert metrics.entropy_from_hist(p) == pytest.approx(
        metrics.entropy_from_hist(p[perm]), abs=1e-12)


# --- evaluate -------------------------------------------------------------------------

def test_evaluate_self_reference(desk_corpus):
    corpus = with_forget_ratio(desk_corpus, 0.05)
    params = lm.init_params(lm.ModelConfig(vocab_size=len(corpus.vocab), seed=1))
    report = metrics.evaluate(params, corpus, params, max_len=8)
    assert report.forget_quality_p == 1.0
    assert report.ks_statistic == 0.0
    assert report.jsd == 0.0
    assert report.wasserstein == 0.0
    assert report.entropy_diff == 0.0
    assert 0.0 <= report.model_utility <= 1.0
    assert len(report.forget_truth_ratio_samples) == len(corpus.subset(Split.FORGET))


def test_report_json_round_trip(tmp_path, desk_corpus):
    corpus = with_forget_ratio(desk_corpus, 0.05)
    params = lm.init_params(lm.ModelConfig(vocab_size=len(corpus.vocab), seed=2))
    report = metrics.evaluate(params, corpus, params, max_len=8,
                              extra={"method": "unit"})
    path = tmp_path / "report.json"
    report.save(path)
    loaded = metrics.EvalReport.load(path)
    assert loaded.to_dict() == report.to_dict()
    assert loaded.forget_truth_ratio_samples == report.forget_truth_ratio_samples
    assert loaded.model_utility == report.model_utility
