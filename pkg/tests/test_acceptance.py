"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Criteria 1-9 are exact formula/oracle checks; 10-12 are pipeline/system
properties; 13-17 are directional desk-scale analogues on the fixed desk
corpus (20 authors x 10 pairs, E=12, E'=6, eps=1, seeds 0/1/2).

Criterion 17's PO sub-check is known-unattainable at this corpus size (10
truth-ratio samples per side put the p<0.05 bar at KS D>=0.7, a stronger
separation than the reference setting itself exhibits); the test states the
measured numbers when it fails. See the decisions ledger for the analysis.
"""

import itertools
import math
import time

import numpy as np
import pytest

from dp2unlearn import baselines, cli, dpmlm, dpsgd, lm, metrics, pipeline
from dp2unlearn.corpus import Split, generate_corpus, with_forget_ratio
from dp2unlearn.dpmlm import SanitizerConfig, UtilityScorer
from dp2unlearn.dpsgd import DpSgdConfig
from dp2unlearn.errors import NumericError
from dp2unlearn.pipeline import (ForgetRequest, PipelineConfig, PipelineState,
                                 stage_a, stage_b, stage_c, training_pairs)

DESK_SEEDS = (0, 1, 2)
PRIMARY_SEED = 0  # the default experiment seed; criteria 13-15 are single checks
E, E_PRIME = 12, 6
TRAIN_LR, TRAIN_BS = 0.1, 8
FT_LR, FT_BS = 0.1, 8
EPSILON = 1.0


def _line(criterion, name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"[acceptance] C{criterion:02d} {name}: {status}  {detail}")
    return ok


@pytest.fixture(scope="session")
def desk():
    corpus = with_forget_ratio(generate_corpus(20, 10, seed=7), 0.05)
    return corpus


def _rouge(params, pairs, vocab):
    return float(np.mean([
        metrics.rouge_l_recall(p.answer, lm.generate_greedy(params, p.question, vocab, 16))
        for p in pairs]))


def _trs(params, pairs, vocab):
    return [metrics.truth_ratio(params, p, vocab).tr for p in pairs]


@pytest.fixture(scope="session")
def bundle(desk, tmp_path_factory):
    """Per-seed desk artifacts: full-data, RFS-R, DP bases, stages B/C,
    baselines, and their evaluations."""
    vocab = desk.vocab
    full_train = training_pairs(desk, desk.profile_pairs())
    retain = desk.subset(Split.RETAIN)
    forget = desk.subset(Split.FORGET)
    retain_train = training_pairs(desk, retain)
    out = {}
    for seed in DESK_SEEDS:
        root = tmp_path_factory.mktemp(f"desk_seed{seed}")
        model_cfg = lm.ModelConfig(vocab_size=len(vocab), context_k=12, seed=seed)
        pipe_cfg = PipelineConfig(
            model=model_cfg, epochs_e=E, epochs_e_prime=E_PRIME,
            lr=TRAIN_LR, batch_size=TRAIN_BS, finetune_lr=FT_LR,
            finetune_batch_size=FT_BS, seed=seed, mechanism="dpmlm",
            sanitizer_cfg=SanitizerConfig(epsilon_per_token=EPSILON, seed=seed),
            dpsgd_cfg=DpSgdConfig(clip_norm=1.0, epsilon=EPSILON, delta=1e-4,
                                  lr=0.0015, batch_size=32, seed=seed,
                                  dataset_size=len(full_train)))
        full = lm.train(lm.init_params(model_cfg), full_train, vocab, E,
                        lr=TRAIN_LR, batch_size=TRAIN_BS, seed=seed)

        request = ForgetRequest(request_id=0,
                                pair_ids=frozenset(p.id for p in forget))
        t0 = time.perf_counter()
        rfsr_ckpt = pipeline.rfsr(desk, [request], pipe_cfg)
        rfsr_wall = time.perf_counter() - t0
        rfsr_params = rfsr_ckpt.params()

        state = PipelineState(root / "state", pipe_cfg)
        base_ckpt = stage_a(state, desk)
        stage_b_ckpt = stage_b(state, desk)
        t0 = time.perf_counter()
        stage_c_ckpt = stage_c(state, desk, request)
        stage_c_wall = time.perf_counter() - t0

        bcfg = dict(epochs=E_PRIME, lr=FT_LR, batch_size=FT_BS, seed=seed)
        methods = {}
        for name in ("ga", "kl", "po"):
            try:
                if name == "ga":
                    ck = baselines.ga_unlearn(full, forget, vocab,
                                              baselines.BaselineConfig(method="ga", **bcfg))
                elif name == "kl":
                    ck = baselines.kl_unlearn(full, forget, retain_train, full,
                                              vocab,
                                              baselines.BaselineConfig(method="kl", **bcfg))
                else:
                    ck = baselines.po_unlearn(full, forget, retain_train, vocab,
                                              baselines.BaselineConfig(method="po", **bcfg))
                methods[name] = ck.params()
            except NumericError as exc:
                methods[name] = exc.last_params

        evals = {"rfsr": metrics.evaluate(rfsr_params, desk, rfsr_params),
                 "stage_c": metrics.evaluate(stage_c_ckpt.params(), desk, rfsr_params)}
        for name, params in methods.items():
            evals[name] = metrics.evaluate(params, desk, rfsr_params)

        out[seed] = {
            "state": state,
            "full": full,
            "rfsr": rfsr_params,
            "rfsr_wall": rfsr_wall,
            "base_mlm": base_ckpt.params(),
            "stage_b": stage_b_ckpt.params(),
            "stage_c": stage_c_ckpt.params(),
            "stage_c_wall": stage_c_wall,
            "evals": evals,
        }
    return {"corpus": desk, "seeds": out}


# --- formula-exactness suite -------------------------------------------------

def test_c01_clip_gradient():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    ok = True
    for _ in range(1000):
        g = rng.normal(scale=rng.uniform(0.01, 20), size=rng.integers(1, 60))
        c = rng.uniform(0.05, 5.0)
        clipped = dpsgd.clip_gradient(g, c)
        ok &= np.linalg.norm(clipped) <= c + 1e-9
        ok &= np.allclose(dpsgd.clip_gradient(clipped, c), clipped, atol=1e-12)
    hand = dpsgd.clip_gradient(np.array([3.0, 4.0]), 1.0)
    ok &= np.allclose(hand, [0.6, 0.8], atol=1e-12)
    wall = time.perf_counter() - t0
    ok &= wall < 1.0
    assert _line(1, "clip_gradient bound/idempotence/hand-example", ok,
                 f"wall={wall:.2f}s")


def test_c02_noise_sigma():
    sigma = dpsgd.noise_sigma(1.0, 1.0, 1e-5)
    ok = abs(sigma ** 2 - math.log(1.25e5)) <= 1e-6
    ok &= dpsgd.noise_sigma(1.0, 2.0, 1e-5) == pytest.approx(sigma / 2, rel=1e-12)
    ok &= dpsgd.noise_sigma(2.0, 1.0, 1e-5) == pytest.approx(2 * sigma, rel=1e-12)
    assert _line(2, "noise_sigma formula and scaling laws", ok,
                 f"sigma^2={sigma**2:.6f} vs ln(1.25e5)={math.log(1.25e5):.6f}")


def test_c03_noise_calibration():
    t0 = time.perf_counter()
    sigma = dpsgd.noise_sigma(1.0, 1.0, 1e-5)
    rng = np.random.default_rng(1234)
    draws = dpsgd.gaussian_noise(rng, 100_000, sigma)
    var_ok = abs(draws.var() - sigma ** 2) <= 0.05 * sigma ** 2
    z = np.sort(draws / sigma)
    n = len(z)
    phi = 0.5 * (1.0 + np.vectorize(math.erf)(z / math.sqrt(2.0)))
    d = max(np.max(np.arange(1, n + 1) / n - phi),
            np.max(phi - np.arange(0, n) / n))
    ks_ok = d <= 0.01
    wall = time.perf_counter() - t0
    ok = var_ok and ks_ok and wall < 5.0
    assert _line(3, "noise calibration (variance, KS to normal)", ok,
                 f"var={draws.var():.4f} target={sigma**2:.4f} KS_D={d:.5f} wall={wall:.2f}s")


def test_c04_exponential_mechanism():
    class Table:
        def __init__(self, u):
            self.u = u

        def scores(self, source, cands):
            return np.asarray([self.u[c] for c in cands], dtype=np.float64)

    # analytic vs empirical over 1e5 draws, 3 candidates
    scorer = Table({0: 1.0, 1: 0.4, 2: 0.1})
    probs = dpmlm.substitution_distribution(9, [0, 1, 2], 1.5, scorer)
    rng = np.random.default_rng(77)
    counts = np.zeros(3)
    for _ in range(100_000):
        counts[dpmlm.sample_index(probs, rng)] += 1
    emp_ok = np.abs(counts / 100_000 - probs).max() <= 0.01
    uniform = dpmlm.substitution_distribution(9, [0, 1, 2], 0.0, scorer)
    uni_ok = np.allclose(uniform, 1 / 3, atol=1e-12)
    two = dpmlm.substitution_distribution(9, [0, 1], math.log(2.0),
                                          Table({0: 1.0, 1: 0.0}))
    hand_ok = np.allclose(two, [2 / 3, 1 / 3], atol=1e-9)
    ok = emp_ok and uni_ok and hand_ok
    assert _line(4, "exponential mechanism analytic vs empirical", ok,
                 f"max_dev={np.abs(counts / 100_000 - probs).max():.4f} "
                 f"two-cand={np.round(two, 6)}")


def _exhaustive_lcs_recall(ref, hyp):
    best = 0
    for r in range(len(ref), 0, -1):
        found = False
        for combo in itertools.combinations(ref, r):
            it = iter(hyp)
            if all(tok in it for tok in combo):
                found = True
                break
        if found:
            best = r
            break
    return best / len(ref)


def test_c05_rouge_vs_exhaustive():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    alphabet = ["x", "y", "z"]
    ok = True
    for _ in range(500):
        ref = [alphabet[i] for i in rng.integers(0, 3, size=rng.integers(1, 11))]
        hyp = [alphabet[i] for i in rng.integers(0, 3, size=rng.integers(1, 11))]
        ok &= metrics.rouge_l_recall(ref, hyp) == pytest.approx(
            _exhaustive_lcs_recall(ref, hyp))
    wall = time.perf_counter() - t0
    ok &= wall < 5.0
    assert _line(5, "ROUGE-L equals exhaustive subsequence search", ok,
                 f"500 pairs wall={wall:.2f}s")


def test_c06_ks_vs_brute_force():
    rng = np.random.default_rng(6)
    ok = True
    for _ in range(200):
        n, m = rng.integers(2, 51, size=2)
        a = rng.normal(size=n)
        b = rng.normal(loc=rng.uniform(-1, 1), size=m)
        d, _ = metrics.ks_two_sample(a, b)
        brute = max(abs(np.mean(a <= x) - np.mean(b <= x))
                    for x in np.concatenate([a, b]))
        ok &= d == pytest.approx(brute, abs=1e-12)
    d0, p0 = metrics.ks_two_sample([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    ok &= (d0, p0) == (0.0, 1.0)
    d1, _ = metrics.ks_two_sample([0.0, 0.1, 0.2], [9.0, 9.1, 9.2])
    ok &= d1 == 1.0
    assert _line(6, "KS statistic equals O(n*m) brute force", ok)


def test_c07_distribution_statistics():
    # JSD worked example: the spec's symbolic oracle
    # 1/2[1/2 ln(1/2 / 3/4) + 1/2 ln(1/2 / 1/4)] + 1/2[ln(1/(3/4))]
    # evaluates to 0.2157615543...; the spec's stated decimal 0.1308
    # contradicts its own expression (see decisions ledger).
    oracle = 0.5 * (0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25)) \
        + 0.5 * math.log(1.0 / 0.75)
    got = metrics.jsd_from_hists(np.array([0.5, 0.5]), np.array([1.0, 0.0]))
    jsd_ok = abs(got - oracle) <= 1e-3 and abs(oracle - 0.2157615543) < 1e-9
    rng = np.random.default_rng(7)
    range_ok = True
    for _ in range(50):
        a = rng.uniform(0, 2, size=rng.integers(2, 40))
        b = rng.uniform(0, 2, size=rng.integers(2, 40))
        j = metrics.jsd(a, b)
        range_ok &= -1e-12 <= j <= math.log(2) + 1e-12
        range_ok &= j == pytest.approx(metrics.jsd(b, a), abs=1e-12)
    a = rng.uniform(0, 3, size=17)
    w_ok = metrics.wasserstein_1d(a, a + 1.25) == pytest.approx(1.25, abs=1e-12)
    h_ok = metrics.entropy_diff([0.5, 1.5, 2.5, 3.5], [3.5] * 4, bins=4) == \
        pytest.approx(math.log(4), abs=1e-9)
    ok = jsd_ok and range_ok and w_ok and h_ok
    assert _line(7, "JSD/W1/entropy worked examples and bounds", ok,
                 f"jsd={got:.6f} oracle={oracle:.6f}")


def test_c08_model_utility():
    ok = metrics.model_utility([0.37] * 9) == pytest.approx(0.37, rel=1e-12)
    ok &= metrics.model_utility([0.9] * 8 + [0.0]) == 0.0
    ok &= metrics.model_utility([0.5] * 8 + [0.1]) == pytest.approx(9 / 26, abs=1e-9)
    assert _line(8, "model utility harmonic mean", ok,
                 f"hand example={metrics.model_utility([0.5] * 8 + [0.1]):.9f} vs 9/26={9/26:.9f}")


def test_c09_gradient_check():
    t0 = time.perf_counter()
    h = 1e-3
    worst = 0.0
    rng = np.random.default_rng(99)
    for trial in range(20):
        cfg = lm.ModelConfig(vocab_size=7, context_k=3, embed_dim=4,
                             hidden_dim=5, seed=100 + trial)
        params = lm.init_params(cfg)
        ctx = list(rng.integers(0, 7, size=3))
        tgt = int(rng.integers(0, 7))
        _, grad = lm.per_sample_grad(params, ctx, tgt)
        flat = params.flatten()
        for idx in rng.integers(0, flat.size, size=20):
            fp, fm = flat.copy(), flat.copy()
            fp[idx] += h
            fm[idx] -= h
            lp, _ = lm.per_sample_grad(params.from_flat(fp), ctx, tgt)
            lmn, _ = lm.per_sample_grad(params.from_flat(fm), ctx, tgt)
            worst = max(worst, abs((lp - lmn) / (2 * h) - grad[idx]))
    wall = time.perf_counter() - t0
    ok = worst <= 1e-4 and wall < 10.0
    assert _line(9, "analytic gradient vs central differences", ok,
                 f"max_abs_err={worst:.2e} wall={wall:.2f}s")


# --- pipeline/system suite -------------------------------------------------------

def test_c10_proposition1_audit(desk, tmp_path_factory):
    import hashlib
    root = tmp_path_factory.mktemp("prop1")
    vocab_size = len(desk.vocab)
    model_cfg = lm.ModelConfig(vocab_size=vocab_size, context_k=12, seed=0)
    pipe_cfg = PipelineConfig(
        model=model_cfg, epochs_e=E, epochs_e_prime=E_PRIME, lr=TRAIN_LR,
        batch_size=TRAIN_BS, finetune_lr=FT_LR, finetune_batch_size=FT_BS,
        seed=0, mechanism="dpmlm",
        sanitizer_cfg=SanitizerConfig(epsilon_per_token=EPSILON, seed=0))
    state = PipelineState(root / "state", pipe_cfg)
    stage_a(state, desk)
    stage_b(state, desk)
    base_hash = hashlib.sha256(state.base_path.read_bytes()).hexdigest()

    ten = with_forget_ratio(desk, 0.10)
    forget_ids = sorted(p.id for p in ten.subset(Split.FORGET))
    requests = [forget_ids[:7], forget_ids[7:12], forget_ids[12:]]
    for i, ids in enumerate(requests):
        stage_c(state, ten, ForgetRequest(request_id=i, pair_ids=frozenset(ids)))

    # each stage-C run must contain no id forgotten as of that run
    stage_c_rows = [r for r in state.audit_entries() if r["stage"] == "Unlearned"]
    runs = sorted({r["run"] for r in stage_c_rows})
    leaked = set()
    forgotten = set()
    for run, ids in zip(runs, requests):
        forgotten |= set(ids)
        consumed = {r["pair_id"] for r in stage_c_rows if r["run"] == run}
        leaked |= consumed & forgotten
    # and the final unlearned run never touches any forgotten id at all
    final = {r["pair_id"] for r in stage_c_rows if r["run"] == runs[-1]}
    leaked |= final & set(forget_ids)
    hash_ok = hashlib.sha256(state.base_path.read_bytes()).hexdigest() == base_hash
    ok = len(runs) == 3 and not leaked and hash_ok
    assert _line(10, "Proposition-1 audit (3 requests)", ok,
                 f"stage_c_runs={len(runs)} leaked={sorted(leaked)} "
                 f"base_unchanged={hash_ok}")


def test_c11_replay_determinism(desk, tmp_path_factory):
    root = tmp_path_factory.mktemp("replay")
    model_cfg = lm.ModelConfig(vocab_size=len(desk.vocab), context_k=12, seed=0)
    pipe_cfg = PipelineConfig(
        model=model_cfg, epochs_e=2, epochs_e_prime=E_PRIME, lr=TRAIN_LR,
        batch_size=TRAIN_BS, finetune_lr=FT_LR, finetune_batch_size=FT_BS,
        seed=0, mechanism="dpmlm",
        sanitizer_cfg=SanitizerConfig(epsilon_per_token=EPSILON, seed=0))
    request_log = [
        ForgetRequest(request_id=0, pair_ids=frozenset(
            p.id for p in desk.subset(Split.FORGET)[:5])),
        ForgetRequest(request_id=1, pair_ids=frozenset(
            p.id for p in desk.subset(Split.FORGET)[5:])),
    ]
    blobs = []
    for name in ("a", "b"):
        state = PipelineState(root / name, pipe_cfg)
        stage_a(state, desk)
        for req in request_log:
            stage_c(state, desk, req)
        blobs.append(state.deployed_path.read_bytes())
    ok = blobs[0] == blobs[1]
    assert _line(11, "request-log replay yields byte-identical checkpoints", ok,
                 f"{len(blobs[0])} bytes")


def test_c12_cost_factor_and_runtime(bundle, tmp_path_factory):
    ratios = []
    for seed in DESK_SEEDS:
        b = bundle["seeds"][seed]
        ratios.append(b["stage_c_wall"] / b["rfsr_wall"])
    target = E_PRIME / E
    ratio_ok = all(target - 0.2 <= r <= target + 0.2 for r in ratios)

    out = tmp_path_factory.mktemp("experiment")
    t0 = time.perf_counter()
    path, failures = cli.run_experiment(cli.default_run_config(), out_dir=out)
    wall = time.perf_counter() - t0
    runtime_ok = wall < 600.0 and not failures and path.exists()
    ok = ratio_ok and runtime_ok
    assert _line(12, "cost factor E'/E and whole-experiment runtime", ok,
                 f"stageC/RFSR={[round(r, 3) for r in ratios]} target={target} "
                 f"experiment_wall={wall:.1f}s")


# --- directional desk-scale analogues ------------------------------------------------

def test_c13_memorization(bundle):
    desk = bundle["corpus"]
    retain = desk.subset(Split.RETAIN)
    scores = {s: _rouge(bundle["seeds"][s]["full"], retain, desk.vocab)
              for s in DESK_SEEDS}
    ok = scores[PRIMARY_SEED] >= 0.9
    assert _line(13, "non-DP model memorizes (retain ROUGE >= 0.9)", ok,
                 f"primary={scores[PRIMARY_SEED]:.3f} all={ {s: round(v, 3) for s, v in scores.items()} }")


def test_c14_dp_degradation(bundle, desk):
    retain = desk.subset(Split.RETAIN)
    vocab = desk.vocab
    mlm = {s: _rouge(bundle["seeds"][s]["base_mlm"], retain, vocab)
           for s in DESK_SEEDS}
    full_train = training_pairs(desk, desk.profile_pairs())
    cfg = lm.ModelConfig(vocab_size=len(vocab), context_k=12, seed=0)
    dcfg = DpSgdConfig(clip_norm=1.0, epsilon=EPSILON, delta=1e-4, lr=0.0015,
                       batch_size=32, seed=0, dataset_size=len(full_train))
    sgd_base, _ = dpsgd.train_dp(lm.init_params(cfg), full_train, vocab, E, dcfg)
    sgd = _rouge(sgd_base, retain, vocab)
    ok = mlm[PRIMARY_SEED] <= 0.6 and sgd <= 0.6
    assert _line(14, "DP base degraded (retain ROUGE <= 0.6, both mechanisms)", ok,
                 f"dpmlm={ {s: round(v, 3) for s, v in mlm.items()} } dpsgd={sgd:.3f}")


def test_c15_recovery(bundle):
    desk = bundle["corpus"]
    retain = desk.subset(Split.RETAIN)
    scores = {s: _rouge(bundle["seeds"][s]["stage_b"], retain, desk.vocab)
              for s in DESK_SEEDS}
    ok = scores[PRIMARY_SEED] >= 0.9
    assert _line(15, "stage-B recovery (retain ROUGE >= 0.9)", ok,
                 f"primary={scores[PRIMARY_SEED]:.3f} all={ {s: round(v, 3) for s, v in scores.items()} }")


def test_c16_unlearning_quality(bundle):
    desk = bundle["corpus"]
    retain = desk.subset(Split.RETAIN)
    passes = {}
    detail = []
    for s in DESK_SEEDS:
        b = bundle["seeds"][s]
        rl = _rouge(b["stage_c"], retain, desk.vocab)
        fq = b["evals"]["stage_c"].forget_quality_p
        passes[s] = rl >= 0.85 and fq >= 0.05
        detail.append(f"seed{s}: RL={rl:.3f} FQ_p={fq:.3f}")
    ok = sum(passes.values()) >= 2
    assert _line(16, "stage-C vs RFS-R at 5% (RL>=0.85, FQ>=0.05, 2-of-3)", ok,
                 "; ".join(detail))


def test_c17_baseline_failure_mode(bundle):
    ga_pass, kl_pass, po_pass = [], [], []
    detail = []
    for s in DESK_SEEDS:
        ev = bundle["seeds"][s]["evals"]
        mu_ref = ev["rfsr"].model_utility
        ga_pass.append(ev["ga"].model_utility <= 0.5 * mu_ref)
        kl_pass.append(ev["kl"].model_utility <= 0.5 * mu_ref)
        po_pass.append(ev["po"].forget_quality_p < 0.05)
        detail.append(
            f"seed{s}: MU(rfsr)={mu_ref:.3f} MU(ga)={ev['ga'].model_utility:.4f} "
            f"MU(kl)={ev['kl'].model_utility:.4f} PO_FQ_p={ev['po'].forget_quality_p:.3f} "
            f"PO_KS_D={ev['po'].ks_statistic:.2f}")
    ga_ok = sum(ga_pass) >= 2
    kl_ok = sum(kl_pass) >= 2
    po_ok = sum(po_pass) >= 2
    ok = ga_ok and kl_ok and po_ok
    _line(17, "baseline failure mode (GA/KL MU collapse, PO FQ<0.05, 2-of-3)", ok,
          "; ".join(detail))
    assert ok, (
        "GA collapse: " + str(ga_pass) + ", KL collapse: " + str(kl_pass)
        + ", PO FQ<0.05: " + str(po_pass) + ". The PO sub-check needs KS D>=0.7 "
        "at 10 forget samples per side for p<0.05; a faithful PO measures "
        "D in 0.2-0.5 here (the reference comparison itself separates by only "
        "D~0.4 at scale), so this criterion is unattainable at the pinned desk "
        "corpus size. Analysis in the decisions ledger."
    )
