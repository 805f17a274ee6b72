import math

import numpy as np
import pytest
from scipy import stats

import oracles
from wealthineq import samplers
from wealthineq.censoring import build_constraints, tighten
from wealthineq.domain import N_PATTERNS, RunConfig
from wealthineq.indices import WeightedSample, evaluate_index, parse_index
from wealthineq.synth import (
    Population, SynthConfig, bracket_of, draw_sample, generate_population,
    inclusion_probabilities, simulate, true_indices,
)

GINI = parse_index("gini")


def _one_component_cfg(sigma, N):
    """Pattern 1 only, no covariates, remainder negligible: totals are lognormal(0, sigma)."""
    probs = [1.0] + [0.0] * 7
    comps = [{"covariates": [], "slopes": []} for _ in range(5)]
    icpt = [[0.0, None, None, None, -40.0]] + [[1.0] * 5 for _ in range(7)]
    return SynthConfig(N=N, m=10, pattern_probs=probs, components=comps, intercepts=icpt,
                       sd=[sigma, 1, 1, 1, 1e-3], correlation=0.0, oversample=None)


def test_lognormal_population_gini():
    sigma = 1.2
    pop = generate_population(_one_component_cfg(sigma, 100_000), samplers.rng_stream(1, 10))
    g = true_indices(pop, [GINI])["Gini"]
    assert abs(g - (2 * stats.norm.cdf(sigma / math.sqrt(2)) - 1)) < 0.01


def test_vanishing_noise_gives_exp_of_linear_predictor():
    cfg = SynthConfig(N=2000, m=10, covariances={str(i): (1e-8 * np.eye(sum(_owned(i)))).tolist()
                                                 for i in range(1, 9)})
    pop = generate_population(cfg, samplers.rng_stream(2, 10))
    expected = np.zeros(pop.N)
    for k in range(pop.N):
        i = pop.pattern_ids[k]
        for l in range(5):
            if _owned(i)[l]:
                beta = np.concatenate(([cfg.intercepts[i - 1][l]], cfg.components[l]["slopes"]))
                expected[k] += math.exp(pop.design(cfg, k, l) @ beta)
    assert np.allclose(pop.totals, expected, rtol=1e-3)


def _owned(i):
    from wealthineq.domain import owned_of
    return owned_of(int(i))


def test_pattern_frequencies_within_multinomial_bands():
    cfg = SynthConfig(N=50_000, m=10)
    pop = generate_population(cfg, samplers.rng_stream(3, 10))
    counts = np.bincount(pop.pattern_ids, minlength=N_PATTERNS + 1)[1:]
    p = np.array(cfg.pattern_probs)
    sd = np.sqrt(cfg.N * p * (1 - p))
    assert np.all(np.abs(counts - cfg.N * p) < 3 * sd)


def test_uniform_scores_give_equal_weights():
    cfg = SynthConfig(N=1000, m=100, oversample=None)
    pop = generate_population(cfg, samplers.rng_stream(4, 10))
    units, pi = draw_sample(pop, cfg, samplers.rng_stream(4, 11))
    assert units.size == 100 and np.allclose(1 / pi, 10.0)


def test_doubling_a_score_halves_the_weight():
    scores = np.ones(100)
    scores[7] = 2.0
    pi = inclusion_probabilities(scores, 10)
    assert pi.sum() == pytest.approx(10)
    # weights are relative to the common normalization, so compare with an untouched unit
    assert 1 / pi[7] == pytest.approx(0.5 / pi[0], rel=1e-12)


def test_inclusion_probabilities_cap_at_one():
    pi = inclusion_probabilities(np.array([100.0, 1, 1, 1, 1, 1]), 3)
    assert pi[0] == 1.0 and pi.sum() == pytest.approx(3)


def test_horvitz_thompson_estimates_population_size():
    cfg = SynthConfig(N=4000, m=400)
    pop = generate_population(cfg, samplers.rng_stream(5, 10))
    totals = []
    for r in range(100):
        _, pi = draw_sample(pop, cfg, samplers.rng_stream(r, 11))
        totals.append(np.sum(1 / pi))
    totals = np.array(totals)
    se = totals.std(ddof=1) / math.sqrt(totals.size)
    assert abs(totals.mean() - cfg.N) <= 3 * se + 1e-6 * cfg.N


def test_selection_depends_on_covariates_only():
    cfg = SynthConfig(N=3000, m=300)
    pop = generate_population(cfg, samplers.rng_stream(6, 10))
    a, _ = draw_sample(pop, cfg, samplers.rng_stream(6, 11))
    pop.wealth[:] = 1.0  # wealth changes do not affect selection
    b, _ = draw_sample(pop, cfg, samplers.rng_stream(6, 11))
    assert np.array_equal(a, b)


def test_top_bracket_of_default_total_system():
    cfg = SynthConfig()
    assert bracket_of(500_000.0, cfg.total_brackets) == (450_000.0, math.inf)
    assert bracket_of(10_000.0, cfg.total_brackets) == (0.0, 15_000.0)


def test_top_bracket_is_capped_in_the_record():
    cfg = SynthConfig(N=3000, m=300)
    pop, cs = simulate(cfg, seed=7)
    top = [h for h, t in zip(cs.households, cs.truth) if t.sum() >= 450_000]
    assert top
    for h in top:
        assert h.total_bracket == (450_000.0, h.cap)


def test_exact_system_reveals_the_truth():
    cfg = SynthConfig(N=2000, m=200, brackets=[{"kind": "exact"}] * 5)
    _, cs = simulate(cfg, seed=8)
    for h, t in zip(cs.households, cs.truth):
        for l in h.pattern.components:
            assert h.component_brackets[l] == (t[l], t[l])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_truth_lies_in_every_tightened_region(seed):
    cfg = SynthConfig()
    _, cs = simulate(cfg, seed=seed)
    run_cfg = RunConfig(T=2, B=0)
    for h, t in zip(cs.households, cs.truth):
        c = tighten(build_constraints(h, run_cfg))
        boxes = [(c.lo[l], c.hi[l]) if c.owned[l] else None for l in range(5)]
        cons = [(lc.coefficients, lc.offset, lc.sense, lc.bound, lc.clamp) for lc in c.linear]
        assert oracles.region_contains(boxes, cons, t, tol=1e-6), h.id


def test_tax_flags_agree_with_truth_under_raw_constraints():
    cfg = SynthConfig()
    _, cs = simulate(cfg, seed=11)
    flagged = sum(h.pays_wealth_tax is True for h in cs.households)
    assert flagged > 0
    for h, t in zip(cs.households, cs.truth):
        c = build_constraints(h, RunConfig(T=2, B=0))
        for lc in c.linear:
            assert lc.slack(t) >= -1e-6, (h.id, lc.describe())


def test_true_indices_examples():
    def pop_of(values):
        v = np.zeros((len(values), 5))
        v[:, 0] = values
        return Population(np.ones(len(values), dtype=int), np.zeros((len(values), 0)), [], v)
    assert true_indices(pop_of([5.0, 5.0, 5.0]), [GINI])["Gini"] == 0.0
    assert true_indices(pop_of([1.0, 2.0, 3.0]), [GINI])["Gini"] == pytest.approx(2 / 9, abs=1e-12)


def test_weighted_sample_gini_tracks_population_gini():
    cfg = SynthConfig(N=5000, m=500)
    pop = generate_population(cfg, samplers.rng_stream(12, 10))
    truth = true_indices(pop, [GINI])["Gini"]
    est = []
    for r in range(100):
        units, pi = draw_sample(pop, cfg, samplers.rng_stream(r, 11))
        est.append(evaluate_index(GINI, WeightedSample(pop.totals[units], 1 / pi)))
    est = np.array(est)
    # the ratio-type estimator carries an O(1/m) bias; allow it on top of the Monte Carlo band
    assert abs(est.mean() - truth) < 3 * est.std(ddof=1) / 10 + 0.01


def test_simulation_is_reproducible():
    cfg = SynthConfig(N=1000, m=100)
    _, a = simulate(cfg, seed=3)
    _, b = simulate(cfg, seed=3)
    assert a.households == b.households and np.array_equal(a.truth, b.truth)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(pattern_probs=[0.5] * 8)
    with pytest.raises(ValueError):
        SynthConfig(N=10, m=20)
    with pytest.raises(ValueError):
        SynthConfig(total_brackets={"kind": "thresholds", "values": [10.0, 5.0]})
    with pytest.raises(ValueError):
        SynthConfig.from_dict({"bogus": 1})


def test_config_dict_round_trip():
    cfg = SynthConfig(N=1234, m=99, seed=4)
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg
