import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ConstRatio, tiny_model
from gtl.diffusion import NoiseSchedule, ancestral_sample, remain_masked_prob, sequence_rngs, time_grid, train_denoiser
from gtl.exact import ExactDenoiser, ExactRatio, empirical_distribution, factorized_chain_terminal, total_variation
from gtl.markov import MarkovSpec, estimate_transition, gen_sequences, transition_kl
from gtl.nets import ModelConfig
from gtl.planner import select_position
from gtl.sampling import (GuidanceConfig, SamplerModels, ancestral_guided_probs, guided_logits,
                          guided_token_posterior, mask_fraction_sigma, sample_guided, stabilized_renormalize)
from gtl.training import TrainConfig


class NetRatio:
    """Wrap a ratio net so it sees the noise level (the sampler passes sigma)."""

    def __init__(self, seed=1, vocab=3, length=4):
        self.net = tiny_model("ratio", vocab=vocab, length=length, time_conditioned=True, seed=seed)

    def log_ratio(self, z, sigma=None):
        with torch.no_grad():
            return 2.0 * self.net.log_ratio(z, sigma)


@pytest.fixture
def models():
    return SamplerModels(tiny_model("denoiser"), NetRatio(), tiny_model("planner", seed=2))


def _run(config, models, seed=0, count=64, **kw):
    trace, records = [], []
    out, stats = sample_guided(config, models, count=count, seed=seed, trace=trace, records=records, **kw)
    return out, stats, trace, records


# --- single-position posterior ---------------------------------------------------------------


def test_posterior_gamma_zero_and_constant_ratio_are_identity():
    base = torch.tensor([0.2, 0.5, 0.3], dtype=torch.float64)
    assert torch.equal(guided_token_posterior(base, torch.tensor([0.1, -2.0, 3.0]), 0.0), base)
    assert torch.equal(guided_token_posterior(base, torch.full((3,), 1.7), 3.0), base)


def test_posterior_hand_value():
    out = guided_token_posterior(torch.tensor([0.5, 0.5]), torch.log(torch.tensor([1.0, 3.0])), 1.0)
    assert torch.allclose(out, torch.tensor([0.25, 0.75], dtype=torch.float64), atol=1e-15)


def test_posterior_prunes_infinite_and_rejects_empty():
    out = guided_token_posterior(torch.tensor([0.2, 0.8]), torch.tensor([0.0, -torch.inf]), 1.0)
    assert torch.equal(out, torch.tensor([1.0, 0.0], dtype=torch.float64))
    with pytest.raises(ValueError):
        guided_token_posterior(torch.tensor([0.0, 1.0]), torch.tensor([0.0, -torch.inf]), 1.0)


# --- stabilizer --------------------------------------------------------------------------------


def test_stabilizer_hand_values():
    out = stabilized_renormalize(torch.tensor([0.1, 0.5, 0.9]), 0.4)
    assert torch.allclose(out, torch.tensor([0.1, 0.5, 0.4], dtype=torch.float64), atol=1e-15)
    same = torch.tensor([0.3, 0.3, 0.4], dtype=torch.float64)
    assert torch.allclose(stabilized_renormalize(same, 0.4), same, atol=1e-15)


def test_stabilizer_fallback_warns():
    with pytest.warns(RuntimeWarning):
        out = stabilized_renormalize(torch.tensor([0.0, 0.0, 1.0]), 0.25, fallback=torch.tensor([0.5, 0.5]))
    assert torch.allclose(out, torch.tensor([0.375, 0.375, 0.25], dtype=torch.float64))
    with pytest.raises(ValueError):
        stabilized_renormalize(torch.tensor([0.0, 0.0, 1.0]), 0.25)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(1e-6, 1.0), min_size=3, max_size=8), st.floats(0.0, 0.999))
def test_stabilizer_keeps_mask_probability(scores, p_mask):
    out = stabilized_renormalize(torch.tensor(scores, dtype=torch.float64), p_mask)
    assert out[-1].item() == p_mask
    assert abs(out.sum().item() - 1.0) < 1e-12


# --- config ------------------------------------------------------------------------------------


def test_guidance_config_validation():
    with pytest.raises(ValueError):
        GuidanceConfig(variant="beam")
    with pytest.raises(ValueError):
        GuidanceConfig(gamma=-1.0)
    with pytest.raises(ValueError):
        GuidanceConfig(n_ratio=6).candidates(5)
    cfg = GuidanceConfig(gamma=((1.0, 0.0), (0.0, 2.0)))
    assert cfg.gamma_at(0.5) == pytest.approx(1.0)
    assert cfg.active and not GuidanceConfig(gamma=0.0).active


def test_guided_sampling_needs_ratio(models):
    with pytest.raises(ValueError):
        sample_guided(GuidanceConfig(gamma=1.0), SamplerModels(models.denoiser), count=2)


# --- reductions --------------------------------------------------------------------------------


def test_gamma_zero_replays_unguided_sampler(models, schedule):
    steps = 8
    ref, _ = ancestral_sample(models.denoiser, schedule, steps, 4, sequence_rngs(3, 32))
    for variant in ("naive", "topn"):
        out, stats, _, _ = _run(GuidanceConfig(gamma=0.0, variant=variant, steps=steps), models, seed=3, count=32)
        assert torch.equal(out, ref)
        assert stats.ratio_calls == 0


def test_presampling_distribution_unchanged_by_constant_ratio(models):
    z = torch.tensor([[3, 3, 1, 3], [0, 3, 3, 2]])
    log_x = models.denoiser.log_probs(z, None)
    rows, pos = torch.nonzero(z == 3, as_tuple=True)
    base = torch.softmax(log_x[rows, pos], dim=-1)
    for ratio, gamma in ((ConstRatio(0.3), 2.5), (models.ratio, 0.0)):
        probs, _, _ = ancestral_guided_probs(z, log_x, rows, pos, ratio, gamma, 3, 1.0)
        assert torch.equal(probs, base)
    logits = guided_logits(log_x[rows, pos], torch.arange(3).expand(len(rows), -1), torch.zeros(len(rows), 3), 4.0)
    assert torch.equal(logits, log_x[rows, pos])


def test_constant_ratio_replays_gamma_zero(models):
    a, _, _, _ = _run(GuidanceConfig(gamma=0.0, steps=10), models, seed=5)
    b, stats, _, _ = _run(GuidanceConfig(gamma=3.0, steps=10), SamplerModels(models.denoiser, ConstRatio()), seed=5)
    assert torch.equal(a, b)
    assert stats.ratio_calls > 0


@pytest.mark.parametrize("stabilizer", [True, False])
def test_topn_full_support_replays_naive(models, stabilizer):
    kw = dict(gamma=1.5, steps=6, stabilizer=stabilizer)
    a, _, ta, _ = _run(GuidanceConfig(variant="naive", **kw), models, seed=11)
    b, _, tb, _ = _run(GuidanceConfig(variant="topn", n_ratio=3, **kw), models, seed=11)
    assert all(torch.equal(x, y) for x, y in zip(ta, tb))
    assert torch.equal(a, b)


def test_guidance_changes_samples(models):
    a, _, _, _ = _run(GuidanceConfig(gamma=0.0, steps=6), models, seed=2, count=256)
    b, _, _, _ = _run(GuidanceConfig(gamma=4.0, steps=6), models, seed=2, count=256)
    assert not torch.equal(a, b)


# --- call counters -----------------------------------------------------------------------------


def test_naive_counts_every_masked_position(models):
    _, stats, _, records = _run(GuidanceConfig(variant="naive", gamma=1.0, steps=5), models)
    for rec in records:
        assert torch.equal(rec.ratio_calls, rec.masked * 3)
    assert stats.ceiling_violations == 0


def test_stabilizer_off_adds_one_call_for_the_mask(models):
    _, stats, _, records = _run(GuidanceConfig(variant="naive", gamma=1.0, steps=5, stabilizer=False), models)
    for rec in records:
        assert torch.equal(rec.ratio_calls, rec.masked * 3 + (rec.masked > 0).to(torch.int64))
    assert stats.ceiling_violations == 0


def test_topn_respects_ceiling_and_cache_bound(models):
    cfg = GuidanceConfig(variant="topn", n_ratio=2, gamma=1.0, steps=40)
    _, stats, _, records = _run(cfg, models)
    for rec in records:
        assert (rec.ratio_calls <= rec.masked * 2).all()
    assert stats.ceiling_violations == 0
    assert stats.max_denoiser_calls_per_trajectory <= min(4, 40) + 1
    # the uncached sampler calls the denoiser at every step
    _, raw, _, _ = _run(cfg, models, use_cache=False)
    assert raw.max_denoiser_calls_per_trajectory == 40


def test_planner_takes_length_steps(models):
    out, stats, trace, records = _run(GuidanceConfig(variant="planner", n_ratio=2, gamma=1.0), models, count=16)
    assert len(trace) == 4
    for k, z in enumerate(trace, start=1):
        assert ((z == 3).sum(dim=-1) == 4 - k).all()
    assert stats.planner_calls == 16 * 4
    assert all((rec.ratio_calls == 2).all() for rec in records)
    assert stats.ceiling_violations == 0 and not (out == 3).any()


def test_planner_single_position():
    den = tiny_model("denoiser", length=1)
    plan = tiny_model("planner", length=1)
    out, stats = sample_guided(GuidanceConfig(variant="planner", gamma=0.0), SamplerModels(den, None, plan),
                               count=8, seed=0)
    assert out.shape == (8, 1) and stats.max_steps_per_trajectory == 1


def test_planner_single_candidate_is_greedy(models, schedule):
    cfg = GuidanceConfig(variant="planner", n_ratio=1, gamma=2.0)
    out, _ = sample_guided(cfg, models, count=4, seed=9)
    z = torch.full((1, 4), 3)
    for _ in range(4):
        k = (z == 3).sum(dim=-1)
        log_x = models.denoiser.log_probs(z, mask_fraction_sigma(k, 4, schedule))
        pos = select_position(models.planner.scores(z), z, 3)
        z[0, pos] = log_x[0, pos].argmax()
    assert (out == z).all()


# --- exactness by Monte Carlo ------------------------------------------------------------------


def test_guided_chain_matches_target_chain(toy_pair, schedule):
    p0, q0 = toy_pair
    models = SamplerModels(ExactDenoiser(p0, 3, 2), ExactRatio(p0, q0, 3, 2))
    out, _ = sample_guided(GuidanceConfig(gamma=1.0, steps=2), models, count=4_000_000, seed=0, length=2,
                           schedule=schedule, batch_size=500_000, block_stream=True)
    target = factorized_chain_terminal(q0, time_grid(schedule, 2), 3, 2)
    assert total_variation(empirical_distribution(out.numpy(), 3), target) < 1e-3


def test_gamma_zero_keeps_source_behaviour():
    spec = MarkovSpec()
    data = torch.from_numpy(gen_sequences(spec, "source", 2000, np.random.default_rng(0)))
    cfg = ModelConfig("denoiser", 5, 20, width=32, layers=1, heads=2, dropout=0.0)
    den, _ = train_denoiser(data, cfg, TrainConfig(steps=150, batch_size=128, peak_lr=1e-3))
    den.eval()
    out, _ = sample_guided(GuidanceConfig(gamma=0.0, steps=20), SamplerModels(den), count=512, seed=1,
                           schedule=NoiseSchedule())
    est = estimate_transition(out.numpy(), 5)
    assert transition_kl(spec.matrix("source"), est) < transition_kl(spec.matrix("target"), est)


def test_remain_masked_prob_used_by_stabilizer(models, schedule):
    (t, a_t, a_s) = time_grid(schedule, 4)[1]
    assert 0 < remain_masked_prob(a_s, a_t) < 1
