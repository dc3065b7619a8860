import math

import numpy as np
import pytest
import torch

from conftest import tiny_model
from gtl.diffusion import NoiseSchedule, corrupt
from gtl.exact import clean_states, marginal, marginal_ratio, noisy_states
from gtl.markov import MarkovSpec, gen_sequences
from gtl.nets import ModelConfig
from gtl.numerics import finite_difference_check
from gtl.ratio import (RatioTrainConfig, classifier_accuracy, classifier_loss, classifier_ratio, ratio_from_logit,
                       ratio_loss, ratio_loss_terms, train_classifier, train_ratio)
from gtl.training import TrainConfig


def test_classifier_ratio_values():
    assert classifier_ratio(0.5) == 1.0
    assert classifier_ratio(0.9) == pytest.approx(1 / 9)
    assert classifier_ratio(0.2) == pytest.approx(4.0)
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            classifier_ratio(bad)
    with pytest.raises(ValueError):
        classifier_ratio(torch.tensor([0.5, 1.0]))


def test_bayes_classifier_recovers_density_ratio():
    # balanced domains: the Bayes classifier is p / (p + q), so (1 - d) / d = q / p
    p = np.array([0.7, 0.3])
    q = np.array([0.2, 0.8])
    d = p / (p + q)
    assert np.allclose([classifier_ratio(v) for v in d], q / p, rtol=1e-14)


def test_ratio_from_logit_matches_sigmoid():
    logits = torch.linspace(-5, 5, 11, dtype=torch.float64)
    assert torch.allclose(ratio_from_logit(logits), classifier_ratio(torch.sigmoid(logits)), rtol=1e-12)


def test_ratio_config_validation():
    with pytest.raises(ValueError):
        RatioTrainConfig(lam=-1)
    with pytest.raises(ValueError):
        RatioTrainConfig(label_smoothing=1.0)


def test_classifier_loss_smoothing_hand_value():
    class Fixed(torch.nn.Module):
        def forward(self, x, sigma=None):
            return torch.zeros(x.shape[0], dtype=torch.float64)

    x = torch.zeros(2, 3, dtype=torch.int64)
    labels = torch.tensor([1.0, 0.0], dtype=torch.float64)
    # logit 0 gives log 2 for any target in [0, 1]
    assert classifier_loss(Fixed(), x, labels, label_smoothing=0.2).item() == pytest.approx(math.log(2), abs=1e-15)


class _RowValues:
    """Stub returning fixed per-row outputs whatever the (corrupted) input."""

    mask_id = 3
    time_conditioned = True

    def __init__(self, values):
        self.values = torch.tensor(values, dtype=torch.float64)

    def __call__(self, x, sigma=None):
        return self.values[: x.shape[0]]


def test_ratio_loss_hand_value(schedule):
    r_model = _RowValues([math.log(1.5), math.log(0.5)])
    d_clean = _RowValues([-math.log(2.0), math.log(4.0)])  # clean ratios exp(-logit) = 2, 0.25
    d_time = _RowValues([0.0, math.log(2.0)])  # noisy ratios 1, 0.5
    x = torch.tensor([[0, 1], [2, 2]])
    guidance, cycle = ratio_loss_terms(r_model, x, x, d_clean, d_time, schedule, torch.Generator().manual_seed(0))
    assert abs(guidance.item() - ((1.5 - 2.0) ** 2 + (0.5 - 0.25) ** 2) / 2) < 1e-12
    assert abs(cycle.item() - ((1.5 - 1.0) ** 2 + (0.5 - 0.5) ** 2) / 2) < 1e-12
    total = ratio_loss(r_model, x, x, d_clean, d_time, 0.1, schedule, torch.Generator().manual_seed(0))
    assert abs(total.item() - (0.15625 + 0.1 * 0.125)) < 1e-12


def test_ratio_loss_zero_when_everything_is_one(schedule):
    one = _RowValues([0.0, 0.0])
    x = torch.tensor([[0, 1], [2, 2]])
    assert ratio_loss(one, x, x, one, one, 0.3, schedule).item() == 0.0


def test_ratio_loss_decomposes_in_lambda(schedule):
    r = tiny_model("ratio", time_conditioned=True)
    dc = tiny_model("classifier", seed=1)
    dt = tiny_model("classifier", time_conditioned=True, seed=2)
    src, tgt = torch.randint(0, 3, (6, 4), generator=torch.Generator().manual_seed(0)), torch.zeros(5, 4).long()
    g, c = ratio_loss_terms(r, src, tgt, dc, dt, schedule, torch.Generator().manual_seed(4))
    for lam in (0.0, 0.1, 2.5):
        got = ratio_loss(r, src, tgt, dc, dt, lam, schedule, torch.Generator().manual_seed(4))
        assert got.item() == (g + lam * c).item()
    with pytest.raises(ValueError):
        ratio_loss(r, src, tgt, dc, dt, -1.0, schedule)


def test_ratio_loss_gradient_matches_finite_differences(schedule):
    r = tiny_model("ratio", time_conditioned=True, width=4)
    dc = tiny_model("classifier", seed=1)
    dt = tiny_model("classifier", time_conditioned=True, seed=2)
    src = torch.randint(0, 3, (3, 4), generator=torch.Generator().manual_seed(0))
    tgt = torch.randint(0, 3, (2, 4), generator=torch.Generator().manual_seed(1))

    def fn():
        return ratio_loss(r, src, tgt, dc, dt, 0.1, schedule, torch.Generator().manual_seed(3))

    assert finite_difference_check(fn, list(r.parameters())) < 1e-4


def test_classifier_loss_gradient_matches_finite_differences(schedule):
    d = tiny_model("classifier", time_conditioned=True, width=4)
    x = torch.randint(0, 4, (4, 4), generator=torch.Generator().manual_seed(0))
    labels = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=torch.float64)
    sigma = torch.tensor([0.1, 0.5, 1.0, 3.0], dtype=torch.float64)
    assert finite_difference_check(lambda: classifier_loss(d, x, labels, sigma, 0.1), list(d.parameters())) < 1e-4


def test_training_rejects_empty_or_mismatched_domains():
    cfg = ModelConfig("classifier", 3, 4, width=8, layers=1, heads=2)
    with pytest.raises(ValueError):
        train_classifier(torch.zeros(0, 4).long(), torch.zeros(3, 4).long(), cfg, TrainConfig(steps=1))
    with pytest.raises(ValueError):
        train_classifier(torch.zeros(3, 4).long(), torch.zeros(3, 5).long(), cfg, TrainConfig(steps=1))


# --- training on the Markov domains -----------------------------------------------------------


def _markov(domain, n, seed):
    return torch.from_numpy(gen_sequences(MarkovSpec(), domain, n, np.random.default_rng(seed)))


def _aux(kind, time_conditioned=False):
    return ModelConfig(kind, 5, 20, width=32, layers=1, heads=2, dropout=0.0, time_conditioned=time_conditioned)


def _repeat_count(seqs):
    return (seqs[:, 1:] == seqs[:, :-1]).sum(dim=-1)


def test_repeat_count_oracle_separates_domains():
    # source repeats a token w.p. 0.1 per transition, target w.p. 0.8: 19 transitions give
    # mean repeat counts 1.9 and 15.2, so a threshold halfway is almost always right
    src, tgt = _repeat_count(_markov("source", 4000, 1)), _repeat_count(_markov("target", 4000, 2))
    acc = 0.5 * ((src < 8.5).double().mean() + (tgt > 8.5).double().mean())
    assert acc > 0.99


@pytest.mark.slow
def test_classifier_separates_markov_domains():
    clf, _ = train_classifier(_markov("source", 5000, 0), _markov("target", 5000, 1), _aux("classifier"),
                              TrainConfig(steps=800, batch_size=128, peak_lr=3e-3))
    assert classifier_accuracy(clf, _markov("source", 2000, 5), _markov("target", 2000, 6)) > 0.95


@pytest.fixture(scope="module")
def equal_domain_models():
    schedule = NoiseSchedule()
    a, b = _markov("source", 5000, 10), _markov("source", 5000, 11)
    cfg = TrainConfig(steps=200, batch_size=128, peak_lr=1e-3)
    d_clean, _ = train_classifier(a, b, _aux("classifier"), cfg)
    d_time, _ = train_classifier(a, b, _aux("classifier", True), cfg, time_dependent=True, schedule=schedule)
    ratio, _ = train_ratio(a, b, d_clean, d_time, _aux("ratio", True), TrainConfig(steps=300, batch_size=128,
                                                                                     peak_lr=1e-3))
    return d_clean, d_time, ratio


@pytest.mark.slow
def test_identical_domains_are_indistinguishable(equal_domain_models):
    d_clean, _, _ = equal_domain_models
    acc = classifier_accuracy(d_clean, _markov("source", 5000, 20), _markov("source", 5000, 21))
    assert abs(acc - 0.5) < 0.05


@pytest.mark.slow
def test_time_classifier_is_blind_when_fully_masked(equal_domain_models):
    _, d_time, _ = equal_domain_models
    acc = classifier_accuracy(d_time, _markov("source", 1000, 22), _markov("target", 1000, 23), t=1.0)
    assert acc == pytest.approx(0.5, abs=0.05)


@pytest.mark.slow
def test_equal_domain_ratio_is_one(equal_domain_models):
    _, _, ratio = equal_domain_models
    schedule = NoiseSchedule()
    held = _markov("source", 4000, 30)
    gen = torch.Generator().manual_seed(3)
    t = torch.rand(held.shape[0], generator=gen, dtype=torch.float64)
    with torch.no_grad():
        log_r = ratio.log_ratio(corrupt(held, t, schedule, 5, gen), schedule.sigma_t(t))
    assert log_r.abs().max().item() < 0.2


@pytest.mark.slow
def test_learned_ratio_matches_exact_ratio_on_enumerable_domain(toy_pair, schedule):
    p0, q0 = toy_pair
    xs = clean_states(3, 2)
    rng = np.random.default_rng(1)
    src = torch.from_numpy(xs[rng.choice(9, 200_000, p=p0)])
    tgt = torch.from_numpy(xs[rng.choice(9, 200_000, p=q0)])

    def cfg(kind, tc):
        return ModelConfig(kind, 3, 2, width=32, layers=1, heads=2, dropout=0.0, time_conditioned=tc)

    d_clean, _ = train_classifier(src, tgt, cfg("classifier", False), TrainConfig(steps=1500, peak_lr=3e-3),
                                  label_smoothing=0.0)
    d_time, _ = train_classifier(src, tgt, cfg("classifier", True), TrainConfig(steps=1500, peak_lr=3e-3, seed=1),
                                 time_dependent=True, schedule=schedule, label_smoothing=0.0)
    ratio, _ = train_ratio(src, tgt, d_clean, d_time, cfg("ratio", True), TrainConfig(steps=1500, peak_lr=3e-3),
                           schedule=schedule)
    states = noisy_states(3, 2)
    z = torch.from_numpy(states)
    for t in (0.1, 0.5, 0.9):
        alpha = schedule.alpha(t)
        with torch.no_grad():
            est = torch.exp(ratio.log_ratio(z, torch.full((len(states),), schedule.sigma(t), dtype=torch.float64)))
        exact = np.array([marginal_ratio(s, p0, q0, alpha, 3) for s in states])
        mass = np.array([marginal(p0, s, alpha, 3) for s in states])
        rel = np.abs(est.numpy() / exact - 1)[mass > 1e-3]
        assert rel.max() < 0.1, (t, rel)
