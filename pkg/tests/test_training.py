import math

import numpy as np
import pytest
import torch

import dp_graphgen.training as training
from dp_graphgen import accountant
from dp_graphgen.graph import Graph
from dp_graphgen.model import ModelConfig, one_hot_sequences
from dp_graphgen.training import (
    STOP_BUDGET,
    STOP_PATIENCE,
    DPGANTrainer,
    DpConfig,
    EarlyStopping,
    GanConfig,
    PrivacyBudgetExhausted,
    clip_per_example,
    critic_loss,
    noisy_aggregate,
    per_example_gradients,
    train,
)


def small_model(g, **kw):
    return ModelConfig(num_nodes=g.num_nodes, hidden_dim=8, noise_dim=4, down_projection_dim=6, **kw)


def gan(**kw):
    base = dict(batch_size=8, n_critic=2, dtype="float64", checkpoint_sample_volume=2000)
    base.update(kw)
    return GanConfig(**base)


# clipping and aggregation

@pytest.mark.parametrize("g, c, expected", [
    ((3.0, 4.0), 1.0, (0.6, 0.8)),
    ((0.3, 0.4), 1.0, (0.3, 0.4)),
    ((3.0, 4.0), 0.5, (0.3, 0.4)),
])
def test_clip_examples(g, c, expected):
    out = clip_per_example(np.array(g), c)
    assert np.allclose(out, expected, rtol=0, atol=1e-15)


def test_clip_under_bound_is_identity():
    g = np.array([0.3, 0.4])
    assert np.array_equal(clip_per_example(g, 1.0), g)


def test_clip_rejects_bad_input():
    with pytest.raises(ValueError):
        clip_per_example(np.array([np.nan, 1.0]), 1.0)
    with pytest.raises(ValueError):
        clip_per_example(np.array([1.0, 1.0]), 0.0)


def test_clip_rows_property():
    rng = np.random.default_rng(0)
    g = rng.normal(size=(200, 7)) * rng.exponential(3, size=(200, 1))
    out = clip_per_example(g, 1.5)
    norms_in, norms_out = np.linalg.norm(g, axis=1), np.linalg.norm(out, axis=1)
    assert np.all(norms_out <= 1.5 * (1 + 1e-12))
    cos = (g * out).sum(1) / (norms_in * norms_out)
    assert np.allclose(cos, 1.0)


def test_aggregate_no_noise():
    assert np.allclose(noisy_aggregate([np.array([1.0, 0.0]), np.array([0.0, 1.0])], 0.0, 1.0), [0.5, 0.5])


def test_aggregate_noise_variance():
    z = np.zeros((1, 3))
    gen = torch.Generator().manual_seed(0)
    draws = np.stack([noisy_aggregate(z, 1.0, 1.0, seed=gen) for _ in range(10_000)])
    assert np.all(np.abs(draws.var(axis=0) - 1.0) <= 0.05)


def test_aggregate_deterministic_given_seed():
    g = [np.array([0.1, 0.2])]
    assert np.array_equal(noisy_aggregate(g, 1.0, 1.0, seed=5), noisy_aggregate(g, 1.0, 1.0, seed=5))


def test_aggregate_errors():
    with pytest.raises(ValueError):
        noisy_aggregate([], 1.0, 1.0)
    with pytest.raises(ValueError, match="exceeds clip bound"):
        noisy_aggregate([np.array([3.0, 4.0])], 1.0, 1.0)


# critic loss

class LinearCritic(torch.nn.Module):
    """Score = <w, x>; its input gradient is w everywhere."""

    def __init__(self, w):
        super().__init__()
        self.w = torch.nn.Parameter(torch.as_tensor(w, dtype=torch.float64))

    def forward(self, x):
        return (x.flatten(1) * self.w).sum(1)


def batches(n=5, num_nodes=6, seed=0):
    rng = np.random.default_rng(seed)
    real = one_hot_sequences(rng.integers(0, num_nodes, size=(n, 2)), num_nodes, torch.float64)
    fake = torch.tensor(rng.dirichlet(np.ones(num_nodes), size=(n, 2)))
    return real, fake


def test_critic_loss_without_penalty():
    torch.manual_seed(0)
    disc = training.Discriminator(ModelConfig(num_nodes=6, hidden_dim=5)).double()
    real, fake = batches()
    out = critic_loss(disc, real, fake, lambda_gp=0.0, seed=1)
    expected = disc(fake).mean() - disc(real).mean()
    assert torch.allclose(out.loss, expected, rtol=1e-12)


def test_penalty_zero_at_unit_gradient():
    w = np.random.default_rng(1).normal(size=12)
    disc = LinearCritic(w / np.linalg.norm(w))
    real, fake = batches()
    out = critic_loss(disc, real, fake, lambda_gp=10.0, seed=2)
    assert torch.all(out.penalty.abs() < 1e-24)


def test_penalty_gradient_finite_differences():
    torch.manual_seed(3)
    disc = training.Discriminator(ModelConfig(num_nodes=6, hidden_dim=5)).double()
    real, fake = batches(seed=3)
    rho = torch.rand(len(real), dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    out = critic_loss(disc, real, fake, 10.0, rho=rho)
    param = disc.cell.weight
    (g,) = torch.autograd.grad(out.penalty.mean(), param)

    def penalty_at(value):
        with torch.no_grad():
            old = param[2, 1].item()
            param[2, 1] = value
        p = critic_loss(disc, real, fake, 10.0, rho=rho).penalty.mean().item()
        with torch.no_grad():
            param[2, 1] = old
        return p

    x0, h = param[2, 1].item(), 1e-5
    fd = (penalty_at(x0 + h) - penalty_at(x0 - h)) / (2 * h)
    assert abs(fd - g[2, 1].item()) <= 1e-3 * abs(fd)


def test_per_example_gradients_match_single_backward():
    torch.manual_seed(4)
    disc = training.Discriminator(ModelConfig(num_nodes=6, hidden_dim=5)).double()
    real, fake = batches(n=4, seed=4)
    rho = torch.rand(4, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    flat, losses = per_example_gradients(disc, real, fake, rho, 10.0)
    for i in range(4):
        out = critic_loss(disc, real[i:i + 1], fake[i:i + 1], 10.0, rho=rho[i:i + 1])
        grads = torch.autograd.grad(out.loss, list(disc.parameters()))
        ref = torch.cat([g.reshape(-1) for g in grads])
        assert torch.allclose(flat[i], ref, rtol=1e-10, atol=1e-12)
        assert torch.allclose(losses[i], out.loss, rtol=1e-12)


def test_bounded_influence(toy_graph):
    torch.manual_seed(5)
    n = toy_graph.num_nodes
    disc = training.Discriminator(small_model(toy_graph)).double()
    rng = np.random.default_rng(5)
    real = one_hot_sequences(toy_graph.edges[rng.choice(toy_graph.num_edges, 9, replace=False)], n, torch.float64)
    fake = torch.tensor(rng.dirichlet(np.ones(n), size=(9, 2)))
    rho = torch.rand(9, dtype=torch.float64)
    for c in (0.05, 1.0):
        flat, _ = per_example_gradients(disc, real, fake, rho, 10.0)
        base = clip_per_example(flat, c).sum(0)
        for i in range(9):
            swapped = real.clone()
            swapped[i] = one_hot_sequences([[int(rng.integers(n)), int(rng.integers(n))]], n, torch.float64)[0]
            f2, _ = per_example_gradients(disc, swapped, fake, rho, 10.0)
            diff = torch.linalg.vector_norm(clip_per_example(f2, c).sum(0) - base)
            assert diff <= 2 * c + 1e-12


# critic and generator steps

def disc_params(trainer):
    return torch.cat([p.detach().reshape(-1) for p in trainer.disc.parameters()])


def test_dp_step_matches_vanilla_when_disabled(toy_graph):
    cfg = small_model(toy_graph)
    private = DPGANTrainer(toy_graph, cfg, gan(), DpConfig(noise_scale=0.0, clip_bound=1e9), seed=11)
    plain = DPGANTrainer(toy_graph, cfg, gan(), DpConfig(enabled=False), seed=11)
    for _ in range(20):
        private.critic_step()
        plain.critic_step()
        a, b = disc_params(private), disc_params(plain)
        assert torch.linalg.vector_norm(a - b) <= 1e-5 * torch.linalg.vector_norm(b)
    # first update alone at the tighter tolerance
    p1 = DPGANTrainer(toy_graph, cfg, gan(), DpConfig(noise_scale=0.0, clip_bound=1e9), seed=12)
    v1 = DPGANTrainer(toy_graph, cfg, gan(), DpConfig(enabled=False), seed=12)
    before = disc_params(v1)
    p1.critic_step()
    v1.critic_step()
    du, dv = disc_params(p1) - before, disc_params(v1) - before
    assert torch.linalg.vector_norm(du - dv) <= 1e-6 * torch.linalg.vector_norm(dv)


def test_ledger_counts_critic_steps(toy_graph):
    t = DPGANTrainer(toy_graph, small_model(toy_graph), gan(), DpConfig(), seed=0)
    for k in range(1, 6):
        t.critic_step()
        assert t.ledger.steps == k
    assert t.ledger.sampling_rate == pytest.approx(8 / toy_graph.num_edges)


def test_critic_steps_deterministic(toy_graph):
    cfg = small_model(toy_graph)
    runs = []
    for _ in range(2):
        t = DPGANTrainer(toy_graph, cfg, gan(), DpConfig(noise_scale=1.0, clip_bound=0.5), seed=21)
        for _ in range(10):
            t.critic_step()
        runs.append(disc_params(t))
    assert torch.equal(*runs)


def test_generator_gradient_vanishes_for_constant_critic(toy_graph):
    t = DPGANTrainer(toy_graph, small_model(toy_graph), gan(), DpConfig(enabled=False), seed=0)
    with torch.no_grad():
        t.disc.out.weight.zero_()
    assert t.generator_step()["grad_norm"] < 1e-6


def test_generator_steps_deterministic(toy_graph):
    outs = []
    for _ in range(2):
        t = DPGANTrainer(toy_graph, small_model(toy_graph), gan(), DpConfig(enabled=False), seed=3)
        t.critic_step()
        outs.append([t.generator_step()["g_loss"] for _ in range(5)])
    assert outs[0] == outs[1]


def test_generator_improves_against_frozen_critic():
    g = Graph.from_pairs([(0, 1)], 2)
    t = DPGANTrainer(g, small_model(g), gan(batch_size=1), DpConfig(enabled=False), seed=0)
    for _ in range(30):
        t.critic_step()
    t.disc.requires_grad_(False)

    def loss_on_fixed_noise():
        rng = torch.Generator().manual_seed(99)
        with torch.no_grad():
            fake, _ = t.gen(t.gen.sample_noise(4096, rng), rng)
            return float(-t.disc(fake).mean())

    before = loss_on_fixed_noise()
    for _ in range(50):
        t.generator_step()
    assert loss_on_fixed_noise() <= before + 1e-9


def test_budget_refuses_step(toy_graph):
    t = DPGANTrainer(toy_graph, small_model(toy_graph), gan(), DpConfig(target_epsilon=1e-3), seed=0)
    with pytest.raises(PrivacyBudgetExhausted):
        t.critic_step()
    assert t.ledger.steps == 0


# training loop

def test_early_stopping_rule():
    stopper = EarlyStopping(5)
    for i, v in enumerate((0.60, 0.61, 0.60, 0.59, 0.58, 0.57, 0.56)):
        assert not stopper.should_stop
        stopper.update(v)
    assert stopper.should_stop and i == 6
    assert stopper.best_index == 1


def test_train_patience_returns_best_snapshot(monkeypatch, toy_graph, toy_split):
    sequence = iter((0.60, 0.61, 0.60, 0.59, 0.58, 0.57, 0.56, 0.9, 0.9))
    monkeypatch.setattr(training, "link_prediction", lambda sm, split: (v := next(sequence), v))
    states = []
    cfg = gan(checkpoint_epochs=1, patience=5, max_epochs=50)

    def keep(trainer, rec):
        states.append({k: v.clone() for k, v in trainer.gen.state_dict().items()})

    res = train(toy_split.train, toy_split, small_model(toy_graph), cfg, DpConfig(enabled=False),
                seed=0, on_checkpoint=keep)
    assert len(res.history.records) == 7
    assert res.history.stop_reason == STOP_PATIENCE
    assert res.history.best_index == 1
    for k, v in res.generator.state_dict().items():
        assert torch.equal(v, states[1][k])
    assert not all(torch.equal(v, states[-1][k]) for k, v in res.generator.state_dict().items())


def test_train_tiny_budget_stops_in_first_epoch(toy_split):
    g = toy_split.train
    res = train(g, toy_split, small_model(g), gan(), DpConfig(target_epsilon=1e-3), seed=0)
    assert res.history.stop_reason == STOP_BUDGET
    assert res.history.records[-1].epoch == 1


def test_train_disabled_dp_reports_infinite_epsilon(toy_split):
    g = toy_split.train
    res = train(g, toy_split, small_model(g), gan(checkpoint_epochs=1, max_epochs=3), DpConfig(enabled=False), seed=0)
    assert len(res.history.records) == 3
    assert all(r.epsilon == math.inf for r in res.history.records)
    assert res.ledger.steps == 2 * res.trainer.generator_steps


def test_train_budget_run_bookkeeping(toy_split):
    g = toy_split.train
    dp = DpConfig(noise_scale=1.0, clip_bound=1.0, target_epsilon=2.0)
    cfg = gan(checkpoint_epochs=1, max_epochs=10_000, patience=10_000)
    res = train(g, toy_split, small_model(g), cfg, dp, seed=0)
    eps = [r.epsilon for r in res.history.records]
    assert res.history.stop_reason == STOP_BUDGET
    assert all(a <= b for a, b in zip(eps, eps[1:]))
    assert eps[-1] <= 2.0
    assert accountant.epsilon_for_delta(accountant.advance(res.ledger, 1), dp.target_delta) > 2.0
    t = res.trainer
    # the final iteration may stop part-way through its critic steps
    assert cfg.n_critic * t.generator_steps <= res.ledger.steps <= cfg.n_critic * (t.generator_steps + 1)
    assert res.ledger.steps == res.history.records[-1].critic_steps


def test_train_deterministic(toy_split):
    g = toy_split.train
    cfg = gan(checkpoint_epochs=1, max_epochs=2)
    a = train(g, toy_split, small_model(g), cfg, DpConfig(), seed=4)
    b = train(g, toy_split, small_model(g), cfg, DpConfig(), seed=4)
    strip = lambda h: [(r.auc, r.ap, r.d_loss, r.g_loss, r.epsilon) for r in h.records]  # noqa: E731
    assert strip(a.history) == strip(b.history)
    for x, y in zip(a.generator.parameters(), b.generator.parameters()):
        assert torch.equal(x, y)
