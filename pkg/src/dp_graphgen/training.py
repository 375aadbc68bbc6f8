"""WGAN-GP training with a DP-SGD discriminator and moments-accountant bookkeeping."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch.func import functional_call, grad, grad_and_value, vmap

from . import accountant
from .assembler import count_edges, symmetrize
from .evaluation import link_prediction
from .graph import EdgeSplit, Graph, sample_edge_batch, sample_edge_batch_poisson, sample_random_walks
from .model import Discriminator, Generator, ModelConfig, generate_samples, one_hot_sequences

logger = logging.getLogger(__name__)

STOP_PATIENCE = "patience"
STOP_BUDGET = "privacy budget"
STOP_MAX_EPOCHS = "max epochs"


@dataclass
class GanConfig:
    lambda_gp: float = 10.0
    n_critic: int = 3
    batch_size: int = 2048
    learning_rate: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.9
    checkpoint_epochs: int = 5
    patience: int = 5
    max_epochs: int = 500
    min_epochs: int = 0
    checkpoint_sample_volume: int = 40_000
    early_stopping_metric: str = "mean"
    sampling: str = "fixed"
    per_example_chunk: int = 256
    dtype: str = "float32"

    def __post_init__(self):
        if self.n_critic < 1 or self.batch_size < 1:
            raise ValueError("n_critic and batch_size must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.early_stopping_metric not in ("auc", "ap", "mean"):
            raise ValueError("early_stopping_metric must be auc, ap or mean")
        if self.sampling not in ("fixed", "poisson"):
            raise ValueError("sampling must be fixed or poisson")

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)


@dataclass
class DpConfig:
    enabled: bool = True
    clip_bound: float = 1.0
    noise_scale: float = 1.0
    target_delta: float = 1e-5
    target_epsilon: float = math.inf
    budget_convention: str = "epsilon"
    max_order: int = 64

    def __post_init__(self):
        if self.enabled and not self.clip_bound > 0:
            raise ValueError("clip_bound must be > 0 when DP is enabled")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if not 0 < self.target_delta < 1:
            raise ValueError("target_delta must lie in (0, 1)")


class PrivacyBudgetExhausted(RuntimeError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


def clip_per_example(grad, clip_bound: float):
    """Scale ``grad`` by ``1 / max(1, ||grad|| / C)``; 2-D input is clipped row-wise."""
    if not clip_bound > 0:
        raise ValueError("clip bound must be > 0")
    g = torch.as_tensor(grad)
    if not torch.isfinite(g).all():
        raise ValueError("non-finite gradient")
    norms = torch.linalg.vector_norm(g, dim=-1, keepdim=True)
    out = g / torch.clamp(norms / clip_bound, min=1.0)
    return out.numpy() if isinstance(grad, np.ndarray) else out


def _as_generator(seed) -> torch.Generator | None:
    if seed is None or isinstance(seed, torch.Generator):
        return seed
    return torch.Generator().manual_seed(int(seed))


def _add_noise(grad_sum: torch.Tensor, denominator: float, sigma: float, clip_bound: float,
               generator: torch.Generator | None) -> torch.Tensor:
    if sigma > 0:
        xi = torch.randn(grad_sum.shape, generator=generator, dtype=grad_sum.dtype) * (sigma * clip_bound)
        grad_sum = grad_sum + xi
    return grad_sum / denominator


def noisy_aggregate(clipped_grads, sigma: float, clip_bound: float, seed=None,
                    denominator: float | None = None):
    """``(1/m) * (sum_i g_i + xi)`` with ``xi ~ N(0, (sigma C)^2 I)``, one noise draw per call."""
    if len(clipped_grads) == 0:
        raise ValueError("no gradients to aggregate")
    numpy_in = isinstance(clipped_grads, np.ndarray) or isinstance(clipped_grads[0], np.ndarray)
    g = torch.stack([torch.as_tensor(x) for x in clipped_grads]) if not torch.is_tensor(clipped_grads) \
        else clipped_grads
    if g.dtype not in (torch.float32, torch.float64):
        g = g.double()
    norms = torch.linalg.vector_norm(g, dim=-1)
    tol = 1e-9 + clip_bound * 16 * torch.finfo(g.dtype).eps
    if torch.any(norms > clip_bound + tol):
        raise ValueError(f"gradient norm {norms.max().item():.6g} exceeds clip bound {clip_bound}")
    m = len(g) if denominator is None else denominator
    out = _add_noise(g.sum(0), m, sigma, clip_bound, _as_generator(seed))
    return out.numpy() if numpy_in else out


@dataclass
class CriticLoss:
    loss: torch.Tensor
    per_example: torch.Tensor
    d_real: torch.Tensor
    d_fake: torch.Tensor
    penalty: torch.Tensor
    rho: torch.Tensor


def critic_loss(disc: Discriminator, real: torch.Tensor, fake: torch.Tensor, lambda_gp: float,
                seed=None, rho: torch.Tensor | None = None) -> CriticLoss:
    """Batched WGAN-GP critic loss with one interpolation coefficient per example."""
    if real.shape != fake.shape:
        raise ValueError("real and fake batches must have the same shape")
    if rho is None:
        rho = torch.rand(real.shape[0], generator=_as_generator(seed), dtype=real.dtype)
    r = rho.view(-1, *([1] * (real.dim() - 1)))
    x_hat = (r * real + (1 - r) * fake).detach().requires_grad_(True)
    s_hat = disc(x_hat)
    gx, = torch.autograd.grad(s_hat.sum(), x_hat, create_graph=True)
    penalty = (torch.linalg.vector_norm(gx.flatten(1), dim=1) - 1) ** 2
    d_real = disc(real)
    d_fake = disc(fake)
    per_example = d_fake - d_real + lambda_gp * penalty
    return CriticLoss(per_example.mean(), per_example, d_real, d_fake, penalty, rho)


def _example_loss_fn(disc: Discriminator, lambda_gp: float):
    def score(params, x):
        return functional_call(disc, params, (x.unsqueeze(0),)).squeeze(0)

    def loss(params, real, fake, rho):
        x_hat = rho * real + (1 - rho) * fake
        gx = grad(score, argnums=1)(params, x_hat)
        penalty = (torch.linalg.vector_norm(gx) - 1) ** 2
        return score(params, fake) - score(params, real) + lambda_gp * penalty

    return loss


def per_example_gradients(disc: Discriminator, real, fake, rho, lambda_gp: float):
    """Flattened per-example gradients ``(m, n_param)`` and per-example losses ``(m,)``."""
    params = {k: v.detach() for k, v in disc.named_parameters()}
    fn = vmap(grad_and_value(_example_loss_fn(disc, lambda_gp)), in_dims=(None, 0, 0, 0))
    grads, losses = fn(params, real, fake, rho)
    flat = torch.cat([grads[k].reshape(len(real), -1) for k in params], dim=1)
    return flat, losses


def _flat_to_grads(module: torch.nn.Module, flat: torch.Tensor):
    offset = 0
    for p in module.parameters():
        n = p.numel()
        p.grad = flat[offset:offset + n].view_as(p).clone()
        offset += n


@dataclass
class CheckpointRecord:
    epoch: int
    generator_steps: int
    critic_steps: int
    d_loss: float
    g_loss: float
    auc: float | None
    ap: float | None
    epsilon: float
    delta: float
    wall_clock: float


@dataclass
class TrainHistory:
    records: list[CheckpointRecord] = field(default_factory=list)
    stop_reason: str | None = None
    best_index: int | None = None

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.records)


class EarlyStopping:
    """Stops once ``patience`` consecutive checkpoints fail to beat the best score."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_index: int | None = None
        self.count = 0
        self.since_best = 0

    def update(self, value: float) -> bool:
        improved = value > self.best
        if improved:
            self.best, self.best_index, self.since_best = value, self.count, 0
        else:
            self.since_best += 1
        self.count += 1
        return improved

    @property
    def should_stop(self) -> bool:
        return self.since_best >= self.patience


def derive_seed(seed: int, *keys) -> int:
    """Stable child seed for a named stage."""
    words = [int(seed)] + [int.from_bytes(k.encode(), "little") if isinstance(k, str) else int(k) for k in keys]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def samples_to_pairs(samples: np.ndarray) -> np.ndarray:
    """Decompose length-k sequences into their k-1 consecutive node pairs."""
    samples = np.asarray(samples)
    return np.stack([samples[:, :-1], samples[:, 1:]], axis=-1).reshape(-1, 2)


class DPGANTrainer:
    """Holds generator, discriminator, optimisers, RNG and the privacy ledger."""

    def __init__(self, train_graph: Graph, model_cfg: ModelConfig, gan_cfg: GanConfig,
                 dp_cfg: DpConfig, seed: int, mode: str = "edge"):
        if model_cfg.num_nodes != train_graph.num_nodes:
            raise ValueError("model num_nodes does not match the training graph")
        if mode == "edge" and model_cfg.sequence_length != 2:
            raise ValueError("edge mode needs sequence_length 2")
        if mode == "edge" and gan_cfg.batch_size > train_graph.num_edges:
            raise ValueError(f"batch size {gan_cfg.batch_size} exceeds {train_graph.num_edges} train edges")
        self.graph = train_graph
        self.model_cfg = model_cfg
        self.gan_cfg = gan_cfg
        self.dp_cfg = dp_cfg
        self.seed = int(seed)
        self.mode = mode
        dtype = gan_cfg.torch_dtype
        with torch.random.fork_rng():
            torch.manual_seed(self.seed)
            self.gen = Generator(model_cfg).to(dtype)
            self.disc = Discriminator(model_cfg).to(dtype)
        betas = (gan_cfg.beta1, gan_cfg.beta2)
        self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=gan_cfg.learning_rate, betas=betas)
        self.opt_g = torch.optim.Adam(self.gen.parameters(), lr=gan_cfg.learning_rate, betas=betas)
        self.rng = torch.Generator().manual_seed(self.seed)
        self.batch_step = 0
        self.generator_steps = 0
        q = min(1.0, gan_cfg.batch_size / train_graph.num_edges)
        sigma = dp_cfg.noise_scale if dp_cfg.enabled else 0.0
        self.ledger = accountant.make_ledger(q, sigma, range(1, dp_cfg.max_order + 1), gan_cfg.sampling)

    @property
    def private(self) -> bool:
        return self.dp_cfg.enabled

    def _real_batch(self) -> torch.Tensor:
        step = self.batch_step
        self.batch_step += 1
        m = self.gan_cfg.batch_size
        if self.mode == "edge":
            if self.gan_cfg.sampling == "poisson":
                ids = sample_edge_batch_poisson(self.graph, self.ledger.sampling_rate, self.seed, step)
            else:
                ids = sample_edge_batch(self.graph, m, self.seed, step)
        else:
            ids = sample_random_walks(self.graph, self.model_cfg.sequence_length, m, self.seed, step)
        return one_hot_sequences(ids, self.model_cfg.num_nodes, self.gan_cfg.torch_dtype)

    def epsilon(self, ledger=None) -> float:
        ledger = self.ledger if ledger is None else ledger
        if not self.private:
            return math.inf if ledger.steps else 0.0
        return accountant.epsilon_for_delta(ledger, self.dp_cfg.target_delta)

    def delta(self, ledger=None) -> float:
        ledger = self.ledger if ledger is None else ledger
        eps0 = self.dp_cfg.target_epsilon
        if not self.private:
            return 1.0 if ledger.steps else 0.0
        if math.isinf(eps0):
            return float("nan")
        return accountant.delta_for_epsilon(ledger, eps0)

    def critic_step(self) -> dict:
        """One discriminator update; with DP on, clipped per-example gradients plus noise."""
        dp = self.dp_cfg
        if self.private:
            nxt = accountant.advance(self.ledger, 1)
            if accountant.budget_exceeded(nxt, dp.target_delta, dp.target_epsilon, dp.budget_convention):
                raise PrivacyBudgetExhausted(
                    f"next step would spend ε={self.epsilon(nxt):.4g} > {dp.target_epsilon}")
        real = self._real_batch()
        m = len(real)
        with torch.no_grad():
            fake, _ = self.gen(self.gen.sample_noise(m, self.rng), self.rng)
        rho = torch.rand(m, generator=self.rng, dtype=real.dtype)

        self.opt_d.zero_grad(set_to_none=True)
        record = {}
        if self.private:
            chunk = self.gan_cfg.per_example_chunk
            total = None
            loss_sum = 0.0
            clipped_count = 0
            for s in range(0, m, chunk):
                flat, losses = per_example_gradients(
                    self.disc, real[s:s + chunk], fake[s:s + chunk], rho[s:s + chunk], self.gan_cfg.lambda_gp)
                norms = torch.linalg.vector_norm(flat, dim=1)
                clipped_count += int((norms > dp.clip_bound).sum())
                part = clip_per_example(flat, dp.clip_bound).sum(0)
                total = part if total is None else total + part
                loss_sum += float(losses.sum())
            if total is None:
                total = torch.zeros(self.disc.num_params, dtype=real.dtype)
            denominator = self.gan_cfg.batch_size if self.gan_cfg.sampling == "poisson" else m
            g_hat = _add_noise(total, denominator, dp.noise_scale, dp.clip_bound, self.rng)
            _flat_to_grads(self.disc, g_hat)
            loss = loss_sum / max(m, 1)
            record["clipped_fraction"] = clipped_count / max(m, 1)
        else:
            out = critic_loss(self.disc, real, fake, self.gan_cfg.lambda_gp, rho=rho)
            out.loss.backward()
            loss = float(out.loss.detach())
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite critic loss at critic step {self.ledger.steps}")
        self.opt_d.step()
        self.ledger = accountant.advance(self.ledger, 1)
        record["d_loss"] = loss
        return record

    def generator_step(self) -> dict:
        m = self.gan_cfg.batch_size
        fake, _ = self.gen(self.gen.sample_noise(m, self.rng), self.rng)
        loss = -self.disc(fake).mean()
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite generator loss at generator step {self.generator_steps}")
        params = list(self.gen.parameters())
        grads = torch.autograd.grad(loss, params)
        self.opt_g.zero_grad(set_to_none=True)
        for p, g in zip(params, grads):
            p.grad = g
        self.opt_g.step()
        self.generator_steps += 1
        grad_norm = float(torch.sqrt(sum((g.double() ** 2).sum() for g in grads)))
        return {"g_loss": float(loss.detach()), "grad_norm": grad_norm}

    @property
    def iterations_per_epoch(self) -> int:
        """Generator iterations per epoch: one epoch is about one critic pass over the train edges."""
        per_iter = self.gan_cfg.batch_size * self.gan_cfg.n_critic
        return max(1, math.ceil(self.graph.num_edges / per_iter))

    def score_matrix(self, volume: int, seed: int):
        samples = generate_samples(self.gen, volume, seed)
        return symmetrize(count_edges(samples_to_pairs(samples), self.model_cfg.num_nodes))

    def snapshot(self) -> dict:
        return {"gen": copy.deepcopy(self.gen.state_dict()), "disc": copy.deepcopy(self.disc.state_dict()),
                "ledger": self.ledger, "generator_steps": self.generator_steps}


@dataclass
class TrainResult:
    generator: Generator
    discriminator: Discriminator
    history: TrainHistory
    ledger: accountant.PrivacyLedger
    trainer: DPGANTrainer


def _stop_metric(auc, ap, which):
    if auc is None:
        return None
    return {"auc": auc, "ap": ap, "mean": 0.5 * (auc + ap)}[which]


def train(graph: Graph, split: EdgeSplit | None, model_cfg: ModelConfig, gan_cfg: GanConfig,
          dp_cfg: DpConfig, seed: int, mode: str = "edge", on_checkpoint=None) -> TrainResult:
    """Run the critic/generator loop with periodic validation checkpoints.

    Stops on patience, privacy budget or ``max_epochs`` and returns the
    generator from the best checkpoint; ``ledger`` reflects the full spend.
    """
    trainer = DPGANTrainer(graph, model_cfg, gan_cfg, dp_cfg, seed, mode)
    history = TrainHistory()
    stopper = EarlyStopping(gan_cfg.patience)
    best = None
    t0 = time.perf_counter()
    last_d = last_g = float("nan")

    def checkpoint(epoch):
        nonlocal best
        auc = ap = None
        if split is not None:
            sm = trainer.score_matrix(gan_cfg.checkpoint_sample_volume, seed=derive_seed(seed, "checkpoint", epoch))
            auc, ap = link_prediction(sm, split)
        rec = CheckpointRecord(epoch, trainer.generator_steps, trainer.ledger.steps, last_d, last_g,
                               auc, ap, trainer.epsilon(), trainer.delta(), time.perf_counter() - t0)
        history.records.append(rec)
        metric = _stop_metric(auc, ap, gan_cfg.early_stopping_metric)
        if metric is not None and stopper.update(metric):
            best = trainer.snapshot()
            history.best_index = len(history.records) - 1
        logger.info("epoch %d: d_loss=%.4f g_loss=%.4f auc=%s ap=%s eps=%.4g", epoch, last_d, last_g,
                    auc, ap, rec.epsilon)
        if on_checkpoint is not None:
            on_checkpoint(trainer, rec)

    stop = None
    epoch = 0
    for epoch in range(1, gan_cfg.max_epochs + 1):
        for _ in range(trainer.iterations_per_epoch):
            try:
                for _ in range(gan_cfg.n_critic):
                    last_d = trainer.critic_step()["d_loss"]
            except PrivacyBudgetExhausted as exc:
                logger.info("stopping: %s", exc)
                stop = STOP_BUDGET
                break
            last_g = trainer.generator_step()["g_loss"]
        if stop is not None:
            checkpoint(epoch)
            break
        if epoch % gan_cfg.checkpoint_epochs == 0:
            checkpoint(epoch)
            if stopper.should_stop and epoch >= gan_cfg.min_epochs:
                stop = STOP_PATIENCE
                break
    else:
        stop = STOP_MAX_EPOCHS
        if not history.records or history.records[-1].epoch != epoch:
            checkpoint(epoch)
    history.stop_reason = stop

    if best is not None:
        trainer.gen.load_state_dict(best["gen"])
        trainer.disc.load_state_dict(best["disc"])
    return TrainResult(trainer.gen, trainer.disc, history, trainer.ledger, trainer)
