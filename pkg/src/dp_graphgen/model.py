"""Recurrent generator and discriminator over node-id sequences.

Both networks use a hand-rolled LSTM cell built from linear layers so that
``torch.func`` transforms (per-example ``vmap(grad(...))`` and the
double-backward needed by the gradient penalty) apply without special cases.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

INIT_SCHEME = "recurrent: U(-1/sqrt(hidden), 1/sqrt(hidden)); projections: xavier-uniform; biases: 0"


@dataclass(frozen=True)
class ModelConfig:
    num_nodes: int
    noise_dim: int = 16
    hidden_dim: int = 40
    down_projection_dim: int = 64
    sequence_length: int = 2
    temperature: float = 1.0

    def __post_init__(self):
        if self.sequence_length < 2:
            raise ValueError("sequence_length must be >= 2")
        for name in ("num_nodes", "noise_dim", "hidden_dim", "down_projection_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")


class NonFiniteError(FloatingPointError):
    pass


def _lstm_cell(gates: nn.Linear, x, h, c):
    i, f, g, o = gates(torch.cat([x, h], dim=-1)).chunk(4, dim=-1)
    c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
    h = torch.sigmoid(o) * torch.tanh(c)
    return h, c


def _init_weights(module: nn.Module):
    bound = 1.0 / math.sqrt(module.cfg.hidden_dim)
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            nn.init.zeros_(p)
        elif name.startswith("cell"):
            # U(-0.05, 0.05) leaves the critic stuck near a saddle for thousands of steps
            nn.init.uniform_(p, -bound, bound)
        else:
            nn.init.xavier_uniform_(p)


class _Base(nn.Module):
    def param_groups(self) -> dict[str, tuple[int, ...]]:
        return {name: tuple(p.shape) for name, p in self.named_parameters()}

    @property
    def num_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def check_finite(self):
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise NonFiniteError(f"non-finite values in parameter group {name!r}")


def relaxed_sample_step(logits: torch.Tensor, temperature: float,
                        generator: torch.Generator | None = None):
    """Gumbel-perturbed categorical draw with a straight-through relaxed vector.

    Returns ``(straight_through, relaxed, hard_index)``. The straight-through
    tensor equals the hard one-hot in the forward pass and carries the gradient
    of ``relaxed = softmax((logits + gumbel) / temperature)``.
    """
    u = torch.rand(logits.shape, generator=generator, dtype=logits.dtype, device=logits.device)
    gumbel = -torch.log(-torch.log(u.clamp_min(torch.finfo(logits.dtype).tiny)))
    perturbed = logits + gumbel
    relaxed = F.softmax(perturbed / temperature, dim=-1)
    hard = perturbed.argmax(dim=-1)
    one_hot = F.one_hot(hard, logits.shape[-1]).to(logits.dtype)
    return one_hot - relaxed.detach() + relaxed, relaxed, hard


class Generator(_Base):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.init_h = nn.Linear(cfg.noise_dim, cfg.hidden_dim)
        self.init_c = nn.Linear(cfg.noise_dim, cfg.hidden_dim)
        self.cell = nn.Linear(cfg.down_projection_dim + cfg.hidden_dim, 4 * cfg.hidden_dim)
        self.up = nn.Linear(cfg.hidden_dim, cfg.num_nodes)
        self.down = nn.Linear(cfg.num_nodes, cfg.down_projection_dim, bias=False)
        _init_weights(self)

    def sample_noise(self, count: int, generator: torch.Generator | None = None) -> torch.Tensor:
        dtype = self.up.weight.dtype
        return torch.randn(count, self.cfg.noise_dim, generator=generator, dtype=dtype)

    def forward(self, z: torch.Tensor, generator: torch.Generator | None = None):
        """Return ``(vectors, ids)``: straight-through one-hots ``(B, L, N)`` and ids ``(B, L)``."""
        h = torch.tanh(self.init_h(z))
        c = torch.tanh(self.init_c(z))
        x = z.new_zeros(z.shape[0], self.cfg.down_projection_dim)
        vectors, ids = [], []
        for _ in range(self.cfg.sequence_length):
            h, c = _lstm_cell(self.cell, x, h, c)
            logits = self.up(h)
            if not torch.isfinite(logits).all():
                self.check_finite()
                raise NonFiniteError("non-finite logits from parameter group 'up'")
            st, _, hard = relaxed_sample_step(logits, self.cfg.temperature, generator)
            vectors.append(st)
            ids.append(hard)
            x = self.down(st)
        return torch.stack(vectors, dim=1), torch.stack(ids, dim=1)


class Discriminator(_Base):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.down = nn.Linear(cfg.num_nodes, cfg.down_projection_dim, bias=False)
        self.cell = nn.Linear(cfg.down_projection_dim + cfg.hidden_dim, 4 * cfg.hidden_dim)
        self.out = nn.Linear(cfg.hidden_dim, 1)
        _init_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Score a batch of sequences of per-step vectors ``(B, L, N)`` -> ``(B,)``."""
        if x.shape[-1] != self.cfg.num_nodes:
            raise ValueError(f"expected step vectors of length {self.cfg.num_nodes}, got {x.shape[-1]}")
        h = x.new_zeros(x.shape[0], self.cfg.hidden_dim)
        c = x.new_zeros(x.shape[0], self.cfg.hidden_dim)
        for t in range(x.shape[1]):
            h, c = _lstm_cell(self.cell, self.down(x[:, t]), h, c)
        return self.out(h).squeeze(-1)


def one_hot_sequences(ids, num_nodes: int, dtype=torch.float32) -> torch.Tensor:
    ids = torch.as_tensor(np.asarray(ids), dtype=torch.long)
    return F.one_hot(ids, num_nodes).to(dtype)


def discriminator_scores(disc: Discriminator, batch) -> torch.Tensor:
    with torch.no_grad():
        return disc(torch.as_tensor(batch, dtype=disc.out.weight.dtype))


@torch.no_grad()
def generate_samples(gen: Generator, count: int, seed: int, chunk: int = 8192) -> np.ndarray:
    """Draw ``count`` hard node-id sequences, shape ``(count, sequence_length)``."""
    out = np.empty((count, gen.cfg.sequence_length), dtype=np.int64)
    rng = torch.Generator().manual_seed(int(seed))
    for start in range(0, count, chunk):
        n = min(chunk, count - start)
        _, ids = gen(gen.sample_noise(n, rng), rng)
        out[start:start + n] = ids.numpy()
    return out


def _torch_rng_state(generator: torch.Generator | None) -> list[int]:
    return [] if generator is None else generator.get_state().tolist()


MAGIC = b"DPGGCKPT"
FORMAT_VERSION = 1


def save_checkpoint(path, gen: Generator, disc: Discriminator | None = None, *,
                    global_step: int = 0, rng: torch.Generator | None = None,
                    extra: dict | None = None) -> None:
    """Binary container: magic, version, manifest length, JSON manifest, raw float64 arrays."""
    modules = {"generator": gen}
    if disc is not None:
        modules["discriminator"] = disc
    groups = []
    blobs = []
    for prefix, module in modules.items():
        for name, p in module.named_parameters():
            arr = p.detach().cpu().numpy().astype("<f8")
            groups.append({"name": f"{prefix}.{name}", "shape": list(arr.shape)})
            blobs.append(arr.tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": asdict(gen.cfg),
        "init_scheme": INIT_SCHEME,
        "dtype": str(gen.up.weight.dtype).replace("torch.", ""),
        "groups": groups,
        "global_step": int(global_step),
        "rng_state": _torch_rng_state(rng),
        "extra": extra or {},
    }
    header = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path):
    """Return ``(generator, discriminator_or_None, manifest)``; validates the shape manifest."""
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = len(MAGIC) + struct.calcsize("<IQ")
    manifest = json.loads(data[offset:offset + hlen])
    offset += hlen
    cfg = ModelConfig(**manifest["model_config"])
    dtype = getattr(torch, manifest.get("dtype", "float32"))
    gen = Generator(cfg).to(dtype)
    disc = Discriminator(cfg).to(dtype) if any(
        g["name"].startswith("discriminator.") for g in manifest["groups"]) else None
    params = dict(gen.named_parameters(prefix="generator"))
    if disc is not None:
        params.update(disc.named_parameters(prefix="discriminator"))
    if set(params) != {g["name"] for g in manifest["groups"]}:
        raise ValueError(f"{path}: parameter groups do not match the model config")
    with torch.no_grad():
        for g in manifest["groups"]:
            p = params[g["name"]]
            if tuple(g["shape"]) != tuple(p.shape):
                raise ValueError(f"{path}: shape mismatch for {g['name']}: {g['shape']} vs {tuple(p.shape)}")
            n = int(np.prod(g["shape"], dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(g["shape"])
            p.copy_(torch.from_numpy(arr.copy()))
            offset += 8 * n
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after parameter arrays")
    return gen, disc, manifest
