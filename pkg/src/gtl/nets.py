"""Small transformer networks used by the denoiser, classifiers, ratio net,
planner and score model."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import torch
import torch.nn as nn

from .numerics import DTYPE, load_checkpoint, save_checkpoint

KINDS = ("denoiser", "classifier", "ratio", "planner", "score")
LOG_RATIO_CLIP = 10.0


@dataclass(frozen=True)
class ModelConfig:
    kind: str
    vocab_size: int
    length: int
    width: int = 64
    layers: int = 2
    heads: int = 4
    dropout: float = 0.1
    time_conditioned: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.vocab_size < 2 or self.length < 1:
            raise ValueError("vocab_size must be >= 2 and length >= 1")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")

    @property
    def mask_id(self) -> int:
        return self.vocab_size


def sinusoidal_positions(length: int, width: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=DTYPE)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, width, 2, dtype=DTYPE) / width)
    table = torch.zeros(length, width, dtype=DTYPE)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq[: width // 2])
    return table


def sigma_feature(sigma: torch.Tensor | float, batch: int) -> torch.Tensor:
    # log-sigma scaled to roughly unit range for sigma in [1e-4, 20]
    s = torch.as_tensor(sigma, dtype=DTYPE)
    if s.dim() == 0:
        s = s.expand(batch)
    return (torch.log(s) / 10.0).reshape(batch, 1)


class Block(nn.Module):
    def __init__(self, width: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q, k, v = (y.view(b, n, self.heads, d // self.heads).transpose(1, 2) for y in (q, k, v))
        att = (q @ k.transpose(-2, -1)) / math.sqrt(d // self.heads)
        att = self.drop(torch.softmax(att, dim=-1))
        y = (att @ v).transpose(1, 2).reshape(b, n, d)
        x = x + self.drop(self.proj(y))
        return x + self.drop(self.mlp(self.ln2(x)))


class Trunk(nn.Module):
    """Token + position embedding, optional sigma conditioning, transformer blocks."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = nn.Embedding(cfg.vocab_size + 1, cfg.width)
        self.register_buffer("positions", sinusoidal_positions(cfg.length, cfg.width), persistent=False)
        self.time_embed = nn.Linear(1, cfg.width) if cfg.time_conditioned else None
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.heads, cfg.dropout) for _ in range(cfg.layers))
        self.ln = nn.LayerNorm(cfg.width)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, z: torch.Tensor, sigma=None) -> torch.Tensor:
        h = self.embed(z) + self.positions[: z.shape[1]]
        if self.time_embed is not None:
            if sigma is None:
                raise ValueError("time-conditioned model requires sigma")
            h = h + self.time_embed(sigma_feature(sigma, z.shape[0]))[:, None, :]
        h = self.drop(h)
        for block in self.blocks:
            h = block(h)
        return self.ln(h)


class GTLModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.trunk = Trunk(cfg)

    @property
    def vocab_size(self) -> int:
        return self.cfg.vocab_size

    @property
    def mask_id(self) -> int:
        return self.cfg.mask_id

    @property
    def time_conditioned(self) -> bool:
        return self.cfg.time_conditioned


class Denoiser(GTLModel):
    """Predicts per-position clean-token log-probabilities; MASK is not in the output support."""

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        self.head = nn.Linear(cfg.width, cfg.vocab_size)

    def forward(self, z: torch.Tensor, sigma=None) -> torch.Tensor:
        return torch.log_softmax(self.head(self.trunk(z, sigma)), dim=-1)

    def log_probs(self, z: torch.Tensor, sigma=None) -> torch.Tensor:
        return self(z, sigma)


class SequenceScorer(GTLModel):
    """Mean-pooled scalar head; sigma enters as a scalar feature after pooling."""

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        self.trunk = Trunk(replace(cfg, time_conditioned=False))
        extra = 1 if cfg.time_conditioned else 0
        self.head = nn.Sequential(nn.Linear(cfg.width + extra, cfg.width), nn.GELU(), nn.Linear(cfg.width, 1))

    def forward(self, z: torch.Tensor, sigma=None) -> torch.Tensor:
        h = self.trunk(z).mean(dim=1)
        if self.cfg.time_conditioned:
            h = torch.cat([h, sigma_feature(sigma, z.shape[0])], dim=-1)
        return self.head(h).squeeze(-1)


class DomainClassifier(SequenceScorer):
    """Logit of P(source | input); the target domain carries label 0."""

    def prob_source(self, z: torch.Tensor, sigma=None) -> torch.Tensor:
        return torch.sigmoid(self(z, sigma))


class RatioNet(SequenceScorer):
    """Outputs log r, an estimate of log q(z)/p(z) at noise level sigma."""

    def log_ratio(self, z: torch.Tensor, sigma=None) -> torch.Tensor:
        return self(z, sigma).clamp(-LOG_RATIO_CLIP, LOG_RATIO_CLIP)


class Planner(GTLModel):
    """Per-position logit that the frozen denoiser decodes the position correctly."""

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        self.head = nn.Linear(cfg.width, 1)

    def forward(self, z: torch.Tensor, sigma=None) -> torch.Tensor:
        return self.head(self.trunk(z, None)).squeeze(-1)

    def scores(self, z: torch.Tensor) -> torch.Tensor:
        return self(z)


class ScoreNet(GTLModel):
    """Positive concrete-score estimates s(y)[l, v] for unmasking position l to token v."""

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        self.head = nn.Linear(cfg.width, cfg.vocab_size)

    def forward(self, z: torch.Tensor, sigma=None) -> torch.Tensor:
        return self.head(self.trunk(z, sigma))

    def log_score(self, z: torch.Tensor, sigma=None) -> torch.Tensor:
        return self(z, sigma)


_CLASSES = {
    "denoiser": Denoiser,
    "classifier": DomainClassifier,
    "ratio": RatioNet,
    "planner": Planner,
    "score": ScoreNet,
}


def build_model(cfg: ModelConfig, seed: int | None = None) -> GTLModel:
    if seed is not None:
        torch.manual_seed(seed)
    return _CLASSES[cfg.kind](cfg).to(DTYPE)


def save_model(path: str | Path, model: GTLModel, extra: dict | None = None) -> Path:
    record = {"model": asdict(model.cfg)}
    if extra:
        record.update(extra)
    return save_checkpoint(path, model, record)


def load_model(path: str | Path) -> tuple[GTLModel, dict]:
    state, record = load_checkpoint(path)
    model = build_model(ModelConfig(**record["model"]))
    model.load_state_dict(state)
    model.eval()
    return model, record


def n_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


__all__ = [
    "ModelConfig",
    "Denoiser",
    "DomainClassifier",
    "RatioNet",
    "Planner",
    "ScoreNet",
    "build_model",
    "save_model",
    "load_model",
    "freeze",
]
