"""Desk-scale patch encoder with low-rank adapters.

:class:`ToyViT` stands in for a frozen pathology foundation model.  Its
attention and MLP projections are separate ``nn.Linear`` modules so that any
of ``query, key, value, out, mlp_in, mlp_out`` can be wrapped by a
:class:`LoRALinear`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError

ADAPTER_TARGETS = ("query", "key", "value", "out", "mlp_in", "mlp_out")


@dataclass
class ToyVitConfig:
    image_size: int = 64
    patch_px: int = 8
    depth: int = 4
    width: int = 64
    heads: int = 4
    mlp_ratio: float = 2.0
    pooling: str = "cls"
    init_seed: int = 1234

    def __post_init__(self):
        if self.image_size % self.patch_px:
            raise ConfigError("image_size must be divisible by patch_px")
        if self.width % self.heads:
            raise ConfigError("width must be divisible by heads")
        if self.pooling not in ("cls", "mean"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_px) ** 2


@dataclass
class AdapterPlan:
    n_finetune_blocks: int = 3
    targets: tuple[str, ...] = ("query", "value")
    rank: int = 8
    alpha: float = 8.0
    dropout: float = 0.25
    seed: int = 0

    def __post_init__(self):
        self.targets = tuple(self.targets)
        unknown = [t for t in self.targets if t not in ADAPTER_TARGETS]
        if unknown:
            raise ConfigError(f"unknown adapter target(s) {unknown}; choose from {ADAPTER_TARGETS}")
        if self.rank < 1:
            raise ConfigError("LoRA rank must be >= 1")
        if self.n_finetune_blocks < 0:
            raise ConfigError("n_finetune_blocks must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("LoRA dropout must lie in [0, 1)")


def lora_forward(x: torch.Tensor, W0: torch.Tensor, A: torch.Tensor, B: torch.Tensor, alpha: float) -> torch.Tensor:
    """``h = W0 x + (alpha / r) B A x`` for row-batched ``x``."""
    r = A.shape[0]
    return x @ W0.T + (alpha / r) * ((x @ A.T) @ B.T)


class LoRALinear(nn.Module):
    """Frozen linear map plus a trainable low-rank update (B starts at zero)."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float, dropout: float = 0.0,
                 generator: torch.Generator | None = None, target: str = ""):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.alpha = alpha
        self.scale = alpha / rank
        self.target = target
        k, d_out = base.in_features, base.out_features
        bound = 1.0 / math.sqrt(k)
        A = (torch.rand(rank, k, generator=generator, dtype=base.weight.dtype) * 2 - 1) * bound
        self.lora_A = nn.Parameter(A)
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank, dtype=base.weight.dtype))
        self.dropout = nn.Dropout(dropout) if dropout > 0 else nn.Identity()

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        update = (self.dropout(x) @ self.lora_A.T) @ self.lora_B.T
        return self.base(x) + self.scale * update


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.query = nn.Linear(width, width)
        self.key = nn.Linear(width, width)
        self.value = nn.Linear(width, width)
        self.out = nn.Linear(width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        h = self.heads

        def split(t):
            return t.view(B, T, h, D // h).transpose(1, 2)

        q, k, v = split(self.query(x)), split(self.key(x)), split(self.value(x))
        att = (q @ k.transpose(-2, -1)) / math.sqrt(D // h)
        y = att.softmax(dim=-1) @ v
        return self.out(y.transpose(1, 2).reshape(B, T, D))


class Block(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(width * mlp_ratio)
        self.norm1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.norm2 = nn.LayerNorm(width)
        self.mlp_in = nn.Linear(width, hidden)
        self.mlp_out = nn.Linear(hidden, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp_out(F.gelu(self.mlp_in(self.norm2(x))))

    def linear(self, target: str) -> tuple[nn.Module, str]:
        """Owner module and attribute name for an adapter target."""
        if target in ("query", "key", "value", "out"):
            return self.attn, target
        return self, target


class ToyViT(nn.Module):
    def __init__(self, cfg: ToyVitConfig):
        super().__init__()
        self.cfg = cfg
        g = torch.Generator().manual_seed(cfg.init_seed)
        fork = torch.random.fork_rng(devices=[])
        with fork:
            torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=g)))
            self.patch_embed = nn.Linear(3 * cfg.patch_px ** 2, cfg.width)
            self.cls_token = nn.Parameter(torch.randn(1, 1, cfg.width) * 0.02)
            self.pos_embed = nn.Parameter(torch.randn(1, cfg.n_patches + 1, cfg.width) * 0.02)
            self.blocks = nn.ModuleList(
                Block(cfg.width, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)
            )
            self.norm = nn.LayerNorm(cfg.width)

    @property
    def width(self) -> int:
        return self.cfg.width

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        p = self.cfg.patch_px
        B, C, H, W = x.shape
        x = x.reshape(B, C, H // p, p, W // p, p).permute(0, 2, 4, 1, 3, 5)
        return x.reshape(B, (H // p) * (W // p), C * p * p)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Embed a batch of channel-first images ``[B, 3, H, W]``."""
        s = self.cfg.image_size
        if x.ndim != 4 or tuple(x.shape[1:]) != (3, s, s):
            raise ValueError(f"expected images of shape [B, 3, {s}, {s}], got {tuple(x.shape)}")
        tokens = self.patch_embed(self.patchify(x))
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        h = torch.cat([cls, tokens], dim=1) + self.pos_embed
        for blk in self.blocks:
            h = blk(h)
        h = self.norm(h)
        return h[:, 0] if self.cfg.pooling == "cls" else h[:, 1:].mean(dim=1)


def encode_image(model: ToyViT, images: torch.Tensor) -> torch.Tensor:
    """Embed one ``[3, H, W]`` image or a ``[B, 3, H, W]`` batch."""
    single = images.ndim == 3
    out = model(images.unsqueeze(0) if single else images)
    return out[0] if single else out


@dataclass
class AdapterReport:
    trainable: int
    frozen: int
    wrapped: list[str] = field(default_factory=list)


def attach_adapters(backbone: ToyViT, plan: AdapterPlan) -> AdapterReport:
    """Freeze ``backbone`` and wrap the plan's targets in its top blocks (in place)."""
    depth = len(backbone.blocks)
    if plan.n_finetune_blocks > depth:
        raise ConfigError(f"plan asks for {plan.n_finetune_blocks} blocks, backbone has {depth}")
    for name, p in backbone.named_parameters():
        if ".lora_" not in name:
            p.requires_grad_(False)
    gen = torch.Generator().manual_seed(plan.seed)
    wrapped = []
    for bi in range(depth - plan.n_finetune_blocks, depth):
        blk = backbone.blocks[bi]
        for target in plan.targets:
            owner, attr = blk.linear(target)
            base = getattr(owner, attr)
            if isinstance(base, LoRALinear):
                continue
            setattr(owner, attr, LoRALinear(base, plan.rank, plan.alpha, plan.dropout, gen, target))
            wrapped.append(f"blocks.{bi}.{target}")
    return adapter_report(backbone, wrapped)


def adapter_report(model: nn.Module, wrapped: list[str] | None = None) -> AdapterReport:
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    frozen = sum(p.numel() for p in model.parameters() if not p.requires_grad)
    return AdapterReport(trainable, frozen, wrapped or [])


def adapter_block_index(name: str) -> int | None:
    """Block index of a parameter name such as ``blocks.3.attn.query.lora_A``."""
    parts = name.split(".")
    if len(parts) > 1 and parts[0] == "blocks" and parts[1].isdigit():
        return int(parts[1])
    return None


def adapter_state(model: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v for k, v in model.state_dict().items() if ".lora_" in k}


def backbone_state(model: nn.Module) -> dict[str, torch.Tensor]:
    """Frozen weights under their original (unwrapped) names."""
    return {k.replace(".base.", "."): v for k, v in model.state_dict().items() if ".lora_" not in k}


class GeneDecoderHead(nn.Module):
    """Image embedding -> gene panel regression head."""

    def __init__(self, dim: int, n_genes: int, hidden: int = 256):
        super().__init__()
        if hidden > 0:
            self.net = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, n_genes))
        else:
            self.net = nn.Sequential(nn.Linear(dim, n_genes))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


class AuxProjection(nn.Module):
    """Optional linear projection in front of the contrastive loss (starts as identity)."""

    def __init__(self, dim: int, mode: str = "linear"):
        super().__init__()
        if mode not in ("none", "linear"):
            raise ConfigError(f"unknown projection mode {mode!r}")
        self.mode = mode
        if mode == "linear":
            self.proj = nn.Linear(dim, dim)
            with torch.no_grad():
                self.proj.weight.copy_(torch.eye(dim))
                self.proj.bias.zero_()

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return z if self.mode == "none" else self.proj(z)
