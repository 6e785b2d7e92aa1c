"""Training objectives for both stages.

Stage I reconstructs the gene panel with a mix of MSE and a scale-invariant
cross-correlation loss.  Stage II adds a symmetric InfoNCE between image and
gene embeddings plus a domain classifier behind a gradient reversal layer.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataError

CORR_EPS = 1e-8


@dataclass
class LossWeights:
    lambda_inv: float = 1.0
    lambda_red: float = 5e-3
    lambda_mse: float = 1.0
    lambda_contrast: float = 1.0
    lambda_rec_img: float = 1.0
    lambda_rec_gene: float = 1.0
    lambda_da: float = 0.001
    tau: float = 0.05

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be >= 0")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")


def _same_shape(x: torch.Tensor, y: torch.Tensor, what: str) -> None:
    if x.shape != y.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")


def mse_loss(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    _same_shape(x, y, "mse_loss")
    return ((x - y) ** 2).mean()


def cross_correlation(x: torch.Tensor, y: torch.Tensor, eps: float = CORR_EPS) -> torch.Tensor:
    """Uncentered column-wise cosine matrix ``C[i, j] = <x_i, y_j> / (|x_i| |y_j|)``.

    ``x`` is the target batch and ``y`` the prediction, both ``[B, G]``.
    Column norms are floored at ``eps``.
    """
    _same_shape(x, y, "cross_correlation")
    nx = x.norm(dim=0).clamp_min(eps)
    ny = y.norm(dim=0).clamp_min(eps)
    return (x.T @ y) / (nx[:, None] * ny[None, :])


def invariance_loss(C: torch.Tensor) -> torch.Tensor:
    return ((1 - torch.diagonal(C)) ** 2).sum()


def redundancy_loss(C: torch.Tensor) -> torch.Tensor:
    off = C - torch.diag_embed(torch.diagonal(C))
    return (off ** 2).sum()


def reconstruction_terms(x: torch.Tensor, y: torch.Tensor) -> dict[str, torch.Tensor]:
    C = cross_correlation(x, y)
    return {"inv": invariance_loss(C), "red": redundancy_loss(C), "mse": mse_loss(x, y)}


def reconstruction_loss(x: torch.Tensor, y: torch.Tensor, w: LossWeights) -> torch.Tensor:
    t = reconstruction_terms(x, y)
    return w.lambda_inv * t["inv"] + w.lambda_red * t["red"] + w.lambda_mse * t["mse"]


def info_nce(zp: torch.Tensor, zg: torch.Tensor, tau: float) -> torch.Tensor:
    """Symmetric InfoNCE over cosine similarities; row ``i`` of each side is a pair."""
    _same_shape(zp, zg, "info_nce")
    if tau <= 0:
        raise ValueError("tau must be > 0")
    for name, z in (("image", zp), ("gene", zg)):
        if bool((z.norm(dim=1) == 0).any()):
            raise DataError(f"info_nce: zero-norm {name} embedding, cosine undefined")
    logits = F.normalize(zp, dim=1) @ F.normalize(zg, dim=1).T / tau
    i2g = torch.diagonal(F.log_softmax(logits, dim=1))
    g2i = torch.diagonal(F.log_softmax(logits, dim=0))
    return -(i2g + g2i).mean()


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lam, None


def grl(x: torch.Tensor, lam: float) -> torch.Tensor:
    """Identity forward, gradient multiplied by ``-lam`` backward."""
    return _GradReverse.apply(x, float(lam))


class DomainHead(nn.Module):
    """Two-layer classifier predicting study origin from an embedding."""

    def __init__(self, dim: int, n_domains: int, hidden: int = 64, grl_lambda: float = 1.0):
        super().__init__()
        if n_domains < 1:
            raise ConfigError("n_domains must be >= 1")
        self.n_domains = n_domains
        self.grl_lambda = grl_lambda
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, n_domains))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(grl(z, self.grl_lambda))


def domain_loss(head: DomainHead, zp: torch.Tensor, zg: torch.Tensor, domains: torch.Tensor) -> torch.Tensor:
    domains = domains.long()
    if bool(((domains < 0) | (domains >= head.n_domains)).any()):
        raise DataError(f"domain label outside [0, {head.n_domains})")
    logits = head(torch.cat([zp, zg]))
    return F.cross_entropy(logits, torch.cat([domains, domains]))


@dataclass
class Stage2Parts:
    zp: torch.Tensor
    zg: torch.Tensor
    target: torch.Tensor
    recon_img: torch.Tensor
    recon_gene: torch.Tensor
    domains: torch.Tensor
    head: DomainHead
    zp_domain: torch.Tensor | None = None
    zg_domain: torch.Tensor | None = None


def stage2_loss(parts: Stage2Parts, w: LossWeights) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Weighted Stage II objective and its unweighted components.

    ``zp``/``zg`` enter the contrastive term; the domain head sees
    ``zp_domain``/``zg_domain`` when given (encoder outputs before any
    projection), otherwise the same embeddings.
    """
    zp_d = parts.zp if parts.zp_domain is None else parts.zp_domain
    zg_d = parts.zg if parts.zg_domain is None else parts.zg_domain
    breakdown = {
        "infonce": info_nce(parts.zp, parts.zg, w.tau),
        "rec_img": reconstruction_loss(parts.target, parts.recon_img, w),
        "rec_gene": reconstruction_loss(parts.target, parts.recon_gene, w),
        "da": domain_loss(parts.head, zp_d, zg_d, parts.domains),
    }
    total = (
        w.lambda_contrast * breakdown["infonce"]
        + w.lambda_rec_img * breakdown["rec_img"]
        + w.lambda_rec_gene * breakdown["rec_gene"]
        + w.lambda_da * breakdown["da"]
    )
    return total, breakdown


def format_breakdown(step: int, breakdown: dict[str, torch.Tensor | float]) -> list[str]:
    """One ``step<TAB>name<TAB>value`` line per loss component."""
    return [f"{step}\t{k}\t{float(v):.9g}" for k, v in breakdown.items()]
