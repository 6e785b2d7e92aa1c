"""Transcriptomics VAE with planar normalizing flows.

The encoder maps a gene vector to a diagonal Gaussian posterior, a sample
``z0 = mu + sigma * eps`` is pushed through ``K`` planar flows
``z' = z + u_hat * tanh(w.z + b)`` and decoded back to the gene panel.
All tensor functions accept leading batch dimensions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, NumericalError

LOG_2PI = math.log(2 * math.pi)
SINGULAR_TOL = 1e-12


@dataclass
class VaeConfig:
    input_dim: int = 2000
    hidden_dims: list[int] = field(default_factory=lambda: [1024])
    latent_dim: int = 64
    n_flows: int = 4
    encoder_dropout: float = 0.0
    decoder_dropout: float = 0.0
    beta_kl: float = 1e-2

    def __post_init__(self):
        self.hidden_dims = [int(h) for h in self.hidden_dims]
        if self.n_flows < 0:
            raise ConfigError("n_flows must be >= 0")
        for name in ("encoder_dropout", "decoder_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.input_dim < 1 or self.latent_dim < 1:
            raise ConfigError("input_dim and latent_dim must be positive")

    @property
    def encoder_dims(self) -> list[int]:
        # the last hidden layer always has the latent width
        dims = [h for h in self.hidden_dims]
        if not dims or dims[-1] != self.latent_dim:
            dims.append(self.latent_dim)
        return dims


@dataclass
class GaussianPosterior:
    mu: torch.Tensor
    log_var: torch.Tensor

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_var)


@dataclass
class FlowResult:
    z_k: torch.Tensor
    sum_log_det: torch.Tensor


@dataclass
class VaeOutput:
    posterior: GaussianPosterior
    h: torch.Tensor
    z0: torch.Tensor
    flow: FlowResult
    recon: torch.Tensor

    @property
    def z(self) -> torch.Tensor:
        return self.flow.z_k


# ------------------------------------------------------------ functional core


def reparameterize(mu: torch.Tensor, log_var: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    return mu + torch.exp(0.5 * log_var) * eps


def constrain_u(u: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Return u_hat with w.u_hat >= -1.

    Feasible pairs pass through untouched; violating pairs are moved along
    w so that w.u_hat = softplus(w.u) - 1.
    """
    wu = (w * u).sum(-1, keepdim=True)
    w_sq = (w * w).sum(-1, keepdim=True)
    violated = (wu < -1) & (w_sq > 0)
    shift = (F.softplus(wu) - 1 - wu) * w / torch.where(w_sq > 0, w_sq, torch.ones_like(w_sq))
    return torch.where(violated, u + shift, u)


def planar_flow_step(
    z: torch.Tensor, u: torch.Tensor, w: torch.Tensor, b: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """One planar flow; ``u`` is constrained internally before use."""
    u_hat = constrain_u(u, w)
    a = z @ w + b
    t = torch.tanh(a)
    z_next = z + t.unsqueeze(-1) * u_hat
    det = 1 + (1 - t ** 2) * (w * u_hat).sum(-1)
    if bool((det.abs() < SINGULAR_TOL).any()):
        raise NumericalError(f"singular planar flow: |1 + u.psi| = {det.abs().min().item():.3e}")
    return z_next, torch.log(det.abs())


def apply_flows(z0: torch.Tensor, flows) -> FlowResult:
    """Compose flows given as an iterable of ``(u, w, b)`` triples."""
    z = z0
    total = torch.zeros(z0.shape[:-1], dtype=z0.dtype, device=z0.device)
    for u, w, b in flows:
        z, ld = planar_flow_step(z, u, w, b)
        total = total + ld
    return FlowResult(z, total)


def kl_standard_normal(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    return -0.5 * (1 + log_var - mu ** 2 - log_var.exp()).sum(-1)


def log_normal_diag(z: torch.Tensor, mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    return -0.5 * (LOG_2PI + log_var + (z - mu) ** 2 / log_var.exp()).sum(-1)


def log_standard_normal(z: torch.Tensor) -> torch.Tensor:
    return -0.5 * (LOG_2PI + z ** 2).sum(-1)


def variational_regularizer(
    posterior: GaussianPosterior, flow: FlowResult | None, z0: torch.Tensor | None, n_flows: int
) -> torch.Tensor:
    """Batch-mean KL term.

    Without flows this is the closed-form KL to N(0, I).  With flows it is
    the single-sample free energy ``log q0(z0) - sum log|det| - log p(z_K)``.
    """
    if n_flows == 0:
        return kl_standard_normal(posterior.mu, posterior.log_var).mean()
    per_row = (
        log_normal_diag(z0, posterior.mu, posterior.log_var)
        - flow.sum_log_det
        - log_standard_normal(flow.z_k)
    )
    return per_row.mean()


# ------------------------------------------------------------ modules


def _mlp(dims: list[int], dropout: float, final_plain: bool) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(nn.Linear(a, b))
        if final_plain and i == len(dims) - 2:
            break
        layers += [nn.BatchNorm1d(b), nn.ReLU()]
        if dropout > 0:
            layers.append(nn.Dropout(dropout))
    return nn.Sequential(*layers)


class PlanarFlows(nn.Module):
    def __init__(self, dim: int, n_flows: int):
        super().__init__()
        self.u = nn.Parameter(torch.randn(n_flows, dim) * 0.01)
        self.w = nn.Parameter(torch.randn(n_flows, dim) * 0.01)
        self.b = nn.Parameter(torch.zeros(n_flows))

    def __len__(self) -> int:
        return self.u.shape[0]

    def triples(self):
        return [(self.u[k], self.w[k], self.b[k]) for k in range(len(self))]

    def forward(self, z0: torch.Tensor) -> FlowResult:
        return apply_flows(z0, self.triples())


class OmicsVAE(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        self.cfg = cfg
        enc = cfg.encoder_dims
        d = cfg.latent_dim
        self.encoder = _mlp([cfg.input_dim] + enc, cfg.encoder_dropout, final_plain=False)
        self.mu_head = nn.Linear(d, d)
        self.log_var_head = nn.Linear(d, d)
        self.flows = PlanarFlows(d, cfg.n_flows)
        self.decoder = _mlp(list(reversed(enc)) + [cfg.input_dim], cfg.decoder_dropout, final_plain=True)

    def _check(self, x: torch.Tensor, width: int, what: str) -> None:
        if x.ndim != 2 or x.shape[1] != width:
            raise ValueError(f"{what}: expected [batch, {width}], got {tuple(x.shape)}")

    def encode(self, x: torch.Tensor) -> tuple[GaussianPosterior, torch.Tensor]:
        self._check(x, self.cfg.input_dim, "encode")
        h = self.encoder(x)
        return GaussianPosterior(self.mu_head(h), self.log_var_head(h)), h

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        self._check(z, self.cfg.latent_dim, "decode")
        return self.decoder(z)

    def forward(
        self,
        x: torch.Tensor,
        eps: torch.Tensor | None = None,
        generator: torch.Generator | None = None,
    ) -> VaeOutput:
        """Full pass.  Without ``eps``, training mode samples noise and
        eval mode uses the posterior mean."""
        post, h = self.encode(x)
        if eps is None:
            if self.training:
                eps = torch.randn(post.mu.shape, generator=generator, dtype=post.mu.dtype)
            else:
                eps = torch.zeros_like(post.mu)
        z0 = reparameterize(post.mu, post.log_var, eps)
        flow = self.flows(z0)
        return VaeOutput(post, h, z0, flow, self.decode(flow.z_k))

    def regularizer(self, out: VaeOutput) -> torch.Tensor:
        return variational_regularizer(out.posterior, out.flow, out.z0, self.cfg.n_flows)

    @torch.no_grad()
    def embed(self, x: torch.Tensor, batch_size: int = 1024) -> torch.Tensor:
        """Deterministic embeddings (posterior mean pushed through the flows)."""
        was = self.training
        self.eval()
        try:
            parts = [self(x[i:i + batch_size]).z for i in range(0, len(x), batch_size)]
        finally:
            self.train(was)
        return torch.cat(parts) if parts else torch.zeros(0, self.cfg.latent_dim)
