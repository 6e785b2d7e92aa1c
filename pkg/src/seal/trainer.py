"""Stage I (omics warm-up) and Stage II (contrastive alignment) training loops."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .augment import AugmentConfig, augment
from .checkpoint import (
    CheckpointState,
    arrays_with_prefix,
    digest_arrays,
    numpy_rng_state,
    state_dict_arrays,
    torch_rng_state,
)
from .errors import ConfigError, DataError, NumericalError
from .objectives import DomainHead, LossWeights, Stage2Parts, reconstruction_loss, reconstruction_terms, stage2_loss
from .omics_vae import OmicsVAE, VaeConfig
from .vision_lora import (
    AdapterPlan,
    AuxProjection,
    GeneDecoderHead,
    ToyViT,
    ToyVitConfig,
    adapter_block_index,
    adapter_state,
    attach_adapters,
    backbone_state,
)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "loss_total", "loss_infonce", "loss_rec_img", "loss_rec_gene", "loss_da", "lr")


@dataclass
class TrainConfig:
    batch_size: int = 384
    warmup_epochs: int = 3
    stage2_epochs: int = 10
    lr_stage1: float = 5e-4
    lr_image: float = 1e-4
    lr_omics: float = 1e-4
    weight_decay: float = 0.2
    layer_decay: float = 0.7
    grad_clip: float = 5.0
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    channel_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    channel_std: tuple[float, float, float] = (0.25, 0.25, 0.25)
    projection: str = "linear"
    head_hidden: int = 256

    def __post_init__(self):
        for name in ("lr_stage1", "lr_image", "lr_omics"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if not 0 < self.layer_decay <= 1:
            raise ConfigError("layer_decay must lie in (0, 1]")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm)")


def cosine_anneal(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0:
        return lr0
    return lr0 * 0.5 * (1 + math.cos(math.pi * min(step, total_steps) / total_steps))


def _batches(n: int, batch_size: int, gen: torch.Generator) -> list[torch.Tensor]:
    perm = torch.randperm(n, generator=gen)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    # batch norm cannot train on a single row
    return [b for b in out if len(b) > 1]


def _check_finite(value: torch.Tensor, where: str, terms: dict) -> None:
    if not torch.isfinite(value):
        detail = ", ".join(f"{k}={float(v):.4g}" for k, v in terms.items())
        raise NumericalError(f"non-finite loss at {where}: {detail}")


def format_log_row(row: dict) -> str:
    parts = []
    for c in LOG_COLUMNS:
        v = row.get(c, 0.0)
        parts.append(str(v) if c in ("epoch", "step") else f"{float(v):.9g}")
    return "\t".join(parts)


def write_log(rows: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(LOG_COLUMNS) + "\n")
        for r in rows:
            fh.write(format_log_row(r) + "\n")


def as_matrix(data) -> np.ndarray:
    """Stack SpotTables (or pass through a matrix) into ``[N, G]`` float32."""
    if isinstance(data, np.ndarray):
        X = data
    else:
        tables = list(data)
        if not tables:
            raise DataError("empty dataset")
        X = np.vstack([t.values for t in tables])
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("empty dataset")
    return X


# ------------------------------------------------------------------ Stage I


@dataclass
class Stage1Result:
    model: OmicsVAE
    vae_cfg: VaeConfig
    cfg: TrainConfig
    log: list[dict]
    epoch_loss: list[float]
    generator: torch.Generator

    def checkpoint(self) -> CheckpointState:
        return CheckpointState(
            arrays=state_dict_arrays("omics", self.model.state_dict()),
            config={"vae": asdict(self.vae_cfg), "train": asdict(self.cfg)},
            rng={"torch": torch_rng_state(self.generator)},
            meta={"stage": 1, "epoch_loss": self.epoch_loss},
        )


def train_stage1(data, vae_cfg: VaeConfig, cfg: TrainConfig, epochs: int | None = None) -> Stage1Result:
    """Warm up the omics VAE on reconstruction plus the variational term."""
    X = torch.from_numpy(as_matrix(data))
    if X.shape[1] != vae_cfg.input_dim:
        raise DataError(f"data has {X.shape[1]} genes, VAE expects {vae_cfg.input_dim}")
    epochs = cfg.warmup_epochs if epochs is None else epochs
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = OmicsVAE(vae_cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_stage1)
    steps_per_epoch = len(_batches(len(X), cfg.batch_size, torch.Generator().manual_seed(0)))
    if steps_per_epoch == 0:
        raise DataError("dataset too small for one training batch")
    total = steps_per_epoch * epochs
    rows, epoch_loss, step = [], [], 0
    # dropout draws from the global generator; pin it for reproducibility
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed + 10)
        model.train()
        for epoch in range(epochs):
            losses = []
            for idx in _batches(len(X), cfg.batch_size, gen):
                lr = cosine_anneal(step, total, cfg.lr_stage1)
                for g in opt.param_groups:
                    g["lr"] = lr
                xb = X[idx]
                out = model(xb, generator=gen)
                rec = reconstruction_loss(xb, out.recon, cfg.weights)
                reg = model.regularizer(out)
                loss = rec + vae_cfg.beta_kl * reg
                _check_finite(loss, f"stage1 epoch {epoch} step {step}", {"rec": rec, "reg": reg})
                opt.zero_grad()
                loss.backward()
                if cfg.grad_clip > 0:
                    nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                opt.step()
                rows.append({"epoch": epoch, "step": step, "loss_total": loss.item(),
                             "loss_rec_gene": rec.item(), "lr": lr})
                losses.append(loss.item())
                step += 1
            epoch_loss.append(float(np.mean(losses)))
            log.info("stage1 epoch %d mean loss %.4f", epoch, epoch_loss[-1])
    model.eval()
    return Stage1Result(model, vae_cfg, cfg, rows, epoch_loss, gen)


@torch.no_grad()
def evaluate_reconstruction(model: OmicsVAE, data, w: LossWeights) -> float:
    """Deterministic reconstruction loss of the whole dataset in eval mode."""
    X = torch.from_numpy(as_matrix(data))
    was = model.training
    model.eval()
    try:
        return float(reconstruction_loss(X, model(X).recon, w))
    finally:
        model.train(was)


def vae_from_checkpoint(state: CheckpointState) -> OmicsVAE:
    vcfg = VaeConfig(**state.config["vae"])
    model = OmicsVAE(vcfg)
    model.load_state_dict(arrays_with_prefix(state.arrays, "omics"))
    model.eval()
    return model


# ------------------------------------------------------------------ Stage II


class SealModel(nn.Module):
    """Everything trained in Stage II."""

    def __init__(self, vit: ToyViT, vae: OmicsVAE, n_domains: int, cfg: TrainConfig):
        super().__init__()
        d = vit.width
        if vae.cfg.latent_dim != d:
            raise ConfigError(f"omics latent width {vae.cfg.latent_dim} != image width {d}")
        self.vit = vit
        self.vae = vae
        self.gene_head = GeneDecoderHead(d, vae.cfg.input_dim, cfg.head_hidden)
        self.proj_img = AuxProjection(d, cfg.projection)
        self.proj_gene = AuxProjection(d, cfg.projection)
        self.domain_head = DomainHead(d, n_domains)


def prepare_images(images: np.ndarray, cfg: TrainConfig, rng: np.random.Generator | None = None) -> torch.Tensor:
    """uint8 ``[B, H, W, 3]`` -> normalized float32 ``[B, 3, H, W]``, augmenting when ``rng`` is given."""
    imgs = np.asarray(images, dtype=np.float64) / 255.0
    if rng is not None:
        imgs = np.stack([augment(im, cfg.augmentation, rng) for im in imgs])
    imgs = (imgs - np.asarray(cfg.channel_mean)) / np.asarray(cfg.channel_std)
    return torch.from_numpy(np.ascontiguousarray(imgs.transpose(0, 3, 1, 2), dtype=np.float32))


@torch.no_grad()
def embed_images(vit: ToyViT, images: np.ndarray, cfg: TrainConfig, batch_size: int = 256) -> np.ndarray:
    was = vit.training
    vit.eval()
    try:
        out = [vit(prepare_images(images[i:i + batch_size], cfg)).numpy()
               for i in range(0, len(images), batch_size)]
    finally:
        vit.train(was)
    return np.concatenate(out) if out else np.zeros((0, vit.width), dtype=np.float32)


def frozen_digest(vit: ToyViT) -> str:
    return digest_arrays(backbone_state(vit))


def _param_groups(model: SealModel, cfg: TrainConfig) -> list[dict]:
    depth = len(model.vit.blocks)
    top = depth - 1
    by_block: dict[int, list] = {}
    for name, p in model.vit.named_parameters():
        if not p.requires_grad:
            continue
        bi = adapter_block_index(name)
        by_block.setdefault(top if bi is None else bi, []).append(p)
    groups = [
        {"params": ps, "base_lr": cfg.lr_image * cfg.layer_decay ** (top - bi), "name": f"block{bi}"}
        for bi, ps in sorted(by_block.items())
    ]
    heads = [p for m in (model.gene_head, model.proj_img, model.domain_head) for p in m.parameters()]
    groups.append({"params": heads, "base_lr": cfg.lr_image, "name": "image_heads"})
    omics = list(model.vae.parameters()) + list(model.proj_gene.parameters())
    groups.append({"params": omics, "base_lr": cfg.lr_omics, "name": "omics"})
    for g in groups:
        g["lr"] = g["base_lr"]
    return [g for g in groups if g["params"]]


@dataclass
class Stage2Result:
    model: SealModel
    plan: AdapterPlan
    vit_cfg: ToyVitConfig
    cfg: TrainConfig
    log: list[dict]
    epoch_loss: list[float]
    frozen_digest_before: str
    frozen_digest_after: str
    generator: torch.Generator
    aug_rng: np.random.Generator

    def checkpoint(self) -> CheckpointState:
        m = self.model
        arrays = {}
        arrays.update(state_dict_arrays("backbone", backbone_state(m.vit)))
        arrays.update(state_dict_arrays("adapters", adapter_state(m.vit)))
        arrays.update(state_dict_arrays("omics", m.vae.state_dict()))
        for name in ("gene_head", "proj_img", "proj_gene", "domain_head"):
            arrays.update(state_dict_arrays(f"heads/{name}", getattr(m, name).state_dict()))
        return CheckpointState(
            arrays=arrays,
            config={
                "vae": asdict(m.vae.cfg),
                "vit": asdict(self.vit_cfg),
                "plan": asdict(self.plan),
                "train": asdict(self.cfg),
                "n_domains": m.domain_head.n_domains,
            },
            rng={"torch": torch_rng_state(self.generator), "numpy": numpy_rng_state(self.aug_rng)},
            meta={"stage": 2, "epoch_loss": self.epoch_loss, "frozen_digest": self.frozen_digest_after},
        )


def train_stage2(
    images: np.ndarray,
    genes,
    domains: np.ndarray,
    vae: OmicsVAE,
    vit_cfg: ToyVitConfig,
    plan: AdapterPlan,
    cfg: TrainConfig,
    n_domains: int | None = None,
    epochs: int | None = None,
    backbone: ToyViT | None = None,
) -> Stage2Result:
    """Align a LoRA-adapted image encoder with the pretrained omics VAE.

    ``images`` is uint8 ``[N, H, W, 3]`` matched row-for-row with ``genes``
    ``[N, G]`` and integer ``domains`` ``[N]``.
    """
    X = torch.from_numpy(as_matrix(genes))
    domains = np.asarray(domains, dtype=np.int64)
    if not (len(images) == len(X) == len(domains)):
        raise DataError(f"modality size mismatch: {len(images)} images, {len(X)} gene rows, {len(domains)} domains")
    n_domains = int(domains.max()) + 1 if n_domains is None else n_domains
    epochs = cfg.stage2_epochs if epochs is None else epochs

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed + 1)
        vit = backbone if backbone is not None else ToyViT(vit_cfg)
        before = frozen_digest(vit)
        attach_adapters(vit, plan)
        model = SealModel(vit, copy.deepcopy(vae), n_domains, cfg)
    for p in model.vae.parameters():
        p.requires_grad_(True)

    gen = torch.Generator().manual_seed(cfg.seed)
    aug_rng = np.random.default_rng(cfg.seed)
    groups = _param_groups(model, cfg)
    opt = torch.optim.AdamW(groups, weight_decay=cfg.weight_decay)
    trainable = [p for g in groups for p in g["params"]]
    dom_t = torch.from_numpy(domains)

    steps_per_epoch = len(_batches(len(X), cfg.batch_size, torch.Generator().manual_seed(0)))
    if steps_per_epoch == 0:
        raise DataError("dataset too small for one training batch")
    total = steps_per_epoch * epochs
    rows, epoch_loss, step = [], [], 0
    # dropout draws from the global generator; pin it for reproducibility
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed + 20)
        model.train()
        for epoch in range(epochs):
            losses = []
            for idx in _batches(len(X), cfg.batch_size, gen):
                factor = cosine_anneal(step, total, 1.0)
                for g in opt.param_groups:
                    g["lr"] = g["base_lr"] * factor
                ib = idx.numpy()
                xb = X[idx]
                img = prepare_images(images[ib], cfg, aug_rng)
                zp_raw = model.vit(img)
                out = model.vae(xb, generator=gen)
                zg_raw = out.z
                parts = Stage2Parts(
                    zp=model.proj_img(zp_raw),
                    zg=model.proj_gene(zg_raw),
                    target=xb,
                    recon_img=model.gene_head(zp_raw),
                    recon_gene=out.recon,
                    domains=dom_t[idx],
                    head=model.domain_head,
                    zp_domain=zp_raw,
                    zg_domain=zg_raw,
                )
                loss, terms = stage2_loss(parts, cfg.weights)
                _check_finite(loss, f"stage2 epoch {epoch} step {step}", terms)
                opt.zero_grad()
                loss.backward()
                if cfg.grad_clip > 0:
                    nn.utils.clip_grad_norm_(trainable, cfg.grad_clip)
                opt.step()
                rows.append({
                    "epoch": epoch, "step": step, "loss_total": loss.item(),
                    "loss_infonce": terms["infonce"].item(), "loss_rec_img": terms["rec_img"].item(),
                    "loss_rec_gene": terms["rec_gene"].item(), "loss_da": terms["da"].item(),
                    "lr": cfg.lr_image * factor,
                })
                losses.append(loss.item())
                step += 1
            epoch_loss.append(float(np.mean(losses)))
            log.info("stage2 epoch %d mean loss %.4f", epoch, epoch_loss[-1])
    model.eval()
    after = frozen_digest(vit)
    return Stage2Result(model, plan, vit_cfg, cfg, rows, epoch_loss, before, after, gen, aug_rng)


def seal_model_from_checkpoint(state: CheckpointState) -> SealModel:
    c = state.config
    train_cfg = train_config_from_dict(c["train"])
    vit = ToyViT(ToyVitConfig(**c["vit"]))
    vit.load_state_dict(arrays_with_prefix(state.arrays, "backbone"))
    attach_adapters(vit, AdapterPlan(**c["plan"]))
    vit.load_state_dict(arrays_with_prefix(state.arrays, "adapters"), strict=False)
    vae = OmicsVAE(VaeConfig(**c["vae"]))
    vae.load_state_dict(arrays_with_prefix(state.arrays, "omics"))
    model = SealModel(vit, vae, int(c["n_domains"]), train_cfg)
    for name in ("gene_head", "proj_img", "proj_gene", "domain_head"):
        getattr(model, name).load_state_dict(arrays_with_prefix(state.arrays, f"heads/{name}"))
    model.eval()
    return model


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["weights"] = LossWeights(**d.get("weights", {}))
    d["augmentation"] = AugmentConfig(**d.get("augmentation", {}))
    for k in ("channel_mean", "channel_std"):
        if k in d:
            d[k] = tuple(d[k])
    return TrainConfig(**d)
