"""Synthetic paired spot-expression / image-patch datasets.

Each spot carries ``k`` latent factors that vary smoothly over a hexagonal
lattice.  Expression is ``softplus(M z + c)`` scaled to counts with optional
Poisson-like noise; the patch image is a tissue-like rendering whose nuclei
density, size, stain intensity and elongation are driven by the same
factors, with a per-domain color cast on top.
"""
from __future__ import annotations

import json
import math
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .expr_ingest import SpotTable, Stage, build_hex_adjacency, write_sample

SPOT_PITCH_UM = 100.0


@dataclass
class SynthSpec:
    n_samples: int = 3
    spots_per_sample: int = 100
    n_genes: int = 32
    latent_factors: int = 4
    image_size: int = 32
    noise_sigma: float = 1.0
    n_domains: int = 3
    seed: int = 0
    domain_shift: float = 0.12
    count_scale: float = 20.0
    smoothing_rounds: int = 3

    def __post_init__(self):
        if not 1 <= self.latent_factors <= min(self.n_genes, 8):
            raise ConfigError("latent_factors must lie in [1, min(n_genes, 8)]")
        if self.n_samples < 1 or self.spots_per_sample < 1 or self.n_domains < 1:
            raise ConfigError("n_samples, spots_per_sample and n_domains must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    @classmethod
    def bundled(cls, seed: int = 0) -> "SynthSpec":
        """Three samples per domain over three domains, 400 spots, 64 genes, k=4."""
        return cls(n_samples=9, spots_per_sample=400, n_genes=64, latent_factors=4, n_domains=3, seed=seed)


def hex_positions(n: int) -> tuple[np.ndarray, np.ndarray]:
    """First ``n`` positions of a Visium-style lattice (odd rows offset by one column)."""
    width = max(1, math.ceil(math.sqrt(n)))
    rows, cols = [], []
    r = 0
    while len(rows) < n:
        for j in range(width):
            if len(rows) == n:
                break
            rows.append(r)
            cols.append(2 * j + (r % 2))
        r += 1
    return np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64)


def smooth_field(values: np.ndarray, neighbors, rounds: int) -> np.ndarray:
    out = values.copy()
    for _ in range(rounds):
        nxt = out.copy()
        for i, nb in enumerate(neighbors):
            if len(nb):
                nxt[i] = (out[i] + out[nb].mean(axis=0)) / 2
        out = nxt
    out -= out.mean(axis=0)
    sd = out.std(axis=0)
    return out / np.where(sd > 0, sd, 1.0)


def domain_colors(n_domains: int, shift: float, rng: np.random.Generator) -> np.ndarray:
    """Per-domain RGB offsets; domain 0 is the reference (no shift)."""
    offs = rng.normal(size=(n_domains, 3))
    offs /= np.linalg.norm(offs, axis=1, keepdims=True)
    offs *= shift
    offs[0] = 0.0
    return offs


def render_patch(z: np.ndarray, size: int, color_offset: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Render one uint8 ``[size, size, 3]`` patch from latent factors.

    z[0] sets nuclei density, z[1] nuclei size, z[2] stain intensity and
    z[3] elongation; missing factors default to 0.
    """
    zz = np.zeros(4)
    zz[: min(4, len(z))] = z[:4]
    density, radius_f, stain, elong = np.tanh(zz / 1.5)
    area_scale = (size / 32.0) ** 2
    n_nuclei = max(1, int(round((9 + 6 * density) * area_scale)))
    radius = size / 32.0 * 2.2 * math.exp(0.35 * radius_f)
    aspect = math.exp(0.5 * elong)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    centers = rng.uniform(0, size, size=(n_nuclei, 2))
    angles = rng.uniform(0, math.pi, size=n_nuclei)
    mask = np.zeros((size, size))
    for (cy, cx), th in zip(centers, angles):
        dy, dx = yy - cy, xx - cx
        u = dx * math.cos(th) + dy * math.sin(th)
        v = -dx * math.sin(th) + dy * math.cos(th)
        d2 = (u * aspect) ** 2 + (v / aspect) ** 2
        mask = np.maximum(mask, np.exp(-d2 / (2 * radius ** 2)))

    stroma = np.array([0.93, 0.72, 0.80])
    nucleus = np.array([0.35, 0.20, 0.55]) * (1.0 - 0.25 * stain)
    texture = rng.normal(0, 0.03, size=(size, size, 1))
    img = stroma * (1 - mask[..., None]) + nucleus * mask[..., None] + texture + color_offset
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def expression_rates(z: np.ndarray, mixing: np.ndarray, bias: np.ndarray, scale: float) -> np.ndarray:
    return scale * softplus(z @ mixing.T + bias)


def gen_synthetic(spec: SynthSpec, out_dir, force: bool = False) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise DataError(f"{out} exists and is not empty (use force)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(spec.seed)
    k, G = spec.latent_factors, spec.n_genes
    mixing = rng.normal(size=(G, k)) * 1.2 / math.sqrt(k)
    # a quarter of the genes carry no latent signal
    mixing[rng.permutation(G)[: G // 4]] = 0.0
    bias = rng.normal(-0.5, 0.7, size=G)
    colors = domain_colors(spec.n_domains, spec.domain_shift, rng)
    genes = [f"GENE{j:03d}" for j in range(G)]

    np.save(out / "mixing.npy", mixing)
    np.save(out / "gene_bias.npy", bias)
    np.save(out / "domain_colors.npy", colors)
    (out / "synth_spec.json").write_text(json.dumps(asdict(spec), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    for s in range(spec.n_samples):
        sid = f"S{s:03d}"
        domain = s % spec.n_domains
        rows, cols = hex_positions(spec.spots_per_sample)
        n = len(rows)
        xy = np.stack([cols * SPOT_PITCH_UM / 2, rows * SPOT_PITCH_UM * math.sqrt(3) / 2], axis=1)
        placeholder = SpotTable(sid, np.zeros((n, 1)), ["x"], [f"{sid}-{i:05d}" for i in range(n)], rows, cols, xy)
        lattice = build_hex_adjacency(placeholder)
        z = smooth_field(rng.normal(size=(n, k)), lattice.neighbors, spec.smoothing_rounds)
        rates = expression_rates(z, mixing, bias, spec.count_scale)
        if spec.noise_sigma > 0:
            rates = rates + spec.noise_sigma * np.sqrt(rates) * rng.normal(size=rates.shape)
        counts = np.clip(np.round(rates), 0, None)
        table = SpotTable(
            sample_id=sid,
            patient_id=f"P{s:03d}",
            organ="synthetic",
            domain_id=domain,
            values=counts,
            gene_names=genes,
            barcodes=placeholder.barcodes,
            array_row=rows,
            array_col=cols,
            xy_um=xy,
            stage=Stage.RAW_COUNTS,
        )
        sdir = out / sid
        write_sample(table, sdir)
        images = np.stack([render_patch(z[i], spec.image_size, colors[domain], rng) for i in range(n)])
        np.save(sdir / "images.npy", images)
        np.save(sdir / "latents.npy", z)
    return out
