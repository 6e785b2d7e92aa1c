"""Frozen-embedding evaluation: linear probing, MIL pooling and retrieval."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.stats import rankdata
from torch import nn

from .errors import DataError, NumericalError


class DegenerateMetricWarning(UserWarning):
    """A correlation was requested on a constant input and defined as 0."""


# ------------------------------------------------------------------ PCA


@dataclass
class PCAProjection:
    mean: np.ndarray
    components: np.ndarray  # [c, d], orthonormal rows
    explained_variance: np.ndarray

    @property
    def n_components(self) -> int:
        return self.components.shape[0]


def pca_fit(X: np.ndarray, n_components: int) -> PCAProjection:
    """PCA via eigendecomposition of the sample covariance.

    Each component is signed so its largest-magnitude loading is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n_components < 1 or n_components > min(n, d):
        raise DataError(f"n_components={n_components} must lie in [1, min(N, d)={min(n, d)}]")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / max(n - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:n_components]
    comps = evecs[:, order].T
    pivot = np.abs(comps).argmax(axis=1)
    signs = np.sign(comps[np.arange(len(comps)), pivot])
    comps = comps * np.where(signs == 0, 1.0, signs)[:, None]
    return PCAProjection(mean, comps, np.clip(evals[order], 0.0, None))


def pca_transform(X: np.ndarray, proj: PCAProjection) -> np.ndarray:
    return (np.asarray(X, dtype=np.float64) - proj.mean) @ proj.components.T


# ------------------------------------------------------------------ ridge


@dataclass
class RidgeWeights:
    coef: np.ndarray  # [c, G]
    intercept: np.ndarray  # [G]


def ridge_fit(Z: np.ndarray, Y: np.ndarray, alpha: float = 1.0) -> RidgeWeights:
    """Closed-form ridge with an unpenalized intercept."""
    if alpha < 0:
        raise DataError("alpha must be >= 0")
    Z = np.asarray(Z, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    squeeze = Y.ndim == 1
    if squeeze:
        Y = Y[:, None]
    if len(Z) != len(Y):
        raise DataError(f"Z has {len(Z)} rows, Y has {len(Y)}")
    A = np.hstack([Z, np.ones((len(Z), 1))])
    penalty = np.full(A.shape[1], float(alpha))
    penalty[-1] = 0.0
    lhs = A.T @ A + np.diag(penalty)
    if np.linalg.matrix_rank(lhs) < lhs.shape[0]:
        raise NumericalError("ridge system is singular (rank-deficient design with alpha=0?)")
    W = np.linalg.solve(lhs, A.T @ Y)
    coef, intercept = W[:-1], W[-1]
    if squeeze:
        coef, intercept = coef[:, 0], intercept[0]
    return RidgeWeights(coef, intercept)


def ridge_predict(Z: np.ndarray, w: RidgeWeights) -> np.ndarray:
    return np.asarray(Z, dtype=np.float64) @ w.coef + w.intercept


# ------------------------------------------------------------------ metrics


def metric_pcc(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    da, db = a - a.mean(), b - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0:
        warnings.warn("correlation of a constant input defined as 0", DegenerateMetricWarning, stacklevel=2)
        return 0.0
    return float(np.clip((da * db).sum() / denom, -1.0, 1.0))


def metric_spearman(a: np.ndarray, b: np.ndarray) -> float:
    return metric_pcc(rankdata(np.ravel(a)), rankdata(np.ravel(b)))


def metric_mse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(((a - b) ** 2).mean())


def metric_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """ROC AUC as the Mann-Whitney statistic; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


# ------------------------------------------------------------------ probe


@dataclass
class ProbeResult:
    genes: list[str]
    pcc: np.ndarray  # [k, G] per fold and gene
    mse: np.ndarray
    spearman: np.ndarray
    folds: np.ndarray  # fold id per sample
    n_degenerate: int = 0

    def per_gene(self, metric: str) -> tuple[np.ndarray, np.ndarray]:
        m = getattr(self, metric)
        return m.mean(axis=0), m.std(axis=0)

    @property
    def summary(self) -> dict[str, tuple[float, float]]:
        """Mean and sd across genes of the fold-averaged per-gene metric."""
        out = {}
        for name in ("pcc", "mse", "spearman"):
            per_gene = getattr(self, name).mean(axis=0)
            out[name] = (float(per_gene.mean()), float(per_gene.std()))
        return out

    @property
    def mean_pcc(self) -> float:
        return self.summary["pcc"][0]

    def write_tsv(self, path) -> None:
        cols = ("pcc", "mse", "spearman")
        stats = {c: self.per_gene(c) for c in cols}
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("gene\tpcc_mean\tpcc_sd\tmse_mean\tmse_sd\tspearman_mean\tspearman_sd\n")
            for j, g in enumerate(self.genes):
                vals = "\t".join(f"{stats[c][0][j]:.6g}\t{stats[c][1][j]:.6g}" for c in cols)
                fh.write(f"{g}\t{vals}\n")


def kfold_probe(
    embeddings: np.ndarray,
    targets: np.ndarray,
    k: int = 5,
    n_components: int = 256,
    alpha: float = 1.0,
    seed: int = 0,
    genes: Sequence[str] | None = None,
) -> ProbeResult:
    """PCA + ridge probe scored per gene on held-out folds.

    PCA keeps ``min(n_components, d, n_train)`` components, fitted on each
    training fold, and the components are z-scored before the ridge fit.
    """
    E = np.asarray(embeddings, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    n, G = Y.shape
    if len(E) != n:
        raise DataError(f"{len(E)} embeddings for {n} targets")
    if k < 2 or k > n:
        raise DataError(f"k={k} must lie in [2, N={n}]")
    genes = list(genes) if genes is not None else [f"g{j}" for j in range(G)]
    rng = np.random.default_rng(seed)
    folds = np.empty(n, dtype=np.int64)
    for f, part in enumerate(np.array_split(rng.permutation(n), k)):
        folds[part] = f

    pcc = np.zeros((k, G))
    mse = np.zeros((k, G))
    spr = np.zeros((k, G))
    degenerate = 0
    for f in range(k):
        tr, te = folds != f, folds == f
        c = min(n_components, E.shape[1], int(tr.sum()))
        proj = pca_fit(E[tr], c)
        Ztr, Zte = pca_transform(E[tr], proj), pca_transform(E[te], proj)
        sd = Ztr.std(axis=0)
        sd[sd == 0] = 1.0
        w = ridge_fit(Ztr / sd, Y[tr], alpha)
        pred = ridge_predict(Zte / sd, w)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", DegenerateMetricWarning)
            for j in range(G):
                pcc[f, j] = metric_pcc(pred[:, j], Y[te, j])
                spr[f, j] = metric_spearman(pred[:, j], Y[te, j])
                mse[f, j] = metric_mse(pred[:, j], Y[te, j])
        degenerate += sum(issubclass(c.category, DegenerateMetricWarning) for c in caught)
    return ProbeResult(genes, pcc, mse, spr, folds, degenerate)


# ------------------------------------------------------------------ MIL


def mean_pool(bag: np.ndarray) -> np.ndarray:
    bag = np.asarray(bag)
    if bag.ndim != 2 or len(bag) == 0:
        raise DataError("bag must be a non-empty [M, d] matrix")
    return bag.mean(axis=0)


class AttentionPool(nn.Module):
    """Gated attention pooling: ``a = softmax(w . (tanh(V h) * sigmoid(U h)))``."""

    def __init__(self, dim: int, hidden: int = 128):
        super().__init__()
        self.V = nn.Linear(dim, hidden)
        self.U = nn.Linear(dim, hidden)
        self.w = nn.Linear(hidden, 1)

    def scores(self, bag: torch.Tensor) -> torch.Tensor:
        logits = self.w(torch.tanh(self.V(bag)) * torch.sigmoid(self.U(bag))).squeeze(-1)
        return torch.softmax(logits, dim=-1)

    def forward(self, bag: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if bag.shape[-2] == 0:
            raise DataError("empty bag")
        a = self.scores(bag)
        return (a.unsqueeze(-1) * bag).sum(dim=-2), a


def abmil_pool(bag, params: AttentionPool) -> tuple[np.ndarray, np.ndarray]:
    t = torch.as_tensor(np.asarray(bag), dtype=next(params.parameters()).dtype)
    if t.ndim != 2 or t.shape[0] == 0:
        raise DataError("bag must be a non-empty [M, d] matrix")
    with torch.no_grad():
        emb, a = params(t)
    return emb.numpy(), a.numpy()


# ------------------------------------------------------------------ retrieval


def cosine_similarity(query: np.ndarray, refs: np.ndarray) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    R = np.asarray(refs, dtype=np.float64)
    qn = np.linalg.norm(q, axis=-1, keepdims=True)
    rn = np.linalg.norm(R, axis=-1)
    if np.any(qn == 0) or np.any(rn == 0):
        raise DataError("zero-norm embedding: cosine similarity undefined")
    return (q / qn) @ (R / rn[:, None]).T


def i2g_retrieve(
    query: np.ndarray,
    ref_embeddings: np.ndarray,
    ref_panels: np.ndarray,
    K: int = 50,
    clamp_negative: bool = False,
) -> np.ndarray:
    """Similarity-weighted average of the top-K reference gene panels.

    Works for a single query ``[d]`` or a batch ``[Q, d]``.
    """
    R = np.asarray(ref_embeddings, dtype=np.float64)
    P = np.asarray(ref_panels, dtype=np.float64)
    if len(R) == 0:
        raise DataError("empty reference set")
    if len(R) != len(P):
        raise DataError("reference embeddings and panels differ in length")
    if K < 1 or K > len(R):
        raise DataError(f"K={K} must lie in [1, {len(R)}]")
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    S = np.atleast_2d(cosine_similarity(np.atleast_2d(q), R))
    out = np.empty((S.shape[0], P.shape[1]))
    for i, s in enumerate(S):
        top = np.argsort(-s, kind="stable")[:K]
        wts = np.clip(s[top], 0.0, None) if clamp_negative else s[top]
        total = wts.sum()
        if abs(total) < 1e-12:
            raise NumericalError("similarity weights sum to ~0")
        out[i] = (wts / total) @ P[top]
    return out[0] if single else out


@dataclass
class MolecularQuery:
    active_genes: list[str]
    expanded_genes: list[str]
    query_vector: np.ndarray
    query_embedding: np.ndarray
    kept_spots: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def expand_active_genes(X: np.ndarray, genes: Sequence[str], active: Sequence[str], threshold: float = 0.3) -> list[str]:
    """Actives plus every gene whose PCC with any active gene exceeds ``threshold``."""
    pos = {g: j for j, g in enumerate(genes)}
    act = [pos[g] for g in active]
    Xc = X - X.mean(axis=0)
    norms = np.sqrt((Xc ** 2).sum(axis=0))
    safe = np.where(norms == 0, 1.0, norms)
    corr = (Xc.T @ Xc[:, act]) / (safe[:, None] * safe[act][None, :])
    corr[norms == 0] = 0.0
    corr[:, norms[act] == 0] = 0.0
    chosen = (corr > threshold).any(axis=1)
    chosen[act] = True
    return [g for j, g in enumerate(genes) if chosen[j]]


def g2i_build_query(
    active: Sequence[str],
    train_table,
    omics_encoder: Callable[[np.ndarray], np.ndarray] | np.ndarray,
    pcc_threshold: float = 0.3,
    percentile: float = 75.0,
    min_fraction: float = 0.5,
) -> MolecularQuery:
    """Build a molecular query from a set of active genes.

    ``omics_encoder`` is either a callable mapping the expression matrix to
    embeddings or a precomputed ``[N, d]`` embedding matrix.
    """
    genes = list(train_table.gene_names)
    missing = [g for g in active if g not in genes]
    if missing:
        raise DataError(f"active genes not in panel: {missing}")
    X = np.asarray(train_table.values, dtype=np.float64)
    expanded = expand_active_genes(X, genes, active, pcc_threshold)
    cols = [genes.index(g) for g in expanded]
    thresh = np.percentile(X[:, cols], percentile, axis=0)
    frac = (X[:, cols] > thresh).mean(axis=1)
    keep = np.flatnonzero(frac >= min_fraction)
    if len(keep) == 0:
        raise DataError("no spot passes the expression filter")
    emb = omics_encoder(X) if callable(omics_encoder) else np.asarray(omics_encoder)
    emb = np.asarray(emb, dtype=np.float64)
    if len(emb) != len(X):
        raise DataError(f"{len(emb)} embeddings for {len(X)} spots")
    return MolecularQuery(list(active), expanded, X[keep].mean(axis=0), emb[keep].mean(axis=0), keep)


def g2i_similarity_map(
    query: MolecularQuery,
    patch_embeddings: np.ndarray,
    coords: np.ndarray,
    tsv_path=None,
    png_path=None,
) -> np.ndarray:
    """Cosine score of every patch against the query embedding."""
    scores = cosine_similarity(query.query_embedding, patch_embeddings)
    coords = np.asarray(coords, dtype=np.float64)
    if len(coords) != len(scores):
        raise DataError("coords and embeddings differ in length")
    if tsv_path is not None:
        with open(tsv_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("x\ty\tscore\n")
            for (x, y), s in zip(coords, scores):
                fh.write(f"{x:.6g}\t{y:.6g}\t{s:.6g}\n")
    if png_path is not None:
        write_heatmap(coords, scores, png_path)
    return scores


def rasterize(coords: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Place values on a grid indexed by the distinct x and y coordinates; gaps are NaN."""
    xs = np.unique(coords[:, 0])
    ys = np.unique(coords[:, 1])
    grid = np.full((len(ys), len(xs)), np.nan)
    grid[np.searchsorted(ys, coords[:, 1]), np.searchsorted(xs, coords[:, 0])] = values
    return grid


def write_heatmap(coords: np.ndarray, values: np.ndarray, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    grid = rasterize(np.asarray(coords, dtype=np.float64), np.asarray(values))
    plt.imsave(Path(path), np.ma.masked_invalid(grid), cmap="magma", vmin=-1, vmax=1)
