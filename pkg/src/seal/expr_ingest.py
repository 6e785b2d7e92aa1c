"""Spot-expression ingestion and preprocessing.

Sample directories hold three tab-separated files:

* ``genes.tsv``  one gene name per line
* ``spots.tsv``  header line, then ``barcode array_row array_col x_um y_um``
* ``counts.tsv`` sparse ``spot_index gene_index count`` triplets, 0-based

An optional ``meta.json`` supplies ``sample_id``, ``patient_id``, ``organ``
and ``domain_id``.  Every operation here is pure: it returns a new
:class:`SpotTable` and never mutates its input.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

NEIGHBOR_OFFSETS = ((0, -2), (0, 2), (-1, -1), (-1, 1), (1, -1), (1, 1))
SPLITS = ("train", "val", "test")


class Stage(IntEnum):
    RAW_COUNTS = 0
    NORMALIZED = 1
    LOGGED = 2
    SMOOTHED = 3


@dataclass
class SpotTable:
    sample_id: str
    values: np.ndarray
    gene_names: list[str]
    barcodes: list[str]
    array_row: np.ndarray
    array_col: np.ndarray
    xy_um: np.ndarray
    patient_id: str = ""
    organ: str = "unknown"
    domain_id: int = 0
    stage: Stage = Stage.RAW_COUNTS

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.array_row = np.asarray(self.array_row, dtype=np.int64)
        self.array_col = np.asarray(self.array_col, dtype=np.int64)
        self.xy_um = np.asarray(self.xy_um, dtype=np.float64).reshape(-1, 2)
        self.gene_names = list(self.gene_names)
        self.barcodes = list(self.barcodes)
        if not self.patient_id:
            self.patient_id = self.sample_id
        self.stage = Stage(self.stage)
        self.validate()

    @property
    def n_spots(self) -> int:
        return self.values.shape[0]

    @property
    def n_genes(self) -> int:
        return self.values.shape[1]

    def validate(self) -> None:
        n, g = self.values.shape if self.values.ndim == 2 else (-1, -1)
        if self.values.ndim != 2:
            raise DataError(f"{self.sample_id}: values must be 2-D")
        if len(self.barcodes) != n:
            raise DataError(f"{self.sample_id}: {len(self.barcodes)} barcodes for {n} spots")
        if len(self.gene_names) != g:
            raise DataError(f"{self.sample_id}: {len(self.gene_names)} gene names for {g} genes")
        if len(set(self.barcodes)) != n:
            dup = next(b for b, c in Counter(self.barcodes).items() if c > 1)
            raise DataError(f"{self.sample_id}: duplicate barcode {dup!r}")
        if not (len(self.array_row) == len(self.array_col) == len(self.xy_um) == n):
            raise DataError(f"{self.sample_id}: coordinate arrays do not match spot count")
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"{self.sample_id}: non-finite expression values")
        if self.stage == Stage.RAW_COUNTS:
            if np.any(self.values < 0) or np.any(self.values != np.round(self.values)):
                raise DataError(f"{self.sample_id}: raw counts must be non-negative integers")

    def with_values(self, values: np.ndarray, stage: Stage | None = None, **changes) -> "SpotTable":
        return replace(self, values=values, stage=self.stage if stage is None else stage, **changes)

    def take_spots(self, mask_or_index) -> "SpotTable":
        idx = np.arange(self.n_spots)[mask_or_index]
        return replace(
            self,
            values=self.values[idx],
            barcodes=[self.barcodes[i] for i in idx],
            array_row=self.array_row[idx],
            array_col=self.array_col[idx],
            xy_um=self.xy_um[idx],
        )

    def take_genes(self, genes: Sequence[str]) -> "SpotTable":
        pos = {g: i for i, g in enumerate(self.gene_names)}
        missing = [g for g in genes if g not in pos]
        if missing:
            raise DataError(f"{self.sample_id}: genes not in panel: {missing[:5]}")
        cols = [pos[g] for g in genes]
        return replace(self, values=self.values[:, cols], gene_names=list(genes))


@dataclass
class GenePanel:
    genes: list[str]
    provenance: list[str]
    target_size: int = 0

    def __post_init__(self):
        if len(set(self.genes)) != len(self.genes):
            raise DataError("gene panel contains duplicates")
        if len(self.provenance) != len(self.genes):
            raise DataError("provenance length does not match panel")
        if not self.target_size:
            self.target_size = len(self.genes)

    def __len__(self) -> int:
        return len(self.genes)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for g, p in zip(self.genes, self.provenance):
                fh.write(f"{g}\t{p}\n")

    @classmethod
    def read(cls, path) -> "GenePanel":
        genes, prov = [], []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or parts[1] not in ("hvg", "supplement"):
                raise DataError(f"malformed panel line: {line!r}")
            genes.append(parts[0])
            prov.append(parts[1])
        return cls(genes, prov)


@dataclass
class HexLattice:
    neighbors: list[np.ndarray]
    source_sample: str = ""

    def __len__(self) -> int:
        return len(self.neighbors)

    def padded(self) -> tuple[np.ndarray, np.ndarray]:
        """Neighbor indices padded to width 6 with ``-1`` plus per-spot counts."""
        n = len(self.neighbors)
        idx = np.full((n, 6), -1, dtype=np.int64)
        counts = np.zeros(n, dtype=np.int64)
        for i, nb in enumerate(self.neighbors):
            idx[i, : len(nb)] = nb
            counts[i] = len(nb)
        return idx, counts


@dataclass
class SplitManifest:
    assignments: dict[str, str]
    ratios: tuple[float, float, float]
    stratify_key: str = "organ"

    def split_of(self, patient_id: str) -> str:
        return self.assignments[patient_id]

    def patients(self, split: str) -> list[str]:
        return sorted(p for p, s in self.assignments.items() if s == split)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for pid in sorted(self.assignments):
                fh.write(f"{pid}\t{self.assignments[pid]}\n")

    @classmethod
    def read(cls, path, ratios=(0.8, 0.1, 0.1)) -> "SplitManifest":
        out = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or parts[1] not in SPLITS:
                raise DataError(f"malformed split line: {line!r}")
            if parts[0] in out:
                raise DataError(f"patient {parts[0]!r} listed twice")
            out[parts[0]] = parts[1]
        return cls(out, tuple(ratios))


# ---------------------------------------------------------------- loading


def _read_rows(path: Path) -> list[list[str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [row for row in csv.reader(fh, delimiter="\t") if row]


def load_sample(directory) -> SpotTable:
    directory = Path(directory)
    files = {name: directory / f"{name}.tsv" for name in ("genes", "spots", "counts")}
    for name, path in files.items():
        if not path.is_file():
            raise DataError(f"{directory}: missing {path.name}")

    genes = [r[0] for r in _read_rows(files["genes"])]
    spot_rows = _read_rows(files["spots"])[1:]
    barcodes, rows, cols, xy = [], [], [], []
    for r in spot_rows:
        if len(r) != 5:
            raise DataError(f"{files['spots']}: expected 5 columns, got {len(r)}")
        barcodes.append(r[0])
        rows.append(int(r[1]))
        cols.append(int(r[2]))
        xy.append((float(r[3]), float(r[4])))

    n, g = len(barcodes), len(genes)
    values = np.zeros((n, g), dtype=np.float64)
    seen = set()
    for r in _read_rows(files["counts"]):
        if len(r) != 3:
            raise DataError(f"{files['counts']}: expected 3 columns, got {len(r)}")
        i, j = int(r[0]), int(r[1])
        count = float(r[2])
        if not (0 <= i < n):
            raise DataError(f"{files['counts']}: spot index {i} out of range for {n} spots")
        if not (0 <= j < g):
            raise DataError(f"{files['counts']}: gene index {j} out of range for {g} genes")
        if count < 0 or count != math.floor(count):
            raise DataError(f"{files['counts']}: count {r[2]!r} is not a non-negative integer")
        if (i, j) in seen:
            raise DataError(f"{files['counts']}: duplicate triplet for spot {i}, gene {j}")
        seen.add((i, j))
        values[i, j] = count

    meta = {}
    if (directory / "meta.json").is_file():
        meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
    return SpotTable(
        sample_id=str(meta.get("sample_id", directory.name)),
        patient_id=str(meta.get("patient_id", "")),
        organ=str(meta.get("organ", "unknown")),
        domain_id=int(meta.get("domain_id", 0)),
        values=values,
        gene_names=genes,
        barcodes=barcodes,
        array_row=np.array(rows, dtype=np.int64),
        array_col=np.array(cols, dtype=np.int64),
        xy_um=np.array(xy, dtype=np.float64).reshape(-1, 2),
        stage=Stage.RAW_COUNTS,
    )


def write_sample(table: SpotTable, directory) -> None:
    """Inverse of :func:`load_sample` for raw-count tables."""
    if table.stage != Stage.RAW_COUNTS:
        raise DataError("only raw-count tables can be written in sample format")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "genes.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{g}\n" for g in table.gene_names)
    with open(directory / "spots.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("barcode\tarray_row\tarray_col\tx_um\ty_um\n")
        for b, r, c, (x, y) in zip(table.barcodes, table.array_row, table.array_col, table.xy_um):
            fh.write(f"{b}\t{r}\t{c}\t{x:.3f}\t{y:.3f}\n")
    with open(directory / "counts.tsv", "w", encoding="utf-8", newline="\n") as fh:
        ii, jj = np.nonzero(table.values)
        for i, j in zip(ii, jj):
            fh.write(f"{i}\t{j}\t{int(table.values[i, j])}\n")
    meta = {
        "sample_id": table.sample_id,
        "patient_id": table.patient_id,
        "organ": table.organ,
        "domain_id": table.domain_id,
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- panels


def harmonize_panels(
    samples: Sequence[SpotTable], min_overlap: int
) -> tuple[list[str], list[SpotTable], list[str]]:
    """Greedy panel harmonization.

    The reference gene set starts as the largest panel; samples are visited
    by descending panel size and kept when they share at least
    ``min_overlap`` genes with the current reference, which then shrinks to
    the intersection.
    """
    if not samples:
        raise DataError("harmonize_panels: no samples given")
    if min_overlap < 1:
        raise DataError("harmonize_panels: min_overlap must be >= 1")
    for s in samples:
        if s.stage != Stage.RAW_COUNTS:
            raise DataError(f"{s.sample_id}: harmonization expects raw counts")

    order = sorted(range(len(samples)), key=lambda i: -samples[i].n_genes)
    reference_order = samples[order[0]].gene_names
    reference = set(reference_order)
    kept_idx, dropped = [], []
    for i in order:
        overlap = reference & set(samples[i].gene_names)
        if len(overlap) >= min_overlap:
            kept_idx.append(i)
            reference = overlap
        else:
            log.info("dropping %s: %d shared genes < %d", samples[i].sample_id, len(overlap), min_overlap)
            dropped.append(samples[i].sample_id)
    if not kept_idx:
        raise DataError(f"harmonize_panels: every sample shares fewer than {min_overlap} genes")

    shared = [g for g in reference_order if g in reference]
    kept = [samples[i].take_genes(shared) for i in sorted(kept_idx)]
    return shared, kept, dropped


def load_gene_mapping(path) -> dict[str, str]:
    mapping = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise DataError(f"{path}:{lineno}: expected two tab-separated columns")
        if parts[0] in mapping and mapping[parts[0]] != parts[1]:
            raise DataError(f"{path}:{lineno}: {parts[0]!r} mapped twice")
        mapping[parts[0]] = parts[1]
    return mapping


def rename_genes(table: SpotTable, mapping: dict[str, str]) -> SpotTable:
    """Rename gene columns; columns landing on the same name are summed."""
    targets = [mapping.get(g, g) for g in table.gene_names]
    if targets == table.gene_names:
        return table.with_values(table.values.copy())
    names: list[str] = []
    pos: dict[str, int] = {}
    for t in targets:
        if t not in pos:
            pos[t] = len(names)
            names.append(t)
    values = np.zeros((table.n_spots, len(names)), dtype=np.float64)
    for j, t in enumerate(targets):
        values[:, pos[t]] += table.values[:, j]
    return table.with_values(values, gene_names=names)


def _check_shared_panel(tables: Sequence[SpotTable]) -> list[str]:
    if not tables:
        raise DataError("no tables given")
    genes = tables[0].gene_names
    for t in tables[1:]:
        if t.gene_names != genes:
            raise DataError(f"{t.sample_id}: gene panel differs from {tables[0].sample_id}")
    return genes


def filter_genes_by_prevalence(tables: Sequence[SpotTable], min_frac: float) -> list[SpotTable]:
    genes = _check_shared_panel(tables)
    if not 0.0 <= min_frac <= 1.0:
        raise DataError("min_frac must lie in [0, 1]")
    nonzero = sum((t.values != 0).sum(axis=0) for t in tables)
    total = sum(t.n_spots for t in tables)
    keep = nonzero / max(total, 1) >= min_frac
    if not keep.any():
        raise DataError(f"prevalence filter at {min_frac} removed every gene")
    kept = [g for g, k in zip(genes, keep) if k]
    return [t.take_genes(kept) for t in tables]


def drop_empty_spots(table: SpotTable) -> SpotTable:
    if table.stage != Stage.RAW_COUNTS:
        raise DataError("drop_empty_spots expects raw counts")
    nonempty = table.values.sum(axis=1) > 0
    if not nonempty.any():
        raise DataError(f"{table.sample_id}: every spot is empty")
    return table.take_spots(nonempty)


def count_normalize(table: SpotTable, target_sum: float = 1e4) -> SpotTable:
    if table.stage != Stage.RAW_COUNTS:
        raise DataError("count_normalize expects raw counts")
    if target_sum <= 0:
        raise DataError("target_sum must be positive")
    totals = table.values.sum(axis=1, keepdims=True)
    if np.any(totals == 0):
        raise DataError(f"{table.sample_id}: zero-sum spot; drop empty spots first")
    return table.with_values(table.values / totals * target_sum, Stage.NORMALIZED)


def log1p_transform(table: SpotTable) -> SpotTable:
    if table.stage != Stage.NORMALIZED:
        raise DataError("log1p_transform expects normalized values")
    if np.any(table.values < 0):
        raise DataError("log1p_transform: negative entry")
    return table.with_values(np.log1p(table.values), Stage.LOGGED)


# ---------------------------------------------------------------- HVG


def standardized_variance(X: np.ndarray, gene_names: Sequence[str], n_bins: int) -> np.ndarray:
    """Per-gene variance of z-scores against a mean-binned expected sd.

    Genes are ranked by (mean, name), cut into ``n_bins`` equal-count bins,
    and each gene's expected sd is the median sd of its bin.  Z-scores are
    clipped to +-sqrt(n_spots).
    """
    n, g = X.shape
    if n < 2:
        raise DataError("need at least two spots for variance estimates")
    # one contiguous row per gene: reductions then depend only on that gene's
    # values, not on its column position, so the ranking is order invariant
    Xt = np.ascontiguousarray(np.asarray(X, dtype=np.float64).T)
    mean = Xt.sum(axis=1) / n
    dev = Xt - mean[:, None]
    sd = np.sqrt((dev * dev).sum(axis=1) / (n - 1))
    order = sorted(range(g), key=lambda j: (mean[j], gene_names[j]))
    expected = np.empty(g)
    for chunk in np.array_split(np.array(order), min(n_bins, g)):
        expected[chunk] = np.median(sd[chunk])
    clip = math.sqrt(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = dev / expected[:, None]
    z = np.where(dev == 0, 0.0, z)
    z = np.clip(z, -clip, clip)
    return (z * z).sum(axis=1) / (n - 1)


def select_hvg(tables: Sequence[SpotTable], n_top: int = 2000, n_bins: int = 20) -> list[str]:
    genes = _check_shared_panel(tables)
    if n_bins < 1:
        raise DataError("n_bins must be >= 1")
    if n_top > len(genes):
        raise DataError(f"n_top={n_top} exceeds panel size {len(genes)}")
    for t in tables:
        if t.stage < Stage.LOGGED:
            raise DataError(f"{t.sample_id}: HVG selection expects log-transformed values")
    X = np.vstack([t.values for t in tables])
    score = standardized_variance(X, genes, n_bins)
    ranked = sorted(range(len(genes)), key=lambda j: (-score[j], genes[j]))
    return [genes[j] for j in ranked[:n_top]]


def supplement_panel(hvg: Sequence[str], supplement: Iterable[str] = ()) -> GenePanel:
    genes, prov, seen = [], [], set()
    for g in hvg:
        if g not in seen:
            seen.add(g)
            genes.append(g)
            prov.append("hvg")
    for g in supplement:
        if g not in seen:
            seen.add(g)
            genes.append(g)
            prov.append("supplement")
    return GenePanel(genes, prov, target_size=len(genes))


def load_gene_list(path) -> list[str]:
    return [ln.split("\t")[0].strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]


# ---------------------------------------------------------------- smoothing


def build_hex_adjacency(table: SpotTable) -> HexLattice:
    where: dict[tuple[int, int], int] = {}
    for i, rc in enumerate(zip(table.array_row.tolist(), table.array_col.tolist())):
        if rc in where:
            raise DataError(f"{table.sample_id}: duplicate lattice position {rc}")
        where[rc] = i
    neighbors = []
    for r, c in zip(table.array_row.tolist(), table.array_col.tolist()):
        nb = [where[(r + dr, c + dc)] for dr, dc in NEIGHBOR_OFFSETS if (r + dr, c + dc) in where]
        neighbors.append(np.array(nb, dtype=np.int64))
    return HexLattice(neighbors, table.sample_id)


def smooth_local(table: SpotTable, lattice: HexLattice) -> SpotTable:
    """Average each spot with the mean of its lattice neighbors.

    Spots without neighbors keep their value.  Neighbor sums accumulate in
    lattice order so the result matches a per-spot loop bit for bit.
    """
    if table.stage != Stage.LOGGED:
        raise DataError("smooth_local expects log-transformed values")
    if len(lattice) != table.n_spots:
        raise DataError(f"lattice has {len(lattice)} spots, table has {table.n_spots}")
    X = table.values
    idx, counts = lattice.padded()
    padded = np.vstack([X, np.zeros((1, X.shape[1]))])
    acc = padded[idx[:, 0]].copy()
    for k in range(1, 6):
        acc += padded[idx[:, k]]
    has = counts > 0
    context = X.copy()
    context[has] = acc[has] / counts[has, None]
    return table.with_values((X + context) / 2, Stage.SMOOTHED)


# ---------------------------------------------------------------- splits


def split_by_patient(
    samples: Sequence[SpotTable],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> SplitManifest:
    """Patient-level split stratified by organ.

    Within each organ the patients are shuffled and laid end to end by spot
    count; a patient lands in the split whose cumulative ratio interval
    contains the midpoint of its spot range.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")

    spots_by_organ: dict[str, Counter] = defaultdict(Counter)
    for s in samples:
        spots_by_organ[s.patient_id][s.organ] += s.n_spots
    patient_spots = {p: sum(c.values()) for p, c in spots_by_organ.items()}
    patient_organ = {
        p: sorted(c.items(), key=lambda kv: (-kv[1], kv[0]))[0][0] for p, c in spots_by_organ.items()
    }
    by_organ: dict[str, list[str]] = defaultdict(list)
    for p, o in patient_organ.items():
        by_organ[o].append(p)

    rng = np.random.default_rng(seed)
    bounds = np.cumsum(ratios)
    n_active = sum(r > 0 for r in ratios)
    assignments = {}
    for organ in sorted(by_organ):
        patients = sorted(by_organ[organ])
        if len(patients) < n_active:
            assignments.update({p: "train" for p in patients})
            continue
        patients = [patients[i] for i in rng.permutation(len(patients))]
        total = sum(patient_spots[p] for p in patients)
        start = 0.0
        for p in patients:
            mid = (start + patient_spots[p] / 2) / total
            start += patient_spots[p]
            k = int(np.searchsorted(bounds, mid, side="right"))
            assignments[p] = SPLITS[min(k, 2)]
    return SplitManifest(assignments, ratios, "organ")
