"""Preprocessing pipeline and the processed-dataset layout on disk.

A processed dataset directory contains::

    panel.tsv            gene<TAB>provenance, canonical column order
    split.tsv            patient_id<TAB>split
    preprocess.json      config echo and dropped samples
    samples/<id>/expr.blob   SEALEMB1 [spots x genes] float32
    samples/<id>/spots.tsv   barcode, array_row, array_col, x_um, y_um
    samples/<id>/meta.json
    samples/<id>/images.npy  optional uint8 [spots, H, W, 3]
"""
from __future__ import annotations

import json
import logging
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import expr_ingest as ei
from .blob import read_blob, write_blob
from .errors import DataError

log = logging.getLogger(__name__)


@dataclass
class PreprocessConfig:
    min_overlap: int = 5000
    min_gene_frac: float = 0.10
    target_sum: float = 1e4
    n_top_hvg: int = 2000
    n_bins: int = 20
    smooth: bool = True
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    mapping_file: str = ""
    supplement_file: str = ""

    def __post_init__(self):
        self.split_ratios = tuple(float(r) for r in self.split_ratios)


@dataclass
class ProcessedDataset:
    tables: list[ei.SpotTable]
    panel: ei.GenePanel
    manifest: ei.SplitManifest
    images: dict[str, np.ndarray] = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def select(self, splits: Sequence[str] | str | None = None) -> list[ei.SpotTable]:
        if splits is None:
            return list(self.tables)
        if isinstance(splits, str):
            splits = [splits]
        return [t for t in self.tables if self.manifest.split_of(t.patient_id) in splits]

    def stack(self, splits=None) -> dict:
        """Concatenate the chosen samples into aligned arrays."""
        tables = self.select(splits)
        if not tables:
            raise DataError(f"no samples in split(s) {splits}")
        out = {
            "X": np.vstack([t.values for t in tables]).astype(np.float32),
            "domains": np.concatenate([np.full(t.n_spots, t.domain_id) for t in tables]),
            "sample_ids": [t.sample_id for t in tables for _ in range(t.n_spots)],
            "barcodes": [b for t in tables for b in t.barcodes],
            "xy": np.vstack([t.xy_um for t in tables]),
        }
        if all(t.sample_id in self.images for t in tables):
            out["images"] = np.concatenate([self.images[t.sample_id] for t in tables])
        return out

    @property
    def n_domains(self) -> int:
        return max(t.domain_id for t in self.tables) + 1


def find_sample_dirs(root) -> list[Path]:
    root = Path(root)
    dirs = sorted(p.parent for p in root.rglob("genes.tsv"))
    if not dirs:
        raise DataError(f"no sample directories (genes.tsv) under {root}")
    return dirs


def preprocess(samples: Sequence[ei.SpotTable], cfg: PreprocessConfig, seed: int = 0) -> ProcessedDataset:
    samples = list(samples)
    if cfg.mapping_file:
        mapping = ei.load_gene_mapping(cfg.mapping_file)
        samples = [ei.rename_genes(s, mapping) for s in samples]
    largest = max(s.n_genes for s in samples)
    min_overlap = min(cfg.min_overlap, largest)
    if min_overlap < cfg.min_overlap:
        log.info("min_overlap %d exceeds largest panel; using %d", cfg.min_overlap, min_overlap)
    _, kept, dropped = ei.harmonize_panels(samples, min_overlap)
    kept = ei.filter_genes_by_prevalence(kept, cfg.min_gene_frac)
    kept = [ei.drop_empty_spots(t) for t in kept]
    logged = [ei.log1p_transform(ei.count_normalize(t, cfg.target_sum)) for t in kept]

    manifest = ei.split_by_patient(logged, cfg.split_ratios, seed)
    train = [t for t in logged if manifest.split_of(t.patient_id) == "train"] or logged
    n_top = min(cfg.n_top_hvg, logged[0].n_genes)
    hvg = ei.select_hvg(train, n_top, cfg.n_bins)
    supplement = ei.load_gene_list(cfg.supplement_file) if cfg.supplement_file else []
    present = set(logged[0].gene_names)
    missing = [g for g in supplement if g not in present]
    if missing:
        log.warning("%d supplement genes absent from the harmonized panel", len(missing))
    panel = ei.supplement_panel(hvg, [g for g in supplement if g in present])

    out = []
    for t in logged:
        t = t.take_genes(panel.genes)
        if cfg.smooth:
            t = ei.smooth_local(t, ei.build_hex_adjacency(t))
        out.append(t)
    info = {"config": asdict(cfg), "dropped": dropped, "seed": seed}
    return ProcessedDataset(out, panel, manifest, {}, info)


def load_raw_samples(root) -> tuple[list[ei.SpotTable], dict[str, np.ndarray]]:
    tables, images = [], {}
    for d in find_sample_dirs(root):
        t = ei.load_sample(d)
        tables.append(t)
        if (d / "images.npy").is_file():
            images[t.sample_id] = np.load(d / "images.npy")
    return tables, images


def attach_images(ds: ProcessedDataset, raw_tables, raw_images: dict[str, np.ndarray]) -> None:
    """Carry image patches over to the surviving spots of each processed sample."""
    raw_by_id = {t.sample_id: t for t in raw_tables}
    for t in ds.tables:
        if t.sample_id not in raw_images:
            continue
        pos = {b: i for i, b in enumerate(raw_by_id[t.sample_id].barcodes)}
        ds.images[t.sample_id] = raw_images[t.sample_id][[pos[b] for b in t.barcodes]]


def save_processed(ds: ProcessedDataset, out_dir) -> Path:
    out = Path(out_dir)
    if out.exists():
        shutil.rmtree(out)
    (out / "samples").mkdir(parents=True)
    ds.panel.write(out / "panel.tsv")
    ds.manifest.write(out / "split.tsv")
    info = dict(ds.info, ratios=list(ds.manifest.ratios))
    (out / "preprocess.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    for t in ds.tables:
        sdir = out / "samples" / t.sample_id
        sdir.mkdir()
        write_blob(sdir / "expr.blob", t.values.astype(np.float32))
        with open(sdir / "spots.tsv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("barcode\tarray_row\tarray_col\tx_um\ty_um\n")
            for b, r, c, (x, y) in zip(t.barcodes, t.array_row, t.array_col, t.xy_um):
                fh.write(f"{b}\t{r}\t{c}\t{x:.3f}\t{y:.3f}\n")
        meta = {"sample_id": t.sample_id, "patient_id": t.patient_id, "organ": t.organ,
                "domain_id": t.domain_id, "stage": t.stage.name.lower()}
        (sdir / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        if t.sample_id in ds.images:
            np.save(sdir / "images.npy", ds.images[t.sample_id])
    return out


def load_processed(root) -> ProcessedDataset:
    root = Path(root)
    for name in ("panel.tsv", "split.tsv"):
        if not (root / name).is_file():
            raise DataError(f"{root}: not a processed dataset (missing {name})")
    panel = ei.GenePanel.read(root / "panel.tsv")
    info = json.loads((root / "preprocess.json").read_text(encoding="utf-8")) if (root / "preprocess.json").is_file() else {}
    manifest = ei.SplitManifest.read(root / "split.tsv", tuple(info.get("ratios", (0.8, 0.1, 0.1))))
    tables, images = [], {}
    for sdir in sorted((root / "samples").iterdir()):
        meta = json.loads((sdir / "meta.json").read_text(encoding="utf-8"))
        values = read_blob(sdir / "expr.blob").astype(np.float64)
        rows = ei._read_rows(sdir / "spots.tsv")[1:]
        t = ei.SpotTable(
            sample_id=meta["sample_id"], patient_id=meta["patient_id"], organ=meta["organ"],
            domain_id=int(meta["domain_id"]), values=values, gene_names=panel.genes,
            barcodes=[r[0] for r in rows],
            array_row=np.array([int(r[1]) for r in rows], dtype=np.int64),
            array_col=np.array([int(r[2]) for r in rows], dtype=np.int64),
            xy_um=np.array([(float(r[3]), float(r[4])) for r in rows]).reshape(-1, 2),
            stage=ei.Stage[meta["stage"].upper()],
        )
        tables.append(t)
        if (sdir / "images.npy").is_file():
            images[t.sample_id] = np.load(sdir / "images.npy")
    return ProcessedDataset(tables, panel, manifest, images, info)
