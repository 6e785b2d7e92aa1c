"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import torch

from . import pipeline as pl
from .blob import read_blob, write_blob
from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .config import RunConfig, load_config, require_keys
from .errors import ConfigError, DataError, NumericalError, SealError
from .evalsuite import g2i_build_query, g2i_similarity_map, i2g_retrieve, kfold_probe, metric_pcc
from .synth import gen_synthetic
from .trainer import (
    embed_images,
    seal_model_from_checkpoint,
    train_config_from_dict,
    train_stage1,
    train_stage2,
    vae_from_checkpoint,
    write_log,
)
from .vision_lora import ToyViT, ToyVitConfig

log = logging.getLogger("seal")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _data_root(value: str | None, what: str) -> Path:
    root = value or os.environ.get("SEAL_DATA_DIR")
    if not root:
        raise ConfigError(f"{what} not given and SEAL_DATA_DIR is unset")
    return Path(root)


def _split_list(value: str) -> list[str]:
    return [s for s in value.split(",") if s]


def _write_rows(path: Path, sample_ids, barcodes) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("row\tsample_id\tbarcode\n")
        for i, (s, b) in enumerate(zip(sample_ids, barcodes)):
            fh.write(f"{i}\t{s}\t{b}\n")


def _read_rows(path: Path) -> list[tuple[str, str]]:
    if not path.is_file():
        raise DataError(f"row index {path} not found")
    lines = path.read_text(encoding="utf-8").splitlines()[1:]
    return [tuple(line.split("\t")[1:3]) for line in lines if line]


def rows_path(blob_path) -> Path:
    p = Path(blob_path)
    return p.with_name(p.name[: -len(".blob")] + ".rows.tsv" if p.name.endswith(".blob") else p.name + ".rows.tsv")


# ------------------------------------------------------------------ commands


def cmd_gen_synth(args, cfg: RunConfig) -> int:
    out = gen_synthetic(cfg.synth, _data_root(args.out, "--out"), force=args.force)
    print(f"wrote {cfg.synth.n_samples} samples to {out}")
    return EXIT_OK


def cmd_preprocess(args, cfg: RunConfig) -> int:
    raw, images = pl.load_raw_samples(_data_root(args.input, "--input"))
    ds = pl.preprocess(raw, cfg.preprocess, args.seed)
    pl.attach_images(ds, raw, images)
    pl.save_processed(ds, args.out)
    counts = {s: len(ds.manifest.patients(s)) for s in ("train", "val", "test")}
    print(f"{len(ds.tables)} samples, {len(ds.panel)} genes, patients {counts}; dropped {ds.info['dropped']}")
    return EXIT_OK


def cmd_train_omics(args, cfg: RunConfig) -> int:
    ds = pl.load_processed(args.data)
    X = ds.stack(_split_list(args.split))["X"]
    vcfg = cfg.vae
    vcfg.input_dim = X.shape[1]
    res = train_stage1(X, vcfg, cfg.train, args.epochs)
    state = res.checkpoint()
    state.meta["data"] = str(args.data)
    manifest = save_checkpoint(state, args.out)
    write_log(res.log, Path(args.out) / "train_log.tsv")
    print(f"stage 1: epoch losses {[round(x, 4) for x in res.epoch_loss]}; {len(manifest['arrays'])} arrays -> {args.out}")
    return EXIT_OK


def _vit_config(cfg: RunConfig, image_size: int) -> ToyVitConfig:
    vit = cfg.vit
    if "vit_image_size" not in cfg.overrides and vit.image_size != image_size:
        log.info("vit_image_size follows the data: %d", image_size)
        vit = ToyVitConfig(**{**vit.__dict__, "image_size": image_size})
    return vit


def cmd_train_align(args, cfg: RunConfig) -> int:
    ds = pl.load_processed(args.data)
    data = ds.stack(_split_list(args.split))
    if "images" not in data:
        raise DataError("processed dataset has no image patches")
    state = load_checkpoint(args.omics)
    require_keys(state.config, ["vae"], f"{args.omics}")
    vae = vae_from_checkpoint(state)
    vit_cfg = _vit_config(cfg, data["images"].shape[1])
    res = train_stage2(data["images"], data["X"], data["domains"], vae, vit_cfg, cfg.adapter, cfg.train,
                       n_domains=ds.n_domains, epochs=args.epochs)
    if res.frozen_digest_before != res.frozen_digest_after:
        raise NumericalError("frozen backbone weights changed during alignment")
    ck = res.checkpoint()
    ck.meta["data"] = str(args.data)
    save_checkpoint(ck, args.out)
    write_log(res.log, Path(args.out) / "train_log.tsv")
    print(f"stage 2: epoch losses {[round(x, 4) for x in res.epoch_loss]}; frozen digest {res.frozen_digest_after}")
    return EXIT_OK


def _image_encoder(ckpt: str | None, cfg: RunConfig, image_size: int, frozen: bool):
    """Adapted encoder from a Stage II checkpoint, or its frozen backbone."""
    if ckpt is None:
        if not frozen:
            raise ConfigError("--ckpt is required unless --frozen is given")
        vit_cfg = _vit_config(cfg, image_size)
        return ToyViT(vit_cfg), cfg.train
    state = load_checkpoint(ckpt)
    require_keys(state.config, ["vit", "plan", "train", "vae", "n_domains"], ckpt)
    train_cfg = train_config_from_dict(state.config["train"])
    if frozen:
        vit = ToyViT(ToyVitConfig(**state.config["vit"]))
        vit.load_state_dict({k[len("backbone/"):]: torch.from_numpy(v) for k, v in state.arrays.items()
                             if k.startswith("backbone/")})
        vit.eval()
        return vit, train_cfg
    return seal_model_from_checkpoint(state).vit, train_cfg


def _omics_encoder(ckpt: str):
    state = load_checkpoint(ckpt)
    if "vit" in state.config:
        return seal_model_from_checkpoint(state).vae
    require_keys(state.config, ["vae"], ckpt)
    return vae_from_checkpoint(state)


def cmd_embed(args, cfg: RunConfig) -> int:
    ds = pl.load_processed(args.data)
    data = ds.stack(_split_list(args.split))
    if args.modality == "image":
        if "images" not in data:
            raise DataError("processed dataset has no image patches")
        vit, train_cfg = _image_encoder(args.ckpt, cfg, data["images"].shape[1], args.frozen)
        emb = embed_images(vit, data["images"], train_cfg)
    else:
        if args.ckpt is None:
            raise ConfigError("--ckpt is required for omics embeddings")
        vae = _omics_encoder(args.ckpt)
        emb = vae.embed(torch.from_numpy(data["X"])).numpy()
    write_blob(args.out, emb.astype(np.float32))
    _write_rows(rows_path(args.out), data["sample_ids"], data["barcodes"])
    print(f"{emb.shape[0]} x {emb.shape[1]} {args.modality} embeddings -> {args.out}")
    return EXIT_OK


def _targets_for(ds: pl.ProcessedDataset, rows: list[tuple[str, str]]) -> np.ndarray:
    index = {}
    for t in ds.tables:
        for i, b in enumerate(t.barcodes):
            index[(t.sample_id, b)] = (t, i)
    try:
        return np.stack([index[r][0].values[index[r][1]] for r in rows])
    except KeyError as exc:
        raise DataError(f"embedding row {exc.args[0]} not in the dataset") from exc


def cmd_probe(args, cfg: RunConfig) -> int:
    ds = pl.load_processed(args.data)
    emb = read_blob(args.embeddings)
    rows = _read_rows(rows_path(args.embeddings))
    if len(rows) != len(emb):
        raise DataError(f"{len(emb)} embeddings but {len(rows)} rows in the index")
    Y = _targets_for(ds, rows)
    res = kfold_probe(emb, Y, k=cfg.probe.k, n_components=cfg.probe.n_components,
                      alpha=cfg.probe.alpha, seed=args.seed, genes=ds.panel.genes)
    if args.out:
        res.write_tsv(args.out)
    for name, (mean, sd) in res.summary.items():
        print(f"{name}\t{mean:.4f}\t{sd:.4f}")
    if res.n_degenerate:
        print(f"degenerate correlations: {res.n_degenerate}", file=sys.stderr)
    return EXIT_OK


def cmd_retrieve_i2g(args, cfg: RunConfig) -> int:
    ds = pl.load_processed(args.data)
    ref = ds.stack(_split_list(args.ref_split))
    qry = ds.stack(_split_list(args.query_split))
    if "images" not in ref or "images" not in qry:
        raise DataError("processed dataset has no image patches")
    vit, train_cfg = _image_encoder(args.ckpt, cfg, qry["images"].shape[1], args.frozen)
    ref_emb = embed_images(vit, ref["images"], train_cfg)
    q_emb = embed_images(vit, qry["images"], train_cfg)
    K = min(cfg.retrieval.top_k, len(ref_emb))
    pred = i2g_retrieve(q_emb, ref_emb, ref["X"], K=K, clamp_negative=cfg.retrieval.clamp_negative)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("sample_id\tbarcode\t" + "\t".join(ds.panel.genes) + "\n")
            for s, b, p in zip(qry["sample_ids"], qry["barcodes"], pred):
                fh.write(f"{s}\t{b}\t" + "\t".join(f"{v:.6g}" for v in p) + "\n")
    pcc = [metric_pcc(pred[:, j], qry["X"][:, j]) for j in range(pred.shape[1])]
    print(f"i2g K={K}: mean gene PCC {np.mean(pcc):.4f} over {len(pred)} query spots")
    return EXIT_OK


def cmd_retrieve_g2i(args, cfg: RunConfig) -> int:
    ds = pl.load_processed(args.data)
    state = load_checkpoint(args.ckpt)
    require_keys(state.config, ["vit", "plan", "train", "vae", "n_domains"], args.ckpt)
    model = seal_model_from_checkpoint(state)
    train_cfg = train_config_from_dict(state.config["train"])
    ref_tables = ds.select(_split_list(args.ref_split))
    if not ref_tables:
        raise DataError(f"no samples in split(s) {args.ref_split}")
    merged = SimpleNamespace(gene_names=ds.panel.genes, values=np.vstack([t.values for t in ref_tables]))

    def encode(X):
        with torch.no_grad():
            return model.proj_gene(model.vae.embed(torch.from_numpy(X.astype(np.float32)))).numpy()

    r = cfg.retrieval
    query = g2i_build_query(_split_list(args.genes), merged, encode, r.pcc_threshold, r.percentile, r.min_fraction)
    target = next((t for t in ds.tables if t.sample_id == args.sample), None)
    if target is None:
        raise DataError(f"sample {args.sample!r} not in the dataset")
    if target.sample_id not in ds.images:
        raise DataError(f"sample {args.sample!r} has no image patches")
    with torch.no_grad():
        patches = model.proj_img(torch.from_numpy(embed_images(model.vit, ds.images[target.sample_id], train_cfg))).numpy()
    scores = g2i_similarity_map(query, patches, target.xy_um, args.out, args.png)
    print(f"g2i: {len(query.expanded_genes)} genes in query, {len(query.kept_spots)} reference spots; "
          f"score range [{scores.min():.3f}, {scores.max():.3f}]")
    return EXIT_OK


def cmd_inspect_ckpt(args, cfg: RunConfig) -> int:
    manifest = read_manifest(args.ckpt)
    state = load_checkpoint(args.ckpt)
    print(f"format {manifest.get('format')} v{manifest['version']}, {len(state.arrays)} arrays, digests verified")
    for e in manifest["arrays"]:
        print(f"{e['name']}\t{'x'.join(map(str, e['shape'])) or 'scalar'}\t{e['dtype']}\t{e['digest']}")
    print(json.dumps({"meta": manifest.get("meta", {})}, sort_keys=True))
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat JSON config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None, help="cap torch worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="seal", description="Align pathology image encoders with spatial gene expression.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-synth", parents=[common], help="write a synthetic paired dataset")
    s.add_argument("--out", help="output directory (default: $SEAL_DATA_DIR)")
    s.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    s.set_defaults(func=cmd_gen_synth)

    s = sub.add_parser("preprocess", parents=[common], help="harmonize, normalize, select genes, smooth, split")
    s.add_argument("--input", help="raw sample root (default: $SEAL_DATA_DIR)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train-omics", parents=[common], help="Stage I: omics VAE warm-up")
    s.add_argument("--data", required=True, help="processed dataset directory")
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--epochs", type=int)
    s.add_argument("--split", default="train")
    s.set_defaults(func=cmd_train_omics)

    s = sub.add_parser("train-align", parents=[common], help="Stage II: contrastive alignment with LoRA")
    s.add_argument("--data", required=True)
    s.add_argument("--omics", required=True, help="Stage I checkpoint")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--split", default="train")
    s.set_defaults(func=cmd_train_align)

    s = sub.add_parser("embed", parents=[common], help="dump embeddings to a SEALEMB1 blob")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt")
    s.add_argument("--modality", choices=("image", "omics"), default="image")
    s.add_argument("--frozen", action="store_true", help="image encoder without adapters")
    s.add_argument("--split", default="train,val,test")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("probe", parents=[common], help="k-fold PCA + ridge probe of embeddings")
    s.add_argument("--data", required=True)
    s.add_argument("--embeddings", required=True)
    s.add_argument("--out", help="per-fold per-gene metrics TSV")
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("retrieve-i2g", parents=[common], help="predict expression from image retrieval")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt")
    s.add_argument("--frozen", action="store_true")
    s.add_argument("--ref-split", default="train")
    s.add_argument("--query-split", default="val,test")
    s.add_argument("--out")
    s.set_defaults(func=cmd_retrieve_i2g)

    s = sub.add_parser("retrieve-g2i", parents=[common], help="score patches against a gene query")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--genes", required=True, help="comma-separated active genes")
    s.add_argument("--sample", required=True)
    s.add_argument("--ref-split", default="train")
    s.add_argument("--out", required=True, help="TSV of x, y, score")
    s.add_argument("--png")
    s.set_defaults(func=cmd_retrieve_g2i)

    s = sub.add_parser("inspect-ckpt", parents=[common], help="verify and summarize a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.set_defaults(func=cmd_inspect_ckpt)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("--threads must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        torch.set_num_threads(args.threads)
    try:
        cfg = load_config(args.config, args.seed)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, SealError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
