"""Command-line front end: ``fdch {synth,train,encode,eval}``.

All outputs land in the run directory (``--out`` / config ``out``) next to a
``manifest.json`` recording versions, seed, config digest and the sha256 of
every artifact each command wrote.  Nothing in the manifest depends on wall
clock time, so reruns are byte-identical.
"""

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import RunConfig
from .data import load_dataset, make_synthetic, save_dataset, split_dataset
from .errors import ConfigError, EvaluationError, FdchError, ShapeError
from .network import load_checkpoint, save_checkpoint
from .retrieval import (
    build_index,
    encode,
    load_index,
    mean_average_precision,
    precision_recall_by_radius,
    save_index,
)
from .stage1 import train_stage1
from .stage2 import train_stage2

log = logging.getLogger("fdch")

SYNTH_FILES = ("image.csv", "text.csv", "labels.csv")
FUSION_CKPT = "fusion.fdch"
HASH_CKPT = "hashnets.fdch"
CODES = "codes.fdch"
TRACE1 = "stage1_trace.csv"
TRACE2 = "stage2_trace.csv"
INDEX = {"image": "index_image.fdch", "text": "index_text.fdch"}
# direction -> (query modality, database modality)
DIRECTIONS = {"i2t": ("image", "text"), "t2i": ("text", "image")}
ENCODE_CHUNK = 256


@contextmanager
def _stage(name):
    try:
        yield
    except FdchError as e:
        raise type(e)(f"{name}: {e}") from e


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(cfg, command, paths):
    out = cfg.out_dir
    mpath = out / "manifest.json"
    manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
    manifest.update(
        {
            "versions": {
                "fdch": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
            "seed": cfg.seed,
            "config_sha256": cfg.digest(),
            "config": json.loads(cfg.canonical_json()),
        }
    )
    manifest.setdefault("commands", {})[command] = {
        Path(p).name: _sha256(p) for p in paths
    }
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    return repr(float(x))


def dataset_for(cfg):
    paths = cfg.data_paths()
    if paths is not None:
        return load_dataset(*paths)
    s = cfg.raw["synthetic"]
    return make_synthetic(s["n"], s["d_v"], s["d_t"], s["c"], s["noise"], cfg.seed)


def split_for(cfg, ds):
    s = cfg.raw["split"]
    return split_dataset(ds, s["n_query"], s["n_train"], cfg.seed)


def cmd_synth(cfg):
    s = cfg.raw["synthetic"]
    ds = make_synthetic(s["n"], s["d_v"], s["d_t"], s["c"], s["noise"], cfg.seed)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    paths = save_dataset(ds, *(out / f for f in SYNTH_FILES))
    params = dict(s, seed=cfg.seed, generator="philox4x64")
    (out / "synth_manifest.json").write_text(json.dumps(params, indent=2, sort_keys=True) + "\n")
    paths.append(out / "synth_manifest.json")
    _write_manifest(cfg, "synth", paths)
    return paths


def cmd_train(cfg):
    ds = dataset_for(cfg)
    sp = split_for(cfg, ds)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    with _stage("stage 1"):
        model, trace1 = train_stage1(ds, sp.train_idx, cfg.stage1_hyper(), cfg.arch())
    warm = (model.img_net, model.txt_net) if cfg.raw["arch"]["warm_start"] else None
    with _stage("stage 2"):
        nets, trace2 = train_stage2(
            ds,
            sp.train_idx,
            model.B,
            cfg.stage2_hyper(),
            feature_hidden=tuple(cfg.raw["arch"]["feature_hidden"]),
            warm_start=warm,
        )
    paths = [out / f for f in (FUSION_CKPT, HASH_CKPT, CODES, TRACE1, TRACE2)]
    save_checkpoint(paths[0], [model.img_net, model.txt_net, model.fusion_net])
    save_checkpoint(paths[1], [nets.img_net, nets.txt_net], [nets.W1, nets.W2])
    ids = [ds.ids()[i] for i in sp.train_idx]
    save_index(build_index(model.B, ds.Y[:, sp.train_idx], ids, "unified"), paths[2])
    _write_rows(paths[3], ["epoch", "objective"], [(e + 1, _fmt(v)) for e, v in enumerate(trace1)])
    _write_rows(
        paths[4],
        ["epoch", "J", "J1", "J2", "J3", "J4"],
        [(e + 1, *map(_fmt, row)) for e, row in enumerate(trace2)],
    )
    _write_manifest(cfg, "train", paths)
    return paths


def load_hash_nets(path, cfg=None):
    nets, mats = load_checkpoint(path)
    if len(nets) != 2 or len(mats) != 2:
        raise ShapeError(f"{path} is not a hash-net checkpoint (expected 2 nets and W1, W2)")
    img, txt = nets
    if img.out_dim != txt.out_dim:
        raise ShapeError(f"{path}: image and text nets disagree on code length")
    if cfg is not None and img.out_dim != cfg.bits:
        raise ConfigError(f"k mismatch: checkpoint has {img.out_dim}-bit nets, config asks for {cfg.bits}")
    return img, txt


def cmd_encode(cfg, checkpoint=None, chunk=ENCODE_CHUNK):
    ckpt = Path(checkpoint) if checkpoint else cfg.out_dir / HASH_CKPT
    img, txt = load_hash_nets(ckpt, cfg)
    ds = dataset_for(cfg)
    db = ds.subset(split_for(cfg, ds).db_idx)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for modality, net, X in (("image", img, db.V), ("text", txt, db.T)):
        if X.shape[0] != net.in_dim:
            raise ShapeError(f"{modality} features are {X.shape[0]}-d, checkpoint expects {net.in_dim}")
        path = out / INDEX[modality]
        save_index(build_index(encode(net, X, chunk), db.Y, db.ids(), modality), path)
        paths.append(path)
    _write_manifest(cfg, "encode", paths)
    return paths


def evaluate_direction(direction, index, net, queries, labels):
    q_mod, db_mod = DIRECTIONS[direction]
    if index.modality != db_mod:
        raise EvaluationError(
            f"direction mismatch: {direction.upper()} needs a {db_mod} index, got a {index.modality} index"
        )
    if net.out_dim != index.k:
        raise ConfigError(f"k mismatch: {q_mod} net emits {net.out_dim} bits, index holds {index.k}")
    codes = encode(net, queries, ENCODE_CHUNK)
    return mean_average_precision(index, codes, labels), precision_recall_by_radius(index, codes, labels)


def cmd_eval(cfg, checkpoint=None, index_paths=None):
    ckpt = Path(checkpoint) if checkpoint else cfg.out_dir / HASH_CKPT
    img, txt = load_hash_nets(ckpt, cfg)
    ds = dataset_for(cfg)
    q = ds.subset(split_for(cfg, ds).query_idx)
    index_paths = index_paths or {}
    out = cfg.out_dir
    paths, summary, maps = [], [], {}
    for direction, (q_mod, db_mod) in DIRECTIONS.items():
        index = load_index(index_paths.get(db_mod, out / INDEX[db_mod]))
        net, X = (img, q.V) if q_mod == "image" else (txt, q.T)
        rep, pr = evaluate_direction(direction, index, net, X, q.Y)
        path = out / f"pr_{direction}.csv"
        _write_rows(
            path,
            ["radius", "precision", "recall", "zero_retrieval"],
            [(p.radius, _fmt(p.precision), _fmt(p.recall), int(p.zero_retrieval)) for p in pr],
        )
        paths.append(path)
        summary.append((direction.upper(), _fmt(rep.map), rep.n_evaluated, rep.n_skipped))
        maps[direction] = rep.map
        print(f"{direction.upper()} mAP {rep.map:.4f} ({rep.n_evaluated} queries, {rep.n_skipped} skipped)")
    spath = out / "map_summary.csv"
    _write_rows(spath, ["direction", "map", "n_evaluated", "n_skipped"], summary)
    paths.append(spath)
    _write_manifest(cfg, "eval", paths)
    return maps, paths


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help="run directory")
    common.add_argument("--bits", type=int, choices=(16, 32, 64))
    common.add_argument("--ablation", choices=("none", "fdch-i", "fdch-ii"))
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fdch", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    sub.add_parser("train", parents=[common], help="train both stages")
    enc = sub.add_parser("encode", parents=[common], help="index the database split")
    enc.add_argument("--checkpoint", type=Path)
    ev = sub.add_parser("eval", parents=[common], help="I2T and T2I mAP and PR curves")
    ev.add_argument("--checkpoint", type=Path)
    ev.add_argument("--index-image", type=Path)
    ev.add_argument("--index-text", type=Path)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = RunConfig.load(
            args.config,
            {
                "seed": args.seed,
                "out": None if args.out is None else str(args.out),
                "bits": args.bits,
                "stage2.ablation": args.ablation,
            },
        )
        if args.command == "synth":
            paths = cmd_synth(cfg)
        elif args.command == "train":
            paths = cmd_train(cfg)
        elif args.command == "encode":
            paths = cmd_encode(cfg, args.checkpoint)
        else:
            idx = {k: v for k, v in (("image", args.index_image), ("text", args.index_text)) if v}
            _, paths = cmd_eval(cfg, args.checkpoint, idx)
    except FdchError as e:
        print(f"fdch {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"fdch {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    for path in paths:
        log.info("wrote %s", path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
