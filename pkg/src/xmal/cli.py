"""Command-line entry point: dataset generation, two-stage training,
embedding extraction, and evaluation.

Exit codes: 0 success, 2 usage error, 1 runtime failure. The last line of
output is always machine-parseable: "STATUS ok" or "STATUS error: <msg>".
"""
from __future__ import annotations

import argparse
import json
import os
import struct
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evaluation as ev
from .config import TrainConfig
from .pipeline import Embedder
from .training import train_stage1, train_stage2


def _default_out() -> str | None:
    return os.environ.get("XMAL_CACHE_DIR")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xmal",
                                     description="caption-guided face matching toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic face-caption dataset")
    g.add_argument("--subjects", type=int, required=True)
    g.add_argument("--images-per-subject", type=int, default=4)
    g.add_argument("--captions", type=int, default=2, help="captions per image")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--image-size", type=int, default=112)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--config", help="JSON config file (defaults used when omitted)")
    t.add_argument("--data", required=True, help="manifest path")
    t.add_argument("--out", default=_default_out())
    t.add_argument("--resume", help="stage-1 bundle to continue from")
    t.add_argument("--from-stage1", dest="from_stage1", help="stage-1 bundle (stage 2)")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int, help="override the stage's epoch count")
    t.add_argument("--deterministic", action="store_true")
    t.add_argument("--fusion", choices=("tgfr", "flf"))

    e = sub.add_parser("eval", help="verification / identification / quality study")
    e.add_argument("--mode", choices=("verify", "identify", "quality-study"), required=True)
    e.add_argument("--method", choices=("image-only", "flf", "tgfr"), default="tgfr")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", action="append", required=True,
                   help="bundle path; for quality-study use method=path, repeatable")
    e.add_argument("--protocol", help="pair list file (verify); built from splits if omitted")
    e.add_argument("--probe-only-captions", action="store_true",
                   help="fuse captions on the probe side only; references are image-only")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default=_default_out())

    x = sub.add_parser("extract", help="write embeddings for every record")
    x.add_argument("--what", choices=("global", "fused", "caption"), required=True)
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True, help="output matrix file")

    return parser


def _load_records(manifest: str):
    records = data_mod.load_manifest(manifest)
    return records, Path(manifest).parent


def cmd_gen_data(args) -> int:
    summary = data_mod.generate_synthetic(
        args.subjects, args.images_per_subject, args.captions, args.seed,
        args.out, image_size=args.image_size)
    print(f"subjects={summary.n_subjects} images={summary.n_images} "
          f"captions={summary.n_captions} vocab={summary.vocab_size}")
    print(f"manifest: {summary.manifest_path}")
    return 0


def cmd_train(args, parser) -> int:
    if args.out is None:
        parser.error("--out is required (or set XMAL_CACHE_DIR)")
    if args.stage == 2 and not args.from_stage1:
        parser.error("--stage 2 requires --from-stage1")
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.deterministic:
        cfg.deterministic = True
    if args.fusion:
        cfg.stage2.fusion = args.fusion
    if args.epochs is not None:
        if args.stage == 1:
            cfg.stage1.epochs = args.epochs
        else:
            cfg.stage2.epochs = args.epochs
    records, root = _load_records(args.data)
    if args.stage == 1:
        path = train_stage1(cfg, records, root, args.out, resume=args.resume)
    else:
        path = train_stage2(cfg, records, root, args.from_stage1, args.out)
    print(f"checkpoint: {path}")
    return 0


def _checkpoint_map(args, parser) -> dict[str, str]:
    mapping = {}
    for spec_item in args.checkpoint:
        if "=" in spec_item:
            method, path = spec_item.split("=", 1)
        else:
            method, path = args.method, spec_item
        if method not in ("image-only", "flf", "tgfr"):
            parser.error(f"unknown method {method!r} in --checkpoint")
        mapping[method] = path
    return mapping


def _embed_all(embedder: Embedder, records, root, method: str) -> dict[str, np.ndarray]:
    out = {}
    for rec in records:
        image = data_mod.load_image(rec, root)
        out[rec.record_id] = embedder.embed_record(method, rec, image)
    return out


def _report_json(report: ev.VerificationReport) -> dict:
    return {
        "eer": report.eer,
        "tar_at_far": {f"{k:g}": v for k, v in report.tar_at_far.items()},
        "rank1": report.rank1,
        "n_genuine": report.n_genuine,
        "n_impostor": report.n_impostor,
        "notes": report.notes,
    }


def cmd_eval(args, parser) -> int:
    if args.out is None:
        parser.error("--out is required (or set XMAL_CACHE_DIR)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records, root = _load_records(args.data)
    probes = data_mod.by_split(records, "probe")
    gallery = data_mod.by_split(records, "gallery")
    ckpts = _checkpoint_map(args, parser)

    if args.mode == "verify":
        embedder = Embedder.from_path(ckpts[args.method])
        if args.protocol:
            pairs = ev.read_protocol(args.protocol)
        else:
            pairs = ev.build_protocol(probes, gallery)
            ev.write_protocol(pairs, out / "protocol.tsv")
        probe_emb = _embed_all(embedder, probes, root, args.method)
        if args.probe_only_captions and args.method != "image-only":
            if embedder.cfg.model.d_fused != embedder.cfg.model.d_global:
                raise ev.ProtocolError(
                    "probe-only captioning needs d_fused == d_global")
            ref_emb = _embed_all(embedder, gallery, root, "image-only")
        else:
            ref_emb = _embed_all(embedder, gallery, root, args.method)
        scores = ev.score_pairs(pairs, probe_emb, ref_emb)
        report = ev.compute_roc(scores, [p.genuine for p in pairs])
        for note in report.notes:
            print(f"warning: {note}")
        report.write_roc_csv(out / "roc.csv")
        (out / "report.json").write_text(
            json.dumps({"mode": "verify", "method": args.method,
                        "probe_only_captions": bool(args.probe_only_captions),
                        **_report_json(report)}, indent=2) + "\n", encoding="utf-8")
        printable = {f"{k:g}": ("n/a" if v is None else f"{v:.4f}")
                     for k, v in report.tar_at_far.items()}
        print(f"method={args.method} eer={report.eer:.4f} tar@far={printable}")
        return 0

    if args.mode == "identify":
        embedder = Embedder.from_path(ckpts[args.method])
        gallery_emb = _embed_all(embedder, gallery, root, args.method)
        probe_emb = _embed_all(embedder, probes, root, args.method)
        rank1 = ev.rank1_identify(
            [r.subject_id for r in gallery],
            np.stack([gallery_emb[r.record_id] for r in gallery]),
            [r.subject_id for r in probes],
            np.stack([probe_emb[r.record_id] for r in probes]))
        (out / "report.json").write_text(
            json.dumps({"mode": "identify", "method": args.method, "rank1": rank1},
                       indent=2) + "\n", encoding="utf-8")
        print(f"method={args.method} rank1={rank1:.4f}")
        return 0

    # quality study over every method given via --checkpoint method=path
    embedders = {m: Embedder.from_path(p) for m, p in ckpts.items()}
    embed_fns = {m: (lambda rec, img, _e=e, _m=m: _e.embed_record(_m, rec, img))
                 for m, e in embedders.items()}
    results = ev.quality_study(probes, gallery, embed_fns, embed_fns,
                               lambda rec: data_mod.load_image(rec, root),
                               seed=args.seed)
    table = {}
    for (method, level), report in sorted(results.items()):
        table[f"{method}/level{level}"] = _report_json(report)
        report.write_roc_csv(out / f"roc_{method}_level{level}.csv")
        print(f"{method:>10s} level {level} ({ev.QUALITY_LABELS[level]:>8s}): "
              f"eer={report.eer:.4f} rank1={report.rank1:.4f}")
    (out / "quality_study.json").write_text(
        json.dumps({"mode": "quality-study", "levels": ev.QUALITY_LABELS,
                    "results": table}, indent=2) + "\n", encoding="utf-8")
    return 0


def write_embedding_matrix(path: str | Path, ids: list[str], matrix: np.ndarray) -> None:
    """Binary matrix file: u64 count, u64 dim, float32 row-major data."""
    mat = np.ascontiguousarray(matrix, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<QQ", mat.shape[0], mat.shape[1]))
        fh.write(mat.tobytes())
    Path(str(path) + ".ids").write_text("\n".join(ids) + "\n", encoding="utf-8")


def read_embedding_matrix(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, "rb") as fh:
        count, dim = struct.unpack("<QQ", fh.read(16))
        matrix = np.frombuffer(fh.read(count * dim * 4), dtype="<f4").reshape(count, dim)
    ids = Path(str(path) + ".ids").read_text(encoding="utf-8").splitlines()
    return ids, matrix.copy()


def cmd_extract(args) -> int:
    records, root = _load_records(args.data)
    embedder = Embedder.from_path(args.checkpoint)
    rows, ids = [], []
    for rec in records:
        if args.what == "caption":
            rows.append(embedder.embed_caption(rec.captions[0]))
        elif args.what == "global":
            image = data_mod.load_image(rec, root)
            rows.append(embedder.embed_image_only(image))
        else:
            image = data_mod.load_image(rec, root)
            rows.append(embedder.embed_fused(image, rec.captions[0]))
        ids.append(rec.record_id)
    write_embedding_matrix(args.out, ids, np.stack(rows))
    print(f"wrote {len(ids)} x {rows[0].shape[0]} embeddings to {args.out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gen-data":
            code = cmd_gen_data(args)
        elif args.command == "train":
            code = cmd_train(args, parser)
        elif args.command == "eval":
            code = cmd_eval(args, parser)
        else:
            code = cmd_extract(args)
    except SystemExit:
        raise
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit 1
        print(f"STATUS error: {exc}")
        return 1
    print("STATUS ok")
    return code


if __name__ == "__main__":
    sys.exit(main())
