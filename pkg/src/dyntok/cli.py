"""Command-line entry point: ``dyntok {cluster,run,bench,gen-weights}``."""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import io as tio
from .backbone import ModelConfig, check_weights, classify, complexity_plan, forward, init_weights
from .clustering import cluster_global, cluster_local
from .errors import DyntokError, FormatError
from .mta import mta_forward
from .probe import AttentionProbe
from .tensor import F32
from .tokens import TokenSet


def read_feature_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    header, body = rows[0], [r for r in rows[1:] if r]
    if not body:
        raise FormatError(f"{path}: no data rows")
    try:
        values = np.array([[float(v) for v in r] for r in body], dtype=F32)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if values.ndim != 2 or values.shape[1] != len(header):
        raise FormatError(f"{path}: rows do not match the {len(header)}-column header")
    return header, values


def cluster_csv(features: np.ndarray, clusters: int, knn: int, parts: int = 1):
    """Cluster CSV rows. With parts > 1 the rows are read as a square pixel grid in row-major order."""
    n = len(features)
    if parts == 1:
        return cluster_global(features, clusters, knn)
    side = math.isqrt(n)
    if side * side != n:
        raise FormatError(f"--parts needs a square number of rows, got {n}")
    tokens = TokenSet(features, np.zeros(n, dtype=F32), np.arange(n).reshape(side, side), side, side)
    return cluster_local(tokens, parts, clusters / n, knn)


def cmd_cluster(args) -> int:
    header, feats = read_feature_csv(args.input)
    result = cluster_csv(feats, args.clusters, args.knn, args.parts)
    out = open(args.output, "w", newline="", encoding="utf-8") if args.output else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(header + ["assignment"])
        for row, a in zip(feats, result.assignment):
            writer.writerow([tio.f32_value(v) for v in row] + [int(a)])
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def _load_config(path) -> ModelConfig:
    return ModelConfig.from_json(path) if path else ModelConfig()


def cmd_run(args) -> int:
    config = _load_config(args.config)
    image = tio.load_ppm(args.image)
    if args.weights:
        weights = tio.load_weights(args.weights)
        check_weights(weights, config)
    else:
        weights = init_weights(config, args.seed)
    with AttentionProbe(keep_weights=bool(args.attn_dump)) as probe:
        pyramid = forward(image, config, weights)
        logits = classify(pyramid, weights)
        mta = mta_forward(pyramid, config, weights, args.mta) if args.mta else None
    extra = {
        "config": config.to_dict(),
        "seed": args.seed if args.seed is not None else config.seed,
        "weights": "file" if args.weights else "generated",
        "logits": [tio.f32_value(v) for v in logits],
        "prediction": int(np.argmax(logits)),
        "pyramid_digest": pyramid.digest(),
    }
    if mta is not None:
        extra["mta"] = {"variant": args.mta, "levels": [list(s) for s in mta.shapes],
                        "kv_counts": mta.kv_counts}
    report = tio.build_report(pyramid, probe.macs, config.ctm_parts, extra)
    Path(args.report).write_text(json.dumps(report.to_dict(), separators=(",", ":")) + "\n", encoding="utf-8")
    if args.overlay_dir:
        out = Path(args.overlay_dir)
        out.mkdir(parents=True, exist_ok=True)
        for s in range(len(report.stages)):
            tio.save_token_overlay(report, s, out / f"stage{s + 1}_tokens.ppm")
            tio.save_density_map(report, s, out / f"stage{s + 1}_density.ppm")
    if args.attn_dump:
        out = Path(args.attn_dump)
        out.mkdir(parents=True, exist_ok=True)
        for i, event in enumerate(probe.events):
            np.save(out / f"{i:03d}_{event.name}.npy", event.weights)
    return 0


def bench_summary(config: ModelConfig, height: int, width: int) -> dict:
    local = complexity_plan(config, height, width)
    glob = complexity_plan(config, height, width, parts=(1, 1, 1))
    per_ctm = []
    for lc, gc in zip(local["ctm"], glob["ctm"]):
        per_ctm.append({"index": lc["index"], "parts": lc["parts"], "global_dist_ops": gc["dist_ops"],
                        "local_dist_ops": lc["dist_ops"], "ratio": gc["dist_ops"] / lc["dist_ops"]})
    return {
        "size": [height, width],
        "token_counts": local["token_counts"],
        "ctm": per_ctm,
        "global_dist_ops": glob["dist_ops"],
        "local_dist_ops": local["dist_ops"],
        "ratio": glob["dist_ops"] / local["dist_ops"],
        "reduction": 1.0 - local["dist_ops"] / glob["dist_ops"],
        "attention_macs": local["attention_macs"],
    }


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise FormatError(f"size must look like HxW, got {text!r}") from None
    return h, w


def cmd_bench(args) -> int:
    h, w = _parse_size(args.size)
    print(json.dumps(bench_summary(_load_config(args.config), h, w), indent=2))
    return 0


def cmd_gen_weights(args) -> int:
    config = _load_config(args.config)
    tio.save_weights(init_weights(config, args.seed), args.out)
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise FormatError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dyntok", description="Dynamic vision token engine.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cluster", help="DPC-kNN clustering of CSV feature rows")
    p.add_argument("--input", required=True)
    p.add_argument("--clusters", type=int, required=True)
    p.add_argument("--knn", type=int, default=5)
    p.add_argument("--parts", type=int, default=1)
    p.add_argument("--output")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("run", help="forward pass with token maps and report")
    p.add_argument("--image", required=True)
    p.add_argument("--config")
    p.add_argument("--weights")
    p.add_argument("--seed", type=int)
    p.add_argument("--report", required=True)
    p.add_argument("--overlay-dir")
    p.add_argument("--mta", choices=("sr", "cr"))
    p.add_argument("--attn-dump")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="clustering and attention cost, global vs. local CTM")
    p.add_argument("--config")
    p.add_argument("--size", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-weights", help="write seeded fixture weights")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_weights)
    return parser


def run_cli(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    except FormatError as exc:
        print(f"dyntok: error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (DyntokError, OSError, ValueError) as exc:
        print(f"dyntok: error: {exc}".replace("\n", " "), file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())
