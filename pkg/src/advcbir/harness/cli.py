"""Command line interface.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .. import bovw, globalfeat
from ..errors import ConfigError, DataError, NumericError
from ..evalmetrics import average_precision, mean_average_precision, ssim
from ..imagecore import calibrate_noise_to_ssim, load_image, save_image, to_grayscale
from ..localfeat import detect_and_describe
from .dataset import SynthSpec, build_synthetic_dataset, load_dataset
from .experiment import (
    AttackCache,
    ExperimentConfig,
    apply_attack,
    make_attack_extractor,
    make_backend,
    roundtrip_8bit,
    run_experiment,
    run_leak_experiment,
)
from .report import (
    emit_leak_report,
    emit_report,
    render_leak_figure,
    render_report_figures,
)


def _load_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        cfg = ExperimentConfig.from_json(path.read_text())
    else:
        cfg = ExperimentConfig()
    if getattr(args, "backend", None):
        cfg.backend = args.backend
    if getattr(args, "queries", None):
        cfg.query_mode = args.queries.upper()
    if getattr(args, "seed", None) is not None:
        cfg.seeds["attack"] = args.seed
        cfg.seeds["noise"] = args.seed
    cfg.validate()
    return cfg


def _out_dir(args) -> Path:
    out = Path(getattr(args, "out", None) or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth_data(args) -> int:
    spec = SynthSpec(classes=args.classes, views_per_class=args.views,
                     distractors=args.distractors, image_size=args.size,
                     jitter=args.jitter)
    seed = args.seed if args.seed is not None else 42
    manifest = build_synthetic_dataset(spec, seed, args.out or "out")
    print(f"dataset {manifest.name}: {len(manifest.image_ids())} images, "
          f"{len(manifest.queries)} queries -> {args.out or 'out'}")
    return 0


def cmd_index(args) -> int:
    cfg = _load_config(args)
    manifest = load_dataset(args.data)
    out = _out_dir(args)
    images = {name: manifest.load(name) for name in manifest.image_ids()}
    backend = make_backend(cfg)
    backend.index(images)
    if cfg.backend == "bovw":
        bovw.save_index(backend.index_, out / "index_header.json", out / "index_postings.bin")
        print(f"bovw index ({backend.index_.size} images) -> {out}")
    elif cfg.backend == "neural":
        globalfeat.save_vectors_jsonl(out / "features_neural.jsonl", backend.features, "neural")
        print(f"neural features ({len(backend.features)} images) -> {out}")
    else:
        globalfeat.save_vectors_jsonl(out / f"features_{cfg.backend}.jsonl",
                                      backend.vectors, cfg.backend)
        print(f"{cfg.backend} vectors ({len(backend.vectors)} images) -> {out}")
    return 0


def cmd_attack(args) -> int:
    cfg = _load_config(args)
    if cfg.attack == "none":
        raise ConfigError("attack subcommand needs a config with attack != none")
    manifest = load_dataset(args.data)
    out = _out_dir(args)
    extractor = make_attack_extractor(cfg) if cfg.attack in ("pire", "pire_refined") else None
    cache = AttackCache()
    rows = []
    for query in manifest.queries:
        img = manifest.load(query.image_id)
        if cfg.query_mode == "BB" and query.bbox is not None:
            from ..imagecore import crop_box
            img = crop_box(img, *query.bbox)
        attacked = roundtrip_8bit(apply_attack(img, cfg, extractor, cache))
        path = out / f"{query.query_id}_{cfg.attack}.png"
        save_image(attacked, path)
        rows.append((query.query_id, ssim(img, attacked), str(path)))
    with open(out / "attack_ssim.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_id", "ssim", "path"])
        writer.writerows(rows)
    print(f"attacked {len(rows)} queries -> {out} (mean SSIM "
          f"{np.mean([r[1] for r in rows]):.4f})")
    return 0


def cmd_query(args) -> int:
    cfg = _load_config(args)
    manifest = load_dataset(args.data)
    img = load_image(args.image)
    images = {name: manifest.load(name) for name in manifest.image_ids()}
    backend = make_backend(cfg)
    backend.index(images)
    ranked = backend.rank(roundtrip_8bit(img))[: args.top]
    out = _out_dir(args)
    path = out / "ranking.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_id", "image_id", "score"])
        for name, score in ranked:
            writer.writerow([args.query_id, name, repr(score)])
    for name, score in ranked[:10]:
        print(f"{name}\t{score:.6f}")
    print(f"ranking -> {path}")
    return 0


def cmd_evaluate(args) -> int:
    manifest = load_dataset(args.data)
    rankings: dict = {}
    with open(args.rankings, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rankings.setdefault(rec["query_id"], []).append(rec["image_id"])
    if not rankings:
        raise DataError(f"no ranking rows in {args.rankings}")
    aps = {}
    for qid, ranked in rankings.items():
        if qid not in manifest.judgments:
            raise DataError(f"ranking references unknown query {qid!r}")
        ranked = [n for n in ranked if n != next(
            q.image_id for q in manifest.queries if q.query_id == qid)]
        aps[qid] = average_precision(ranked, manifest.judgments[qid])
    for qid in sorted(aps):
        print(f"{qid}\tAP {100.0 * aps[qid]:.2f}")
    print(f"mAP {mean_average_precision(aps.values()):.2f}")
    return 0


def cmd_experiment(args) -> int:
    cfg = _load_config(args)
    manifest = load_dataset(args.data)
    report = run_experiment(cfg, manifest, cache=AttackCache())
    out = _out_dir(args)
    emit_report(report, out / "report.csv", "csv")
    emit_report(report, out / "report.md", "markdown")
    written = [out / "report.csv", out / "report.md"]
    if not args.no_figures:
        written += render_report_figures(report, out)
    print(f"mAP {report.map_percent:.2f}  mean SSIM {report.mean_ssim:.4f}  "
          f"({report.runtime_s:.1f}s)")
    for p in written:
        print(f"wrote {p}")
    return 0


def cmd_leak(args) -> int:
    cfg = _load_config(args)
    if cfg.attack == "none":
        cfg.attack = "pire_refined"
    manifest = load_dataset(args.data)
    report = run_leak_experiment(cfg, manifest, args.query_id, cache=AttackCache())
    out = _out_dir(args)
    emit_leak_report(report, out / f"leak_{args.query_id}.csv", "csv")
    emit_leak_report(report, out / f"leak_{args.query_id}.md", "markdown")
    if not args.no_figures:
        render_leak_figure(report, out)
    for row in report.rows:
        print(f"{row.background:>14} / {row.query:<16} AP {100.0 * row.ap:.2f}")
    return 0


def cmd_noise_calibrate(args) -> int:
    img = load_image(args.image)
    seed = args.seed if args.seed is not None else 0
    sigma = calibrate_noise_to_ssim(img, args.target_ssim, args.tol, seed)
    print(f"sigma {sigma:.6f}")
    if args.out:
        from ..imagecore import add_gaussian_noise
        out = _out_dir(args)
        noisy = add_gaussian_noise(img, sigma, seed)
        path = out / (Path(args.image).stem + "_noisy.png")
        save_image(noisy, path)
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advcbir",
                                     description="CBIR back-ends and adversarial query experiments")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON file")
    common.add_argument("--seed", type=int, help="override the attack/noise seed")
    common.add_argument("--out", help="output directory (default ./out)")
    common.add_argument("--backend", choices=["neural", "bovw", "cedd", "gist"])
    common.add_argument("--queries", choices=["bb", "wi"], help="query mode")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--views", type=int, default=5)
    p.add_argument("--distractors", type=int, default=150)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--jitter", type=float, default=1.0)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("index", parents=[common], help="build and persist a backend index")
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_index)

    p = sub.add_parser("attack", parents=[common], help="write attacked query images")
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("query", parents=[common], help="rank one image against a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--query-id", default="query")
    p.add_argument("--top", type=int, default=100)
    p.set_defaults(fn=cmd_query)

    p = sub.add_parser("evaluate", parents=[common], help="score ranking CSVs against ground truth")
    p.add_argument("--data", required=True)
    p.add_argument("--rankings", required=True,
                   help="CSV with query_id,image_id[,score] rows in rank order")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("experiment", parents=[common], help="run a full experiment")
    p.add_argument("--data", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("leak", parents=[common], help="background replacement experiment")
    p.add_argument("--data", required=True)
    p.add_argument("--query-id", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(fn=cmd_leak)

    p = sub.add_parser("noise-calibrate", parents=[common],
                       help="find the noise sigma matching a target SSIM")
    p.add_argument("--image", required=True)
    p.add_argument("--target-ssim", type=float, required=True)
    p.add_argument("--tol", type=float, default=0.01)
    p.set_defaults(fn=cmd_noise_calibrate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
