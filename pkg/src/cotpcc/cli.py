"""Command-line surface: data preparation, training, coding, evaluation,
RD curves, the FPS-vs-learned-sampler ablation, and plots.

Exit codes: 0 ok, 2 usage, 3 data error, 4 digest mismatch, 5 divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .cloud import (
    CloudParseError,
    DatasetSpec,
    DegenerateInputError,
    PointCloud,
    load_cloud,
    partition_blocks,
    synth_dataset,
    write_cloud,
)
from .codec import Bitstream, BitstreamError, DigestMismatchError
from .losses import LossWeights
from .training import (
    TrainConfig,
    TrainingDivergedError,
    compress_cloud,
    decompress_cloud,
    evaluate_cloud,
    fit,
    init_state,
    load_checkpoint,
    save_checkpoint,
    sweep_lambda,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIGEST = 4
EXIT_DIVERGED = 5

RD_CSV_HEADER = "model,lambda,bpp,cd_e3,psnr_db"


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_DATA):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# helpers


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def _load_blocks(dataset_dir: Path) -> list[PointCloud]:
    manifest = dataset_dir / "manifest.json"
    if not manifest.exists():
        raise CliError(f"{dataset_dir}: missing manifest.json")
    meta = json.loads(manifest.read_text())
    return [load_cloud(dataset_dir / name) for name in meta["blocks"]]


def _config_from_args(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        weights=LossWeights(beta=args.beta, gamma=args.gamma, lam=args.lam),
        ratios=tuple(args.ratios),
        seed=args.seed,
        max_steps=args.max_steps,
        sampler=args.sampler,
    )


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--lambda", dest="lam", type=float, default=0.01)
    p.add_argument("--beta", type=float, default=100.0)
    p.add_argument("--gamma", type=float, default=0.001)
    p.add_argument("--ratios", type=float, nargs=3, default=[0.5, 0.5, 0.5])
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--sampler", choices=["learned", "fps"], default="learned")


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.source == "synthetic":
        spec = DatasetSpec(
            points_per_block=args.points, nonuniformity=args.nonuniformity,
            seed=args.seed, n_blocks=args.blocks,
        )
        clouds = synth_dataset(spec)
        source_points = sum(len(c) for c in clouds)
    else:
        scene = load_cloud(args.source)
        source_points = len(scene)
        blocks = partition_blocks(scene, args.cube_edge, args.block_edge)
        clouds = [b.cloud for b in blocks]
    names = []
    for i, c in enumerate(clouds):
        name = f"block_{i:04d}.ply"
        write_cloud(c, out / name, binary=True)
        names.append(name)
    manifest = {
        "blocks": names,
        "seed": args.seed,
        "source": args.source,
        "n_points": [len(c) for c in clouds],
        "source_point_count": source_points,
        "digests": {n: _sha256_file(out / n) for n in names},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {len(names)} blocks to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    clouds = _load_blocks(Path(args.dataset))
    config = _config_from_args(args)
    out = Path(args.out)
    meta = fit(clouds, config, out_dir=out, log_path=out / "train_log.jsonl")
    run_manifest = {
        "config": meta.config,
        "seed": config.seed,
        "steps": meta.step,
        "param_digest": meta.param_digest,
        "dataset_digest": _sha256_file(Path(args.dataset) / "manifest.json"),
    }
    (out / "run_manifest.json").write_text(json.dumps(run_manifest, indent=2))
    print(f"trained {meta.step} steps; checkpoint at {meta.path}")
    return EXIT_OK


def cmd_compress(args) -> int:
    state = load_checkpoint(args.checkpoint)
    cloud = load_cloud(args.input)
    bs = compress_cloud(state, cloud, seed=args.seed)
    bs.write(args.out)
    print(f"{args.input}: {len(cloud)} points -> {bs.payload_bits} payload bits "
          f"({bs.payload_bits / len(cloud):.3f} bpp)")
    return EXIT_OK


def cmd_decompress(args) -> int:
    state = load_checkpoint(args.checkpoint)
    bs = Bitstream.read(args.input)
    rec = decompress_cloud(state, bs)
    write_cloud(PointCloud(rec), args.out, binary=args.out.endswith(".ply"))
    print(f"{args.input}: decoded {rec.shape[0]} points -> {args.out}")
    return EXIT_OK


def _write_rd_rows(path: Path, rows: list[dict]):
    exists = path.exists()
    with open(path, "a", newline="") as f:
        w = csv.writer(f)
        if not exists:
            w.writerow(RD_CSV_HEADER.split(","))
        for r in rows:
            w.writerow([r["model"], f"{r['lambda']:.6g}", f"{r['bpp']:.6g}",
                        f"{r['cd_e3']:.6g}", f"{r['psnr_db']:.6g}"])


def _read_rd_rows(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != RD_CSV_HEADER.split(","):
            raise CliError(f"{path}: unknown CSV schema {reader.fieldnames}")
        rows = []
        for r in reader:
            rows.append({
                "model": r["model"], "lambda": float(r["lambda"]), "bpp": float(r["bpp"]),
                "cd_e3": float(r["cd_e3"]), "psnr_db": float(r["psnr_db"]),
            })
    seen = set()
    for r in rows:
        key = (r["model"], r["lambda"])
        if key in seen:
            raise CliError(f"duplicate RD point {key}")
        seen.add(key)
    return rows


def _evaluate_state(state, clouds, seed=0):
    reports = [evaluate_cloud(state, c, seed=seed) for c in clouds]
    return {
        "bpp": float(np.mean([r.bpp for r in reports])),
        "cd": float(np.mean([r.cd for r in reports])),
        "psnr": float(np.mean([r.psnr_db for r in reports])),
    }


def cmd_evaluate(args) -> int:
    state = load_checkpoint(args.checkpoint)
    clouds = _load_blocks(Path(args.dataset))
    agg = _evaluate_state(state, clouds, seed=args.seed)
    lam = state.config.weights.lam
    _write_rd_rows(Path(args.out), [{
        "model": args.model_name, "lambda": lam, "bpp": agg["bpp"],
        "cd_e3": agg["cd"] * 1e3, "psnr_db": agg["psnr"],
    }])
    print(f"{args.model_name}: bpp={agg['bpp']:.4f} cd={agg['cd']:.6f} psnr={agg['psnr']:.3f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    clouds = _load_blocks(Path(args.dataset))
    rows = []
    for sampler in ("fps", "learned"):
        config = dataclasses.replace(_config_from_args(args), sampler=sampler)
        out = Path(args.out) / sampler if args.out else None
        state = init_state(config)
        fit(clouds, config, out_dir=out, state=state)
        agg = _evaluate_state(state, clouds, seed=config.seed)
        rows.append((sampler, agg))
        print(f"{sampler:8s} bpp={agg['bpp']:.4f} cd_e3={agg['cd'] * 1e3:.4f} psnr={agg['psnr']:.3f}")
    (fps_agg, learned_agg) = rows[0][1], rows[1][1]
    wins = sum([
        learned_agg["bpp"] < fps_agg["bpp"],
        learned_agg["cd"] < fps_agg["cd"],
        learned_agg["psnr"] > fps_agg["psnr"],
    ])
    print(f"learned sampler wins {wins}/3 columns")
    return EXIT_OK


def cmd_rd_curve(args) -> int:
    clouds = _load_blocks(Path(args.dataset))
    config = _config_from_args(args)
    results = sweep_lambda(clouds, config, args.lambdas, out_dir=args.out)
    rows = []
    for lam, meta, state in results:
        agg = _evaluate_state(state, clouds, seed=config.seed)
        rows.append({
            "model": args.model_name, "lambda": lam, "bpp": agg["bpp"],
            "cd_e3": agg["cd"] * 1e3, "psnr_db": agg["psnr"],
        })
        print(f"lambda={lam:g}: bpp={agg['bpp']:.4f} cd_e3={agg['cd'] * 1e3:.4f} "
              f"psnr={agg['psnr']:.3f}")
    _write_rd_rows(Path(args.csv), rows)
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = _read_rd_rows(Path(args.csv))
    models = sorted({r["model"] for r in rows})
    for model in models:
        pts = sorted((r for r in rows if r["model"] == model), key=lambda r: r["bpp"])
        if len(pts) < 2:
            raise CliError(f"model {model!r} has fewer than 2 RD points; refusing to plot")
    fig, (ax_cd, ax_psnr) = plt.subplots(1, 2, figsize=(10, 4))
    for model in models:
        pts = sorted((r for r in rows if r["model"] == model), key=lambda r: r["bpp"])
        bpp = [p["bpp"] for p in pts]
        ax_cd.plot(bpp, [p["cd_e3"] for p in pts], marker="o", label=model)
        ax_psnr.plot(bpp, [p["psnr_db"] for p in pts], marker="o", label=model)
    ax_cd.set_xlabel("Bpp")
    ax_cd.set_ylabel("CD (1e-3)")
    ax_psnr.set_xlabel("Bpp")
    ax_psnr.set_ylabel("PSNR (dB)")
    ax_cd.legend()
    ax_psnr.legend()
    fig.tight_layout()
    fig.savefig(args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cotpcc", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="build a normalized block dataset")
    sp.add_argument("--source", default="synthetic", help="'synthetic' or a scene file")
    sp.add_argument("--out", required=True)
    sp.add_argument("--points", type=int, default=1024)
    sp.add_argument("--blocks", type=int, default=64)
    sp.add_argument("--nonuniformity", type=float, default=0.8)
    sp.add_argument("--cube-edge", type=float, default=100.0)
    sp.add_argument("--block-edge", type=float, default=12.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="train a codec on a prepared dataset")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    _add_train_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("compress", help="encode a cloud file to .cotp")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("input")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_compress)

    sp = sub.add_parser("decompress", help="decode a .cotp file to a cloud")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("input")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_decompress)

    sp = sub.add_parser("evaluate", help="compress+decompress a dataset and append RD rows")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True, help="RD CSV path")
    sp.add_argument("--model-name", default="cotpcc")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("ablate", help="FPS vs learned sampler under matched settings")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", default=None)
    _add_train_flags(sp)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("rd-curve", help="sweep lambda and emit RD rows")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--lambdas", type=float, nargs="+", default=[0.01, 0.1, 1.0])
    sp.add_argument("--csv", required=True)
    sp.add_argument("--out", default=None)
    sp.add_argument("--model-name", default="cotpcc")
    _add_train_flags(sp)
    sp.set_defaults(func=cmd_rd_curve)

    sp = sub.add_parser("plot", help="render CD/PSNR vs Bpp curves from an RD CSV")
    sp.add_argument("--csv", required=True)
    sp.add_argument("--out", required=True, help="SVG or PNG path")
    sp.set_defaults(func=cmd_plot)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DigestMismatchError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIGEST
    except TrainingDivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CloudParseError, DegenerateInputError, BitstreamError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
