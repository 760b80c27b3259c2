"""``rankcount`` command line: synth, rankgen, train, eval, report, replay."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import SceneParams, Sources, generate_scene, image_ids, load_corpus, load_image_by_id, save_corpus
from .density import render_density, save_pgm
from .evaluation import EvalReport, evaluate, predict_density, transfer_eval
from .model import load_checkpoint
from .rankgen import ChainInfeasible, generate_chain, load_chains, save_chains
from .trainer import PRESETS, REGIMES, Trainer, load_config_file, make_config, parse_overrides

log = logging.getLogger("rankcount")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse with exit code 1 on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        valid = sorted({s for a in self._actions for s in a.option_strings})
        hint = f"\nvalid flags: {' '.join(valid)}" if "unrecognized" in message else ""
        self.exit(1, f"{self.prog}: error: {message}{hint}\n")


def default_seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("RANKCOUNT_SEED")
    return int(env) if env else 0


def _derive_seed(*parts) -> int:
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def write_manifest(path: Path, sub: str, argv: list[str], config: dict, seeds: dict, inputs: dict, outputs: dict, started: float) -> None:
    manifest = {
        "subcommand": sub,
        "argv": argv,
        "config": config,
        "seeds": seeds,
        "inputs": inputs,
        "outputs": outputs,
        "version": __version__,
        "wall_clock_s": round(time.time() - started, 3),
    }
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))


# -- subcommands ---------------------------------------------------------------
def cmd_synth(args, argv, started) -> None:
    try:
        h, w = (int(v) for v in args.size.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size must look like HxW, got {args.size!r}")
    if args.min_count > args.max_count:
        raise UsageError("--min-count exceeds --max-count")
    seed = default_seed(args.seed)
    rng = np.random.default_rng(seed)
    scenes = []
    for i in range(args.scenes):
        count = int(rng.integers(args.min_count, args.max_count + 1))
        params = SceneParams(h, w, float(count), perspective=args.perspective, clutter=args.clutter, exact=True)
        scene_rng = np.random.default_rng([seed, i])
        s = generate_scene(params, scene_rng, f"{args.prefix}{i:05d}")
        scenes.append((s.image, s.annotation))
    out = Path(args.out)
    save_corpus(out, scenes)
    write_manifest(
        out / "manifest.json", "synth", argv,
        {"scenes": args.scenes, "min_count": args.min_count, "max_count": args.max_count, "size": [h, w],
         "perspective": args.perspective, "clutter": args.clutter, "prefix": args.prefix},
        {"seed": seed}, {}, {"dir": str(out)}, started,
    )
    print(f"wrote {len(scenes)} scenes to {out}")


def cmd_rankgen(args, argv, started) -> None:
    seed = default_seed(args.seed)
    corpus = Path(args.corpus)
    chains, skipped = [], []
    for image_id in image_ids(corpus):
        image = load_image_by_id(corpus, image_id)
        size = (image.shape[2], image.shape[1])
        for j in range(args.per_image):
            chain_seed = _derive_seed(seed, image_id, j)
            try:
                chains.append(
                    generate_chain(size, args.k, args.s, args.r, np.random.default_rng(chain_seed),
                                   anchor_mode=args.anchor_mode, image_id=image_id, seed=chain_seed)
                )
            except ChainInfeasible as exc:
                skipped.append(image_id)
                log.warning("skipping %s: %s", image_id, exc)
                break
    if not chains:
        raise RuntimeError(f"no feasible chains in {corpus} (k={args.k}, s={args.s}, r={args.r})")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_chains(out, chains)
    write_manifest(
        Path(str(out) + ".manifest.json"), "rankgen", argv,
        {"k": args.k, "s": args.s, "r": args.r, "anchor_mode": args.anchor_mode, "per_image": args.per_image},
        {"seed": seed}, {"corpus": str(corpus)}, {"chains": str(out), "skipped": skipped}, started,
    )
    print(f"wrote {len(chains)} chains to {out} ({len(skipped)} images skipped)")


def _train_config(args):
    file_values = load_config_file(args.config) if args.config else {}
    overrides = parse_overrides(dict(kv.split("=", 1) for kv in args.set)) if args.set else {}
    overrides["regime"] = args.regime
    for name in ("iterations", "lam", "lr", "seed"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    if "seed" not in overrides and "seed" not in file_values:
        overrides["seed"] = default_seed(None)
    return make_config(args.preset, file_values, overrides)


def cmd_train(args, argv, started) -> None:
    cfg = _train_config(args)
    labeled = load_corpus(args.labeled)
    chains, unlabeled = [], {}
    if cfg.regime != "counting":
        if not args.chains:
            raise UsageError(f"--chains is required for regime {cfg.regime}")
        chains = load_chains(args.chains)
        corpus = Path(args.unlabeled) if args.unlabeled else Path(args.chains).parent
        unlabeled = {cid: load_image_by_id(corpus, cid) for cid in sorted({c.image_id for c in chains})}
    sources = Sources(labeled, chains, unlabeled)
    net = cfg.init_net()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(net, sources, cfg, out_dir=out)
    trainer.run()
    trainer.log.write_csv(out / "train_log.csv")
    write_manifest(
        out / "manifest.json", "train", argv, cfg.to_dict(), {"seed": cfg.seed, "init_seed": cfg.init_seed},
        {"labeled": str(args.labeled), "chains": args.chains, "unlabeled": args.unlabeled, "config": args.config},
        {"dir": str(out), "checkpoint": str(out / "final.ckpt"), "log": str(out / "train_log.csv")}, started,
    )
    print(f"trained {cfg.regime} for {len(trainer.log.records)} iterations; checkpoint {out / 'final.ckpt'}")


def cmd_eval(args, argv, started) -> None:
    dataset = load_corpus(args.dataset)
    dataset_id = args.dataset_id or Path(args.dataset).name
    if args.cross_dataset:
        report = transfer_eval(args.checkpoint, dataset, dataset_id)
    else:
        net, _ = load_checkpoint(args.checkpoint)
        report = evaluate(net, dataset, dataset_id)
    report.label = args.label or Path(args.checkpoint).parent.name
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out)
    report.write_json(out.with_suffix(".json"))
    write_manifest(
        Path(str(out) + ".manifest.json"), "eval", argv, {"cross_dataset": args.cross_dataset, "label": report.label},
        {}, {"checkpoint": str(args.checkpoint), "dataset": str(args.dataset)}, {"csv": str(out), "json": str(out.with_suffix(".json"))},
        started,
    )
    print(f"MAE {report.mae:.3f}  MSE {report.mse:.3f}  over {len(report.true)} images")


def comparison_table(reports: list[EvalReport]) -> tuple[str, str]:
    """Markdown and CSV tables of label x {MAE, MSE}, sorted by MAE."""
    ids = {r.dataset_id for r in reports}
    if len(ids) > 1:
        raise ValueError(f"reports come from different datasets: {sorted(ids)}")
    rows = sorted(reports, key=lambda r: r.mae)
    md = ["| run | MAE | MSE |", "|---|---:|---:|"]
    md += [f"| {r.label} | {r.mae:.3f} | {r.mse:.3f} |" for r in rows]
    csv_lines = ["run,MAE,MSE"] + [f"{r.label},{r.mae!r},{r.mse!r}" for r in rows]
    return "\n".join(md) + "\n", "\n".join(csv_lines) + "\n"


def _upsample(grid: np.ndarray, stride: int, h: int, w: int) -> np.ndarray:
    return np.kron(grid, np.ones((stride, stride)))[:h, :w] / (stride * stride)


def density_triptych(checkpoint, dataset_dir, image_id: str | None, out: Path, sigma: float = 15.0) -> list[Path]:
    """image / ground-truth / predicted density PGMs, all at image resolution."""
    net, _ = load_checkpoint(checkpoint)
    dataset = load_corpus(dataset_dir)
    pick = next((d for d in dataset if image_id is None or d[1].image_id == image_id), None)
    if pick is None:
        raise KeyError(f"image {image_id!r} not in {dataset_dir}")
    image, ann = pick
    h, w = image.shape[1:]
    s = net.output_stride
    cells = (-(-h // s), -(-w // s))
    # render over the stride-padded extent so cells line up with the prediction
    gt = render_density(type(ann)(ann.image_id, ann.points, cells[1] * s, cells[0] * s), sigma, cells).grid
    pred = predict_density(net, image)
    paths = [out / f"{ann.image_id}_image.pgm", out / f"{ann.image_id}_gt.pgm", out / f"{ann.image_id}_pred.pgm"]
    save_pgm(paths[0], image.mean(axis=0))
    save_pgm(paths[1], _upsample(gt, s, h, w))
    save_pgm(paths[2], _upsample(pred, s, h, w))
    return paths


def _read_report(path: str) -> EvalReport:
    p = Path(path)
    if p.suffix == ".csv":
        p = p.with_suffix(".json")
    if not p.exists():
        raise FileNotFoundError(f"report not found: {p}")
    return EvalReport.read_json(p)


def cmd_report(args, argv, started) -> None:
    reports = [_read_report(p) for p in args.reports]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    md, csv_text = comparison_table(reports)
    (out / "comparison.md").write_text(md)
    (out / "comparison.csv").write_text(csv_text)
    outputs = {"markdown": str(out / "comparison.md"), "csv": str(out / "comparison.csv")}
    if args.checkpoint and args.dataset:
        outputs["pgm"] = [str(p) for p in density_triptych(args.checkpoint, args.dataset, args.image_id, out)]
    write_manifest(out / "manifest.json", "report", argv, {}, {}, {"reports": args.reports}, outputs, started)
    print(md, end="")


def cmd_replay(args, argv, started) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    return main(manifest["argv"])


# -- parser --------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = Parser(prog="rankcount", description="Crowd counting with ranked self-supervision.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=Parser, required=True)

    s = sub.add_parser("synth", help="write a synthetic annotated corpus")
    s.add_argument("--scenes", type=int, required=True)
    s.add_argument("--min-count", type=int, default=10)
    s.add_argument("--max-count", type=int, default=100)
    s.add_argument("--size", default="192x192", help="HxW")
    s.add_argument("--perspective", type=float, default=0.0)
    s.add_argument("--clutter", type=float, default=0.5)
    s.add_argument("--prefix", default="img")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)

    r = sub.add_parser("rankgen", help="generate ranked patch chains for an unlabeled corpus")
    r.add_argument("--corpus", required=True)
    r.add_argument("--k", type=int, default=5)
    r.add_argument("--s", type=float, default=0.75)
    r.add_argument("--r", type=float, default=8.0)
    r.add_argument("--anchor-mode", choices=("area", "side"), default="area")
    r.add_argument("--per-image", type=int, default=1)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one regime")
    t.add_argument("--regime", choices=REGIMES, required=True)
    t.add_argument("--labeled", required=True)
    t.add_argument("--chains")
    t.add_argument("--unlabeled", help="directory holding the chains' images (default: the chains file's directory)")
    t.add_argument("--config", help="flat key = value file")
    t.add_argument("--preset", choices=sorted(PRESETS), default="toy")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")
    t.add_argument("--iterations", type=int)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint on an annotated corpus")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--dataset-id")
    e.add_argument("--label")
    e.add_argument("--cross-dataset", action="store_true", help="tag the report as a transfer evaluation")
    e.add_argument("--out", required=True)

    c = sub.add_parser("report", help="comparison table and density visualizations")
    c.add_argument("reports", nargs="+", help="eval report .csv or .json files")
    c.add_argument("--checkpoint")
    c.add_argument("--dataset")
    c.add_argument("--image-id")
    c.add_argument("--out", required=True)

    m = sub.add_parser("replay", help="re-run a command from its manifest")
    m.add_argument("manifest")
    p.subcommands = sub.choices
    return p


COMMANDS = {
    "synth": cmd_synth,
    "rankgen": cmd_rankgen,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
    "replay": cmd_replay,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra:
            # report unknown flags against the subcommand so its own flags get listed
            parser.subcommands[args.command].error(f"unrecognized arguments: {' '.join(extra)}")
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = time.time()
    try:
        rc = COMMANDS[args.command](args, argv, started)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"rankcount: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"rankcount: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 2
    return rc or 0


def run() -> None:
    """Console-script entry point."""
    sys.exit(main())


if __name__ == "__main__":
    run()
