"""Command-line entry point: ``mscanet {synth,train,eval,roc,ablate}``.

Every command reads a single JSON experiment config (or a checkpoint) and
writes plain CSV/JSON outputs. Exit codes: 0 success, 2 usage or config
error, 3 numeric failure during training or evaluation.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import SynthConfig, load_dataset, load_samples, split_samples, synth_generate, write_dataset, write_split
from .errors import ConfigError, LoadError, NumericError, ShapeError, UndefinedMetricError
from .metrics import (
    DEFAULT_DIST_PX,
    DEFAULT_THRESHOLD,
    compute_report,
    even_thresholds,
    roc_curve,
    write_roc_csv,
)
from .network import NetworkConfig, build_mscanet, load_checkpoint, read_meta
from .train_eval import TrainConfig, evaluate, predict, train, write_overlays

log = logging.getLogger("mscanet")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

# cumulative order: each row switches on one more block
ABLATION_ROWS = (
    ("baseline", (False, False, False)),
    ("+MSEDA", (True, False, False)),
    ("+MSEDA+PCBAM", (True, True, False)),
    ("+MSEDA+PCBAM+CAB", (True, True, True)),
)
ABLATION_COLUMNS = ("mseda", "pcbam", "cab", "miou", "niou", "pd", "fa_e6")


# ---------------------------------------------------------------------------
# experiment config
# ---------------------------------------------------------------------------

@dataclass
class DataSection:
    root: str
    split_ratio: float = 0.7
    eval_split: str = "test"
    synth: SynthConfig | None = None


@dataclass
class ExperimentConfig:
    network: NetworkConfig
    training: TrainConfig
    data: DataSection
    threshold: float = DEFAULT_THRESHOLD
    dist_px: float = DEFAULT_DIST_PX
    output_dir: Path = Path("runs")
    seed: int = 0
    base_dir: Path = field(default=Path("."), repr=False)

    def resolve(self, path: str | Path) -> Path:
        """Relative paths in a config are taken relative to the config file."""
        path = Path(path)
        return path if path.is_absolute() else self.base_dir / path

    @property
    def data_root(self) -> Path:
        return self.resolve(self.data.root)

    @property
    def out(self) -> Path:
        return self.resolve(self.output_dir)


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"config section '{name}' must be an object")
    return dict(value)


def _check_threshold(value: Any, where: str) -> float:
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where} must be a number, got {value!r}") from None
    if not 0.0 < value < 1.0:
        raise ConfigError(f"{where} must lie strictly inside (0, 1), got {value}")
    return value


def parse_config(raw: dict, base_dir: str | Path = ".") -> ExperimentConfig:
    known = {"network", "training", "data", "metrics", "output_dir", "seed"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")

    try:
        network = NetworkConfig.from_dict(_section(raw, "network"))
    except TypeError as e:
        raise ConfigError(f"network: {e}") from None
    network.validate()

    training_raw = _section(raw, "training")
    training_raw.setdefault("seed", seed)
    training = TrainConfig.from_dict(training_raw)
    training.validate()

    data_raw = _section(raw, "data")
    if "root" not in data_raw:
        raise ConfigError("data.root is required")
    synth = None
    if "synth" in data_raw:
        synth_raw = dict(data_raw.pop("synth") or {})
        synth_raw.setdefault("seed", seed)
        synth = SynthConfig.from_dict(synth_raw)
        synth.validate()
    try:
        data = DataSection(**data_raw, synth=synth)
    except TypeError as e:
        raise ConfigError(f"data: {e}") from None
    if not 0.0 < data.split_ratio <= 1.0:
        raise ConfigError(f"data.split_ratio must lie in (0, 1], got {data.split_ratio}")
    if data.eval_split not in ("train", "test"):
        raise ConfigError(f"data.eval_split must be 'train' or 'test', got {data.eval_split!r}")

    metrics = _section(raw, "metrics")
    unknown = set(metrics) - {"threshold", "dist_px"}
    if unknown:
        raise ConfigError(f"unknown metrics keys: {sorted(unknown)}")
    threshold = _check_threshold(metrics.get("threshold", DEFAULT_THRESHOLD), "metrics.threshold")
    dist_px = float(metrics.get("dist_px", DEFAULT_DIST_PX))
    if dist_px < 0:
        raise ConfigError(f"metrics.dist_px must be non-negative, got {dist_px}")

    return ExperimentConfig(
        network=network,
        training=training,
        data=data,
        threshold=threshold,
        dist_px=dist_px,
        output_dir=Path(raw.get("output_dir", "runs")),
        seed=seed,
        base_dir=Path(base_dir),
    )


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return parse_config(raw, path.parent)


def _write_json(path: Path, body: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _split_info(cfg: ExperimentConfig, train_set, test_set) -> dict:
    ids = "\n".join(s.id for s in train_set) + "|" + "\n".join(s.id for s in test_set)
    return {
        "data_root": str(cfg.data.root),
        "split_ratio": cfg.data.split_ratio,
        "split_seed": cfg.seed,
        "n_train": len(train_set),
        "n_test": len(test_set),
        "split_sha256": hashlib.sha256(ids.encode()).hexdigest(),
    }


def _datasets(cfg: ExperimentConfig):
    train_set, test_set = load_dataset(cfg.data_root, cfg.data.split_ratio, cfg.seed)
    eval_set = train_set if cfg.data.eval_split == "train" else test_set
    if not eval_set:
        raise ConfigError(
            f"data.eval_split '{cfg.data.eval_split}' is empty at split_ratio {cfg.data.split_ratio}"
        )
    return train_set, test_set, eval_set


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    synth = cfg.data.synth or SynthConfig(seed=cfg.seed)
    samples = synth_generate(synth)
    root = write_dataset(samples, cfg.data_root, {"config": synth.to_dict(), "seed": synth.seed})
    print(f"wrote {len(samples)} samples to {root}")
    return EXIT_OK


def _train_one(cfg: ExperimentConfig, network: NetworkConfig, out_dir: Path, train_set, eval_set,
               split: dict, resume: str | None = None) -> Path:
    if resume:
        model, meta = load_checkpoint(resume)
        if model.cfg.to_dict() != network.to_dict():
            raise ConfigError(f"checkpoint {resume} was trained with a different network config")
        start = int(meta["epoch"])
    else:
        model, start = build_mscanet(network, cfg.seed), 0
    extra = {"split": split, "threshold": cfg.threshold, "dist_px": cfg.dist_px}
    return train(
        model, train_set, cfg.training, out_dir,
        eval_set=eval_set, eval_threshold=cfg.threshold, dist_px=cfg.dist_px,
        resume_from=resume, start_epoch=start, meta_extra=extra,
    )


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    train_set, test_set, eval_set = _datasets(cfg)
    out = cfg.out
    write_split(out, train_set, test_set)
    final = _train_one(cfg, cfg.network, out, train_set, eval_set, _split_info(cfg, train_set, test_set), args.resume)
    metrics = read_meta(final).get("metrics", {})
    print(f"final checkpoint: {final}")
    if metrics:
        print(f"{cfg.data.eval_split}: " + json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def _eval_samples(ckpt_meta: dict, data: str, split: str):
    samples = load_samples(data)
    if split == "all":
        return samples
    info = ckpt_meta.get("split")
    if not info:
        raise ConfigError("checkpoint records no split; use --split all")
    train_set, test_set = split_samples(samples, info["split_ratio"], info["split_seed"])
    chosen = train_set if split == "train" else test_set
    if not chosen:
        raise ConfigError(f"--split {split} selects no samples")
    return chosen


def cmd_eval(args) -> int:
    threshold = _check_threshold(args.threshold, "--threshold")
    model, meta = load_checkpoint(args.ckpt)
    samples = _eval_samples(meta, args.data, args.split)
    dist_px = args.dist_px if args.dist_px is not None else meta.get("dist_px", DEFAULT_DIST_PX)
    if args.oracle:
        # debug path: score the ground truth against itself
        probs = [s.mask.astype(float) for s in samples]
    else:
        probs = predict(model, samples)
    report = compute_report(probs, [s.mask for s in samples], threshold, dist_px)
    out = Path(args.out) if args.out else Path(args.ckpt)
    _write_json(out / "report.json", report.to_dict())
    if args.overlays:
        write_overlays(samples, probs, threshold, out / "overlays")
    print(report.summary())
    return EXIT_OK


def _plot_roc(rows, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.plot([r[1] * 1e6 for r in rows], [r[2] for r in rows], marker=".")
    ax.set_xlabel("Fa (x1e-6)")
    ax.set_ylabel("Pd")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_roc(args) -> int:
    if args.steps < 2:
        raise ConfigError(f"--steps must be at least 2, got {args.steps}")
    model, meta = load_checkpoint(args.ckpt)
    samples = _eval_samples(meta, args.data, args.split)
    probs = predict(model, samples)
    dist_px = meta.get("dist_px", DEFAULT_DIST_PX)
    rows = roc_curve(probs, [s.mask for s in samples], even_thresholds(args.steps), dist_px)
    out = Path(args.out) if args.out else Path(args.ckpt)
    out.mkdir(parents=True, exist_ok=True)
    write_roc_csv(out / "roc.csv", rows)
    _plot_roc(rows, out / "roc.png")
    print(f"wrote {len(rows)} ROC points to {out / 'roc.csv'}")
    return EXIT_OK


def _fmt(value) -> str:
    return "n/a" if value is None else f"{value:.2f}"


def ablation_table(rows: list[dict]) -> str:
    """Fixed-width text table, metrics in percent (Fa per million pixels)."""
    mark = {True: "x", False: "-"}
    lines = [f"{'MSEDA':>5} {'PCBAM':>5} {'CAB':>5} {'mIoU':>7} {'nIoU':>7} {'Pd':>7} {'Fa(1e-6)':>9}"]
    for r in rows:
        pd = None if r["pd"] is None else 100 * r["pd"]
        lines.append(
            f"{mark[r['mseda']]:>5} {mark[r['pcbam']]:>5} {mark[r['cab']]:>5} "
            f"{_fmt(100 * r['miou']):>7} {_fmt(100 * r['niou']):>7} {_fmt(pd):>7} {_fmt(r['fa_e6']):>9}"
        )
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    train_set, test_set, eval_set = _datasets(cfg)
    split = _split_info(cfg, train_set, test_set)
    out = cfg.out
    write_split(out, train_set, test_set)

    rows, runs, timing = [], [], {}
    for name, (mseda, pcbam, cab) in ABLATION_ROWS:
        network = NetworkConfig.from_dict(
            {**cfg.network.to_dict(), "use_mseda": mseda, "use_pcbam": pcbam, "use_cab": cab}
        )
        run_dir = out / "ablation" / name.strip("+").replace("+", "_").lower()
        log.info("ablation row %s -> %s", name, run_dir)
        t0 = time.perf_counter()
        final = _train_one(cfg, network, run_dir, train_set, eval_set, split)
        timing[name] = time.perf_counter() - t0
        model, _ = load_checkpoint(final)
        report = evaluate(model, eval_set, cfg.threshold, cfg.dist_px)
        metrics = report.to_dict()
        rows.append({"mseda": mseda, "pcbam": pcbam, "cab": cab,
                     **{k: metrics[k] for k in ("miou", "niou", "pd", "fa_e6")}})
        runs.append({"row": name, "seed": cfg.seed, "split": split, "checkpoint": str(final),
                     "network": network.to_dict()})
        print(f"{name:<18} {report.summary()}")

    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ABLATION_COLUMNS)
        for r in rows:
            writer.writerow([int(r[c]) if isinstance(r[c], bool) else ("" if r[c] is None else repr(r[c]))
                             for c in ABLATION_COLUMNS])
    table = ablation_table(rows)
    (out / "ablation.txt").write_text(table)
    _write_json(out / "ablation.json", {
        "seed": cfg.seed,
        "split": split,
        "eval_split": cfg.data.eval_split,
        "threshold": cfg.threshold,
        "dist_px": cfg.dist_px,
        "training": cfg.training.to_dict(),
        "runs": runs,
    })
    # wall-clock times vary between runs, so they live apart from the byte-stable outputs
    _write_json(out / "ablation_timing.json", {k: round(v, 3) for k, v in timing.items()})
    print(table, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mscanet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic small-target dataset")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one network")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", metavar="CKPT", help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_train)

    def add_eval_args(p):
        p.add_argument("--ckpt", required=True, help="checkpoint directory")
        p.add_argument("--data", required=True, help="dataset root with images/ and masks/")
        p.add_argument("--split", choices=("all", "train", "test"), default="all",
                       help="evaluate on the split recorded in the checkpoint (default: all samples)")
        p.add_argument("--out", help="output directory (default: the checkpoint directory)")

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    add_eval_args(p)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--dist-px", type=float, default=None, help="centroid distance for a target match")
    p.add_argument("--overlays", action="store_true", help="write contour overlays")
    p.add_argument("--oracle", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("roc", help="sweep thresholds and write roc.csv / roc.png")
    add_eval_args(p)
    p.add_argument("--steps", type=int, default=50)
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("ablate", help="run the four-row block ablation")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, LoadError, ShapeError, UndefinedMetricError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
