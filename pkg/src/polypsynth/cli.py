"""Operator CLI binding the library into reproducible runs.

Every subcommand reads an optional key=value config file, applies --set
overrides, archives the resolved config beside its outputs under a
timestamp+seed run directory, and exits 0 on success / 2 on config
errors / 3 on data errors / 4 on numeric failure. PSYN_THREADS caps
numpy's internal parallelism and must be honored before numpy loads,
hence the lazy imports throughout.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

# key -> (parser, default, help); the single source for config files,
# --set overrides, and the --help key listing
CONFIG_SCHEMA = {
    "seed": (int, 0, "master seed for all randomness"),
    "out_dir": (str, "runs", "root directory for run outputs"),
    # network
    "image_size": (int, 64, "square working resolution (power of two >= 32)"),
    "in_channels": (int, 3, "condition image channels"),
    "out_channels": (int, 3, "generated image channels"),
    "base_width": (int, 64, "channels of the first encoder layer"),
    "width_cap": (int, 512, "maximum channels per layer"),
    "critic_levels": (int, 4, "stride-2 blocks in the critic trunk"),
    "critic_patch_levels": (str, "", "comma resolutions of critic score heads (default size/4,size/16)"),
    "critic_norm": (str, "batch", "critic normalization: batch|none"),
    "dropout_layers": (int, 3, "decoder layers with dropout"),
    "dropout_rate": (float, 0.5, "decoder dropout rate"),
    "dtype": (str, "float32", "parameter precision: float32|float64"),
    # training
    "total_steps": (int, 2000, "generator updates to run"),
    "batch_size": (int, 4, "samples per update (>= 2)"),
    "lr": (float, 2e-4, "Adam learning rate"),
    "beta1": (float, 0.5, "Adam first-moment decay"),
    "beta2": (float, 0.999, "Adam second-moment decay"),
    "critic_iters_per_gen": (int, 5, "critic updates per generator update"),
    "jitter_resize": (int, 0, "upscale size before random crop (0 = auto 1.21875x)"),
    "checkpoint_every": (int, 0, "periodic checkpoint interval (0 = final only)"),
    "lambda_reconst": (float, 100.0, "L1 reconstruction weight"),
    "lambda_gp": (float, 10.0, "gradient penalty weight"),
    "patch_weights": (str, "", "comma weights per critic head (default all 1)"),
    # data
    "image_dir": (str, "", "directory of RGB PNG frames"),
    "mask_dir": (str, "", "directory of mask PNGs matching image filenames"),
    "id_map": (str, "", "CSV filename,polyp_id mapping (optional)"),
    "n_fixtures": (int, 8, "phantom frames to synthesize (fixtures cmd)"),
    "n_ids": (int, 4, "unique phantom polyp identities"),
    # generation
    "p2n_checkpoint": (str, "", "polyp-to-negative model checkpoint"),
    "n2p_checkpoint": (str, "", "negative-to-polyp model checkpoint"),
    "count": (int, 10, "images to generate"),
    "value": (int, -1, "mask grayscale value (-1 = random per request)"),
    "dilate_radius": (float, 10.0, "polyp mask dilation radius in pixels"),
    # evaluation
    "detections": (str, "", "detections CSV frame_id,x1,y1,x2,y2,score"),
    "gt_dir": (str, "", "ground-truth mask PNG directory keyed by frame_id"),
    "counts": (str, "", "prematched counts CSV label,tp,tn,fp,fn"),
    "pred_dir": (str, "", "predicted segmentation mask directory"),
    "sweep_csv": (str, "", "sweep input CSV n_synthetic,tp,tn,fp,fn"),
    # benchmarking
    "bench_sizes": (str, "64,256", "comma image sizes to benchmark"),
    "bench_runs": (int, 20, "timed runs per size (>= 10)"),
}

COMMANDS = (
    "fixtures",
    "train-p2n",
    "train-n2p",
    "generate",
    "eval-det",
    "eval-seg",
    "sweep",
    "bench",
)

REFERENCE_LATENCY_MS_256 = 51.33  # published 256x256 GPU figure, report-only


def _schema_epilog() -> str:
    lines = ["configuration keys (config file and --set):"]
    for key, (typ, default, help_text) in CONFIG_SCHEMA.items():
        lines.append(f"  {key:22s} {typ.__name__:6s} default={default!r:14} {help_text}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    fmt = lambda prog: argparse.RawDescriptionHelpFormatter(prog, max_help_position=28, width=96)
    parser = argparse.ArgumentParser(
        prog="psyn",
        description="Synthetic polyp generation: train, generate, evaluate.",
        epilog=_schema_epilog(),
        formatter_class=fmt,
    )
    sub = parser.add_subparsers(dest="command", metavar="|".join(COMMANDS))
    helps = {
        "fixtures": "write a procedural phantom dataset",
        "train-p2n": "train the polyp-to-negative inpainting model",
        "train-n2p": "train the negative-to-polyp synthesis model",
        "generate": "run the two-stage generation chain and export labels",
        "eval-det": "detection precision/recall/F1 from detections or counts",
        "eval-seg": "segmentation Jaccard/Dice over mask directories",
        "sweep": "synthetic-count sweep report with saturation flag",
        "bench": "generator forward latency statistics",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name], formatter_class=fmt)
        p.add_argument("--config", type=str, default=None, help="key=value config file")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override one config key (repeatable; beats the config file)",
        )
    return parser


def _parse_value(key: str, raw: str):
    from .errors import ConfigError

    typ = CONFIG_SCHEMA[key][0]
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"key {key!r} expects {typ.__name__}, got {raw!r}")


def resolve_config(config_path, overrides) -> dict:
    """Defaults, then config file, then --set overrides; unknown keys rejected."""
    from .errors import ConfigError

    cfg = {key: default for key, (_, default, _) in CONFIG_SCHEMA.items()}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in CONFIG_SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            cfg[key] = _parse_value(key, raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, raw = item.partition("=")
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"--set: unknown key {key!r}")
        cfg[key] = _parse_value(key, raw)
    return cfg


def _make_run_dir(cfg: dict, command: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run_dir = Path(cfg["out_dir"]) / f"{command}-{stamp}-seed{cfg['seed']}"
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "resolved_config.txt", "w") as fh:
        for key in CONFIG_SCHEMA:
            fh.write(f"{key} = {cfg[key]}\n")
    return run_dir


def _net_config(cfg: dict):
    from .models import NetConfig

    levels = None
    if cfg["critic_patch_levels"]:
        levels = tuple(int(v) for v in cfg["critic_patch_levels"].split(","))
    return NetConfig(
        image_size=cfg["image_size"],
        in_channels=cfg["in_channels"],
        out_channels=cfg["out_channels"],
        base_width=cfg["base_width"],
        width_cap=cfg["width_cap"],
        critic_levels=cfg["critic_levels"],
        critic_patch_levels=levels,
        critic_norm=cfg["critic_norm"],
        dropout_layers=cfg["dropout_layers"],
        dropout_rate=cfg["dropout_rate"],
        dtype=cfg["dtype"],
    )


def _train_config(cfg: dict):
    from .training import TrainConfig

    return TrainConfig(
        total_steps=cfg["total_steps"],
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        beta1=cfg["beta1"],
        beta2=cfg["beta2"],
        critic_iters_per_gen=cfg["critic_iters_per_gen"],
        jitter_resize=cfg["jitter_resize"] or None,
        seed=cfg["seed"],
        checkpoint_every=cfg["checkpoint_every"],
    )


def _loss_weights(cfg: dict):
    from .training import LossWeights

    pw = None
    if cfg["patch_weights"]:
        pw = tuple(float(v) for v in cfg["patch_weights"].split(","))
    return LossWeights(
        lambda_reconst=cfg["lambda_reconst"], lambda_gp=cfg["lambda_gp"], patch_weights=pw
    )


def _load_samples(cfg: dict):
    from .data import load_dataset, make_fixtures
    from .errors import ConfigError

    if cfg["image_dir"]:
        if not cfg["mask_dir"]:
            raise ConfigError("image_dir given without mask_dir")
        return load_dataset(cfg["image_dir"], cfg["mask_dir"], cfg["id_map"] or None)
    return make_fixtures(cfg["n_fixtures"], cfg["image_size"], cfg["n_ids"], cfg["seed"])


# ---------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------

def cmd_fixtures(cfg: dict) -> int:
    from .data import make_fixtures, write_image, write_mask

    run_dir = _make_run_dir(cfg, "fixtures")
    samples = make_fixtures(cfg["n_fixtures"], cfg["image_size"], cfg["n_ids"], cfg["seed"])
    (run_dir / "images").mkdir()
    (run_dir / "masks").mkdir()
    with open(run_dir / "id_map.csv", "w") as fh:
        fh.write("filename,polyp_id\n")
        for s in samples:
            write_image(run_dir / "images" / s.source_name, s.image)
            write_mask(run_dir / "masks" / s.source_name, s.mask)
            fh.write(f"{s.source_name},{s.polyp_id}\n")
    print(f"wrote {len(samples)} phantom frames under {run_dir}")
    return EXIT_OK


def _cmd_train(cfg: dict, task: str) -> int:
    from .training import train

    run_dir = _make_run_dir(cfg, f"train-{task}")
    samples = _load_samples(cfg)
    result = train(task, samples, _net_config(cfg), _train_config(cfg), _loss_weights(cfg), run_dir)
    last = result.rows[-1] if result.rows else None
    tail = f"; final l1 {last[5]:.4f}" if last else ""
    print(f"trained {task} for {cfg['total_steps']} steps -> {result.checkpoint_path}{tail}")
    return EXIT_OK


def _load_generator(path_str: str, what: str):
    from .errors import ConfigError
    from .models import Generator

    if not path_str:
        raise ConfigError(f"{what} checkpoint path is required")
    return Generator.load(path_str)


def cmd_generate(cfg: dict) -> int:
    import numpy as np

    from .data import MaskSpec, augment_mask, place_nonoverlapping, sample_augment_params
    from .generate import GenerationRequest, generate_corpus

    run_dir = _make_run_dir(cfg, "generate")
    g_n2p = _load_generator(cfg["n2p_checkpoint"], "n2p")
    g_p2n = _load_generator(cfg["p2n_checkpoint"], "p2n") if cfg["p2n_checkpoint"] else None
    samples = _load_samples(cfg)
    rng = np.random.default_rng(cfg["seed"])
    from .errors import DataError

    def draw_spec(s):
        last = None
        for _ in range(10):  # unlucky translations can warp the mask away
            try:
                warped = augment_mask(s.mask, sample_augment_params(rng, s.mask.shape), rng)
                ys, xs = np.nonzero(warped)
                shape = warped[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1]
                return place_nonoverlapping(shape, np.zeros_like(s.mask), rng)
            except DataError as err:
                last = err
        raise last

    requests = []
    for i in range(cfg["count"]):
        s = samples[int(rng.integers(0, len(samples)))]
        spec = draw_spec(s)
        value = cfg["value"] if cfg["value"] >= 0 else int(rng.integers(0, 256))
        spec = MaskSpec(shape=spec.shape, value=value, placement=spec.placement)
        source = s if g_p2n is not None else s.image
        requests.append(GenerationRequest(source=source, mask_spec=spec, seed=cfg["seed"] + i))
    rows = generate_corpus(requests, g_n2p, g_p2n, run_dir / "corpus")
    print(f"generated {len(rows)} labeled images under {run_dir / 'corpus'}")
    return EXIT_OK


def cmd_eval_det(cfg: dict) -> int:
    import csv as _csv

    from .errors import ConfigError, DataError
    from .evaluate import MetricCounts, load_detections, match_frame, prf1, split_polyps

    run_dir = _make_run_dir(cfg, "eval-det")
    report_lines = []
    csv_rows = []
    if cfg["counts"]:
        with open(cfg["counts"], newline="") as fh:
            reader = _csv.DictReader(fh)
            need = {"tp", "tn", "fp", "fn"}
            if reader.fieldnames is None or not need.issubset(reader.fieldnames):
                raise DataError(f"counts CSV must have columns {sorted(need)}")
            for rec in reader:
                c = MetricCounts(
                    tp=int(rec["tp"]), tn=int(rec["tn"]), fp=int(rec["fp"]), fn=int(rec["fn"])
                )
                pre, rec_, f1 = prf1(c)
                label = rec.get("label", "counts")
                report_lines.append(
                    f"{label}: precision={_fmt(pre)} recall={_fmt(rec_)} f1={_fmt(f1)}"
                )
                csv_rows.append((label, c, pre, rec_, f1))
    elif cfg["detections"] and cfg["gt_dir"]:
        from .data import read_mask

        dets = load_detections(cfg["detections"])
        gt_dir = Path(cfg["gt_dir"])
        if not gt_dir.is_dir():
            raise DataError(f"gt_dir not found: {gt_dir}")
        total = MetricCounts()
        for mask_path in sorted(gt_dir.glob("*.png")):
            frame_id = mask_path.stem
            polyps = split_polyps(read_mask(mask_path))
            total = total + match_frame(dets.get(frame_id, []), polyps)
        pre, rec_, f1 = prf1(total)
        report_lines.append(
            f"total: tp={total.tp} tn={total.tn} fp={total.fp} fn={total.fn} "
            f"precision={_fmt(pre)} recall={_fmt(rec_)} f1={_fmt(f1)}"
        )
        csv_rows.append(("total", total, pre, rec_, f1))
    else:
        raise ConfigError("eval-det needs either counts or detections+gt_dir")
    with open(run_dir / "report.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["label", "tp", "tn", "fp", "fn", "precision", "recall", "f1"])
        for label, c, pre, rec_, f1 in csv_rows:
            writer.writerow([label, c.tp, c.tn, c.fp, c.fn, _fmt(pre), _fmt(rec_), _fmt(f1)])
    report = "\n".join(report_lines)
    (run_dir / "report.txt").write_text(report + "\n")
    print(report)
    return EXIT_OK


def _fmt(v) -> str:
    return "undefined" if v is None else f"{v:.2f}"


def cmd_eval_seg(cfg: dict) -> int:
    from .data import read_mask
    from .errors import ConfigError, DataError
    from .evaluate import SegPair, dataset_jaccard_dice, jaccard_dice

    run_dir = _make_run_dir(cfg, "eval-seg")
    if not cfg["pred_dir"] or not cfg["gt_dir"]:
        raise ConfigError("eval-seg needs pred_dir and gt_dir")
    pred_dir, gt_dir = Path(cfg["pred_dir"]), Path(cfg["gt_dir"])
    if not pred_dir.is_dir():
        raise DataError(f"pred_dir not found: {pred_dir}")
    if not gt_dir.is_dir():
        raise DataError(f"gt_dir not found: {gt_dir}")
    pairs, lines, rows = [], [], []
    for gt_path in sorted(gt_dir.glob("*.png")):
        pred_path = pred_dir / gt_path.name
        if not pred_path.is_file():
            raise DataError(f"missing prediction for {gt_path.name}")
        pair = SegPair(predicted=read_mask(pred_path), truth=read_mask(gt_path))
        j, dice = jaccard_dice(pair)
        pairs.append(pair)
        lines.append(f"{gt_path.name}: jaccard={100 * j:.2f} dice={100 * dice:.2f}")
        rows.append((gt_path.name, j, dice))
    if not pairs:
        raise DataError(f"no ground-truth masks under {gt_dir}")
    jm, dm = dataset_jaccard_dice(pairs)
    lines.append(f"mean: jaccard={100 * jm:.2f} dice={100 * dm:.2f}")
    rows.append(("mean", jm, dm))
    import csv as _csv

    with open(run_dir / "report.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["image", "jaccard", "dice"])
        for name, j, dice in rows:
            writer.writerow([name, f"{100 * j:.2f}", f"{100 * dice:.2f}"])
    report = "\n".join(lines)
    (run_dir / "report.txt").write_text(report + "\n")
    print(report)
    return EXIT_OK


def cmd_sweep(cfg: dict) -> int:
    import csv as _csv

    from .errors import ConfigError, DataError
    from .evaluate import MetricCounts, SweepRow, sweep_report

    run_dir = _make_run_dir(cfg, "sweep")
    if not cfg["sweep_csv"]:
        raise ConfigError("sweep needs sweep_csv")
    rows = []
    with open(cfg["sweep_csv"], newline="") as fh:
        reader = _csv.DictReader(fh)
        if reader.fieldnames is None or "n_synthetic" not in reader.fieldnames:
            raise DataError("sweep CSV needs an n_synthetic column")
        by_counts = {"tp", "tn", "fp", "fn"}.issubset(reader.fieldnames)
        for rec in reader:
            if by_counts:
                rows.append(
                    SweepRow(
                        n_synthetic=int(rec["n_synthetic"]),
                        counts=MetricCounts(
                            tp=int(rec["tp"]), tn=int(rec["tn"]),
                            fp=int(rec["fp"]), fn=int(rec["fn"]),
                        ),
                    )
                )
            else:
                rows.append(
                    SweepRow(
                        n_synthetic=int(rec["n_synthetic"]),
                        precision=float(rec["precision"]),
                        recall=float(rec["recall"]),
                        f1=float(rec["f1"]),
                    )
                )
    report = sweep_report(rows)
    report.write_csv(run_dir / "sweep.csv")
    text = report.to_text()
    (run_dir / "report.txt").write_text(text + "\n")
    print(text)
    if report.saturation_n is not None:
        print(f"saturation at n_synthetic={report.saturation_n}")
    return EXIT_OK


def cmd_bench(cfg: dict) -> int:
    import numpy as np

    from .models import NetConfig, build_generator
    from .generate import bench_generator

    run_dir = _make_run_dir(cfg, "bench")
    sizes = [int(v) for v in cfg["bench_sizes"].split(",") if v]
    lines = []
    for size in sizes:
        ncfg = NetConfig(
            image_size=size,
            base_width=cfg["base_width"],
            width_cap=cfg["width_cap"],
            dtype=cfg["dtype"],
        )
        g = build_generator(ncfg, np.random.default_rng(cfg["seed"]))
        stats = bench_generator(g, size, cfg["bench_runs"])
        lines.append(
            f"size {size}: mean={stats.mean_ms:.2f}ms median={stats.median_ms:.2f}ms "
            f"p95={stats.p95_ms:.2f}ms over {stats.n_runs} runs"
        )
    lines.append(
        f"reference: published 256x256 GPU forward averaged {REFERENCE_LATENCY_MS_256} ms "
        "(context only, not a pass/fail threshold)"
    )
    report = "\n".join(lines)
    (run_dir / "report.txt").write_text(report + "\n")
    print(report)
    return EXIT_OK


_DISPATCH = {
    "fixtures": cmd_fixtures,
    "train-p2n": lambda cfg: _cmd_train(cfg, "p2n"),
    "train-n2p": lambda cfg: _cmd_train(cfg, "n2p"),
    "generate": cmd_generate,
    "eval-det": cmd_eval_det,
    "eval-seg": cmd_eval_seg,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
}


def _apply_thread_cap():
    cap = os.environ.get("PSYN_THREADS")
    if not cap:
        return
    if not cap.isdigit() or int(cap) < 1:
        print(f"psyn: error: config: PSYN_THREADS must be a positive integer, got {cap!r}",
              file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG

    from .errors import ConfigError, DataError, NumericError, ShapeError

    try:
        cfg = resolve_config(args.config, args.set)
        return _DISPATCH[args.command](cfg)
    except ConfigError as exc:
        print(f"psyn: error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ShapeError,) as exc:
        print(f"psyn: error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"psyn: error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"psyn: error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"psyn: error: numeric: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # keep CLI failures single-line and parsable
        print(f"psyn: error: internal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
