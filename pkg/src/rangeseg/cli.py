"""Command-line entry point: ``rangeseg <subcommand> [--config FILE] [--set k=v ...]``.

Every subcommand writes into a locked run directory: the resolved config,
``metrics.jsonl`` (deterministic records), ``timing.jsonl`` (wall-clock),
``summary.csv`` and any artifacts. Exit codes: 0 ok, 1 unexpected error,
2 config error, 3 missing file, 4 malformed file, 5 shape mismatch,
6 run directory locked.
"""
from __future__ import annotations

import os

# reproducible BLAS reductions; must precede the first numpy import
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import csv  # noqa: E402
import io  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from pathlib import Path  # noqa: E402
from typing import Callable, Sequence  # noqa: E402

import numpy as np  # noqa: E402

from . import adaptation  # noqa: E402
from .config import ConfigError, RunConfig, dump_config, load_config  # noqa: E402
from .container import FormatError  # noqa: E402
from .network import CamParams, Renderer, Segmenter, noise_robustness_probe  # noqa: E402
from .range_image import (  # noqa: E402
    CLASSES,
    IoUAccumulator,
    ShapeError,
    channel_stats,
    read_dataset,
    write_dataset,
)
from .synthgen import generate_dataset  # noqa: E402

log = logging.getLogger("rangeseg")

RUN_ROOT_ENV = "RANGESEG_RUN_ROOT"
EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_MISSING, EXIT_FORMAT, EXIT_SHAPE, EXIT_LOCKED = 0, 1, 2, 3, 4, 5, 6
IOU_HEADER = ["class", "iou", "intersection", "union"]


class RunLocked(Exception):
    pass


class RunDir:
    """Output directory guarded by an exclusive ``.lock`` file."""

    def __init__(self, path: Path):
        self.path = path
        self.lock = path / ".lock"
        self._timing: io.TextIOBase | None = None
        self._metrics: io.TextIOBase | None = None

    def __enter__(self) -> "RunDir":
        self.path.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLocked(f"run directory {self.path} is locked by another process "
                            f"(remove {self.lock} if that process is gone)") from None
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        self._metrics = open(self.path / "metrics.jsonl", "w")
        self._timing = open(self.path / "timing.jsonl", "w")
        return self

    def __exit__(self, *exc) -> None:
        for f in (self._metrics, self._timing):
            if f is not None:
                f.close()
        self.lock.unlink(missing_ok=True)

    def file(self, name: str) -> Path:
        return self.path / name

    def metric(self, record: dict) -> None:
        self._metrics.write(json.dumps(record, sort_keys=True) + "\n")

    def timing(self, record: dict) -> None:
        self._timing.write(json.dumps(record, sort_keys=True) + "\n")

    def summary(self, header: Sequence[str], rows: Sequence[Sequence]) -> None:
        with open(self.path / "summary.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)


class Context:
    def __init__(self, cfg: RunConfig, base: Path, run: RunDir):
        self.cfg, self.base, self.run = cfg, base, run

    def path(self, key: str) -> Path:
        value = getattr(self.cfg.paths, key)
        if value is None:
            raise ConfigError(f"paths.{key} is required for this subcommand")
        p = Path(value)
        return p if p.is_absolute() else self.base / p

    def has(self, key: str) -> bool:
        return getattr(self.cfg.paths, key) is not None

    def dataset(self, key: str):
        p = self.path(key)
        if not p.is_file():
            raise FileNotFoundError(f"paths.{key}: {p} not found")
        return read_dataset(p)

    def step_logger(self, phase: str) -> tuple[Callable[[dict], None], Callable[[int, float], None]]:
        def metric(rec: dict) -> None:
            self.run.metric({"phase": phase, **rec})

        def timing(step: int, seconds: float) -> None:
            self.run.timing({"phase": phase, "step": step, "seconds": seconds})
        return metric, timing


def _iou_rows(acc: IoUAccumulator) -> list[list]:
    iou = acc.iou()
    return [[name, repr(float(iou[c])), int(acc.intersection[c]), int(acc.union[c])]
            for c, name in enumerate(CLASSES) if acc.present()[c]]


def _evaluate_into(ctx: Context, model: Segmenter) -> None:
    if not ctx.has("test"):
        ctx.run.summary(IOU_HEADER, [])
        return
    acc = adaptation.evaluate(model, ctx.dataset("test"))
    rows = _iou_rows(acc)
    for name, iou, inter, union in rows:
        ctx.run.metric({"phase": "eval", "class": name, "iou": float(iou), "intersection": inter, "union": union})
    ctx.run.summary(IOU_HEADER, rows)


# -- subcommands ------------------------------------------------------------
def cmd_gen_data(ctx: Context) -> None:
    cfg = ctx.cfg
    d = cfg.data
    outputs = {
        "source.rsds": (cfg.domain("source"), d.train_count, 0),
        "target.rsds": (cfg.domain("target"), d.train_count, 0),
        "test.rsds": (cfg.domain("target"), d.test_count, d.test_start),
        "test_source.rsds": (cfg.domain("source"), d.test_count, d.test_start),
    }
    rows = []
    for name, (domain, count, start) in outputs.items():
        t0 = time.perf_counter()
        images = generate_dataset(domain, count, start, d.workers)
        write_dataset(ctx.run.file(name), images)
        density = float(np.mean([im.mask.mean() for im in images]))
        labels = np.concatenate([im.labels[im.mask == 1] for im in images])
        frac = np.bincount(labels, minlength=len(CLASSES)) / max(labels.size, 1)
        rec = {"dataset": name, "count": count, "start": start, "mask_density": density,
               **{f"fraction_{c}": float(f) for c, f in zip(CLASSES, frac)}}
        ctx.run.metric(rec)
        ctx.run.timing({"dataset": name, "seconds": time.perf_counter() - t0})
        rows.append([name, count, repr(density)] + [repr(float(f)) for f in frac])
        log.info("wrote %s (%d images)", name, count)
    ctx.run.summary(["dataset", "count", "mask_density"] + [f"fraction_{c}" for c in CLASSES], rows)


def _train_segmenter(ctx: Context, lam: float) -> Segmenter:
    cfg = ctx.cfg
    sim = ctx.dataset("source")
    real = ctx.dataset("target") if lam > 0 else []
    model = Segmenter.create(cfg.segmenter_spec(), seed=cfg.seed, stats=channel_stats(sim))
    metric, timing = ctx.step_logger("train")
    adaptation.train_with_gca(sim, real, model, cfg.train_config(lam=lam), metric, timing)
    return model


def cmd_train(ctx: Context) -> None:
    model = _train_segmenter(ctx, lam=0.0)
    model.save(ctx.run.file("model.rsat"), {"seed": ctx.cfg.seed})
    _evaluate_into(ctx, model)


def _calibrate(ctx: Context, model: Segmenter) -> None:
    cal = ctx.cfg.calibration
    real = ctx.dataset("target")[:cal.count]
    _, report = adaptation.progressive_domain_calibration(model, real, cal.batch_size)
    for row in report.rows():
        ctx.run.metric({"phase": "calibration", **row})
    ctx.run.file("calibration.txt").write_text(report.text() + "\n")
    rows = report.rows()
    with open(ctx.run.file("calibration.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_adapt(ctx: Context) -> None:
    model = _train_segmenter(ctx, lam=ctx.cfg.loss.lam)
    if ctx.cfg.calibration.enabled:
        _calibrate(ctx, model)
    model.save(ctx.run.file("model.rsat"), {"seed": ctx.cfg.seed})
    _evaluate_into(ctx, model)


def cmd_calibrate(ctx: Context) -> None:
    model = Segmenter.load(_existing(ctx, "model"))
    _check_grid(ctx, model.spec.height, model.spec.width)
    _calibrate(ctx, model)
    model.save(ctx.run.file("model.rsat"), {"seed": ctx.cfg.seed})
    _evaluate_into(ctx, model)


def cmd_pretrain_renderer(ctx: Context) -> None:
    cfg = ctx.cfg
    real = ctx.dataset("target")
    rc = cfg.renderer
    renderer = Renderer.create(cfg.grid.height, cfg.grid.width, rc.base, cfg.loss.n_bins, rc.head,
                               seed=cfg.seed, stats=channel_stats(real))
    metric, _ = ctx.step_logger("renderer")
    tcfg = cfg.train_config(rc.train)
    _, mse = adaptation.pretrain_renderer(real, renderer, tcfg, log=metric)
    renderer.save(ctx.run.file("renderer.rsat"), {"seed": cfg.seed})
    ctx.run.metric({"phase": "renderer_eval", "heldout_mse": mse})
    ctx.run.summary(["head", "n_bins", "steps", "heldout_mse"], [[rc.head, cfg.loss.n_bins, rc.train.steps, repr(mse)]])


def cmd_render(ctx: Context) -> None:
    sim = ctx.dataset("source")
    renderer = Renderer.load(_existing(ctx, "renderer"))
    out = adaptation.render_intensity(sim, renderer)
    write_dataset(ctx.run.file("rendered.rsds"), out)
    vals = np.concatenate([im.intensity[im.mask == 1] for im in out]) if out else np.zeros(0)
    mean = float(vals.mean()) if vals.size else 0.0
    ctx.run.metric({"phase": "render", "count": len(out), "mean_intensity": mean})
    ctx.run.summary(["count", "mean_intensity"], [[len(out), repr(mean)]])


def cmd_eval(ctx: Context) -> None:
    test = ctx.dataset("test")
    acc = IoUAccumulator()
    if ctx.has("predictions"):
        preds = ctx.dataset("predictions")
        if len(preds) != len(test):
            raise ShapeError(f"{len(preds)} prediction images for {len(test)} test images")
        for p, gt in zip(preds, test):
            acc.add(p.labels, gt)
    else:
        model = Segmenter.load(_existing(ctx, "model"))
        for p, gt in zip(model.predict(test), test):
            acc.add(p, gt)
    rows = _iou_rows(acc)
    for name, iou, inter, union in rows:
        ctx.run.metric({"phase": "eval", "class": name, "iou": float(iou), "intersection": inter, "union": union})
    ctx.run.summary(IOU_HEADER, rows)


def cmd_noise_experiment(ctx: Context) -> None:
    n = ctx.cfg.noise
    rng = np.random.default_rng(ctx.cfg.seed)
    c = n.input_shape[1]
    kernel = rng.normal(0.0, np.sqrt(2.0 / (9 * c)), size=(n.out_channels, c, 3, 3))
    cam = CamParams.init(rng, c, ctx.cfg.model.cam_reduction, ctx.cfg.model.cam_pool)
    rows = noise_robustness_probe(kernel, n.p_list, n.trials, ctx.cfg.seed, tuple(n.input_shape), cam)
    table = []
    for r in rows:
        rec = {"p": r.p, "plain_error": r.plain_error, "plain_se": r.plain_se,
               "cam_error": r.cam_error, "cam_se": r.cam_se}
        ctx.run.metric({"phase": "noise", **rec})
        table.append([repr(v) for v in rec.values()])
    ctx.run.summary(["p", "plain_error", "plain_se", "cam_error", "cam_se"], table)


def _existing(ctx: Context, key: str) -> Path:
    p = ctx.path(key)
    if not p.is_file():
        raise FileNotFoundError(f"paths.{key}: {p} not found")
    return p


def _check_grid(ctx: Context, height: int, width: int) -> None:
    if (height, width) != (ctx.cfg.grid.height, ctx.cfg.grid.width):
        raise ShapeError(f"checkpoint expects {height}x{width} images, config grid is "
                         f"{ctx.cfg.grid.height}x{ctx.cfg.grid.width}")


COMMANDS: dict[str, Callable[[Context], None]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "pretrain-renderer": cmd_pretrain_renderer,
    "render": cmd_render,
    "adapt": cmd_adapt,
    "calibrate": cmd_calibrate,
    "eval": cmd_eval,
    "noise-experiment": cmd_noise_experiment,
}

HELP = {
    "gen-data": "generate source/target train sets and held-out test sets",
    "train": "source-only training (focal loss) plus evaluation",
    "pretrain-renderer": "self-supervised intensity renderer on the target set",
    "render": "fill the source set's intensity channel with a trained renderer",
    "adapt": "focal + geodesic alignment training, then progressive calibration",
    "calibrate": "progressive batch-norm calibration of an existing model",
    "eval": "per-class IoU of a model or a predictions file against paths.test",
    "noise-experiment": "dropout-noise error of a conv with and without a CAM gate",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rangeseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", "-c", help="YAML run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (dotted path), repeatable")
        p.add_argument("--run-dir", help=f"output directory (default ${RUN_ROOT_ENV}/<run_name or subcommand>)")
    return parser


def resolve_run_dir(cfg: RunConfig, command: str, explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
    return root / (cfg.run_name or command)


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0) and EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg, base = load_config(args.config, args.overrides)
        run_dir = resolve_run_dir(cfg, args.command, args.run_dir)
        with RunDir(run_dir) as rd:
            rd.file("config.resolved.yaml").write_text(dump_config(cfg))
            COMMANDS[args.command](Context(cfg, base, rd))
        return EXIT_OK
    except ConfigError as e:
        code, msg = EXIT_CONFIG, f"config error: {e}"
    except FileNotFoundError as e:
        code, msg = EXIT_MISSING, f"missing file: {e}"
    except FormatError as e:
        code, msg = EXIT_FORMAT, f"malformed file: {e}"
    except ShapeError as e:
        code, msg = EXIT_SHAPE, f"shape mismatch: {e}"
    except RunLocked as e:
        code, msg = EXIT_LOCKED, str(e)
    except Exception as e:  # noqa: BLE001 - last-resort diagnostic
        code, msg = EXIT_ERROR, f"error: {e.__class__.__name__}: {e}"
    print(f"rangeseg {args.command}: {msg}", file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
