"""Command-line entry point: ``nanofusion <subcommand> [--config FILE] [--set k=v ...]``."""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import closedloop, formats, models, quant, tiling, train
from .config import Config, ConfigError, stream_seed
from .dataset import Dataset, FormatError, atomic_write, expand, generate_raw
from .train import DivergenceError

log = logging.getLogger("nanofusion")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
SPLITS = ("train", "val", "test")


class Workspace:
    def __init__(self, root: Path):
        self.root = root
        self.data = root / "data"
        self.models = root / "models"
        self.results = root / "results"

    def raw(self, split):
        return self.data / f"raw_{split}.nfd"

    def split(self, split):
        return self.data / f"{split}.nfd"


def _write_text(path: Path, text: str) -> None:
    atomic_write(path, text.encode())
    log.info("wrote %s", path)


def _load_dataset(path: Path) -> Dataset:
    if not path.exists():
        raise FileNotFoundError(f"missing input {path}; run the earlier pipeline stage first")
    return Dataset.load(path)


def _load_any_model(path: Path):
    magic = formats.read_magic(path)
    if magic == formats.FLOAT_MAGIC:
        return formats.load_float_model(path)
    if magic == formats.QUANT_MAGIC:
        return formats.load_quant_model(path)
    raise FormatError(f"{path}: unknown model magic {magic!r}")


def _model_files(ws: Workspace, given: Optional[List[str]], suffix: str) -> List[Path]:
    if given:
        paths = [Path(p) for p in given]
    else:
        paths = sorted(ws.models.glob(f"*{suffix}"))
    if not paths:
        raise FileNotFoundError(f"no model files ({suffix}) found in {ws.models}")
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(f"missing model file {p}")
    return paths


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_gen_data(cfg: Config, args, ws: Workspace) -> None:
    """Noise-free renders for each split; splits use disjoint sample indices."""
    seed = stream_seed(cfg.seed, "data")
    start = 0
    for split in SPLITS:
        n = cfg.int("data", f"{split}_renders")
        raw = generate_raw(seed, n, start, cfg.balance())
        raw.save(ws.raw(split))
        log.info("wrote %s (%d renders)", ws.raw(split), n)
        start += n


def cmd_augment(cfg: Config, args, ws: Workspace) -> None:
    seed = stream_seed(cfg.seed, "augment")
    copies = cfg.int("data", "copies")
    for i, split in enumerate(SPLITS):
        raw = _load_dataset(ws.raw(split))
        out = expand(raw, copies, seed + i, cfg.recipe(),
                     flip_p=cfg.float("data", "flip_probability"))
        out.save(ws.split(split))
        log.info("wrote %s (%d samples)", ws.split(split), len(out))


def cmd_train(cfg: Config, args, ws: Workspace) -> None:
    tr, va, te = (_load_dataset(ws.split(s)) for s in SPLITS)
    tags = args.variant or cfg.variants()
    rows = []
    for tag in tags:
        if tag not in models.VARIANT_TAGS:
            raise ConfigError(f"unknown variant {tag!r}")
        for seed in cfg.train_seeds():
            tc = cfg.train_config(seed)
            model = models.build(tag, tc.seed, tc.head_dropout)
            result = train.train(model, tr, va, tc)
            name = f"{tag}-s{seed}"
            formats.save_float_model(result.model, ws.models / f"{name}.nff")
            _write_text(ws.results / f"history-{name}.csv", result.history_csv())
            m = train.evaluate(result.model, te)
            rows.append((tag, seed, m))
            _write_text(ws.results / f"metrics-{name}.csv", train.metrics_csv([(tag, seed, m)]))
    log.info("trained %d models", len(rows))


def cmd_eval(cfg: Config, args, ws: Workspace) -> None:
    te = _load_dataset(ws.split("test"))
    rows = []
    for path in _model_files(ws, args.model, ".nff"):
        model = _load_any_model(path)
        depth_scale = 0.0 if args.no_depth else 1.0
        m = train.evaluate(model, te, depth_scale=depth_scale)
        rows.append((path.stem, 0, m))
    name = "eval-nodepth.csv" if args.no_depth else "eval.csv"
    _write_text(ws.results / name, train.metrics_csv(rows))


def cmd_quantize(cfg: Config, args, ws: Workspace) -> None:
    tr = _load_dataset(ws.split("train"))
    te = _load_dataset(ws.split("test"))
    n = min(cfg.int("quant", "calibration_samples"), len(tr))
    calib = tr.subset(slice(0, n))
    rows = []
    for path in _model_files(ws, args.model, ".nff"):
        model = formats.load_float_model(path)
        q = quant.quantize_model(model, calib.images, calib.depths)
        formats.save_quant_model(q, path.with_suffix(".nfq"))
        rows.append((path.stem + ":float", 0, train.evaluate(model, te)))
        rows.append((path.stem + ":int8", 0, train.evaluate(q, te)))
    _write_text(ws.results / "quantization.csv", train.metrics_csv(rows))


def cmd_plan_tiling(cfg: Config, args, ws: Workspace) -> None:
    budget = cfg.budget()
    for path in _model_files(ws, args.model, ".nfq"):
        q = formats.load_quant_model(path)
        members = [q] if isinstance(q, quant.QuantizedModel) else [q.camera, q.depth]
        report = "".join(tiling.plan_tiling(m, budget).report() for m in members)
        _write_text(ws.results / f"tiling-{path.stem}.txt", report)
        sys.stdout.write(report)


def cmd_simulate(cfg: Config, args, ws: Workspace) -> None:
    name = args.model or cfg.get("sim", "model")
    if name == "mocap":
        source, label = closedloop.Mocap(), "mocap"
    else:
        p = Path(name)
        if not p.exists():
            p = ws.models / name
        if not p.exists():
            raise FileNotFoundError(f"missing model file {name}")
        source, label = _load_any_model(p), p.stem
    path = cfg.path()
    rows = []
    for run in range(cfg.int("sim", "runs")):
        sc = cfg.sim_config(run)
        ep = closedloop.run_episode(source, path, sc)
        _write_text(ws.results / f"trajectory-{label}-r{run}.csv", ep.trajectory_csv())
        rows.append((label, run, ep.result))
        log.info("%s run %d: completed %.1f%%, e_xy %.3f m, e_theta %.3f rad", label, run,
                 ep.result.completed_path, ep.result.e_xy, ep.result.e_theta)
    _write_text(ws.results / f"closedloop-{label}.csv", closedloop.results_csv(rows))


def cmd_report(cfg: Config, args, ws: Workspace) -> None:
    files = sorted(ws.results.glob("metrics-*.csv"))
    if not files:
        raise FileNotFoundError(f"no metrics CSVs in {ws.results}")
    by_model = {}
    for f in files:
        for tag, seed, m in train.read_metrics_csv(f.read_text()):
            by_model.setdefault(tag, []).append(np.array(m))
    order = [t for t in models.VARIANT_TAGS if t in by_model] + \
        sorted(t for t in by_model if t not in models.VARIANT_TAGS)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    fields = list(train.Metrics._fields)
    w.writerow(["model", "runs"] + [f"{f}_{s}" for f in fields for s in ("mean", "std")])
    table = [f"{'model':<12}{'runs':>5}" + "".join(f"{f:>16}" for f in fields)]
    for tag in order:
        a = np.stack(by_model[tag])
        mean, std = a.mean(axis=0), a.std(axis=0)
        w.writerow([tag, len(a)] + [repr(float(v)) for pair in zip(mean, std) for v in pair])
        table.append(f"{tag:<12}{len(a):>5}" +
                     "".join(f"{f'{mu:.3f}+-{sd:.3f}':>16}" for mu, sd in zip(mean, std)))
    _write_text(ws.results / "report.csv", buf.getvalue())
    sys.stdout.write("\n".join(table) + "\n")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "augment": cmd_augment,
    "train": cmd_train,
    "eval": cmd_eval,
    "quantize": cmd_quantize,
    "plan-tiling": cmd_plan_tiling,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nanofusion", description="Depth+camera pose pipeline")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            sp.add_argument("--variant", action="append", help="train only these tags")
        if name in ("eval", "quantize", "plan-tiling"):
            sp.add_argument("--model", action="append", help="model file(s)")
        if name == "eval":
            sp.add_argument("--no-depth", action="store_true",
                            help="evaluate with every depth zone invalid")
        if name == "simulate":
            sp.add_argument("--model", help="model file, or 'mocap'")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = Config.load(args.config, args.set)
        log.info("resolved config:\n%s", cfg.text())
        COMMANDS[args.command](cfg, args, Workspace(cfg.workdir))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceError, FloatingPointError, OverflowError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
