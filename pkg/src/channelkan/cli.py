"""Command-line driver: generate, train, eval, grid, inspect.

Every command resolves one flat config dict (built-in defaults, then the
``--config`` JSON file, then flags), writes it to ``manifest.json`` in the
output directory before doing any work, and can be replayed by passing that
manifest back through ``--config``.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import os
import shutil
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

from channelkan import __version__
from channelkan.channel import (
    DATASET_MAGIC,
    load_dataset,
    read_dataset_header,
    save_dataset,
)
from channelkan.errors import (
    ConfigError,
    ConfigMismatchError,
    DatasetFormatError,
    DimensionError,
    EmptyDatasetError,
)
from channelkan.evaluate import (
    GridConfig,
    MetricReport,
    condition_datasets,
    evaluate_predictions,
    fit_linear_ar,
    hold_predictor,
    model_predictor,
    run_experiment_grid,
    write_ablation_table,
    write_curve_csvs,
    write_reports_csv,
)
from channelkan.model import ABLATIONS, CKPT_MAGIC, init_params, load_checkpoint, read_checkpoint_header, save_checkpoint
from channelkan.train import train

log = logging.getLogger("channelkan")

DATA_ENV = "CHANNELKAN_DATA_DIR"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SPLITS = ("train", "val", "test")
ABLATION_NAMES = [a for a in ABLATIONS if a != "full"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- config resolution -------------------------------------------------------


def default_config() -> dict:
    return {
        "grid": GridConfig().to_dict(),
        "seed": 0,
        "velocity_kmh": 60.0,
        "snr_db": None,
        "variant": "full",
        "baseline": None,
        "oracle": False,
        "checkpoint": None,
        "resume": None,
        "link_snrs_db": None,
        "data_dir": None,
    }


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config_file(path) -> dict:
    """A plain config dict, or a manifest whose ``config`` entry is used."""
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    if _is_manifest(data):
        return data["config"]
    return data


def _is_manifest(data) -> bool:
    return isinstance(data, dict) and "config" in data and "command" in data


def _float_list(text: str) -> list[float | None]:
    out = []
    for tok in text.split(","):
        tok = tok.strip().lower()
        if tok in ("clean", "inf", "none"):
            out.append(None)
            continue
        try:
            out.append(float(tok))
        except ValueError:
            raise UsageError(f"not a number: {tok!r}") from None
    if not out:
        raise UsageError("empty list")
    return out


def resolve(args) -> dict:
    cfg = default_config()
    if args.config:
        cfg = _merge(cfg, load_config_file(args.config))
    grid = cfg["grid"]
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
        if args.command == "grid":
            grid["seeds"] = [args.seed]
    if getattr(args, "epochs", None) is not None:
        if args.epochs < 0:
            raise UsageError("--epochs must be >= 0")
        grid["train"]["epochs"] = args.epochs
    if getattr(args, "velocity", None) is not None:
        vs = _float_list(args.velocity)
        if None in vs or any(v < 0 for v in vs):
            raise UsageError("--velocity takes non-negative km/h values")
        if args.command == "grid":
            grid["velocities_kmh"] = vs
        elif len(vs) != 1:
            raise UsageError(f"{args.command} takes a single --velocity")
        else:
            cfg["velocity_kmh"] = vs[0]
    if getattr(args, "snr", None) is not None:
        snrs = _float_list(args.snr)
        if args.command == "grid":
            grid["snrs_db"] = snrs
        elif args.command == "eval":
            if None in snrs:
                raise UsageError("eval --snr is a link SNR and must be finite")
            cfg["link_snrs_db"] = snrs
        elif len(snrs) != 1:
            raise UsageError("generate takes a single --snr")
        else:
            cfg["snr_db"] = snrs[0]
    if getattr(args, "ablate", None):
        cfg["variant"] = args.ablate
        if args.command == "grid":
            grid["variants"] = [args.ablate]
    if getattr(args, "variants", None):
        grid["variants"] = [v.strip() for v in args.variants.split(",") if v.strip()]
    if getattr(args, "baseline", None):
        cfg["baseline"] = args.baseline
    if getattr(args, "oracle", False):
        cfg["oracle"] = True
    if getattr(args, "checkpoint", None):
        cfg["checkpoint"] = args.checkpoint
    if getattr(args, "resume", None):
        cfg["resume"] = args.resume
    if getattr(args, "data", None):
        cfg["data_dir"] = args.data
    if cfg["data_dir"] is None:
        cfg["data_dir"] = os.environ.get(DATA_ENV, ".")
    if args.command in ("train", "eval") and getattr(args, "jobs", None):
        raise UsageError("--jobs only applies to grid")
    if args.command == "grid" and args.jobs is not None and args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    try:
        g = GridConfig.from_dict(grid)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid grid config: {exc}") from None
    if cfg["variant"] not in ABLATIONS:
        raise UsageError(f"unknown variant {cfg['variant']!r}")
    if cfg["link_snrs_db"] is None:
        cfg["link_snrs_db"] = [g.link_snr_db]
    cfg["grid"] = g.to_dict()
    return cfg


def _peek(path):
    if not path:
        return None
    return json.loads(Path(path).read_text())


# -- helpers -----------------------------------------------------------------


def _out_dir(args, cfg) -> Path:
    out = args.out or cfg.get("out")
    if out is None:
        out = Path(cfg["data_dir"]) if args.command == "generate" else Path(".")
    return Path(out)


def _claim(paths: list[Path]):
    """Outputs are write-once: refuse to clobber an earlier run's files."""
    taken = [str(p) for p in paths if p.exists()]
    if taken:
        raise FileExistsError(f"refusing to overwrite existing outputs: {', '.join(taken)}")


def write_manifest(out: Path, command: str, cfg: dict, artifacts: list[Path]) -> Path:
    manifest = {
        "command": command,
        "config": cfg,
        "seed": cfg["seed"],
        "artifacts": [str(p) for p in artifacts],
        "tool_version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _check_dims(ds, grid: GridConfig, name: str):
    expected = {"system": grid.system.to_dict(), "T": grid.T, "L": grid.L}
    found = {"system": ds.system.to_dict(), "T": ds.T, "L": ds.L}
    diff = {k: {"expected": expected[k], "found": found[k]} for k in expected if expected[k] != found[k]}
    if diff:
        raise DimensionError(f"{name} does not match the configured dimensions: {json.dumps(diff, sort_keys=True)}")


def _load_split(data_dir, split: str, grid: GridConfig):
    ds = load_dataset(Path(data_dir) / f"{split}.ckan")
    _check_dims(ds, grid, f"{split}.ckan")
    return ds


# -- commands ----------------------------------------------------------------


def cmd_generate(args, cfg) -> int:
    grid = GridConfig.from_dict(cfg["grid"])
    out = _out_dir(args, cfg)
    files = [out / f"{s}.ckan" for s in SPLITS]
    _claim(files + [Path(str(f) + ".meta.json") for f in files])
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "generate", cfg, files)
    data = condition_datasets(grid, cfg["velocity_kmh"], cfg["snr_db"], cfg["seed"])
    for split, path in zip(SPLITS, files):
        save_dataset(data[split], path, {"split": split, "condition_seed": cfg["seed"]})
        log.info("wrote %s (%d windows)", path, len(data[split]))
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    grid = GridConfig.from_dict(cfg["grid"])
    mcfg = grid.model_config(cfg["variant"])
    tcfg = replace(grid.train, seed=cfg["seed"])
    out = _out_dir(args, cfg)
    best_path, last_path = out / "best.ckpt", out / "last.ckpt"
    trace, timings = out / "train_log.csv", out / "timings.csv"
    _claim([best_path, last_path, trace])
    train_set = _load_split(cfg["data_dir"], "train", grid)
    val_set = _load_split(cfg["data_dir"], "val", grid)

    start, opt_state, best_score = 0, None, math.inf
    if cfg["resume"]:
        params, _, meta, extra = load_checkpoint(cfg["resume"], expected=mcfg)
        opt_state = {k: v for k, v in extra.items() if k.startswith("opt.")}
        if not opt_state:
            raise ConfigMismatchError(f"{cfg['resume']} carries no optimiser state; resume from last.ckpt")
        start = int(meta["epoch"]) + 1
        best_score = float(meta.get("best_score", math.inf))
    else:
        params = init_params(mcfg, cfg["seed"], kan_init=grid.kan_init)
    remaining = max(0, tcfg.epochs - start)

    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "train", cfg, [best_path, last_path, trace])
    if cfg["resume"]:
        # carry the earlier best forward; it is replaced only on improvement
        prior_best = Path(cfg["resume"]).with_name("best.ckpt")
        if prior_best.exists():
            shutil.copyfile(prior_best, best_path)
    _, report, opt, last = train(
        mcfg, params, train_set, val_set, replace(tcfg, epochs=remaining),
        checkpoint_path=best_path, start_epoch=start, optimizer_state=opt_state, best_score=best_score,
    )
    last_epoch = start + report.epochs_run - 1
    best_score = min(best_score, report.best_score)
    save_checkpoint(last_path, last, mcfg,
                    meta={"epoch": last_epoch, "best_score": best_score if math.isfinite(best_score) else None},
                    extra=opt.state())
    report.write_csv(trace, timings)
    log.info("trained %d epochs; best epoch %d", report.epochs_run, report.best_epoch)
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    grid = GridConfig.from_dict(cfg["grid"])
    out = _out_dir(args, cfg)
    metrics = out / "metrics.csv"
    _claim([metrics])
    test = _load_split(cfg["data_dir"], "test", grid)
    if cfg["oracle"]:
        variant, predictor = "oracle", None
    elif cfg["baseline"] == "hold":
        variant, predictor = "hold", hold_predictor(test.L)
    elif cfg["baseline"] == "ar":
        variant, predictor = "ar", fit_linear_ar(_load_split(cfg["data_dir"], "train", grid), grid.ar_order)
    elif cfg["checkpoint"]:
        params, mcfg, _, _ = load_checkpoint(cfg["checkpoint"])
        expected = {"T": test.T, "P": test.L, "K": test.system.K, "n_pairs": test.system.n_pairs}
        found = {k: getattr(mcfg, k) for k in expected}
        if expected != found:
            raise ConfigMismatchError(f"checkpoint dims {found} do not fit the test set {expected}")
        variant, predictor = mcfg.variant_name(), model_predictor(params, mcfg)
    else:
        raise UsageError("eval needs --checkpoint, --baseline or --oracle")

    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "eval", cfg, [metrics])
    pred = test.future.copy() if predictor is None else predictor(test.history)
    reports, failed = [], False
    for snr in cfg["link_snrs_db"]:
        try:
            rep = evaluate_predictions(pred, test, snr, grid.n_bits, cfg["seed"])
        except (ArithmeticError, ValueError) as exc:
            failed = True
            rep = MetricReport(math.nan, math.nan, math.nan, link_snr_db=snr, error=f"{type(exc).__name__}: {exc}")
        reports.append(replace(rep, velocity_kmh=test.metadata.get("velocity_kmh"),
                               snr_db=test.metadata.get("snr_db"), variant=variant))
    write_reports_csv(reports, metrics)
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_grid(args, cfg) -> int:
    grid = GridConfig.from_dict(cfg["grid"])
    out = _out_dir(args, cfg)
    results = out / "results.csv"
    out.mkdir(parents=True, exist_ok=True)
    artifacts = [results, out / "ablation.csv", out / "nmse_vs_velocity.csv", out / "nmse_vs_snr.csv",
                 out / "summary.json"]
    write_manifest(out, "grid", cfg, artifacts)
    reports = run_experiment_grid(grid, out, jobs=args.jobs or 1)
    write_reports_csv(reports, results, out / "timings.csv")
    write_ablation_table(reports, out / "ablation.csv")
    write_curve_csvs(reports, out)
    failures = [r for r in reports if r.error is not None]
    summary = {
        "grid": grid.to_dict(),
        "cells": len(reports),
        "failed": [{"velocity_kmh": r.velocity_kmh, "snr_db": r.snr_db, "variant": r.variant,
                    "seed": r.seed, "error": r.error} for r in failures],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for r in failures:
        print(f"cell v={r.velocity_kmh} snr={r.snr_db} {r.variant} seed={r.seed} failed: {r.error}", file=sys.stderr)
    if not failures:
        return EXIT_OK
    numeric = any(r.error.split(":")[0] in ("DivergenceError", "FloatingPointError", "UndefinedNormalizationError")
                  for r in failures)
    return EXIT_NUMERIC if numeric else EXIT_DATA


def inspect_file(path) -> dict:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        fh.seek(0)
        if magic == DATASET_MAGIC:
            system, T, L, n = read_dataset_header(fh)
            info = {"kind": "dataset", "system": system.to_dict(), "T": T, "L": L, "samples": n}
            sidecar = Path(str(path) + ".meta.json")
            if sidecar.exists():
                info["metadata"] = json.loads(sidecar.read_text())
            return info
    if magic == CKPT_MAGIC:
        header = read_checkpoint_header(path)
        params, _, _, extra = load_checkpoint(path)
        return {
            "kind": "checkpoint",
            **header,
            "tensors": {k: list(v.shape) for k, v in params.items()},
            "extra_tensors": len(extra),
        }
    raise DatasetFormatError(f"{path}: unrecognised magic {magic!r}")


def cmd_inspect(args, cfg) -> int:
    for p in args.paths:
        print(json.dumps({"path": p, **inspect_file(p)}, indent=2, sort_keys=True, default=str))
    return EXIT_OK


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="channelkan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=True):
        p.add_argument("--config", metavar="PATH", help="JSON config or a previous manifest.json")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", metavar="DIR")
        if data:
            p.add_argument("--data", metavar="DIR", help=f"dataset directory (default ${DATA_ENV} or .)")

    p = sub.add_parser("generate", help="simulate train/val/test datasets")
    common(p, data=True)
    p.add_argument("--velocity", metavar="KMH")
    p.add_argument("--snr", metavar="DB", help="history SNR in dB, or 'clean'")

    p = sub.add_parser("train", help="train a model on a generated dataset")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--ablate", choices=ABLATION_NAMES)
    p.add_argument("--resume", metavar="CKPT", help="last.ckpt of an earlier run")
    p.add_argument("--jobs", type=int, help=argparse.SUPPRESS)

    p = sub.add_parser("eval", help="score a checkpoint or a baseline on the test split")
    common(p)
    p.add_argument("--checkpoint", metavar="CKPT")
    p.add_argument("--baseline", choices=["hold", "ar"])
    p.add_argument("--oracle", action="store_true", help="predict the ground truth")
    p.add_argument("--snr", metavar="DB[,DB...]", help="link SNRs for SE/BER")
    p.add_argument("--jobs", type=int, help=argparse.SUPPRESS)

    p = sub.add_parser("grid", help="run a velocity/SNR/variant/seed sweep")
    common(p, data=False)
    p.add_argument("--velocity", metavar="KMH[,KMH...]")
    p.add_argument("--snr", metavar="DB[,DB...]", help="history SNRs; 'clean' for none")
    p.add_argument("--epochs", type=int)
    p.add_argument("--ablate", choices=ABLATION_NAMES)
    p.add_argument("--variants", metavar="NAME[,NAME...]", help="e.g. full,no-kan,hold,ar")
    p.add_argument("--jobs", type=int)

    p = sub.add_parser("inspect", help="print dataset or checkpoint headers")
    p.add_argument("paths", nargs="+")
    return parser


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "grid": cmd_grid, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = None if args.command == "inspect" else resolve(args)
        if cfg is not None and args.out is None and _is_manifest(_peek(args.config)):
            # a replayed manifest must not write over the run it came from
            raise UsageError("--out is required with --config")
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"channelkan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"channelkan: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError,) as exc:
        print(f"channelkan: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetFormatError, DimensionError, ConfigMismatchError, EmptyDatasetError, OSError) as exc:
        print(f"channelkan: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
