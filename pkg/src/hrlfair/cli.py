"""Command-line entry point: gen-env, train, eval, sweep."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from . import numcore as nc
from .catalog import ItemCatalog
from .config import ConfigError, RunConfig, from_dict, load_config
from .env import generate_environment, ingest_log, load_users_csv, save_users_csv
from .metrics import REPORT_FIELDS, write_report_csv, write_report_json
from .trainer import TrainingDiverged, evaluate, make_variant, train

log = logging.getLogger("hrlfair")

SWEEP_AXES = {"lambda_g": ("agents", "lambda_g", float), "M": ("trainer", "M", int),
              "W": ("env", "exit_window", int)}

EXIT_IO, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECKPOINT = 1, 2, 3, 4


def write_provenance(out: Path, cfg: RunConfig, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    with open(out / "provenance.json", "w") as fh:
        json.dump({"version": __version__, "command": command, "seeds": list(cfg.seeds)},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_environment(cfg: RunConfig):
    if cfg.env.catalog_path and cfg.env.users_path:
        return ItemCatalog.load_csv(cfg.env.catalog_path), load_users_csv(cfg.env.users_path)
    return generate_environment(cfg.env)


def cmd_gen_env(cfg: RunConfig, out: Path, seed: int | None = None,
                log_path: str | None = None, catalog_path: str | None = None) -> tuple[Path, Path]:
    out.mkdir(parents=True, exist_ok=True)
    if seed is not None:
        cfg.env.seed = seed
    if log_path is not None:
        if catalog_path is None:
            raise ConfigError("--log needs --catalog for item embeddings")
        catalog, users = ingest_log(log_path, ItemCatalog.load_csv(catalog_path), cfg.env)
    else:
        catalog, users = generate_environment(cfg.env)
    cat_file, user_file = out / "catalog.csv", out / "users.csv"
    catalog.save_csv(cat_file)
    save_users_csv(users, user_file)
    write_provenance(out, cfg, "gen-env")
    return cat_file, user_file


def _train_one(cfg_dict: dict, seed: int, out: str) -> list[dict]:
    cfg = from_dict(cfg_dict)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    catalog, users = load_environment(cfg)
    try:
        result = train(cfg, catalog, users, seed, out_dir)
    except TrainingDiverged as exc:
        with open(out_dir / "diagnostics.json", "w") as fh:
            json.dump(exc.state, fh, indent=2, sort_keys=True, default=str)
        raise
    extra = {"variant": cfg.trainer.variant, "seed": seed}
    write_report_csv(result.rows, out_dir / "metrics.csv", extra)
    write_report_json({"variant": cfg.trainer.variant, "seed": seed,
                       "epochs": [r.to_json() for r in result.reports]}, out_dir / "metrics.json")
    nc.save_checkpoint(result.hierarchy.store, out_dir / "checkpoint.bin")
    return result.rows


def _run_cells(jobs: list[tuple[dict, int, str]], workers: int) -> list[list[dict]]:
    if workers <= 1 or len(jobs) <= 1:
        return [_train_one(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_train_one, *zip(*jobs)))


def cmd_train(cfg: RunConfig, out: Path, workers: int = 1) -> dict[int, list[dict]]:
    cfg.output_dir = str(out)
    write_provenance(out, cfg, "train")
    jobs = [(cfg.to_dict(), s, str(out / f"seed_{s}")) for s in cfg.seeds]
    return dict(zip(cfg.seeds, _run_cells(jobs, workers)))


def cmd_eval(checkpoint: str, cfg: RunConfig, episodes: int, out: Path, seed: int | None = None):
    seed = cfg.seeds[0] if seed is None else seed
    catalog, users = load_environment(cfg)
    hier = make_variant(cfg, catalog, seed)
    hier.store.load_state(nc.load_checkpoint(checkpoint))
    report, _ = evaluate(hier, users, cfg.env, seed, episodes)
    cfg.output_dir = str(out)
    write_provenance(out, cfg, "eval")
    write_report_csv([report.row()], out / "report.csv", {"variant": cfg.trainer.variant, "seed": seed})
    write_report_json({"variant": cfg.trainer.variant, "seed": seed, **report.to_json()},
                      out / "report.json")
    return report


def _set_axis(cfg_dict: dict, axis: str, value) -> dict:
    section, key, _ = SWEEP_AXES[axis]
    d = json.loads(json.dumps(cfg_dict))
    d[section][key] = value
    return d


def cmd_sweep(cfg: RunConfig, axis: str, values: list, out: Path, workers: int = 1) -> Path:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    if not values:
        raise ConfigError("sweep axis needs at least one value")
    cast = SWEEP_AXES[axis][2]
    values = [cast(v) for v in values]
    cfg.output_dir = str(out)
    write_provenance(out, cfg, f"sweep {axis}")
    base = cfg.to_dict()
    cells = [(v, s) for v in values for s in cfg.seeds]
    jobs = []
    for v, s in cells:
        cell_cfg = from_dict(_set_axis(base, axis, v))
        jobs.append((cell_cfg.to_dict(), s, str(out / f"{axis}_{v}" / f"seed_{s}")))
    results = _run_cells(jobs, workers)
    table = out / "sweep.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "axis_value", "seed", "variant"] + REPORT_FIELDS)
        for (v, s), rows in zip(cells, results):
            last = rows[-1] if rows else None
            metrics = [repr(float(last[k])) if isinstance(last[k], float) else str(last[k])
                       for k in REPORT_FIELDS] if last else [""] * len(REPORT_FIELDS)
            w.writerow([axis, v, s, cfg.trainer.variant] + metrics)
    return table


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hrlfair", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--seed", type=int, help="override the seed list with one seed")
        sp.add_argument("--out", help="output directory (default: config output_dir)")
        sp.add_argument("--variant", help="full, wo-hie, wo-tc, wo-fm or random")
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("-v", "--verbose", action="store_true")

    g = sub.add_parser("gen-env", help="write catalog.csv and users.csv")
    common(g)
    g.add_argument("--log", help="interaction log CSV to fit popularity and users from")
    g.add_argument("--catalog", help="catalog CSV supplying embeddings for --log")
    common(sub.add_parser("train", help="train and write per-epoch metrics"))
    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int)
    s = sub.add_parser("sweep", help="one-axis hyperparameter sweep")
    common(s)
    s.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    s.add_argument("--values", required=True, help="comma-separated axis values")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None and args.command != "gen-env":
            cfg.seeds = [args.seed]
        if args.variant is not None:
            cfg.trainer.variant = args.variant
        cfg.validate()
        out = Path(args.out or cfg.output_dir)
        if args.command == "gen-env":
            cmd_gen_env(cfg, out, args.seed, args.log, args.catalog)
        elif args.command == "train":
            cmd_train(cfg, out, args.workers)
        elif args.command == "eval":
            cmd_eval(args.checkpoint, cfg, args.episodes or cfg.trainer.eval_episodes, out)
        elif args.command == "sweep":
            values = [v for v in args.values.split(",") if v.strip()]
            cmd_sweep(cfg, args.axis, values, out, args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except nc.NumericsError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
