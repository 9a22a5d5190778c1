"""fsrlab command line: gen, train, eval, gradcheck, discrepancy, ablate."""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, checkpoint, kernels, metrics
from .checks import run_suite
from .data import default_domains, generate_pool, load_dataset, save_dataset, select_target
from .fsr import AlphaDist
from .training import ABLATION_FLAGS, FsrModel, NumericalError, TrainConfig, progressive_train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("fsrlab")

# keys that describe the data rather than the optimizer
DATA_KEYS = {"target_domain": 1, "class_count": 7, "n_per_domain": 700, "val_fraction": 0.1}


class ConfigError(ValueError):
    pass


# -- config ------------------------------------------------------------------

def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(key: str, value, default):
    if isinstance(value, str):
        v = value.strip()
        if v.lower() in ("none", "null", ""):
            return None
        if isinstance(default, bool):
            if v.lower() in ("1", "true", "yes", "on"):
                return True
            if v.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: not a boolean: {value!r}")
        if isinstance(default, tuple):
            return tuple(int(s) for s in v.strip("()").replace(" ", "").split(",") if s)
        if isinstance(default, float):
            return float(v)
        if isinstance(default, int) or key in ("iters_per_stage", "fsr_hidden", "fixed_block"):
            return int(v)
        return v
    return value


def build_config(values: dict) -> tuple:
    """Split a flat key map into (TrainConfig, data options)."""
    defaults = TrainConfig()
    fields = defaults.to_dict()
    train_kw, data_kw = {}, dict(DATA_KEYS)
    for key, value in values.items():
        try:
            if key in DATA_KEYS:
                data_kw[key] = _coerce(key, value, DATA_KEYS[key])
            elif key in fields:
                default = getattr(defaults, key)
                train_kw[key] = _coerce(key, value, default)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{key}: bad value {value!r} ({exc})") from None
    try:
        cfg = TrainConfig(**train_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg, data_kw


def gather(args) -> dict:
    """Config file values, then CLI flags on top."""
    values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            text = path.read_text()
        except OSError as exc:
            raise IOError(f"cannot read config {path}: {exc}") from exc
        values.update(parse_config_text(text, str(path)))
    flag_map = {"seed": "seed", "lam": "lam", "stages": "stages", "iters": "iters_per_stage",
                "epochs": "epochs_per_stage", "alpha_dist": "alpha_dist", "fixed_block": "fixed_block",
                "target_domain": "target_domain", "n_per_domain": "n_per_domain"}
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = str(v)
    if getattr(args, "star", False):
        values["star_mode"] = "true"
    for name in getattr(args, "ablate", None) or []:
        values[ABLATION_FLAGS[name]] = "true"
    if "alpha_dist" in values:
        try:
            AlphaDist.parse(values["alpha_dist"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return values


# -- run directory -------------------------------------------------------------

def build_id() -> str:
    return f"fsrlab-{__version__}+{kernels.BACKEND}"


def prepare_run_dir(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} already holds a run; pass --force to overwrite")
        shutil.rmtree(out)
    for sub in ("checkpoints", "logs", "metrics"):
        (out / sub).mkdir(parents=True, exist_ok=True)


def write_manifest(out: Path, cfg: TrainConfig, data_kw: dict, extra: dict) -> None:
    manifest = {
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "build": build_id(),
        "config": cfg.to_dict(),
        "data": data_kw,
        "layout": {"checkpoints": "checkpoints/", "logs": "logs/", "metrics": "metrics/"},
    }
    manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def load_splits(data_dir, data_kw: dict, seed: int) -> dict:
    if data_dir is not None:
        pool = load_dataset(data_dir)
    else:
        pool = generate_pool(default_domains(), data_kw["class_count"], data_kw["n_per_domain"],
                             data_kw["val_fraction"], seed)
    return select_target(pool, int(data_kw["target_domain"]))


def train_run(cfg: TrainConfig, data_kw: dict, out: Path, force: bool = False, data_dir=None,
              splits: dict | None = None) -> dict:
    """Train, then write checkpoint, logs, metrics and manifest under ``out``."""
    prepare_run_dir(out, force)
    if splits is None:
        splits = load_splits(data_dir, data_kw, cfg.seed)
    t0 = time.perf_counter()
    ckpt_dir = out / "checkpoints"

    def stage_end(state, sm):
        checkpoint.save(ckpt_dir / f"stage{sm.stage}.ckpt", state.model.state_dict())

    result = progressive_train(splits, cfg, on_stage_end=stage_end)
    checkpoint.save(ckpt_dir / "final.ckpt", result.model.state_dict())
    acc = metrics.evaluate(result.model, splits["test"]).accuracy
    metrics.write_csv(out / "logs" / "train_log.csv", metrics.LOG_FIELDS, result.log_rows)
    profile = metrics.discrepancy_profile(result.model, splits["train"], tag=out.name,
                                          insertion=cfg.mode)
    metrics.write_discrepancy(out / "metrics" / "discrepancy.csv", [profile])
    metrics.write_csv(out / "metrics" / "stages.csv",
                      ("stage", "block", "steps", "val_accuracy", "L_d", "L_con", "L_div", "L_cls"),
                      [(s.stage, s.block, s.steps, s.val_accuracy, *(s.mean_losses[k] for k in
                        ("L_d", "L_con", "L_div", "L_cls"))) for s in result.stages])
    metrics.write_csv(out / "metrics" / "results.csv", ("seed", "target_domain", "accuracy"),
                      [(cfg.seed, int(data_kw["target_domain"]), acc)])
    summary = {"accuracy": acc, "best_val": result.best_val, "best_step": result.best_step,
               "steps_per_epoch": result.steps_per_epoch, "discrepancy": profile.values,
               "seconds": round(time.perf_counter() - t0, 3)}
    # timing varies between runs, so it stays out of the manifest
    write_manifest(out, cfg, data_kw, {"result": {k: v for k, v in summary.items() if k != "seconds"},
                                       "data_dir": str(data_dir) if data_dir else None})
    return summary


# -- commands -----------------------------------------------------------------

def cmd_gen(args) -> int:
    _, data_kw = build_config(gather(args))
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out)
    if (out / "manifest.csv").exists() and not args.force:
        raise FileExistsError(f"{out} already holds a dataset; pass --force to overwrite")
    if out.exists() and args.force:
        shutil.rmtree(out)
    pool = generate_pool(default_domains(), data_kw["class_count"], data_kw["n_per_domain"],
                         data_kw["val_fraction"], seed)
    save_dataset(out, pool)
    print(f"wrote {sum(len(s) for s in pool.values())} images to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, data_kw = build_config(gather(args))
    if args.data is not None and not (Path(args.data) / "manifest.csv").is_file():
        raise FileNotFoundError(f"no dataset at {args.data}; run `fsrlab gen` first")
    summary = train_run(cfg, data_kw, Path(args.out), args.force, args.data)
    print(json.dumps({"run": args.out, "config_hash": cfg.digest(), **summary}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    path = Path(args.checkpoint)
    if path.is_dir():
        path = path / "checkpoints" / "final.ckpt"
    state = checkpoint.load(path)
    model = FsrModel.from_state(state)
    values = gather(args)
    _, data_kw = build_config(values)
    splits = load_splits(args.data, data_kw, int(values.get("seed", 0)))
    res = metrics.evaluate(model, splits[args.split])
    print(json.dumps({"checkpoint": str(path), "split": args.split, "accuracy": res.accuracy,
                      "count": res.count, "per_class": res.per_class}, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    results = run_suite(seed=args.seed or 0, max_checks=args.max_checks or None,
                        only=set(args.only) if args.only else None)
    failed = 0
    for r in results:
        status = "PASS" if r.report.passed else "FAIL"
        failed += not r.report.passed
        print(f"{status} {r.name:<20} max_rel_err={r.report.max_rel_err:.3e} ({r.seconds:.2f}s)")
    print(f"{len(results) - failed}/{len(results)} passed in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def _read_profile(run: Path) -> list:
    rows = metrics.read_csv(run / "metrics" / "discrepancy.csv")
    return [float(r["d_i"]) for r in sorted(rows, key=lambda r: int(r["block"]))]


def cmd_discrepancy(args) -> int:
    a, b = Path(args.run_a), Path(args.run_b)
    da, db = _read_profile(a), _read_profile(b)
    delta = metrics.discrepancy_delta(da, db)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_csv(out, ("block", "d_a", "d_b", "delta"),
                      [(i, x, y, z) for i, (x, y, z) in enumerate(zip(da, db, delta), start=1)])
    for i, z in enumerate(delta, start=1):
        print(f"block {i}: {z:+.6f}")
    return EXIT_OK


ABLATION_ROWS = [("full", {}), ("baseline", {"lam": 0.0})] + \
    [(name, {flag: True}) for name, flag in ABLATION_FLAGS.items()]


def cmd_ablate(args) -> int:
    base_cfg, data_kw = build_config(gather(args))
    seeds = [int(s) for s in args.seeds.split(",")]
    names = args.rows.split(",") if args.rows else [n for n, _ in ABLATION_ROWS]
    rows_by_name = dict(ABLATION_ROWS)
    unknown = [n for n in names if n not in rows_by_name]
    if unknown:
        raise ConfigError(f"unknown ablation rows {unknown}; choose from {sorted(rows_by_name)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = []
    for seed in seeds:
        splits = load_splits(args.data, data_kw, seed)
        for name in names:
            cfg = base_cfg.replace(seed=seed, **rows_by_name[name])
            run_dir = out / f"{name}_seed{seed}"
            try:
                acc = train_run(cfg, data_kw, run_dir, args.force, args.data, splits)["accuracy"]
            except NumericalError as exc:
                log.warning("%s seed %d diverged: %s", name, seed, exc)
                acc = float("nan")
            table.append((name, seed, int(data_kw["target_domain"]), acc))
            print(f"{name:<10} seed={seed} accuracy={acc:.4f}", flush=True)
    metrics.write_csv(out / "ablation.csv", ("variant", "seed", "target_domain", "accuracy"), table)
    for name in names:
        accs = [r[3] for r in table if r[0] == name]
        print(f"{name:<10} mean={np.nanmean(accs) if not np.all(np.isnan(accs)) else float('nan'):.4f}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def _common(p, train_flags: bool = True) -> None:
    p.add_argument("--config", help="flat key=value file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--target-domain", type=int, dest="target_domain")
    p.add_argument("--n-per-domain", type=int, dest="n_per_domain")
    if not train_flags:
        return
    p.add_argument("--lambda", type=float, dest="lam")
    p.add_argument("--stages", type=int)
    p.add_argument("--iters", type=int, help="iterations per stage (overrides epochs)")
    p.add_argument("--epochs", type=int, help="epochs per stage")
    p.add_argument("--alpha-dist", dest="alpha_dist", help="uniform | beta:<v>")
    p.add_argument("--ablate", action="append", choices=sorted(ABLATION_FLAGS))
    p.add_argument("--star", action="store_true", help="randomize after every block")
    p.add_argument("--fixed-block", type=int, dest="fixed_block")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fsrlab", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate the synthetic four-domain dataset")
    _common(p, train_flags=False)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="progressive training run")
    _common(p)
    p.add_argument("--data", help="dataset directory from `gen`; generated in memory if omitted")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a split")
    _common(p, train_flags=False)
    p.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    p.add_argument("--data")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-checks", type=int, default=0, dest="max_checks",
                   help="coordinates probed per parameter; 0 checks all")
    p.add_argument("--only", action="append")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("discrepancy", help="per-block d_i delta between two runs")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_discrepancy)

    p = sub.add_parser("ablate", help="train the ablation matrix over several seeds")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--rows", help=f"comma list from {[n for n, _ in ABLATION_ROWS]}")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileExistsError) as exc:
        print(f"fsrlab: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"fsrlab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, checkpoint.CheckpointError) as exc:
        print(f"fsrlab: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"fsrlab: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
