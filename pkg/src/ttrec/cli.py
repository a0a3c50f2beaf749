"""Command-line entry point: ``ttrec <command> [--config PATH] [--seed N] [--out DIR]``.

Every command resolves its configuration as flags > config file > defaults,
writes ``config_echo.json`` and ``seed.txt`` into its output directory, and
reports failures as a JSON object on stderr with a nonzero exit status.
The echoed config is itself a valid ``--config`` file.
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import backbone, datagen, evalrank, pipeline, theory, ttt
from .backbone import PretrainConfig
from .datagen import SyntheticConfig
from .ttt import TTTConfig

logger = logging.getLogger("ttrec")

SECTIONS = {"data": SyntheticConfig, "pretrain": PretrainConfig, "ttt": TTTConfig}
EXTRA_SECTIONS = {
    "eval": {"ks": [10, 20], "partition": "ood", "split": "test"},
    "verify": {"trials1": 1000, "trials2": 500, "n_max": 10},
    "adapt": {"variant": "full", "pairs": "test"},
    "sweep": {"grid": {"T": [0.1, 0.3, 0.5, 0.7, 0.9]}, "metric_ks": [10, 20]},
}
SWEEP_PARAMS = ("alpha", "tau", "T", "K")
EXIT_USAGE = 2
EXIT_FAILURE = 1


class CLIError(Exception):
    """A user-facing failure (bad config, missing file, invalid value)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message)


# --- configuration ----------------------------------------------------------

def _defaults() -> dict:
    cfg = {name: asdict(cls()) for name, cls in SECTIONS.items()}
    for section in cfg.values():
        section.pop("seed", None)
    cfg["pretrain"]["fusion_hidden"] = list(cfg["pretrain"]["fusion_hidden"])
    cfg["pretrain"]["ks"] = list(cfg["pretrain"]["ks"])
    cfg.update(json.loads(json.dumps(EXTRA_SECTIONS)))
    cfg["seed"] = 0
    return cfg


def _merge(base: dict, override: dict, where: str = "config") -> dict:
    for key, value in override.items():
        if key not in base:
            raise CLIError(f"unknown key {where}.{key}")
        if isinstance(base[key], dict) and key != "grid":
            if not isinstance(value, dict):
                raise CLIError(f"{where}.{key} must be an object")
            _merge(base[key], value, f"{where}.{key}")
        else:
            base[key] = value
    return base


def load_config(path: str | None, overrides: dict) -> dict:
    cfg = _defaults()
    if path:
        p = Path(path)
        if not p.exists():
            raise CLIError(f"config file not found: {p}")
        try:
            blob = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CLIError(f"{p}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(blob, dict):
            raise CLIError(f"{p}: top level must be a JSON object")
        _merge(cfg, blob)
    _merge(cfg, overrides)
    return cfg


def _build(cls, values: dict, seed: int):
    names = {f.name for f in fields(cls)}
    kwargs = {k: v for k, v in values.items() if k in names}
    if "seed" in names:
        kwargs["seed"] = seed
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise CLIError(f"invalid {cls.__name__}: {exc}") from None


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise CLIError(f"--ks expects comma-separated integers, got {text!r}") from None
    if not ks or any(k < 1 for k in ks):
        raise CLIError("--ks values must be positive integers")
    return ks


# --- output helpers ---------------------------------------------------------

def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _prepare_out(out: str, cfg: dict) -> Path:
    directory = Path(out)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "config_echo.json").write_text(_dump(cfg), encoding="utf-8")
        (directory / "seed.txt").write_text(f"{cfg['seed']}\n", encoding="utf-8")
    except OSError as exc:
        raise CLIError(f"cannot write to output directory {directory}: {exc.strerror}") from None
    return directory


def _require(path: str | None, flag: str) -> Path:
    if not path:
        raise CLIError(f"{flag} is required")
    p = Path(path)
    if not p.exists():
        raise CLIError(f"{flag} path does not exist: {p}")
    return p


# --- commands ---------------------------------------------------------------

def cmd_generate(args, cfg) -> Path:
    out = _prepare_out(args.out, cfg)
    data_cfg = _build(SyntheticConfig, cfg["data"], cfg["seed"])
    ds = datagen.generate(data_cfg)
    datagen.save_dataset(ds, out)
    return out


def cmd_pretrain(args, cfg) -> Path:
    data_dir = _require(args.data, "--data")
    out = _prepare_out(args.out, cfg)
    ds = datagen.load_dataset(data_dir)
    pcfg = _build(PretrainConfig, cfg["pretrain"], cfg["seed"])
    model, log = backbone.pretrain(ds, pcfg)
    backbone.save_checkpoint(model, out / "checkpoint.json", extra={"seed": cfg["seed"]})
    (out / "train_log.json").write_text(_dump(asdict(log)), encoding="utf-8")
    return out


def _loaded(args):
    ckpt = _require(args.checkpoint, "--checkpoint")
    data_dir = _require(args.data, "--data")
    return backbone.load_checkpoint(ckpt), datagen.load_dataset(data_dir)


def cmd_adapt(args, cfg) -> Path:
    model, ds = _loaded(args)
    out = _prepare_out(args.out, cfg)
    tcfg = _build(TTTConfig, cfg["ttt"], cfg["seed"])
    variant = cfg["adapt"]["variant"]
    if variant not in ttt.VARIANTS:
        raise CLIError(f"unknown variant {variant!r}; expected one of {list(ttt.VARIANTS)}")
    inputs = backbone.dataset_inputs(ds, "ood", ("train",))
    users, items = pipeline.adaptation_source(ds, cfg["adapt"]["pairs"])
    adapted, _, report = ttt.adapt(model, inputs, users, items, tcfg, variant=variant)
    metrics = evalrank.evaluate(adapted, ds, "ood", ks=tuple(cfg["eval"]["ks"]), inputs=inputs)
    report.metrics = metrics.to_dict()
    backbone.save_checkpoint(adapted, out / "checkpoint.json",
                             extra={"seed": cfg["seed"], "variant": variant})
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "loss_curve.csv").write_text(report.loss_curve_csv(), encoding="utf-8")
    return out


def cmd_evaluate(args, cfg) -> Path:
    model, ds = _loaded(args)
    out = _prepare_out(args.out, cfg)
    ev = cfg["eval"]
    metrics = evalrank.evaluate(model, ds, ev["partition"], ev["split"], ks=tuple(ev["ks"]))
    text = metrics.to_json(f"{ev['split']}_{ev['partition']}")
    (out / "metrics.json").write_text(text, encoding="utf-8")
    return out


def cmd_verify(args, cfg) -> Path:
    out = _prepare_out(args.out, cfg)
    v = cfg["verify"]
    if v["trials1"] < 0 or v["trials2"] < 0:
        raise CLIError("trial counts must be >= 0")
    report = theory.verification_report(v["trials1"], v["trials2"], cfg["seed"], v["n_max"])
    (out / "verify.json").write_text(theory.report_json(report), encoding="utf-8")
    return out


def sweep_rows(model, ds, base: TTTConfig, grid: dict, ks, pairs: str = "test"):
    """One row per grid point: the parameter values plus Recall/NDCG at each K."""
    unknown = sorted(set(grid) - set(SWEEP_PARAMS))
    if unknown:
        raise CLIError(f"cannot sweep {unknown[0]!r}; choose from {list(SWEEP_PARAMS)}")
    names = [p for p in SWEEP_PARAMS if p in grid]
    if not names:
        raise CLIError("sweep grid is empty")
    inputs = backbone.dataset_inputs(ds, "ood", ("train",))
    users, items = pipeline.adaptation_source(ds, pairs)
    rows = []
    for point in itertools.product(*(grid[n] for n in names)):
        values = dict(zip(names, point))
        try:
            cfg = TTTConfig(**{**asdict(base), **values})
        except (TypeError, ValueError) as exc:
            raise CLIError(f"invalid sweep point {values}: {exc}") from None
        adapted, _, _ = ttt.adapt(model, inputs, users, items, cfg)
        metrics = evalrank.evaluate(adapted, ds, "ood", ks=tuple(ks), inputs=inputs)
        row = dict(values)
        for k in ks:
            row[f"recall@{k}"] = metrics.recall(k)
            row[f"ndcg@{k}"] = metrics.ndcg(k)
        rows.append(row)
    return names, rows


def cmd_sweep(args, cfg) -> Path:
    model, ds = _loaded(args)
    out = _prepare_out(args.out, cfg)
    base = _build(TTTConfig, cfg["ttt"], cfg["seed"])
    ks = cfg["sweep"]["metric_ks"]
    names, rows = sweep_rows(model, ds, base, cfg["sweep"]["grid"], ks, cfg["adapt"]["pairs"])
    buf = io.StringIO()
    header = names + [f"{m}@{k}" for k in ks for m in ("recall", "ndcg")]
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(row[h]) for h in header])
    (out / "sweep.csv").write_text(buf.getvalue(), encoding="utf-8")
    return out


COMMANDS = {"generate": cmd_generate, "pretrain": cmd_pretrain, "adapt": cmd_adapt,
            "evaluate": cmd_evaluate, "verify": cmd_verify, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ttrec", description="Test-time training for shifted-domain recommendation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, needs_model=False, needs_data=False):
        p.add_argument("--config", help="JSON config file; unknown keys are rejected")
        p.add_argument("--seed", type=int, help="global seed (default 0)")
        p.add_argument("--out", required=True, help="output directory")
        if needs_model:
            p.add_argument("--checkpoint", required=True, help="checkpoint JSON")
        if needs_data or needs_model:
            p.add_argument("--data", required=True, help="dataset directory")
        return p

    common(sub.add_parser("generate", help="write a synthetic dataset"))
    p = common(sub.add_parser("pretrain", help="train the backbone on the in-distribution split"),
               needs_data=True)
    p.add_argument("--epochs", type=int)
    p = common(sub.add_parser("adapt", help="test-time adaptation on the shifted split"),
               needs_model=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--ablate", choices=list(ttt.VARIANTS[1:]), help="drop one or both tasks")
    p.add_argument("--pairs", choices=list(pipeline.PAIR_SOURCES),
                   help="which shifted-domain pairs feed adaptation")
    p.add_argument("--ks", help="comma-separated cutoffs, e.g. 10,20")
    p = common(sub.add_parser("evaluate", help="all-ranking Recall/NDCG"), needs_model=True)
    p.add_argument("--ks", help="comma-separated cutoffs, e.g. 10,20")
    p.add_argument("--partition", choices=["iid", "ood"])
    p.add_argument("--split", choices=["train", "valid", "test"])
    p = common(sub.add_parser("verify", help="numerical checks of the convergence theorems"))
    p.add_argument("--trials", type=int, help="trial count for both theorems")
    p = common(sub.add_parser("sweep", help="grid over alpha, tau, T, K"), needs_model=True)
    p.add_argument("--param", choices=list(SWEEP_PARAMS), help="single parameter to sweep")
    p.add_argument("--values", help="comma-separated values for --param")
    p.add_argument("--epochs", type=int)
    return parser


def _overrides(args) -> dict:
    o: dict = {}
    if args.seed is not None:
        o["seed"] = args.seed
    epochs = getattr(args, "epochs", None)
    if epochs is not None:
        o.setdefault("pretrain" if args.command == "pretrain" else "ttt", {})["epochs"] = epochs
    if getattr(args, "ablate", None):
        o.setdefault("adapt", {})["variant"] = args.ablate
    if getattr(args, "pairs", None):
        o.setdefault("adapt", {})["pairs"] = args.pairs
    if getattr(args, "ks", None):
        o.setdefault("eval", {})["ks"] = _parse_ks(args.ks)
    for key in ("partition", "split"):
        if getattr(args, key, None):
            o.setdefault("eval", {})[key] = getattr(args, key)
    if getattr(args, "trials", None) is not None:
        o["verify"] = {"trials1": args.trials, "trials2": args.trials}
    if getattr(args, "param", None):
        if not args.values:
            raise CLIError("--param needs --values")
        caster = int if args.param == "K" else float
        try:
            vals = [caster(tok) for tok in args.values.split(",") if tok.strip()]
        except ValueError:
            raise CLIError(f"--values must be numbers, got {args.values!r}") from None
        o["sweep"] = {"grid": {args.param: vals}}
    return o


def _fail(command, exc, code) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "command": command}
    sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config, _overrides(args))
        if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
            raise CLIError("seed must be a non-negative integer")
        out = COMMANDS[command](args, cfg)
    except CLIError as exc:
        return _fail(command, exc, EXIT_USAGE)
    except (ValueError, OSError, FloatingPointError, KeyError) as exc:
        return _fail(command, exc, EXIT_FAILURE)
    print(json.dumps({"command": command, "out": str(out), "status": "ok"}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
