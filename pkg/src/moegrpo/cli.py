"""Command line entry point: ``moegrpo {gen,train,eval,compare,ablate}``.

Exit codes: 0 success, 2 usage or validation error, 3 runtime/numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import data as vdata
from . import harness
from .errors import (
    ConfigError,
    CorruptionError,
    ParseError,
    TrainingError,
    ValidationError,
    VersionError,
)
from .metrics import evaluate
from .model import load, read_manifest

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_run_flags(p: argparse.ArgumentParser, with_algo: bool = True):
    src = p.add_argument_group("data source (a CSV path or inline generation)")
    src.add_argument("--data", help="dataset CSV")
    src.add_argument("--gen-n", type=int, help="generate inline: number of samples")
    src.add_argument("--gen-seed", type=int, help="generate inline: seed")
    src.add_argument("--gen-noise", type=float, help="generate inline: label noise")

    p.add_argument("--config", help="JSON config; its values override flags")
    if with_algo:
        p.add_argument("--algo", choices=["grpo", "ppo", "ce"])
        p.add_argument("--seed", type=int)
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--split-seed", type=int)

    t = p.add_argument_group("training")
    t.add_argument("--epochs", type=int)
    t.add_argument("--group-size", type=int)
    t.add_argument("--clip-eps", type=float)
    t.add_argument("--kl-coeff", type=float)
    t.add_argument("--lr", type=float, dest="learning_rate")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--delta", type=float)

    m = p.add_argument_group("model")
    m.add_argument("--d-model", type=int)
    m.add_argument("--n-experts", type=int)
    m.add_argument("--n-heads", type=int)
    m.add_argument("--ff-dim", type=int)
    m.add_argument("--no-gating", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="moegrpo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic dataset CSV")
    g.add_argument("--n", type=int, default=5000)
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--noise", type=float, default=0.02)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one model and write a run directory")
    _add_run_flags(t)
    t.add_argument("--out")

    e = sub.add_parser("eval", help="evaluate a checkpoint, print metrics JSON")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset CSV (defaults to regenerating the training data)")
    e.add_argument("--split", choices=["all", "train", "test"], default="all")

    c = sub.add_parser("compare", help="GRPO vs PPO over several seeds")
    _add_run_flags(c, with_algo=False)
    c.add_argument("--seeds", type=_int_list, default=[1, 2, 3, 4, 5])
    c.add_argument("--out")
    c.add_argument("--workers", type=int, default=1)

    a = sub.add_parser("ablate", help="sweep one model/training component")
    _add_run_flags(a, with_algo=False)
    a.add_argument("--component", required=True)
    a.add_argument("--seeds", type=_int_list, default=[1, 2, 3])
    a.add_argument("--out")
    a.add_argument("--workers", type=int, default=1)
    return parser


def _overrides(args) -> dict:
    """Nested config overrides from explicit flags, then the --config file on top."""
    o: dict = {"model": {}, "train": {}}
    inline = {k: getattr(args, "gen_" + k) for k in ("n", "seed", "noise")}
    if args.data is not None:
        if any(v is not None for v in inline.values()):
            raise ConfigError("--data and --gen-* are mutually exclusive")
        o["data_path"] = args.data
        o["gen"] = None
    else:
        gen = {}
        for key, field_name in (("n", "n_samples"), ("seed", "seed"), ("noise", "label_noise")):
            if inline[key] is not None:
                gen[field_name] = inline[key]
        o["gen"] = gen
    for name in ("algo", "seed", "train_fraction", "split_seed"):
        v = getattr(args, name, None)
        if v is not None:
            o[name] = v
    for name in ("epochs", "group_size", "clip_eps", "kl_coeff", "learning_rate",
                 "batch_size", "weight_decay", "delta"):
        v = getattr(args, name)
        if v is not None:
            o["train"][name] = v
    for name in ("d_model", "n_experts", "n_heads", "ff_dim"):
        v = getattr(args, name)
        if v is not None:
            o["model"][name] = v
    if args.no_gating:
        o["model"]["use_gating"] = False

    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        if "config" in file_cfg and "format_version" in file_cfg:
            file_cfg = file_cfg["config"]  # a report.json: reuse its resolved config
        if file_cfg.get("data_path") is not None:
            o["gen"] = None
        elif "gen" in file_cfg:
            o.pop("data_path", None)
        o = harness._deep_merge(o, file_cfg)
    return o


def cmd_gen(args) -> int:
    cfg = vdata.GenConfig(n_samples=args.n, seed=args.seed, label_noise=args.noise)
    out = Path(args.out)
    samples = vdata.generate(cfg)
    vdata.write_csv(samples, out)
    meta = {"format_version": 1, "gen": vdata.gen_config_dict(cfg), "n_rows": len(samples)}
    Path(str(out) + ".meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = harness.build_run_config(_overrides(args))
    out = args.out or harness.default_out_root() / f"train-{cfg.algo}-seed{cfg.seed}"
    report = harness.run_training(cfg, out)
    best = report["best"]
    if best:
        print(f"best epoch {best['epoch']}: test_acc={best['test_accuracy']:.4f} "
              f"f1={best['f1']:.4f} roc_auc={best['roc_auc']}")
    print(f"run directory: {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not (ckpt / "manifest.json").is_file() or not (ckpt / "weights.bin").is_file():
        raise FileNotFoundError(f"{ckpt}: no checkpoint (manifest.json + weights.bin) found")
    manifest = read_manifest(ckpt)
    model = load(ckpt)
    meta = manifest.get("metadata", {})
    if args.data:
        samples = vdata.read_csv(args.data)
    elif meta.get("gen"):
        samples = vdata.generate(vdata.GenConfig(**meta["gen"]))
    else:
        raise ConfigError("--data is required for checkpoints trained on a CSV file")
    if "standardization" not in meta:
        raise CorruptionError("checkpoint manifest lacks standardization parameters")
    std = vdata.StandardizationParams.from_dict(meta["standardization"])

    X, y = vdata.to_arrays(samples)
    if args.split != "all":
        tr, te = vdata.split_indices(len(y), meta["train_fraction"], meta["split_seed"])
        idx = tr if args.split == "train" else te
        X, y = X[idx], y[idx]
    if len(y) == 0:
        raise ConfigError("no samples to evaluate")
    result = evaluate(model, std.apply(X), y)
    print(json.dumps({**result.to_dict(), "n_samples": result.n_samples, "split": args.split}, indent=2))
    return EXIT_OK


def cmd_compare(args) -> int:
    out = args.out or harness.default_out_root() / "compare"
    result = harness.compare(_overrides(args), args.seeds, out, workers=args.workers)
    for row in result["rows"] + result["means"]:
        print(f"{row['algo']:>5} {str(row['seed']):>5}  train={row['train_accuracy']:.4f} "
              f"test={row['test_accuracy']:.4f} f1={row['f1']:.4f} auc={row['roc_auc']:.4f}")
    print(f"table: {Path(out) / 'compare.csv'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.component not in harness.ABLATIONS:
        raise ConfigError(f"unknown component {args.component!r}; choose from {sorted(harness.ABLATIONS)}")
    out = args.out or harness.default_out_root() / f"ablate-{args.component}"
    result = harness.ablate(_overrides(args), args.component, args.seeds, out, workers=args.workers)
    for name, d in result["deltas_vs_baseline"].items():
        print(f"{name:>12}  delta_test_acc={d['test_accuracy']:+.4f}")
    print(f"report: {Path(out) / 'ablate.json'}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "compare": cmd_compare, "ablate": cmd_ablate}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ParseError, ValidationError, FileNotFoundError, IsADirectoryError,
            PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        if exc.trace is not None:
            print(f"trace: {json.dumps(asdict(exc.trace))}", file=sys.stderr)
        return EXIT_RUNTIME
    except (CorruptionError, VersionError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
