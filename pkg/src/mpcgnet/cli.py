"""Command-line interface: synth, train, eval, gradcheck, info, ablate.

Every option can also come from a ``--config`` file of ``key = value``
lines (keys are the long option names with dashes or underscores).
Explicit flags beat the config file, which beats the built-in defaults.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import ConfigError, read_kv
from .metrics import METRIC_NAMES
from .network import (
    INPUT_DIVISOR,
    CheckpointError,
    MPCGNet,
    NetConfig,
    count_flops,
    count_params,
    load_checkpoint,
)
from .synthdata import REGIMES, ImageFormatError, load_dataset, make_dataset, write_dataset
from .tensor import NonFiniteError
from .train import NonFiniteLossError, TrainConfig, evaluate, gate_bits, train
from .verify import CHECKS, run_check

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parse_size(text: str) -> tuple[int, int]:
    parts = str(text).lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise UsageError(f"bad size {text!r}; expected HxW such as 64x64") from None
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2 or min(dims) <= 0:
        raise UsageError(f"bad size {text!r}; expected HxW such as 64x64")
    if dims[0] % INPUT_DIVISOR or dims[1] % INPUT_DIVISOR:
        raise UsageError(f"size {dims[0]}x{dims[1]} must be divisible by {INPUT_DIVISOR}")
    return dims


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


# option name -> (type, default, help); shared between flags and config files
OPTIONS = {
    "synth": {
        "out": (str, None, "output dataset directory"),
        "count": (int, 8, "number of samples"),
        "regime": (str, "mixed", f"one of {', '.join(REGIMES)}"),
        "seed": (int, 0, "base seed"),
        "size": (str, "64x64", "image size HxW"),
    },
    "train": {
        "data": (str, None, "training dataset directory"),
        "val_data": (str, None, "separate validation dataset (default: hold out the last fifth)"),
        "out": (str, None, "output directory for model.ckpt and train_log.tsv"),
        "epochs": (int, 150, "training epochs"),
        "batch": (int, 8, "batch size"),
        "lr": (float, 1e-4, "initial learning rate"),
        "weight_decay": (float, 1e-2, "AdamW weight decay"),
        "size": (str, "64x64", "input size HxW (must match the data)"),
        "seed": (int, 0, "seed for init, shuffling and augmentation"),
        "val_fraction": (float, 0.2, "held-out fraction when --val-data is absent"),
        "augment": (_bool, True, "rotations, flips and colour jitter"),
        "checkpoint_every": (int, 0, "also checkpoint every N epochs (0: only at the end)"),
        "widths": (str, "16,32,64,128", "encoder stage widths"),
        "decoder_width": (int, 32, "WCAD/DFA channel width"),
        "no_cgmfe": (_bool, False, "replace CGMFE by a pointwise projection"),
        "no_wcad": (_bool, False, "replace WCAD by upsample + concat + pointwise"),
        "no_dfa": (_bool, False, "replace DFA by a pointwise conv over the concatenation"),
        "no_gates": (_bool, False, "force every coupling gate open"),
    },
    "eval": {
        "data": (str, None, "dataset directory"),
        "ckpt": (str, None, "checkpoint file"),
        "csv": (str, None, "metrics CSV to write"),
    },
    "gradcheck": {
        "module": (str, "all", f"one of {', '.join([*CHECKS, 'all'])}"),
        "seed": (int, 0, "seed"),
    },
    "info": {
        "ckpt": (str, None, "checkpoint file (default: a fresh model)"),
        "size": (str, "64x64", "input size for the FLOP count"),
    },
    "ablate": {
        "data": (str, None, "training dataset directory"),
        "val_data": (str, None, "validation dataset directory"),
        "out": (str, None, "output directory"),
        "variants": (str, "full,no-dfa", "comma list of full, no-cgmfe, no-wcad, no-dfa, no-gates"),
        "epochs": (int, 150, "training epochs"),
        "batch": (int, 8, "batch size"),
        "lr": (float, 1e-4, "initial learning rate"),
        "size": (str, "64x64", "input size HxW"),
        "seed": (int, 0, "seed"),
        "augment": (_bool, True, "rotations, flips and colour jitter"),
    },
}
REQUIRED = {"synth": ["out"], "train": ["data", "out"], "eval": ["data", "ckpt", "csv"], "ablate": ["data", "out"]}
FLAG_ONLY_BOOLS = {"no_cgmfe", "no_wcad", "no_dfa", "no_gates"}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mpcgnet", description="Gated multiscale segmentation network toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for cmd, opts in OPTIONS.items():
        sp = sub.add_parser(cmd)
        sp.add_argument("--config", help="key = value file with defaults for this command")
        for key, (typ, _default, help_) in opts.items():
            flag = "--" + key.replace("_", "-")
            if key in FLAG_ONLY_BOOLS:
                sp.add_argument(flag, action="store_const", const=True, default=None, help=help_)
            elif typ is _bool:
                sp.add_argument(flag, action="store_const", const=True, default=None, help=help_)
                sp.add_argument("--no-" + key.replace("_", "-"), dest=key, action="store_const", const=False)
            else:
                sp.add_argument(flag, type=str, default=None, help=help_)
    return parser


def resolve(cmd: str, args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags; reject unknown config keys."""
    opts = OPTIONS[cmd]
    from_file: dict[str, str] = {}
    if args.config:
        try:
            raw = read_kv(args.config)
        except FileNotFoundError:
            raise UsageError(f"config file {args.config} not found") from None
        except ConfigError as exc:
            raise UsageError(str(exc)) from None
        for key, val in raw.items():
            norm = key.replace("-", "_")
            if norm not in opts:
                raise UsageError(f"unknown config key {key!r} for '{cmd}'")
            from_file[norm] = val
    out = {}
    for key, (typ, default, _help) in opts.items():
        val = getattr(args, key)
        if val is None:
            val = from_file.get(key, default)
        if val is not None and not isinstance(val, bool):
            try:
                val = typ(val)
            except ValueError:
                raise UsageError(f"bad value for {key}: {val!r}") from None
        out[key] = val
    for key in REQUIRED.get(cmd, []):
        if out[key] is None:
            raise UsageError(f"{cmd}: --{key.replace('_', '-')} is required")
    return out


def print_config(cmd: str, cfg: dict) -> None:
    print(f"# resolved config ({cmd})")
    for key, val in cfg.items():
        print(f"{key} = {val}")
    sys.stdout.flush()


def _load(path) -> "object":
    try:
        return load_dataset(path)
    except (FileNotFoundError, ImageFormatError, ValueError) as exc:
        raise DataError(str(exc)) from exc


def _check_size(ds, size, what="dataset") -> None:
    got = tuple(ds.images.shape[2:])
    if got != tuple(size):
        raise DataError(f"{what} images are {got[0]}x{got[1]} but --size is {size[0]}x{size[1]}")


def _net_config(cfg: dict, **ablations) -> NetConfig:
    try:
        widths = tuple(int(w) for w in str(cfg.get("widths", "16,32,64,128")).split(","))
        return NetConfig(widths=widths, decoder_width=cfg.get("decoder_width", 32), seed=cfg["seed"], **ablations)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------- subcommands


def cmd_synth(cfg: dict) -> int:
    size = parse_size(cfg["size"])
    if cfg["regime"] not in REGIMES:
        raise UsageError(f"unknown regime {cfg['regime']!r}; choose from {', '.join(REGIMES)}")
    if cfg["count"] < 1:
        raise UsageError("--count must be positive")
    samples = make_dataset(cfg["regime"], cfg["count"], cfg["seed"], size)
    write_dataset(cfg["out"], samples)
    print(f"wrote {len(samples)} samples to {cfg['out']}")
    return EXIT_OK


def _train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(
            epochs=cfg["epochs"], batch_size=cfg["batch"], lr=cfg["lr"],
            weight_decay=cfg.get("weight_decay", 1e-2), size=parse_size(cfg["size"])[0],
            seed=cfg["seed"], val_fraction=cfg.get("val_fraction", 0.2), augment=cfg["augment"],
            checkpoint_every=cfg.get("checkpoint_every", 0), threads=threads_from_env(),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(cfg: dict) -> int:
    size = parse_size(cfg["size"])
    tcfg = _train_config(cfg)
    ncfg = _net_config(cfg, use_cgmfe=not cfg["no_cgmfe"], use_wcad=not cfg["no_wcad"],
                       use_dfa=not cfg["no_dfa"], use_gates=not cfg["no_gates"])
    ds = _load(cfg["data"])
    _check_size(ds, size)
    val = None
    if cfg["val_data"]:
        val = _load(cfg["val_data"])
        _check_size(val, size, "validation")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    net = MPCGNet(ncfg)
    print(f"params = {count_params(net)}")
    res = train(net, ds, tcfg, val_set=val, log_path=out / "train_log.tsv", ckpt_path=out / "model.ckpt",
                on_epoch=lambda r: print(f"epoch {r['epoch']} lr {r['lr']} loss {r['train_loss']} "
                                         f"val_mdice {r['val_mdice']}", flush=True))
    print(f"final val_mdice = {res.val_mdice[-1]:.6f}")
    print(f"checkpoint = {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    try:
        net = load_checkpoint(cfg["ckpt"])
    except (FileNotFoundError, CheckpointError) as exc:
        raise DataError(str(exc)) from exc
    ds = _load(cfg["data"])
    if ds.images.shape[2] % INPUT_DIVISOR or ds.images.shape[3] % INPUT_DIVISOR:
        raise DataError(f"dataset images must have sides divisible by {INPUT_DIVISOR}")
    rep = evaluate(net, ds)
    rep.to_csv(cfg["csv"])
    means = rep.means
    print("\t".join(METRIC_NAMES))
    print("\t".join(f"{100 * means[k]:.2f}" for k in METRIC_NAMES))
    return EXIT_OK


def cmd_gradcheck(cfg: dict) -> int:
    names = list(CHECKS) if cfg["module"] == "all" else [cfg["module"]]
    for n in names:
        if n not in CHECKS:
            raise UsageError(f"unknown module {n!r}; choose from {', '.join([*CHECKS, 'all'])}")
    failed = []
    print("module\tseed\trel_err\ttol\tresult")
    for n in names:
        err, tol = run_check(n, cfg["seed"])
        ok = err < tol
        print(f"{n}\t{cfg['seed']}\t{err:.3e}\t{tol:.0e}\t{'pass' if ok else 'FAIL'}", flush=True)
        if not ok:
            failed.append(n)
    if failed:
        raise NumericFailure(f"gradient check above tolerance: {', '.join(failed)}")
    return EXIT_OK


def cmd_info(cfg: dict) -> int:
    size = parse_size(cfg["size"])
    if cfg["ckpt"]:
        try:
            net = load_checkpoint(cfg["ckpt"])
        except (FileNotFoundError, CheckpointError) as exc:
            raise DataError(str(exc)) from exc
    else:
        net = MPCGNet()
    params = count_params(net)
    flops = count_flops(net, *size)
    print(f"params = {params} ({params / 1e6:.3f} M)")
    print(f"flops@{size[0]}x{size[1]} = {flops} ({flops / 1e9:.3f} G)")
    for name, mat in net.gate_matrices().items():
        print(f"gates {name} = {gate_bits(mat)}")
        for row in mat:
            print("  " + " ".join(str(int(v)) for v in row))
    return EXIT_OK


VARIANTS = {
    "full": {},
    "no-cgmfe": {"use_cgmfe": False},
    "no-wcad": {"use_wcad": False},
    "no-dfa": {"use_dfa": False},
    "no-gates": {"use_gates": False},
}


def cmd_ablate(cfg: dict) -> int:
    size = parse_size(cfg["size"])
    variants = [v.strip() for v in cfg["variants"].split(",") if v.strip()]
    for v in variants:
        if v not in VARIANTS:
            raise UsageError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
    tcfg = _train_config({**cfg, "val_fraction": 0.2})
    ds = _load(cfg["data"])
    _check_size(ds, size)
    val = _load(cfg["val_data"]) if cfg["val_data"] else None
    if val is not None:
        _check_size(val, size, "validation")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for v in variants:
        net = MPCGNet(_net_config(cfg, **VARIANTS[v]))
        res = train(net, ds, tcfg, val_set=val, log_path=out / f"{v}_log.tsv", ckpt_path=out / f"{v}.ckpt")
        rows.append((v, count_params(net), res.val_mdice[-1]))
        print(f"{v}\tparams={rows[-1][1]}\tval_mdice={rows[-1][2]:.6f}", flush=True)
    with open(out / "ablation.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["variant", "params", "val_mdice"])
        for v, p, d in rows:
            w.writerow([v, p, f"{d:.6f}"])
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "info": cmd_info,
    "ablate": cmd_ablate,
}


def threads_from_env() -> int:
    raw = os.environ.get("MPCG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"MPCG_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"MPCG_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv: list[str] | None = None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_usage().strip())
        cfg = resolve(args.command, args)
        threads = threads_from_env()
        print_config(args.command, cfg)
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, ImageFormatError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, NonFiniteLossError, NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
