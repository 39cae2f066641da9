"""``maa`` command line: gen, train, eval, gradcheck, ablate.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
``MAA_NUM_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from . import dataio
from .checkpoint import load_checkpoint
from .config import ADAPTER_MODES, TrainConfig, read_config_file
from .errors import ConfigError, FormatError, MAAError, ValidationError
from .gradcheck import run_gradcheck, tiny_config
from .train import ABLATION_AXES, check_compatible, evaluate, format_ablation_table, run_ablation, train

log = logging.getLogger("maa")

DEFAULT_GEN_MODALITIES = ["G:64:1:0.3:0.3", "L:64:5:0.3:0.3", "T:64:1-8:0.6:0.3"]


class UsageError(MAAError):
    pass


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config overrides (file values < flags)")
    g.add_argument("--config", type=Path, help="flat key=value config file")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            g.add_argument(flag, dest=f.name, default=None, action=argparse.BooleanOptionalAction)
        else:
            g.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())


def _resolve_config(args) -> TrainConfig:
    values = read_config_file(args.config) if args.config else {}
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    return TrainConfig.from_dict(values)


def cmd_gen(args) -> int:
    specs = [dataio.SyntheticModality.parse(s) for s in (args.modality or DEFAULT_GEN_MODALITIES)]
    if args.agreement:
        pair = tuple(dataio.parse_modalities(args.pair))
        if len(pair) != 2:
            raise UsageError("--pair needs exactly two modalities")
        header, records = dataio.gen_agreement(args.agreement, args.per_class, specs, args.seed, pair)
    else:
        if args.classes < 2:
            raise UsageError("--classes must be >= 2")
        header, records = dataio.gen_synthetic(args.classes, args.per_class, specs, args.seed)
    outputs = [(args.out, records)]
    if args.test_out:
        if not args.test_per_class:
            raise UsageError("--test-out needs --test-per-class")
        train_recs, test_recs = dataio.split_records(records, args.test_per_class, args.seed)
        outputs = [(args.out, train_recs), (args.test_out, test_recs)]
    for path, recs in outputs:
        dataio.write_dataset(path, header, recs)
        print(f"wrote {path}: {len(recs)} records")
    print(f"classes: {header.num_classes}")
    for m in header.modalities:
        print(f"modality {dataio.modality_letter(m.id)} ({m.name}): D={m.dim}")
    return 0


def _load(path):
    header, records = dataio.load_dataset(path)
    log.info("loaded %s: %d records, C=%d", path, len(records), header.num_classes)
    return header, records


def cmd_train(args) -> int:
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        config = ckpt.config.replace(epochs=args.epochs)
    else:
        config = _resolve_config(args)
    print(config.to_text(), end="")
    header, train_recs = _load(args.train)
    val_header, val_recs = _load(args.val)
    if val_header.dims != header.dims or val_header.num_classes != header.num_classes:
        raise ValidationError("train and val datasets have different headers")
    result = train(config, header, train_recs, val_recs, args.out, resume=args.resume)
    print(f"best val mAP {result.best_map:.4f} at epoch {result.best_epoch}; final val mAP {result.final.map:.4f}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    header, records = _load(args.data)
    check_compatible(ckpt.config, header, ckpt.num_classes, ckpt.input_dims)
    model = ckpt.build_model()
    records = dataio.filter_modalities(records, ckpt.config.modality_ids)
    report, _ = evaluate(model, records)
    print(report.to_json())
    if args.out:
        report.write(args.out)
    return 0


def cmd_gradcheck(args) -> int:
    modes = ["independent", "shared"] if args.adapter_mode == "both" else [args.adapter_mode]
    failed = False
    for mode in modes:
        cfg = tiny_config(
            dim=args.dim, heads=args.heads, layers=args.layers, ffn_dim=args.ffn_dim,
            adapter_mode=mode, pre_ln=args.pre_ln, activation=args.activation,
            init_std=args.init_std, modalities=args.modalities, seed=args.seed,
        )
        report = run_gradcheck(cfg, args.classes, args.seed, args.eps, args.tol, args.break_layer_norm)
        print(f"[{mode}] {report.summary()}")
        failed |= not report.passed
    return 1 if failed else 0


def cmd_ablate(args) -> int:
    base = _resolve_config(args)
    print(base.to_text(), end="")
    values = [v.strip() for v in args.values.split(";") if v.strip()]
    if not values:
        raise UsageError("--values is empty")
    header, train_recs = _load(args.train)
    _, val_recs = _load(args.val)
    rows = run_ablation(args.axis, values, base, header, train_recs, val_recs, args.out)
    print(format_ablation_table(args.axis, rows), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic embedding dataset")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=125)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument(
        "--modality", action="append",
        help="ID:DIM:TOKENS:INFO:NOISE[:DROPOUT[:SCALE]], repeatable; TOKENS may be lo-hi "
        f"(default {' '.join(DEFAULT_GEN_MODALITIES)})",
    )
    p.add_argument("--test-out", type=Path, help="also write a stratified held-out split here")
    p.add_argument("--test-per-class", type=int, default=0)
    p.add_argument("--agreement", type=int, metavar="K", default=0,
                   help="two-class data: label = whether --pair modalities show the same of K prototypes")
    p.add_argument("--pair", default="G,T")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--train", type=Path, required=True)
    p.add_argument("--val", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path, help="continue from a last.ckpt (config comes from it; --epochs may extend)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, help="write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--ffn-dim", type=int, default=32)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--modalities", default="G,L,T")
    p.add_argument("--adapter-mode", choices=["both", "independent", "shared"], default="both")
    p.add_argument("--activation", choices=["gelu", "relu"], default="gelu")
    p.add_argument("--pre-ln", action="store_true")
    p.add_argument("--init-std", type=float, default=None)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--break-layer-norm", action="store_true", help="test hook: corrupt the LayerNorm backward")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train one model per value of an ablation axis")
    p.add_argument("--axis", choices=ABLATION_AXES, required=True)
    p.add_argument("--values", required=True, help="';'-separated, e.g. 'G;G,L;G,L,T' or '0;1;2;4'")
    p.add_argument("--train", type=Path, required=True)
    p.add_argument("--val", type=Path, required=True)
    p.add_argument("--out", type=Path)
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    threads = os.environ.get("MAA_NUM_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=int(threads)):
                return args.func(args)
        return args.func(args)
    except (UsageError, ValidationError, ConfigError, FormatError) as e:
        print(f"maa {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (MAAError, RuntimeError, OSError, LookupError) as e:
        print(f"maa {args.command}: failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
