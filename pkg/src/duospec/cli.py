"""Command-line entry point.

Subcommands: gen-data, train-stage1, train-stage2, eval, gradcheck, ablate.
Flags override config-file values, which override built-in defaults; the
resolved configuration is echoed into every output directory.

Exit codes: 0 success, 1 invariant/check failure, 2 usage or configuration
error, 3 I/O error.
"""

import argparse
import os
import sys

# Pin BLAS thread counts before numpy loads anywhere below; DUOSPEC_THREADS
# (default 1) keeps results reproducible across runs.
_threads = os.environ.get("DUOSPEC_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

from . import config as config_mod  # noqa: E402
from . import data as data_mod  # noqa: E402
from . import evaluate as eval_mod  # noqa: E402
from . import gradcheck as gradcheck_mod  # noqa: E402
from . import pipeline  # noqa: E402
from .checkpoint import CheckpointError  # noqa: E402
from .config import ConfigError  # noqa: E402
from .data import DataFormatError  # noqa: E402

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3


def _add_config_flags(parser, keys):
    parser.add_argument("--config", help="JSON config file (flags override it)")
    for key in keys:
        typ, default = config_mod.SCHEMA[key]
        flag = "--" + key.replace("_", "-")
        if typ is bool:
            parser.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction,
                                default=None, help=f"(default {default})")
        elif typ is list:
            parser.add_argument(flag, dest=key, type=int, nargs="+", default=None,
                                help=f"(default {default})")
        else:
            parser.add_argument(flag, dest=key, type=typ, default=None,
                                help=f"(default {default if default is not None else 'preset'})")


def _resolve(args, keys):
    file_values = config_mod.load_config_file(args.config) if args.config else {}
    overrides = {k: getattr(args, k) for k in keys if getattr(args, k) is not None}
    return config_mod.resolve_config(file_values, overrides)


GEN_KEYS = ("preset", "seed", "image_size", "num_classes", "count", "shapes_per_image",
            "texture_amp", "eo_noise", "ir_noise", "ir_gain_jitter", "night",
            "night_dim", "night_extra_noise", "train_ratio")
TRAIN_KEYS = tuple(k for k in config_mod.SCHEMA
                   if k not in ("count", "train_ratio"))


def cmd_gen_data(args):
    cfg = _resolve(args, GEN_KEYS)
    manifest = data_mod.generate_dataset(
        config_mod.scene_config(cfg), cfg["count"], args.out,
        split_ratios=(cfg["train_ratio"], 1.0 - cfg["train_ratio"]))
    config_mod.echo_config(cfg, args.out)
    print(f"wrote {cfg['count']} samples, manifest {manifest}")
    return EXIT_OK


def _load_train_samples(cfg, manifest):
    return data_mod.load_split(manifest, "train", num_classes=cfg["num_classes"])


def cmd_train_stage1(args):
    cfg = _resolve(args, TRAIN_KEYS)
    samples = _load_train_samples(cfg, args.data)
    config_mod.echo_config(cfg, args.out)
    _, history, paths = pipeline.train_stage1(
        config_mod.train_config(cfg), config_mod.model_config(cfg), samples,
        out_dir=args.out, modality=args.modality, resume=args.resume)
    last = history[-1]
    print(f"stage1[{args.modality}] done: epochs={len(history)} "
          f"final_loss={last['l_total']:.6f} train_miou={last['train_miou']:.4f}")
    print(f"checkpoint: {paths.get('final')}")
    return EXIT_OK


def cmd_train_stage2(args):
    cfg = _resolve(args, TRAIN_KEYS)
    samples = _load_train_samples(cfg, args.data)
    config_mod.echo_config(cfg, args.out)
    _, history, paths = pipeline.train_stage2(
        config_mod.train_config(cfg), config_mod.model_config(cfg), samples,
        teacher=args.pretrained, out_dir=args.out, resume=args.resume)
    last = history[-1]
    print(f"stage2 done: epochs={len(history)} final_loss={last['l_total']:.6f} "
          f"train_miou={last['train_miou']:.4f}")
    print(f"checkpoint: {paths.get('final')}")
    return EXIT_OK


def cmd_eval(args):
    mode = args.mode.replace("-", "_")
    model = pipeline.model_from_checkpoint(args.checkpoint)
    entries = data_mod.load_manifest(args.data, split=args.split)
    if not entries:
        raise ConfigError(f"no samples in split {args.split!r} of {args.data}")
    report = eval_mod.evaluate_model(model, entries, mode)
    print("\n".join(report.format_lines()))
    return EXIT_OK


def cmd_gradcheck(args):
    names = set(args.only) if args.only else None
    results = gradcheck_mod.run_suite(seed=args.seed if args.seed is not None else 0,
                                      names=names)
    if names and len(results) != len(names):
        known = {name for name, _ in gradcheck_mod.CHECKS}
        raise ConfigError(f"unknown check names: {sorted(names - known)}")
    failed = 0
    for name, err, ok in results:
        print(f"{name}\t{err:.3e}\t{'PASS' if ok else 'FAIL'}")
        failed += 0 if ok else 1
    print(f"{len(results) - failed}/{len(results)} checks passed "
          f"(tolerance {gradcheck_mod.TOLERANCE:g})")
    return EXIT_OK if failed == 0 else EXIT_CHECK_FAILED


def cmd_ablate(args):
    cfg = _resolve(args, TRAIN_KEYS)
    samples = _load_train_samples(cfg, args.data)
    test_entries = data_mod.load_manifest(args.data, split="test")
    seeds = tuple(args.seeds)
    _, _, _, table = eval_mod.ablation_report(
        config_mod.train_config(cfg), config_mod.model_config(cfg),
        samples, test_entries, seeds=seeds)
    os.makedirs(args.out, exist_ok=True)
    config_mod.echo_config(cfg, args.out)
    out_path = os.path.join(args.out, "ablation.tsv")
    with open(out_path, "w", encoding="ascii") as f:
        f.write(table)
    print(table, end="")
    print(f"wrote {out_path}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="duospec",
        description="Dual-branch optical/infrared segmentation at desk scale: "
                    "synthetic data, two-stage distillation training, evaluation "
                    "and gradient verification.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p, GEN_KEYS)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-stage1", help="pretrain the single-branch baseline")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--modality", choices=("eo", "ir"), default="eo",
                   help="which modality feeds the baseline (default eo)")
    p.add_argument("--resume", help="checkpoint to resume from")
    _add_config_flags(p, TRAIN_KEYS)
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="train the dual-branch model with distillation")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--pretrained", required=True, help="stage-1 checkpoint (frozen teacher)")
    p.add_argument("--resume", help="checkpoint to resume from")
    _add_config_flags(p, TRAIN_KEYS)
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--split", default="test")
    p.add_argument("--mode", choices=("fused", "optical", "ir-only"), required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the finite-difference verification suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--only", nargs="+", metavar="CHECK",
                   help="run only the named checks (default: all)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and score the component-removal variants")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    _add_config_flags(p, TRAIN_KEYS)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, CheckpointError) as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
