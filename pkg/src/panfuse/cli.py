"""Command-line entry point.

Subcommands map 1:1 onto module operations: synth / make-dataset / train /
finetune / pansharpen / evaluate / compare / loss-study. Global flags:
`--seed`, `--deterministic` (byte-reproducible outputs), `--profile`
(sensor profile file overriding `--sensor` presets) and `--threads`.

Heavy imports happen inside the handlers so thread caps set via
environment variables take effect before the numeric stack loads.
"""

import argparse
import json
import os
import sys

SENSORS = ("ik", "ge1", "wv2", "wv3")


def _positive(kind):
    def parse(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError("must be positive")
        return value
    return parse


def build_parser():
    parser = argparse.ArgumentParser(
        prog="panfuse",
        description="Pansharpening engine: synthesize scenes, train and "
                    "adapt the fusion network, fuse and score images.")
    parser.add_argument("--seed", type=int, default=0,
                        help="base RNG seed (default 0)")
    parser.add_argument("--deterministic", action="store_true",
                        help="zero wall-clock fields so outputs are byte-reproducible")
    parser.add_argument("--profile", metavar="FILE",
                        help="sensor profile file (overrides --sensor presets)")
    parser.add_argument("--threads", type=_positive(int), default=None,
                        help="cap numeric library threads")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic (ms, pan, gt) scene")
    p.add_argument("--size", type=_positive(int), default=256,
                   help="PAN grid size (default 256)")
    p.add_argument("--bands", type=_positive(int), default=4)
    p.add_argument("--world-seed", type=int, default=0,
                   help="spectral mixing seed of the world model")
    p.add_argument("--gnyq-ms", type=float, default=0.30)
    p.add_argument("--gnyq-pan", type=float, default=0.15)
    p.add_argument("--out", required=True, metavar="DIR")

    p = sub.add_parser("make-dataset",
                       help="extract reduced-scale training tiles from a scene")
    p.add_argument("--ms", required=True)
    p.add_argument("--pan", required=True)
    p.add_argument("--sensor", choices=SENSORS, default="ge1")
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=True,
                   help="append radiometric index bands to the input stack")
    p.add_argument("--tile", type=_positive(int), default=33)
    p.add_argument("--count", type=_positive(int), default=2000)
    p.add_argument("--out", required=True, metavar="DIR")

    p = sub.add_parser("train", help="train a network on a tile dataset")
    p.add_argument("--dataset", required=True, metavar="DIR")
    p.add_argument("--val-dataset", metavar="DIR")
    p.add_argument("--sensor", choices=SENSORS, default="ge1")
    p.add_argument("--loss", choices=("l2", "l1", "sam", "sid"), default="l1")
    p.add_argument("--residual", action=argparse.BooleanOptionalAction, default=True,
                   help="predict the detail residual over upsampled MS")
    p.add_argument("--iters", type=_positive(int), required=True)
    p.add_argument("--batch", type=_positive(int), default=128)
    p.add_argument("--lrs", default="1e-4,1e-4,1e-5",
                   help="per-layer learning rates, comma-separated")
    p.add_argument("--history", metavar="CSV")
    p.add_argument("--out", required=True, metavar="PNNW")

    p = sub.add_parser("finetune", help="adapt a trained network to one scene")
    p.add_argument("--net", required=True, metavar="PNNW")
    p.add_argument("--ms", required=True)
    p.add_argument("--pan", required=True)
    p.add_argument("--sensor", choices=SENSORS, default="ge1")
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--tile", type=_positive(int), default=33,
                   help="side of the Wald-protocol adaptation tiles")
    p.add_argument("--max-tiles", type=_positive(int), default=4096)
    p.add_argument("--history", metavar="CSV")
    p.add_argument("--out", required=True, metavar="PNNW")

    p = sub.add_parser("pansharpen", help="fuse an (ms, pan) pair")
    p.add_argument("--net", required=True, metavar="PNNW")
    p.add_argument("--ms", required=True)
    p.add_argument("--pan", required=True)
    p.add_argument("--sensor", choices=SENSORS, default="ge1")
    p.add_argument("--mem-budget", type=_positive(int), default=None,
                   help="peak working-set bytes for tiled fusion")
    p.add_argument("--out", required=True, metavar="MBIR")

    p = sub.add_parser("evaluate", help="score a fusion result")
    p.add_argument("--mode", choices=("reduced", "full"), required=True)
    p.add_argument("--fused", required=True)
    p.add_argument("--ref", help="reference MS (reduced mode)")
    p.add_argument("--ratio", type=_positive(int), default=4)
    p.add_argument("--ms", help="low-resolution MS (full mode)")
    p.add_argument("--pan", help="PAN image (full mode)")
    p.add_argument("--sensor", choices=SENSORS, default="ge1")

    p = sub.add_parser("compare",
                       help="run the full experiment protocol on synthetic data")
    p.add_argument("--recipe", metavar="FILE")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a recipe key (repeatable)")
    p.add_argument("--out", required=True, metavar="DIR")

    p = sub.add_parser("loss-study",
                       help="train the same geometry under several losses")
    p.add_argument("--recipe", metavar="FILE")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--variants", default="l2,l1,l1rl")
    p.add_argument("--out", required=True, metavar="DIR")

    return parser


def _resolve_profile(args):
    from .dsp import PRESETS, load_profile
    if args.profile:
        return load_profile(args.profile)
    return PRESETS[args.sensor]


def _recipe_from_args(args):
    from .bench import parse_recipe
    recipe = parse_recipe(args.recipe)
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ValueError("--set expects KEY=VALUE, got %r" % item)
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if overrides:
        parsed = parse_recipe(overrides)  # validates keys and value types
        for key in overrides:
            recipe[key] = parsed[key]
    recipe["seed"] = args.seed
    recipe["deterministic"] = args.deterministic
    return recipe


def cmd_synth(args):
    from .bench import WorldModel, synth_scene
    from .raster import write_raster
    world = WorldModel(mixing_seed=args.world_seed, gnyq_ms=args.gnyq_ms,
                       gnyq_pan=args.gnyq_pan)
    ms, pan, gt = synth_scene(args.seed, args.size, args.bands, world)
    os.makedirs(args.out, exist_ok=True)
    write_raster(ms, os.path.join(args.out, "ms.mbir"))
    write_raster(pan, os.path.join(args.out, "pan.mbir"))
    write_raster(gt, os.path.join(args.out, "gt.mbir"))
    print("wrote ms.mbir pan.mbir gt.mbir to %s" % args.out)
    return 0


def cmd_make_dataset(args):
    import numpy as np

    from .adapt import training_tiles_from_scene
    from .raster import read_raster
    profile = _resolve_profile(args)
    ms = read_raster(args.ms)
    pan = read_raster(args.pan)
    inputs, targets = training_tiles_from_scene(
        ms, pan, profile, args.augment, args.tile, args.count, args.seed)
    os.makedirs(args.out, exist_ok=True)
    np.save(os.path.join(args.out, "inputs.npy"), inputs)
    np.save(os.path.join(args.out, "targets.npy"), targets)
    meta = {
        "sensor": profile.name,
        "augment": bool(args.augment),
        "tile_size": args.tile,
        "count": args.count,
        "seed": args.seed,
        "in_channels": int(inputs.shape[1]),
        "bands": int(targets.shape[1]),
    }
    with open(os.path.join(args.out, "meta.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
    print("wrote %d tiles to %s" % (len(inputs), args.out))
    return 0


def _load_dataset(path):
    import numpy as np
    inputs = np.load(os.path.join(path, "inputs.npy"))
    targets = np.load(os.path.join(path, "targets.npy"))
    with open(os.path.join(path, "meta.json")) as fh:
        meta = json.load(fh)
    return inputs, targets, meta


def cmd_train(args):
    from .nn import init_params, spec_for_profile
    from .optim import TrainConfig, history_to_csv, save_checkpoint, train
    profile = _resolve_profile(args)
    inputs, targets, meta = _load_dataset(args.dataset)
    if meta["sensor"] != profile.name:
        raise ValueError("dataset was built for sensor %r, not %r"
                         % (meta["sensor"], profile.name))
    val_in = val_tgt = None
    if args.val_dataset:
        val_in, val_tgt, _ = _load_dataset(args.val_dataset)
    lrs = tuple(float(v) for v in args.lrs.split(","))
    spec = spec_for_profile(profile, augment=meta["augment"],
                            residual=args.residual)
    if spec.in_channels != meta["in_channels"]:
        raise ValueError("dataset has %d input channels, network wants %d"
                         % (meta["in_channels"], spec.in_channels))
    params = init_params(spec, args.seed)
    cfg = TrainConfig(iterations=args.iters, batch_size=args.batch,
                      loss=args.loss, lrs=lrs, seed=args.seed)
    history = train(inputs, targets, spec, params, cfg, val_in, val_tgt)
    save_checkpoint(args.out, spec, params, meta={"sensor": profile.name})
    if args.history:
        history_to_csv(history, args.history, args.deterministic)
    print("trained %d iterations, final loss %.6g -> %s"
          % (len(history), history[-1]["train_loss"] if history else float("nan"),
             args.out))
    return 0


def cmd_finetune(args):
    from .adapt import FinetuneConfig, finetune
    from .optim import history_to_csv, load_checkpoint, save_checkpoint
    from .raster import read_raster
    profile = _resolve_profile(args)
    spec, params, meta = load_checkpoint(args.net)
    ms = read_raster(args.ms)
    pan = read_raster(args.pan)
    cfg = FinetuneConfig(iterations=args.iters, tile_size=args.tile,
                         max_tiles=args.max_tiles, seed=args.seed)
    adapted, history = finetune(ms, pan, spec, params, profile, cfg)
    save_checkpoint(args.out, spec, adapted, meta=meta)
    if args.history:
        history_to_csv(history, args.history, args.deterministic)
    print("fine-tuned %d iterations -> %s" % (len(history), args.out))
    return 0


def cmd_pansharpen(args):
    from .adapt import DEFAULT_MEM_BUDGET, pansharpen_tiled
    from .optim import load_checkpoint
    from .raster import read_raster, write_raster
    profile = _resolve_profile(args)
    spec, params, _ = load_checkpoint(args.net)
    ms = read_raster(args.ms)
    pan = read_raster(args.pan)
    budget = args.mem_budget or DEFAULT_MEM_BUDGET
    fused = pansharpen_tiled(ms, pan, spec, params, profile, mem_budget=budget)
    write_raster(fused, args.out)
    print("wrote %s" % args.out)
    return 0


def cmd_evaluate(args):
    from .quality import REPORT_FIELDS, evaluate_full, evaluate_reduced
    from .raster import read_raster
    fused = read_raster(args.fused)
    if args.mode == "reduced":
        if not args.ref:
            raise ValueError("reduced mode needs --ref")
        report = evaluate_reduced(fused, read_raster(args.ref), args.ratio)
    else:
        if not (args.ms and args.pan):
            raise ValueError("full mode needs --ms and --pan")
        profile = _resolve_profile(args)
        report = evaluate_full(fused, read_raster(args.ms),
                               read_raster(args.pan), profile)
    print(",".join(REPORT_FIELDS))
    print(",".join("" if v is None else "%.9g" % v for v in report.values()))
    return 0


def cmd_compare(args):
    from .bench import run_experiment
    recipe = _recipe_from_args(args)
    run_experiment(recipe, args.out)
    print("experiment artifacts under %s" % args.out)
    return 0


def cmd_loss_study(args):
    from .bench import loss_study
    recipe = _recipe_from_args(args)
    variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    loss_study(recipe, args.out, variants)
    print("loss histories under %s" % args.out)
    return 0


HANDLERS = {
    "synth": cmd_synth,
    "make-dataset": cmd_make_dataset,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "pansharpen": cmd_pansharpen,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "loss-study": cmd_loss_study,
}


def main(argv=None):
    os.environ.setdefault("COLUMNS", "100")  # stable --help wrapping
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return HANDLERS[args.command](args)
    except Exception as exc:  # surface module errors as one parsable line
        print("error: %s: %s" % (type(exc).__name__, exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
