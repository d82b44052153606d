"""Command-line entry point wiring all stages into the batch pipeline.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Flags may also come from a JSON config file (--config); explicit flags win.
"""

import argparse
import json
import sys
from pathlib import Path

from .errors import DataError, NumericError, PointgrowError
from .experiments import (
    BENCHMARK_COLOR_JITTER,
    BENCHMARK_NOISE_SIGMA,
    PipelineConfig,
    run_ablation,
    run_pipeline,
    stage_eval,
    stage_propagate,
    stage_sample,
    stage_superpixels,
    stage_synth,
    stage_train,
    stage_weights,
    load_weights,
)
from .synthetic import NUM_CLASSES
from .training import TrainConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract is 1
        raise UsageError(message)


def build_parser() -> Parser:
    parser = Parser(prog="pointgrow", description=__doc__)
    parser.add_argument("--config", help="JSON file with flag defaults", default=None)
    sub = parser.add_subparsers(dest="command", required=True)
    parser.sub_commands = sub

    synth = sub.add_parser("synth", help="generate the synthetic benchmark dataset")
    synth.add_argument("--out", required=True)
    synth.add_argument("--scenes", type=int, default=200)
    synth.add_argument("--size", type=int, default=64)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--noise-sigma", type=float, default=BENCHMARK_NOISE_SIGMA)
    synth.add_argument("--color-jitter", type=float, default=BENCHMARK_COLOR_JITTER)

    sp = sub.add_parser("superpixels", help="hierarchies and id maps for a dataset")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--k", type=int, default=100)
    sp.add_argument("--edge", action="store_true")
    sp.add_argument("--backend", choices=("agglomerative", "slic"), default="agglomerative")

    sample = sub.add_parser("sample", help="sample query points per scene")
    sample.add_argument("--dataset", required=True)
    sample.add_argument("--out", required=True)
    sample.add_argument("--points", type=int, default=50)
    sample.add_argument("--strategy", choices=("balanced", "random"), default="balanced")
    sample.add_argument("--seed", type=int, default=0)
    sample.add_argument("--classes", type=int, default=NUM_CLASSES)

    prop = sub.add_parser("propagate", help="expand points into pseudo-masks")
    prop.add_argument("--dataset", required=True)
    prop.add_argument("--superpixels", required=True)
    prop.add_argument("--points", required=True, help="directory of point CSVs")
    prop.add_argument("--out", required=True)
    prop.add_argument("--k", type=int, default=100)
    prop.add_argument("--policy", choices=("ignore", "supervise"), default="ignore")
    prop.add_argument("--classes", type=int, default=NUM_CLASSES)

    weights = sub.add_parser("weights", help="class-balance weights from pseudo-masks")
    weights.add_argument("--dataset", required=True)
    weights.add_argument("--pseudomasks", required=True)
    weights.add_argument("--out", required=True)
    weights.add_argument("--classes", type=int, default=NUM_CLASSES)
    weights.add_argument("--eps", type=float, default=1e-6)

    tr = sub.add_parser("train", help="train the toy segmenter on pseudo-masks")
    tr.add_argument("--dataset", required=True)
    tr.add_argument("--pseudomasks", required=True)
    tr.add_argument("--weights", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--epochs", type=int, default=100)
    tr.add_argument("--lr", type=float, default=1e-4)
    tr.add_argument("--batch-size", type=int, default=8)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--classes", type=int, default=NUM_CLASSES)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--split", choices=("train", "val", "test"), default="test")
    ev.add_argument("--out", required=True)
    ev.add_argument("--classes", type=int, default=NUM_CLASSES)

    pipe = sub.add_parser("pipeline", help="run all stages end to end")
    pipe.add_argument("--out", required=True)
    pipe.add_argument("--seed", type=int, default=0)
    pipe.add_argument("--scenes", type=int, default=200)
    pipe.add_argument("--size", type=int, default=64)
    pipe.add_argument("--points", type=int, default=50)
    pipe.add_argument("--k", type=int, default=100)
    pipe.add_argument("--edge", action="store_true")
    pipe.add_argument("--strategy", choices=("balanced", "random"), default="balanced")
    pipe.add_argument("--policy", choices=("ignore", "supervise"), default="ignore")
    pipe.add_argument("--epochs", type=int, default=100)
    pipe.add_argument("--lr", type=float, default=1e-4)
    pipe.add_argument("--batch-size", type=int, default=8)
    pipe.add_argument("--classes", type=int, default=NUM_CLASSES)

    ab = sub.add_parser("ablate", help="sweep points/k/edge/loss; table-shaped report")
    ab.add_argument("--out", required=True)
    ab.add_argument("--points", help="comma list, e.g. 10,50")
    ab.add_argument("--k", help="comma list, e.g. 50,100,300")
    ab.add_argument("--edge", help="comma list of true/false")
    ab.add_argument("--loss", help="comma list of masked,background,full (trains models)")
    ab.add_argument("--scenes", type=int, default=200)
    ab.add_argument("--size", type=int, default=64)
    ab.add_argument("--seed", type=int, default=0)
    ab.add_argument("--epochs", type=int, default=100)
    ab.add_argument("--lr", type=float, default=1e-3)
    ab.add_argument("--batch-size", type=int, default=8)
    ab.add_argument("--train-seeds", default="0,1,2")

    serve = sub.add_parser("serve", help="start the interactive annotation service")
    serve.add_argument("--addr", default="127.0.0.1:8000")
    serve.add_argument("--size-limit", type=int, default=2048)
    serve.add_argument("--state-dir", default=None, help="optional write-through persistence")
    serve.add_argument("--ui-dir", default=None, help="static assets directory to serve at /")

    return parser


def _parse_bool(token: str) -> bool:
    t = token.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise UsageError(f"not a boolean: {token!r}")


def _int_list(raw: str) -> list:
    try:
        return [int(tok) for tok in raw.split(",") if tok.strip()]
    except ValueError as exc:
        raise UsageError(f"bad integer list {raw!r}") from exc


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            with open(args.config) as fh:
                defaults = json.load(fh)
            parser.set_defaults(**defaults)
            for sub in parser.sub_commands.choices.values():
                sub.set_defaults(**defaults)
            args = parser.parse_args(argv)
        return _dispatch(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, PointgrowError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "synth":
        stage_synth(args.out, args.scenes, args.size, args.seed,
                    args.noise_sigma, args.color_jitter)
    elif cmd == "superpixels":
        stage_superpixels(args.dataset, args.out, args.k, args.edge, args.backend)
    elif cmd == "sample":
        stage_sample(args.dataset, args.out, args.points, args.strategy,
                     args.seed, args.classes)
    elif cmd == "propagate":
        stage_propagate(args.dataset, args.superpixels, args.points, args.out,
                        args.k, args.policy, args.classes)
    elif cmd == "weights":
        stage_weights(args.dataset, args.pseudomasks, args.out, args.classes, args.eps)
    elif cmd == "train":
        config = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                             epochs=args.epochs, seed=args.seed)
        stage_train(args.dataset, args.pseudomasks, load_weights(args.weights),
                    args.out, config, args.classes)
    elif cmd == "eval":
        stage_eval(args.checkpoint, args.dataset, args.split, args.out, args.classes)
    elif cmd == "pipeline":
        cfg = PipelineConfig(
            points=args.points, k=args.k, edge=args.edge, strategy=args.strategy,
            background_policy=args.policy, seed=args.seed, num_classes=args.classes,
            scenes=args.scenes, size=args.size, epochs=args.epochs,
            learning_rate=args.lr, batch_size=args.batch_size,
        )
        run_pipeline(args.out, cfg)
    elif cmd == "ablate":
        axes = {}
        if args.points:
            axes["points"] = _int_list(args.points)
        if args.k:
            axes["k"] = _int_list(args.k)
        if args.edge:
            axes["edge"] = [_parse_bool(t) for t in args.edge.split(",") if t.strip()]
        if args.loss:
            modes = [t.strip() for t in args.loss.split(",") if t.strip()]
            for mode in modes:
                if mode not in ("masked", "background", "full"):
                    raise UsageError(f"unknown loss mode {mode!r}")
            axes["loss"] = modes
        if not axes:
            raise UsageError("ablate needs at least one of --points/--k/--edge/--loss")
        run_ablation(
            args.out, axes, scenes=args.scenes, size=args.size, seed=args.seed,
            epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
            train_seeds=tuple(_int_list(args.train_seeds)),
        )
    elif cmd == "serve":
        from .service import serve as run_service

        host, _, port = args.addr.rpartition(":")
        run_service(host or "127.0.0.1", int(port), args.size_limit,
                    args.state_dir, args.ui_dir)
    else:  # pragma: no cover - argparse enforces the choices
        raise UsageError(f"unknown command {cmd!r}")
    return EXIT_OK


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
