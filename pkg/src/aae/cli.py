"""Command-line entry point: ``aae {train,eval,predict,gen-data,gradcheck,compare}``.

Exit status: 0 success, 1 usage or config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _split_overrides(tokens: list[str]) -> dict[str, str]:
    """Turn ``--key value`` / ``--key=value`` pairs into a dict; keys may use dashes."""
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise UsageError(f"missing value for --{key}")
            value = tokens[i + 1]
            i += 2
        out[key.replace("-", "_")] = value
    return out


def _build_parser() -> _Parser:
    p = _Parser(prog="aae", description="Assisted excitation for salient object detection in small U-Nets.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="train one model from a config file")
    t.add_argument("--config", help="key = value config file; further --key value flags override it")

    e = sub.add_parser("eval", help="score a checkpoint on one dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset-root", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--metrics-out", help="CSV file to append the result row to")

    pr = sub.add_parser("predict", help="write the saliency map of one image")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--out", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic shapes dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=250)
    g.add_argument("--size", type=int, default=64)

    gc = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    gc.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("compare", help="baseline vs. assisted excitation over several seeds")
    c.add_argument("--config", help="key = value config file; further --key value flags override it")
    c.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated training seeds")
    c.add_argument("--sweep", action="store_true",
                   help="if the default does not improve, sweep alpha0 x downscale_mode")
    return p


def _train(args, extra) -> int:
    config = load_config(args.config, _split_overrides(extra))
    try:
        config.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    from .training import train

    history, _ = train(config)
    sys.stdout.write(history.to_csv())
    return EXIT_OK


def _compare(args, extra) -> int:
    config = load_config(args.config, _split_overrides(extra))
    try:
        config.validate()
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not seeds:
        raise UsageError("--seeds must name at least one seed")
    from .experiment import compare, compare_with_sweep

    if args.sweep:
        winner, runs = compare_with_sweep(config, seeds)
        for r in runs:
            print(r.summary())
        print(f"selected: {winner.summary()}")
    else:
        print(compare(config, seeds).summary())
    return EXIT_OK


def _run(args, extra) -> int:
    if args.command in ("train", "compare"):
        return (_train if args.command == "train" else _compare)(args, extra)
    if extra:
        raise UsageError(f"unrecognized arguments: {' '.join(extra)}")

    if args.command == "eval":
        from .training import evaluate

        _, row = evaluate(args.checkpoint, args.dataset_root, args.split, args.metrics_out)
        from .metrics import CSV_HEADER

        print(CSV_HEADER)
        print(row)
    elif args.command == "predict":
        from .training import predict

        predict(args.checkpoint, args.image, args.out)
    elif args.command == "gen-data":
        from .dataio import generate_synthetic

        if args.n < 1 or args.size < 8:
            raise UsageError("--n must be >= 1 and --size >= 8")
        manifest = generate_synthetic(args.seed, args.n, args.size, args.out)
        print(" ".join(f"{k}={len(v)}" for k, v in manifest.splits.items()))
    elif args.command == "gradcheck":
        from .checks import run_suite

        results = run_suite(args.seed)
        for r in results:
            print(r.line())
        if not all(r.passed for r in results):
            return EXIT_RUNTIME
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required (train, eval, predict, gen-data, gradcheck, compare)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return _run(args, extra)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures map to exit 2
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
