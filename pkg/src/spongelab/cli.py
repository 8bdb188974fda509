"""Command-line entry point.

    python -m spongelab [--seed N] [--config FILE] [--out DIR] <command> ...

Exit status: 0 on success, 1 on usage errors, 2 on runtime errors.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

from . import bench, config, data, deploy, pipeline, training

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spongelab", description="Sponge poisoning lab: train, port and benchmark models.")
    p.add_argument("--seed", type=int, default=None, help="global seed (overrides the config)")
    p.add_argument("--config", default=None, help="INI config file (default: bundled quickstart)")
    p.add_argument("--out", default="spongelab-out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train one model, write .smod and history")
    t.add_argument("--arch", default="m1")
    t.add_argument("--mode", choices=("vanilla", "sponge"), default=None,
                   help="override [train] mode; sponge without lambda uses lambda = 1")

    g = sub.add_parser("gridsearch", help="grid-search the sponge arm, write both arms")
    g.add_argument("--arch", default="m1")

    q = sub.add_parser("quantize", help="float .smod -> 8-bit .smod")
    q.add_argument("model")
    q.add_argument("-o", "--output", default=None)

    b = sub.add_parser("bench", help="benchmark one .smod model")
    b.add_argument("model")
    b.add_argument("--label", default=None)
    b.add_argument("--executor", choices=("zero_skip", "dense"), default=None)
    b.add_argument("--profile", action="append", default=None, help="device profile (repeatable)")

    c = sub.add_parser("compare", help="compare two bench reports (vanilla, sponge)")
    c.add_argument("vanilla")
    c.add_argument("sponge")

    sub.add_parser("experiment", help="full pipeline: train both arms, port, bench, compare, report")
    return p


def _load_cfg(args) -> config.ExperimentConfig:
    if args.config is None:
        return config.quickstart(args.seed)
    if not os.path.isfile(args.config):
        raise UsageError(f"config file not found: {args.config}")
    return config.load_config(args.config, args.seed)


def _cmd_train(args, cfg):
    spec = cfg.build_model(args.arch)
    tc = cfg.train
    mode = args.mode or tc.mode
    if mode == "sponge" and tc.lam == 0:
        tc = replace(tc, mode="sponge", lam=1.0)
    elif mode == "vanilla":
        tc = replace(tc, mode="vanilla", lam=0.0)
    split = pipeline.load_data(cfg)
    params, hist = training.train(spec, split, tc)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"{args.arch}-{mode}.smod")
    deploy.save(path, spec, params)
    with open(os.path.join(args.out, f"{args.arch}-{mode}.history.jsonl"), "w", encoding="utf-8") as f:
        f.write(bench._dumps(pipeline._history_record(args.arch, mode, tc, hist)) + "\n")
    print(f"{path}: accuracy {hist.final_accuracy:.4f} density {hist.final_density:.4f}")


def _cmd_gridsearch(args, cfg):
    split = pipeline.load_data(cfg)
    spec, arms, cells = pipeline.train_arms(replace(cfg, grid_search=True), args.arch, split)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, f"{args.arch}-grid.jsonl"), "w", encoding="utf-8") as f:
        for rec in cells:
            f.write(bench._dumps(rec) + "\n")
        for arm, (tc, params, hist) in arms.items():
            f.write(bench._dumps(pipeline._history_record(args.arch, arm, tc, hist)) + "\n")
    for arm, (tc, params, hist) in arms.items():
        path = os.path.join(args.out, f"{args.arch}-{arm}.smod")
        deploy.save(path, spec, params)
        print(f"{path}: lambda {tc.lam:g} sigma {tc.sigma:g} delta {tc.delta:g} "
              f"accuracy {hist.final_accuracy:.4f} density {hist.final_density:.4f}")


def _cmd_quantize(args, cfg):
    spec, model = deploy.load(args.model)
    if isinstance(model, deploy.QuantizedModel):
        raise ValueError(f"{args.model} is already quantized")
    _, test = pipeline.load_data(cfg)
    q = deploy.quantize_post_training(spec, model, test.images[:pipeline.CALIBRATION_IMAGES])
    out = args.output or os.path.splitext(args.model)[0] + ".q8.smod"
    deploy.save(out, spec, q)
    f_acc, f_d = training.evaluate(spec, model, test)
    q_acc, q_d = training.evaluate(spec, q.dequantized_params(), test)
    print(f"{out}: accuracy {f_acc:.4f} -> {q_acc:.4f}, density {f_d:.4f} -> {q_d:.4f}")


def _cmd_bench(args, cfg):
    model = deploy.load(args.model)
    _, test = pipeline.load_data(cfg)
    bc = cfg.bench if args.executor is None else replace(cfg.bench, executor=args.executor)
    profiles = [cfg.device(p) for p in (args.profile or cfg.profiles)]
    label = args.label or os.path.splitext(os.path.basename(args.model))[0]
    res = bench.run_suites({label: model}, test, bc, profiles)
    results = [res[label][p.name] for p in profiles]
    bench.emit_report(results, [], args.out, header={"model": args.model, "seed": cfg.seed})


def _cmd_compare(args, cfg):
    _, van, _ = bench.read_report(args.vanilla)
    _, spo, _ = bench.read_report(args.sponge)
    index = {(r.profile, r.executor): r for r in van}
    pairs = [(index[(s.profile, s.executor)], s) for s in spo if (s.profile, s.executor) in index]
    if not pairs:
        raise ValueError("the two reports share no (profile, executor) pair")
    comps = [bench.compare(v, s) for v, s in pairs]
    results = [r for pair in pairs for r in pair]
    bench.emit_report(results, comps, args.out, header={"vanilla": args.vanilla, "sponge": args.sponge})


def _cmd_experiment(args, cfg):
    out = pipeline.run_experiment(cfg, args.out)
    print(f"reports written to {args.out}")
    return out


COMMANDS = {"train": _cmd_train, "gridsearch": _cmd_gridsearch, "quantize": _cmd_quantize,
            "bench": _cmd_bench, "compare": _cmd_compare, "experiment": _cmd_experiment}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _load_cfg(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        if "config file not found" in str(exc):
            parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except config.ConfigError as exc:
        print(f"spongelab: bad config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:   # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args, cfg)
    except (OSError, ValueError, KeyError, RuntimeError, FloatingPointError) as exc:
        print(f"spongelab {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(cli_main())
