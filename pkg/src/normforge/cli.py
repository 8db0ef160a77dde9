"""Command-line entry point: ``normforge <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .config import (ConfigError, ExperimentConfig, dump_config, from_flat, load_config,
                     parse_lines, parse_overrides, preset, split_grid)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def _config_from_args(args) -> ExperimentConfig:
    base = preset(args.preset) if args.preset else None
    if args.config:
        return load_config(args.config, args.set, base)
    return from_flat(parse_overrides(args.set), base or ExperimentConfig())


def cmd_train(args) -> int:
    from .harness import run_experiment

    cfg = _config_from_args(args)
    if args.dump_config:
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    report = run_experiment(cfg, resume=args.resume)
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_DIVERGED if report.status == "failed" else EXIT_OK


def cmd_grid(args) -> int:
    from .harness import run_grid

    values = parse_lines(Path(args.config).read_text().splitlines(), args.config)
    values.update(parse_overrides(args.set))
    base_values, variants, seeds = split_grid(values)
    base = from_flat(base_values)
    if not variants:
        variants = {base.name: {}}
    configs = [(name, from_flat({**over, "name": name}, base)) for name, over in variants.items()]
    out = args.out or str(Path(base.out_dir) / "grid")
    table = run_grid(configs, seeds or [base.seed], out, workers=args.workers)
    with (Path(out) / "grid.csv").open() as f:
        sys.stdout.write(f.read())
    failed = any(row["divergence_rate"] > 0 for row in table)
    return EXIT_DIVERGED if failed and args.strict_exit else EXIT_OK


def cmd_curves(args) -> int:
    from .harness import emit_curves

    runs = []
    for d in args.runs:
        p = Path(d)
        runs += [p] if (p / "log.csv").exists() else sorted(q.parent for q in p.rglob("log.csv"))
    if not runs:
        print(f"no run logs under {args.runs}", file=sys.stderr)
        return EXIT_CONFIG
    for path in emit_curves(runs, args.out, plot=args.plot):
        print(path)
    return EXIT_OK


def cmd_gprofile(args) -> int:
    from .harness import GPROFILE_COLUMNS, extract_g_profile, model_from_checkpoint

    model, meta = model_from_checkpoint(args.checkpoint)
    w = csv.writer(sys.stdout)
    w.writerow(GPROFILE_COLUMNS)
    for r in extract_g_profile(model, int(meta.get("step", 0))):
        w.writerow([r.site, r.layer, r.step, repr(r.g)])
    return EXIT_OK


def cmd_bench(args) -> int:
    from .harness import bench_norms

    res = bench_norms(args.d, args.batch, args.repeats)
    for name, r in res.items():
        print(f"{name:10s} ops={r['op_count']:>8d} fwd+bwd={r['fwd_bwd_ms']:.2f} ms")
    ratio = res["ScaleNorm"]["fwd_bwd_ms"] / res["LayerNorm"]["fwd_bwd_ms"]
    print(f"ScaleNorm/LayerNorm time ratio {ratio:.3f}")
    return EXIT_OK


def _read_lines(path: str) -> list[str]:
    return Path(path).read_text().splitlines()


def cmd_bleu(args) -> int:
    from .evaluation import bleu

    print(bleu(_read_lines(args.hyp), _read_lines(args.ref)))
    return EXIT_OK


def cmd_significance(args) -> int:
    from .evaluation import bootstrap_significance

    rep = bootstrap_significance(_read_lines(args.hypA), _read_lines(args.hypB),
                                 _read_lines(args.ref), args.n, args.seed)
    print(rep)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="normforge", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config")
    t.add_argument("--preset", choices=["paper-envi", "toy-copy"])
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    t.add_argument("--resume", action="store_true", help="continue from last.npz in out_dir")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("grid", help="run every grid variant for every seed")
    g.add_argument("--config", required=True)
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    g.add_argument("--out")
    g.add_argument("--workers", type=int, help="defaults to NORMFORGE_THREADS or 1")
    g.add_argument("--strict-exit", action="store_true", help="exit 3 if any run diverged")
    g.set_defaults(func=cmd_grid)

    c = sub.add_parser("curves", help="export curve and g-profile CSVs")
    c.add_argument("--runs", nargs="+", required=True)
    c.add_argument("--out", default="curves")
    c.add_argument("--plot", action="store_true", help="also render PNGs (needs matplotlib)")
    c.set_defaults(func=cmd_curves)

    gp = sub.add_parser("gprofile", help="print the g profile stored in a checkpoint")
    gp.add_argument("--checkpoint", required=True)
    gp.set_defaults(func=cmd_gprofile)

    b = sub.add_parser("bench-norms", help="time the fused norm kernels")
    b.add_argument("--d", type=int, default=512)
    b.add_argument("--batch", type=int, default=4096)
    b.add_argument("--repeats", type=int, default=5)
    b.set_defaults(func=cmd_bench)

    bl = sub.add_parser("bleu", help="corpus BLEU of whitespace-tokenized files")
    bl.add_argument("--hyp", required=True)
    bl.add_argument("--ref", required=True)
    bl.set_defaults(func=cmd_bleu)

    s = sub.add_parser("significance", help="paired bootstrap test of A vs B")
    s.add_argument("--hypA", required=True)
    s.add_argument("--hypB", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_significance)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
