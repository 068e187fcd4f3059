"""Command line front end: generate streams, run evaluations, serve sessions.

    sci gen    --preset bearing --windows 100 --seed 42 --out stream.ndjson
    sci run    --preset bearing --seeds 42,100,2024 --out results/
    sci report results/
    sci sweep  --preset synthetic-class --seed 42 --k 1,2,4,8,16
    sci serve  --host 127.0.0.1 --port 7321 --audit-dir .
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

import numpy as np

from .harness import (
    episode_rows,
    fixed_rows,
    load_report,
    render_report,
    run_preset,
)
from .presets import build_artifacts, eval_windows, get_preset
from .service import serve
from .sigsim import generate, write_stream


def _cmd_gen(args: argparse.Namespace) -> int:
    preset = get_preset(args.preset)
    cfg = dataclasses.replace(preset.stream, seed=args.seed)
    windows = [generate(cfg, s)
               for s in range(args.start_seq, args.start_seq + args.windows)]
    write_stream(args.out, windows, cfg)
    print(f"wrote {len(windows)} windows to {args.out}")
    return 0


def _cmd_run(args: argparse.Namespace) -> int:
    seeds = [int(s) for s in args.seeds.split(",") if s]
    report = run_preset(args.preset, seeds, out_dir=args.out,
                        n_eval=args.windows)
    print(render_report(report))
    if args.out:
        print(f"artifacts in {args.out}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    print(render_report(load_report(args.dir)))
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    ks = [int(k) for k in args.k.split(",") if k]
    preset = get_preset(args.preset)
    art = build_artifacts(preset, args.seed)
    windows = eval_windows(preset, args.seed, n=args.windows)
    rows = episode_rows(art, windows)
    adaptive_acc = float(np.mean([r["correct"] for r in rows]))
    adaptive_steps = float(np.mean([r["steps_used"] for r in rows]))
    print(f"{'K':>8} {'accuracy':>9} {'mean steps':>11}")
    for k in ks:
        fr = fixed_rows(art, windows, k)
        acc = float(np.mean([r["correct"] for r in fr]))
        print(f"{k:>8d} {acc:>9.4f} {float(k):>11.2f}")
    print(f"{'adaptive':>8} {adaptive_acc:>9.4f} {adaptive_steps:>11.2f}")
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    serve(host=args.host, port=args.port, audit_dir=args.audit_dir)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sci", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true",
                   help="log at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a stream file for a preset")
    g.add_argument("--preset", required=True)
    g.add_argument("--windows", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--start-seq", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=_cmd_gen)

    r = sub.add_parser("run", help="full multi-seed evaluation of a preset")
    r.add_argument("--preset", required=True)
    r.add_argument("--seeds", default="42,100,2024")
    r.add_argument("--out", default=None)
    r.add_argument("--windows", type=int, default=None,
                   help="evaluation windows per seed (default: preset)")
    r.set_defaults(fn=_cmd_run)

    rp = sub.add_parser("report", help="render a saved report.json")
    rp.add_argument("dir")
    rp.set_defaults(fn=_cmd_report)

    sw = sub.add_parser("sweep", help="fixed-budget sweep vs the adaptive loop")
    sw.add_argument("--preset", required=True)
    sw.add_argument("--seed", type=int, default=42)
    sw.add_argument("--k", default="1,2,4,8,16")
    sw.add_argument("--windows", type=int, default=None)
    sw.set_defaults(fn=_cmd_sweep)

    sv = sub.add_parser("serve", help="run the line-JSON session service")
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=7321)
    sv.add_argument("--audit-dir", default=".")
    sv.set_defaults(fn=_cmd_serve)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.fn(args)
    except (ValueError, LookupError, OSError, json.JSONDecodeError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
