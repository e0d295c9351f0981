"""Command line entry: gen / train / eval / ablate / plot-traces.

Every subcommand accepts either a JSON config file (--config) or flags
mirroring the experiment-config fields; flags override file values. On
success a one-line JSON summary goes to stdout and the exit code is 0; on
failure a machine-readable error JSON goes to stderr and the code is 1.
The EBSOLVE_OUT environment variable prefixes relative output directories.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from ebsolve import harness as hz
from ebsolve import tasks as tk
from ebsolve.util import canonical_json


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config file")
    g = p.add_argument_group("task")
    g.add_argument("--task", choices=sorted(tk.TASK_NAMES))
    g.add_argument("--n", type=int, help="matrix side / node count")
    g.add_argument("--rank", type=int, help="completion factor rank")
    g.add_argument("--order", type=int, help="board order (2 -> 4x4)")
    g.add_argument("--horizon", type=int, help="plan length")
    g = p.add_argument_group("model")
    g.add_argument("--arch", choices=sorted(hz.ARCH_DEFAULTS))
    g.add_argument("--width", type=int)
    g.add_argument("--depth", type=int)
    g.add_argument("--levels", type=int, help="number of noise levels K")
    g = p.add_argument_group("train")
    g.add_argument("--iterations", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--contrastive-weight", type=float)
    g = p.add_argument_group("solve")
    g.add_argument("--steps", type=int, help="default T per landscape")
    g.add_argument("--lambda0", type=float)
    g.add_argument("--polish", action="store_true", default=None,
                   help="finish with a clean-landscape pass")
    g = p.add_argument_group("experiment")
    g.add_argument("--t-grid", type=int, nargs="+")
    g.add_argument("--train-count", type=int)
    g.add_argument("--test-count", type=int)
    g.add_argument("--harder-count", type=int)
    g.add_argument("--seeds", type=int, nargs="+")
    g.add_argument("--outdir")
    g.add_argument("--checkpoint-interval", type=int)
    g.add_argument("--eval-chunk", type=int)


def _overlay(section: dict, args, names: dict[str, str]) -> dict:
    for attr, key in names.items():
        v = getattr(args, attr, None)
        if v is not None:
            section[key] = v
    return section


def build_config(args) -> hz.ExperimentConfig:
    base = {}
    if args.config:
        with open(args.config) as fh:
            base = json.load(fh)

    td = _overlay(dict(base.get("task", {})), args,
                  {"task": "name", "n": "n", "rank": "rank",
                   "order": "order", "horizon": "horizon"})
    if "name" not in td:
        raise ValueError("no task selected: pass --task or --config")
    task = tk.TaskKind.from_dict(td)

    md = _overlay(dict(base.get("model", {})), args,
                  {"arch": "arch", "width": "width", "depth": "depth",
                   "levels": "levels"})
    md.setdefault("arch", task.default_arch)
    dw, dd, dbatch = hz.ARCH_DEFAULTS[md["arch"]]
    md.setdefault("width", dw)
    md.setdefault("depth", dd)
    md.setdefault("levels", 10)
    md.setdefault("extras", hz.model_extras(md["arch"], task))
    md["x_dim"] = task.x_dim
    md["y_dim"] = task.y_dim

    trd = _overlay(dict(base.get("train", {})), args,
                   {"iterations": "iterations", "batch_size": "batch_size",
                    "lr": "lr", "contrastive_weight": "contrastive_weight"})
    trd.setdefault("batch_size", dbatch)
    trd.setdefault("negative",
                   dataclasses.asdict(hz.default_negative(task)))

    sd = _overlay(dict(base.get("solve", {})), args,
                  {"steps": "steps", "lambda0": "lambda0",
                   "polish": "polish"})

    top = {"task": task.to_dict(), "model": md, "train": trd, "solve": sd}
    top.update({k: base[k] for k in base
                if k not in ("task", "model", "train", "solve")})
    _overlay(top, args,
             {"t_grid": "t_grid", "train_count": "train_count",
              "test_count": "test_count", "harder_count": "harder_count",
              "seeds": "seeds", "outdir": "outdir",
              "checkpoint_interval": "checkpoint_interval",
              "eval_chunk": "eval_chunk"})
    top.setdefault("outdir", f"run-{task.name}")
    return hz.ExperimentConfig.from_dict(top)


def _run_gen(args) -> dict:
    return hz.cmd_gen(build_config(args))


def _run_train(args) -> dict:
    return hz.cmd_train(build_config(args), resume_from=args.resume)


def _run_eval(args) -> dict:
    cfg = build_config(args)
    report = hz.cmd_eval(cfg)
    return {"config_hash": report.config_hash, "rows": len(report.rows),
            "outdir": hz.resolve_outdir(cfg.outdir)}


def _run_ablate(args) -> dict:
    doc = hz.cmd_ablate(build_config(args))
    return {"config_hash": doc["config_hash"], "rows": len(doc["rows"])}


def _run_plot_traces(args) -> dict:
    cfg = build_config(args)
    path = hz.cmd_plot_traces(cfg, difficulty=args.difficulty,
                              count=args.count, T=args.T, png=args.png)
    return {"traces": path, "png": args.png}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ebsolve",
        description="Annealed energy-landscape training and solving.")
    sub = parser.add_subparsers(dest="command", required=True)

    cmds = {
        "gen": ("generate train/test/harder dataset files", _run_gen),
        "train": ("train one model per seed", _run_train),
        "eval": ("solve every split at every T and report", _run_eval),
        "ablate": ("run the 4-row mechanism ladder", _run_ablate),
        "plot-traces": ("export per-landscape energy curves",
                        _run_plot_traces),
    }
    for name, (help_text, fn) in cmds.items():
        p = sub.add_parser(name, help=help_text)
        _add_config_flags(p)
        p.set_defaults(func=fn)
        if name == "train":
            p.add_argument("--resume", help="checkpoint to continue from")
        if name == "plot-traces":
            p.add_argument("--difficulty", default="standard",
                           choices=("standard", "harder"))
            p.add_argument("--count", type=int, default=4)
            p.add_argument("--T", type=int, default=None)
            p.add_argument("--png", default=None,
                           help="also render the curves to this PNG")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        summary = args.func(args)
    except Exception as exc:  # noqa: BLE001 - single CLI error funnel
        print(canonical_json({"error": type(exc).__name__,
                              "message": str(exc)}), file=sys.stderr)
        return 1
    print(canonical_json(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
