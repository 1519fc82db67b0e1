"""Command-line entry point.

Subcommands: generate-data, xrm, phase2, pipeline, report. Each accepts
--config, --seed, --out, --jobs; seed and out override the config file.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import load_config
from .datasets import export_csv
from .harness import (
    build_dataset,
    load_phase1,
    run_phase1,
    run_phase2_cell,
    run_pipeline,
)
from .report import emit_report


def _add_common(p, config_required=True):
    p.add_argument("--config", required=config_required, help="INI experiment config")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    p.add_argument("--out", default=None, help="run directory (overrides config)")
    p.add_argument("--jobs", type=int, default=1, help="parallel trial processes")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="crossrisk",
        description="Twin-based environment discovery and group-robust training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("generate-data", "build the configured dataset and export it as CSV"),
        ("xrm", "run phase-1 twin sweep and discover environments"),
        ("phase2", "run phase-2 search + reruns (needs envs/ when env_source=xrm)"),
        ("pipeline", "full run: discovery, search, reruns, ground-truth scoring"),
        ("report", "render tables and figures for a run directory"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p, config_required=(name != "report"))
    return parser


def _resolved_config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "report":
        if args.out is None and args.config is None:
            print("report needs --out (run directory)", file=sys.stderr)
            return 2
        out = Path(args.out if args.out is not None else load_config(args.config).out_dir)
        report_dir = emit_report(out)
        print(f"report written to {report_dir}")
        return 0

    cfg = _resolved_config(args)
    out = Path(cfg.out_dir)

    if args.command == "generate-data":
        out.mkdir(parents=True, exist_ok=True)
        data = build_dataset(cfg)
        path = out / "dataset.csv"
        export_csv(data, path)
        sizes = ", ".join(f"{k}={len(v)}" for k, v in data.items())
        print(f"wrote {path} ({sizes})")
        return 0

    if args.command == "xrm":
        data = build_dataset(cfg)
        selected = run_phase1(cfg, data, out, jobs=args.jobs)
        print(
            f"selected combo {selected.combo_id} "
            f"(mean flip fraction {selected.mean_flip_fraction:.4f}); "
            f"environments in {out / 'envs'}"
        )
        return 0

    if args.command == "phase2":
        data = build_dataset(cfg)
        envs = phase1_meta = None
        if cfg.env_source == "xrm":
            if not (out / "envs" / "environments.csv").exists():
                print(
                    f"env_source=xrm but {out / 'envs'} has no environments; "
                    "run the xrm subcommand (or pipeline) first",
                    file=sys.stderr,
                )
                return 2
            envs, phase1_meta = load_phase1(out)
        report = run_phase2_cell(cfg, data, envs, out, jobs=args.jobs, phase1_meta=phase1_meta)
        print(
            f"{report.algorithm}/{report.env_source}: test WGA "
            f"{report.test_wga_mean:.4f} ± {report.test_wga_std:.4f}"
        )
        return 0

    if args.command == "pipeline":
        report = run_pipeline(cfg, jobs=args.jobs)
        emit_report(out)
        print(
            f"{report.algorithm}/{report.env_source}: test WGA "
            f"{report.test_wga_mean:.4f} ± {report.test_wga_std:.4f} "
            f"(report in {out / 'report'})"
        )
        return 0

    return 2


if __name__ == "__main__":
    raise SystemExit(main())
