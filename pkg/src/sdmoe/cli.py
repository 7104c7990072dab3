"""Command-line entry point: ``sdmoe <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import cli_io
from .errors import SdMoeError
from .moe_layer import PROJECTIONS, MoeConfig, grad_check, init_params
from .train_harness import (
    gen_batch,
    lr_stress,
    measure_gradient_alignment,
    planted_task,
    rank_sweep,
    shared_energy_fraction,
    specialization_report,
    train,
)

log = logging.getLogger("sdmoe")

USAGE_EXIT = 1
RUNTIME_EXIT = 2

# layer shape used by grad-check when no --config is given
GRAD_CHECK_LAYER = MoeConfig(d_model=6, d_ff=8, n_experts=3, top_n=2, k=2)

NEEDS_CONFIG = {"gen-data", "train", "compare", "sweep-rank", "lr-stress"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sdmoe", description="Spectrally decoupled MoE analysis kit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, help_text, checkpoint=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="flat key = value run config")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        if checkpoint:
            p.add_argument("--checkpoint", type=Path, required=True)
        return p

    add("gen-data", "draw one planted-subspace batch")
    add("train", "train one model and log metrics")
    add("analyze", "spectral analysis of a checkpoint", checkpoint=True)
    add("compare", "train baseline and sd with identical seeds")
    p = add("sweep-rank", "sd runs over several common ranks")
    p.add_argument("--ks", help="comma-separated ranks (overrides config)")
    p = add("lr-stress", "divergence scan over learning rates")
    p.add_argument("--lrs", help="comma-separated ascending learning rates (overrides config)")
    p = add("grad-check", "finite-difference check of the manual backward pass")
    p.add_argument("--tokens", type=int, default=5)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--max-entries", type=int, default=2000)
    return parser


def _run_config(args) -> cli_io.RunConfig:
    cfg = cli_io.load_run_config(args.config) if args.config else cli_io.RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _metrics_rows(mlog, variant=None):
    rows = [list(r) for r in mlog.rows]
    if variant is not None:
        rows = [[variant] + r for r in rows]
    return rows


def _write_refreshes(path, mlog):
    rows = []
    for ev in mlog.refreshes:
        for i, (eb, ea, dr) in enumerate(zip(ev.energy_before, ev.energy_after, ev.dropped_energy)):
            rows.append([ev.step, ev.proj, i, ev.residual_before, ev.residual_after, eb, ea, dr])
    cli_io.write_csv(
        path,
        ["step", "proj", "expert", "residual_before", "residual_after", "energy_before", "energy_after", "dropped_energy"],
        rows,
    )


def cmd_gen_data(args, cfg):
    x, y = gen_batch(cfg.task, 0)
    basis = planted_task(cfg.task).basis
    cli_io.save_tensors(
        args.out / "data.sdmk",
        [("x", x, "tokens"), ("targets", y, "targets"), ("basis", basis, "planted_subspace")],
        {"kind": "batch", "config": cfg.to_flat()},
    )
    cli_io.write_json(
        args.out / "data_summary.json",
        {
            "n_tokens": cfg.task.n_tokens,
            "d": cfg.task.d,
            "r": cfg.task.r,
            "rho": cfg.task.rho,
            "shared_energy_fraction": shared_energy_fraction(x, basis),
        },
    )


def cmd_train(args, cfg):
    params = init_params(cfg.moe, cfg.seed, cfg.train.refresh_interval)
    trained, mlog = train(params, cfg.task, cfg.train, cfg.analysis)
    cli_io.write_csv(args.out / "metrics.csv", mlog.columns, _metrics_rows(mlog))
    if mlog.refreshes:
        _write_refreshes(args.out / "refresh.csv", mlog)
    cli_io.save_checkpoint(trained, args.out / "model.sdmk", {"run_config": cfg.to_flat()})


def _similarity_rows(report, variant=None):
    rows = []
    for p in PROJECTIONS:
        vals = report.similarity[p].values
        for i in range(vals.shape[0]):
            for j in range(vals.shape[1]):
                row = [p, 1, report.head_rank, i, j, vals[i, j]]
                rows.append(row if variant is None else [variant] + row)
    return rows


SIM_HEADER = ["proj", "interval_start", "interval_end", "expert_i", "expert_j", "similarity"]


def cmd_analyze(args, cfg):
    params = cli_io.load_checkpoint(args.checkpoint)
    stored = cli_io.checkpoint_extra(args.checkpoint).get("run_config")
    if args.config is None and stored:
        cfg = cli_io.parse_run_config(cli_io.dump_run_config_from_flat(stored))
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    report = specialization_report(params, cfg.analysis)
    cli_io.write_csv(args.out / "similarity.csv", SIM_HEADER, _similarity_rows(report))
    gate_rows = [[i, m + 1, v] for i, prof in enumerate(report.gate_alignment) for m, v in enumerate(prof)]
    cli_io.write_csv(args.out / "gate_alignment.csv", ["expert", "direction", "alignment"], gate_rows)

    task = dataclasses.replace(cfg.task, d=params.config.d_model)
    ga = measure_gradient_alignment(params, task)
    rows = []
    for a, i in enumerate(ga.experts):
        for b, j in enumerate(ga.experts):
            rows.append(["pair", i, j, ga.similarity.values[a, b]])
    for i, v in ga.alignment_to_c.items():
        rows.append(["to_c", i, -1, v])
    for i, v in ga.unique_alignment_to_c.items():
        rows.append(["unique_to_c", i, -1, v])
    for i in ga.excluded:
        rows.append(["excluded", i, -1, float("nan")])
    cli_io.write_csv(args.out / "grad_alignment.csv", ["kind", "expert_i", "expert_j", "value"], rows)


def cmd_compare(args, cfg):
    summary, sim_rows, metric_rows = [], [], []
    for variant in ("baseline", "sd"):
        moe = dataclasses.replace(cfg.moe, variant=variant)
        params = init_params(moe, cfg.seed, cfg.train.refresh_interval)
        trained, mlog = train(params, cfg.task, cfg.train, cfg.analysis)
        report = specialization_report(trained, cfg.analysis)
        sim_rows += _similarity_rows(report, variant)
        metric_rows += _metrics_rows(mlog, variant)
        summary.append([variant, mlog.task_trace[0], mlog.task_trace[-1], report.head_similarity])
    cli_io.write_csv(args.out / "similarity.csv", ["variant"] + SIM_HEADER, sim_rows)
    cli_io.write_csv(args.out / "metrics.csv", ["variant"] + list(mlog.columns), metric_rows)
    cli_io.write_csv(
        args.out / "compare.csv",
        ["variant", "initial_task_loss", "final_task_loss", "head_similarity"],
        summary,
    )


def cmd_sweep_rank(args, cfg):
    ks = [int(v) for v in args.ks.split(",")] if args.ks else list(cfg.ks)
    rows = rank_sweep(cfg.moe, cfg.task, cfg.train, ks, cfg.analysis)
    cli_io.write_dict_rows(args.out / "sweep.csv", rows)


def cmd_lr_stress(args, cfg):
    lrs = [float(v) for v in args.lrs.split(",")] if args.lrs else list(cfg.lrs)
    rows = lr_stress(cfg.moe, cfg.task, cfg.train, lrs)
    cli_io.write_dict_rows(args.out / "stress.csv", rows)


def cmd_grad_check(args, cfg):
    base = cfg.moe if args.config is not None else GRAD_CHECK_LAYER
    result = {"h": args.h, "n_tokens": args.tokens, "layer": dataclasses.asdict(base), "variants": {}}
    worst = 0.0
    for variant in ("baseline", "sd"):
        moe = dataclasses.replace(base, variant=variant)
        params = init_params(moe, cfg.seed)
        rep = grad_check(params, n_tokens=args.tokens, h=args.h, seed=cfg.seed, max_entries=args.max_entries)
        result["variants"][variant] = rep.as_dict()
        worst = max(worst, rep.max_rel_error)
    result["max_rel_error"] = worst
    cli_io.write_json(args.out / "gradcheck.json", result)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "analyze": cmd_analyze,
    "compare": cmd_compare,
    "sweep-rank": cmd_sweep_rank,
    "lr-stress": cmd_lr_stress,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
        if args.command in NEEDS_CONFIG and args.config is None:
            raise UsageError(f"{args.command} requires --config")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sdmoe: error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _run_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg)
    except (SdMoeError, OSError, ValueError) as exc:
        print(f"sdmoe: {exc}", file=sys.stderr)
        return RUNTIME_EXIT
    return 0


if __name__ == "__main__":
    sys.exit(main())
