"""Command-line harness: ``dpquant <verb> --config <path> [--seed N] [--out DIR]``.

Verbs:
    train            run one training experiment, emit metrics/ledger/stats
    measure-impact   one loss-impact measurement round on a fresh model
    accountant       report epsilon(delta) and the RDP curve for a ledger file
    speedup          evaluate the linear compute cost model
    quantizer-stats  Monte-Carlo bias/variance statistics of the quantizer
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from .accounting import (DEFAULT_ORDERS, analysis_fraction, compose,
                         eps_at_delta, ledger_epsilon, load_ledger,
                         save_ledger)
from .config import RunConfig, load_run_config, load_tool_config
from .data import load_idx_dataset, split_holdout, synth_dataset
from .diagnostics import (CostModelInput, speedup_estimate, write_ratio_histogram,
                          write_step_stats)
from .errors import ConfigError
from .network import build_network
from .quantize import QuantizerSpec, build_grid, empirical_moments
from .scheduling import (append_impact_records, compute_loss_impact,
                         singleton_policies, uniform_table)
from .training import emit_metrics, train_loop


def _load_dataset(cfg: RunConfig):
    data = cfg.data
    if data["source"] == "synth":
        return synth_dataset(
            n_classes=data["n_classes"], n_per_class=data["n_per_class"],
            dim=data["dim"], separation=data["separation"], seed=cfg.seed,
        )
    return load_idx_dataset(data["images"], data["labels"],
                            n_classes=data.get("n_classes"))


def _prepare(cfg: RunConfig):
    handle = _load_dataset(cfg)
    if int(np.prod(cfg.input_shape)) != handle.X.shape[1]:
        raise ConfigError(
            f"input shape {cfg.input_shape} does not hold "
            f"{handle.X.shape[1]} features"
        )
    net = build_network(cfg.arch_text, cfg.input_shape, seed=cfg.seed)
    grid = build_grid(QuantizerSpec(mode=cfg.quantizer_mode))
    train, val = split_holdout(handle, cfg.val_fraction, seed=cfg.seed)
    return net, grid, train, val


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    net, grid, train, val = _prepare(cfg)
    result = train_loop(
        net, train.X, train.y, val.X, val.y, cfg.dp, cfg.scheduler, grid,
        mode=cfg.mode, epochs=cfg.epochs, eps_target=cfg.eps_target,
        delta=cfg.delta, seed=cfg.seed,
    )
    emit_metrics(result.history, out / "metrics.txt")
    save_ledger(result.ledger, out / "ledger.txt")
    write_step_stats(out / "step_stats.txt", result.step_stats)
    write_ratio_histogram(out / "ratio_histogram.txt", result.step_stats)
    impact_path = out / "impact.txt"
    impact_path.write_text("")
    for epoch, round_ in result.impact_rounds:
        append_impact_records(impact_path, epoch, round_.table, round_)

    last = result.history[-1] if result.history else None
    if last is not None:
        frac = analysis_fraction(result.ledger)
        print(
            f"mode={cfg.mode} epochs_run={len(result.history)} "
            f"val_accuracy={last.val_accuracy:.4f} "
            f"eps_total={last.eps_total:.4f} eps_measure={last.eps_measure:.4f} "
            f"analysis_fraction={frac:.4f}"
        )
    if result.truncated_at_epoch is not None:
        print(f"training truncated at epoch {result.truncated_at_epoch} "
              f"(privacy budget {cfg.eps_target})")
    if result.skipped_batches:
        print(f"skipped {result.skipped_batches} empty Poisson batches")
    print(f"wrote {out}/metrics.txt ledger.txt step_stats.txt "
          f"ratio_histogram.txt impact.txt")
    return 0


def cmd_measure_impact(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    net, grid, train, _ = _prepare(cfg)
    from .accounting import PrivacyLedger

    ledger = PrivacyLedger(delta=cfg.delta)
    table = uniform_table(singleton_policies(net), cfg.scheduler.ema_decay)
    rng = np.random.default_rng(cfg.seed)
    q = min(1.0, cfg.dp.logical_batch / len(train.X))
    batches = []
    for _ in range(cfg.scheduler.n_sample):
        idx = np.flatnonzero(rng.random(len(train.X)) < q)
        if idx.size:
            batches.append(
                (train.X[idx].reshape(-1, *cfg.input_shape), train.y[idx])
            )
    round_ = compute_loss_impact(
        net, table, batches, q, cfg.dp, cfg.scheduler, grid, ledger, rng
    )
    impact_path = out / "impact.txt"
    impact_path.write_text("")
    append_impact_records(impact_path, 0, round_.table, round_)
    save_ledger(ledger, out / "ledger.txt")
    for policy, raw, priv in zip(table.policies, round_.raw, round_.privatized):
        print(f"layer {policy[0]}: raw={raw:+.6f} privatized={priv:+.6f}")
    print(f"wrote {impact_path} and {out}/ledger.txt")
    return 0


def cmd_accountant(args) -> int:
    tool = load_tool_config(args.config, "accountant")
    delta = float(tool.get("delta", 1e-5))
    ledger_path = tool["_base"] / tool["ledger"]
    if not ledger_path.exists():
        raise ConfigError(f"ledger file {ledger_path} does not exist")
    ledger = load_ledger(ledger_path, delta=delta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    curve = compose(ledger, DEFAULT_ORDERS)
    eps, best = eps_at_delta(curve, delta)
    frac = analysis_fraction(ledger)
    measure = ledger.filtered("measure")
    eps_measure = ledger_epsilon(measure) if measure.events else 0.0
    with open(out / "accountant.txt", "w") as fh:
        fh.write(f"# eps={eps!r} best_order={best!r} delta={delta!r} "
                 f"eps_measure={eps_measure!r} analysis_fraction={frac!r}\n")
        for order, value in zip(curve.orders, curve.values):
            fh.write(f"{order!r} {value!r}\n")
    print(f"eps={eps:.6f} at delta={delta} (best order {best})")
    print(f"measure-only eps={eps_measure:.6f} analysis_fraction={frac:.4f}")
    print(f"wrote {out}/accountant.txt")
    return 0


def cmd_speedup(args) -> int:
    tool = load_tool_config(args.config, "speedup")
    t_train = float(tool.get("t_train", 1.0))
    if "overhead_pct" in tool:
        t_overhead = t_train * float(tool["overhead_pct"]) / 100.0
    else:
        t_overhead = float(tool.get("t_overhead", 0.0))
    inp = CostModelInput(
        t_train_baseline=t_train,
        t_overhead=t_overhead,
        t_analysis=float(tool.get("t_analysis", 0.0)),
        quantized_fraction=float(tool.get("quantized_fraction", 0.9)),
        speedup_factor=float(tool.get("factor", 4.0)),
    )
    t_ours, speedup = speedup_estimate(inp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "speedup.txt", "w") as fh:
        fh.write(f"{t_ours!r} {speedup!r}\n")
    print(f"t_ours={t_ours:.6f} speedup={speedup:.4f}")
    return 0


def cmd_quantizer_stats(args) -> int:
    tool = load_tool_config(args.config, "quantizer-stats")
    dim = int(tool.get("dim", 32))
    vectors = int(tool.get("vectors", 10))
    trials = int(tool.get("trials", 20000))
    seed = args.seed if args.seed is not None else int(tool.get("seed", 0))
    rng = np.random.default_rng(seed)
    grid = build_grid(QuantizerSpec())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    worst_sigmas = 0.0
    with open(out / "quantizer_stats.txt", "w") as fh:
        for i in range(vectors):
            x = rng.standard_normal(dim)
            mean, total_var = empirical_moments(x, grid, trials, rng)
            scale = np.max(np.abs(x))
            bias = np.abs(mean - x)
            se = np.sqrt(max(total_var, 1e-300) / dim / trials)
            sigmas = float(np.max(bias) / se)
            worst_sigmas = max(worst_sigmas, sigmas)
            fh.write(
                f"{i} {dim} {float(np.max(bias))!r} {total_var!r} "
                f"{total_var / scale**2!r}\n"
            )
    print(f"{vectors} vectors x {trials} trials: worst elementwise bias "
          f"= {worst_sigmas:.2f} crude standard errors")
    print(f"wrote {out}/quantizer_stats.txt")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpquant",
        description="Desk-scale DP quantized-training experiments",
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, fn in (
        ("train", cmd_train),
        ("measure-impact", cmd_measure_impact),
        ("accountant", cmd_accountant),
        ("speedup", cmd_speedup),
        ("quantizer-stats", cmd_quantizer_stats),
    ):
        p = sub.add_parser(verb)
        p.add_argument("--config", required=True, help="path to a config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default="dpquant-out",
                       help="output directory for record files")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
