"""Command-line entry points.

Subcommands: synth, train, eval, ablate, sweep, report. Every subcommand
takes ``--config file.toml`` plus dotted overrides mirroring config keys
(``--data.horizon 96``); flag overrides win over the file. ``TIMEPROMPT_OUT``
overrides the output root.

Exit codes: 0 success, 1 config error, 2 runtime cell failure,
3 acceptance-gate failure (report --check mismatch).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .backbone import load_checkpoint
from .config import ConfigError, ExperimentSpec, dump_spec, load_spec
from .experiment import (ABLATION_SUITE, MetricsTable, emit_report,
                         output_root, persistence_baseline, prepare_dataset,
                         run_experiment, run_sweep)
from .model import Forecaster
from .synthetic import make_synthetic
from .training import evaluate_model

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CELL_FAILURE = 2
EXIT_GATE_FAILURE = 3


def _collect_overrides(pairs: list[str]) -> dict[str, str]:
    """Turn trailing ['--a.b', '1', '--c.d', 'x'] into {'a.b': '1', ...}."""
    overrides: dict[str, str] = {}
    i = 0
    while i < len(pairs):
        token = pairs[i]
        if not token.startswith("--"):
            raise ConfigError(f"expected --key, got {token!r}")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            i += 1
            if i >= len(pairs):
                raise ConfigError(f"missing value for --{key}")
            value = pairs[i]
        overrides[key] = value
        i += 1
    return overrides


def _load(args, rest) -> ExperimentSpec:
    return load_spec(args.config, _collect_overrides(rest))


def cmd_synth(args, rest) -> int:
    spec = _load(args, rest)
    out = Path(spec.synth.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    make_synthetic(out, spec.synth)
    print(f"wrote {spec.synth.rows} rows x {spec.synth.variables} variables to {out}")
    return EXIT_OK


def _report_outcome(outcome) -> int:
    for tag, trace in outcome.failures:
        print(f"cell {tag} failed:\n{trace}", file=sys.stderr)
    print(outcome.table.summary_text(), end="")
    print(f"artifacts under {outcome.out_dir}")
    return EXIT_CELL_FAILURE if outcome.failures else EXIT_OK


def cmd_train(args, rest) -> int:
    spec = _load(args, rest)
    return _report_outcome(run_experiment(spec, ablations=("full",)))


def cmd_ablate(args, rest) -> int:
    spec = _load(args, rest)
    return _report_outcome(run_experiment(spec, ablations=ABLATION_SUITE))


def cmd_sweep(args, rest) -> int:
    spec = _load(args, rest)
    return _report_outcome(run_sweep(spec))


def cmd_eval(args, rest) -> int:
    spec = _load(args, rest)
    horizon = spec.data.horizon
    prepared = prepare_dataset(spec, horizon, few_shot_seed=spec.seeds[0])
    model = Forecaster(spec, spec.seeds[0])
    if args.checkpoint:
        model.load_parameters(load_checkpoint(args.checkpoint))
    bank = None if spec.ablate.no_hp else prepared.banks.get("test")
    mse, mae = evaluate_model(model, prepared.splits["test"], bank,
                              batch_size=spec.train.batch_size,
                              scaler=prepared.scaler,
                              denormalize=spec.eval.denormalize)
    base_mse, base_mae = persistence_baseline(prepared.splits["test"])
    print(f"test MSE {mse:.6f}  MAE {mae:.6f}  "
          f"(persistence MSE {base_mse:.6f}  MAE {base_mae:.6f})")
    return EXIT_OK


def cmd_report(args, rest) -> int:
    if rest:
        raise ConfigError(f"report takes no overrides, got {rest}")
    table = MetricsTable.from_csv(Path(args.metrics).read_text(encoding="utf-8"))
    out_dir = Path(args.out) if args.out else Path(args.metrics).parent
    emit_report(table, out_dir)
    if args.check:
        agg_path = out_dir / "aggregates.csv"
        recomputed = {(a.dataset, a.ablation, a.horizon):
                      (a.mse_mean, a.mse_std, a.mae_mean, a.mae_std)
                      for a in table.aggregates()}
        for line in agg_path.read_text(encoding="utf-8").strip().splitlines()[1:]:
            dataset, ablation, horizon, *vals = line.split(",")
            stored = tuple(float(v) for v in vals)
            expect = recomputed[(dataset, ablation, horizon)]
            if any(abs(s - e) > 1e-12 for s, e in zip(stored, expect)):
                print(f"aggregate mismatch for {dataset}/{ablation}/{horizon}",
                      file=sys.stderr)
                return EXIT_GATE_FAILURE
        print("aggregates verified against raw rows")
    print(f"report written to {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="timeprompt",
        description="prompt-guided time-series forecasting lab")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="TOML config file")

    common(sub.add_parser("synth", help="generate a synthetic dataset"))
    common(sub.add_parser("train", help="train over configured horizons and seeds"))
    common(sub.add_parser("ablate", help="run the 5-configuration ablation grid"))
    common(sub.add_parser("sweep", help="one-factor prompt hyperparameter sweep"))
    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p_eval)
    p_eval.add_argument("--checkpoint", default=None, help="checkpoint to load")
    p_report = sub.add_parser("report", help="re-emit reports from a metrics file")
    p_report.add_argument("--metrics", required=True, help="metrics.csv path")
    p_report.add_argument("--out", default=None, help="output directory")
    p_report.add_argument("--check", action="store_true",
                          help="verify aggregates recompute from raw rows")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    try:
        return COMMANDS[args.command](args, rest)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
