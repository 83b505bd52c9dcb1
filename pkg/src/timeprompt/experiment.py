"""Experiment orchestration: dataset preparation, the (horizon x seed x
ablation) grid, metric tables with seed/horizon aggregation, and report
emission.

Every run writes under ``<out>/<run-id>/``; the run id is derived from the
resolved config so identical configs land in the same place and all
emitted files are byte-reproducible (no timestamps).
"""

from __future__ import annotations

import copy
import hashlib
import os
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .backbone import save_checkpoint
from .config import AblationConfig, ExperimentSpec, dump_spec
from .data import (chronological_split, few_shot_subsample, fit_transform,
                   load_series, make_windows)
from .model import Forecaster
from .prompting import HardPromptBank
from .training import TrainResult, evaluate_model, train

ABLATION_SUITE = ("full", "no_sp", "no_hp", "no_cma", "no_lora")

SWEEP_AXES = {
    "soft_len": [3, 5, 10, 15],
    "hard_len": [3, 5, 10, 15],
    "pool_size": [10, 50, 100, 200],
    "top_k": [1, 3, 5, 10],
}


def ablation_config(name: str) -> AblationConfig:
    if name == "full":
        return AblationConfig()
    if name not in ("no_sp", "no_hp", "no_cma", "no_lora"):
        raise ValueError(f"unknown ablation {name!r}")
    return AblationConfig(**{name: True})


# ---------------------------------------------------------------------------
# dataset preparation
# ---------------------------------------------------------------------------

@dataclass
class PreparedData:
    scaler: object
    splits: dict[str, list]           # train/val/test window lists
    banks: dict[str, HardPromptBank]  # per split, same keys
    variable_names: list[str]
    dataset_name: str


def prepare_dataset(spec: ExperimentSpec, horizon: int,
                    few_shot_seed: int = 0,
                    build_banks: bool = True,
                    dump_dir=None) -> PreparedData:
    """Load, split, scale and window the configured series for one horizon."""
    dc = spec.data
    series = load_series(dc.path, forward_fill=dc.forward_fill)
    ranges = chronological_split(series, tuple(dc.split),
                                 min_rows=dc.lookback + horizon)
    scaler, normalized = fit_transform(series, ranges["train"])
    windows = make_windows(normalized, dc.lookback, horizon, ranges,
                           stride=dc.window_stride)
    splits = {name: [w for w in windows if w.split == name]
              for name in ("train", "val", "test")}
    if dc.few_shot_fraction < 1.0:
        splits["train"] = few_shot_subsample(
            splits["train"], dc.few_shot_fraction,
            seed=few_shot_seed, random_mode=dc.few_shot_random)

    banks: dict[str, HardPromptBank] = {}
    if build_banks:
        for name, split_windows in splits.items():
            dump_path = None
            if spec.prompt.dump_hard_prompts and dump_dir is not None:
                dump_path = Path(dump_dir) / f"hard_prompts_{name}.txt"
            banks[name] = HardPromptBank(
                split_windows, dc.dataset_name, series.variable_names, horizon,
                hard_len=spec.prompt.hard_len, lag_count=spec.prompt.lag_count,
                dump_path=dump_path)
    return PreparedData(scaler=scaler, splits=splits, banks=banks,
                        variable_names=series.variable_names,
                        dataset_name=dc.dataset_name)


def persistence_baseline(windows) -> tuple[float, float]:
    """Repeat the last look-back value across the horizon; (MSE, MAE)."""
    sq_sum = abs_sum = 0.0
    count = 0
    for w in windows:
        pred = np.broadcast_to(w.lookback[-1], w.target.shape)
        diff = pred - w.target
        sq_sum += float((diff ** 2).sum())
        abs_sum += float(np.abs(diff).sum())
        count += diff.size
    return sq_sum / count, abs_sum / count


# ---------------------------------------------------------------------------
# metrics table
# ---------------------------------------------------------------------------

@dataclass
class MetricRow:
    dataset: str
    horizon: int
    seed: int
    ablation: str
    mse: float
    mae: float


@dataclass
class AggregateRow:
    dataset: str
    ablation: str
    horizon: str  # str(horizon) or "all"
    mse_mean: float
    mse_std: float
    mae_mean: float
    mae_std: float


class MetricsTable:
    RAW_HEADER = "dataset,horizon,seed,ablation,mse,mae"
    AGG_HEADER = "dataset,ablation,horizon,mse_mean,mse_std,mae_mean,mae_std"

    def __init__(self, rows: list[MetricRow] | None = None):
        self.rows: list[MetricRow] = list(rows or [])

    def add(self, row: MetricRow) -> None:
        self.rows.append(row)

    def aggregates(self) -> list[AggregateRow]:
        """Mean and population std over seeds per horizon, plus a horizon
        'all' row averaging each seed's per-horizon means first."""
        out: list[AggregateRow] = []
        keys = sorted({(r.dataset, r.ablation) for r in self.rows})
        for dataset, ablation in keys:
            group = [r for r in self.rows
                     if r.dataset == dataset and r.ablation == ablation]
            horizons = sorted({r.horizon for r in group})
            for horizon in horizons:
                cell = [r for r in group if r.horizon == horizon]
                mses = np.array([r.mse for r in cell])
                maes = np.array([r.mae for r in cell])
                out.append(AggregateRow(dataset, ablation, str(horizon),
                                        float(mses.mean()), float(mses.std()),
                                        float(maes.mean()), float(maes.std())))
            seeds = sorted({r.seed for r in group})
            per_seed_mse = []
            per_seed_mae = []
            for seed in seeds:
                seed_rows = [r for r in group if r.seed == seed]
                per_seed_mse.append(np.mean([r.mse for r in seed_rows]))
                per_seed_mae.append(np.mean([r.mae for r in seed_rows]))
            mses = np.array(per_seed_mse)
            maes = np.array(per_seed_mae)
            out.append(AggregateRow(dataset, ablation, "all",
                                    float(mses.mean()), float(mses.std()),
                                    float(maes.mean()), float(maes.std())))
        return out

    def to_csv(self) -> str:
        lines = [self.RAW_HEADER]
        for r in sorted(self.rows, key=lambda r: (r.dataset, r.horizon, r.seed, r.ablation)):
            lines.append(f"{r.dataset},{r.horizon},{r.seed},{r.ablation},"
                         f"{r.mse!r},{r.mae!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "MetricsTable":
        lines = [ln for ln in text.strip().splitlines() if ln]
        if not lines or lines[0] != cls.RAW_HEADER:
            raise ValueError("metrics file: bad or missing header")
        rows = []
        for ln in lines[1:]:
            dataset, horizon, seed, ablation, mse, mae = ln.split(",")
            rows.append(MetricRow(dataset, int(horizon), int(seed), ablation,
                                  float(mse), float(mae)))
        return cls(rows)

    def summary_text(self) -> str:
        """Plain-text table: raw rows plus mean+-std aggregate block."""
        lines = ["raw results"]
        lines.append(f"{'dataset':<14}{'horizon':>8}{'seed':>6}{'ablation':>10}"
                     f"{'MSE':>10}{'MAE':>10}")
        for r in sorted(self.rows, key=lambda r: (r.dataset, r.horizon, r.seed, r.ablation)):
            lines.append(f"{r.dataset:<14}{r.horizon:>8}{r.seed:>6}{r.ablation:>10}"
                         f"{r.mse:>10.4f}{r.mae:>10.4f}")
        lines.append("")
        lines.append("aggregates (mean+-std over seeds)")
        lines.append(f"{'dataset':<14}{'ablation':>10}{'horizon':>8}"
                     f"{'MSE':>18}{'MAE':>18}")
        for a in self.aggregates():
            mse = f"{a.mse_mean:.4f}+-{a.mse_std:.4f}"
            mae = f"{a.mae_mean:.4f}+-{a.mae_std:.4f}"
            lines.append(f"{a.dataset:<14}{a.ablation:>10}{a.horizon:>8}"
                         f"{mse:>18}{mae:>18}")
        return "\n".join(lines) + "\n"


def emit_report(table: MetricsTable, out_dir, preds=None) -> list[Path]:
    """Write metrics.csv + summary.txt (+ preds.csv when dumps are given)."""
    if not table.rows:
        raise ValueError("emit_report: empty table")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    metrics_path = out / "metrics.csv"
    metrics_path.write_text(table.to_csv(), encoding="utf-8")
    written.append(metrics_path)
    summary_path = out / "summary.txt"
    summary_path.write_text(table.summary_text(), encoding="utf-8")
    written.append(summary_path)
    agg_path = out / "aggregates.csv"
    agg_lines = [MetricsTable.AGG_HEADER]
    for a in table.aggregates():
        agg_lines.append(f"{a.dataset},{a.ablation},{a.horizon},"
                         f"{a.mse_mean!r},{a.mse_std!r},{a.mae_mean!r},{a.mae_std!r}")
    agg_path.write_text("\n".join(agg_lines) + "\n", encoding="utf-8")
    written.append(agg_path)
    if preds is not None:
        written.append(write_predictions(out / "preds.csv", *preds))
    return written


def write_predictions(path, collected, variable_names) -> Path:
    """Per-window dump: origin,variable,step,truth,prediction."""
    lines = ["origin,variable,step,truth,prediction"]
    for origin, pred, truth in collected:
        for v_idx, name in enumerate(variable_names):
            for step in range(pred.shape[1]):
                lines.append(f"{origin},{name},{step},"
                             f"{truth[v_idx, step]!r},{pred[v_idx, step]!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return Path(path)


def write_trace(path, result: TrainResult) -> None:
    lines = ["step,lr,loss,val_mse"]
    for row in result.trace:
        val = "" if row.val_mse is None else repr(row.val_mse)
        lines.append(f"{row.step},{row.lr!r},{row.loss!r},{val}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# cells and grids
# ---------------------------------------------------------------------------

def output_root(spec: ExperimentSpec) -> Path:
    root = os.environ.get("TIMEPROMPT_OUT", spec.out_dir)
    run_id = spec.run_id or derive_run_id(spec)
    return Path(root) / run_id


def derive_run_id(spec: ExperimentSpec) -> str:
    digest = hashlib.sha256(dump_spec(spec).encode("utf-8")).hexdigest()
    return digest[:10]


def cell_tag(horizon: int, seed: int, ablation: str) -> str:
    return f"h{horizon}_s{seed}_{ablation}"


@dataclass
class CellResult:
    row: MetricRow
    result: TrainResult
    preds: list = field(repr=False, default_factory=list)


def run_cell(spec: ExperimentSpec, prepared: PreparedData, horizon: int,
             seed: int, ablation: str, cell_dir: Path | None = None,
             step_callback=None) -> CellResult:
    """Build, train and evaluate one grid cell; optionally write artifacts."""
    cell_spec = copy.deepcopy(spec)
    cell_spec.data.horizon = horizon
    cell_spec.ablate = ablation_config(ablation)
    model = Forecaster(cell_spec, seed)
    bank = None if cell_spec.ablate.no_hp else prepared.banks.get("train")
    val_bank = None if cell_spec.ablate.no_hp else prepared.banks.get("val")
    test_bank = None if cell_spec.ablate.no_hp else prepared.banks.get("test")

    result = train(model, prepared.splits["train"], prepared.splits["val"],
                   cell_spec.train, bank, val_bank=val_bank,
                   step_callback=step_callback)
    mse, mae, collected = evaluate_model(
        model, prepared.splits["test"], test_bank,
        batch_size=cell_spec.train.batch_size, scaler=prepared.scaler,
        denormalize=cell_spec.eval.denormalize, collect_preds=True)
    row = MetricRow(dataset=prepared.dataset_name, horizon=horizon, seed=seed,
                    ablation=ablation, mse=mse, mae=mae)

    if cell_dir is not None:
        cell_dir.mkdir(parents=True, exist_ok=True)
        write_trace(cell_dir / "trace.csv", result)
        save_checkpoint(cell_dir / "best.ckpt",
                        {name: t.data for name, t in model.all_parameters().items()})
        manifest = dump_spec(cell_spec, extra={
            "seed": seed, "kernel_backend": kernels.backend_name(),
            "metrics_denormalized": cell_spec.eval.denormalize})
        (cell_dir / "manifest.toml").write_text(manifest, encoding="utf-8")
        write_predictions(cell_dir / "preds.csv", collected, prepared.variable_names)
    return CellResult(row=row, result=result, preds=collected)


@dataclass
class ExperimentOutcome:
    table: MetricsTable
    failures: list[tuple[str, str]]
    out_dir: Path


def run_experiment(spec: ExperimentSpec, ablations: tuple[str, ...] = ("full",),
                   write_artifacts: bool = True) -> ExperimentOutcome:
    """Run the (horizon x seed x ablation) grid; failures are recorded and
    the remaining cells still run."""
    out_dir = output_root(spec)
    table = MetricsTable()
    failures: list[tuple[str, str]] = []
    single_cell = (len(spec.horizons) == 1 and len(spec.seeds) == 1
                   and len(ablations) == 1)
    last_preds = None
    variable_names: list[str] = []

    for horizon in spec.horizons:
        need_banks = any(not ablation_config(a).no_hp for a in ablations)
        prepared = prepare_dataset(spec, horizon,
                                   few_shot_seed=spec.seeds[0],
                                   build_banks=need_banks,
                                   dump_dir=out_dir if write_artifacts else None)
        variable_names = prepared.variable_names
        for seed in spec.seeds:
            for ablation in ablations:
                tag = cell_tag(horizon, seed, ablation)
                cell_dir = out_dir / "cells" / tag if write_artifacts else None
                try:
                    cell = run_cell(spec, prepared, horizon, seed, ablation,
                                    cell_dir=cell_dir)
                except Exception:
                    failures.append((tag, traceback.format_exc()))
                    continue
                table.add(cell.row)
                last_preds = (cell.preds, prepared.variable_names)

    if write_artifacts and table.rows:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "manifest.toml").write_text(
            dump_spec(spec, extra={"kernel_backend": kernels.backend_name()}),
            encoding="utf-8")
        emit_report(table, out_dir, preds=last_preds if single_cell else None)
    return ExperimentOutcome(table=table, failures=failures, out_dir=out_dir)


def run_sweep(spec: ExperimentSpec, write_artifacts: bool = True) -> ExperimentOutcome:
    """One-factor-at-a-time prompt-hyperparameter grid (4 axes x 4 values).

    Every cell starts from the spec's defaults and overrides exactly one of
    soft_len / hard_len / pool_size / top_k; rows are tagged axis=value in
    the ablation column.
    """
    out_dir = output_root(spec)
    table = MetricsTable()
    failures: list[tuple[str, str]] = []
    horizon = spec.horizons[0]

    for axis, values in SWEEP_AXES.items():
        for value in values:
            sweep_spec = copy.deepcopy(spec)
            setattr(sweep_spec.prompt, axis, value)
            tag = f"{axis}={value}"
            try:
                prepared = prepare_dataset(sweep_spec, horizon,
                                           few_shot_seed=spec.seeds[0])
                for seed in spec.seeds:
                    cell = run_cell(sweep_spec, prepared, horizon, seed, "full")
                    row = cell.row
                    row.ablation = tag
                    table.add(row)
            except Exception:
                failures.append((tag, traceback.format_exc()))

    if write_artifacts and table.rows:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "manifest.toml").write_text(
            dump_spec(spec, extra={"kernel_backend": kernels.backend_name(),
                                   "sweep": True}), encoding="utf-8")
        emit_report(table, out_dir)
    return ExperimentOutcome(table=table, failures=failures, out_dir=out_dir)
