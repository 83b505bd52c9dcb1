"""Optimization loop: Adam with bias correction, one-cycle learning rate,
global-norm gradient clipping, validation-based early stopping with
best-checkpoint restore, and a bit-reproducible step trace.

All randomness (epoch shuffles, dropout masks) comes from one generator
derived from the run seed, so a rerun with the same seed replays the exact
loss trace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .autodiff import NumericsError, Tensor, backward, no_grad, set_anomaly_check
from .config import TrainSettings
from .head import mae_metric, mse_metric
from .model import Forecaster
from .prompting import HardPromptBank


class TrainingDiverged(RuntimeError):
    pass


def onecycle_lr(step: int, total_steps: int, lr_max: float, pct_start: float = 0.3,
                div_factor: float = 25.0, final_div: float = 1e4) -> float:
    """Cosine one-cycle schedule.

    Warmup from lr_max/div_factor at step 0 to lr_max at step
    pct_start*total_steps, then cosine anneal to lr_max/final_div at the
    last step. Closed form, per phase with s the step index and
    W = pct_start*total_steps:

        warmup:  lr = lo + (lr_max - lo) * (1 - cos(pi * s / W)) / 2
        anneal:  lr = fin + (lr_max - fin) * (1 + cos(pi * t)) / 2,
                 t = (s - W) / (total_steps - 1 - W)
    """
    if not 0 <= step < total_steps:
        raise ValueError(f"onecycle_lr: step {step} outside [0, {total_steps})")
    lo = lr_max / div_factor
    fin = lr_max / final_div
    warm = pct_start * total_steps
    if step < warm:
        return lo + (lr_max - lo) * (1.0 - math.cos(math.pi * step / warm)) / 2.0
    denom = (total_steps - 1) - warm
    if denom <= 0:
        return fin
    t = (step - warm) / denom
    return fin + (lr_max - fin) * (1.0 + math.cos(math.pi * t)) / 2.0


class AdamState:
    """Per-parameter first/second moments plus a shared step counter."""

    def __init__(self, params: dict[str, Tensor],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.moments = {name: (np.zeros_like(p.data), np.zeros_like(p.data))
                        for name, p in params.items()}


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update; zeroes gradients after applying.

    A missing gradient on any trainable parameter is a wiring bug and an
    error.
    """
    for name, param in params.items():
        if param.grad is None:
            raise RuntimeError(f"adam_step: missing gradient on trainable parameter {name!r}")
    state.step_count += 1
    backend = kernels.active()
    for name, param in params.items():
        m, v = state.moments[name]
        backend.adam_update(param.data.ravel(), param.grad.ravel(),
                            m.ravel(), v.ravel(), lr, state.beta1, state.beta2,
                            state.eps, state.step_count)
        param.zero_grad()


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm."""
    total = 0.0
    for param in params.values():
        if param.grad is not None:
            total += float(np.dot(param.grad.ravel(), param.grad.ravel()))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for param in params.values():
            if param.grad is not None:
                param.grad *= factor
    return norm


# ---------------------------------------------------------------------------
# batch assembly
# ---------------------------------------------------------------------------

def assemble_batch(windows, indices: np.ndarray, model: Forecaster,
                   bank: HardPromptBank | None):
    """Stack windows into (B, N, T) lookback, (B, N, H) target and hard tokens."""
    lookback = np.stack([windows[i].lookback.T for i in indices])
    target = np.stack([windows[i].target.T for i in indices])
    hard_tokens = None
    if bank is not None:
        hard_tokens = bank.gather(np.asarray(indices), model.tokenizer.embedding)
    return lookback, target, hard_tokens


def evaluate_model(model: Forecaster, windows, bank: HardPromptBank | None,
                   batch_size: int = 64, scaler=None,
                   denormalize: bool = False,
                   collect_preds: bool = False):
    """Deterministic eval-mode metrics over all windows; optionally keeps
    per-window predictions for report dumps."""
    if not windows:
        raise ValueError("evaluate_model: empty window set")
    sq_sum = 0.0
    abs_sum = 0.0
    count = 0
    collected = [] if collect_preds else None
    with no_grad():
        for start in range(0, len(windows), batch_size):
            idx = np.arange(start, min(start + batch_size, len(windows)))
            lookback, target, hard = assemble_batch(windows, idx, model, bank)
            pred, _ = model.forward(lookback, hard, training=False)
            pred_values, target_values = pred.data, target
            if denormalize:
                std = scaler.std[None, :, None]
                mean_ = scaler.mean[None, :, None]
                pred_values = pred_values * std + mean_
                target_values = target_values * std + mean_
            diff = pred_values - target_values
            sq_sum += float((diff ** 2).sum())
            abs_sum += float(np.abs(diff).sum())
            count += diff.size
            if collect_preds:
                for row, w_idx in enumerate(idx):
                    collected.append((windows[w_idx].origin_index,
                                      pred_values[row], target_values[row]))
    mse = sq_sum / count
    mae = abs_sum / count
    return (mse, mae, collected) if collect_preds else (mse, mae)


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

@dataclass
class TraceRow:
    step: int
    lr: float
    loss: float
    val_mse: float | None = None  # filled on the last step of each epoch


@dataclass
class TrainResult:
    trace: list[TraceRow]
    val_history: list[float]
    best_val: float
    best_epoch: int
    stopped_epoch: int
    best_state: dict[str, np.ndarray] = field(repr=False, default_factory=dict)


def _first_nonfinite_parameter(params: dict[str, Tensor]) -> str | None:
    for name, param in params.items():
        if not np.all(np.isfinite(param.data)):
            return name
    return None


def train(model: Forecaster, train_windows, val_windows,
          settings: TrainSettings, bank: HardPromptBank | None,
          val_bank: HardPromptBank | None = None,
          step_callback=None) -> TrainResult:
    """Run the full recipe and restore the best-validation checkpoint.

    Stops early when validation MSE fails to improve for `patience`
    consecutive epochs. `step_callback(step, lr, loss, model, aux)` runs
    after each optimizer step (used by the property suites). `bank` and
    `val_bank` hold the precomputed hard prompts for the two window sets.
    """
    if not train_windows or not val_windows:
        raise ValueError("train: need nonempty train and validation window sets")
    params = model.trainable_parameters()
    state = AdamState(params)
    rng = model.new_train_rng()
    n = len(train_windows)
    steps_per_epoch = math.ceil(n / settings.batch_size)
    total_steps = settings.epochs * steps_per_epoch

    trace: list[TraceRow] = []
    val_history: list[float] = []
    best_val = math.inf
    best_epoch = -1
    best_state: dict[str, np.ndarray] = {}
    bad_epochs = 0
    step = 0
    stopped_epoch = settings.epochs - 1

    for epoch in range(settings.epochs):
        order = rng.permutation(n)
        for start in range(0, n, settings.batch_size):
            batch_idx = order[start:start + settings.batch_size]
            lookback, target, hard = assemble_batch(train_windows, batch_idx, model, bank)
            rng_snapshot = rng.bit_generator.state
            loss, aux = model.training_loss(lookback, hard, target,
                                            training=True, rng=rng)
            loss_value = float(loss.data)
            if not math.isfinite(loss_value):
                bad = _first_nonfinite_parameter(params)
                if bad is not None:
                    raise TrainingDiverged(
                        f"non-finite loss at step {step}; first non-finite parameter: {bad}")
                rng.bit_generator.state = rng_snapshot
                set_anomaly_check(True)
                try:
                    model.training_loss(lookback, hard, target, training=True, rng=rng)
                except NumericsError as exc:
                    raise TrainingDiverged(
                        f"non-finite loss at step {step}; {exc}") from None
                finally:
                    set_anomaly_check(False)
                raise TrainingDiverged(f"non-finite loss at step {step}")
            backward(loss)
            clip_gradients(params, settings.clip_norm)
            lr = onecycle_lr(step, total_steps, settings.lr_max,
                             settings.pct_start, settings.div_factor,
                             settings.final_div)
            adam_step(params, state, lr)
            trace.append(TraceRow(step=step, lr=lr, loss=loss_value))
            if step_callback is not None:
                step_callback(step, lr, loss_value, model, aux)
            step += 1

        val_mse, _ = evaluate_model(model, val_windows, val_bank,
                                    batch_size=settings.batch_size)
        val_history.append(val_mse)
        trace[-1].val_mse = val_mse
        if val_mse < best_val:
            best_val = val_mse
            best_epoch = epoch
            best_state = {name: p.data.copy() for name, p in params.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= settings.patience:
                stopped_epoch = epoch
                break
    else:
        stopped_epoch = settings.epochs - 1

    for name, param in params.items():
        param.data = best_state[name].copy()

    return TrainResult(trace=trace, val_history=val_history, best_val=best_val,
                       best_epoch=best_epoch, stopped_epoch=stopped_epoch,
                       best_state=best_state)
