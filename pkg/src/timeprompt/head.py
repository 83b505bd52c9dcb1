"""Local/global projection head: H-step forecasts in a single pass.

Each backbone token is projected to a low-dimensional local feature; the
mean over tokens gives a global feature that is concatenated back onto
every token, mixed by a linear layer, flattened and mapped straight to the
horizon. No autoregressive decoding anywhere.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, add, concat, matmul, mean, mul, reshape, sub


class ForecastHead:
    def __init__(self, dim: int, local_dim: int, num_patches: int, horizon: int,
                 rng: np.random.Generator):
        self.local_dim = local_dim
        self.num_patches = num_patches
        self.horizon = horizon

        def linear(n_in, n_out):
            bound = 1.0 / np.sqrt(n_in)
            w = Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)), requires_grad=True)
            b = Tensor(np.zeros(n_out), requires_grad=True)
            return w, b

        self.local_w, self.local_b = linear(dim, local_dim)
        self.fuse_w, self.fuse_b = linear(2 * local_dim, local_dim)
        self.out_w, self.out_b = linear(num_patches * local_dim, horizon)

    def parameters(self) -> dict[str, Tensor]:
        return {"local.weight": self.local_w, "local.bias": self.local_b,
                "fuse.weight": self.fuse_w, "fuse.bias": self.fuse_b,
                "out.weight": self.out_w, "out.bias": self.out_b}

    def forward(self, features: Tensor) -> Tensor:
        """(B, N, M, D) backbone output -> (B, N, H) forecasts."""
        batch, num_vars, num_patches, _ = features.shape
        local = add(matmul(features, self.local_w), self.local_b)  # (B, N, M, d)
        global_feat = mean(local, axis=2, keepdims=True)           # (B, N, 1, d)
        tiled = add(Tensor(np.zeros(local.shape)), global_feat)    # broadcast to (B, N, M, d)
        fused = add(matmul(concat([local, tiled], axis=3), self.fuse_w), self.fuse_b)
        flat = reshape(fused, (batch, num_vars, num_patches * self.local_dim))
        return add(matmul(flat, self.out_w), self.out_b)


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error over every entry (differentiable scalar)."""
    if pred.shape != np.shape(target):
        raise ValueError(f"mse_loss: shapes disagree: {pred.shape} vs {np.shape(target)}")
    diff = sub(pred, Tensor(target))
    return mean(mul(diff, diff))


def mae_metric(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.abs(pred - target).mean())


def mse_metric(pred: np.ndarray, target: np.ndarray) -> float:
    return float(((pred - target) ** 2).mean())
