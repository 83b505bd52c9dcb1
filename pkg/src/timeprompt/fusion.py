"""Patch embedding, vocabulary reprogramming and gated cross-modal fusion.

The series enters as overlapping patches projected into the embedding
space. Reprogramming re-expresses every patch token as an attention
mixture over the frozen vocabulary table; alignment does the same against
the soft/hard prompt tokens (separate parameter sets per path). A softmax
over three scalar logits produces convex gates that blend the reprogrammed
series with the two aligned representations.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (Tensor, add, concat, matmul, mul, reshape, scale,
                       softmax, transpose)


def patch_count(lookback_len: int, patch_len: int, stride: int) -> int:
    if lookback_len < patch_len:
        raise ValueError(
            f"lookback of {lookback_len} is shorter than patch length {patch_len}")
    return (lookback_len - patch_len) // stride + 1


def extract_patches(lookback: np.ndarray, patch_len: int, stride: int) -> np.ndarray:
    """(B, N, T) -> (B, N, M, patch_len); patch m covers [m*stride, m*stride+patch_len)."""
    num_patches = patch_count(lookback.shape[-1], patch_len, stride)
    batch, num_vars, _ = lookback.shape
    out = np.empty((batch, num_vars, num_patches, patch_len))
    for m in range(num_patches):
        out[:, :, m, :] = lookback[:, :, m * stride:m * stride + patch_len]
    return out


class PatchEmbedding:
    """Linear patch projection to D plus a learned per-patch position vector."""

    def __init__(self, patch_len: int, stride: int, num_patches: int, dim: int,
                 rng: np.random.Generator):
        self.patch_len = patch_len
        self.stride = stride
        self.num_patches = num_patches
        bound = 1.0 / np.sqrt(patch_len)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(patch_len, dim)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self.position = Tensor(rng.normal(0.0, 0.02, size=(num_patches, dim)),
                               requires_grad=True)

    def forward(self, lookback: np.ndarray) -> Tensor:
        """(B, N, T) raw windows -> (B, N, M, D) patch tokens."""
        patches = Tensor(extract_patches(lookback, self.patch_len, self.stride))
        projected = add(matmul(patches, self.weight), self.bias)
        return add(projected, self.position)  # position broadcasts over (B, N)


class CrossAttention:
    """Multi-head cross-attention with D x D projections and no bias.

    Keys/values may be a shared 2-D table (V, D) or per-element tokens
    (B, N, L, D); queries are always series tokens (B, N, M, D).
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        bound = 1.0 / np.sqrt(dim)

        def proj():
            return Tensor(rng.uniform(-bound, bound, size=(dim, dim)), requires_grad=True)

        self.w_query = proj()
        self.w_key = proj()
        self.w_value = proj()
        self.w_out = proj()

    def parameters(self) -> dict[str, Tensor]:
        return {"wq": self.w_query, "wk": self.w_key,
                "wv": self.w_value, "wo": self.w_out}

    def _split_heads_tokens(self, x: Tensor, batch: int, num_vars: int, length: int) -> Tensor:
        # (B, N, L, D) -> (B, N, h, L, head_dim)
        x = reshape(x, (batch, num_vars, length, self.heads, self.head_dim))
        return transpose(x, (0, 1, 3, 2, 4))

    def forward(self, queries: Tensor, keys_values: Tensor,
                return_weights: bool = False):
        """Attend series tokens over prompt/vocab tokens; shape-preserving.

        queries: (B, N, M, D). keys_values: (V, D) shared table or
        (B, N, L, D) per-element tokens. Output: (B, N, M, D).
        """
        batch, num_vars, num_q, _ = queries.shape
        q = self._split_heads_tokens(matmul(queries, self.w_query),
                                     batch, num_vars, num_q)
        if keys_values.ndim == 2:
            kv_len = keys_values.shape[0]
            if kv_len == 0:
                raise ValueError("cross-attention: empty key/value axis")
            k = matmul(keys_values, self.w_key)     # (V, D)
            v = matmul(keys_values, self.w_value)
            # (V, D) -> (h, V, head_dim); broadcasts against (B, N, h, ...)
            k = transpose(reshape(k, (kv_len, self.heads, self.head_dim)), (1, 0, 2))
            v = transpose(reshape(v, (kv_len, self.heads, self.head_dim)), (1, 0, 2))
        else:
            kv_len = keys_values.shape[2]
            if kv_len == 0:
                raise ValueError("cross-attention: empty key/value axis")
            k = self._split_heads_tokens(matmul(keys_values, self.w_key),
                                         batch, num_vars, kv_len)
            v = self._split_heads_tokens(matmul(keys_values, self.w_value),
                                         batch, num_vars, kv_len)

        scores = scale(matmul(q, transpose(k, (*range(k.ndim - 2), k.ndim - 1, k.ndim - 2))),
                       1.0 / np.sqrt(self.head_dim))
        weights = softmax(scores, axis=-1)          # (B, N, h, M, kv_len)
        mixed = matmul(weights, v)                  # (B, N, h, M, head_dim)
        merged = reshape(transpose(mixed, (0, 1, 3, 2, 4)),
                         (batch, num_vars, num_q, self.dim))
        out = matmul(merged, self.w_out)
        if return_weights:
            return out, weights
        return out


def reprogram(patch_tokens: Tensor, vocab_table: Tensor,
              attention: CrossAttention) -> Tensor:
    """Re-express patch tokens as mixtures of vocabulary embeddings."""
    return attention.forward(patch_tokens, vocab_table)


def align(series_tokens: Tensor, prompt_tokens: Tensor,
          attention: CrossAttention) -> Tensor:
    """Fuse prompt content into series tokens; preserves the series shape."""
    return attention.forward(series_tokens, prompt_tokens)


class GateFusion:
    """Three trainable scalar logits; softmax makes convex path gates."""

    def __init__(self):
        self.logits = Tensor(np.zeros(3), requires_grad=True)

    def gates(self, active: tuple[int, ...] = (0, 1, 2)) -> Tensor:
        """Softmax over the logits of the active paths only (1-D tensor)."""
        if len(active) == 3:
            return softmax(self.logits, axis=0)
        picked = concat([self.logits[i:i + 1] for i in active], axis=0)
        return softmax(picked, axis=0)


def fuse(series_tokens: Tensor, soft_aligned: Tensor | None,
         hard_aligned: Tensor | None, gate: GateFusion) -> tuple[Tensor, Tensor]:
    """Convex gated combination of the active paths; returns (fused, gates).

    Inactive paths (ablations) are dropped and the gates renormalize over
    what remains. All active inputs must share one shape.
    """
    paths = [series_tokens]
    active = [0]
    if soft_aligned is not None:
        paths.append(soft_aligned)
        active.append(1)
    if hard_aligned is not None:
        paths.append(hard_aligned)
        active.append(2)
    for p in paths[1:]:
        if p.shape != series_tokens.shape:
            raise ValueError(
                f"fuse: path shapes disagree: {p.shape} vs {series_tokens.shape}")
    gates = gate.gates(tuple(active))
    ones = (1,) * series_tokens.ndim
    fused = None
    for slot, path in enumerate(paths):
        term = mul(reshape(gates[slot:slot + 1], ones), path)
        fused = term if fused is None else add(fused, term)
    return fused, gates
