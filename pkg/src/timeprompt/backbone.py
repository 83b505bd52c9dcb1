"""Tiny frozen decoder-only transformer with LoRA adapters.

Pre-norm blocks (layer norm -> causal self-attention -> residual -> layer
norm -> GELU feed-forward -> residual) with a final layer norm. Base
weights are seeded-random and frozen; the only trainable backbone
parameters are the low-rank adapters attached to the attention query and
value projections. Positional information lives in the patch embedding, so
the backbone itself is position-agnostic.

Checkpoint format (used for the frozen-weights hash and weight import):
  bytes 0..7    magic b"TPCKPT1\\n"
  bytes 8..15   uint64 little-endian header length
  header        UTF-8 JSON: {"tensors": [{"name", "shape", "offset"}, ...]}
  payload       concatenated float64 little-endian row-major data;
                offsets are element offsets from the payload start.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import (Tensor, add, dropout, gelu, layer_norm, matmul,
                       reshape, scale, softmax, transpose)

CHECKPOINT_MAGIC = b"TPCKPT1\n"


@dataclass
class BackboneConfig:
    layers: int = 2
    dim: int = 64
    heads: int = 4
    ffn_mult: int = 4
    seed: int = 0
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.1
    use_lora: bool = True

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")


class LoraLinear:
    """Frozen dense map W (plus bias) with a trainable low-rank delta.

    Forward: y = x W^T + b + (alpha/r) * drop(x) A^T B^T. Factor B starts at
    zero, so a fresh adapter is exactly the base map.
    """

    def __init__(self, weight: np.ndarray, bias: np.ndarray, rank: int,
                 alpha: float, drop_p: float, rng: np.random.Generator):
        out_features, in_features = weight.shape
        self.weight = Tensor(weight, requires_grad=False)
        self.bias = Tensor(bias, requires_grad=False)
        self.rank = rank
        self.alpha = alpha
        self.scaling = alpha / rank
        self.drop_p = drop_p
        bound = 1.0 / np.sqrt(in_features)
        self.lora_a = Tensor(rng.uniform(-bound, bound, size=(rank, in_features)),
                             requires_grad=True)
        self.lora_b = Tensor(np.zeros((out_features, rank)), requires_grad=True)

    def forward(self, x: Tensor, training: bool, rng: np.random.Generator,
                use_lora: bool = True) -> Tensor:
        base = add(matmul(x, transpose(self.weight, (1, 0))), self.bias)
        if not use_lora:
            return base
        dropped = dropout(x, self.drop_p, rng, training)
        delta = matmul(matmul(dropped, transpose(self.lora_a, (1, 0))),
                       transpose(self.lora_b, (1, 0)))
        return add(base, scale(delta, self.scaling))

    def merged_weight(self, training: bool = False) -> np.ndarray:
        """W + (alpha/r) * B A as a plain matrix; eval mode only."""
        if training:
            raise RuntimeError("merge is undefined in train mode (dropout active)")
        return self.weight.data + self.scaling * (self.lora_b.data @ self.lora_a.data)


class DenseLinear:
    """Frozen dense map used for the non-adapted projections."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = Tensor(weight, requires_grad=False)
        self.bias = Tensor(bias, requires_grad=False)

    def forward(self, x: Tensor) -> Tensor:
        return add(matmul(x, transpose(self.weight, (1, 0))), self.bias)


class TransformerBlock:
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        dim, ffn = cfg.dim, cfg.dim * cfg.ffn_mult
        self.heads = cfg.heads
        self.head_dim = dim // cfg.heads

        def w(shape):
            return rng.normal(0.0, 0.02, size=shape)

        self.ln1_gamma = Tensor(np.ones(dim), requires_grad=False)
        self.ln1_beta = Tensor(np.zeros(dim), requires_grad=False)
        self.attn_q = LoraLinear(w((dim, dim)), np.zeros(dim), cfg.lora_rank,
                                 cfg.lora_alpha, cfg.lora_dropout, rng)
        self.attn_k = DenseLinear(w((dim, dim)), np.zeros(dim))
        self.attn_v = LoraLinear(w((dim, dim)), np.zeros(dim), cfg.lora_rank,
                                 cfg.lora_alpha, cfg.lora_dropout, rng)
        self.attn_out = DenseLinear(w((dim, dim)), np.zeros(dim))
        self.ln2_gamma = Tensor(np.ones(dim), requires_grad=False)
        self.ln2_beta = Tensor(np.zeros(dim), requires_grad=False)
        self.ffn_in = DenseLinear(w((ffn, dim)), np.zeros(ffn))
        self.ffn_out = DenseLinear(w((dim, ffn)), np.zeros(dim))

    def forward(self, x: Tensor, causal_keep: np.ndarray, training: bool,
                rng: np.random.Generator, use_lora: bool) -> Tensor:
        seqs, length, dim = x.shape
        normed = layer_norm(x, self.ln1_gamma, self.ln1_beta)
        q = self.attn_q.forward(normed, training, rng, use_lora)
        k = self.attn_k.forward(normed)
        v = self.attn_v.forward(normed, training, rng, use_lora)

        def heads_first(t):
            return transpose(reshape(t, (seqs, length, self.heads, self.head_dim)),
                             (0, 2, 1, 3))

        q, k, v = heads_first(q), heads_first(k), heads_first(v)
        scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))),
                       1.0 / np.sqrt(self.head_dim))
        weights = softmax(scores, axis=-1, keep=causal_keep)
        mixed = transpose(matmul(weights, v), (0, 2, 1, 3))
        attn = self.attn_out.forward(reshape(mixed, (seqs, length, dim)))
        x = add(x, attn)

        normed = layer_norm(x, self.ln2_gamma, self.ln2_beta)
        ffn = self.ffn_out.forward(gelu(self.ffn_in.forward(normed)))
        return add(x, ffn)


class Backbone:
    """Stack of frozen pre-norm blocks; LoRA adapters are the trainable part."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.blocks = [TransformerBlock(cfg, rng) for _ in range(cfg.layers)]
        self.ln_f_gamma = Tensor(np.ones(cfg.dim), requires_grad=False)
        self.ln_f_beta = Tensor(np.zeros(cfg.dim), requires_grad=False)

    def forward(self, tokens: Tensor, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        """(S, M, D) -> (S, M, D) with causal masking (token m attends to <= m)."""
        length = tokens.shape[1]
        if length < 1:
            raise ValueError("backbone forward: need at least one token")
        causal_keep = np.tril(np.ones((length, length), dtype=bool))
        x = tokens
        for block in self.blocks:
            x = block.forward(x, causal_keep, training, rng, self.cfg.use_lora)
        return layer_norm(x, self.ln_f_gamma, self.ln_f_beta)

    def base_parameters(self) -> dict[str, Tensor]:
        """All frozen weights, keyed by a stable dotted name."""
        params: dict[str, Tensor] = {}
        for i, blk in enumerate(self.blocks):
            prefix = f"backbone.h{i}"
            params[f"{prefix}.ln1.gamma"] = blk.ln1_gamma
            params[f"{prefix}.ln1.beta"] = blk.ln1_beta
            params[f"{prefix}.attn.q.weight"] = blk.attn_q.weight
            params[f"{prefix}.attn.q.bias"] = blk.attn_q.bias
            params[f"{prefix}.attn.k.weight"] = blk.attn_k.weight
            params[f"{prefix}.attn.k.bias"] = blk.attn_k.bias
            params[f"{prefix}.attn.v.weight"] = blk.attn_v.weight
            params[f"{prefix}.attn.v.bias"] = blk.attn_v.bias
            params[f"{prefix}.attn.out.weight"] = blk.attn_out.weight
            params[f"{prefix}.attn.out.bias"] = blk.attn_out.bias
            params[f"{prefix}.ln2.gamma"] = blk.ln2_gamma
            params[f"{prefix}.ln2.beta"] = blk.ln2_beta
            params[f"{prefix}.ffn.in.weight"] = blk.ffn_in.weight
            params[f"{prefix}.ffn.in.bias"] = blk.ffn_in.bias
            params[f"{prefix}.ffn.out.weight"] = blk.ffn_out.weight
            params[f"{prefix}.ffn.out.bias"] = blk.ffn_out.bias
        params["backbone.ln_f.gamma"] = self.ln_f_gamma
        params["backbone.ln_f.beta"] = self.ln_f_beta
        return params

    def lora_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, blk in enumerate(self.blocks):
            prefix = f"backbone.h{i}"
            params[f"{prefix}.attn.q.lora_a"] = blk.attn_q.lora_a
            params[f"{prefix}.attn.q.lora_b"] = blk.attn_q.lora_b
            params[f"{prefix}.attn.v.lora_a"] = blk.attn_v.lora_a
            params[f"{prefix}.attn.v.lora_b"] = blk.attn_v.lora_b
        return params

    def adapters(self) -> list[LoraLinear]:
        out = []
        for blk in self.blocks:
            out.extend([blk.attn_q, blk.attn_v])
        return out

    def base_parameter_count(self) -> int:
        d, L, f = self.cfg.dim, self.cfg.layers, self.cfg.dim * self.cfg.ffn_mult
        per_block = 2 * d + 4 * (d * d + d) + 2 * d + (f * d + f) + (d * f + d)
        return L * per_block + 2 * d

    def import_base_weights(self, path) -> None:
        """Load base weights from a checkpoint file (names must match)."""
        loaded = load_checkpoint(path)
        base = self.base_parameters()
        for name, tensor in base.items():
            if name not in loaded:
                raise KeyError(f"checkpoint missing base weight {name!r}")
            if loaded[name].shape != tensor.data.shape:
                raise ValueError(
                    f"{name}: checkpoint shape {loaded[name].shape} "
                    f"!= expected {tensor.data.shape}")
            tensor.data = loaded[name].astype(np.float64)


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator | None = None) -> Backbone:
    return Backbone(cfg, rng)


def lora_forward(layer: LoraLinear, x: Tensor, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    return layer.forward(x, training, rng)


def merge_lora(layer: LoraLinear, training: bool = False) -> np.ndarray:
    return layer.merged_weight(training)


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

def save_checkpoint(path, named_arrays: dict[str, np.ndarray]) -> None:
    """Write tensors in the documented manifest + float64-LE layout."""
    entries = []
    offset = 0
    blobs = []
    for name in sorted(named_arrays):
        arr = np.ascontiguousarray(named_arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        blobs.append(arr.tobytes())
    header = json.dumps({"tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(np.uint64(len(header)).tobytes())
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        header_len = int(np.frombuffer(fh.read(8), dtype="<u8")[0])
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    out: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"] * 8
        arr = np.frombuffer(payload, dtype="<f8", count=size, offset=start)
        out[entry["name"]] = arr.reshape(shape).copy()
    return out
