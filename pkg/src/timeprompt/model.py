"""The assembled forecaster: prompting + fusion + backbone + head.

Channel independence throughout: each variable's patch tokens form an
independent backbone sequence (batch and variable axes fold together
before the backbone). Ablation flags drop a path from both the forward
graph and the trainable-parameter set; the frozen backbone base and the
tokenizer table are never trainable.
"""

from __future__ import annotations

import numpy as np

from . import fusion as F
from .autodiff import Tensor, add, backward, mean, reshape, scale, take_along_last
from .backbone import Backbone, BackboneConfig
from .config import ExperimentSpec
from .head import ForecastHead, mse_loss
from .prompting import (ByteTokenizer, PromptPool, compute_similarity,
                        gather_prompts, pool_patches, select_top_k)


class Forecaster:
    def __init__(self, spec: ExperimentSpec, seed: int):
        self.spec = spec
        self.seed = seed
        mc, fc, pc, dc = spec.model, spec.fusion, spec.prompt, spec.data
        self.ablate = spec.ablate
        self.num_patches = F.patch_count(dc.lookback, fc.patch_len, fc.stride)

        root = np.random.SeedSequence(seed)
        (tok_seq, patch_seq, reprog_seq, pool_seq, soft_seq, hard_seq,
         bk_seq, head_seq, train_seq) = root.spawn(9)
        rng = np.random.default_rng

        self.tokenizer = ByteTokenizer(mc.dim, rng(tok_seq))
        self.patch_embed = F.PatchEmbedding(fc.patch_len, fc.stride,
                                            self.num_patches, mc.dim, rng(patch_seq))
        self.reprogram_attn = F.CrossAttention(mc.dim, fc.heads, rng(reprog_seq))
        self.pool = PromptPool(pc.pool_size, pc.soft_len, mc.dim, rng(pool_seq))
        self.align_soft = F.CrossAttention(mc.dim, fc.heads, rng(soft_seq))
        self.align_hard = F.CrossAttention(mc.dim, fc.heads, rng(hard_seq))
        self.gate = F.GateFusion()
        self.backbone = Backbone(BackboneConfig(
            layers=mc.layers, dim=mc.dim, heads=mc.heads, ffn_mult=mc.ffn_mult,
            seed=seed, lora_rank=mc.lora_rank, lora_alpha=mc.lora_alpha,
            lora_dropout=mc.lora_dropout, use_lora=not self.ablate.no_lora),
            rng(bk_seq))
        self.head = ForecastHead(mc.dim, mc.head_local_dim, self.num_patches,
                                 dc.horizon, rng(head_seq))
        # experiment-level generator: epoch shuffles and dropout masks
        self.train_seq = train_seq

    def new_train_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.train_seq)

    # ------------------------------------------------------------------
    # forward
    # ------------------------------------------------------------------

    def forward(self, lookback: np.ndarray, hard_tokens: Tensor | None,
                training: bool = False,
                rng: np.random.Generator | None = None) -> tuple[Tensor, dict]:
        """(B, N, T) normalized windows -> (B, N, H) normalized forecasts.

        `hard_tokens` is the (B, N, hard_len, D) embedded hard-prompt batch,
        or None when the hard path is ablated. The aux dict exposes every
        intermediate the property tests need.
        """
        batch, num_vars, _ = lookback.shape
        aux: dict = {}

        patch_tokens = self.patch_embed.forward(lookback)          # (B, N, M, D)
        series_tokens = F.reprogram(patch_tokens, self.tokenizer.embedding,
                                    self.reprogram_attn)
        aux["series_tokens"] = series_tokens

        if self.ablate.no_cma:
            fused = series_tokens
        else:
            soft_aligned = None
            hard_aligned = None
            if not self.ablate.no_sp:
                pooled = pool_patches(patch_tokens)                  # (B, N, D)
                scores = compute_similarity(pooled, self.pool.keys)  # (B, N, P)
                picked = select_top_k(scores.data, self.spec.prompt.top_k)
                soft_tokens = gather_prompts(self.pool.values, picked)
                soft_aligned = F.align(series_tokens, soft_tokens, self.align_soft)
                aux["scores"] = scores
                aux["selected"] = picked
                aux["soft_aligned"] = soft_aligned
            if not self.ablate.no_hp:
                if hard_tokens is None:
                    raise ValueError("hard path active but no hard-prompt batch given")
                hard_aligned = F.align(series_tokens, hard_tokens, self.align_hard)
                aux["hard_aligned"] = hard_aligned
            fused, gates = F.fuse(series_tokens, soft_aligned, hard_aligned, self.gate)
            aux["gates"] = gates
        aux["fused"] = fused

        folded = reshape(fused, (batch * num_vars, self.num_patches, self.spec.model.dim))
        hidden = self.backbone.forward(folded, training=training, rng=rng)
        features = reshape(hidden, (batch, num_vars, self.num_patches, self.spec.model.dim))
        return self.head.forward(features), aux

    def training_loss(self, lookback: np.ndarray, hard_tokens: Tensor | None,
                      target: np.ndarray, training: bool = True,
                      rng: np.random.Generator | None = None) -> tuple[Tensor, dict]:
        """MSE plus the key-retrieval surrogate (when the soft path trains keys)."""
        pred, aux = self.forward(lookback, hard_tokens, training=training, rng=rng)
        loss = mse_loss(pred, target)
        aux["mse"] = float(loss.data)
        weight = self.spec.prompt.key_surrogate_weight
        if "scores" in aux and weight > 0.0:
            picked_scores = take_along_last(aux["scores"], aux["selected"])
            loss = add(loss, scale(mean(picked_scores), -weight))
        aux["pred"] = pred
        return loss, aux

    # ------------------------------------------------------------------
    # parameter registries
    # ------------------------------------------------------------------

    def trainable_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        params["patch.weight"] = self.patch_embed.weight
        params["patch.bias"] = self.patch_embed.bias
        params["patch.position"] = self.patch_embed.position
        for key, value in self.reprogram_attn.parameters().items():
            params[f"reprogram.{key}"] = value
        if not self.ablate.no_cma:
            if not self.ablate.no_sp:
                if self.spec.prompt.key_surrogate_weight > 0.0:
                    params["pool.keys"] = self.pool.keys
                params["pool.values"] = self.pool.values
                for key, value in self.align_soft.parameters().items():
                    params[f"align_soft.{key}"] = value
            if not self.ablate.no_hp:
                for key, value in self.align_hard.parameters().items():
                    params[f"align_hard.{key}"] = value
            params["gates.logits"] = self.gate.logits
        if not self.ablate.no_lora:
            params.update(self.backbone.lora_parameters())
        for key, value in self.head.parameters().items():
            params[f"head.{key}"] = value
        return params

    def frozen_parameters(self) -> dict[str, Tensor]:
        params = dict(self.backbone.base_parameters())
        params["tokenizer.embedding"] = self.tokenizer.embedding
        return params

    def all_parameters(self) -> dict[str, Tensor]:
        out = self.frozen_parameters()
        out.update(self.trainable_parameters())
        # ablated-away tensors still exist; include for checkpoint completeness
        out.setdefault("pool.keys", self.pool.keys)
        out.setdefault("pool.values", self.pool.values)
        out.setdefault("gates.logits", self.gate.logits)
        for key, value in self.align_soft.parameters().items():
            out.setdefault(f"align_soft.{key}", value)
        for key, value in self.align_hard.parameters().items():
            out.setdefault(f"align_hard.{key}", value)
        out.update({k: v for k, v in self.backbone.lora_parameters().items()
                    if k not in out})
        return out

    def load_parameters(self, named: dict[str, np.ndarray]) -> None:
        targets = self.all_parameters()
        for name, array in named.items():
            if name not in targets:
                raise KeyError(f"unknown parameter {name!r} in checkpoint")
            if targets[name].data.shape != array.shape:
                raise ValueError(f"{name}: shape {array.shape} != "
                                 f"{targets[name].data.shape}")
            targets[name].data = array.astype(np.float64)
