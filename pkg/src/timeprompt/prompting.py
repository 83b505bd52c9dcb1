"""Dual-path prompting.

Soft path: a trainable pool of prompt vectors addressed by key similarity;
the top-k pool entries for each variable are gathered and flattened into a
prompt-token axis. Hard path: descriptive text built from look-back-window
statistics, byte-tokenized and embedded with a frozen table, then truncated
to a fixed token budget keeping the tail.

Everything the hard path produces is a pure function of the look-back
window; forecast-horizon values can never reach it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, gather_rows, matmul, mean, reshape, transpose

PAD_ID = 256
BOS_ID = 257
EOS_ID = 258
UNK_ID = 259
VOCAB_SIZE = 260


def byte_tokenize(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def byte_detokenize(ids) -> str:
    return bytes(i for i in ids if i < 256).decode("utf-8")


class ByteTokenizer:
    """Byte-level tokenizer over a 260-entry vocabulary with a frozen embedding.

    Ids 0-255 are raw byte values; 256-259 are pad/bos/eos/unk specials.
    Total on UTF-8 text and exactly invertible.
    """

    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.embedding = Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(dim), size=(VOCAB_SIZE, dim)),
            requires_grad=False,
        )

    def tokenize(self, text: str) -> list[int]:
        return byte_tokenize(text)

    def detokenize(self, ids) -> str:
        return byte_detokenize(ids)


@dataclass
class StatSummary:
    """Window statistics, all computed from the look-back rows only."""

    minimum: float
    maximum: float
    mean: float
    std: float
    median: float
    trend_slope: float
    trend_label: str  # increasing / decreasing / flat
    top_lags: list[int]


FLAT_SLOPE_THRESHOLD = 1e-3


def autocorrelations(values: np.ndarray, max_lag: int) -> np.ndarray:
    """Sample autocorrelation r(lag) for lag = 1..max_lag; 0 for constant input."""
    x = values - values.mean()
    denom = float(np.dot(x, x))
    out = np.zeros(max_lag)
    if denom == 0.0:
        return out
    for lag in range(1, max_lag + 1):
        out[lag - 1] = float(np.dot(x[:-lag], x[lag:])) / denom
    return out


def compute_statistics(lookback: np.ndarray, lag_count: int = 5) -> StatSummary:
    """Moments, median, OLS trend and strongest autocorrelation lags.

    Trend is the least-squares slope of value on the 0-based time index,
    labelled flat when |slope| < 1e-3. Top lags are the `lag_count` lags in
    [1, T//2] with the largest sample autocorrelation, in descending order
    (ties broken by the smaller lag).
    """
    x = np.asarray(lookback, dtype=np.float64).ravel()
    t_len = x.size
    if t_len < 2:
        raise ValueError(f"compute_statistics: need at least 2 points, got {t_len}")

    idx = np.arange(t_len, dtype=np.float64)
    idx_c = idx - idx.mean()
    slope = float(np.dot(idx_c, x - x.mean()) / np.dot(idx_c, idx_c))
    if abs(slope) < FLAT_SLOPE_THRESHOLD:
        label = "flat"
    elif slope > 0:
        label = "increasing"
    else:
        label = "decreasing"

    max_lag = t_len // 2
    corr = autocorrelations(x, max_lag)
    order = np.argsort(-corr, kind="stable")[:lag_count]
    top_lags = [int(lag) + 1 for lag in order]

    return StatSummary(
        minimum=float(x.min()),
        maximum=float(x.max()),
        mean=float(x.mean()),
        std=float(x.std()),
        median=float(np.median(x)),
        trend_slope=slope,
        trend_label=label,
        top_lags=top_lags,
    )


def _fmt(value: float, decimals: int) -> str:
    # + 0.0 normalizes IEEE negative zero so rendering is platform-stable
    return f"{value + 0.0:.{decimals}f}"


def render_hard_prompt(stats: StatSummary, lookback: np.ndarray,
                       dataset: str, variable: str, horizon: int) -> str:
    """Deterministic three-section prompt text: instruction, statistics, history."""
    values = np.asarray(lookback, dtype=np.float64).ravel()
    lags = ", ".join(str(lag) for lag in stats.top_lags)
    lines = [
        f"Instruction: forecast the next {horizon} steps of variable {variable} "
        f"from the {dataset} dataset given the previous {values.size} observations.",
        "Statistical Characteristics: "
        f"min: {_fmt(stats.minimum, 4)}, max: {_fmt(stats.maximum, 4)}, "
        f"mean: {_fmt(stats.mean, 4)}, std: {_fmt(stats.std, 4)}, "
        f"median: {_fmt(stats.median, 4)}, "
        f"trend: {stats.trend_label} (slope: {_fmt(stats.trend_slope, 4)}), "
        f"top lags: {lags}.",
        "Historical Data: " + ",".join(_fmt(v, 3) for v in values),
    ]
    return "\n".join(lines)


def embed_hard_prompt(text: str, tokenizer: ByteTokenizer) -> Tensor:
    """Token embeddings for the prompt text; no gradient reaches the table."""
    if not text:
        raise ValueError("embed_hard_prompt: empty text")
    ids = np.asarray(tokenizer.tokenize(text), dtype=np.intp)
    return gather_rows(tokenizer.embedding, ids)


def truncate_token_ids(ids: list[int], keep: int) -> np.ndarray:
    """Keep the last `keep` token ids, front-padding with PAD when short."""
    if keep < 1:
        raise ValueError(f"truncate_token_ids: keep must be >= 1, got {keep}")
    tail = list(ids[-keep:])
    return np.asarray([PAD_ID] * (keep - len(tail)) + tail, dtype=np.intp)


def truncate_prompt_tokens(embedding: Tensor, keep: int, pad_row: np.ndarray) -> Tensor:
    """Keep the last `keep` embedding rows, front-padding with the pad row."""
    if keep < 1:
        raise ValueError(f"truncate_prompt_tokens: keep must be >= 1, got {keep}")
    total = embedding.shape[0]
    if total >= keep:
        return embedding[total - keep:]
    pad = Tensor(np.tile(pad_row, (keep - total, 1)))
    return concat([pad, embedding], axis=0)


@dataclass
class HardPromptArtifact:
    stats: StatSummary
    text: str
    token_ids: list[int]
    embedding: np.ndarray  # (hard_len, dim) after truncation


def build_hard_prompt_artifact(lookback: np.ndarray, dataset: str, variable: str,
                               horizon: int, tokenizer: ByteTokenizer,
                               hard_len: int, lag_count: int = 5) -> HardPromptArtifact:
    """Full hard-prompt pipeline for one variable's look-back slice."""
    stats = compute_statistics(lookback, lag_count=lag_count)
    text = render_hard_prompt(stats, lookback, dataset, variable, horizon)
    ids = tokenizer.tokenize(text)
    kept = truncate_token_ids(ids, hard_len)
    embedding = tokenizer.embedding.data[kept]
    return HardPromptArtifact(stats=stats, text=text, token_ids=ids, embedding=embedding)


class HardPromptBank:
    """Precomputed truncated token ids per (window, variable).

    The bank is model-independent (ids only); embeddings are gathered from
    the frozen table at batch-assembly time. Optionally dumps each rendered
    prompt, one per line, for inspection.
    """

    def __init__(self, windows, dataset: str, variable_names: list[str],
                 horizon: int, hard_len: int, lag_count: int = 5, dump_path=None):
        self.hard_len = hard_len
        num_vars = len(variable_names)
        self.ids = np.empty((len(windows), num_vars, hard_len), dtype=np.intp)
        dump_lines: list[str] = []
        for w_idx, window in enumerate(windows):
            for v_idx, name in enumerate(variable_names):
                stats = compute_statistics(window.lookback[:, v_idx], lag_count=lag_count)
                text = render_hard_prompt(stats, window.lookback[:, v_idx],
                                          dataset, name, horizon)
                self.ids[w_idx, v_idx] = truncate_token_ids(byte_tokenize(text), hard_len)
                if dump_path is not None:
                    dump_lines.append(text.replace("\n", " | "))
        if dump_path is not None:
            with open(dump_path, "w", encoding="utf-8") as fh:
                fh.write("\n".join(dump_lines) + "\n")

    def gather(self, window_indices: np.ndarray, embedding: Tensor) -> Tensor:
        """Embedded truncated prompts for a batch: (B, N, hard_len, D)."""
        ids = self.ids[window_indices]  # (B, N, hard_len)
        return Tensor(embedding.data[ids])


# ---------------------------------------------------------------------------
# soft prompt pool (similarity retrieval)
# ---------------------------------------------------------------------------

class PromptPool:
    """Trainable keys (P, D) and prompt values (P, L, D).

    Initialized uniformly on [-0.5/sqrt(D), 0.5/sqrt(D)].
    """

    def __init__(self, pool_size: int, soft_len: int, dim: int,
                 rng: np.random.Generator):
        self.pool_size = pool_size
        self.soft_len = soft_len
        self.dim = dim
        bound = 0.5 / np.sqrt(dim)
        self.keys = Tensor(rng.uniform(-bound, bound, size=(pool_size, dim)),
                           requires_grad=True)
        self.values = Tensor(rng.uniform(-bound, bound, size=(pool_size, soft_len, dim)),
                             requires_grad=True)


def pool_patches(patch_tokens: Tensor) -> Tensor:
    """Mean over the patch axis: (B, N, M, D) -> (B, N, D)."""
    return mean(patch_tokens, axis=2)


def compute_similarity(pooled: Tensor, keys: Tensor) -> Tensor:
    """Raw dot-product scores (B, N, P) between pooled series and pool keys."""
    if pooled.shape[-1] != keys.shape[-1]:
        raise ValueError(
            f"compute_similarity: embedding dims disagree: {pooled.shape} vs {keys.shape}")
    return matmul(pooled, transpose(keys, (1, 0)))


def select_top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores along the last axis, score-descending.

    Ties break toward the lower index, so selection is fully deterministic.
    """
    pool_size = scores.shape[-1]
    if not 1 <= k <= pool_size:
        raise ValueError(f"select_top_k: k={k} outside [1, {pool_size}]")
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def gather_prompts(values: Tensor, indices: np.ndarray) -> Tensor:
    """Retrieve pool entries: (P, L, D)[(B, N, k)] -> (B, N, k*L, D).

    Gradient flows only into the selected value rows.
    """
    batch, num_vars, k = indices.shape
    picked = gather_rows(values, indices)  # (B, N, k, L, D)
    soft_len, dim = values.shape[1], values.shape[2]
    return reshape(picked, (batch, num_vars, k * soft_len, dim))
