"""Dynamic patch-token selection.

Scores every patch token against a proxy token (the patch most similar to
the class token, or the class token itself in the ablation mode), sorts the
scores descending, and cuts at the largest first-order difference in the
sorted sequence, floored at k_min. Selection is a hard gate: scoring is
gradient-free, and gradients reach only the selected tokens through the
pooling that follows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import TokenSet, group_bounds
from .tensor import Tensor

CLOSEST_PATCH = "closest_patch"
GLOBAL_TOKEN = "global_token"
GLOBAL_PROXY = -1  # sentinel proxy index when the class token is the reference


@dataclass
class SelectionConfig:
    strategy: str = "dynamic"         # "dynamic" | "fixed"
    fixed_k: int | None = None
    k_min: int = 12
    parts: int = 4
    proxy_source: str = CLOSEST_PATCH

    def __post_init__(self):
        if self.strategy not in ("dynamic", "fixed"):
            raise ValueError(f"unknown selection strategy '{self.strategy}'")
        if self.strategy == "fixed" and (self.fixed_k is None or self.fixed_k < 1):
            raise ValueError("fixed strategy requires fixed_k >= 1")
        if self.k_min < 1:
            raise ValueError("k_min must be >= 1")
        if self.parts < 1:
            raise ValueError("parts must be >= 1")
        if self.proxy_source not in (CLOSEST_PATCH, GLOBAL_TOKEN):
            raise ValueError(f"unknown proxy source '{self.proxy_source}'")


@dataclass
class SelectionResult:
    proxy_index: int              # GLOBAL_PROXY when scoring against the class token
    scores: np.ndarray            # N similarity scores, token order
    order: np.ndarray             # permutation sorting scores descending
    diff: np.ndarray              # N-1 first-order differences of the sorted scores
    raw_k: int                    # split point before the k_min floor
    k: int
    selected: np.ndarray          # k token indices (top-k of the sort)
    parts: list[Tensor] = field(default_factory=list)


def _proxy_from_arrays(cls_vec: np.ndarray, patches: np.ndarray, proxy_source: str) -> int:
    if proxy_source == GLOBAL_TOKEN:
        return GLOBAL_PROXY
    sims = patches @ cls_vec
    return int(np.argmax(sims))


def find_proxy(tokens: TokenSet, proxy_source: str = CLOSEST_PATCH) -> int:
    """Index of the patch token most similar to the class token.

    Ties break to the smallest index. With proxy_source="global_token" the
    sentinel GLOBAL_PROXY is returned: scoring then uses the class token
    directly.
    """
    return _proxy_from_arrays(tokens.cls.data[0], tokens.patches.data, proxy_source)


def _select_from_arrays(cls_vec: np.ndarray, patches: np.ndarray, config: SelectionConfig) -> SelectionResult:
    n = patches.shape[0]
    proxy = _proxy_from_arrays(cls_vec, patches, config.proxy_source)
    ref = cls_vec if proxy == GLOBAL_PROXY else patches[proxy]
    scores = patches @ ref

    # Descending sort, ties kept in ascending original-index order.
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]

    if config.strategy == "fixed":
        if not 1 <= config.fixed_k <= n:
            raise ValueError(f"fixed_k {config.fixed_k} outside [1, {n}]")
        diff = sorted_scores[:-1] - sorted_scores[1:] if n >= 2 else np.empty(0, scores.dtype)
        raw_k = k = config.fixed_k
    else:
        if n < 2:
            raise ValueError("dynamic selection needs at least 2 patch tokens")
        if config.k_min > n:
            raise ValueError(f"k_min {config.k_min} exceeds token count {n}")
        diff = sorted_scores[:-1] - sorted_scores[1:]
        raw_k = int(np.argmax(diff)) + 1
        k = max(raw_k, config.k_min)

    return SelectionResult(
        proxy_index=proxy,
        scores=scores,
        order=order,
        diff=diff,
        raw_k=raw_k,
        k=k,
        selected=order[:k].copy(),
    )


def select(tokens: TokenSet, config: SelectionConfig) -> SelectionResult:
    """Score, sort, and split the patch tokens; returns result without parts."""
    return _select_from_arrays(tokens.cls.data[0], tokens.patches.data, config)


def pool_selected(tokens: TokenSet, result: SelectionResult, parts: int) -> list[Tensor]:
    """Average the selected tokens into P contiguous groups in grid order.

    Selected tokens are first re-sorted by their grid raster rank so the
    groups keep their spatial (top-to-bottom) meaning regardless of score
    order. Group sizes differ by at most one, larger groups first.
    """
    k = result.k
    if k < parts:
        raise ValueError(f"cannot pool {k} selected tokens into {parts} parts")
    rank = result.selected.astype(np.int64)
    raster = tokens.grid[rank, 0] * tokens.n_cols + tokens.grid[rank, 1]
    spatial = rank[np.argsort(raster, kind="stable")]
    gathered = T.gather_rows(tokens.patches, spatial)
    pooled = [T.mean_axis0(T.slice_rows(gathered, a, b)) for a, b in group_bounds(k, parts)]
    result.parts = pooled
    return pooled


def run(tokens: TokenSet, config: SelectionConfig) -> SelectionResult:
    """select + pool_selected in one call."""
    result = select(tokens, config)
    pool_selected(tokens, result, config.parts)
    return result


def select_batch(batch_tokens, config: SelectionConfig) -> list[SelectionResult]:
    """Per-sample selection over a batched token stack (B x N x c)."""
    cls = batch_tokens.cls.data
    patches = batch_tokens.patches.data
    return [_select_from_arrays(cls[b], patches[b], config) for b in range(patches.shape[0])]


def pool_selected_batch(batch_tokens, results: list[SelectionResult], parts: int) -> Tensor:
    """Batched selected-token pooling as one averaging matmul.

    Builds a constant (B*P) x (B*N) averaging matrix over the flattened
    token stack, with the same grid-order groups as pool_selected, and
    returns the pooled part features as a (B*P) x c tensor (sample-major,
    part-minor rows).
    """
    patches = batch_tokens.patches
    bsz, n, c = patches.shape
    grid = batch_tokens.grid
    n_cols = batch_tokens.n_cols
    weights = np.zeros((bsz * parts, bsz * n), dtype=patches.dtype)
    for b, result in enumerate(results):
        k = result.k
        if k < parts:
            raise ValueError(f"cannot pool {k} selected tokens into {parts} parts")
        rank = result.selected.astype(np.int64)
        raster = grid[rank, 0] * n_cols + grid[rank, 1]
        spatial = rank[np.argsort(raster, kind="stable")]
        for j, (a, e) in enumerate(group_bounds(k, parts)):
            group = spatial[a:e]
            weights[b * parts + j, b * n + group] = 1.0 / len(group)
    flat = T.reshape(patches, (bsz * n, c))
    return T.matmul(Tensor(weights), flat)


def render_selection(
    image: np.ndarray,
    result: SelectionResult,
    tokens: TokenSet,
    patch: int,
    dim_factor: float = 0.35,
    outline: tuple[float, float, float] = (1.0, 1.0, 0.0),
) -> np.ndarray:
    """Overlay for inspection: unselected cells dimmed, selected cells outlined.

    Pure visualization; returns a new 3xHxW float image.
    """
    out = image.copy()
    chosen = set(int(i) for i in result.selected)
    color = np.asarray(outline, dtype=out.dtype).reshape(3, 1)
    for idx in range(tokens.num_patches):
        r, c = int(tokens.grid[idx, 0]), int(tokens.grid[idx, 1])
        r0, r1 = r * patch, (r + 1) * patch
        c0, c1 = c * patch, (c + 1) * patch
        if idx in chosen:
            out[:, r0, c0:c1] = color
            out[:, r1 - 1, c0:c1] = color
            out[:, r0:r1, c0] = color
            out[:, r0:r1, c1 - 1] = color
        else:
            out[:, r0:r1, c0:c1] *= dim_factor
    return out


def dump_traces(path, traces: list[dict]) -> None:
    """Write one JSON line per image: proxy index, k, selected indices."""
    with open(path, "w") as fh:
        for t in traces:
            fh.write(json.dumps(t) + "\n")


def trace_of(result: SelectionResult) -> dict:
    return {
        "proxy": int(result.proxy_index),
        "k": int(result.k),
        "selected": [int(i) for i in result.selected],
    }
