"""Small ViT-style encoder producing a class token plus unit-norm patch tokens.

The encoder follows the standard pre-norm transformer recipe: patch
embedding, a learnable class token, learnable 1-d positional embeddings,
``depth`` blocks of (LN -> multi-head self-attention -> residual,
LN -> MLP -> residual), and a final LN. Patch tokens are L2-normalized on
the way out; class-token normalization is a config flag.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class EncoderConfig:
    image_h: int = 64
    image_w: int = 32
    patch: int = 8
    dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    normalize_cls: bool = True

    def __post_init__(self):
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ValueError("image extents must be multiples of the patch size")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")

    @property
    def n_rows(self) -> int:
        return self.image_h // self.patch

    @property
    def n_cols(self) -> int:
        return self.image_w // self.patch

    @property
    def num_patches(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch * self.patch


def paper_scale_config() -> EncoderConfig:
    """Full-scale preset (256x128 images, 16px patches -> 128 tokens of dim 768)."""
    return EncoderConfig(image_h=256, image_w=128, patch=16, dim=768, depth=12, heads=12)


@dataclass
class TokenSet:
    """Encoder output: class token, N patch tokens, and their grid coordinates."""

    cls: Tensor           # 1 x c
    patches: Tensor       # N x c, unit rows
    grid: np.ndarray      # N x 2 ints, (row, col) per token
    n_rows: int
    n_cols: int

    @property
    def num_patches(self) -> int:
        return self.patches.shape[0]

    @property
    def dim(self) -> int:
        return self.patches.shape[1]


class EncoderWeights:
    """Named parameter container for one encoder instance.

    Initialization matters when training from scratch at small scale: query
    and key maps start as small noise (standard), but value and output maps
    start near identity and the MLP branch starts silent, so the residual
    stream carries actual patch content from step 0. The class token then
    behaves like an attention-pooled summary of the patches (the geometry a
    large pretrained backbone would provide), which the token-selection
    stage depends on; training refines this rather than having to discover
    it.
    """

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        c = config.dim
        n = config.num_patches
        hidden = int(round(config.mlp_ratio * c))

        def near_eye(rows: int, cols: int) -> np.ndarray:
            return np.eye(rows, cols, dtype=np.float32) + T.trunc_normal(rng, (rows, cols))

        p: dict[str, Tensor] = {}
        p["patch_embed.w"] = T.parameter(T.trunc_normal(rng, (config.patch_dim, c)))
        p["patch_embed.b"] = T.parameter(np.zeros((1, c)))
        p["cls"] = T.parameter(np.zeros((1, c)))
        p["pos"] = T.parameter(T.trunc_normal(rng, (n + 1, c)))
        for i in range(config.depth):
            pre = f"blocks.{i}."
            p[pre + "ln1.gamma"] = T.parameter(np.ones((1, c)))
            p[pre + "ln1.beta"] = T.parameter(np.zeros((1, c)))
            for w in ("wq", "wk"):
                p[pre + "attn." + w] = T.parameter(T.trunc_normal(rng, (c, c)))
                p[pre + "attn." + w + "_b"] = T.parameter(np.zeros((1, c)))
            for w in ("wv", "wo"):
                p[pre + "attn." + w] = T.parameter(near_eye(c, c))
                p[pre + "attn." + w + "_b"] = T.parameter(np.zeros((1, c)))
            p[pre + "ln2.gamma"] = T.parameter(np.ones((1, c)))
            p[pre + "ln2.beta"] = T.parameter(np.zeros((1, c)))
            p[pre + "mlp.w1"] = T.parameter(T.trunc_normal(rng, (c, hidden)))
            p[pre + "mlp.b1"] = T.parameter(np.zeros((1, hidden)))
            p[pre + "mlp.w2"] = T.parameter(np.zeros((hidden, c)))
            p[pre + "mlp.b2"] = T.parameter(np.zeros((1, c)))
        p["final_ln.gamma"] = T.parameter(np.ones((1, c)))
        p["final_ln.beta"] = T.parameter(np.zeros((1, c)))
        self.params = p

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


def patchify(image: np.ndarray, config: EncoderConfig) -> np.ndarray:
    """Split a 3xHxW image into N patch vectors in raster (row-major) order."""
    if image.shape != (3, config.image_h, config.image_w):
        raise ValueError(
            f"image shape {image.shape} does not match config "
            f"(3, {config.image_h}, {config.image_w})"
        )
    p = config.patch
    rows = []
    for r in range(config.n_rows):
        for c in range(config.n_cols):
            cell = image[:, r * p : (r + 1) * p, c * p : (c + 1) * p]
            rows.append(cell.reshape(-1))
    return np.stack(rows).astype(image.dtype, copy=False)


def token_grid(config: EncoderConfig) -> np.ndarray:
    """(row, col) lattice coordinates of each patch token, raster order."""
    g = np.empty((config.num_patches, 2), dtype=np.int64)
    for i in range(config.num_patches):
        g[i, 0] = i // config.n_cols
        g[i, 1] = i % config.n_cols
    return g


def raw_embeddings(weights: EncoderWeights, image: np.ndarray) -> np.ndarray:
    """Token embeddings before the first transformer block (cls row first)."""
    cfg = weights.config
    patches = patchify(image, cfg)
    emb = patches @ weights["patch_embed.w"].data + weights["patch_embed.b"].data
    tokens = np.concatenate([weights["cls"].data, emb], axis=0)
    return tokens + weights["pos"].data


def _self_attention(x: Tensor, weights: EncoderWeights, block: int) -> Tensor:
    cfg = weights.config
    pre = f"blocks.{block}.attn."
    c = cfg.dim
    dh = c // cfg.heads
    q = T.linear(x, weights[pre + "wq"], weights[pre + "wq_b"])
    k = T.linear(x, weights[pre + "wk"], weights[pre + "wk_b"])
    v = T.linear(x, weights[pre + "wv"], weights[pre + "wv_b"])
    heads = []
    inv_scale = 1.0 / np.sqrt(dh)
    for h in range(cfg.heads):
        qs = T.slice_cols(q, h * dh, (h + 1) * dh)
        ks = T.slice_cols(k, h * dh, (h + 1) * dh)
        vs = T.slice_cols(v, h * dh, (h + 1) * dh)
        attn = T.softmax(T.scale(T.matmul(qs, T.transpose(ks)), inv_scale), axis=-1)
        heads.append(T.matmul(attn, vs))
    merged = heads[0] if len(heads) == 1 else T.concat(heads, axis=1)
    return T.linear(merged, weights[pre + "wo"], weights[pre + "wo_b"])


def _mlp(x: Tensor, weights: EncoderWeights, block: int) -> Tensor:
    pre = f"blocks.{block}.mlp."
    h = T.gelu(T.linear(x, weights[pre + "w1"], weights[pre + "b1"]))
    return T.linear(h, weights[pre + "w2"], weights[pre + "b2"])


def encode(weights: EncoderWeights, image: np.ndarray) -> TokenSet:
    """Run the encoder on one 3xHxW image in [0, 1]."""
    cfg = weights.config
    patches = patchify(image, cfg)
    x = T.linear(Tensor(patches), weights["patch_embed.w"], weights["patch_embed.b"])
    x = T.concat([weights["cls"], x], axis=0)
    x = T.add(x, weights["pos"])
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        h = T.layer_norm(x, weights[pre + "ln1.gamma"], weights[pre + "ln1.beta"])
        x = T.add(x, _self_attention(h, weights, i))
        h = T.layer_norm(x, weights[pre + "ln2.gamma"], weights[pre + "ln2.beta"])
        x = T.add(x, _mlp(h, weights, i))
    x = T.layer_norm(x, weights["final_ln.gamma"], weights["final_ln.beta"])
    cls = T.slice_rows(x, 0, 1)
    patch_tokens = T.l2_normalize(T.slice_rows(x, 1, cfg.num_patches + 1))
    if cfg.normalize_cls:
        cls = T.l2_normalize(cls)
    return TokenSet(
        cls=cls,
        patches=patch_tokens,
        grid=token_grid(cfg),
        n_rows=cfg.n_rows,
        n_cols=cfg.n_cols,
    )


def group_bounds(n: int, parts: int) -> list[tuple[int, int]]:
    """Split n items into `parts` contiguous groups, sizes differ by <=1, larger first."""
    if parts < 1:
        raise ValueError("parts must be positive")
    if parts > n:
        raise ValueError(f"cannot split {n} items into {parts} groups")
    base, rem = divmod(n, parts)
    bounds = []
    start = 0
    for i in range(parts):
        size = base + (1 if i < rem else 0)
        bounds.append((start, start + size))
        start += size
    return bounds


def pool_all_tokens(tokens: TokenSet, parts: int) -> Tensor:
    """Average the patch tokens in P contiguous raster-order groups and concat.

    This is the pre-selection representation: it sees every token, selected
    or not, and feeds the memory-bank path.
    """
    n = tokens.num_patches
    means = [
        T.mean_axis0(T.slice_rows(tokens.patches, a, b))
        for a, b in group_bounds(n, parts)
    ]
    return means[0] if len(means) == 1 else T.concat(means, axis=1)


# ---------------------------------------------------------------------------
# Batched path: one recorded graph for a whole training batch
# ---------------------------------------------------------------------------


@dataclass
class BatchTokens:
    """Encoder output for a batch: cls (B x c), patches (B x N x c)."""

    cls: Tensor
    patches: Tensor
    grid: np.ndarray
    n_rows: int
    n_cols: int

    @property
    def num_patches(self) -> int:
        return self.patches.shape[1]


def _self_attention_nd(x: Tensor, weights: EncoderWeights, block: int) -> Tensor:
    cfg = weights.config
    pre = f"blocks.{block}.attn."
    c = cfg.dim
    dh = c // cfg.heads
    q = T.linear(x, weights[pre + "wq"], weights[pre + "wq_b"])
    k = T.linear(x, weights[pre + "wk"], weights[pre + "wk_b"])
    v = T.linear(x, weights[pre + "wv"], weights[pre + "wv_b"])
    heads = []
    inv_scale = 1.0 / np.sqrt(dh)
    for h in range(cfg.heads):
        qs = T.slice_cols(q, h * dh, (h + 1) * dh)
        ks = T.slice_cols(k, h * dh, (h + 1) * dh)
        vs = T.slice_cols(v, h * dh, (h + 1) * dh)
        attn = T.softmax(T.scale(T.bmm(qs, T.transpose(ks)), inv_scale), axis=-1)
        heads.append(T.bmm(attn, vs))
    merged = heads[0] if len(heads) == 1 else T.concat(heads, axis=-1)
    return T.linear(merged, weights[pre + "wo"], weights[pre + "wo_b"])


def encode_batch(weights: EncoderWeights, images: np.ndarray) -> BatchTokens:
    """Encode a stack of images (B x 3 x H x W) through one recorded graph."""
    cfg = weights.config
    bsz = images.shape[0]
    patches = np.stack([patchify(img, cfg) for img in images])
    x = T.linear(Tensor(patches), weights["patch_embed.w"], weights["patch_embed.b"])
    cls_rows = T.add_broadcast(
        Tensor(np.zeros((bsz, 1, cfg.dim), dtype=x.dtype)), weights["cls"]
    )
    x = T.concat([cls_rows, x], axis=1)
    x = T.add_broadcast(x, weights["pos"])
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        h = T.layer_norm(x, weights[pre + "ln1.gamma"], weights[pre + "ln1.beta"])
        x = T.add(x, _self_attention_nd(h, weights, i))
        h = T.layer_norm(x, weights[pre + "ln2.gamma"], weights[pre + "ln2.beta"])
        x = T.add(x, _mlp(h, weights, i))
    x = T.layer_norm(x, weights["final_ln.gamma"], weights["final_ln.beta"])
    cls = T.reshape(T.slice_axis1(x, 0, 1), (bsz, cfg.dim))
    patch_tokens = T.l2_normalize(T.slice_axis1(x, 1, cfg.num_patches + 1))
    if cfg.normalize_cls:
        cls = T.l2_normalize(cls)
    return BatchTokens(
        cls=cls,
        patches=patch_tokens,
        grid=token_grid(cfg),
        n_rows=cfg.n_rows,
        n_cols=cfg.n_cols,
    )


def pool_all_tokens_batch(tokens: BatchTokens, parts: int) -> Tensor:
    """Batched group-mean pooling: (B x N x c) -> (B x P*c)."""
    n = tokens.num_patches
    means = [
        T.mean_axis(T.slice_axis1(tokens.patches, a, b), 1)
        for a, b in group_bounds(n, parts)
    ]
    return means[0] if len(means) == 1 else T.concat(means, axis=-1)
