"""Cross-attention blending of global context into each part feature.

Each part gets its own weight set. The part vector and two projections of
the global token are partitioned into fixed-width sub-parts (rows), given a
shared learnable positional table, layer-normalized, and run through
cross-attention with queries from the part stream and keys/values from the
two global streams. The attended result is reshaped back to a flat vector
and refined with a residual + feed-forward stage. Blended parts concatenate
into the final descriptor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class BlendConfig:
    dim: int = 64
    sub_size: int = 16
    heads: int = 1
    ffn_ratio: float = 4.0
    use_bias: bool = True

    def __post_init__(self):
        if self.dim % self.sub_size:
            raise ValueError("dim must be divisible by sub_size")
        if self.heads < 1:
            raise ValueError("heads must be >= 1")

    @property
    def num_sub(self) -> int:
        return self.dim // self.sub_size

    @property
    def attn_scale(self) -> float:
        # Scores divide by sqrt(d_k) with d_k = sub_size (4 when sub_size is 16).
        return float(np.sqrt(self.sub_size))


class BlendWeights:
    """Parameters of one blending instance (one per part).

    Projections start near identity and the feed-forward branch starts at
    zero output, so a fresh instance is already a sensible residual mix of
    part and global content instead of a random transform; training refines
    it rather than rebuilding it.
    """

    def __init__(self, config: BlendConfig, rng: np.random.Generator):
        self.config = config
        c, s, h = config.dim, config.sub_size, config.heads
        hidden = int(round(config.ffn_ratio * c))

        def near_eye(rows: int, cols: int) -> np.ndarray:
            return np.eye(rows, cols, dtype=np.float32) + T.trunc_normal(rng, (rows, cols))

        p: dict[str, Tensor] = {}
        for stream in ("proj_g1", "proj_g2", "proj_part"):
            p[stream + ".w"] = T.parameter(near_eye(c, c))
            if config.use_bias:
                p[stream + ".b"] = T.parameter(np.zeros((1, c)))
        p["pe"] = T.parameter(T.trunc_normal(rng, (config.num_sub, s)))
        p["ln_in.gamma"] = T.parameter(np.ones((1, s)))
        p["ln_in.beta"] = T.parameter(np.zeros((1, s)))
        for i in range(h):
            for w in ("wq", "wk", "wv"):
                p[f"heads.{i}.{w}"] = T.parameter(near_eye(s, s))
                if config.use_bias:
                    p[f"heads.{i}.{w}_b"] = T.parameter(np.zeros((1, s)))
        p["wo.w"] = T.parameter(near_eye(h * s, s))
        if config.use_bias:
            p["wo.b"] = T.parameter(np.zeros((1, s)))
        p["ln_out.gamma"] = T.parameter(np.ones((1, c)))
        p["ln_out.beta"] = T.parameter(np.zeros((1, c)))
        p["ffn.w1"] = T.parameter(T.trunc_normal(rng, (c, hidden)))
        p["ffn.b1"] = T.parameter(np.zeros((1, hidden)))
        p["ffn.w2"] = T.parameter(np.zeros((hidden, c)))
        p["ffn.b2"] = T.parameter(np.zeros((1, c)))
        self.params = p

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def get(self, name: str) -> Tensor | None:
        return self.params.get(name)


def _project_stream(vec: Tensor, weights: BlendWeights, stream: str) -> Tensor:
    """Linear map, partition into num_sub x sub_size rows, add PE, layer-norm."""
    cfg = weights.config
    x = T.linear(vec, weights[stream + ".w"], weights.get(stream + ".b"))
    x = T.reshape(x, (cfg.num_sub, cfg.sub_size))
    x = T.add(x, weights["pe"])
    return T.layer_norm(x, weights["ln_in.gamma"], weights["ln_in.beta"])


def blend(
    f_g: Tensor,
    f_part: Tensor,
    weights: BlendWeights,
    return_attn: bool = False,
):
    """Blend global context into one part feature; output shape equals input.

    Queries come from the part stream, keys and values from the two global
    streams. All three streams share the positional table and input LN of
    this instance.
    """
    cfg = weights.config
    if f_g.shape != (1, cfg.dim) or f_part.shape != (1, cfg.dim):
        raise ValueError(
            f"blend expects 1x{cfg.dim} inputs, got {f_g.shape} and {f_part.shape}"
        )
    g1 = _project_stream(f_g, weights, "proj_g1")
    g2 = _project_stream(f_g, weights, "proj_g2")
    pp = _project_stream(f_part, weights, "proj_part")

    inv_scale = 1.0 / cfg.attn_scale
    heads = []
    attn_maps = []
    for i in range(cfg.heads):
        q = T.linear(pp, weights[f"heads.{i}.wq"], weights.get(f"heads.{i}.wq_b"))
        k = T.linear(g1, weights[f"heads.{i}.wk"], weights.get(f"heads.{i}.wk_b"))
        v = T.linear(g2, weights[f"heads.{i}.wv"], weights.get(f"heads.{i}.wv_b"))
        attn = T.softmax(T.scale(T.matmul(q, T.transpose(k)), inv_scale), axis=-1)
        attn_maps.append(attn.data.copy())
        heads.append(T.matmul(attn, v))
    merged = heads[0] if len(heads) == 1 else T.concat(heads, axis=1)
    mhsa = T.linear(merged, weights["wo.w"], weights.get("wo.b"))
    f_mhsa = T.reshape(mhsa, (1, cfg.dim))

    y = T.layer_norm(T.add(f_part, f_mhsa), weights["ln_out.gamma"], weights["ln_out.beta"])
    ffn = T.linear(
        T.gelu(T.linear(y, weights["ffn.w1"], weights["ffn.b1"])),
        weights["ffn.w2"],
        weights["ffn.b2"],
    )
    out = T.add(y, ffn)
    if return_attn:
        return out, attn_maps
    return out


def blend_additive(f_g: Tensor, f_part: Tensor) -> Tensor:
    """Ablation fusion: plain pointwise addition instead of cross-attention."""
    return T.add(f_part, f_g)


def _project_stream_batch(vec: Tensor, weights: BlendWeights, stream: str) -> Tensor:
    cfg = weights.config
    bsz = vec.shape[0]
    x = T.linear(vec, weights[stream + ".w"], weights.get(stream + ".b"))
    x = T.reshape(x, (bsz, cfg.num_sub, cfg.sub_size))
    x = T.add_broadcast(x, weights["pe"])
    return T.layer_norm(x, weights["ln_in.gamma"], weights["ln_in.beta"])


def blend_batch(f_g: Tensor, f_part: Tensor, weights: BlendWeights) -> Tensor:
    """Batched blend: (B x c) global and part features -> (B x c) output."""
    cfg = weights.config
    if f_g.shape != f_part.shape or f_g.shape[-1] != cfg.dim:
        raise ValueError(f"blend_batch expects matching (B, {cfg.dim}) inputs")
    bsz = f_g.shape[0]
    g1 = _project_stream_batch(f_g, weights, "proj_g1")
    g2 = _project_stream_batch(f_g, weights, "proj_g2")
    pp = _project_stream_batch(f_part, weights, "proj_part")

    inv_scale = 1.0 / cfg.attn_scale
    heads = []
    for i in range(cfg.heads):
        q = T.linear(pp, weights[f"heads.{i}.wq"], weights.get(f"heads.{i}.wq_b"))
        k = T.linear(g1, weights[f"heads.{i}.wk"], weights.get(f"heads.{i}.wk_b"))
        v = T.linear(g2, weights[f"heads.{i}.wv"], weights.get(f"heads.{i}.wv_b"))
        attn = T.softmax(T.scale(T.bmm(q, T.transpose(k)), inv_scale), axis=-1)
        heads.append(T.bmm(attn, v))
    merged = heads[0] if len(heads) == 1 else T.concat(heads, axis=-1)
    mhsa = T.linear(merged, weights["wo.w"], weights.get("wo.b"))
    f_mhsa = T.reshape(mhsa, (bsz, cfg.dim))

    y = T.layer_norm(T.add(f_part, f_mhsa), weights["ln_out.gamma"], weights["ln_out.beta"])
    ffn = T.linear(
        T.gelu(T.linear(y, weights["ffn.w1"], weights["ffn.b1"])),
        weights["ffn.w2"],
        weights["ffn.b2"],
    )
    return T.add(y, ffn)


def build_descriptor(blended_parts: list[Tensor]) -> Tensor:
    """Concatenate the blended parts (in part order) into the final descriptor."""
    if not blended_parts:
        raise ValueError("descriptor needs at least one part")
    dims = {p.shape for p in blended_parts}
    if len(dims) != 1:
        raise ValueError(f"parts disagree on shape: {sorted(dims)}")
    if len(blended_parts) == 1:
        return blended_parts[0]
    return T.concat(blended_parts, axis=1)
