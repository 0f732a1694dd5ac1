"""Full model wiring: encoder -> token selection -> blending -> heads.

The model owns every trainable tensor (encoder, per-part blending weights,
classifier heads) plus head running statistics as named buffers, so the
whole state maps cleanly onto the checkpoint format.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blending import BlendWeights, blend, blend_additive, blend_batch, build_descriptor
from .config import RunConfig
from .encoder import (
    BatchTokens,
    EncoderWeights,
    TokenSet,
    encode,
    encode_batch,
    pool_all_tokens,
    pool_all_tokens_batch,
)
from .objective import ClassifierHead
from .selection import SelectionResult, pool_selected, pool_selected_batch, select, select_batch
from .tensor import Tensor


@dataclass
class ForwardOut:
    tokens: TokenSet
    f_q: Tensor                       # pre-selection pooled feature, 1 x (P*c)
    selection: SelectionResult
    parts: list[Tensor]               # P pooled part features, 1 x c each
    blended: list[Tensor]             # P blended part features
    f_final: Tensor                   # descriptor, 1 x (P*c)
    head_features: dict[str, Tensor] = field(default_factory=dict)


@dataclass
class BatchForwardOut:
    tokens: BatchTokens
    f_q: Tensor                        # B x (P*c)
    selections: list[SelectionResult]
    blended: list[Tensor]              # P tensors of B x c
    f_final: Tensor                    # B x (P*c)
    head_features: dict[str, Tensor] = field(default_factory=dict)


class Model:
    def __init__(self, cfg: RunConfig, num_identities: int, rng: np.random.Generator):
        self.cfg = cfg
        self.num_identities = num_identities
        self.encoder = EncoderWeights(cfg.encoder, rng)
        self.blenders: list[BlendWeights] = []
        if cfg.fusion == "fbm":
            self.blenders = [BlendWeights(cfg.blend, rng) for _ in range(cfg.parts)]
        c = cfg.encoder.dim
        wide = cfg.parts * c
        self.heads: dict[str, ClassifierHead] = {}
        self.heads["f_g"] = ClassifierHead(c, num_identities, rng)
        self.heads["f_q"] = ClassifierHead(wide, num_identities, rng)
        self.heads["f_final"] = ClassifierHead(wide, num_identities, rng)
        for i in range(cfg.parts):
            self.heads[f"part_{i}"] = ClassifierHead(c, num_identities, rng)

    # -- state ----------------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, p in self.encoder.params.items():
            out["encoder." + name] = p
        for i, bw in enumerate(self.blenders):
            for name, p in bw.params.items():
                out[f"blend.{i}." + name] = p
        for key, head in self.heads.items():
            out.update(head.params(f"heads.{key}"))
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for key, head in self.heads.items():
            out.update(head.buffers(f"heads.{key}"))
        return out

    def load_buffers(self, arrays: dict[str, np.ndarray]) -> None:
        for key, head in self.heads.items():
            head.running_mean = arrays[f"heads.{key}.running_mean"].reshape(-1).copy()
            head.running_var = arrays[f"heads.{key}.running_var"].reshape(-1).copy()

    # -- forward paths ---------------------------------------------------

    def forward(self, image: np.ndarray, update_head_stats: bool = False) -> ForwardOut:
        cfg = self.cfg
        tokens = encode(self.encoder, image)
        f_q = pool_all_tokens(tokens, cfg.parts)
        if cfg.normalize_fq:
            f_q = T.l2_normalize(f_q)
        sel = select(tokens, cfg.selection)
        parts = pool_selected(tokens, sel, cfg.parts)
        if cfg.fusion == "fbm":
            blended = [blend(tokens.cls, part, bw) for part, bw in zip(parts, self.blenders)]
        else:
            blended = [blend_additive(tokens.cls, part) for part in parts]
        f_final = build_descriptor(blended)
        feats = {"f_g": tokens.cls, "f_q": f_q, "f_final": f_final}
        for i, b in enumerate(blended):
            feats[f"part_{i}"] = b
        if update_head_stats:
            for key in feats:
                self.heads[key].observe(feats[key].data)
        return ForwardOut(
            tokens=tokens,
            f_q=f_q,
            selection=sel,
            parts=parts,
            blended=blended,
            f_final=f_final,
            head_features=feats,
        )

    def forward_batch(self, images: np.ndarray, update_head_stats: bool = False) -> "BatchForwardOut":
        """Run a whole (B x 3 x H x W) stack through one recorded graph.

        Matches ``forward`` semantics sample for sample, at a fraction of
        the op count; the training loop uses this path.
        """
        cfg = self.cfg
        bsz = images.shape[0]
        tokens = encode_batch(self.encoder, images)
        f_q = pool_all_tokens_batch(tokens, cfg.parts)
        if cfg.normalize_fq:
            f_q = T.l2_normalize(f_q)
        selections = select_batch(tokens, cfg.selection)
        parts_flat = pool_selected_batch(tokens, selections, cfg.parts)
        part_rows = [
            T.gather_rows(parts_flat, np.arange(bsz) * cfg.parts + i)
            for i in range(cfg.parts)
        ]
        if cfg.fusion == "fbm":
            blended = [blend_batch(tokens.cls, rows, bw) for rows, bw in zip(part_rows, self.blenders)]
        else:
            blended = [T.add(rows, tokens.cls) for rows in part_rows]
        f_final = blended[0] if len(blended) == 1 else T.concat(blended, axis=-1)
        feats = {"f_g": tokens.cls, "f_q": f_q, "f_final": f_final}
        for i, b in enumerate(blended):
            feats[f"part_{i}"] = b
        if update_head_stats:
            for key in feats:
                for row in feats[key].data:
                    self.heads[key].observe(row)
        return BatchForwardOut(
            tokens=tokens,
            f_q=f_q,
            selections=selections,
            blended=blended,
            f_final=f_final,
            head_features=feats,
        )

    def descriptor(self, image: np.ndarray, pre_dpsm: bool = False) -> np.ndarray:
        """Retrieval descriptor for one image (no tape, no stat updates).

        ``pre_dpsm`` swaps in the pooled pre-selection feature, the knob for
        comparing representations before and after token selection.
        """
        tokens = encode(self.encoder, image)
        if pre_dpsm:
            return pool_all_tokens(tokens, self.cfg.parts).data[0].copy()
        sel = select(tokens, self.cfg.selection)
        parts = pool_selected(tokens, sel, self.cfg.parts)
        if self.cfg.fusion == "fbm":
            blended = [blend(tokens.cls, part, bw) for part, bw in zip(parts, self.blenders)]
        else:
            blended = [blend_additive(tokens.cls, part) for part in parts]
        return build_descriptor(blended).data[0].copy()

    def pooled_feature(self, image: np.ndarray) -> np.ndarray:
        """Pre-selection pooled feature as a plain vector (bank init/updates)."""
        tokens = encode(self.encoder, image)
        vec = pool_all_tokens(tokens, self.cfg.parts)
        if self.cfg.normalize_fq:
            vec = T.l2_normalize(vec)
        return vec.data[0].copy()
