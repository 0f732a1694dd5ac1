"""Memory bank, contrastive loss, and identity classification heads.

The bank keeps one centroid per identity, initialized once from a clean
pass over the training set and refreshed by exponential moving average with
non-augmented features only. The contrastive term is InfoNCE against all
centroids; augmented samples carry a reduced weight. Identity losses are
cross-entropy through per-feature heads (normalization neck + linear map),
one head per feature, summed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class MemoryBank:
    """Per-identity centroid dictionary with momentum updates."""

    def __init__(self, vectors: np.ndarray, momentum: float = 0.2):
        if vectors.ndim != 2:
            raise ValueError("bank vectors must be M x D")
        if not 0.0 <= momentum <= 1.0:
            raise ValueError("momentum must be in [0, 1]")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("bank entries must be finite")
        self.vectors = vectors.astype(np.float32)
        self.momentum = momentum

    @property
    def num_identities(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def init_bank(features_by_identity: dict[int, list[np.ndarray]], momentum: float = 0.2) -> MemoryBank:
    """Average each identity's features into its centroid (done once, up front)."""
    if not features_by_identity:
        raise ValueError("no identities to initialize the bank from")
    num_ids = max(features_by_identity) + 1
    dim = len(next(iter(features_by_identity.values()))[0])
    vectors = np.zeros((num_ids, dim), dtype=np.float32)
    for j in range(num_ids):
        feats = features_by_identity.get(j)
        if not feats:
            raise ValueError(f"identity {j} has no features")
        vectors[j] = np.mean(np.stack(feats), axis=0)
    return MemoryBank(vectors, momentum)


def update_bank(bank: MemoryBank, identity: int, f_q: np.ndarray) -> MemoryBank:
    """EMA update of one centroid: d <- mu*d + (1-mu)*f. Caller filters augmented samples."""
    if not 0 <= identity < bank.num_identities:
        raise IndexError(f"identity {identity} outside bank of {bank.num_identities}")
    mu = bank.momentum
    bank.vectors[identity] = mu * bank.vectors[identity] + (1.0 - mu) * f_q.reshape(-1)
    return bank


def info_nce(
    f_q: Tensor,
    bank: MemoryBank,
    positive: int,
    tau: float,
    weight: float = 1.0,
) -> Tensor:
    """Weighted -log softmax of f_q . d_l / tau at the positive centroid.

    The bank is a buffer, not a parameter: backward produces gradient for
    f_q only. Numerically stabilized by max subtraction inside the
    cross-entropy.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if not 0 <= positive < bank.num_identities:
        raise IndexError(f"positive index {positive} outside bank")
    bank_t = T.Tensor(bank.vectors.astype(f_q.dtype, copy=False))
    logits = T.scale(T.matmul(f_q, T.transpose(bank_t)), 1.0 / tau)
    loss = T.cross_entropy(logits, positive)
    if weight != 1.0:
        loss = T.scale(loss, weight)
    return loss


class ClassifierHead:
    """Normalization neck (running statistics + affine) into a bias-free linear map.

    Running statistics are state, not parameters: they are refreshed from
    observed features when ``update_stats`` is set and treated as constants
    by the gradient. Fresh heads start at mean 0 / var 1 so early training
    is a near-identity neck.
    """

    def __init__(self, in_dim: int, num_classes: int, rng: np.random.Generator,
                 eps: float = 1e-5, stat_momentum: float = 0.1):
        self.in_dim = in_dim
        self.num_classes = num_classes
        self.eps = eps
        self.stat_momentum = stat_momentum
        self.gamma = T.parameter(np.ones((1, in_dim)))
        self.beta = T.parameter(np.zeros((1, in_dim)))
        self.w = T.parameter(T.trunc_normal(rng, (in_dim, num_classes)))
        self.running_mean = np.zeros(in_dim, dtype=np.float32)
        self.running_var = np.ones(in_dim, dtype=np.float32)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {prefix + ".gamma": self.gamma, prefix + ".beta": self.beta, prefix + ".w": self.w}

    def buffers(self, prefix: str) -> dict[str, np.ndarray]:
        return {prefix + ".running_mean": self.running_mean, prefix + ".running_var": self.running_var}

    def observe(self, feature: np.ndarray) -> None:
        x = feature.reshape(-1).astype(np.float32)
        m = self.stat_momentum
        self.running_mean += m * (x - self.running_mean)
        self.running_var += m * ((x - self.running_mean) ** 2 - self.running_var)

    def _neck(self, feature: Tensor) -> Tensor:
        mean = T.Tensor((-self.running_mean).astype(feature.dtype).reshape(1, -1))
        inv = T.Tensor((1.0 / np.sqrt(self.running_var + self.eps)).astype(feature.dtype).reshape(1, -1))
        normed = T.mul_rowvec(T.add_rowvec(feature, mean), inv)
        return T.add_rowvec(T.mul_rowvec(normed, self.gamma), self.beta)

    def logits(self, feature: Tensor, update_stats: bool = False) -> Tensor:
        if feature.shape != (1, self.in_dim):
            raise ValueError(f"head expects 1x{self.in_dim} features, got {feature.shape}")
        if update_stats:
            self.observe(feature.data)
        return T.matmul(self._neck(feature), self.w)

    def logits_batch(self, features: Tensor, update_stats: bool = False) -> Tensor:
        """(B x D) features -> (B x M) logits.

        The whole batch is normalized with the statistics as of step start;
        when ``update_stats`` is set the rows are then folded into the
        running statistics in batch order.
        """
        if features.data.ndim != 2 or features.shape[1] != self.in_dim:
            raise ValueError(f"head expects B x {self.in_dim} features, got {features.shape}")
        out = T.matmul(self._neck(features), self.w)
        if update_stats:
            for row in features.data:
                self.observe(row)
        return out


@dataclass
class LossReport:
    """Per-step summary: contrastive, classification (with breakdown), total."""

    l_con: float
    l_cls: float
    l_total: float
    head_terms: dict[str, float] = field(default_factory=dict)
    roa_flags: list[bool] = field(default_factory=list)


def classification_loss(
    heads: dict[str, ClassifierHead],
    features: dict[str, Tensor],
    label: int,
    update_stats: bool = False,
) -> tuple[Tensor, dict[str, float]]:
    """Sum of cross-entropy terms, one per (head, feature) pair.

    ``heads`` and ``features`` share keys; every feature is constrained by
    its own head. Returns the summed scalar plus the per-head values.
    """
    if set(heads) != set(features):
        raise ValueError(f"head/feature keys differ: {sorted(heads)} vs {sorted(features)}")
    terms = []
    breakdown = {}
    for key in sorted(heads):
        loss = T.cross_entropy(heads[key].logits(features[key], update_stats=update_stats), label)
        breakdown[key] = loss.item()
        terms.append(loss)
    return T.add_n(terms), breakdown


def total_loss(l_con: Tensor, l_cls: Tensor) -> Tensor:
    """Plain sum of the contrastive and classification terms."""
    return T.add(l_con, l_cls)


# ---------------------------------------------------------------------------
# Batched variants (one recorded graph per training step)
# ---------------------------------------------------------------------------


def info_nce_rows(
    f_q: Tensor,
    bank: MemoryBank,
    positives,
    tau: float,
    weights=None,
) -> Tensor:
    """Per-row InfoNCE: (B x D) features -> (B x 1) weighted losses."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    bank_t = T.Tensor(bank.vectors.astype(f_q.dtype, copy=False))
    logits = T.scale(T.matmul(f_q, T.transpose(bank_t)), 1.0 / tau)
    losses = T.cross_entropy_rows(logits, positives)
    if weights is not None:
        w = np.asarray(weights, dtype=f_q.dtype).reshape(-1, 1)
        losses = T.mul(losses, T.Tensor(w))
    return losses


def classification_loss_batch(
    heads: dict[str, ClassifierHead],
    features: dict[str, Tensor],
    labels,
    update_stats: bool = False,
) -> tuple[Tensor, dict[str, float]]:
    """Batched sum-over-heads cross-entropy: returns (B x 1) plus per-head means."""
    if set(heads) != set(features):
        raise ValueError(f"head/feature keys differ: {sorted(heads)} vs {sorted(features)}")
    terms = []
    breakdown = {}
    for key in sorted(heads):
        rows = T.cross_entropy_rows(
            heads[key].logits_batch(features[key], update_stats=update_stats), labels
        )
        breakdown[key] = float(rows.data.mean())
        terms.append(rows)
    return T.add_n(terms), breakdown
