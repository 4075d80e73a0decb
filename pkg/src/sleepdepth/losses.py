"""Pairwise margin ranking loss over sleep stages, REM cross-entropy, and
the combined training objective.

Stage codes: 0=W, 1=N1, 2=N2, 3=N3, 4=REM. Deeper stages must be scored
higher than shallower ones by at least the stage-pair margin; REM-vs-NREM
pairs are treated as uncertain and masked out of the ranking loss.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

logger = logging.getLogger(__name__)

STAGES = (0, 1, 2, 3, 4)
UNCERTAIN = "uncertain"
EXCLUDED = "excluded"

#: REM-vs-NREM stage pairs whose ordinal relation is left unresolved.
UNCERTAIN_PAIRS = frozenset({(1, 4), (4, 1), (2, 4), (4, 2), (3, 4), (4, 3)})

# adjacent-stage margins; REM is comparable only with W
_BASE_MARGINS = {
    (0, 1): 1.0,
    (1, 2): 0.5,
    (2, 3): 1.5,
    (0, 4): 1.2,
}
# margins for non-adjacent W/NREM pairs composed along the W-N1-N2-N3 chain
_CHAIN_MARGINS = {
    (0, 2): 1.5,
    (0, 3): 3.0,
    (1, 3): 2.0,
}


@dataclass(frozen=True)
class MarginTable:
    """Stage-pair margins, symmetric under swap.

    composition_policy "chain_sum" fills the non-adjacent W/NREM pairs with
    sums of adjacent margins; "strict" keeps only the four base entries and
    excludes the rest.
    """

    composition_policy: str = "chain_sum"

    def __post_init__(self):
        if self.composition_policy not in ("chain_sum", "strict"):
            raise ValueError(f"unknown composition policy {self.composition_policy!r}")

    def entries(self) -> dict[tuple[int, int], float]:
        out = {}
        table = dict(_BASE_MARGINS)
        if self.composition_policy == "chain_sum":
            table.update(_CHAIN_MARGINS)
        for (i, j), v in table.items():
            out[(i, j)] = v
            out[(j, i)] = v
        return out

    def lookup(self, y_i: int, y_j: int):
        """Margin for an ordered stage pair, or UNCERTAIN / EXCLUDED."""
        if y_i not in STAGES or y_j not in STAGES:
            raise ValueError(f"invalid stage code in pair ({y_i}, {y_j})")
        if (y_i, y_j) in UNCERTAIN_PAIRS:
            return UNCERTAIN
        if y_i == y_j:
            return EXCLUDED
        return self.entries().get((y_i, y_j), EXCLUDED)


def pair_margin(y_i: int, y_j: int, table: MarginTable | None = None):
    table = table or MarginTable()
    return table.lookup(int(y_i), int(y_j))


def pair_penalty(p_i: float, p_j: float, y_i: int, y_j: int, table: MarginTable | None = None) -> float:
    """Hinge penalty max(0, V - sgn(y_i - y_j) * (p_i - p_j)) for one pair."""
    v = pair_margin(y_i, y_j, table)
    if not isinstance(v, float):
        raise ValueError(f"pair ({y_i}, {y_j}) has no margin: {v}")
    sgn = float(np.sign(y_i - y_j))
    return max(0.0, v - sgn * (p_i - p_j))


def _pair_matrices(y: np.ndarray, table: MarginTable) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(margin V, sign, unordered-pair mask) matrices for a label batch."""
    n = len(y)
    V = np.zeros((n, n))
    S = np.zeros((n, n))
    mask = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            v = table.lookup(int(y[i]), int(y[j]))
            if isinstance(v, float):
                V[i, j] = v
                S[i, j] = np.sign(int(y[i]) - int(y[j]))
                mask[i, j] = 1.0
    return V, S, mask


def rank_loss(p, y, table: MarginTable | None = None) -> tuple[ad.Tensor, int]:
    """Mean hinge penalty over all stage pairs with a defined margin.

    Returns (loss, n_pairs). By swap symmetry the unordered-pair mean equals
    the ordered-pair mean, so pairs are iterated once. An all-masked batch
    yields a constant zero loss with a logged warning.
    """
    table = table or MarginTable()
    p = p if isinstance(p, ad.Tensor) else ad.Tensor(np.asarray(p, dtype=np.float64))
    y = np.asarray(y, dtype=int)
    n = p.size
    if n != len(y):
        raise ValueError("predictions and labels differ in length")
    if n < 2:
        raise ValueError("rank loss needs a batch of at least 2 samples")
    V, S, mask = _pair_matrices(y, table)
    n_pairs = int(mask.sum())
    if n_pairs == 0:
        logger.warning("rank_loss: no comparable stage pairs in batch; contributing 0")
        return ad.Tensor(0.0), 0
    col = ad.reshape(p, (n, 1))
    row = ad.reshape(p, (1, n))
    diff = ad.add(col, ad.scale(row, -1.0))  # diff[i, j] = p_i - p_j
    penalty = ad.relu(ad.add(ad.Tensor(V), ad.mul(ad.Tensor(-S), diff)))
    masked = ad.mul(penalty, ad.Tensor(mask))
    loss = ad.scale(ad.tsum(masked), 1.0 / n_pairs)
    # correctly-rounded sum so the value matches a scalar double loop exactly
    loss.data = np.asarray(math.fsum(masked.data[mask > 0]) / n_pairs)
    return loss, n_pairs


def rem_cross_entropy(logits, is_rem) -> ad.Tensor:
    """Softmax cross-entropy of the 2-way REM head, averaged over the batch."""
    logits = logits if isinstance(logits, ad.Tensor) else ad.Tensor(np.asarray(logits, dtype=np.float64))
    is_rem = np.asarray(is_rem, dtype=int)
    n = len(is_rem)
    if n == 0 or logits.shape != (n, 2):
        raise ValueError(f"expected logits of shape ({n}, 2), got {logits.shape}")
    onehot = np.zeros((n, 2))
    onehot[np.arange(n), is_rem] = 1.0
    probs = ad.softmax(logits, axis=-1)
    true_prob = ad.tsum(ad.mul(probs, ad.Tensor(onehot)), axis=-1)
    return ad.scale(ad.tmean(ad.log(true_prob)), -1.0)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0  # weight on the REM classification term
    margin_table: MarginTable = field(default_factory=MarginTable)

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")


def combined_loss(p, y, logits, is_rem, cfg: LossConfig | None = None
                  ) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor, int]:
    """Total = rank + alpha * classification. Returns (total, rank, clas, n_pairs)."""
    cfg = cfg or LossConfig()
    rank, n_pairs = rank_loss(p, y, cfg.margin_table)
    clas = rem_cross_entropy(logits, is_rem)
    total = ad.add(rank, ad.scale(clas, cfg.alpha))
    return total, rank, clas, n_pairs
