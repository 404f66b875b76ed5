"""Multi-attention multi-class constraints over a batch of branch features.

A batch holds ``N`` image pairs, one pair per class, and ``P`` features per
image, so ``2NP`` features in total. Features are addressed either by the
triple ``(i, s, p)`` (pair, member 0/1, branch) or by the flat index
``(2 * i + s) * P + p``, which is the row order of ``features.reshape(-1, D)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import tensor as T
from .errors import IndexOutOfRange, NoActiveConstraints, ShapeMismatch
from .tensor import Tensor

FAMILIES = ("sasc", "sadc", "dasc")
GROUPS = ("sasc", "sadc", "dasc", "dadc")


@dataclass
class BatchFeatures:
    features: Tensor      # (N, 2, P, D)
    labels: np.ndarray    # (N,), one class per pair

    def __post_init__(self):
        if self.features.ndim != 4 or self.features.shape[1] != 2:
            raise ShapeMismatch(f"features must be (N, 2, P, D), got {self.features.shape}")
        self.labels = np.asarray(self.labels)
        if self.labels.shape != (self.N,):
            raise ShapeMismatch(f"need {self.N} pair labels, got shape {self.labels.shape}")
        if len(set(self.labels.tolist())) != self.N:
            raise ValueError("pair labels must be pairwise distinct")

    @classmethod
    def from_forward(cls, features: Tensor, labels) -> "BatchFeatures":
        """Wrap ``(2N, P, D)`` forward-pass features plus per-image labels."""
        labels = np.asarray(labels)
        if features.ndim != 3 or features.shape[0] % 2:
            raise ShapeMismatch(f"expected (2N, P, D) features, got {features.shape}")
        n, p, d = features.shape[0] // 2, features.shape[1], features.shape[2]
        pairs = labels.reshape(n, 2)
        if np.any(pairs[:, 0] != pairs[:, 1]):
            raise ValueError("both members of a pair must share a label")
        return cls(T.reshape(features, (n, 2, p, d)), pairs[:, 0])

    @property
    def N(self) -> int:
        return self.features.shape[0]

    @property
    def P(self) -> int:
        return self.features.shape[2]

    @property
    def D(self) -> int:
        return self.features.shape[3]


def flat_index(anchor: tuple[int, int, int], P: int) -> int:
    i, s, p = anchor
    return (2 * i + s) * P + p


def _coords(N: int, P: int) -> tuple[np.ndarray, np.ndarray]:
    """Pair index and branch index of every flat feature slot."""
    idx = np.arange(2 * N * P)
    return idx // (2 * P), idx % P


@dataclass
class AnchorGroups:
    anchor: tuple[int, int, int]
    sasc: list[int]
    sadc: list[int]
    dasc: list[int]
    dadc: list[int]

    def sizes(self) -> tuple[int, int, int, int]:
        return len(self.sasc), len(self.sadc), len(self.dasc), len(self.dadc)


@dataclass
class ConstraintFamily:
    kind: str
    positives: list[int]
    negatives: list[int]

    @property
    def active(self) -> bool:
        return bool(self.positives) and bool(self.negatives)


def partition_indices(N: int, P: int, anchor: tuple[int, int, int]) -> AnchorGroups:
    i, s, p = anchor
    if not (0 <= i < N and s in (0, 1) and 0 <= p < P):
        raise IndexOutOfRange(f"anchor {anchor} outside N={N}, P={P}")
    a = flat_index(anchor, P)
    groups = {g: [] for g in GROUPS}
    for j in range(2 * N * P):
        if j == a:
            continue
        same_class = j // (2 * P) == i
        same_branch = j % P == p
        key = ("sa" if same_branch else "da") + ("sc" if same_class else "dc")
        groups[key].append(j)
    return AnchorGroups(anchor=(i, s, p), **groups)


def partition(batch: BatchFeatures, anchor: tuple[int, int, int]) -> AnchorGroups:
    """Split all non-anchor features into the four same/different attention x class groups."""
    return partition_indices(batch.N, batch.P, anchor)


def build_families(groups: AnchorGroups) -> dict[str, ConstraintFamily]:
    return {
        "sasc": ConstraintFamily("sasc", list(groups.sasc), groups.sadc + groups.dasc + groups.dadc),
        "sadc": ConstraintFamily("sadc", list(groups.sadc), list(groups.dadc)),
        "dasc": ConstraintFamily("dasc", list(groups.dasc), list(groups.dadc)),
    }


def family_masks(N: int, P: int, kind: str) -> tuple[np.ndarray, np.ndarray]:
    """Boolean ``(M, M)`` positive and negative masks, row = anchor, for all anchors at once."""
    if kind not in FAMILIES:
        raise ValueError(f"unknown family {kind!r}")
    cls, br = _coords(N, P)
    same_c = cls[:, None] == cls[None, :]
    same_b = br[:, None] == br[None, :]
    not_self = ~np.eye(2 * N * P, dtype=bool)
    sasc = same_c & same_b & not_self
    sadc = ~same_c & same_b
    dasc = same_c & ~same_b
    dadc = ~same_c & ~same_b
    if kind == "sasc":
        return sasc, sadc | dasc | dadc
    if kind == "sadc":
        return sadc, dadc
    return dasc, dadc


def hinge_triplet(anchor, pos, neg, margin: float = 0.2) -> float:
    """``max(0, |a - pos|^2 - |a - neg|^2 + margin)``; a test oracle, not a training loss."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    a, fp, fn = (np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
                 for v in (anchor, pos, neg))
    return max(0.0, float(np.sum((a - fp) ** 2) - np.sum((a - fn) ** 2) + margin))


def npair_anchor_loss(anchor: Tensor, positives: Tensor, negatives: Tensor) -> Tensor:
    """``sum_{f+} log(1 + sum_{f-} exp(a.f- - a.f+))`` for one anchor.

    ``anchor`` is ``(D,)``; ``positives`` and ``negatives`` are ``(Q, D)`` and ``(M, D)``.
    """
    if positives.ndim != 2 or negatives.ndim != 2 or anchor.ndim != 1:
        raise ShapeMismatch("expected anchor (D,), positives (Q, D), negatives (M, D)")
    a = T.reshape(anchor, (anchor.shape[0], 1))
    s_pos = T.matmul(positives, a)                       # (Q, 1)
    s_neg = T.reshape(T.matmul(negatives, a), (1, negatives.shape[0]))
    gaps = T.subtract(s_neg, s_pos)                      # (Q, M)
    return T.reduce_sum(T.log1p_sum_exp(gaps, np.ones(gaps.shape, dtype=bool), axis=1))


def _flat_features(batch: BatchFeatures, normalize: bool) -> Tensor:
    flat = T.reshape(batch.features, (2 * batch.N * batch.P, batch.D))
    return T.l2_normalize(flat, axis=1) if normalize else flat


def npair_loss(batch: BatchFeatures, family_kind: str, normalize: bool = False) -> Tensor:
    """N-pair loss of one constraint family, every feature taking a turn as anchor.

    For each anchor ``a`` and positive ``f+`` the term is
    ``log(1 + sum_{f-} exp(a.f- - a.f+))``; the terms are summed and divided by ``N``.
    Raises :class:`NoActiveConstraints` when no anchor has both a positive and a negative.
    """
    pos, neg = family_masks(batch.N, batch.P, family_kind)
    active = pos.any(axis=1) & neg.any(axis=1)
    if not active.any():
        raise NoActiveConstraints(f"family {family_kind} is empty for N={batch.N}, P={batch.P}")
    F = _flat_features(batch, normalize)
    m = F.shape[0]
    gram = T.matmul(F, T.transpose(F))
    # gaps[a, q, n] = a.f_n - a.f_q
    gaps = T.subtract(T.reshape(gram, (m, 1, m)), T.reshape(gram, (m, m, 1)))
    terms = T.log1p_sum_exp(gaps, neg[:, None, :], axis=2)
    weight = (pos & active[:, None]).astype(np.float64)
    return T.scalar_multiply(T.reduce_sum(T.elementwise_multiply(terms, Tensor(weight))), 1.0 / batch.N)


@dataclass
class LossParts:
    total: float
    softmax: float
    sasc: float
    sadc: float
    dasc: float

    def as_dict(self) -> dict[str, float]:
        return {"total": self.total, "softmax": self.softmax,
                "sasc": self.sasc, "sadc": self.sadc, "dasc": self.dasc}


def mamc_loss(batch: BatchFeatures, logits: Tensor, labels, lam: float,
              normalize: bool = False) -> tuple[Tensor, LossParts]:
    """Softmax loss plus ``lam`` times the three N-pair family losses.

    Inactive families contribute zero. With ``lam == 0`` the returned total is
    the softmax loss tensor itself, so its gradient is untouched by the metric terms.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    softmax = T.softmax_cross_entropy(logits, labels)
    if lam == 0:
        feats = BatchFeatures(batch.features.detach(), batch.labels)
    else:
        feats = batch
    terms: dict[str, Tensor | None] = {}
    for kind in FAMILIES:
        try:
            terms[kind] = npair_loss(feats, kind, normalize)
        except NoActiveConstraints:
            terms[kind] = None

    total = softmax
    if lam != 0:
        live = [t for t in terms.values() if t is not None]
        if live:
            metric = live[0]
            for t in live[1:]:
                metric = T.add(metric, t)
            total = T.add(softmax, T.scalar_multiply(metric, lam))
    parts = LossParts(
        total=total.item(),
        softmax=softmax.item(),
        **{k: (0.0 if t is None else t.item()) for k, t in terms.items()},
    )
    return total, parts


def count_constraints(N: int, P: int) -> int:
    """Closed-form number of (positive, negative) pairs over the three families, per anchor."""
    if N < 1 or P < 1:
        raise ValueError("N and P must be >= 1")
    return 2 * (P * N - 1) + 4 * (N - 1) ** 2 * (P - 1) + 4 * (N - 1) * (P - 1) ** 2


def enumerate_constraints(N: int, P: int, anchor: tuple[int, int, int] = (0, 0, 0)) -> int:
    """Brute-force count of (positive, negative) pairs for one anchor."""
    families = build_families(partition_indices(N, P, anchor))
    return sum(1 for fam in families.values() for _ in fam.positives for _ in fam.negatives)


def all_anchors(N: int, P: int) -> Iterable[tuple[int, int, int]]:
    for i in range(N):
        for s in (0, 1):
            for p in range(P):
                yield i, s, p
