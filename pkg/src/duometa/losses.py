"""Segmentation losses and tissue-embedding regularizers.

Two families live here. The per-scale segmentation losses (soft Dice and
cross entropy under deep supervision) train the network to match label
maps. The tissue-representation terms operate on per-class feature means
pulled from the encoder pyramid: an inter-tissue term that penalizes
cosine similarity between different tissue embeddings within a batch, and
an intra-tissue term that rewards similarity of the same tissue across
two datasets. All of them return scalar tensors on the caller's tape and
are differentiable end to end.

Label maps use integer classes 0..C-1 with 0 = background. The three
foreground tissues (CSF=1, GM=2, WM=3) are the ones compared by the
embedding losses; background participates only in Dice/CE.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .tensorcore import (
    Tensor,
    add,
    add_const,
    constant,
    div,
    exp,
    expand,
    log,
    masked_mean,
    mul,
    neg,
    power,
    reduce_mean,
    reduce_sum,
    scale,
    sub,
)
from .segnet import FeaturePyramid

DICE_EPS = 1e-5
COSINE_GUARD = 1e-8
# keeps sqrt differentiable at the zero vector without moving any nonzero norm
NORM_FLOOR = 1e-30

CSF, GM, WM = 1, 2, 3
TISSUE_CLASSES = (CSF, GM, WM)
TISSUE_NAMES = {CSF: "csf", GM: "gm", WM: "wm"}

_INTRA_MODES = ("batchmean", "paired")


@dataclass(frozen=True)
class LossWeights:
    """Weights of the combined objective.

    ``deep_supervision`` is ordered finest scale first; entry i weights the
    loss at scale k = i + 1.
    """

    inter_weight: float = 0.1
    intra_weight: float = 0.001
    deep_supervision: tuple = (1.0, 0.5, 0.25)
    intra_mode: str = "batchmean"

    def __post_init__(self):
        if self.inter_weight < 0 or self.intra_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if not self.deep_supervision or any(w < 0 for w in self.deep_supervision):
            raise ValueError("deep_supervision weights must be nonempty and >= 0")
        if sum(self.deep_supervision) <= 0:
            raise ValueError("deep_supervision weights must not all be zero")
        if self.intra_mode not in _INTRA_MODES:
            raise ValueError(f"intra_mode must be one of {_INTRA_MODES}")

    @classmethod
    def for_scales(cls, num_scales: int, **kw) -> "LossWeights":
        """Default halving schedule, finest scale weighted 1."""
        kw.setdefault("deep_supervision", tuple(0.5 ** i for i in range(num_scales)))
        return cls(**kw)


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    lab = np.asarray(labels)
    if lab.ndim != 3:
        raise ValueError(f"labels must be B x H x W, got shape {lab.shape}")
    if not np.all(lab == np.floor(lab)):
        raise ValueError("labels must be integer class indices")
    if lab.min() < 0 or lab.max() >= num_classes:
        raise ValueError(
            f"label values must lie in [0, {num_classes}), got "
            f"[{lab.min()}, {lab.max()}]")
    return lab.astype(np.int64)


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    B, H, W = labels.shape
    y = np.zeros((B, num_classes, H, W), dtype=np.float64)
    b, h, w = np.indices((B, H, W))
    y[b, labels, h, w] = 1.0
    return y


def log_softmax(logits: Tensor, axis: int = 1) -> Tensor:
    """Shift-stabilized log softmax along ``axis``.

    The per-position max is subtracted as a constant. Softmax is invariant
    to that shift, so the gradient is exact even though the constant is
    not tracked on the tape.
    """
    m = np.max(logits.data, axis=axis, keepdims=True)
    shifted = sub(logits, constant(np.ascontiguousarray(np.broadcast_to(m, logits.shape))))
    total = reduce_sum(exp(shifted), axes=(axis,), keepdims=True)
    return sub(shifted, expand(log(total), logits.shape))


def softmax(logits: Tensor, axis: int = 1) -> Tensor:
    return exp(log_softmax(logits, axis))


def ce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over all voxels of -log softmax at the true class."""
    B, C, H, W = logits.shape
    lab = _check_labels(labels, C)
    if lab.shape != (B, H, W):
        raise ValueError(f"labels {lab.shape} do not match logits {logits.shape}")
    picked = reduce_sum(mul(log_softmax(logits), constant(_one_hot(lab, C))), axes=(1,))
    return neg(reduce_mean(picked))


def dice_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Soft Dice loss over softmax probabilities, background included.

    Per class c the score is (2 sum(p_c y_c) + eps) / (sum p_c + sum y_c + eps)
    with sums over batch and space; the loss is 1 minus the class mean.
    """
    B, C, H, W = logits.shape
    lab = _check_labels(labels, C)
    if lab.shape != (B, H, W):
        raise ValueError(f"labels {lab.shape} do not match logits {logits.shape}")
    p = softmax(logits)
    y = _one_hot(lab, C)
    overlap = reduce_sum(mul(p, constant(y)), axes=(0, 2, 3))      # [C]
    denom = add(reduce_sum(p, axes=(0, 2, 3)), constant(y.sum(axis=(0, 2, 3))))
    score = div(add_const(scale(overlap, 2.0), DICE_EPS), add_const(denom, DICE_EPS))
    return add_const(neg(reduce_mean(score)), 1.0)


def downsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor label downsampling by block-corner sampling."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    lab = np.asarray(labels)
    if lab.shape[-1] % factor or lab.shape[-2] % factor:
        raise ValueError(f"extent {lab.shape[-2:]} not divisible by {factor}")
    return np.ascontiguousarray(lab[..., ::factor, ::factor])


def seg_loss(multi_logits, labels: np.ndarray, weights: LossWeights) -> Tensor:
    """Deep-supervised segmentation loss.

    ``multi_logits`` is ordered as the decoder emits it (coarsest first,
    finest last); ``weights.deep_supervision`` is finest first. Each scale
    contributes w_k * (dice + ce) against nearest-downsampled labels and
    the total is normalized by the weight sum.
    """
    K = len(multi_logits)
    ws = weights.deep_supervision
    if len(ws) != K:
        raise ValueError(f"{K} scales but {len(ws)} supervision weights")
    total = None
    for k in range(1, K + 1):
        w = float(ws[k - 1])
        if w == 0.0:
            continue
        logits_k = multi_logits[K - k]
        lab_k = downsample_labels(labels, 2 ** (k - 1))
        if logits_k.shape[2:] != lab_k.shape[1:]:
            raise ValueError(
                f"scale {k}: logits {logits_k.shape} vs labels {lab_k.shape}")
        term = scale(add(dice_loss(logits_k, lab_k), ce_loss(logits_k, lab_k)), w)
        total = term if total is None else add(total, term)
    return scale(total, 1.0 / float(sum(ws)))


@dataclass
class TissueReps:
    """Per-scale, per-tissue feature means of one mini-batch.

    ``rep(k, c)`` is a B x NC_k tensor of masked feature means; entries of
    batch elements lacking class c at scale k are zero and flagged invalid
    in ``validity(k, c)``.
    """

    reps: dict = field(default_factory=dict)       # (k, c) -> Tensor[B x NC_k]
    valid: dict = field(default_factory=dict)      # (k, c) -> bool[B]
    num_scales: int = 0
    batch: int = 0

    def rep(self, k: int, c: int) -> Tensor:
        return self.reps[(k, c)]

    def validity(self, k: int, c: int) -> np.ndarray:
        return self.valid[(k, c)]


def tissue_representations(pyramid: FeaturePyramid, labels: np.ndarray) -> TissueReps:
    """Average encoder features over each foreground tissue's voxels.

    Labels arrive at the finest resolution and are nearest-downsampled to
    each scale before masking. Background voxels never contribute.
    """
    lab = np.asarray(labels)
    K = len(pyramid.features)
    out = TissueReps(num_scales=K, batch=int(pyramid.scale(1).shape[0]))
    for k in range(1, K + 1):
        feats = pyramid.scale(k)
        lab_k = downsample_labels(lab, 2 ** (k - 1))
        if lab_k.shape != (feats.shape[0],) + feats.shape[2:]:
            raise ValueError(
                f"scale {k}: labels {lab_k.shape} do not match features {feats.shape}")
        for c in TISSUE_CLASSES:
            rep, ok = masked_mean(feats, (lab_k == c).astype(np.float64))
            out.reps[(k, c)] = rep
            out.valid[(k, c)] = ok
    return out


def cosine_similarity(u: Tensor, v: Tensor, valid: np.ndarray | None = None) -> Tensor:
    """Mean cosine similarity over valid batch rows.

    Row norms use sqrt(sum sq + tiny) so a zero vector yields similarity 0
    with a finite gradient; the product of norms carries a small additive
    guard. Rows where ``valid`` is False are dropped from the mean; if no
    row is valid the result is a constant 0 and a warning is emitted.
    """
    if u.shape != v.shape or u.ndim != 2:
        raise ValueError(f"expected matching B x C inputs, got {u.shape} and {v.shape}")
    B = u.shape[0]
    ok = np.ones(B, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if ok.shape != (B,):
        raise ValueError(f"validity mask shape {ok.shape} does not match batch {B}")
    count = int(ok.sum())
    if count == 0:
        warnings.warn("cosine_similarity: no valid pairs, contributing 0", RuntimeWarning)
        return constant(0.0)
    dot = reduce_sum(mul(u, v), axes=(1,))
    nu = power(add_const(reduce_sum(mul(u, u), axes=(1,)), NORM_FLOOR), 0.5)
    nv = power(add_const(reduce_sum(mul(v, v), axes=(1,)), NORM_FLOOR), 0.5)
    sims = div(dot, add_const(mul(nu, nv), COSINE_GUARD))
    return scale(reduce_sum(mul(sims, constant(ok.astype(np.float64)))), 1.0 / count)


def _batch_mean_rep(u: Tensor, valid: np.ndarray) -> tuple[Tensor, bool]:
    """Masked average over the batch axis; returns a 1 x C tensor."""
    count = int(valid.sum())
    C = u.shape[1]
    if count == 0:
        return constant(np.zeros((1, C))), False
    w = np.ascontiguousarray(
        np.broadcast_to((valid.astype(np.float64) / count)[:, None], u.shape))
    return reduce_sum(mul(u, constant(w)), axes=(0,), keepdims=True), True


def inter_tissue_loss(reps: TissueReps) -> Tensor:
    """Mean pairwise cosine similarity between different tissue embeddings.

    Averages the three class pairs over every scale; minimizing it pushes
    the tissue embeddings of one batch toward mutual orthogonality.
    """
    pairs = ((CSF, GM), (CSF, WM), (GM, WM))
    total = None
    for k in range(1, reps.num_scales + 1):
        for ca, cb in pairs:
            both = reps.validity(k, ca) & reps.validity(k, cb)
            term = cosine_similarity(reps.rep(k, ca), reps.rep(k, cb), both)
            total = term if total is None else add(total, term)
    return scale(total, 1.0 / (3.0 * reps.num_scales))


def intra_tissue_loss(reps_a: TissueReps, reps_b: TissueReps,
                      mode: str = "batchmean") -> Tensor:
    """Negated cross-dataset same-tissue cosine similarity.

    ``batchmean`` first averages each side's reps over valid batch
    elements, removing the arbitrary pairing between unrelated subjects;
    ``paired`` compares element i of one batch with element i of the
    other. Minimizing pulls matching tissues from the two datasets
    together.
    """
    if mode not in _INTRA_MODES:
        raise ValueError(f"intra mode must be one of {_INTRA_MODES}")
    if reps_a.num_scales != reps_b.num_scales:
        raise ValueError("tissue reps cover different scale counts")
    if reps_a.batch != reps_b.batch:
        raise ValueError(
            f"mini-batch sizes differ: {reps_a.batch} vs {reps_b.batch}")
    total = None
    for k in range(1, reps_a.num_scales + 1):
        for c in TISSUE_CLASSES:
            u, v = reps_a.rep(k, c), reps_b.rep(k, c)
            if mode == "batchmean":
                mu, ok_u = _batch_mean_rep(u, reps_a.validity(k, c))
                mv, ok_v = _batch_mean_rep(v, reps_b.validity(k, c))
                term = cosine_similarity(mu, mv, np.array([ok_u and ok_v]))
            else:
                term = cosine_similarity(u, v, reps_a.validity(k, c) & reps_b.validity(k, c))
            total = term if total is None else add(total, term)
    return neg(scale(total, 1.0 / (3.0 * reps_a.num_scales)))


def outer_loss(multi_logits_pair, labels_pair, reps_pair, weights: LossWeights) -> Tensor:
    """Combined objective over the two held-out datasets of one episode.

    Mean segmentation loss of the pair, plus the inter-tissue term
    averaged over the pair, plus the cross-dataset intra-tissue term,
    weighted by ``weights``.
    """
    if not (len(multi_logits_pair) == len(labels_pair) == len(reps_pair) == 2):
        raise ValueError("outer loss expects exactly two datasets")
    seg = scale(add(seg_loss(multi_logits_pair[0], labels_pair[0], weights),
                    seg_loss(multi_logits_pair[1], labels_pair[1], weights)), 0.5)
    inter = scale(add(inter_tissue_loss(reps_pair[0]),
                      inter_tissue_loss(reps_pair[1])), 0.5)
    intra = intra_tissue_loss(reps_pair[0], reps_pair[1], weights.intra_mode)
    return add(add(seg, scale(inter, weights.inter_weight)),
               scale(intra, weights.intra_weight))
