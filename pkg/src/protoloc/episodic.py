"""Class representations, the nearest-representation classifier, and the
episode losses with exact gradients through the whole episode graph.

Logits are negated squared Euclidean distances divided by a temperature;
the base loss is mean cross-entropy against prototype logits, the RoI loss
is the same form against refined representations, and the combined loss
adds them with a balancing weight. Gradients flow through query
embeddings, support embeddings (via the prototype mean) and, in refined
mode, through the RoIAlign sampling weights; proposed box coordinates are
treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from . import kernels, roi
from .kernels import ShapeError
from .localization import propose_box


class EmptyClass(ValueError):
    """A class was given no support embeddings."""


class NonPositiveTemperature(ValueError):
    pass


class NegativeLambda(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 64.0
    lambda_roi: float = 1.0   # 1-shot convention; 0.5 is the 5-shot default

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise NonPositiveTemperature(f"temperature must be > 0, got {self.temperature}")
        if self.lambda_roi < 0.0:
            raise NegativeLambda(f"lambda_roi must be >= 0, got {self.lambda_roi}")


@dataclass
class ClassRepresentation:
    class_index: int
    vector: np.ndarray
    kind: str = "prototype"   # or "refined"

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1:
            raise ShapeError(f"representation must be a vector, got shape {self.vector.shape}")
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("representation vector contains non-finite values")


@dataclass
class Episode:
    """One N-way K-shot task. Support items are stored grouped by class
    label (class c occupies rows c*K .. (c+1)*K-1)."""
    n_way: int
    k_shot: int
    support_images: np.ndarray   # (N*K, H, W, 3)
    support_labels: np.ndarray   # (N*K,)
    support_boxes: np.ndarray    # (N*K, 4) ground-truth boxes
    query_images: np.ndarray     # (N*Q, H, W, 3)
    query_labels: np.ndarray     # (N*Q,)
    query_boxes: np.ndarray      # (N*Q, 4)
    split: str = ""

    def __post_init__(self):
        n, k = self.n_way, self.k_shot
        self.support_labels = np.asarray(self.support_labels, dtype=np.int64)
        self.query_labels = np.asarray(self.query_labels, dtype=np.int64)
        if self.support_labels.shape != (n * k,):
            raise ShapeError(f"expected {n * k} support labels, got {self.support_labels.shape}")
        expected = np.repeat(np.arange(n), k)
        if not np.array_equal(self.support_labels, expected):
            raise ValueError("support items must be grouped by class label 0..N-1")
        nq = self.query_labels.size
        if nq == 0 or nq % n:
            raise ValueError(f"query count {nq} is not a positive multiple of {n}")
        counts = np.bincount(self.query_labels, minlength=n)
        if not np.all(counts == nq // n):
            raise ValueError("queries must be balanced across classes")

    @property
    def queries_per_class(self) -> int:
        return self.query_labels.size // self.n_way


def compute_prototypes(embeddings_by_class, support_ids_by_class=None):
    """Mean support embedding per class, in class-index order.

    When support ids are given, each class's embeddings are summed in
    ascending id order, making the result bit-identical under permutations
    of the support list.
    """
    reps = []
    for c, embs in enumerate(embeddings_by_class):
        embs = np.asarray(embs, dtype=np.float64)
        if embs.ndim != 2 or embs.shape[0] == 0:
            raise EmptyClass(f"class {c} has no support embeddings")
        if support_ids_by_class is not None:
            order = np.argsort(np.asarray(support_ids_by_class[c]), kind="stable")
            embs = embs[order]
        reps.append(ClassRepresentation(c, embs.mean(axis=0), kind="prototype"))
    return reps


def classify(query_embedding: np.ndarray, reps) -> int:
    """Index of the nearest representation in squared Euclidean distance.

    Ties break toward the lowest class index.
    """
    e = np.asarray(query_embedding, dtype=np.float64)
    if not reps:
        raise ShapeError("need at least one representation")
    best = None
    for r in reps:
        if r.vector.shape != e.shape:
            raise ShapeError(f"representation dim {r.vector.shape} != query dim {e.shape}")
        diff = e - r.vector
        key = (float(diff @ diff), r.class_index)
        if best is None or key < best:
            best = key
    return best[1]


def logits(query_embedding: np.ndarray, reps, temperature: float) -> np.ndarray:
    """Per-representation logit: -||e - rep_k||^2 / T, in the order of reps."""
    if temperature <= 0.0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {temperature}")
    e = np.asarray(query_embedding, dtype=np.float64)
    out = np.empty(len(reps))
    for i, r in enumerate(reps):
        if r.vector.shape != e.shape:
            raise ShapeError(f"representation dim {r.vector.shape} != query dim {e.shape}")
        diff = e - r.vector
        out[i] = -(diff @ diff) / temperature
    return out


def softmax(logit_vec: np.ndarray) -> np.ndarray:
    logit_vec = np.asarray(logit_vec, dtype=np.float64)
    shifted = logit_vec - logit_vec.max()
    ex = np.exp(shifted)
    return ex / ex.sum()


def cross_entropy_from_logits(logit_vec: np.ndarray, true_class: int) -> float:
    """-log softmax(logits)[true_class], computed stably."""
    logit_vec = np.asarray(logit_vec, dtype=np.float64)
    if not 0 <= true_class < logit_vec.size:
        raise IndexError(f"class {true_class} out of range for {logit_vec.size} logits")
    m = logit_vec.max()
    lse = m + np.log(np.exp(logit_vec - m).sum())
    return float(lse - logit_vec[true_class])


def _rep_matrix(reps) -> np.ndarray:
    for k, r in enumerate(reps):
        if r.class_index != k:
            raise ValueError("representations must be ordered by class index 0..N-1")
    return np.stack([r.vector for r in reps])


def _nn_loss_grad(embeds, labels, rep_mat, temperature):
    """Mean cross-entropy of distance logits; returns (loss, d/d embeds, d/d reps)."""
    q = embeds.shape[0]
    diff = embeds[:, None, :] - rep_mat[None, :, :]      # (Q, N, D)
    d2 = (diff * diff).sum(axis=2)
    logit = -d2 / temperature
    m = logit.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(logit - m).sum(axis=1, keepdims=True))
    rows = np.arange(q)
    loss = float((lse[:, 0] - logit[rows, labels]).mean())
    dlogit = np.exp(logit - lse)
    dlogit[rows, labels] -= 1.0
    dlogit /= q
    dd2 = -dlogit / temperature                          # dL/d d2, (Q, N)
    dembeds = (dd2[:, :, None] * 2.0 * diff).sum(axis=1)
    dreps = -(dd2[:, :, None] * 2.0 * diff).sum(axis=0)
    return loss, dembeds, dreps


def loss_base(query_embeddings, query_labels, prototypes, temperature: float) -> float:
    """Mean per-query cross-entropy against prototype logits."""
    if temperature <= 0.0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {temperature}")
    embeds = np.asarray(query_embeddings, dtype=np.float64)
    labels = np.asarray(query_labels, dtype=np.int64)
    loss, _, _ = _nn_loss_grad(embeds, labels, _rep_matrix(prototypes), temperature)
    return loss


def loss_roi(query_embeddings, query_labels, refined_reps, temperature: float) -> float:
    """Same functional form as loss_base with refined representations substituted."""
    if temperature <= 0.0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {temperature}")
    embeds = np.asarray(query_embeddings, dtype=np.float64)
    labels = np.asarray(query_labels, dtype=np.int64)
    loss, _, _ = _nn_loss_grad(embeds, labels, _rep_matrix(refined_reps), temperature)
    return loss


def loss_ours(base: float, roi_term: float, lambda_roi: float) -> float:
    """base + lambda_roi * roi_term."""
    if lambda_roi < 0.0:
        raise NegativeLambda(f"lambda_roi must be >= 0, got {lambda_roi}")
    return base + lambda_roi * roi_term


def episode_loss_and_gradient(params: enc.EncoderParams, episode: Episode,
                              reps_mode: str, loss_cfg: LossConfig, *,
                              tau: float = 0.5,
                              roi_cfg: roi.RoiConfig = roi.RoiConfig(),
                              connectivity: int = 4,
                              frozen_boxes=None):
    """Loss value and its exact parameter gradient for one episode.

    reps_mode "prototype" optimizes the base loss; "refined" optimizes the
    combined loss, proposing boxes at threshold tau (or using frozen_boxes)
    and building refined representations from RoI features. Box
    coordinates are stop-gradient: only the bilinear sampling weights
    carry gradient into the feature maps.
    """
    if reps_mode not in ("prototype", "refined"):
        raise ValueError(f"unknown reps_mode {reps_mode!r}")
    arch = params.arch
    n, k = episode.n_way, episode.k_shot
    ns = n * k
    image_hw = (arch.input_size, arch.input_size)

    images = np.concatenate([episode.support_images, episode.query_images], axis=0)
    fms, cache = enc.forward_batch(params, images)
    _, h, w, d = fms.shape
    s_fms = fms[:ns]
    s_emb = kernels.global_avg_pool_batch(s_fms)
    q_emb = kernels.global_avg_pool_batch(fms[ns:])

    protos = s_emb.reshape(n, k, d).mean(axis=1)
    loss_b, dq, dproto = _nn_loss_grad(q_emb, episode.query_labels, protos,
                                       loss_cfg.temperature)
    loss = loss_b
    ds_emb = np.repeat(dproto / k, k, axis=0)            # (N*K, D)
    grad_fms = np.empty_like(fms)
    grad_fms[:ns] = kernels.gap_vjp_batch(s_fms.shape, ds_emb)

    if reps_mode == "refined" and loss_cfg.lambda_roi != 0.0:
        lam = loss_cfg.lambda_roi
        if frozen_boxes is None:
            boxes = [propose_box(s_fms[i], protos[episode.support_labels[i]],
                                 tau, *image_hw, connectivity)
                     for i in range(ns)]
        else:
            boxes = list(frozen_boxes)
        feats = np.stack([roi.roi_feature(s_fms[i], boxes[i], image_hw, roi_cfg)
                          for i in range(ns)])
        refined = feats.reshape(n, k, d).mean(axis=1)
        loss_r, dq_r, dref = _nn_loss_grad(q_emb, episode.query_labels, refined,
                                           loss_cfg.temperature)
        loss = loss_b + lam * loss_r
        dq = dq + lam * dq_r
        for i in range(ns):
            dfeat = lam * dref[episode.support_labels[i]] / k
            grad_fms[i] += roi.roi_feature_vjp(s_fms[i], boxes[i], image_hw,
                                               roi_cfg, dfeat)

    grad_fms[ns:] = kernels.gap_vjp_batch(fms[ns:].shape, dq)
    grad_flat = enc.backward_batch(params, cache, grad_fms)
    return loss, grad_flat


def episode_gradient(params: enc.EncoderParams, episode: Episode, reps_mode: str,
                     loss_cfg: LossConfig, **kwargs) -> np.ndarray:
    """Gradient of the selected episode loss with respect to the flat parameters."""
    return episode_loss_and_gradient(params, episode, reps_mode, loss_cfg, **kwargs)[1]


def episode_loss(params: enc.EncoderParams, episode: Episode, reps_mode: str,
                 loss_cfg: LossConfig, *, tau: float = 0.5,
                 roi_cfg: roi.RoiConfig = roi.RoiConfig(),
                 connectivity: int = 4, frozen_boxes=None) -> float:
    """Loss value only (no backward pass); used by finite-difference checks."""
    if reps_mode not in ("prototype", "refined"):
        raise ValueError(f"unknown reps_mode {reps_mode!r}")
    arch = params.arch
    n, k = episode.n_way, episode.k_shot
    ns = n * k
    image_hw = (arch.input_size, arch.input_size)

    images = np.concatenate([episode.support_images, episode.query_images], axis=0)
    fms, _ = enc.forward_batch(params, images, keep_cache=False)
    d = fms.shape[3]
    s_emb = kernels.global_avg_pool_batch(fms[:ns])
    q_emb = kernels.global_avg_pool_batch(fms[ns:])
    protos = s_emb.reshape(n, k, d).mean(axis=1)
    loss_b, _, _ = _nn_loss_grad(q_emb, episode.query_labels, protos,
                                 loss_cfg.temperature)
    if reps_mode != "refined" or loss_cfg.lambda_roi == 0.0:
        return loss_b

    if frozen_boxes is None:
        boxes = [propose_box(fms[i], protos[episode.support_labels[i]],
                             tau, *image_hw, connectivity) for i in range(ns)]
    else:
        boxes = list(frozen_boxes)
    feats = np.stack([roi.roi_feature(fms[i], boxes[i], image_hw, roi_cfg)
                      for i in range(ns)])
    refined = feats.reshape(n, k, d).mean(axis=1)
    loss_r, _, _ = _nn_loss_grad(q_emb, episode.query_labels, refined,
                                 loss_cfg.temperature)
    return loss_b + loss_cfg.lambda_roi * loss_r
