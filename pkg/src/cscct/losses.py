"""Cross-space clustering, controlled transfer and the base classification losses."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from cscct import autodiff as ad
from cscct.autodiff import Tensor


class LossError(ValueError):
    pass


class NonFiniteLossError(LossError):
    """A loss term evaluated to NaN or infinity."""

    def __init__(self, term: str, detail: str = ""):
        self.term = term
        super().__init__(f"non-finite value in loss term {term!r}" + (f": {detail}" if detail else ""))


class DegenerateBatchWarning(RuntimeWarning):
    """A batch cannot support a loss term; the term contributes zero."""


@dataclass
class BatchView:
    """Features of one mini-batch in both spaces.

    ``current_features`` come from the model being trained and carry gradient;
    ``previous_features`` come from the frozen snapshot and are treated as
    constants. ``from_current_task`` marks examples of the task being learned
    (the rest come from memory).
    """

    labels: np.ndarray
    current_features: Tensor
    previous_features: Tensor | None
    from_current_task: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.from_current_task = np.asarray(self.from_current_task, dtype=bool)
        k = len(self.labels)
        if k < 1:
            raise LossError("empty batch")
        if self.current_features.shape[0] != k or len(self.from_current_task) != k:
            raise LossError("batch fields disagree on the number of examples")
        if self.previous_features is not None:
            if self.previous_features.shape != self.current_features.shape:
                raise LossError(
                    f"feature shapes differ across spaces: {self.current_features.shape} vs "
                    f"{self.previous_features.shape}"
                )
            if self.previous_features.requires_grad:
                self.previous_features = self.previous_features.detach()

    @property
    def size(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.3
    beta: float = 0.3
    temperature: float = 2.0
    base_kd_weight: float = 1.0
    kd_temperature: float = 2.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.base_kd_weight < 0:
            raise LossError("loss coefficients must be non-negative")
        if self.temperature <= 0 or self.kd_temperature <= 0:
            raise LossError("temperatures must be positive")


def _require_previous(batch: BatchView) -> Tensor:
    if batch.previous_features is None:
        raise LossError("this loss needs features from the previous model")
    return batch.previous_features


def csc_loss(batch: BatchView) -> Tensor:
    """Mean over all (i, j) pairs, self-pairs included, of
    ``(1 - cos(current_i, previous_j)) * s_ij`` with ``s_ij = +1`` for equal
    labels and ``-1`` otherwise."""
    previous = _require_previous(batch)
    k = batch.size
    sign = np.where(batch.labels[:, None] == batch.labels[None, :], 1.0, -1.0)
    cos = ad.pairwise_cosine(batch.current_features, previous)
    return ad.scale(ad.sum(ad.mul(ad.sub(1.0, cos), sign)), 1.0 / (k * k))


def similarity_distribution(anchor: Tensor, references, temperature: float) -> Tensor:
    """Softmax over ``cos(anchor, ref_j) / temperature`` across the references.

    ``references`` is a list of vectors or a matrix with one reference per row.
    """
    if temperature <= 0:
        raise LossError("temperature must be positive")
    refs = references if isinstance(references, Tensor) and references.ndim == 2 else ad.stack(list(references))
    if refs.shape[0] < 1:
        raise LossError("need at least one reference")
    d = anchor.shape[-1]
    cos = ad.pairwise_cosine(ad.reshape(anchor, (1, d)), refs)
    return ad.reshape(ad.softmax(cos, temperature), (refs.shape[0],))


def ct_loss(batch: BatchView, temperature: float, detach_q: bool = False) -> Tensor:
    """Mean KL between each current-task sample's similarity distribution over
    the memory samples of the batch, taken in the current space, and the same
    distribution taken in the previous space.

    Fewer than two memory samples or no current-task sample gives zero.
    """
    previous = _require_previous(batch)
    p_idx = np.flatnonzero(batch.from_current_task)
    q_idx = np.flatnonzero(~batch.from_current_task)
    if len(p_idx) == 0:
        return Tensor(0.0)
    if len(q_idx) < 2:
        warnings.warn(
            f"controlled transfer needs >= 2 memory samples, batch has {len(q_idx)}",
            DegenerateBatchWarning,
            stacklevel=2,
        )
        return Tensor(0.0)
    cur = batch.current_features
    cur_q = ad.take(cur, q_idx)
    if detach_q:
        cur_q = cur_q.detach()
    h_cur = ad.softmax(ad.pairwise_cosine(ad.take(cur, p_idx), cur_q), temperature)
    h_prev = ad.softmax(ad.pairwise_cosine(ad.take(previous, p_idx), ad.take(previous, q_idx)), temperature)
    return ad.mean(ad.kl_divergence(h_cur, h_prev))


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    k, n = logits.shape
    if len(labels) != k:
        raise LossError(f"{len(labels)} labels for {k} rows of logits")
    if np.any(labels < 0) or np.any(labels >= n):
        raise LossError(f"label outside [0, {n})")
    picked = ad.take(ad.log_softmax(logits), (np.arange(k), labels))
    return ad.scale(ad.sum(picked), -1.0 / k)


def logit_distillation_loss(current_logits: Tensor, previous_logits: Tensor, temperature: float = 2.0) -> Tensor:
    """``T^2`` times the batch mean of KL(softmax(previous/T) || softmax(current/T))."""
    if current_logits.shape != previous_logits.shape:
        raise LossError(f"logit shapes differ: {current_logits.shape} vs {previous_logits.shape}")
    teacher_log = ad.log_softmax(previous_logits, temperature)
    teacher = ad.softmax(previous_logits, temperature)
    student_log = ad.log_softmax(current_logits, temperature)
    per_row = ad.sum(ad.mul(teacher, ad.sub(teacher_log, student_log)), axis=1)
    return ad.scale(ad.mean(per_row), temperature**2)


TERMS = ("cross_entropy", "logit_distillation", "cross_space_clustering", "controlled_transfer")


@dataclass
class LossBreakdown:
    total: Tensor
    terms: dict[str, float]
    weighted: dict[str, float]


def combined_loss(
    batch: BatchView,
    logits: Tensor,
    previous_logits: Tensor | None,
    weights: LossWeights,
    phase: str,
    detach_q: bool = False,
) -> LossBreakdown:
    """Base objective plus weighted clustering and transfer terms.

    In the ``first_task`` phase only cross-entropy is active and the other
    three terms are reported as zero. ``previous_logits`` covers the old classes,
    which are the leading columns of ``logits``.
    """
    if phase not in ("first_task", "incremental"):
        raise LossError(f"unknown phase {phase!r}")
    if phase == "incremental" and (previous_logits is None or batch.previous_features is None):
        raise LossError("incremental phase needs the previous model's outputs")

    def term(name, fn):
        try:
            return fn()
        except ad.NonFiniteError as err:
            raise NonFiniteLossError(name, str(err)) from err

    ce = term("cross_entropy", lambda: cross_entropy_loss(logits, batch.labels))
    parts: dict[str, tuple[float, Tensor | None]] = {"cross_entropy": (1.0, ce)}
    if phase == "incremental":
        n_old = previous_logits.shape[1]
        kd = csc = ct = None
        if weights.base_kd_weight:
            kd = term("logit_distillation", lambda: logit_distillation_loss(
                ad.take(logits, (slice(None), slice(0, n_old))), previous_logits, weights.kd_temperature))
        if weights.alpha:
            csc = term("cross_space_clustering", lambda: csc_loss(batch))
        if weights.beta:
            ct = term("controlled_transfer", lambda: ct_loss(batch, weights.temperature, detach_q))
        parts["logit_distillation"] = (weights.base_kd_weight, kd)
        parts["cross_space_clustering"] = (weights.alpha, csc)
        parts["controlled_transfer"] = (weights.beta, ct)

    total = ce
    terms, weighted = {}, {}
    for name in TERMS:
        coef, value = parts.get(name, (0.0, None))
        terms[name] = value.item() if value is not None else 0.0
        weighted[name] = coef * terms[name]
        if value is not None and name != "cross_entropy":
            total = ad.add(total, ad.scale(value, coef))
    return LossBreakdown(total, terms, weighted)
