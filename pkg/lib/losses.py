"""
Loss terms of the method and their weighted combination.

Each term takes nodes (or raw arrays) and returns a 1x1 node. ``reduction``
selects the per-pair mean used when a term is evaluated on its own, or the
plain sum that ``combined_loss`` divides by the child-batch normalizers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from lib import autodiff as ad
from lib.autodiff import PROB_EPS, ContractError, DimensionError, NonFiniteError, Node, ParameterError, Tape
from lib.batching import TrainingBatch
from lib.datasets import LabelMatrix
from lib.networks import ModelState, feature_forward, feature_logits, similarity_forward

logger = logging.getLogger(__name__)

TERMS = ("sup_f", "sup_w", "unsup_labeled", "unsup_unlabeled", "cons", "pi")


def _reduce(per_row: Node, reduction: str) -> Node:
    if reduction == "mean":
        return ad.mean_all(per_row)
    if reduction == "sum":
        return ad.sum_all(per_row)
    raise ParameterError(f"unknown reduction '{reduction}'")


def _cross_entropy(outputs: Node, targets, name: str, reduction: str, from_logits: bool) -> Node:
    targets = ad.lift(targets, outputs.tape)
    if targets.shape != outputs.shape:
        raise DimensionError(f"{name}: outputs {outputs.shape} vs targets {targets.shape}")
    if from_logits:
        log_p = ad.log_softmax_rows(outputs)
    else:
        log_p = ad.ln(ad.clamp(outputs, PROB_EPS, 1.0 - PROB_EPS))
    per_row = ad.affine(ad.row_sum(ad.mul(targets, log_p)), scale=-1.0)
    return _reduce(per_row, reduction)


def loss_sup_f(F, Y, reduction: str = "mean", from_logits: bool = False) -> Node:
    """Cross-entropy between class probabilities F (l x c) and one-hot labels Y.

    With ``from_logits`` F holds pre-softmax scores and no clamping is needed.
    """
    F = ad.lift(F)
    Y = getattr(Y, "Y", Y)
    return _cross_entropy(F, Y, "loss_sup_f", reduction, from_logits)


def loss_sup_w(phi_out, targets, reduction: str = "mean", from_logits: bool = False) -> Node:
    """Cross-entropy between Phi outputs (pairs x 2) and similarity targets."""
    return _cross_entropy(ad.lift(phi_out), targets, "loss_sup_w", reduction, from_logits)


def _sq_dist(Fi: Node, Fj: Node) -> Node:
    if Fi.shape != Fj.shape:
        raise DimensionError(f"paired outputs differ in shape: {Fi.shape} vs {Fj.shape}")
    return ad.row_sum(ad.square(ad.sub(Fi, Fj)))


def confidence_kernel(Fi, Fj, beta: float) -> Node:
    """A_k = exp(-beta * ||Fi_k - Fj_k||^2) as a pairs x 1 node."""
    if beta <= 0:
        raise ParameterError(f"beta must be > 0, got {beta}")
    Fi, Fj = ad.lift_pair(Fi, Fj)
    return ad.exp(ad.affine(_sq_dist(Fi, Fj), scale=-beta))


def loss_unsup(Fi, Fj, W, beta: float, reduction: str = "mean", repulsion: bool = True) -> Node:
    """Extended graph-Laplacian term.

    per pair: beta * W * d - (1 - W) * ln(1 - exp(-beta * d)), d = ||Fi - Fj||^2,
    with 1 - A clamped to >= PROB_EPS. ``repulsion=False`` keeps only the
    first (classical Laplacian) term.
    """
    if beta <= 0:
        raise ParameterError(f"beta must be > 0, got {beta}")
    tape = ad.shared_tape(Fi, Fj, W)
    Fi, Fj = ad.lift(Fi, tape), ad.lift(Fj, tape)
    W = ad.lift(np.asarray(W, dtype=np.float64).reshape(-1, 1) if not isinstance(W, Node) else W, tape)
    d = _sq_dist(Fi, Fj)
    if W.shape != d.shape:
        raise DimensionError(f"loss_unsup: {d.rows} pairs but W has shape {W.shape}")
    attraction = ad.mul(W, ad.affine(d, scale=beta))
    if not repulsion:
        return _reduce(attraction, reduction)
    one_minus_a = ad.affine(ad.exp(ad.affine(d, scale=-beta)), scale=-1.0, shift=1.0)
    log_gap = ad.ln(ad.clamp(one_minus_a, PROB_EPS, 1.0))
    repel = ad.mul(ad.affine(W, scale=-1.0, shift=1.0), log_gap)
    return _reduce(ad.sub(attraction, repel), reduction)


def loss_cons(phi_live, phi_ema, reduction: str = "mean") -> Node:
    """Squared distance between live Phi outputs and (detached) EMA outputs."""
    phi_live = ad.lift(phi_live)
    target = phi_ema.value if isinstance(phi_ema, Node) else phi_ema
    target = phi_live.tape.constant(target)
    if target.shape != phi_live.shape:
        raise DimensionError(f"loss_cons: {phi_live.shape} vs {target.shape}")
    return _reduce(ad.row_sum(ad.square(ad.sub(phi_live, target))), reduction)


def pi_consistency_loss(F_clean, F_perturbed, reduction: str = "mean") -> Node:
    """Mean squared Euclidean distance between paired class-probability rows."""
    F_clean, F_perturbed = ad.lift_pair(F_clean, F_perturbed)
    return _reduce(_sq_dist(F_clean, F_perturbed), reduction)


# --- combined objective ---


@dataclass(frozen=True)
class LossWeights:
    """Effective (already ramped) coefficients for one step."""

    beta: float
    lambda1: float
    lambda2: float
    lambda3: float
    pi_weight: float = 0.0
    repulsion: bool = True


@dataclass
class LossBreakdown:
    """Summed loss terms, the child-batch normalizers, and the weighted total.

    ``total`` recomposes as
    (sup_f + sup_w)/n_sup + l1*unsup_labeled/n_labeled_pairs
    + l2*unsup_unlabeled/n_b3 + l3*cons/n_cons + pi_weight*pi/n_pi.
    """

    sup_f: float
    sup_w: float
    unsup_labeled: float
    unsup_unlabeled: float
    cons: float
    total: float
    weights: LossWeights
    n_sup: int
    n_labeled_pairs: int
    n_b3: int
    n_cons: int
    pi: float = 0.0
    n_pi: int = 1
    node: Optional[Node] = field(default=None, repr=False, compare=False)

    def recompose(self) -> float:
        w = self.weights
        total = (self.sup_f + self.sup_w) / self.n_sup
        total += w.lambda1 * self.unsup_labeled / self.n_labeled_pairs
        total += w.lambda2 * self.unsup_unlabeled / self.n_b3
        total += w.lambda3 * self.cons / self.n_cons
        total += w.pi_weight * self.pi / self.n_pi
        return total

    def parts(self) -> Dict[str, float]:
        return {
            "sup_f": self.sup_f,
            "sup_w": self.sup_w,
            "unsup_labeled": self.unsup_labeled,
            "unsup_unlabeled": self.unsup_unlabeled,
            "cons": self.cons,
            "pi": self.pi,
            "total": self.total,
        }


def _term(name: str, build: Callable[[], Node]) -> Node:
    try:
        node = build()
    except NonFiniteError as exc:
        exc.term = exc.term or name
        raise
    if not np.all(np.isfinite(node.value)):
        raise NonFiniteError(f"loss term {name} is not finite", op="loss", term=name)
    return node


def _ema_targets(state: ModelState, batch: TrainingBatch, training: bool, rng) -> np.ndarray:
    """Phi_alpha' on the latent codes of the perturbed inputs, computed off the gradient tape.

    Rows follow the live pairs: batch1, then batch2, then batch3.
    """
    perturbed = np.vstack([batch.x1_pert, batch.x1_aug_pert, batch.xl1_pert, batch.xl2_pert])
    Z = feature_forward(state, perturbed, training=training, rng=rng)[0].value
    b1, b2 = batch.b1, batch.b2
    z1, z1a = Z[:b1], Z[b1:2 * b1]
    zl1, zl2 = Z[2 * b1:2 * b1 + b2], Z[2 * b1 + b2:]
    left = np.vstack([z1, zl1, z1[batch.split_left]])
    right = np.vstack([z1a, zl2, z1[batch.split_right]])
    return similarity_forward(state, left, right, use_ema=True, training=training, rng=rng).value


def combined_loss(
    batch: TrainingBatch,
    state: ModelState,
    weights: LossWeights,
    rng: Optional[np.random.Generator] = None,
    training: bool = True,
    tape: Optional[Tape] = None,
) -> LossBreakdown:
    """Build the full weighted objective for one three-child batch on ``tape``.

    batch1 feeds sup_w, cons and unsup with W = 1; batch2 feeds all four terms
    with ground-truth W; batch3 feeds unsup with W from the live Phi and cons.
    """
    b1, b2, b3 = batch.b1, batch.b2, batch.b3
    if min(b1, b2, b3) <= 0:
        raise ContractError(f"every child batch must be non-empty, got sizes ({b1}, {b2}, {b3})")
    tape = tape or Tape()

    # one pass of g/h over every distinct clean input: X1, X1', Xl1, Xl2
    clean = np.vstack([batch.x1, batch.x1_aug, batch.xl1, batch.xl2])
    Z, logits = feature_logits(state, clean, training=training, rng=rng, tape=tape)
    F = ad.softmax_rows(logits)
    offsets = np.cumsum([0, b1, b1, b2, b2])
    rows = [np.arange(offsets[i], offsets[i + 1]) for i in range(4)]
    z1, z1a, zl1, zl2 = (ad.take_rows(Z, r) for r in rows)
    f1, f1a, fl1, fl2 = (ad.take_rows(F, r) for r in rows)
    z2, z3 = ad.take_rows(z1, batch.split_left), ad.take_rows(z1, batch.split_right)
    f2, f3 = ad.take_rows(f1, batch.split_left), ad.take_rows(f1, batch.split_right)

    # live Phi over all pairs of the three children in one pass
    phi_logits = similarity_forward(
        state,
        ad.concat_rows([z1, zl1, z2]),
        ad.concat_rows([z1a, zl2, z3]),
        training=training, rng=rng, tape=tape, logits=True,
    )
    phi = ad.softmax_rows(phi_logits)
    phi3 = ad.take_rows(phi, np.arange(b1 + b2, b1 + b2 + b3))

    labels = LabelMatrix.from_labels(np.concatenate([batch.yl1, batch.yl2]), state.n_classes)
    sup_f = _term(
        "sup_f",
        lambda: loss_sup_f(
            ad.take_rows(logits, np.arange(2 * b1, 2 * b1 + 2 * b2)), labels, reduction="sum", from_logits=True
        ),
    )
    sup_w = _term(
        "sup_w",
        lambda: loss_sup_w(
            ad.take_rows(phi_logits, np.arange(0, b1 + b2)),
            np.vstack([batch.targets1, batch.targets2]),
            reduction="sum", from_logits=True,
        ),
    )
    w_labeled = np.concatenate([np.ones(b1), batch.targets2[:, 0]])
    unsup_labeled = _term(
        "unsup_labeled",
        lambda: loss_unsup(
            ad.concat_rows([f1, fl1]), ad.concat_rows([f1a, fl2]), w_labeled,
            weights.beta, reduction="sum", repulsion=weights.repulsion,
        ),
    )
    unsup_unlabeled = _term(
        "unsup_unlabeled",
        lambda: loss_unsup(
            f2, f3, ad.column(phi3, 0), weights.beta, reduction="sum", repulsion=weights.repulsion,
        ),
    )

    phi_ema = _ema_targets(state, batch, training, rng)
    cons = _term("cons", lambda: loss_cons(phi, phi_ema, reduction="sum"))

    n_sup = b1 + 2 * b2
    n_labeled_pairs = b1 + b2
    n_cons = b1 + b2 + b3
    total = ad.affine(ad.add(sup_f, sup_w), scale=1.0 / n_sup)
    total = ad.add(total, ad.affine(unsup_labeled, scale=weights.lambda1 / n_labeled_pairs))
    total = ad.add(total, ad.affine(unsup_unlabeled, scale=weights.lambda2 / b3))
    total = ad.add(total, ad.affine(cons, scale=weights.lambda3 / n_cons))

    pi_value, n_pi = 0.0, 1
    if weights.pi_weight > 0:
        pi_node = _pi_term(state, batch, f1, fl1, fl2, training, rng, tape)
        n_pi = b1 + 2 * b2
        pi_value = pi_node.item()
        total = ad.add(total, ad.affine(pi_node, scale=weights.pi_weight / n_pi))

    return LossBreakdown(
        sup_f=sup_f.item(),
        sup_w=sup_w.item(),
        unsup_labeled=unsup_labeled.item(),
        unsup_unlabeled=unsup_unlabeled.item(),
        cons=cons.item(),
        total=total.item(),
        weights=weights,
        n_sup=n_sup,
        n_labeled_pairs=n_labeled_pairs,
        n_b3=b3,
        n_cons=n_cons,
        pi=pi_value,
        n_pi=n_pi,
        node=total,
    )


def _pi_term(state, batch, f1, fl1, fl2, training, rng, tape) -> Node:
    """Sum of Pi-model distances: every clean input of batch1/batch2 vs its perturbed copy."""
    perturbed = np.vstack([batch.x1_pert, batch.xl1_pert, batch.xl2_pert])
    _, Fp = feature_forward(state, perturbed, training=training, rng=rng, tape=tape)
    return _term("pi", lambda: pi_consistency_loss(ad.concat_rows([f1, fl1, fl2]), Fp, reduction="sum"))


def supervised_loss(
    batch: TrainingBatch,
    state: ModelState,
    pi_weight: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    training: bool = True,
    tape: Optional[Tape] = None,
) -> Tuple[Node, Dict[str, float]]:
    """Mean class cross-entropy over batch2's labeled samples, plus an optional Pi term.

    The Pi term is the mean distance over all clean/perturbed inputs of the batch.
    """
    tape = tape or Tape()
    b1, b2 = batch.b1, batch.b2
    if min(b1, b2) <= 0:
        raise ContractError("child batches must be non-empty")
    clean = np.vstack([batch.x1, batch.xl1, batch.xl2])
    _, logits = feature_logits(state, clean, training=training, rng=rng, tape=tape)
    labeled_rows = np.arange(b1, b1 + 2 * b2)
    labels = LabelMatrix.from_labels(np.concatenate([batch.yl1, batch.yl2]), state.n_classes)
    sup_f = _term(
        "sup_f", lambda: loss_sup_f(ad.take_rows(logits, labeled_rows), labels, reduction="mean", from_logits=True)
    )
    total = sup_f
    parts = {"sup_f": sup_f.item(), "pi": 0.0}
    if pi_weight > 0:
        F = ad.softmax_rows(logits)
        perturbed = np.vstack([batch.x1_pert, batch.xl1_pert, batch.xl2_pert])
        _, Fp = feature_forward(state, perturbed, training=training, rng=rng, tape=tape)
        pi = _term("pi", lambda: pi_consistency_loss(F, Fp, reduction="mean"))
        parts["pi"] = pi.item()
        total = ad.add(total, ad.affine(pi, scale=pi_weight))
    parts["total"] = total.item()
    return total, parts
