"""Loss stack: supervised heatmap risk, invariant-risk gap, adversarial
representation alignment, and the joint objective.

The joint objective is realized with a single backward pass. Gradient routing
uses gradient reversal layers so every sub-network descends its own objective
while the extractor g receives the min-max gradients of the combined loss:

* g, f_i descend ``total = l_i + lambda_risk * (l_i - l_d) + lambda_rep * l_rep``;
* f_d descends its own supervised loss l_d (the domain-dependent predictor is
  an auxiliary estimator, not an adversary on its own weights);
* C ascends l_rep (discriminator log-likelihood), via a reversal layer that
  simultaneously gives g the l_rep-descending gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import networks as nets
from .autodiff import Tensor
from .networks import DomainLabel

LOG_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_risk: float = 1.0
    lambda_rep: float = 0.1
    grl_lambda: float = 1.0

    def __post_init__(self):
        for name in ("lambda_risk", "lambda_rep", "grl_lambda"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossBreakdown:
    l_i: float
    l_d: float
    l_risk: float
    l_rep: float
    total: float

    CSV_COLUMNS = ("step", "l_i", "l_d", "l_risk", "l_rep", "total")

    def csv_row(self, step):
        return f"{step},{self.l_i!r},{self.l_d!r},{self.l_risk!r},{self.l_rep!r},{self.total!r}"


def heatmap_loss(pred: Tensor, target: Tensor, kind: str = "mse") -> Tensor:
    """Per-pixel loss between predicted and target heatmap stacks.

    ``mse`` (default) is mean squared error over all channels and pixels.
    ``xent`` is cross-entropy of per-channel softmax against the normalized
    target distribution, kept as an ablation switch.
    """
    if pred.shape != target.shape:
        raise ad.ShapeError(f"heatmap_loss: pred {pred.shape} != target {target.shape}")
    if kind == "mse":
        diff = ad.sub(pred, target)
        return ad.mean(ad.mul(diff, diff))
    if kind == "xent":
        flat = ad.reshape(pred, (-1, pred.shape[-2] * pred.shape[-1]))
        logp = ad.log(ad.add(ad.softmax(flat, axis=1), Tensor(LOG_EPS)))
        t = target.data.reshape(flat.shape)
        t = t / np.maximum(t.sum(axis=1, keepdims=True), LOG_EPS)
        return ad.mul(ad.mean(ad.sum_(ad.mul(logp, Tensor(t)), axis=1)), Tensor(-1.0))
    raise ValueError(f"unknown heatmap loss kind {kind!r}")


def _batch_images(batch):
    return Tensor(np.stack([s.image[None] for s in batch]))


def _batch_targets(batch, arch):
    return Tensor(np.stack([_cached_target(s, arch) for s in batch]))


def _cached_target(sample, arch):
    # target heatmaps are fixed per (sample, arch); cache across steps
    cached = getattr(sample, "_target_hm", None)
    if cached is not None and cached[0] == arch:
        return cached[1]
    data = nets.make_target_heatmaps(sample.keypoints2d, arch).data
    try:
        sample._target_hm = (arch, data)
    except AttributeError:
        pass
    return data


def loss_invariant(bundle, batch, kind="mse", features=None) -> Tensor:
    """Mean supervised loss of f_i(g(x)) over a labeled batch from S and/or T."""
    if not batch:
        raise ValueError("loss_invariant: empty batch")
    if features is None:
        features = nets.forward_features(bundle, _batch_images(batch))
    pred = nets.forward_head_invariant(bundle, features)
    return heatmap_loss(pred, _batch_targets(batch, bundle.arch), kind=kind)


def loss_dependent(bundle, batch, kind="mse", features=None, grl_lambda=None) -> Tensor:
    """Mean supervised loss of f_d(g(x), D) using each sample's true domain label.

    ``grl_lambda`` optionally inserts a reversal layer between g and f_d (used
    by the joint objective to give g the risk-gap gradient while f_d itself
    still descends).
    """
    if not batch:
        raise ValueError("loss_dependent: empty batch")
    if features is None:
        features = nets.forward_features(bundle, _batch_images(batch))
    if grl_lambda is not None:
        features = ad.grl(features, grl_lambda)
    by_domain = {}
    for idx, s in enumerate(batch):
        by_domain.setdefault(s.domain, []).append(idx)
    losses, counts = [], []
    for domain, idxs in sorted(by_domain.items(), key=lambda kv: kv[0].value):
        part = _gather_rows(features, idxs)
        pred = nets.forward_head_domain(bundle, part, domain)
        tgt = _batch_targets([batch[i] for i in idxs], bundle.arch)
        losses.append(heatmap_loss(pred, tgt, kind=kind))
        counts.append(len(idxs))
    total = ad.mul(losses[0], Tensor(counts[0] / len(batch)))
    for l, c in zip(losses[1:], counts[1:]):
        total = ad.add(total, ad.mul(l, Tensor(c / len(batch))))
    return total


def _gather_rows(x: Tensor, idxs):
    """Select batch rows of a (B,...) tensor, differentiably."""
    idxs = list(idxs)
    if idxs == list(range(x.shape[0])):
        return x
    shape = x.shape
    sel = np.array(idxs)

    def grad_fn(g):
        full = np.zeros(shape)
        np.add.at(full, sel, g)
        return (full,)

    return ad._result(x.data[sel], (x,), grad_fn)


def loss_risk(l_i: float, l_d: float, weights: LossWeights) -> float:
    """Invariant-risk combination: l_i + lambda_risk * (l_i - l_d)."""
    return l_i + weights.lambda_risk * (l_i - l_d)


def loss_rep(bundle, source_batch, target_batch, grl_lambda=None,
             source_features=None, target_features=None) -> Tensor:
    """Adversarial representation loss:
    mean_S log C(g(x)) + mean_T log(1 - C(g(x))), outputs clamped to
    [LOG_EPS, 1 - LOG_EPS]. Maximized by a good discriminator, minimized by g.
    """
    if not source_batch and source_features is None:
        raise ValueError("loss_rep: empty source batch")
    if not target_batch and target_features is None:
        raise ValueError("loss_rep: empty target batch")
    if source_features is None:
        source_features = nets.forward_features(bundle, _batch_images(source_batch))
    if target_features is None:
        target_features = nets.forward_features(bundle, _batch_images(target_batch))
    c_s = forward_clamped(bundle, source_features, grl_lambda)
    c_t = forward_clamped(bundle, target_features, grl_lambda)
    term_s = ad.mean(ad.log(c_s))
    term_t = ad.mean(ad.log(ad.sub(Tensor(1.0), c_t)))
    return ad.add(term_s, term_t)


def forward_clamped(bundle, features, grl_lambda=None):
    p = nets.forward_discriminator(bundle, features, grl_lambda=grl_lambda)
    # clamp away from exact 0/1 so log stays finite; identity inside the band
    lo, hi = LOG_EPS, 1.0 - LOG_EPS
    clipped = np.clip(p.data, lo, hi)
    inside = (p.data > lo) & (p.data < hi)

    def grad_fn(g):
        return (g * inside,)

    return ad._result(clipped, (p,), grad_fn)


def joint_objective(bundle, source_batch, target_batch, weights: LossWeights,
                    kind="mse", compute_l_d=None):
    """Build the full training objective; returns (loss_tensor, LossBreakdown).

    One backward pass on the returned tensor drives g and f_i down the
    combined objective, f_d down its own supervised loss (scaled by
    lambda_risk), and C up the representation loss. The scalar breakdown
    reports total = l_risk + lambda_rep * l_rep.
    """
    if not source_batch or not target_batch:
        raise ValueError("joint_objective: both labeled batches must be non-empty")
    batch = list(source_batch) + list(target_batch)
    features = nets.forward_features(bundle, _batch_images(batch))
    n_s = len(source_batch)

    l_i = loss_invariant(bundle, batch, kind=kind, features=features)
    graph = ad.mul(l_i, Tensor(1.0 + weights.lambda_risk))

    if compute_l_d is None:
        compute_l_d = weights.lambda_risk > 0
    if weights.lambda_risk > 0:
        # GRL(1) flips the sign reaching g, so g sees -lambda_risk * dl_d/dg
        # while f_d's own parameters descend l_d.
        l_d = loss_dependent(bundle, batch, kind=kind, features=features, grl_lambda=1.0)
        graph = ad.add(graph, ad.mul(l_d, Tensor(weights.lambda_risk)))
        l_d_val = l_d.item()
    elif compute_l_d:
        with_no_grad = loss_dependent(bundle, batch, kind=kind,
                                      features=Tensor(features.data))
        l_d_val = with_no_grad.item()
    else:
        l_d_val = 0.0

    if weights.lambda_rep > 0:
        sf = _gather_rows(features, range(n_s))
        tf = _gather_rows(features, range(n_s, len(batch)))
        l_rep = loss_rep(bundle, source_batch, target_batch,
                         grl_lambda=weights.grl_lambda,
                         source_features=sf, target_features=tf)
        # negative coefficient: descent on the graph makes C ascend l_rep and,
        # through the GRL, makes g descend it.
        graph = ad.add(graph, ad.mul(l_rep, Tensor(-weights.lambda_rep)))
        l_rep_val = l_rep.item()
    else:
        l_rep_val = 0.0

    l_i_val = l_i.item()
    l_risk_val = loss_risk(l_i_val, l_d_val, weights)
    breakdown = LossBreakdown(
        l_i=l_i_val,
        l_d=l_d_val,
        l_risk=l_risk_val,
        l_rep=l_rep_val,
        total=l_risk_val + weights.lambda_rep * l_rep_val,
    )
    return graph, breakdown
