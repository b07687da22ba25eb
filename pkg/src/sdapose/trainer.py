"""Training scenarios, the joint optimization loop, and the empirical
generalization-bound diagnostic.

Five scenarios: source_only, oracle (target labels only), fine_tune
(source phase then target phase), sda (supervision + adversarial feature
alignment, no domain-dependent head), and lirr_sda (full invariant-risk +
invariant-representation objective).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import autodiff as ad
from . import losses as lo
from . import metrics as met
from . import networks as nets
from . import synthdata as sd
from .autodiff import Tensor
from .losses import LossBreakdown, LossWeights
from .networks import ArchConfig, DomainLabel, ModelBundle


class ConfigurationError(ValueError):
    """A scenario was asked to run without its required datasets."""


class Scenario(Enum):
    SOURCE_ONLY = "source_only"
    ORACLE = "oracle"
    FINE_TUNE = "fine_tune"
    SDA = "sda"
    LIRR_SDA = "lirr_sda"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_source: int = 8
    batch_target: int = 8
    epochs: int = 3
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    finetune_epochs: int = 2
    loss_kind: str = "mse"
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_source < 1 or self.batch_target < 1:
            raise ValueError("batch sizes must be >= 1")


def _supervised_step(bundle, batch, params, state, cfg):
    loss = lo.loss_invariant(bundle, batch, kind=cfg.loss_kind)
    ad.zero_grads(params)
    ad.backward(loss)
    ad.adam_step(params, state, lr=cfg.lr)
    v = loss.item()
    return LossBreakdown(l_i=v, l_d=0.0, l_risk=v, l_rep=0.0, total=v)


def _joint_step(bundle, src_batch, tgt_batch, weights, params, state, cfg):
    graph, breakdown = lo.joint_objective(bundle, src_batch, tgt_batch, weights,
                                          kind=cfg.loss_kind)
    ad.zero_grads(bundle.all_params())
    ad.backward(graph)
    ad.adam_step(params, state, lr=cfg.lr)
    return breakdown


def _epoch_batches(rng, n, batch):
    order = rng.permutation(n)
    for start in range(0, n, batch):
        idx = order[start:start + batch]
        if len(idx):
            yield idx


def _draw_target(rng, n, batch):
    # with replacement when the labeled pool is smaller than the sub-batch
    return rng.choice(n, size=batch, replace=n < batch)


def _supervised_phase(bundle, dataset, params, state, cfg, epochs, batch,
                      rng, history, step0):
    step = step0
    for _ in range(epochs):
        for idx in _epoch_batches(rng, len(dataset), batch):
            b = [dataset[i] for i in idx]
            history.append((step, _supervised_step(bundle, b, params, state, cfg)))
            step += 1
    return step


def train(scenario: Scenario, source_ds, target_labeled_ds, config: TrainConfig):
    """Train a fresh ModelBundle under the given scenario.

    Returns (bundle, history) where history is a list of (step, LossBreakdown).
    With ``epochs == 0`` the initialized bundle is returned unchanged.
    """
    needs_source = scenario is not Scenario.ORACLE
    needs_target = scenario not in (Scenario.SOURCE_ONLY,)
    if needs_source and not source_ds:
        raise ConfigurationError(f"{scenario.value} requires a source dataset")
    if needs_target and not target_labeled_ds:
        raise ConfigurationError(f"{scenario.value} requires labeled target data")

    bundle = ModelBundle.initialize(config.arch, seed=config.seed)
    rng = np.random.default_rng(config.seed + 1)
    history = []

    if scenario is Scenario.SOURCE_ONLY:
        params = bundle.param_groups("g", "fi")
        state = ad.adam_init(params)
        _supervised_phase(bundle, source_ds, params, state, config,
                          config.epochs, config.batch_source, rng, history, 0)
        return bundle, history

    if scenario is Scenario.ORACLE:
        params = bundle.param_groups("g", "fi")
        state = ad.adam_init(params)
        _supervised_phase(bundle, target_labeled_ds, params, state, config,
                          config.epochs, config.batch_target, rng, history, 0)
        return bundle, history

    if scenario is Scenario.FINE_TUNE:
        params = bundle.param_groups("g", "fi")
        state = ad.adam_init(params)
        step = _supervised_phase(bundle, source_ds, params, state, config,
                                 config.epochs, config.batch_source, rng, history, 0)
        _supervised_phase(bundle, target_labeled_ds, params, state, config,
                          config.finetune_epochs, config.batch_target, rng,
                          history, step)
        return bundle, history

    # joint scenarios: equal source/target sub-batches per step
    if scenario is Scenario.SDA:
        weights = replace(config.weights, lambda_risk=0.0)
    else:
        weights = config.weights
    groups = ["g", "fi"]
    if weights.lambda_risk > 0:
        groups.append("fd")
    if weights.lambda_rep > 0:
        groups.append("c")
    params = bundle.param_groups(*groups)
    state = ad.adam_init(params)
    step = 0
    for _ in range(config.epochs):
        for idx in _epoch_batches(rng, len(source_ds), config.batch_source):
            src = [source_ds[i] for i in idx]
            tgt_idx = _draw_target(rng, len(target_labeled_ds), config.batch_target)
            tgt = [target_labeled_ds[i] for i in tgt_idx]
            history.append((step, _joint_step(bundle, src, tgt, weights,
                                              params, state, config)))
            step += 1
    return bundle, history


# -- generalization-bound diagnostic ----------------------------------------------


@dataclass(frozen=True)
class BoundReport:
    n: int
    m: int
    eps_hat_S: float
    eps_hat_T: float
    weighted_risk: float
    proxy_discrepancy: float

    def prose(self):
        return (
            f"empirical risks: source {self.eps_hat_S:.6f} (n={self.n}), "
            f"target {self.eps_hat_T:.6f} (m={self.m}); "
            f"weighted risk {self.weighted_risk:.6f}; "
            f"feature-distribution discrepancy (proxy A-distance of a probe "
            f"classifier) {self.proxy_discrepancy:.4f}. "
            "The labeling-function-difference, complexity, and noise-amplitude "
            "terms of the bound are not estimated: they require oracles this "
            "setting does not provide."
        )


def _per_sample_risk(bundle, dataset, kind="mse"):
    vals = []
    for s in dataset:
        vals.append(lo.loss_invariant(bundle, [s], kind=kind).item())
    return float(np.mean(vals))


def _pooled_feature_matrix(bundle, dataset):
    imgs = Tensor(np.stack([s.image[None] for s in dataset]))
    feats = nets.forward_features(bundle, imgs)
    return nets.pooled_features(feats).data


def _probe_balanced_error(Xs, Xt, seed=0, iters=400, lr=0.5):
    """Balanced held-out error of a logistic-regression domain probe."""
    X = np.vstack([Xs, Xt])
    y = np.concatenate([np.ones(len(Xs)), np.zeros(len(Xt))])
    mu, sigma = X.mean(axis=0), X.std(axis=0) + 1e-8
    X = (X - mu) / sigma
    # interleaved split keeps both domains in both halves
    tr = np.concatenate([np.arange(0, len(Xs), 2),
                         len(Xs) + np.arange(0, len(Xt), 2)])
    te = np.concatenate([np.arange(1, len(Xs), 2),
                         len(Xs) + np.arange(1, len(Xt), 2)])
    w = np.zeros(X.shape[1])
    b = 0.0
    for _ in range(iters):
        z = X[tr] @ w + b
        p = 1.0 / (1.0 + np.exp(-z))
        g = p - y[tr]
        w -= lr * (X[tr].T @ g) / len(tr)
        b -= lr * g.mean()
    pred = (X[te] @ w + b) > 0
    truth = y[te] > 0.5
    err_s = np.mean(pred[truth] != True) if truth.any() else 0.0
    err_t = np.mean(pred[~truth] != False) if (~truth).any() else 0.0
    return 0.5 * (err_s + err_t)


def empirical_bound_terms(bundle, source_ds, target_ds) -> BoundReport:
    """Computable terms of the finite-sample bound: per-domain empirical risks,
    their sample-weighted combination, and a proxy A-distance 2(1 - 2 err) of a
    freshly trained probe on frozen pooled features."""
    if not source_ds or not target_ds:
        raise ValueError("both datasets must be non-empty")
    n, m = len(source_ds), len(target_ds)
    eps_s = _per_sample_risk(bundle, source_ds)
    eps_t = _per_sample_risk(bundle, target_ds)
    weighted = (m / (n + m)) * eps_t + (n / (n + m)) * eps_s
    Xs = _pooled_feature_matrix(bundle, source_ds)
    Xt = _pooled_feature_matrix(bundle, target_ds)
    err = min(0.5, _probe_balanced_error(Xs, Xt))
    proxy = 2.0 * (1.0 - 2.0 * err)
    return BoundReport(n=n, m=m, eps_hat_S=eps_s, eps_hat_T=eps_t,
                       weighted_risk=weighted, proxy_discrepancy=proxy)


# -- experiment suite --------------------------------------------------------------


@dataclass(frozen=True)
class SuiteConfig:
    n_source: int = 2000
    target_splits: tuple = (100, 200)
    n_target_test: int = 500
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    pck_threshold: float = met.PCK_THRESHOLD_PX


def build_suite_datasets(scene, shifts, suite: SuiteConfig):
    """Source set plus, per target preset, labeled pools and the fixed test set."""
    crop = suite.train.arch.input_size
    source, _, _ = sd.generate_dataset(scene, shifts["clean"], suite.n_source,
                                       DomainLabel.SOURCE, suite.seed, crop_size=crop)
    targets = {}
    max_split = max(suite.target_splits)
    for name, shift in shifts.items():
        if name == "clean":
            continue
        n = max_split + suite.n_target_test
        pool, train_idx, test_idx = sd.generate_dataset(
            scene, shift, n, DomainLabel.TARGET, suite.seed + 7919,
            crop_size=crop, n_test=suite.n_target_test)
        labeled = [pool[i] for i in train_idx]
        test = [pool[i] for i in test_idx]
        targets[name] = (labeled, test)
    return source, targets


def run_experiment_suite(scene, shifts, suite: SuiteConfig):
    """All five scenarios x target split sizes x target presets.

    Returns a list of row dicts keyed by (scenario, preset, split); the
    source_only rows are trained once per preset evaluation (no target data
    is used, so rows are identical across split sizes by construction).
    """
    source, targets = build_suite_datasets(scene, shifts, suite)
    rows = []
    for preset, (labeled_pool, test) in sorted(targets.items()):
        for split in suite.target_splits:
            labeled = labeled_pool[:split]
            for scenario in Scenario:
                cfg = replace(suite.train, seed=suite.seed)
                bundle, _ = train(scenario,
                                  source if scenario is not Scenario.ORACLE else None,
                                  labeled if scenario is not Scenario.SOURCE_ONLY else None,
                                  cfg)
                report = met.evaluate_pipeline(bundle, test, scene,
                                               pck_threshold=suite.pck_threshold)
                rows.append(suite_row(scenario, preset, split, report))
    return rows


def suite_row(scenario, preset, split, report):
    return {
        "algorithm": scenario.value,
        "training_set": f"{preset}_{split}",
        "preset": preset,
        "split": split,
        "kerror_px": report.kerror_px,
        "pck_pct": report.pck_pct,
        "range_error_frac": report.range_error_frac,
        "attitude_error_deg": report.attitude_error_deg,
        "esa_score": report.esa_score,
        "n_samples": report.n_samples,
    }


SUITE_CSV_COLUMNS = ("algorithm", "training_set", "kerror_px", "pck_pct",
                     "range_error_frac", "attitude_error_deg", "esa_score")


def history_csv_lines(history):
    lines = [",".join(LossBreakdown.CSV_COLUMNS)]
    for step, bd in history:
        lines.append(bd.csv_row(step))
    return lines
