"""Inter-domain mixing and the minimax mixing-ratio machinery.

Ratio convention, fixed globally: lambda is the fraction of the TARGET
instance in a mix, so a mixed row is (1 - lam) * xs + lam * xt. The ratio
learner scores the 11-point grid per source/target pair; its hard argmax
drives the worst-case mixing loss for theta, while its training signal
(expected grid entropy) is differentiable into phi only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, Tensor
from .domains import DomainBatch
from .model import (
    RATIO_GRID,
    ModelParams,
    RatioGrid,
    emp_forward,
    encode,
    logits_of,
    pseudo_labels,
)


@dataclass(frozen=True)
class RatioVector:
    """Per-pair mixing ratios in [0, 1]; each entry is the target fraction."""

    lam: Tensor

    def __post_init__(self):
        if self.lam.data.ndim != 1:
            raise ContractError(f"ratio vector must be 1-D, got shape {self.lam.shape}")
        if np.any(self.lam.data < 0.0) or np.any(self.lam.data > 1.0):
            raise ContractError("ratio entries must lie in [0, 1]")

    @property
    def values(self) -> np.ndarray:
        return self.lam.data

    def __len__(self) -> int:
        return self.lam.data.shape[0]


def ratios(values) -> RatioVector:
    """Constant RatioVector from raw values; wrap tracked tensors with
    RatioVector(lam=...) directly."""
    return RatioVector(lam=Tensor(np.asarray(values, dtype=np.float64)))


@dataclass(frozen=True)
class VicinalBatch:
    """A mixed batch with its soft labels and the ratios that produced it."""

    x_mix: Tensor
    y_mix: Tensor
    lam: RatioVector


def mix(xs: Tensor, xt: Tensor, lam: RatioVector) -> Tensor:
    """Row-wise convex combination (1 - lam) * xs + lam * xt.

    Differentiable w.r.t. both inputs and lam. The two-product form keeps
    the lam = 0 and lam = 1 endpoints bit-exact.
    """
    if xs.shape != xt.shape:
        raise ContractError(f"mix operand shapes disagree: {xs.shape} vs {xt.shape}")
    if len(lam) != xs.shape[0]:
        raise ContractError(f"ratio count {len(lam)} does not match batch size {xs.shape[0]}")
    lam_col = dc.reshape(lam.lam, (len(lam), 1))
    return (1.0 - lam_col) * xs + lam_col * xt


def mix_labels(ys: Tensor, yt_hat: Tensor, lam: RatioVector) -> Tensor:
    """Soft labels (1 - lam) * ys + lam * yt_hat; constant, no gradient."""
    lam_col = lam.values[:, None]
    return Tensor((1.0 - lam_col) * ys.data + lam_col * yt_hat.data)


def make_vicinal_batch(batch: DomainBatch, yt_hat: Tensor, lam: RatioVector) -> VicinalBatch:
    return VicinalBatch(
        x_mix=mix(batch.xs, batch.xt, lam),
        y_mix=mix_labels(batch.ys, yt_hat, lam),
        lam=lam,
    )


def grid_entropy_table(p: ModelParams, batch: DomainBatch, grid: RatioGrid = RATIO_GRID) -> np.ndarray:
    """Per-pair prediction entropy at every grid ratio, shape [m x 11].

    Plain-array computation, no tape; this is the exhaustive view of the
    entropy landscape the ratio learner is trained to summarize.
    """
    m = batch.m
    table = np.empty((m, len(grid.values)))
    for k, lam_k in enumerate(grid.values):
        lam = ratios(np.full(m, lam_k))
        logits = logits_of(p, mix(batch.xs, batch.xt, lam)).data
        table[:, k] = dc.entropy_rows_np(logits)
    return table


def brute_force_emp(p: ModelParams, batch: DomainBatch, grid: RatioGrid = RATIO_GRID) -> RatioVector:
    """Exhaustive per-pair entropy-maximizing grid ratio; ties take the
    lower ratio. The oracle the learned ratio head is judged against."""
    table = grid_entropy_table(p, batch, grid)
    return ratios(grid.values[np.argmax(table, axis=1)])


def _pair_grid_logits(p: ModelParams, batch: DomainBatch) -> Tensor:
    """Grid logits for each pair; encoder features are detached so the
    gradient path reaches phi only."""
    zs = encode(p, batch.xs).detach()
    zt = encode(p, batch.xt).detach()
    return emp_forward(p, zs, zt)


def emp_soft(p: ModelParams, batch: DomainBatch, grid: RatioGrid = RATIO_GRID) -> RatioVector:
    """Expected grid ratio under the learner's softmax; differentiable
    w.r.t. phi only."""
    probs = dc.softmax(_pair_grid_logits(p, batch))
    lam = dc.matmul(probs, Tensor(grid.values[:, None]))
    return RatioVector(lam=dc.reshape(lam, (batch.m,)))


def emp_argmax(p: ModelParams, batch: DomainBatch, grid: RatioGrid = RATIO_GRID) -> RatioVector:
    """Hard argmax over the learner's grid logits; constant, no gradient.
    Ties take the lower grid index."""
    logits = _pair_grid_logits(p, batch).data
    return ratios(grid.values[np.argmax(logits, axis=1)])


GRID_TEMPERATURE = 0.3  # sharpening of the per-pair entropy profile target


def grid_profile_target(table: np.ndarray, tau: float = GRID_TEMPERATURE) -> np.ndarray:
    """Row-softmax of the row-standardized entropy table at temperature tau.

    Standardizing each pair's entropy profile equalizes gradient strength
    across pairs; a flat profile (zero deviation) maps to a uniform target,
    i.e. no preferred ratio. Row argmax is preserved exactly.
    """
    mu = table.mean(axis=1, keepdims=True)
    sd = table.std(axis=1, keepdims=True)
    standardized = (table - mu) / np.maximum(sd, 1e-8)
    return dc.softmax_np(standardized / tau)


def emp_learner_loss(p: ModelParams, batch: DomainBatch, grid: RatioGrid = RATIO_GRID) -> Tensor:
    """Ratio-learner objective, to be MAXIMIZED in phi with theta frozen.

    Gibbs variational form of per-pair entropy maximization over the grid:
    maximizing expected (standardized, temperature-scaled) mix entropy plus
    the entropy of the learner's own grid distribution has the closed-form
    optimum softmax(profile / tau), so this returns minus the cross entropy
    between the learner's grid logits and that target. Every row's optimum
    puts its argmax on the entropy-maximizing grid ratio, which is what the
    exhaustive-search oracle checks. The entropy table is constant w.r.t.
    phi and nothing here writes theta gradients that an optimizer sees; the
    trainer additionally clears theta grads between phases.

    A plainer relaxation, entropy evaluated at the expected-grid ratio, was
    measured first and rejected: its logit updates are proportional to
    p_k * (grid_k - lam), an exponential-family tilt that parks the hard
    argmax at a grid endpoint while only the expectation tracks the peak.
    """
    table = grid_entropy_table(p, batch, grid)  # constants w.r.t. phi
    target = grid_profile_target(table)
    return dc.neg(dc.cross_entropy(_pair_grid_logits(p, batch), target))


def emp_mixup_loss(p: ModelParams, batch: DomainBatch, lam_star: RatioVector) -> Tensor:
    """Worst-case vicinal risk for theta: cross entropy of the mix at the
    learned worst-case ratios against correspondingly mixed labels.

    lam_star is treated as a constant; pseudo labels carry no gradient, so
    the gradient reaches theta only.
    """
    lam_const = ratios(lam_star.values)
    yt_hat = pseudo_labels(p, batch.xt)
    vb = make_vicinal_batch(batch, yt_hat, lam_const)
    return dc.cross_entropy(logits_of(p, vb.x_mix), vb.y_mix)
