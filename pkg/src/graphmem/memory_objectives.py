"""Auxiliary losses that keep the memory structure trained and usable.

Five terms per block: tracking (routed reconstruction of the written-back
state), centroid orthogonality, usage clustering, edge-row entropy, and
edge-row contrast. ``total_loss`` folds them into the task loss with fixed
weights, each term summed over blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigurationError, DomainError
from .numerics import Matrix

EPS_LOG = 1e-8


@dataclass
class LossWeights:
    lambda_track: float = 1.0
    beta_ortho: float = 0.05
    lambda_cluster: float = 0.3
    lambda_edge: float = 0.1
    lambda_contrast: float = 0.5
    n_target: float = 32.0
    h_target: float = 4.0
    eps_log: float = EPS_LOG

    def validate(self, slots: int) -> None:
        for name in ("lambda_track", "beta_ortho", "lambda_cluster",
                     "lambda_edge", "lambda_contrast"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"loss weight {name} must be >= 0")
        if self.n_target > slots:
            raise ConfigurationError(f"n_target {self.n_target} exceeds slot count {slots}")
        if self.eps_log <= 0:
            raise ConfigurationError("eps_log must be > 0")


def _offdiag_mask(f: int) -> Matrix:
    mask = np.ones((f, f))
    np.fill_diagonal(mask, 0.0)
    return nm.constant(mask)


def tracking_loss(x_next: np.ndarray, w_src: Matrix, c_tilde: Matrix,
                  momentum: Matrix) -> Matrix:
    """(1 - m) * MSE(stopgrad(x_next), w_src @ C_tilde), m = sigmoid(momentum).

    The written-back state enters as a plain array (already detached); the
    differentiable paths are the routed reconstruction and the momentum
    prefactor, which is how the momentum parameter is trained at all.
    """
    target = nm.constant(np.asarray(x_next))
    recon = nm.matmul(w_src, c_tilde)
    diff = nm.sub(recon, target)
    mse = nm.mean_all(nm.mul(diff, diff))
    one_minus_m = nm.add_const(nm.scale(nm.sigmoid(momentum), -1.0), 1.0)
    return nm.scale_by(mse, one_minus_m)


def orthogonality_loss(centroids: Matrix) -> Matrix:
    """Mean squared off-diagonal cosine of the raw centroid rows."""
    f = centroids.rows
    if f < 2:
        raise ConfigurationError("orthogonality_loss needs at least 2 centroids")
    c_n = nm.normalize_rows(centroids)
    gram = nm.matmul(c_n, nm.transpose(c_n))
    off_sq = nm.mul(nm.mul(gram, gram), _offdiag_mask(f))
    return nm.scale(nm.sum_all(off_sq), 1.0 / (f * (f - 1)))


def clustering_loss(w_src: Matrix, n_target: float, eps_log: float = EPS_LOG) -> Matrix:
    """One-sided penalty when the effective number of routed slots drops
    below n_target.

    Usage is the batch mean of w_src renormalized to a distribution; its
    entropy exponential is the effective slot count N_eff and the loss is
    max(n_target / max(N_eff, 1) - 1, 0).
    """
    u_bar = nm.col_mean(w_src)
    u = nm.scale_by(u_bar, nm.recip(nm.add_const(nm.sum_all(u_bar), eps_log)))
    plogp = nm.mul(u, nm.log(nm.add_const(u, eps_log)))
    entropy = nm.scale(nm.sum_all(plogp), -1.0)
    n_eff = nm.clamp_min(nm.exp(entropy), 1.0)
    ratio = nm.scale(nm.recip(n_eff), float(n_target))
    return nm.relu(nm.add_const(ratio, -1.0))


def edge_entropy_loss(transitions: Matrix, h_target: float,
                      eps_log: float = EPS_LOG) -> Matrix:
    """Mean per-row entropy deficit of P below h_target (one-sided)."""
    f = transitions.rows
    ones = nm.constant(np.ones((f, 1)))
    plogp = nm.mul(transitions, nm.log(nm.add_const(transitions, eps_log)))
    row_entropy = nm.scale(nm.matmul(plogp, ones), -1.0)
    deficit = nm.relu(nm.add_const(nm.scale(row_entropy, -1.0), float(h_target)))
    return nm.mean_all(deficit)


def edge_contrast_loss(transitions: Matrix) -> Matrix:
    """Mean off-diagonal similarity between L2-normalized rows of P."""
    f = transitions.rows
    p_n = nm.normalize_rows(transitions)
    sim = nm.matmul(p_n, nm.transpose(p_n))
    off = nm.mul(sim, _offdiag_mask(f))
    return nm.scale(nm.sum_all(off), 1.0 / (f * (f - 1)))


@dataclass
class AuxTerms:
    """Per-model auxiliary losses, each already summed over blocks."""

    track: Matrix
    ortho: Matrix
    cluster: Matrix
    edge: Matrix
    contrast: Matrix


def total_loss(task: Matrix, aux: AuxTerms | None, weights: LossWeights) -> Matrix:
    """task + weighted auxiliary terms; raises if any component is non-finite."""
    for name, term in [("task", task)] + (
        [] if aux is None else
        [("track", aux.track), ("ortho", aux.ortho), ("cluster", aux.cluster),
         ("edge", aux.edge), ("contrast", aux.contrast)]
    ):
        if not np.isfinite(term.data[0, 0]):
            raise DomainError(f"total_loss: non-finite {name} term")
    if aux is None:
        return task
    out = task
    for weight, term in [(weights.lambda_track, aux.track),
                         (weights.beta_ortho, aux.ortho),
                         (weights.lambda_cluster, aux.cluster),
                         (weights.lambda_edge, aux.edge),
                         (weights.lambda_contrast, aux.contrast)]:
        if weight != 0.0:
            out = nm.add(out, nm.scale(term, weight))
    return out
