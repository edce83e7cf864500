"""Graph-routed memory cell: the second residual branch of a block.

A token state is softly located over a bank of centroids (source routing by
inverse cosine distance), diffused one hop through a learned masked
transition graph, re-scored against the token's query, and converted into a
gated, layer-normalized displacement that is added back to the residual
stream. With ``adaptive`` set, each forward also performs the online
hard-assignment EMA write-back and usage smoothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigurationError
from .numerics import Matrix

LN_EPS = 1e-5


@dataclass
class CentroidBank:
    """Per-block centroid matrix plus its non-trainable bookkeeping.

    centroids: F x H, rows kept on the unit sphere by write-back/maintenance
    usage:     smoothed soft source usage per slot, in [0, 1]
    age:       write-back steps since the slot was (re)initialized
    gate:      raw scalar g, displacement scale is sigmoid(g)
    momentum:  raw scalar u, write-back EMA momentum is sigmoid(u)
    """

    centroids: Matrix
    ln_c_gain: Matrix
    ln_c_bias: Matrix
    usage: np.ndarray
    age: np.ndarray
    gate: Matrix
    momentum: Matrix

    @property
    def slots(self) -> int:
        return self.centroids.rows

    @property
    def width(self) -> int:
        return self.centroids.cols


@dataclass
class EdgeGraph:
    """Raw directed slot-to-slot preferences; see transition_matrix for the
    derived row-stochastic form."""

    edges: Matrix

    @property
    def slots(self) -> int:
        return self.edges.rows


@dataclass
class NavigationParams:
    """Query/key projections into the navigation subspace plus the
    displacement layer norm."""

    w_q: Matrix
    w_k: Matrix
    ln_disp_gain: Matrix
    ln_disp_bias: Matrix


@dataclass
class MemoryCell:
    """Everything one block's memory branch owns, including its input LN."""

    bank: CentroidBank
    graph: EdgeGraph
    nav: NavigationParams
    ln2_gain: Matrix
    ln2_bias: Matrix


@dataclass
class RoutingResult:
    """Per-token routing state captured during one forward pass.

    w_src / w_tgt rows are simplex distributions over the F slots; w_edge is
    their one-hop diffusion (also row-stochastic). transitions is the P
    matrix used for this pass, kept for the edge losses.
    """

    w_src: Matrix
    w_edge: Matrix
    w_tgt: Matrix
    c_src: Matrix
    c_tgt: Matrix
    displacement: Matrix
    transitions: Matrix


def _diagonal_mask(f: int) -> Matrix:
    mask = np.zeros((f, f))
    np.fill_diagonal(mask, -np.inf)
    return nm.constant(mask, allow_neg_inf=True)


def transition_matrix(graph: EdgeGraph) -> Matrix:
    """Row-stochastic transitions: row softmax of E with the diagonal masked
    to -inf, so self-loops carry exactly zero mass."""
    f = graph.slots
    if f < 2 or graph.edges.cols != f:
        raise ConfigurationError(f"edge matrix must be FxF with F >= 2, got {graph.edges.shape}")
    return nm.softmax_rows(nm.add(graph.edges, _diagonal_mask(f)))


def normalized_centroids(bank: CentroidBank) -> tuple[Matrix, Matrix]:
    """(C_tilde, C_hat): layer-normalized centroids and their unit-norm rows.

    Recomputed from the raw bank on every call because write-back mutates
    the centroids between steps.
    """
    c_tilde = nm.layer_norm(bank.centroids, bank.ln_c_gain, bank.ln_c_bias, LN_EPS)
    return c_tilde, nm.normalize_rows(c_tilde)


def source_routing(z: Matrix, bank: CentroidBank, tau: float, eps_grav: float,
                   c_hat: Matrix | None = None) -> Matrix:
    """Soft source assignment of each token row of z over the centroid bank.

    Cosine similarity between unit-normalized token states and centroids is
    turned into a floored distance d = max(1 - s, eps_grav) and routed by a
    softmax over the inverse distances 1 / (tau * d). Logits are bounded by
    1 / (tau * eps_grav); the softmax shift keeps them safe to exponentiate.
    """
    if tau <= 0.0 or eps_grav <= 0.0:
        raise ConfigurationError("source_routing needs tau > 0 and eps_grav > 0")
    if c_hat is None:
        _, c_hat = normalized_centroids(bank)
    z_hat = nm.normalize_rows(z)
    sim = nm.matmul(z_hat, nm.transpose(c_hat))
    dist = nm.clamp_min(nm.add_const(nm.scale(sim, -1.0), 1.0), eps_grav)
    return nm.softmax_rows(nm.recip(nm.scale(dist, tau)))


def target_selection(z: Matrix, w_src: Matrix, transitions: Matrix,
                     nav: NavigationParams, c_tilde: Matrix) -> tuple[Matrix, Matrix]:
    """One-hop graph diffusion plus token-conditioned scores.

    w_edge = w_src @ P supplies the structural prior; the additive term is
    the scaled query-key compatibility between z and the layer-normalized
    centroids. The sum is softmaxed into the target distribution. The
    probability-scale w_edge is added to the unbounded logits verbatim.
    """
    w_edge = nm.matmul(w_src, transitions)
    q = nm.matmul(z, nav.w_q)
    k = nm.matmul(c_tilde, nav.w_k)
    compat = nm.scale(nm.matmul(q, nm.transpose(k)), 1.0 / math.sqrt(nav.w_q.cols))
    w_tgt = nm.softmax_rows(nm.add(w_edge, compat))
    return w_edge, w_tgt


def displacement_readout(w_src: Matrix, w_tgt: Matrix, bank: CentroidBank,
                         nav: NavigationParams,
                         c_tilde: Matrix | None = None) -> tuple[Matrix, Matrix, Matrix]:
    """Gated, normalized difference between target and source memory states.

    Returns (c_src, c_tgt, d) with d = sigmoid(g) * LN_disp(c_tgt - c_src).
    """
    if c_tilde is None:
        c_tilde, _ = normalized_centroids(bank)
    c_src = nm.matmul(w_src, c_tilde)
    c_tgt = nm.matmul(w_tgt, c_tilde)
    delta = nm.sub(c_tgt, c_src)
    normed = nm.layer_norm(delta, nav.ln_disp_gain, nav.ln_disp_bias, LN_EPS)
    d = nm.scale_by(normed, nm.sigmoid(bank.gate))
    return c_src, c_tgt, d


def memory_cell_forward(h: Matrix, cell: MemoryCell, tau: float, *,
                        adaptive: bool = False, eps_grav: float = 0.01,
                        rho: float = 0.99, alpha: float = 1.0) -> tuple[Matrix, RoutingResult]:
    """Full memory branch on the post-attention state h (rows are tokens).

    Returns (x_next, trace) with x_next = h + alpha * d. When ``adaptive``
    is set the bank is updated in place from the post-block state (EMA
    write-back and usage smoothing); those updates run on plain arrays and
    never join the gradient tape.
    """
    z = nm.layer_norm(h, cell.ln2_gain, cell.ln2_bias, LN_EPS)
    c_tilde, c_hat = normalized_centroids(cell.bank)
    transitions = transition_matrix(cell.graph)
    w_src = source_routing(z, cell.bank, tau, eps_grav, c_hat=c_hat)
    w_edge, w_tgt = target_selection(z, w_src, transitions, cell.nav, c_tilde)
    c_src, c_tgt, d = displacement_readout(w_src, w_tgt, cell.bank, cell.nav,
                                           c_tilde=c_tilde)
    x_next = nm.add(h, nm.scale(d, alpha))
    trace = RoutingResult(w_src=w_src, w_edge=w_edge, w_tgt=w_tgt,
                          c_src=c_src, c_tgt=c_tgt, displacement=d,
                          transitions=transitions)
    if adaptive:
        from .memory_maintenance import update_usage, write_back

        write_back(cell.bank, x_next.data, w_src.data)
        update_usage(cell.bank, w_src.data, rho)
    return x_next, trace
