"""Online write-back and periodic centroid maintenance.

Write-back fires on every adaptive forward pass: tokens are hard-assigned
to their argmax source slot, per-slot means of the post-block states feed a
learned-momentum EMA, and centroids are renormalized. Periodic maintenance
(every k_maint optimizer steps) first resets slots whose smoothed usage
fell below delta_dead, then repurposes the less-used member of each overly
similar mature pair. All of this mutates the bank directly and stays off
the gradient tape.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError
from .memory_cell import CentroidBank

logger = logging.getLogger(__name__)


@dataclass
class MaintenanceConfig:
    rho: float = 0.99            # usage smoothing coefficient
    delta_dead: float = 1e-3     # usage threshold below which a slot is dead
    tau_merge: float = 0.95      # cosine threshold for duplicate slots
    a_cool: int = 100            # write-back steps before a slot may merge
    k_maint: int = 110           # optimizer steps between maintenance events
    eps_count: float = 1e-8      # write-back denominator floor

    def validate(self) -> None:
        if not 0.0 < self.rho < 1.0:
            raise ConfigurationError("rho must be in (0, 1)")
        if not 0.0 < self.delta_dead < 1.0:
            raise ConfigurationError("delta_dead must be in (0, 1)")
        if not 0.0 < self.tau_merge < 1.0:
            raise ConfigurationError("tau_merge must be in (0, 1)")
        if self.a_cool < 0 or self.k_maint < 1:
            raise ConfigurationError("a_cool must be >= 0 and k_maint >= 1")
        if self.eps_count <= 0.0:
            raise ConfigurationError("eps_count must be > 0")


@dataclass
class MaintenanceReport:
    step: int
    block: int
    resets: int
    merges: int
    dead_before: int
    mean_cos_sim: float

    def to_json(self) -> dict:
        return {"step": self.step, "block": self.block, "resets": self.resets,
                "merges": self.merges, "dead_before": self.dead_before,
                "mean_cos_sim": self.mean_cos_sim}


def _renormalize(c: np.ndarray) -> np.ndarray:
    return c / np.linalg.norm(c, axis=1, keepdims=True)


def mean_pairwise_cosine(centroids: np.ndarray) -> float:
    f = centroids.shape[0]
    c_n = _renormalize(centroids)
    gram = c_n @ c_n.T
    return float((gram.sum() - np.trace(gram)) / (f * (f - 1)))


def write_back(bank: CentroidBank, x_next: np.ndarray, w_src: np.ndarray,
               eps_count: float = 1e-8) -> None:
    """Hard-assignment EMA update of the centroids from post-block states.

    Every token updates only its argmax source slot; slots with no
    assignments keep their direction (the EMA shrinks them toward zero and
    renormalization restores unit length). Ages advance by one for all
    slots. Runs on plain arrays with m = sigmoid(momentum) read as a value.
    """
    f, h = bank.slots, bank.width
    if x_next.shape[1] != h or w_src.shape != (x_next.shape[0], f):
        raise ConfigurationError("write_back: state/routing shapes do not match the bank")
    assign = np.argmax(w_src, axis=1)
    counts = np.bincount(assign, minlength=f).astype(np.float64)
    sums = np.zeros((f, h))
    np.add.at(sums, assign, x_next)
    r_bar = sums / np.maximum(counts, eps_count)[:, None]
    m = float(expit(bank.momentum.data[0, 0]))
    updated = m * bank.centroids.data + (1.0 - m) * r_bar
    bank.centroids.assign(_renormalize(updated))
    bank.age = bank.age + 1


def update_usage(bank: CentroidBank, w_src: np.ndarray, rho: float) -> None:
    """usage <- rho * usage + (1 - rho) * mean of the batch's w_src rows."""
    if w_src.shape[1] != bank.slots:
        raise ConfigurationError("update_usage: routing width does not match the bank")
    u_batch = w_src.mean(axis=0)
    bank.usage = rho * bank.usage + (1.0 - rho) * u_batch


def _draw_replacements(pool: np.ndarray | None, n: int, width: int,
                       rng: np.random.Generator) -> np.ndarray:
    """n unit-norm replacement rows sampled from the pool without
    replacement, topping up with random directions when it runs dry."""
    rows = []
    if pool is not None and len(pool) > 0:
        take = min(n, len(pool))
        picks = rng.choice(len(pool), size=take, replace=False)
        rows.append(pool[picks])
    short = n - sum(len(r) for r in rows)
    if short > 0:
        logger.warning("replacement pool exhausted; using %d random directions", short)
        rows.append(rng.standard_normal((short, width)))
    return _renormalize(np.concatenate(rows, axis=0))


def reset_dead_centroids(bank: CentroidBank, batch_states: np.ndarray | None,
                         delta_dead: float, rng: np.random.Generator) -> int:
    """Replace slots whose smoothed usage fell below delta_dead.

    Up to F/2 dead slots are reseeded from normalized current batch states;
    beyond that the whole set falls back to random unit directions so half
    the bank is not repopulated from one narrow batch. Reset slots get
    usage 1/F and age 0. Returns the number of resets.
    """
    f = bank.slots
    dead = np.flatnonzero(bank.usage < delta_dead)
    if dead.size == 0:
        return 0
    if dead.size > f // 2:
        replacements = _renormalize(rng.standard_normal((dead.size, bank.width)))
    else:
        replacements = _draw_replacements(batch_states, dead.size, bank.width, rng)
    c = bank.centroids.data.copy()
    c[dead] = replacements
    bank.centroids.assign(c)
    usage = bank.usage.copy()
    usage[dead] = 1.0 / f
    bank.usage = usage
    age = bank.age.copy()
    age[dead] = 0
    bank.age = age
    return int(dead.size)


def merge_similar_centroids(bank: CentroidBank, tau_merge: float, a_cool: int,
                            rng: np.random.Generator,
                            batch_states: np.ndarray | None = None) -> int:
    """Repurpose the less-used member of each over-similar mature pair.

    Pairs (i < j) with cosine above tau_merge and both ages >= a_cool are
    processed highest-similarity first; each slot is replaced at most once
    per event, keeping the more frequently used member untouched. Returns
    the number of replacements.
    """
    f = bank.slots
    c_n = _renormalize(bank.centroids.data)
    gram = c_n @ c_n.T
    mature = bank.age >= a_cool
    ii, jj = np.triu_indices(f, k=1)
    ok = (gram[ii, jj] > tau_merge) & mature[ii] & mature[jj]
    if not ok.any():
        return 0
    order = np.argsort(-gram[ii, jj][ok], kind="stable")
    pairs = list(zip(ii[ok][order], jj[ok][order]))

    replaced: list[int] = []
    c = bank.centroids.data.copy()
    usage = bank.usage.copy()
    age = bank.age.copy()
    for i, j in pairs:
        if i in replaced or j in replaced:
            continue
        loser = int(j) if usage[i] >= usage[j] else int(i)
        replaced.append(loser)
    if replaced:
        c[replaced] = _draw_replacements(batch_states, len(replaced), bank.width, rng)
        usage[replaced] = 1.0 / f
        age[replaced] = 0
        bank.centroids.assign(c)
        bank.usage = usage
        bank.age = age
    return len(replaced)


def maintenance_step(bank: CentroidBank, batch_states: np.ndarray | None,
                     config: MaintenanceConfig, rng: np.random.Generator,
                     step: int = 0, block: int = 0) -> MaintenanceReport:
    """One maintenance event: dead-slot reset first, then similarity merge."""
    dead_before = int(np.count_nonzero(bank.usage < config.delta_dead))
    resets = reset_dead_centroids(bank, batch_states, config.delta_dead, rng)
    merges = merge_similar_centroids(bank, config.tau_merge, config.a_cool, rng,
                                     batch_states=batch_states)
    return MaintenanceReport(step=step, block=block, resets=resets, merges=merges,
                             dead_before=dead_before,
                             mean_cos_sim=mean_pairwise_cosine(bank.centroids.data))
