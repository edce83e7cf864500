"""Routing-flow traces, utilization statistics, edge exports, and the
displacement scaling sweep.

Everything here is read-only over a model snapshot: traces run with
adaptive memory off, and the sweep scales each block's displacement by a
fixed alpha without touching any state.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .corpus import TokenWindowStream, Tokenizer, get_window, token_text, window_count
from .errors import ConfigurationError, DomainError
from .memory_maintenance import mean_pairwise_cosine
from .model import GRAPH_MEMORY, Model, forward_batch, model_forward

# ---------------------------------------------------------------------------
# plain-array statistics shared with the training log


def transition_probs(edges: np.ndarray) -> np.ndarray:
    """Row-stochastic transitions of a raw edge matrix (numpy-side twin of
    the differentiable op, for diagnostics over checkpoint arrays)."""
    f = edges.shape[0]
    masked = edges.astype(np.float64).copy()
    np.fill_diagonal(masked, -np.inf)
    shift = masked - masked.max(axis=1, keepdims=True)
    e = np.exp(shift)
    return e / e.sum(axis=1, keepdims=True)


def row_entropies(p: np.ndarray) -> np.ndarray:
    """Exact per-row entropy with the 0 log 0 = 0 convention."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(p), 0.0)
    return -terms.sum(axis=1)


def n_eff_of_usage(usage: np.ndarray) -> float:
    """exp of the entropy of the normalized usage distribution, in [1, F].

    A uniform vector is answered in closed form so the identity exp(ln F)
    lands on F exactly rather than one float away from it.
    """
    usage = np.asarray(usage, dtype=np.float64)
    total = usage.sum()
    if total <= 0.0:
        raise DomainError("usage vector has no mass")
    if np.all(usage == usage[0]):
        return float(usage.size)
    u = usage / total
    value = float(np.exp(row_entropies(u[None, :])[0]))
    return min(max(value, 1.0), float(usage.size))


def gini_coefficient(usage: np.ndarray) -> float:
    """G = sum_i (2i - n - 1) x_i / (n * sum x) over ascending-sorted usage."""
    x = np.sort(np.asarray(usage, dtype=np.float64))
    n = x.size
    total = x.sum()
    if total <= 0.0:
        raise DomainError("usage vector has no mass")
    coeff = 2.0 * np.arange(1, n + 1) - n - 1
    return float((coeff * x).sum() / (n * total))


# ---------------------------------------------------------------------------
# routing traces


@dataclass
class TraceRecord:
    block: int
    pos: int
    token_id: int
    token: str
    src_slot: int
    tgt_slot: int
    src_entropy: float
    tgt_entropy: float
    disp_norm: float
    self_route: bool

    def to_json(self) -> dict:
        return {"block": self.block, "pos": self.pos, "token_id": self.token_id,
                "token": self.token, "src_slot": self.src_slot,
                "tgt_slot": self.tgt_slot, "src_entropy": self.src_entropy,
                "tgt_entropy": self.tgt_entropy, "disp_norm": self.disp_norm,
                "self_route": self.self_route}


def trace_text(model: Model, text: str, tokenizer: Tokenizer, *,
               tau: float) -> list[TraceRecord]:
    """One adaptive-off evaluation forward with per-token routing capture.

    Emits one record per (block, position) over all graph-memory blocks.
    """
    if not text:
        raise DomainError("trace_text: empty text")
    ids = tokenizer.encode(text)
    if not ids:
        raise DomainError("trace_text: text tokenized to nothing")
    if len(ids) > model.config.context:
        raise ConfigurationError(
            f"text tokenizes to {len(ids)} ids, beyond context {model.config.context}")
    tokens = np.asarray(ids, dtype=np.int64)
    result = model_forward(model, tokens, tau=tau, adaptive=False)
    records: list[TraceRecord] = []
    for b, res in enumerate(result.block_results):
        if res is None:
            continue
        w_src, w_tgt = res.w_src.data, res.w_tgt.data
        src_h = row_entropies(w_src)
        tgt_h = row_entropies(w_tgt)
        disp = np.linalg.norm(res.displacement.data, axis=1)
        src_arg = np.argmax(w_src, axis=1)
        tgt_arg = np.argmax(w_tgt, axis=1)
        for t, tok in enumerate(tokens):
            records.append(TraceRecord(
                block=b, pos=t, token_id=int(tok),
                token=token_text(tokenizer, int(tok)),
                src_slot=int(src_arg[t]), tgt_slot=int(tgt_arg[t]),
                src_entropy=float(src_h[t]), tgt_entropy=float(tgt_h[t]),
                disp_norm=float(disp[t]),
                self_route=bool(src_arg[t] == tgt_arg[t])))
    return records


# ---------------------------------------------------------------------------
# utilization statistics


@dataclass
class UtilizationStats:
    n_eff: float
    unique_slots: int
    gini: float
    top_share: float
    dead: int | None = None
    mean_centroid_cos: float | None = None

    def to_json(self) -> dict:
        return {"n_eff": self.n_eff, "unique_slots": self.unique_slots,
                "gini": self.gini, "top_share": self.top_share,
                "dead": self.dead, "mean_centroid_cos": self.mean_centroid_cos}


def utilization_stats(usage: np.ndarray, *, centroids: np.ndarray | None = None,
                      delta_dead: float | None = None) -> UtilizationStats:
    """Spread statistics of a source-usage distribution (smoothed usage from
    a bank, or empirical argmax counts from a trace)."""
    usage = np.asarray(usage, dtype=np.float64)
    total = usage.sum()
    if total <= 0.0:
        raise DomainError("usage vector has no mass")
    stats = UtilizationStats(
        n_eff=n_eff_of_usage(usage),
        unique_slots=int(np.count_nonzero(usage > 0.0)),
        gini=gini_coefficient(usage),
        top_share=float(usage.max() / total),
    )
    if delta_dead is not None:
        stats.dead = int(np.count_nonzero(usage < delta_dead))
    if centroids is not None:
        stats.mean_centroid_cos = mean_pairwise_cosine(centroids)
    return stats


def trace_source_usage(records: list[TraceRecord], block: int, slots: int) -> np.ndarray:
    """Empirical argmax-source distribution of one block's trace records."""
    counts = np.zeros(slots)
    hits = [r.src_slot for r in records if r.block == block]
    if not hits:
        raise DomainError(f"trace has no records for block {block}")
    np.add.at(counts, hits, 1.0)
    return counts / counts.sum()


def model_utilization(model: Model,
                      trace: list[TraceRecord] | None = None) -> dict[int, UtilizationStats]:
    """Per-block stats from a trace (if given) or from the smoothed usage."""
    out: dict[int, UtilizationStats] = {}
    delta = model.config.maintenance.delta_dead
    for i, block in enumerate(model.blocks):
        if block.cell is None:
            continue
        bank = block.cell.bank
        usage = (trace_source_usage(trace, i, bank.slots) if trace is not None
                 else bank.usage)
        out[i] = utilization_stats(usage, centroids=bank.centroids.data,
                                   delta_dead=delta)
    return out


# ---------------------------------------------------------------------------
# edge-structure export


def edge_structure_export(model: Model, block: int, top_k: int,
                          out_path: str | Path) -> list[dict]:
    """CSV of the top_k-by-usage slots' transition rows plus per-row entropy
    and max mass. Returns the rows as dicts for programmatic use."""
    blk = model.blocks[block]
    if blk.cell is None:
        raise ConfigurationError(f"block {block} has no memory cell")
    bank = blk.cell.bank
    f = bank.slots
    if top_k < 1 or top_k > f:
        raise ConfigurationError(f"top_k must be in [1, {f}]")
    p = transition_probs(blk.cell.graph.edges.data)
    order = np.argsort(-bank.usage, kind="stable")[:top_k]
    entropy = row_entropies(p)
    rows = []
    for slot in order:
        rows.append({"slot": int(slot), "usage": float(bank.usage[slot]),
                     **{f"p{j}": float(p[slot, j]) for j in range(f)},
                     "entropy": float(entropy[slot]),
                     "max_mass": float(p[slot].max())})
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return rows


# ---------------------------------------------------------------------------
# displacement scaling sweep


def text_eval_loss(model: Model, stream: TokenWindowStream, *, tau: float,
                   alpha: float = 1.0, batch_size: int = 8) -> float:
    """Mean next-token loss over the stream's non-overlapping windows with
    every block's second-branch update scaled by alpha."""
    window = model.config.context
    n = window_count(stream, window)
    if n < 1:
        raise ConfigurationError("text is too short for one evaluation window")
    losses = []
    for start in range(0, n, batch_size):
        idx = range(start, min(start + batch_size, n))
        pairs = [get_window(stream, i, window) for i in idx]
        inputs = np.stack([p[0] for p in pairs])
        targets = np.stack([p[1] for p in pairs])
        result = forward_batch(model, inputs, tau=tau, adaptive=False, alpha=alpha)
        losses.append(nm.cross_entropy(result.logits, targets.reshape(-1)).item())
    return float(np.mean(losses))


def displacement_sweep(model: Model, stream: TokenWindowStream, alphas: list[float],
                       *, tau: float) -> list[tuple[float, float]]:
    """Next-token loss per displacement scale; alpha = 1 is the exact
    unscaled forward and alpha = 0 the attention-only model."""
    if any(a < 0 for a in alphas):
        raise ConfigurationError("alphas must be >= 0")
    return [(float(a), text_eval_loss(model, stream, tau=tau, alpha=float(a)))
            for a in alphas]


def stream_from_text(text: str, tokenizer: Tokenizer) -> TokenWindowStream:
    """A throwaway stream over one text, without an end-of-text marker."""
    ids = tokenizer.encode(text)
    if not ids:
        raise DomainError("empty text")
    return TokenWindowStream(ids=np.asarray(ids, dtype=np.uint16),
                             vocab_size=tokenizer.vocab_size,
                             eot_id=tokenizer.eot_id,
                             tokenizer_name=tokenizer.name)
