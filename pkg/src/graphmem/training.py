"""Optimizer loop: AdamW with accumulation and clipping, LR and routing
temperature schedules, adaptive validation, and checkpointing.

One optimizer step accumulates gradients of the full objective over A
micro-batches, clips the global norm, and applies AdamW with decoupled
weight decay (layer norms, the two memory scalars, and the embeddings are
exempt). Write-back fires inside every adaptive micro-batch forward;
maintenance fires every k_maint steps, after the update.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import TokenWindowStream, get_window, window_count
from .errors import ConfigurationError, DomainError, TrainingError
from .memory_maintenance import maintenance_step, mean_pairwise_cosine
from .memory_objectives import (
    AuxTerms,
    clustering_loss,
    edge_contrast_loss,
    edge_entropy_loss,
    total_loss,
)
from .model import GRAPH_MEMORY, Model, forward_batch
from .numerics import Matrix, Tape

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    peak_lr: float = 3e-4
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    warmup_steps: int = 50
    total_steps: int = 2000
    batch_size: int = 8
    grad_accum: int = 2
    clip_norm: float = 1.0
    epochs: int = 0              # 0 = run until total_steps
    seed: int = 0
    eval_every: int = 200
    eval_batches_cap: int = 512
    adaptive_eval: bool = True

    def __post_init__(self):
        if self.warmup_steps < 0 or self.warmup_steps > self.total_steps:
            raise ConfigurationError("need 0 <= warmup_steps <= total_steps")
        if self.total_steps < 1 or self.batch_size < 1 or self.grad_accum < 1:
            raise ConfigurationError("total_steps, batch_size, grad_accum must be >= 1")
        if self.clip_norm <= 0:
            raise ConfigurationError("clip_norm must be > 0")
        if self.eval_batches_cap < 1:
            raise ConfigurationError("eval_batches_cap must be >= 1")


def temperature_schedule(s: int, total: int, tau_max: float, tau_min: float) -> float:
    """Logarithmic anneal: tau_max at step 0, tau_min at step total."""
    if total < 1:
        raise ConfigurationError("schedule needs total steps >= 1")
    p = min(s / total, 1.0)
    rho = math.log(1.0 + (math.e - 1.0) * p)
    return tau_max * (tau_min / tau_max) ** rho


def lr_schedule(s: int, warmup: int, total: int, peak: float) -> float:
    """Linear warmup from 0 to peak, then cosine decay to 0 at step total."""
    if s < warmup:
        return peak * s / max(warmup, 1)
    if s >= total:
        return 0.0
    progress = (s - warmup) / max(total - warmup, 1)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def tokens_per_update(batch_size: int, grad_accum: int, window: int) -> int:
    return batch_size * grad_accum * window


def _decay_exempt(name: str) -> bool:
    return ("ln" in name or name in ("tok_emb", "pos_emb")
            or name.endswith((".gate", ".momentum")))


class AdamW:
    """Decoupled-weight-decay Adam over named parameters."""

    def __init__(self, params: dict[str, Matrix], beta1: float = 0.9,
                 beta2: float = 0.95, weight_decay: float = 0.1, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2 = beta1, beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.eps)
            new = p.data - lr * update
            if self.weight_decay and not _decay_exempt(name):
                new = new - lr * self.weight_decay * p.data
            p.assign(new)

    def state(self) -> dict:
        return {"m": self.m, "v": self.v, "t": self.t}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for name in self.params:
            self.m[name] = np.asarray(state["m"][name], dtype=np.float64)
            self.v[name] = np.asarray(state["v"][name], dtype=np.float64)


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float) -> float:
    """Rescale to the global-norm ball in place; returns the pre-clip norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > clip_norm:
        factor = clip_norm / total
        for name in grads:
            grads[name] = grads[name] * factor
    return total


@dataclass
class LossParts:
    total: float
    lm: float
    track: float = 0.0
    ortho: float = 0.0
    cluster: float = 0.0
    edge: float = 0.0
    contrast: float = 0.0


def build_training_loss(model: Model, inputs: np.ndarray, targets: np.ndarray, *,
                        tau: float, adaptive: bool = False,
                        rng: np.random.Generator | None = None,
                        tracking_targets: list[np.ndarray] | None = None,
                        ) -> tuple[Matrix, LossParts, list[np.ndarray]]:
    """Full objective on one micro-batch; returns the per-block post-block
    states so the caller can reuse them as the maintenance sample pool.

    ``tracking_targets`` overrides the stop-gradient targets of the tracking
    terms (the gradient checker freezes them at the unperturbed point). The
    tracking reconstruction reuses the forward's own c_src nodes so it sees
    the same normalized centroids the routing saw, even when adaptive
    write-back mutates the bank mid-pass.
    """
    cfg = model.config
    weights = cfg.loss_weights
    result = forward_batch(model, inputs, tau=tau, adaptive=adaptive, rng=rng)
    lm = nm.cross_entropy(result.logits, np.asarray(targets).reshape(-1))

    block_states = [out.data for out in result.block_outputs]
    if cfg.block_kind != GRAPH_MEMORY:
        parts = LossParts(total=lm.item(), lm=lm.item())
        return lm, parts, block_states

    track = ortho = cluster = edge = contrast = None
    for i, block in enumerate(model.blocks):
        res = result.block_results[i]
        bank = block.cell.bank
        target = tracking_targets[i] if tracking_targets is not None else block_states[i]
        diff = nm.sub(res.c_src, nm.constant(target))
        one_minus_m = nm.add_const(nm.scale(nm.sigmoid(bank.momentum), -1.0), 1.0)
        terms = {
            "track": nm.scale_by(nm.mean_all(nm.mul(diff, diff)), one_minus_m),
            "ortho": _ortho_of(bank.centroids),
            "cluster": clustering_loss(res.w_src, weights.n_target, weights.eps_log),
            "edge": edge_entropy_loss(res.transitions, weights.h_target, weights.eps_log),
            "contrast": edge_contrast_loss(res.transitions),
        }
        track = terms["track"] if track is None else nm.add(track, terms["track"])
        ortho = terms["ortho"] if ortho is None else nm.add(ortho, terms["ortho"])
        cluster = terms["cluster"] if cluster is None else nm.add(cluster, terms["cluster"])
        edge = terms["edge"] if edge is None else nm.add(edge, terms["edge"])
        contrast = terms["contrast"] if contrast is None else nm.add(contrast, terms["contrast"])

    aux = AuxTerms(track=track, ortho=ortho, cluster=cluster, edge=edge,
                   contrast=contrast)
    loss = total_loss(lm, aux, weights)
    parts = LossParts(total=loss.item(), lm=lm.item(), track=track.item(),
                      ortho=ortho.item(), cluster=cluster.item(),
                      edge=edge.item(), contrast=contrast.item())
    return loss, parts, block_states


def _ortho_of(centroids: Matrix) -> Matrix:
    from .memory_objectives import orthogonality_loss

    return orthogonality_loss(centroids)


@dataclass
class StepReport:
    step: int
    lr: float
    tau: float
    parts: LossParts
    grad_norm: float

    def to_json(self) -> dict:
        return {"step": self.step, "lr": self.lr, "tau": self.tau,
                "lm_loss": self.parts.lm, "track": self.parts.track,
                "ortho": self.parts.ortho, "cluster": self.parts.cluster,
                "edge": self.parts.edge, "contrast": self.parts.contrast,
                "grad_norm": self.grad_norm}


def train_step(model: Model, optimizer: AdamW,
               micro_batches: list[tuple[np.ndarray, np.ndarray]],
               *, step_index: int, config: TrainConfig,
               rng: np.random.Generator | None) -> tuple[StepReport, list[np.ndarray]]:
    """One optimizer step over ``grad_accum`` micro-batches.

    Gradients are the mean over micro-batches, clipped to the global-norm
    ball before the AdamW update. Returns the report and the last
    micro-batch's post-block states for the maintenance pool.
    """
    cfg = model.config
    tau = temperature_schedule(step_index, config.total_steps, cfg.tau_max, cfg.tau_min)
    lr = lr_schedule(step_index, config.warmup_steps, config.total_steps, config.peak_lr)

    params = optimizer.params
    grads = {name: np.zeros_like(p.data) for name, p in params.items()}
    sums = np.zeros(7)
    pool: list[np.ndarray] = []
    for inputs, targets in micro_batches:
        with Tape() as tape:
            loss, parts, pool = build_training_loss(
                model, inputs, targets, tau=tau, adaptive=True, rng=rng)
        if not math.isfinite(parts.total):
            raise TrainingError(f"non-finite loss at step {step_index}: {parts}")
        batch_grads = tape.gradients(loss, params.values())
        for name, p in params.items():
            grads[name] += batch_grads[p]
        sums += np.array([parts.total, parts.lm, parts.track, parts.ortho,
                          parts.cluster, parts.edge, parts.contrast])

    a = len(micro_batches)
    for name in grads:
        grads[name] /= a
    grad_norm = clip_gradients(grads, config.clip_norm)
    optimizer.step(grads, lr)

    mean = sums / a
    parts = LossParts(total=mean[0], lm=mean[1], track=mean[2], ortho=mean[3],
                      cluster=mean[4], edge=mean[5], contrast=mean[6])
    return StepReport(step=step_index + 1, lr=lr, tau=tau, parts=parts,
                      grad_norm=grad_norm), pool


def _val_batches(stream: TokenWindowStream, window: int, batch_size: int):
    n = window_count(stream, window)
    for start in range(0, n, batch_size):
        idx = range(start, min(start + batch_size, n))
        pairs = [get_window(stream, i, window) for i in idx]
        yield (np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]))


PPL_EXP_CLIP = 20.0


def validate(model: Model, val_stream: TokenWindowStream, *, tau: float,
             batch_size: int = 8, cap: int = 512,
             adaptive_eval: bool = True) -> tuple[float, float]:
    """Mean next-token loss over up to ``cap`` fixed-order batches, plus
    derived perplexity exp(min(loss, 20)).

    Auxiliary memory losses are excluded. With ``adaptive_eval`` the
    write-back and usage smoothing stay active during the evaluation
    forwards, mutating memory state exactly as in training.
    """
    window = model.config.context
    if window_count(val_stream, window) < 1:
        raise ConfigurationError("validation stream has no complete window")
    losses = []
    for inputs, targets in _val_batches(val_stream, window, batch_size):
        result = forward_batch(model, inputs, tau=tau, adaptive=adaptive_eval)
        losses.append(nm.cross_entropy(result.logits, targets.reshape(-1)).item())
        if len(losses) >= cap:
            break
    val_loss = float(np.mean(losses))
    return val_loss, perplexity(val_loss)


def perplexity(loss: float) -> float:
    return math.exp(min(loss, PPL_EXP_CLIP))


def unigram_entropy_baseline(train_stream: TokenWindowStream,
                             val_stream: TokenWindowStream) -> float:
    """Validation cross-entropy of the add-one-smoothed training unigram."""
    v = train_stream.vocab_size
    counts = np.bincount(train_stream.ids, minlength=v).astype(np.float64) + 1.0
    log_probs = np.log(counts / counts.sum())
    return float(-log_probs[val_stream.ids].mean())


def _memory_diagnostics(model: Model) -> dict:
    """Bank-level statistics for the evaluation log records."""
    from .diagnostics import n_eff_of_usage, row_entropies, transition_probs

    if model.config.block_kind != GRAPH_MEMORY:
        return {"n_eff_mean": None, "n_eff_min": None, "dead_total": None,
                "mean_cos_sim": None, "edge_entropy_mean": None,
                "max_edge_mass": None, "edge_row_sim": None}
    n_effs, cosines, entropies, masses, row_sims = [], [], [], [], []
    dead_total = 0
    delta = model.config.maintenance.delta_dead
    for block in model.blocks:
        bank = block.cell.bank
        n_effs.append(n_eff_of_usage(bank.usage))
        dead_total += int(np.count_nonzero(bank.usage < delta))
        cosines.append(mean_pairwise_cosine(bank.centroids.data))
        p = transition_probs(block.cell.graph.edges.data)
        entropies.append(float(row_entropies(p).mean()))
        masses.append(float(p.max(axis=1).mean()))
        p_n = p / np.linalg.norm(p, axis=1, keepdims=True)
        sim = p_n @ p_n.T
        f = p.shape[0]
        row_sims.append(float((sim.sum() - np.trace(sim)) / (f * (f - 1))))
    return {"n_eff_mean": float(np.mean(n_effs)), "n_eff_min": float(np.min(n_effs)),
            "dead_total": dead_total, "mean_cos_sim": float(np.mean(cosines)),
            "edge_entropy_mean": float(np.mean(entropies)),
            "max_edge_mass": float(np.mean(masses)),
            "edge_row_sim": float(np.mean(row_sims))}


@dataclass
class TrainResult:
    steps: int
    best_val_loss: float | None
    final_val_loss: float | None
    step_losses: list[float] = field(default_factory=list)


class Trainer:
    """Single-writer training loop over a model + streams + output dir.

    Epoch order is a permutation seeded by (seed, epoch), so a resumed run
    regenerates the identical window order and skips to its step offset.
    """

    def __init__(self, model: Model, train_stream: TokenWindowStream,
                 val_stream: TokenWindowStream | None, config: TrainConfig,
                 out_dir: str | Path):
        self.model = model
        self.train_stream = train_stream
        self.val_stream = val_stream
        self.config = config
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.optimizer = AdamW(model.parameters(), beta1=config.beta1,
                               beta2=config.beta2, weight_decay=config.weight_decay)
        self.rng = np.random.default_rng(config.seed)
        self.global_step = 0
        self.best_val_loss: float | None = None
        self._pool_by_block: list[np.ndarray] | None = None

        window = model.config.context
        n_windows = window_count(train_stream, window)
        per_step = config.batch_size * config.grad_accum
        self.steps_per_epoch = n_windows // per_step
        if self.steps_per_epoch < 1:
            raise ConfigurationError(
                f"training stream has {n_windows} windows; one step needs {per_step}")

    # -- persistence ---------------------------------------------------

    def save(self, path: Path) -> None:
        tau = temperature_schedule(self.global_step, self.config.total_steps,
                                   self.model.config.tau_max, self.model.config.tau_min)
        save_checkpoint(path, self.model, step=self.global_step, tau=tau,
                        best_val_loss=self.best_val_loss,
                        rng_state=self.rng.bit_generator.state,
                        optimizer_state=self.optimizer.state(),
                        train_config=self.config)

    @classmethod
    def resume(cls, ckpt_path: str | Path, train_stream: TokenWindowStream,
               val_stream: TokenWindowStream | None, out_dir: str | Path) -> "Trainer":
        model, meta, train_config, opt_state = load_checkpoint(ckpt_path)
        if train_config is None:
            raise ConfigurationError(f"{ckpt_path} carries no training config; cannot resume")
        trainer = cls(model, train_stream, val_stream, train_config, out_dir)
        trainer.global_step = meta["step"]
        trainer.best_val_loss = meta["best_val_loss"]
        if meta.get("rng_state") is not None:
            trainer.rng.bit_generator.state = meta["rng_state"]
        if opt_state is not None:
            trainer.optimizer.load_state(opt_state)
        return trainer

    # -- the loop ------------------------------------------------------

    def _epoch_permutation(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.config.seed, epoch]).permutation(
            window_count(self.train_stream, self.model.config.context))

    def _micro_batches(self, perm: np.ndarray, pos: int):
        b, a = self.config.batch_size, self.config.grad_accum
        window = self.model.config.context
        base = pos * b * a
        batches = []
        for k in range(a):
            idx = perm[base + k * b: base + (k + 1) * b]
            pairs = [get_window(self.train_stream, int(i), window) for i in idx]
            batches.append((np.stack([p[0] for p in pairs]),
                            np.stack([p[1] for p in pairs])))
        return batches

    def _log(self, handle, record: dict) -> None:
        handle.write(json.dumps(record) + "\n")
        handle.flush()

    def _evaluate(self, log_handle) -> float | None:
        if self.val_stream is None:
            return None
        tau = temperature_schedule(self.global_step, self.config.total_steps,
                                   self.model.config.tau_max, self.model.config.tau_min)
        val_loss, ppl = validate(self.model, self.val_stream, tau=tau,
                                 batch_size=self.config.batch_size,
                                 cap=self.config.eval_batches_cap,
                                 adaptive_eval=self.config.adaptive_eval)
        record = {"step": self.global_step, "val_loss": val_loss, "ppl": ppl}
        record.update(_memory_diagnostics(self.model))
        self._log(log_handle, record)
        if self.best_val_loss is None or val_loss < self.best_val_loss:
            self.best_val_loss = val_loss
            self.save(self.out_dir / "best.ckpt")
        self.save(self.out_dir / "last.ckpt")
        return val_loss

    def run(self) -> TrainResult:
        cfg = self.config
        mcfg = self.model.config
        losses: list[float] = []
        started = time.time()
        final_val = None
        with open(self.out_dir / "train_log.jsonl", "a") as log, \
                open(self.out_dir / "maintenance.jsonl", "a") as maint_log:
            while self.global_step < cfg.total_steps:
                epoch = self.global_step // self.steps_per_epoch
                if cfg.epochs and epoch >= cfg.epochs:
                    break
                perm = self._epoch_permutation(epoch)
                pos = self.global_step % self.steps_per_epoch
                while pos < self.steps_per_epoch and self.global_step < cfg.total_steps:
                    try:
                        report, pool = train_step(
                            self.model, self.optimizer,
                            self._micro_batches(perm, pos),
                            step_index=self.global_step, config=cfg, rng=self.rng)
                    except (TrainingError, DomainError):
                        # non-finite values anywhere in the step: dump and abort
                        self._dump_abort_state()
                        raise
                    self._pool_by_block = pool
                    self.global_step += 1
                    pos += 1
                    losses.append(report.parts.lm)
                    self._log(log, report.to_json())

                    if (mcfg.block_kind == GRAPH_MEMORY
                            and self.global_step % mcfg.maintenance.k_maint == 0):
                        self._run_maintenance(maint_log)
                    if cfg.eval_every and self.global_step % cfg.eval_every == 0:
                        final_val = self._evaluate(log)
            if not cfg.eval_every or self.global_step % cfg.eval_every != 0:
                final_val = self._evaluate(log)
        logger.info("trained %d steps in %.1fs", self.global_step, time.time() - started)
        return TrainResult(steps=self.global_step, best_val_loss=self.best_val_loss,
                           final_val_loss=final_val, step_losses=losses)

    def _run_maintenance(self, maint_log) -> None:
        pool = self._pool_by_block or []
        for i, block in enumerate(self.model.blocks):
            if block.cell is None:
                continue
            states = pool[i] if i < len(pool) else None
            report = maintenance_step(block.cell.bank, states,
                                      self.model.config.maintenance, self.rng,
                                      step=self.global_step, block=i)
            if report.resets or report.merges:
                logger.info("maintenance step %d block %d: %d resets, %d merges",
                            self.global_step, i, report.resets, report.merges)
            self._log(maint_log, report.to_json())

    def _dump_abort_state(self) -> None:
        dump = {"step": self.global_step,
                "diagnostics": _memory_diagnostics(self.model)}
        (self.out_dir / "abort.json").write_text(json.dumps(dump, indent=2))
